#pragma once

// Shared fixtures and independent oracles for the test suites. Oracles here
// must stay independent of the library code paths they check.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

#include "clmk/image.hpp"
#include "clmk/rng.hpp"
#include "clmk/tensor.hpp"

namespace testutil {

// Unique scratch directory, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("clmk_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline clmk::Image random_image(int w, int h, uint64_t seed) {
    clmk::Image img;
    img.width = w;
    img.height = h;
    img.pixels.resize(static_cast<size_t>(w) * h * 3);
    clmk::CounterRng rng(seed);
    for (auto& v : img.pixels) v = static_cast<float>(rng.next_unit());
    return img;
}

inline uint64_t file_checksum(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    uint64_t h = 0xCBF29CE484222325ull;
    char c;
    while (in.get(c)) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    return h;
}

inline uint64_t tree_checksum(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    uint64_t h = 0xCBF29CE484222325ull;
    for (const auto& f : files) {
        const std::string rel = std::filesystem::relative(f, dir).string();
        for (char c : rel) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001B3ull;
        }
        h ^= file_checksum(f);
        h *= 0x100000001B3ull;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle (64-bit shadow evaluation)
// ---------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t checked = 0;
};

// |a - b| <= atol + rtol * max(|a|, |b|): the reported rel err is the
// smallest rtol that would pass with the given atol.
inline double rel_err(double a, double b, double atol) {
    const double diff = std::fabs(a - b);
    const double mag = std::max(std::fabs(a), std::fabs(b));
    if (diff <= atol) return 0.0;
    return (diff - atol) / std::max(mag, 1e-300);
}

// Central finite differences (h = 1e-3) against the taped backward of
// `forward`, which must rebuild the graph from `inputs` on every call.
inline GradCheckResult grad_check(std::vector<clmk::Tensor64>& inputs,
                                  const std::function<clmk::Tensor64()>& forward,
                                  double atol = 1e-6) {
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        clmk::Tape64 tape;
        clmk::TapeScope64 scope(tape);
        clmk::Tensor64 loss = forward();
        tape.backward(loss);
        for (auto& t : inputs) {
            t.ensure_grad();
            auto g = t.grad();
            analytic.emplace_back(g.begin(), g.end());
        }
    }

    constexpr double h = 1e-3;
    GradCheckResult res;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        auto data = inputs[ti].data();
        for (int64_t i = 0; i < inputs[ti].numel(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double up = forward().item();
            data[i] = saved - h;
            const double down = forward().item();
            data[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic[ti][static_cast<size_t>(i)], fd, atol));
            ++res.checked;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Dense symmetric eigensolver oracle (cyclic Jacobi)
// ---------------------------------------------------------------------------

// Returns eigenvalues in descending order. Independent of the library's
// power-iteration path.
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a, int n) {
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a[static_cast<size_t>(p * n + q)] * a[static_cast<size_t>(p * n + q)];
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = a[static_cast<size_t>(p * n + q)];
                if (std::fabs(apq) < 1e-300) continue;
                const double app = a[static_cast<size_t>(p * n + p)];
                const double aqq = a[static_cast<size_t>(q * n + q)];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a[static_cast<size_t>(k * n + p)];
                    const double akq = a[static_cast<size_t>(k * n + q)];
                    a[static_cast<size_t>(k * n + p)] = c * akp - s * akq;
                    a[static_cast<size_t>(k * n + q)] = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a[static_cast<size_t>(p * n + k)];
                    const double aqk = a[static_cast<size_t>(q * n + k)];
                    a[static_cast<size_t>(p * n + k)] = c * apk - s * aqk;
                    a[static_cast<size_t>(q * n + k)] = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> ev(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) ev[static_cast<size_t>(i)] = a[static_cast<size_t>(i * n + i)];
    std::sort(ev.begin(), ev.end(), std::greater<>());
    return ev;
}

// ---------------------------------------------------------------------------
// Subprocess helper for CLI tests
// ---------------------------------------------------------------------------

struct CliResult {
    int exit_code = -1;
    std::string out;
};

inline CliResult run_cli(const std::string& args) {
#ifdef CLMK_BIN_PATH
    const std::string cmd = std::string(CLMK_BIN_PATH) + " " + args + " 2>/dev/null";
#else
    const std::string cmd = "false";
#endif
    CliResult r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (pipe == nullptr) return r;
    char buf[4096];
    size_t got;
    while ((got = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, got);
    const int status = pclose(pipe);
    if (WIFEXITED(status)) r.exit_code = WEXITSTATUS(status);
    return r;
}

} // namespace testutil
