#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "clmk/tensor.hpp"
#include "helpers.hpp"

using namespace clmk;

namespace {

Tensor64 rand_t(Shape shape, uint64_t seed, double lo = -2.0, double hi = 2.0) {
    return uniform<double>(std::move(shape), lo, hi, seed);
}

// Reduce an arbitrary output to a scalar with fixed mixing weights so the
// finite-difference check exercises every output element.
Tensor64 mix_to_scalar(const Tensor64& t, uint64_t seed) {
    const Tensor64 w = uniform<double>(t.shape(), -1.0, 1.0, seed);
    Tensor64 flat = reshape(mul(t, w), {t.numel()});
    return sum(flat, 0);
}

} // namespace

TEST_CASE("forward basics") {
    SUBCASE("matmul identity") {
        const Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
        const Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
        const Tensor c = matmul(a, eye);
        CHECK(std::vector<float>(c.data().begin(), c.data().end()) == std::vector<float>{1, 2, 3, 4});
    }
    SUBCASE("softmax of zeros is uniform") {
        const Tensor s = softmax(Tensor::from_data({4}, {0, 0, 0, 0}), 0);
        for (float v : s.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-7));
    }
    SUBCASE("softmax([1,2,3]) against an extended-precision oracle") {
        // Oracle computed with long double arithmetic, independent of the
        // library's softmax path.
        long double e1 = expl(1.0L), e2 = expl(2.0L), e3 = expl(3.0L);
        const long double denom = e1 + e2 + e3;
        const double expect[3] = {static_cast<double>(e1 / denom), static_cast<double>(e2 / denom),
                                  static_cast<double>(e3 / denom)};
        const Tensor s = softmax(Tensor::from_data({3}, {1, 2, 3}), 0);
        for (int i = 0; i < 3; ++i) CHECK(std::fabs(s.data()[i] - expect[i]) < 1e-6);
    }
    SUBCASE("softmax rows sum to one and shift invariance") {
        const Tensor64 x = rand_t({5, 7}, 123);
        const Tensor64 s = softmax(x, 1);
        for (int i = 0; i < 5; ++i) {
            double row = 0;
            for (int j = 0; j < 7; ++j) row += s.data()[i * 7 + j];
            CHECK(std::fabs(row - 1.0) < 1e-6);
        }
        Tensor64 shifted = x.clone();
        for (auto& v : shifted.data()) v += 3.25;
        const Tensor64 s2 = softmax(shifted, 1);
        for (int64_t i = 0; i < s.numel(); ++i) CHECK(std::fabs(s.data()[i] - s2.data()[i]) < 1e-6);
    }
    SUBCASE("layer_norm normalizes") {
        const Tensor64 x = rand_t({4, 16}, 55);
        const Tensor64 gain = Tensor64::filled({16}, 1.0);
        const Tensor64 bias = Tensor64::filled({16}, 0.0);
        const Tensor64 y = layer_norm(x, gain, bias, 1, 1e-5);
        for (int i = 0; i < 4; ++i) {
            double mu = 0, var = 0;
            for (int j = 0; j < 16; ++j) mu += y.data()[i * 16 + j];
            mu /= 16;
            for (int j = 0; j < 16; ++j) var += (y.data()[i * 16 + j] - mu) * (y.data()[i * 16 + j] - mu);
            var /= 16;
            CHECK(std::fabs(mu) < 1e-6);
            CHECK(std::fabs(var - 1.0) < 1e-4);
        }
    }
    SUBCASE("shape mismatch reports both shapes") {
        const Tensor a = Tensor::zeros({2, 3});
        const Tensor b = Tensor::zeros({4});
        try {
            (void)matmul(a, b);
            FAIL("expected ShapeMismatch");
        } catch (const ShapeMismatch& e) {
            const std::string msg = e.what();
            CHECK(msg.find("[2, 3]") != std::string::npos);
            CHECK(msg.find("[4]") != std::string::npos);
        }
        CHECK_THROWS_AS((void)add(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})), ShapeMismatch);
        CHECK_THROWS_AS((void)add(Tensor::zeros({2, 3, 1}), Tensor::zeros({2, 3, 4})), ShapeMismatch);
    }
}

TEST_CASE("backward basics") {
    SUBCASE("mean gradient is 1/n") {
        Tensor x = Tensor::from_data({6}, {1, 2, 3, 4, 5, 6});
        x.set_requires_grad(true);
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = mean(x, 0);
        tape.backward(loss);
        for (float g : x.grad()) CHECK(g == doctest::Approx(1.0 / 6.0).epsilon(1e-7));
    }
    SUBCASE("d(x*x) = 2x") {
        Tensor x = Tensor::from_data({1}, {3});
        x.set_requires_grad(true);
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = sum(mul(x, x), 0);
        tape.backward(loss);
        CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-7));
    }
    SUBCASE("accumulation when one tensor feeds two consumers") {
        Tensor x = Tensor::from_data({2}, {1, 2});
        x.set_requires_grad(true);
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = sum(add(mul(x, x), x), 0); // d/dx = 2x + 1
        tape.backward(loss);
        CHECK(x.grad()[0] == doctest::Approx(3.0).epsilon(1e-6));
        CHECK(x.grad()[1] == doctest::Approx(5.0).epsilon(1e-6));
    }
    SUBCASE("non-scalar loss rejected") {
        Tensor x = Tensor::zeros({3});
        x.set_requires_grad(true);
        Tape tape;
        TapeScope scope(tape);
        Tensor y = mul(x, x);
        CHECK_THROWS_AS(tape.backward(y), NotScalarLoss);
    }
    SUBCASE("empty tape rejected") {
        Tape tape;
        CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0f)), EmptyTape);
    }
}

// Every primitive against central finite differences in the 64-bit shadow
// configuration; tolerance rtol 1e-4 with atol 1e-6 absorbing fdap noise.
TEST_CASE("gradient checks for every primitive") {
    auto check = [](std::vector<Tensor64> inputs, const std::function<Tensor64()>& fwd) {
        auto res = testutil::grad_check(inputs, fwd);
        CHECK(res.checked > 0);
        CHECK(res.max_rel_err < 1e-4);
    };

    SUBCASE("matmul 2d x 2d") {
        Tensor64 a = rand_t({3, 4}, 1), b = rand_t({4, 5}, 2);
        check({a, b}, [&] { return mix_to_scalar(matmul(a, b), 90); });
    }
    SUBCASE("matmul batched x shared rhs") {
        Tensor64 a = rand_t({2, 3, 4}, 3), b = rand_t({4, 5}, 4);
        check({a, b}, [&] { return mix_to_scalar(matmul(a, b), 91); });
    }
    SUBCASE("matmul batched x batched") {
        Tensor64 a = rand_t({2, 3, 4}, 5), b = rand_t({2, 4, 5}, 6);
        check({a, b}, [&] { return mix_to_scalar(matmul(a, b), 92); });
    }
    SUBCASE("add / sub / mul elementwise") {
        Tensor64 a = rand_t({3, 4}, 7), b = rand_t({3, 4}, 8);
        check({a, b}, [&] { return mix_to_scalar(add(a, b), 93); });
        check({a, b}, [&] { return mix_to_scalar(sub(a, b), 94); });
        check({a, b}, [&] { return mix_to_scalar(mul(a, b), 95); });
    }
    SUBCASE("broadcast add / mul over leading axes") {
        Tensor64 a = rand_t({2, 3, 4}, 9), b = rand_t({4}, 10);
        check({a, b}, [&] { return mix_to_scalar(add(a, b), 96); });
        check({a, b}, [&] { return mix_to_scalar(mul(a, b), 97); });
        Tensor64 c = rand_t({1, 3, 4}, 11);
        check({a, c}, [&] { return mix_to_scalar(sub(a, c), 98); });
    }
    SUBCASE("transpose") {
        Tensor64 a = rand_t({2, 3, 4}, 12);
        check({a}, [&] { return mix_to_scalar(transpose(a, 1, 2), 99); });
        check({a}, [&] { return mix_to_scalar(transpose(a, 0, 2), 100); });
    }
    SUBCASE("reshape") {
        Tensor64 a = rand_t({3, 4}, 13);
        check({a}, [&] { return mix_to_scalar(reshape(a, {2, 6}), 101); });
    }
    SUBCASE("concat") {
        Tensor64 a = rand_t({2, 2, 3}, 14), b = rand_t({2, 4, 3}, 15);
        check({a, b}, [&] { return mix_to_scalar(concat<double>({a, b}, 1), 102); });
    }
    SUBCASE("slice") {
        Tensor64 a = rand_t({2, 5, 3}, 16);
        check({a}, [&] { return mix_to_scalar(slice(a, 1, 1, 3), 103); });
    }
    SUBCASE("sum and mean along each axis") {
        Tensor64 a = rand_t({3, 4}, 17);
        check({a}, [&] { return mix_to_scalar(sum(a, 0), 104); });
        check({a}, [&] { return mix_to_scalar(sum(a, 1), 105); });
        check({a}, [&] { return mix_to_scalar(mean(a, 0), 106); });
        check({a}, [&] { return mix_to_scalar(mean(a, 1), 107); });
    }
    SUBCASE("softmax and log_softmax") {
        Tensor64 a = rand_t({3, 4}, 18);
        check({a}, [&] { return mix_to_scalar(softmax(a, 1), 108); });
        check({a}, [&] { return mix_to_scalar(log_softmax(a, 1), 109); });
        Tensor64 b = rand_t({3, 4, 2}, 19);
        check({b}, [&] { return mix_to_scalar(softmax(b, 1), 110); });
    }
    SUBCASE("log and exp") {
        Tensor64 a = rand_t({3, 4}, 20, 0.1, 2.2); // positive domain for log
        check({a}, [&] { return mix_to_scalar(log(a), 111); });
        Tensor64 b = rand_t({3, 4}, 21);
        check({b}, [&] { return mix_to_scalar(exp(b), 112); });
    }
    SUBCASE("gelu") {
        Tensor64 a = rand_t({3, 4}, 22);
        check({a}, [&] { return mix_to_scalar(gelu(a), 113); });
    }
    SUBCASE("scale") {
        Tensor64 a = rand_t({3, 4}, 23);
        check({a}, [&] { return mix_to_scalar(scale(a, -1.7), 114); });
    }
    SUBCASE("layer_norm wrt input, gain and bias") {
        Tensor64 x = rand_t({3, 8}, 24);
        Tensor64 g = rand_t({8}, 25, 0.5, 1.5);
        Tensor64 b = rand_t({8}, 26, -0.5, 0.5);
        check({x, g, b}, [&] { return mix_to_scalar(layer_norm(x, g, b, 1, 1e-5), 115); });
        // Non-trailing axis.
        Tensor64 y = rand_t({3, 8, 2}, 27);
        check({y, g, b}, [&] { return mix_to_scalar(layer_norm(y, g, b, 1, 1e-5), 116); });
    }
    SUBCASE("extract_patches") {
        Tensor64 img = rand_t({2, 4, 4, 3}, 28, 0.0, 1.0);
        check({img}, [&] { return mix_to_scalar(extract_patches(img, 2), 117); });
    }
}

TEST_CASE("seeded rng tensors") {
    SUBCASE("std zero collapses to the mean") {
        const Tensor t = normal<float>({100}, 1.5, 0.0, 3);
        for (float v : t.data()) CHECK(v == doctest::Approx(1.5).epsilon(1e-9));
    }
    SUBCASE("same seed reproduces, different seed differs") {
        const Tensor a = normal<float>({64}, 0, 1, 5);
        const Tensor b = normal<float>({64}, 0, 1, 5);
        const Tensor c = normal<float>({64}, 0, 1, 6);
        CHECK(std::vector<float>(a.data().begin(), a.data().end()) ==
              std::vector<float>(b.data().begin(), b.data().end()));
        CHECK(std::vector<float>(a.data().begin(), a.data().end()) !=
              std::vector<float>(c.data().begin(), c.data().end()));
    }
    SUBCASE("normal moments over 1e5 draws") {
        const Tensor64 t = normal<double>({100000}, 0.0, 1.0, 1234);
        double mean_acc = 0;
        for (double v : t.data()) mean_acc += v;
        mean_acc /= 1e5;
        double var = 0;
        for (double v : t.data()) var += (v - mean_acc) * (v - mean_acc);
        const double stddev = std::sqrt(var / 1e5);
        CHECK(std::fabs(mean_acc) < 0.01);
        CHECK(std::fabs(stddev - 1.0) < 0.01);
    }
    SUBCASE("uniform bounds and moments") {
        const Tensor64 t = uniform<double>({100000}, -1.0, 3.0, 77);
        double mn = 1e9, mx = -1e9, acc = 0;
        for (double v : t.data()) {
            mn = std::min(mn, v);
            mx = std::max(mx, v);
            acc += v;
        }
        CHECK(mn >= -1.0);
        CHECK(mx < 3.0);
        CHECK(std::fabs(acc / 1e5 - 1.0) < 0.02);
    }
}

TEST_CASE("tape determinism: identical runs produce identical bits") {
    auto run = [] {
        Tensor64 x = rand_t({4, 6}, 500);
        x.set_requires_grad(true);
        Tensor64 w = rand_t({6, 3}, 501);
        w.set_requires_grad(true);
        Tape64 tape;
        TapeScope64 scope(tape);
        Tensor64 y = softmax(matmul(gelu(x), w), 1);
        Tensor64 loss = mean(reshape(y, {12}), 0);
        tape.backward(loss);
        std::vector<double> out(loss.data().begin(), loss.data().end());
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    CHECK(run() == run());
}
