#include "clmk/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

namespace clmk {

namespace {

inline double luma(const Image& img, int x, int y) {
    return 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
}

inline float clamp01(double v) {
    return static_cast<float>(std::min(1.0, std::max(0.0, v)));
}

} // namespace

Image Image::filled(int w, int h, float value) {
    Image img;
    img.width = w;
    img.height = h;
    img.pixels.assign(static_cast<size_t>(w) * static_cast<size_t>(h) * 3, value);
    img.validate();
    return img;
}

void Image::validate() const {
    if (width < 1 || height < 1) throw Error("image dims must be >= 1, got " + std::to_string(width) + "x" + std::to_string(height));
    if (pixels.size() != static_cast<size_t>(width) * static_cast<size_t>(height) * 3)
        throw Error("pixel buffer size does not match dims");
    for (float v : pixels)
        if (!(v >= 0.0f && v <= 1.0f)) throw Error("pixel value outside [0,1]");
}

LuminanceStats luminance_stats(const Image& img) {
    const int64_t n = static_cast<int64_t>(img.width) * img.height;
    double sum = 0.0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) sum += luma(img, x, y);
    const double mu = sum / static_cast<double>(n);
    double var = 0.0;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double d = luma(img, x, y) - mu;
            var += d * d;
        }
    return {mu, std::sqrt(var / static_cast<double>(n))};
}

CropRect detect_border_crop(const Image& img, double dark_threshold) {
    if (!(dark_threshold > 0.0 && dark_threshold < 1.0))
        throw Error("dark_threshold must be in (0,1), got " + std::to_string(dark_threshold));
    int min_x = img.width, max_x = -1, min_y = img.height, max_y = -1;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            if (luma(img, x, y) > dark_threshold) {
                min_x = std::min(min_x, x);
                max_x = std::max(max_x, x);
                min_y = std::min(min_y, y);
                max_y = std::max(max_y, y);
            }
    if (max_x < 0) throw DegenerateImage("no pixel above dark threshold " + std::to_string(dark_threshold));
    return {min_x, min_y, max_x - min_x + 1, max_y - min_y + 1};
}

Image apply_crop(const Image& img, const CropRect& rect) {
    if (rect.w < 1 || rect.h < 1 || rect.x0 < 0 || rect.y0 < 0 ||
        rect.x0 + rect.w > img.width || rect.y0 + rect.h > img.height)
        throw RectOutOfBounds("crop rect (" + std::to_string(rect.x0) + "," + std::to_string(rect.y0) + "," +
                              std::to_string(rect.w) + "," + std::to_string(rect.h) + ") outside " +
                              std::to_string(img.width) + "x" + std::to_string(img.height));
    Image out;
    out.width = rect.w;
    out.height = rect.h;
    out.pixels.resize(static_cast<size_t>(rect.w) * rect.h * 3);
    for (int y = 0; y < rect.h; ++y)
        for (int x = 0; x < rect.w; ++x)
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(rect.x0 + x, rect.y0 + y, c);
    return out;
}

Image adaptive_gamma_correct(const Image& img) {
    const LuminanceStats st = luminance_stats(img);
    const double sigma = std::max(st.sigma, 1e-3);
    const bool low_contrast = 4.0 * sigma <= 1.0 / 3.0;
    double gamma = low_contrast ? -std::log2(sigma) : std::exp((1.0 - (st.mu + sigma)) / 2.0);
    gamma = std::min(10.0, std::max(0.1, gamma));

    const bool bright = st.mu >= 0.5;
    if (bright && gamma == 1.0) return img; // exact identity

    Image out = img;
    if (bright) {
        for (float& v : out.pixels) v = clamp01(std::pow(static_cast<double>(v), gamma));
    } else {
        const double mu_g = std::pow(st.mu, gamma);
        for (float& v : out.pixels) {
            const double vg = std::pow(static_cast<double>(v), gamma);
            const double denom = vg + (1.0 - vg) * mu_g;
            v = denom > 0.0 ? clamp01(vg / denom) : 0.0f;
        }
    }
    return out;
}

Image resize_bilinear(const Image& img, int out_w, int out_h) {
    if (out_w < 1 || out_h < 1) throw Error("resize target must be >= 1");
    Image out;
    out.width = out_w;
    out.height = out_h;
    out.pixels.resize(static_cast<size_t>(out_w) * out_h * 3);

    auto src_coord = [](int o, int out_n, int in_n) -> double {
        if (out_n == 1) return (in_n - 1) / 2.0;
        return static_cast<double>(o) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1);
    };

    for (int y = 0; y < out_h; ++y) {
        const double sy = src_coord(y, out_h, img.height);
        const int y0 = static_cast<int>(std::floor(sy));
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double fy = sy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double sx = src_coord(x, out_w, img.width);
            const int x0 = static_cast<int>(std::floor(sx));
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double fx = sx - x0;
            for (int c = 0; c < 3; ++c) {
                const double top = (1.0 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c);
                const double bot = (1.0 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c);
                out.at(x, y, c) = clamp01((1.0 - fy) * top + fy * bot);
            }
        }
    }
    return out;
}

Image preprocess(const Image& img, const PreprocessConfig& cfg) {
    Image stage = apply_crop(img, detect_border_crop(img, cfg.dark_threshold));
    if (cfg.gamma_correction) stage = adaptive_gamma_correct(stage);
    if (stage.width != cfg.target_width || stage.height != cfg.target_height)
        stage = resize_bilinear(stage, cfg.target_width, cfg.target_height);
    return stage;
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> bytes;
    bytes.reserve(img.pixels.size());
    for (float v : img.pixels) bytes.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write: " + path.string());
}

namespace {

// Reads one whitespace-delimited PPM header token, skipping '#' comments.
std::string ppm_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {}
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    return tok;
}

} // namespace

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    if (ppm_token(in) != "P6") throw IoError("not a binary PPM (P6): " + path.string());
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(ppm_token(in));
        h = std::stoi(ppm_token(in));
        maxval = std::stoi(ppm_token(in));
    } catch (const std::exception&) {
        throw IoError("malformed PPM header: " + path.string());
    }
    if (w < 1 || h < 1 || maxval != 255) throw IoError("unsupported PPM header in " + path.string());

    Image img;
    img.width = w;
    img.height = h;
    const size_t n = static_cast<size_t>(w) * h * 3;
    std::vector<unsigned char> bytes(n);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n) throw IoError("truncated PPM payload: " + path.string());
    img.pixels.resize(n);
    for (size_t i = 0; i < n; ++i) img.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
    return img;
}

} // namespace clmk
