#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "clmk/error.hpp"

namespace clmk {

// RGB image, row-major [y][x][channel], every value in [0, 1].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> pixels; // width * height * 3

    static constexpr int channels = 3;

    static Image filled(int w, int h, float value);

    float at(int x, int y, int c) const { return pixels[static_cast<size_t>((y * width + x) * 3 + c)]; }
    float& at(int x, int y, int c) { return pixels[static_cast<size_t>((y * width + x) * 3 + c)]; }

    // Throws on inconsistent dimensions or out-of-range values.
    void validate() const;
};

struct CropRect {
    int x0 = 0;
    int y0 = 0;
    int w = 0;
    int h = 0;

    bool operator==(const CropRect&) const = default;
};

struct LuminanceStats {
    double mu = 0.0;    // mean luminance, [0, 1]
    double sigma = 0.0; // population standard deviation, [0, 0.5]
};

struct PreprocessConfig {
    double dark_threshold = 0.05;
    int target_width = 224;
    int target_height = 224;
    bool gamma_correction = true;
};

// ITU-R 601 luma of the whole image; two-pass mean / population stddev.
LuminanceStats luminance_stats(const Image& img);

// Minimal rectangle containing every pixel whose luminance exceeds
// dark_threshold. Throws DegenerateImage when no pixel qualifies.
CropRect detect_border_crop(const Image& img, double dark_threshold);

Image apply_crop(const Image& img, const CropRect& rect);

// Luminance-adaptive gamma transfer. With sigma floored at 1e-3:
// the image is low-contrast when 4*sigma <= 1/3, then gamma = -log2(sigma);
// otherwise gamma = exp((1 - (mu + sigma)) / 2). Gamma is clamped to
// [0.1, 10]. Bright images (mu >= 0.5) map v -> v^gamma; dark images map
// v -> v^gamma / (v^gamma + (1 - v^gamma) * mu^gamma). The same monotone
// map is applied to every channel value, so pixel rank order is preserved.
Image adaptive_gamma_correct(const Image& img);

// Corner-aligned bilinear resize; an output extent of 1 samples the input
// center along that dimension.
Image resize_bilinear(const Image& img, int out_w, int out_h);

// crop -> gamma -> resize, per config. Propagates DegenerateImage.
Image preprocess(const Image& img, const PreprocessConfig& cfg);

// ---- PPM (P6, maxval 255, binary) ----
// Write maps v_byte = round(v * 255); read maps v = v_byte / 255.
void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

} // namespace clmk
