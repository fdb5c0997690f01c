#pragma once

#include <array>
#include <cstdint>
#include <filesystem>

#include "clmk/dataset.hpp"

namespace clmk {

// Configuration for the procedural dataset that stands in for clinical data.
// Counts are per class in label-index order (AO, ICV_CEC, REC_RF, OTHER).
struct SynthConfig {
    std::array<int, kNumClasses> train_counts = {0, 0, 0, 0};
    std::array<int, kNumClasses> val_counts = {0, 0, 0, 0};
    std::array<int, kNumClasses> test_counts = {0, 0, 0, 0};
    std::array<int, kNumClasses> snapshot_counts = {0, 0, 0, 0};
    int image_size = 64;
    // Fraction of records whose label_b deliberately disagrees with label_a.
    double disagreement_rate = 0.0;
    // Fraction of images wrapped in a dark border (exercises auto-crop).
    double border_fraction = 0.0;
    int border_px = 6;
    int frames_per_video = 20;

    void validate() const;
};

// Renders one frame per record and writes a manifest.jsonl plus PPM images
// under out_dir. Deterministic given the seed: same seed, byte-identical
// output. Classes use distinct shape motifs on a textured background:
// AO a dark ellipse with a concentric rim, ICV_CEC a bright curved ridge
// crossing a dark pocket, REC_RF a straight high-contrast tube entering from
// a border, OTHER background texture only.
Manifest generate_synthetic_dataset(const SynthConfig& cfg, uint64_t seed, const std::filesystem::path& out_dir);

} // namespace clmk
