#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "clmk/error.hpp"

namespace clmk {

// Class indices are fixed: AO=0, ICV_CEC=1, REC_RF=2, OTHER=3. The ileocecal
// valve and cecum landmark co-occur and are kept as one label.
enum class Label : int { AO = 0, ICV_CEC = 1, REC_RF = 2, OTHER = 3 };

inline constexpr int kNumClasses = 4;
inline constexpr std::array<Label, 4> kAllLabels = {Label::AO, Label::ICV_CEC, Label::REC_RF, Label::OTHER};

std::string to_string(Label l);
Label label_from_string(const std::string& s);
Label label_from_index(int i);

enum class Split : int { TRAIN = 0, VAL = 1, TEST = 2, SNAPSHOT = 3 };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

// One annotated frame. Two independent annotations are kept so the consensus
// filter stays re-runnable; after filtering label_a == label_b and label_a is
// the effective label downstream.
struct FrameRecord {
    std::string video_id;
    int64_t frame_idx = 0;
    std::string image_path; // relative to the manifest's directory
    Label label_a = Label::OTHER;
    Label label_b = Label::OTHER;
    Split split = Split::TRAIN;

    Label effective_label() const { return label_a; }

    bool operator==(const FrameRecord&) const = default;
};

struct Manifest {
    std::vector<FrameRecord> records;
    // Directory image_path entries resolve against; set by load_manifest and
    // the synthetic generator, empty for in-memory manifests.
    std::filesystem::path base_dir;

    std::filesystem::path resolve(const FrameRecord& r) const { return base_dir / r.image_path; }
};

// Per-class proportions; sums to 1 within 1e-9.
struct ClassDistribution {
    std::array<double, kNumClasses> proportion = {0, 0, 0, 0};

    double operator[](Label l) const { return proportion[static_cast<size_t>(l)]; }
};

// JSON Lines manifest, one record per line with exactly the fields
// video_id, frame_idx, image_path, label_a, label_b, split. Unknown fields
// are rejected. Line order is significant and preserved.
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

// Keeps exactly the records with label_a == label_b, order preserved.
Manifest consensus_filter(const Manifest& manifest);

// Assigns every non-SNAPSHOT video to exactly one of TRAIN/VAL/TEST.
// Videos are ordered by counter_hash(seed, fnv1a64(video_id)) and the split
// sizes follow largest-remainder rounding of the ratios, so the assignment
// is deterministic given the seed. SNAPSHOT records pass through unchanged.
Manifest split_by_video(const Manifest& manifest, std::array<double, 3> ratios, uint64_t seed);

// Proportion of each effective label within one split.
ClassDistribution class_distribution(const Manifest& manifest, Split split);

std::vector<const FrameRecord*> records_in_split(const Manifest& manifest, Split split);

} // namespace clmk
