#include "clmk/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "clmk/rng.hpp"

namespace clmk {

using nlohmann::json;

std::string to_string(Label l) {
    switch (l) {
        case Label::AO: return "AO";
        case Label::ICV_CEC: return "ICV_CEC";
        case Label::REC_RF: return "REC_RF";
        case Label::OTHER: return "OTHER";
    }
    throw Error("invalid label value");
}

Label label_from_string(const std::string& s) {
    if (s == "AO") return Label::AO;
    if (s == "ICV_CEC") return Label::ICV_CEC;
    if (s == "REC_RF") return Label::REC_RF;
    if (s == "OTHER") return Label::OTHER;
    throw Error("unknown label: " + s);
}

Label label_from_index(int i) {
    if (i < 0 || i >= kNumClasses) throw Error("label index out of range: " + std::to_string(i));
    return static_cast<Label>(i);
}

std::string to_string(Split s) {
    switch (s) {
        case Split::TRAIN: return "TRAIN";
        case Split::VAL: return "VAL";
        case Split::TEST: return "TEST";
        case Split::SNAPSHOT: return "SNAPSHOT";
    }
    throw Error("invalid split value");
}

Split split_from_string(const std::string& s) {
    if (s == "TRAIN") return Split::TRAIN;
    if (s == "VAL") return Split::VAL;
    if (s == "TEST") return Split::TEST;
    if (s == "SNAPSHOT") return Split::SNAPSHOT;
    throw Error("unknown split: " + s);
}

namespace {

const std::set<std::string> kRecordFields = {"video_id", "frame_idx", "image_path", "label_a", "label_b", "split"};

void check_invariants(const Manifest& m) {
    std::set<std::pair<std::string, int64_t>> seen;
    std::set<std::string> snapshot_videos, other_videos;
    for (const auto& r : m.records) {
        if (!seen.insert({r.video_id, r.frame_idx}).second)
            throw DuplicateFrame("duplicate (video_id, frame_idx): (" + r.video_id + ", " + std::to_string(r.frame_idx) + ")");
        (r.split == Split::SNAPSHOT ? snapshot_videos : other_videos).insert(r.video_id);
    }
    for (const auto& v : snapshot_videos)
        if (other_videos.count(v))
            throw Error("video " + v + " appears in both SNAPSHOT and a train/val/test split");
}

} // namespace

Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path.string());
    Manifest m;
    m.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(line_no, e.what());
        }
        if (!j.is_object()) throw ParseError(line_no, "record is not a JSON object");
        for (const auto& [key, _] : j.items())
            if (!kRecordFields.count(key)) throw ParseError(line_no, "unknown field: " + key);
        for (const auto& f : kRecordFields)
            if (!j.contains(f)) throw ParseError(line_no, "missing field: " + f);
        FrameRecord r;
        try {
            r.video_id = j.at("video_id").get<std::string>();
            r.frame_idx = j.at("frame_idx").get<int64_t>();
            r.image_path = j.at("image_path").get<std::string>();
            r.label_a = label_from_string(j.at("label_a").get<std::string>());
            r.label_b = label_from_string(j.at("label_b").get<std::string>());
            r.split = split_from_string(j.at("split").get<std::string>());
        } catch (const json::exception& e) {
            throw ParseError(line_no, e.what());
        } catch (const Error& e) {
            throw ParseError(line_no, e.what());
        }
        if (r.frame_idx < 0) throw ParseError(line_no, "frame_idx must be non-negative");
        m.records.push_back(std::move(r));
    }
    check_invariants(m);
    return m;
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
    check_invariants(manifest);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open manifest for writing: " + path.string());
    for (const auto& r : manifest.records) {
        json j;
        j["video_id"] = r.video_id;
        j["frame_idx"] = r.frame_idx;
        j["image_path"] = r.image_path;
        j["label_a"] = to_string(r.label_a);
        j["label_b"] = to_string(r.label_b);
        j["split"] = to_string(r.split);
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("short write: " + path.string());
}

Manifest consensus_filter(const Manifest& manifest) {
    Manifest out;
    out.base_dir = manifest.base_dir;
    for (const auto& r : manifest.records)
        if (r.label_a == r.label_b) out.records.push_back(r);
    return out;
}

Manifest split_by_video(const Manifest& manifest, std::array<double, 3> ratios, uint64_t seed) {
    double total = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(total - 1.0) > 1e-9) throw Error("split ratios must sum to 1");
    for (double r : ratios)
        if (r < 0) throw Error("split ratios must be non-negative");

    // Distinct non-snapshot videos, in first-appearance order.
    std::vector<std::string> videos;
    std::set<std::string> seen;
    for (const auto& r : manifest.records)
        if (r.split != Split::SNAPSHOT && seen.insert(r.video_id).second) videos.push_back(r.video_id);

    int nonzero = 0;
    for (double r : ratios)
        if (r > 0) ++nonzero;
    if (videos.size() < static_cast<size_t>(nonzero))
        throw InsufficientVideos("need at least " + std::to_string(nonzero) + " videos, have " + std::to_string(videos.size()));

    // Largest-remainder apportionment of the video count.
    const int64_t n = static_cast<int64_t>(videos.size());
    std::array<int64_t, 3> count;
    std::array<double, 3> remainder;
    int64_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double ideal = ratios[i] * static_cast<double>(n);
        count[i] = static_cast<int64_t>(std::floor(ideal));
        remainder[i] = ideal - static_cast<double>(count[i]);
        assigned += count[i];
    }
    std::array<int, 3> order = {0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainder[a] > remainder[b]; });
    for (int i = 0; assigned < n; ++i, ++assigned) count[order[static_cast<size_t>(i % 3)]]++;

    // Order videos by their seeded hash; ties fall back to the id itself.
    std::vector<std::pair<uint64_t, std::string>> keyed;
    keyed.reserve(videos.size());
    for (const auto& v : videos) keyed.emplace_back(counter_hash(seed, fnv1a64(v)), v);
    std::sort(keyed.begin(), keyed.end());

    std::map<std::string, Split> assignment;
    int64_t idx = 0;
    for (int s = 0; s < 3; ++s)
        for (int64_t k = 0; k < count[static_cast<size_t>(s)]; ++k, ++idx)
            assignment[keyed[static_cast<size_t>(idx)].second] = static_cast<Split>(s);

    Manifest out = manifest;
    for (auto& r : out.records)
        if (r.split != Split::SNAPSHOT) r.split = assignment.at(r.video_id);
    return out;
}

ClassDistribution class_distribution(const Manifest& manifest, Split split) {
    std::array<int64_t, kNumClasses> counts = {0, 0, 0, 0};
    int64_t total = 0;
    for (const auto& r : manifest.records)
        if (r.split == split) {
            counts[static_cast<size_t>(r.effective_label())]++;
            ++total;
        }
    if (total == 0) throw EmptySplit("no records in split " + to_string(split));
    ClassDistribution d;
    for (int i = 0; i < kNumClasses; ++i)
        d.proportion[static_cast<size_t>(i)] = static_cast<double>(counts[static_cast<size_t>(i)]) / static_cast<double>(total);
    return d;
}

std::vector<const FrameRecord*> records_in_split(const Manifest& manifest, Split split) {
    std::vector<const FrameRecord*> out;
    for (const auto& r : manifest.records)
        if (r.split == split) out.push_back(&r);
    return out;
}

} // namespace clmk
