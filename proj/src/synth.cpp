#include "clmk/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "clmk/image.hpp"
#include "clmk/rng.hpp"

namespace clmk {

namespace {

double smoothstep(double e0, double e1, double x) {
    const double t = std::min(1.0, std::max(0.0, (x - e0) / (e1 - e0)));
    return t * t * (3.0 - 2.0 * t);
}

struct Rgb {
    double r, g, b;
};

void blend(double& r, double& g, double& b, const Rgb& c, double mask) {
    r += (c.r - r) * mask;
    g += (c.g - g) * mask;
    b += (c.b - b) * mask;
}

// Dark ellipse with a brighter concentric rim.
struct AoMotif {
    double cx, cy, rx, ry, cos_t, sin_t;

    static AoMotif sample(CounterRng& rng) {
        AoMotif m;
        m.cx = rng.next_uniform(0.38, 0.62);
        m.cy = rng.next_uniform(0.38, 0.62);
        m.rx = rng.next_uniform(0.16, 0.26);
        m.ry = rng.next_uniform(0.16, 0.26);
        const double t = rng.next_uniform(0.0, 3.14159265358979323846);
        m.cos_t = std::cos(t);
        m.sin_t = std::sin(t);
        return m;
    }

    void paint(double u, double v, double& r, double& g, double& b) const {
        const double dx = (u - cx) * cos_t + (v - cy) * sin_t;
        const double dy = -(u - cx) * sin_t + (v - cy) * cos_t;
        const double d = std::sqrt((dx / rx) * (dx / rx) + (dy / ry) * (dy / ry));
        const double hole = 1.0 - smoothstep(0.80, 1.0, d);
        const double rim = smoothstep(1.0, 1.10, d) * (1.0 - smoothstep(1.22, 1.38, d));
        blend(r, g, b, {0.86, 0.60, 0.52}, rim);
        blend(r, g, b, {0.07, 0.04, 0.05}, hole);
    }
};

// Bright curved ridge crossing a dark pocket. The ridge is long and thick so
// its patch-level footprint (a bright curve sweeping the frame) stays
// distinct from the compact dark blob of the AO motif.
struct IcvMotif {
    double px, py, pr;             // pocket
    double ax, ay, ar, th, a0, a1; // arc

    static IcvMotif sample(CounterRng& rng) {
        IcvMotif m;
        m.px = rng.next_uniform(0.40, 0.60);
        m.py = rng.next_uniform(0.40, 0.60);
        m.pr = rng.next_uniform(0.14, 0.20);
        const double dir = rng.next_uniform(0.0, 2.0 * 3.14159265358979323846);
        const double off = m.pr * rng.next_uniform(0.4, 0.7);
        m.ax = m.px + off * std::cos(dir);
        m.ay = m.py + off * std::sin(dir);
        m.ar = rng.next_uniform(0.30, 0.42);
        m.th = rng.next_uniform(0.05, 0.08);
        m.a0 = rng.next_uniform(0.0, 2.0 * 3.14159265358979323846);
        m.a1 = m.a0 + rng.next_uniform(3.4, 4.6);
        return m;
    }

    void paint(double u, double v, double& r, double& g, double& b) const {
        const double pd = std::hypot(u - px, v - py);
        const double pocket = 1.0 - smoothstep(0.82 * pr, pr, pd);
        blend(r, g, b, {0.45, 0.24, 0.22}, pocket);

        const double ad = std::hypot(u - ax, v - ay);
        double ang = std::atan2(v - ay, u - ax);
        // Unwrap into [a0, a0 + 2pi) so the span test is a plain interval.
        while (ang < a0) ang += 2.0 * 3.14159265358979323846;
        const bool in_span = ang <= a1;
        if (in_span) {
            const double ridge = 1.0 - smoothstep(0.55 * th, th, std::fabs(ad - ar));
            blend(r, g, b, {0.98, 0.90, 0.78}, ridge);
        }
    }
};

// Straight high-contrast tube entering from one border: a wide grey body
// running from the frame edge deep into the image, with a white specular
// line along its axis. Kept lighter than the AO hole so "very dark compact
// blob" stays unique to AO.
struct RecMotif {
    double x0, y0, dx, dy, len, w;

    static RecMotif sample(CounterRng& rng) {
        RecMotif m;
        const int side = static_cast<int>(rng.next_u64() % 4);
        const double pos = rng.next_uniform(0.25, 0.75);
        switch (side) {
            case 0: m.x0 = pos; m.y0 = 0.0; break;
            case 1: m.x0 = pos; m.y0 = 1.0; break;
            case 2: m.x0 = 0.0; m.y0 = pos; break;
            default: m.x0 = 1.0; m.y0 = pos; break;
        }
        const double tx = rng.next_uniform(0.40, 0.60);
        const double ty = rng.next_uniform(0.40, 0.60);
        const double norm = std::hypot(tx - m.x0, ty - m.y0);
        m.dx = (tx - m.x0) / norm;
        m.dy = (ty - m.y0) / norm;
        m.len = rng.next_uniform(0.75, 0.95);
        m.w = rng.next_uniform(0.14, 0.20);
        return m;
    }

    void paint(double u, double v, double& r, double& g, double& b) const {
        const double t = std::min(len, std::max(0.0, (u - x0) * dx + (v - y0) * dy));
        const double cx = x0 + t * dx;
        const double cy = y0 + t * dy;
        const double d = std::hypot(u - cx, v - cy);
        const double body = 1.0 - smoothstep(0.42 * w, 0.5 * w, d);
        const double shine = 1.0 - smoothstep(0.10 * w, 0.18 * w, d);
        // Blue-grey instrument tube: dark like the AO hole but with an
        // inverted channel balance.
        blend(r, g, b, {0.10, 0.13, 0.26}, body);
        blend(r, g, b, {0.95, 0.96, 1.00}, shine);
    }
};

Image render_frame(Label label, int size, uint64_t image_seed, bool border, int border_px) {
    CounterRng rng(image_seed);

    // Background wave parameters.
    const double fa = rng.next_uniform(1.0, 3.0);
    const double fb = rng.next_uniform(1.0, 3.0);
    const double phase = rng.next_uniform(0.0, 2.0 * 3.14159265358979323846);

    AoMotif ao{};
    IcvMotif icv{};
    RecMotif rec{};
    switch (label) {
        case Label::AO: ao = AoMotif::sample(rng); break;
        case Label::ICV_CEC: icv = IcvMotif::sample(rng); break;
        case Label::REC_RF: rec = RecMotif::sample(rng); break;
        case Label::OTHER: break;
    }

    Image img;
    img.width = size;
    img.height = size;
    img.pixels.resize(static_cast<size_t>(size) * size * 3);

    CounterRng noise(counter_hash(image_seed, 0x6e6f6973)); // separate noise stream
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double u = (x + 0.5) / size;
            const double v = (y + 0.5) / size;
            const double wave = 0.06 * std::sin(2.0 * 3.14159265358979323846 * (fa * u + fb * v) + phase);
            double r = 0.62 + wave;
            double g = 0.38 + 0.6 * wave;
            double b = 0.32 + 0.4 * wave;

            switch (label) {
                case Label::AO: ao.paint(u, v, r, g, b); break;
                case Label::ICV_CEC: icv.paint(u, v, r, g, b); break;
                case Label::REC_RF: rec.paint(u, v, r, g, b); break;
                case Label::OTHER: break;
            }

            const double n = noise.next_uniform(-0.03, 0.03);
            img.at(x, y, 0) = static_cast<float>(std::min(1.0, std::max(0.0, r + n)));
            img.at(x, y, 1) = static_cast<float>(std::min(1.0, std::max(0.0, g + n)));
            img.at(x, y, 2) = static_cast<float>(std::min(1.0, std::max(0.0, b + n)));
        }

    if (border) {
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                if (x < border_px || y < border_px || x >= size - border_px || y >= size - border_px)
                    for (int c = 0; c < 3; ++c) img.at(x, y, c) = 0.0f;
    }
    return img;
}

std::string split_prefix(Split s) {
    switch (s) {
        case Split::TRAIN: return "train";
        case Split::VAL: return "val";
        case Split::TEST: return "test";
        case Split::SNAPSHOT: return "snap";
    }
    return "x";
}

} // namespace

void SynthConfig::validate() const {
    for (const auto* counts : {&train_counts, &val_counts, &test_counts, &snapshot_counts})
        for (int c : *counts)
            if (c < 0) throw ConfigError("class counts must be non-negative");
    if (image_size < 8) throw ConfigError("image_size must be >= 8");
    if (disagreement_rate < 0.0 || disagreement_rate > 1.0) throw ConfigError("disagreement_rate must be in [0,1]");
    if (border_fraction < 0.0 || border_fraction > 1.0) throw ConfigError("border_fraction must be in [0,1]");
    if (border_px < 1 || 2 * border_px >= image_size) throw ConfigError("border_px too large for image_size");
    if (frames_per_video < 1) throw ConfigError("frames_per_video must be >= 1");
}

Manifest generate_synthetic_dataset(const SynthConfig& cfg, uint64_t seed, const std::filesystem::path& out_dir) {
    cfg.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec) throw IoError("cannot create output directory: " + (out_dir / "images").string());

    Manifest m;
    m.base_dir = out_dir;

    const std::array<std::pair<Split, const std::array<int, kNumClasses>*>, 4> plan = {{
        {Split::TRAIN, &cfg.train_counts},
        {Split::VAL, &cfg.val_counts},
        {Split::TEST, &cfg.test_counts},
        {Split::SNAPSHOT, &cfg.snapshot_counts},
    }};

    for (const auto& [split, counts] : plan) {
        // Label sequence for the split, deterministically shuffled so videos
        // mix classes.
        std::vector<Label> labels;
        for (int c = 0; c < kNumClasses; ++c)
            labels.insert(labels.end(), static_cast<size_t>((*counts)[static_cast<size_t>(c)]), label_from_index(c));
        const auto order = shuffle_indices(labels.size(), counter_hash(seed, 0x73686600u + static_cast<uint64_t>(split)));

        for (size_t i = 0; i < labels.size(); ++i) {
            const Label label = labels[order[i]];
            const int video_no = static_cast<int>(i) / cfg.frames_per_video;
            const int frame_no = static_cast<int>(i) % cfg.frames_per_video;

            char video_id[64];
            std::snprintf(video_id, sizeof video_id, "%s_v%04d", split_prefix(split).c_str(), video_no);
            char file_name[96];
            std::snprintf(file_name, sizeof file_name, "images/%s_v%04d_f%03d.ppm", split_prefix(split).c_str(), video_no, frame_no);

            FrameRecord rec;
            rec.video_id = video_id;
            rec.frame_idx = frame_no;
            rec.image_path = file_name;
            rec.label_a = label;
            rec.label_b = label;
            rec.split = split;

            const uint64_t image_seed = counter_hash(seed, fnv1a64(rec.image_path));
            CounterRng meta(counter_hash(image_seed, 0x6d657461));
            const bool border = meta.next_unit() < cfg.border_fraction;
            if (meta.next_unit() < cfg.disagreement_rate) {
                const int shift = 1 + static_cast<int>(meta.next_u64() % (kNumClasses - 1));
                rec.label_b = label_from_index((static_cast<int>(label) + shift) % kNumClasses);
            }

            const Image img = render_frame(label, cfg.image_size, image_seed, border, cfg.border_px);
            write_ppm(img, out_dir / rec.image_path);
            m.records.push_back(std::move(rec));
        }
    }

    save_manifest(m, out_dir / "manifest.jsonl");
    return m;
}

} // namespace clmk
