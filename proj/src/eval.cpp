#include "clmk/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace clmk {

namespace {

constexpr size_t kEvalBatch = 64;

std::vector<Image> load_split_frames(const Manifest& manifest, const std::vector<const FrameRecord*>& records,
                                     const PreprocessConfig& cfg) {
    std::vector<Image> frames;
    frames.reserve(records.size());
    for (const auto* r : records) {
        try {
            frames.push_back(preprocess(read_ppm(manifest.resolve(*r)), cfg));
        } catch (const IoError& e) {
            throw IoError(std::string(e.what()) + " (frame " + r->video_id + "/" + std::to_string(r->frame_idx) + ")");
        }
    }
    return frames;
}

} // namespace

ConfusionMatrix confusion(const BatchPredictor& predictor, const Manifest& manifest, Split split,
                          const PreprocessConfig& preprocess_cfg) {
    const auto records = records_in_split(manifest, split);
    if (records.empty()) throw EmptySplit("no records in split " + to_string(split));

    ConfusionMatrix cm;
    for (size_t start = 0; start < records.size(); start += kEvalBatch) {
        const size_t end = std::min(records.size(), start + kEvalBatch);
        std::vector<const FrameRecord*> chunk(records.begin() + static_cast<std::ptrdiff_t>(start),
                                              records.begin() + static_cast<std::ptrdiff_t>(end));
        const auto frames = load_split_frames(manifest, chunk, preprocess_cfg);
        const auto labels = predictor(frames);
        for (size_t i = 0; i < chunk.size(); ++i)
            cm.tally(chunk[i]->effective_label(), label_from_index(labels[i]));
    }
    return cm;
}

ConfusionMatrix confusion(const ViTModel& model, const Manifest& manifest, Split split,
                          const PreprocessConfig& preprocess_cfg) {
    return confusion(
        [&model](const std::vector<Image>& frames) { return predict(model, images_to_batch(frames)).labels; },
        manifest, split, preprocess_cfg);
}

MetricsReport metrics(const ConfusionMatrix& cm) {
    const int64_t total = cm.total();
    if (total == 0) throw EmptyMatrix("confusion matrix has no tallies");
    MetricsReport r;
    r.total_frames = total;
    int64_t trace = 0;
    for (int j = 0; j < kNumClasses; ++j) {
        const auto uj = static_cast<size_t>(j);
        trace += cm.counts[uj][uj];
        int64_t row = 0, col = 0;
        for (int k = 0; k < kNumClasses; ++k) {
            row += cm.counts[uj][static_cast<size_t>(k)];
            col += cm.counts[static_cast<size_t>(k)][uj];
        }
        auto& pc = r.per_class[uj];
        pc.frames = row;
        pc.recall_defined = row > 0;
        pc.precision_defined = col > 0;
        pc.recall = row > 0 ? static_cast<double>(cm.counts[uj][uj]) / static_cast<double>(row) : 0.0;
        pc.precision = col > 0 ? static_cast<double>(cm.counts[uj][uj]) / static_cast<double>(col) : 0.0;
    }
    r.accuracy = static_cast<double>(trace) / static_cast<double>(total);
    return r;
}

std::string format_metrics_table(const MetricsReport& report) {
    char line[128];
    std::ostringstream os;
    std::snprintf(line, sizeof line, "%-10s %-10s %8.2f%%\n", "Overall", "accuracy", report.accuracy * 100.0);
    os << line;
    for (int j = 0; j < kNumClasses; ++j) {
        const auto& pc = report.per_class[static_cast<size_t>(j)];
        const std::string name = to_string(label_from_index(j));
        std::snprintf(line, sizeof line, "%-10s %-10s %8.2f%%%s\n", name.c_str(), "recall", pc.recall * 100.0,
                      pc.recall_defined ? "" : " (undefined)");
        os << line;
        std::snprintf(line, sizeof line, "%-10s %-10s %8.2f%%%s\n", "", "precision", pc.precision * 100.0,
                      pc.precision_defined ? "" : " (undefined)");
        os << line;
    }
    return os.str();
}

std::string metrics_to_json(const MetricsReport& report, const ConfusionMatrix& cm) {
    nlohmann::json j;
    j["accuracy"] = report.accuracy;
    for (int k = 0; k < kNumClasses; ++k) {
        const auto& pc = report.per_class[static_cast<size_t>(k)];
        nlohmann::json c;
        c["precision"] = pc.precision;
        c["recall"] = pc.recall;
        c["precision_defined"] = pc.precision_defined;
        c["recall_defined"] = pc.recall_defined;
        j["per_class"][to_string(label_from_index(k))] = c;
    }
    std::vector<std::vector<int64_t>> rows;
    for (const auto& row : cm.counts) rows.emplace_back(row.begin(), row.end());
    j["confusion"] = rows;
    j["total_frames"] = report.total_frames;
    return j.dump();
}

namespace {

// Power iteration on the dim x dim covariance, starting from a fixed seeded
// vector; convergence when successive sign-aligned iterates differ by < tol.
std::pair<std::vector<double>, double> dominant_eigen(const std::vector<double>& cov, int64_t dim, uint64_t seed) {
    std::vector<double> v(static_cast<size_t>(dim));
    CounterRng rng(seed);
    double norm = 0.0;
    while (norm == 0.0) {
        for (auto& x : v) x = rng.next_uniform(-1.0, 1.0);
        norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
    }
    for (auto& x : v) x /= norm;

    std::vector<double> next(static_cast<size_t>(dim));
    double lambda = 0.0;
    for (int iter = 0; iter < 1000; ++iter) {
        for (int64_t i = 0; i < dim; ++i) {
            double acc = 0.0;
            for (int64_t k = 0; k < dim; ++k) acc += cov[static_cast<size_t>(i * dim + k)] * v[static_cast<size_t>(k)];
            next[static_cast<size_t>(i)] = acc;
        }
        lambda = 0.0;
        for (int64_t i = 0; i < dim; ++i) lambda += next[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
        double nn = 0.0;
        for (double x : next) nn += x * x;
        nn = std::sqrt(nn);
        if (nn == 0.0) {
            // v is in the null space; any unit vector is an eigenvector.
            return {v, 0.0};
        }
        double sign = 0.0;
        for (int64_t i = 0; i < dim; ++i) sign += next[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
        const double flip = sign < 0.0 ? -1.0 : 1.0;
        double diff = 0.0;
        for (int64_t i = 0; i < dim; ++i) {
            const double nv = flip * next[static_cast<size_t>(i)] / nn;
            diff += (nv - v[static_cast<size_t>(i)]) * (nv - v[static_cast<size_t>(i)]);
            v[static_cast<size_t>(i)] = nv;
        }
        if (std::sqrt(diff) < 1e-9) break;
    }
    return {v, std::fabs(lambda)};
}

} // namespace

Projection2D project_embeddings_2d(const std::vector<double>& features, int64_t n, int64_t dim) {
    if (n < 2) throw Error("need at least 2 rows to project");
    if (static_cast<int64_t>(features.size()) != n * dim) throw ShapeMismatch("feature buffer does not match n x dim");

    // Center columns.
    std::vector<double> centered = features;
    for (int64_t j = 0; j < dim; ++j) {
        double mu = 0.0;
        for (int64_t i = 0; i < n; ++i) mu += centered[static_cast<size_t>(i * dim + j)];
        mu /= static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) centered[static_cast<size_t>(i * dim + j)] -= mu;
    }

    // Covariance = X^T X / n.
    std::vector<double> cov(static_cast<size_t>(dim * dim), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t a = 0; a < dim; ++a) {
            const double xa = centered[static_cast<size_t>(i * dim + a)];
            if (xa == 0.0) continue;
            for (int64_t b = 0; b < dim; ++b) cov[static_cast<size_t>(a * dim + b)] += xa * centered[static_cast<size_t>(i * dim + b)];
        }
    double total_var = 0.0;
    for (int64_t a = 0; a < dim; ++a) {
        for (int64_t b = 0; b < dim; ++b) cov[static_cast<size_t>(a * dim + b)] /= static_cast<double>(n);
        total_var += cov[static_cast<size_t>(a * dim + a)];
    }
    if (total_var <= 0.0) throw DegenerateData("all feature rows are identical");

    auto [v1, l1] = dominant_eigen(cov, dim, 0x70636131);

    // Deflate and repeat for the second component.
    std::vector<double> cov2 = cov;
    for (int64_t a = 0; a < dim; ++a)
        for (int64_t b = 0; b < dim; ++b)
            cov2[static_cast<size_t>(a * dim + b)] -= l1 * v1[static_cast<size_t>(a)] * v1[static_cast<size_t>(b)];
    auto [v2, l2] = dominant_eigen(cov2, dim, 0x70636132);

    // Re-orthogonalize against v1 to clean up deflation round-off; if the
    // residual vanishes the data is rank one and any orthogonal unit vector
    // completes the basis.
    double dot = 0.0;
    for (int64_t i = 0; i < dim; ++i) dot += v1[static_cast<size_t>(i)] * v2[static_cast<size_t>(i)];
    double nrm = 0.0;
    for (int64_t i = 0; i < dim; ++i) {
        v2[static_cast<size_t>(i)] -= dot * v1[static_cast<size_t>(i)];
        nrm += v2[static_cast<size_t>(i)] * v2[static_cast<size_t>(i)];
    }
    nrm = std::sqrt(nrm);
    if (nrm < 1e-12) {
        CounterRng rng(0x70636133);
        while (nrm < 1e-12) {
            double d2 = 0.0;
            for (int64_t i = 0; i < dim; ++i) {
                v2[static_cast<size_t>(i)] = rng.next_uniform(-1.0, 1.0);
                d2 += v2[static_cast<size_t>(i)] * v1[static_cast<size_t>(i)];
            }
            nrm = 0.0;
            for (int64_t i = 0; i < dim; ++i) {
                v2[static_cast<size_t>(i)] -= d2 * v1[static_cast<size_t>(i)];
                nrm += v2[static_cast<size_t>(i)] * v2[static_cast<size_t>(i)];
            }
            nrm = std::sqrt(nrm);
        }
        l2 = 0.0;
    }
    for (int64_t i = 0; i < dim; ++i) v2[static_cast<size_t>(i)] /= nrm;

    Projection2D out;
    out.explained = {l1 / total_var, l2 / total_var};
    out.coords.resize(static_cast<size_t>(n) * 2);
    for (int64_t i = 0; i < n; ++i) {
        double x = 0.0, y = 0.0;
        for (int64_t k = 0; k < dim; ++k) {
            const double c = centered[static_cast<size_t>(i * dim + k)];
            x += c * v1[static_cast<size_t>(k)];
            y += c * v2[static_cast<size_t>(k)];
        }
        out.coords[static_cast<size_t>(i * 2)] = x;
        out.coords[static_cast<size_t>(i * 2 + 1)] = y;
    }
    return out;
}

Projection2D export_embeddings(const ViTModel& model, const Manifest& manifest, Split split,
                               const PreprocessConfig& preprocess_cfg, const std::filesystem::path& out_path) {
    const auto records = records_in_split(manifest, split);
    if (records.empty()) throw EmptySplit("no records in split " + to_string(split));

    const int64_t dim = model.cfg.dim;
    std::vector<double> features;
    features.reserve(records.size() * static_cast<size_t>(dim));
    std::vector<int> predicted;

    for (size_t start = 0; start < records.size(); start += kEvalBatch) {
        const size_t end = std::min(records.size(), start + kEvalBatch);
        std::vector<const FrameRecord*> chunk(records.begin() + static_cast<std::ptrdiff_t>(start),
                                              records.begin() + static_cast<std::ptrdiff_t>(end));
        const auto frames = load_split_frames(manifest, chunk, preprocess_cfg);
        const Tensor batch = images_to_batch(frames);
        const Tensor feats = extract_features(model, batch);
        const Tensor logits = apply_head(model, feats);
        auto fv = feats.data();
        for (float v : fv) features.push_back(static_cast<double>(v));
        auto lv = logits.data();
        for (size_t i = 0; i < chunk.size(); ++i) {
            int best = 0;
            for (int j = 1; j < kNumClasses; ++j)
                if (lv[static_cast<int64_t>(i) * kNumClasses + j] > lv[static_cast<int64_t>(i) * kNumClasses + best]) best = j;
            predicted.push_back(best);
        }
    }

    const Projection2D proj = project_embeddings_2d(features, static_cast<int64_t>(records.size()), dim);

    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + out_path.string());
    out << "video_id,frame_idx,true_label,predicted_label,x,y\n";
    char buf[64];
    for (size_t i = 0; i < records.size(); ++i) {
        out << records[i]->video_id << "," << records[i]->frame_idx << "," << to_string(records[i]->effective_label())
            << "," << to_string(label_from_index(predicted[i]));
        std::snprintf(buf, sizeof buf, ",%.6f,%.6f\n", proj.coords[i * 2], proj.coords[i * 2 + 1]);
        out << buf;
    }
    if (!out) throw IoError("short write: " + out_path.string());
    return proj;
}

} // namespace clmk
