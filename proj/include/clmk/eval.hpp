#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "clmk/dataset.hpp"
#include "clmk/image.hpp"
#include "clmk/tensor.hpp"
#include "clmk/vit.hpp"

namespace clmk {

// Rows are true labels, columns predicted labels.
struct ConfusionMatrix {
    std::array<std::array<int64_t, kNumClasses>, kNumClasses> counts = {};

    int64_t total() const {
        int64_t t = 0;
        for (const auto& row : counts)
            for (int64_t v : row) t += v;
        return t;
    }

    void tally(Label truth, Label predicted) { counts[static_cast<size_t>(truth)][static_cast<size_t>(predicted)]++; }
};

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    bool precision_defined = false; // false exactly when the column sum is zero
    bool recall_defined = false;    // false exactly when the row sum is zero
    int64_t frames = 0;             // true frames of this class
};

struct MetricsReport {
    double accuracy = 0.0;
    std::array<ClassMetrics, kNumClasses> per_class;
    int64_t total_frames = 0;
};

// Batched prediction over preprocessed frames; returns one class index per
// image, in input order.
using BatchPredictor = std::function<std::vector<int>(const std::vector<Image>&)>;

// Preprocess + predict every frame of the split, tallied at (true, predicted).
ConfusionMatrix confusion(const BatchPredictor& predictor, const Manifest& manifest, Split split,
                          const PreprocessConfig& preprocess_cfg);
ConfusionMatrix confusion(const ViTModel& model, const Manifest& manifest, Split split,
                          const PreprocessConfig& preprocess_cfg);

// accuracy = trace/total; recall(j) = cm[j][j]/row_sum(j); precision(j) =
// cm[j][j]/col_sum(j). Zero denominators yield 0 with the defined flag false.
MetricsReport metrics(const ConfusionMatrix& cm);

// Human-readable table with percentages at two decimals.
std::string format_metrics_table(const MetricsReport& report);

// JSON document matching the CLI eval output schema.
std::string metrics_to_json(const MetricsReport& report, const ConfusionMatrix& cm);

struct Projection2D {
    std::vector<double> coords;            // N x 2, row-major
    std::array<double, 2> explained = {0, 0}; // variance fraction per component
};

// PCA to two dimensions via power iteration with deflation (tolerance 1e-9,
// at most 1000 iterations). Components are unit-norm and orthogonal within
// 1e-6; `explained` holds each component's share of the total variance.
// Throws DegenerateData when all rows are identical.
Projection2D project_embeddings_2d(const std::vector<double>& features, int64_t n, int64_t dim);

// CSV export: header and one row per frame in manifest order with columns
// video_id, frame_idx, true_label, predicted_label, x, y (6 decimals).
// Returns the projection used.
Projection2D export_embeddings(const ViTModel& model, const Manifest& manifest, Split split,
                               const PreprocessConfig& preprocess_cfg, const std::filesystem::path& out_path);

} // namespace clmk
