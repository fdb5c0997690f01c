#include "clmk/sampling.hpp"

#include <algorithm>

#include "clmk/rng.hpp"

namespace clmk {

SamplingPlan compute_inclusion_probs(const ClassDistribution& train_dist, const ClassDistribution& snapshot_dist) {
    SamplingPlan plan;
    for (int i = 0; i < kNumClasses; ++i) {
        const double snap = snapshot_dist.proportion[static_cast<size_t>(i)];
        const double train = train_dist.proportion[static_cast<size_t>(i)];
        if (snap <= 0.0) {
            plan.p[static_cast<size_t>(i)] = 0.0;
            continue;
        }
        if (train <= 0.0)
            throw MissingTrainClass("class " + to_string(label_from_index(i)) + " has snapshot mass but no training records");
        plan.p[static_cast<size_t>(i)] = std::min(snap / train, 1.0);
    }
    return plan;
}

Manifest sample_epoch(const Manifest& manifest, const SamplingPlan& plan, uint64_t epoch_seed) {
    Manifest out;
    out.base_dir = manifest.base_dir;
    for (const auto& r : manifest.records) {
        const double p = plan.p[static_cast<size_t>(r.effective_label())];
        if (p >= 1.0) {
            out.records.push_back(r);
            continue;
        }
        if (p <= 0.0) continue;
        if (record_draw(epoch_seed, r.video_id, static_cast<uint64_t>(r.frame_idx)) < p) out.records.push_back(r);
    }
    return out;
}

ClassDistribution expected_post_sampling_distribution(const ClassDistribution& train_dist, const SamplingPlan& plan) {
    std::array<double, kNumClasses> weight{};
    double total = 0.0;
    for (int i = 0; i < kNumClasses; ++i) {
        weight[static_cast<size_t>(i)] = plan.p[static_cast<size_t>(i)] * train_dist.proportion[static_cast<size_t>(i)];
        total += weight[static_cast<size_t>(i)];
    }
    if (total <= 0.0) throw AllClassesExcluded("sampling plan removes every class");
    ClassDistribution d;
    for (int i = 0; i < kNumClasses; ++i) d.proportion[static_cast<size_t>(i)] = weight[static_cast<size_t>(i)] / total;
    return d;
}

} // namespace clmk
