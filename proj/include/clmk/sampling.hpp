#pragma once

#include <array>
#include <cstdint>

#include "clmk/dataset.hpp"

namespace clmk {

// Per-class inclusion probabilities for the Bernoulli subsampling pass.
struct SamplingPlan {
    std::array<double, kNumClasses> p = {0, 0, 0, 0};

    double operator[](Label l) const { return p[static_cast<size_t>(l)]; }
};

// p_j = min(snapshot(j) / train(j), 1); classes absent from the snapshot
// distribution get p_j = 0. Throws MissingTrainClass when a class has
// snapshot mass but no training mass.
SamplingPlan compute_inclusion_probs(const ClassDistribution& train_dist, const ClassDistribution& snapshot_dist);

// Keeps each record independently with probability p(effective label).
// Inclusion of a record depends only on (epoch_seed, video_id, frame_idx),
// never on manifest order; see record_draw() in rng.hpp for the exact chain.
Manifest sample_epoch(const Manifest& manifest, const SamplingPlan& plan, uint64_t epoch_seed);

// Distribution after applying the plan: p_j * train(j), renormalized.
// Throws AllClassesExcluded when every class has zero retained mass.
ClassDistribution expected_post_sampling_distribution(const ClassDistribution& train_dist, const SamplingPlan& plan);

} // namespace clmk
