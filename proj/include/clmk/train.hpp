#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "clmk/dataset.hpp"
#include "clmk/image.hpp"
#include "clmk/tensor.hpp"
#include "clmk/vit.hpp"

namespace clmk {

struct TrainConfig {
    int epochs = 30;
    int batch_size = 32;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double sam_rho = 0.05;
    double label_smoothing = 0.0;
    uint64_t seed = 0;
    PreprocessConfig preprocess;
    bool sampling = true; // per-epoch Bernoulli subsampling toward the snapshot distribution

    void validate() const;
};

// Smoothed one-hot target: 1 - eps at the true index, eps/3 elsewhere.
std::array<double, 4> target_distribution(Label label, double eps);

// Mean over the batch of sum_j t_j * (log t_j - log_softmax(logits)_j),
// with 0 * log 0 := 0. Internals run in double; differentiable through the
// logits. Each target row must sum to 1 within 1e-6.
template <typename S>
TensorT<S> kl_loss(const TensorT<S>& logits, const TensorT<S>& targets);

extern template TensorT<float> kl_loss<float>(const TensorT<float>&, const TensorT<float>&);
extern template TensorT<double> kl_loss<double>(const TensorT<double>&, const TensorT<double>&);

// Momentum buffers aligned with ViTModel::parameters() order.
struct SgdState {
    std::vector<std::vector<float>> velocity;

    static SgdState zeros_like(const std::vector<Tensor>& params);
};

// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
// Reads each parameter's populated grad.
void sgd_step(std::vector<Tensor>& params, SgdState& state, double lr, double momentum, double weight_decay);

// Sharpness-aware step: gradient at w, perturb w by rho * g / ||g||_2 (one
// global l2 norm over all parameters), gradient again, restore w, SGD update
// with the perturbed gradient. A zero gradient norm skips the perturbation.
// Both passes reuse the same dropout seed. Returns the loss at w.
// Throws NonFiniteLoss (message lists offending batch rows) and leaves the
// parameters unchanged in that case.
float sam_step(ViTModel& model, SgdState& state, const Tensor& batch, const Tensor& targets,
               const TrainConfig& cfg, uint64_t dropout_seed);

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    std::optional<double> val_accuracy;
    int64_t sampled_frames = 0;
};

struct Checkpoint {
    uint32_t version = 1;
    ViTConfig config;
    ViTModel model;
    int64_t epochs_completed = 0;
    uint64_t seed = 0; // training seed; the counter RNG is stateless given it
    SgdState opt;
};

struct TrainResult {
    Checkpoint final;
    Checkpoint best; // highest VAL accuracy epoch; equals final when VAL is empty
    std::vector<EpochLog> log;
};

// Epoch e uses epoch_seed = rng_finalize(cfg.seed ^ e) for resampling,
// shuffling and dropout. Consensus filtering is applied up front; the TRAIN
// split must be nonempty afterwards. The optional callback observes each
// epoch's log line as it is produced.
TrainResult train(const Manifest& manifest, const ViTConfig& vit_cfg, const TrainConfig& train_cfg,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

// ---- checkpoint file format ----
// magic "CLMK" | version u32 LE | header length u64 LE | UTF-8 JSON header |
// raw tensor payload. The header carries the model config, training state
// and a tensor directory (name, shape, offset, nbytes); payload tensors are
// 32-bit IEEE-754 little-endian in directory order.
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Smoothed target rows for a batch of labels.
Tensor targets_to_batch(const std::vector<Label>& labels, double label_smoothing);

} // namespace clmk
