#include "clmk/train.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include "clmk/eval.hpp"
#include "clmk/rng.hpp"
#include "clmk/sampling.hpp"

namespace clmk {

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0,1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (sam_rho < 0) throw ConfigError("sam_rho must be >= 0");
    if (label_smoothing < 0 || label_smoothing >= 1) throw ConfigError("label_smoothing must be in [0,1)");
}

std::array<double, 4> target_distribution(Label label, double eps) {
    std::array<double, 4> t;
    t.fill(eps / 3.0);
    t[static_cast<size_t>(label)] = 1.0 - eps;
    return t;
}

template <typename S>
TensorT<S> kl_loss(const TensorT<S>& logits, const TensorT<S>& targets) {
    if (logits.rank() != 2 || targets.rank() != 2 || logits.shape() != targets.shape())
        throw ShapeMismatch("kl_loss expects matching [B,C] tensors, got " + shape_str(logits.shape()) + " vs " +
                            shape_str(targets.shape()));
    const int64_t b = logits.dim(0);
    const int64_t c = logits.dim(1);
    auto tv = targets.data();
    for (int64_t i = 0; i < b; ++i) {
        double row = 0.0;
        for (int64_t j = 0; j < c; ++j) row += static_cast<double>(tv[i * c + j]);
        if (std::fabs(row - 1.0) > 1e-6)
            throw Error("target row " + std::to_string(i) + " sums to " + std::to_string(row) + ", expected 1");
    }

    auto lv = logits.data();
    double total = 0.0;
    for (int64_t i = 0; i < b; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(lv[i * c + j]));
        double denom = 0.0;
        for (int64_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(lv[i * c + j]) - mx);
        const double lse = mx + std::log(denom);
        for (int64_t j = 0; j < c; ++j) {
            const double t = static_cast<double>(tv[i * c + j]);
            if (t <= 0.0) continue; // 0 * log 0 := 0
            const double ls = static_cast<double>(lv[i * c + j]) - lse;
            total += t * (std::log(t) - ls);
        }
    }
    TensorT<S> loss = TensorT<S>::scalar(static_cast<S>(total / static_cast<double>(b)));

    if (active_tape<S>() != nullptr && logits.requires_grad()) {
        auto ln = logits.node();
        auto tn = targets.node();
        auto on = loss.node();
        active_tape<S>()->record([ln, tn, on, b, c] {
            if (on->grad.empty()) return;
            const double g = static_cast<double>(on->grad[0]) / static_cast<double>(b);
            if (ln->grad.empty()) ln->grad.assign(ln->value.size(), S(0));
            for (int64_t i = 0; i < b; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int64_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(ln->value[static_cast<size_t>(i * c + j)]));
                double denom = 0.0;
                for (int64_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(ln->value[static_cast<size_t>(i * c + j)]) - mx);
                for (int64_t j = 0; j < c; ++j) {
                    const double sm = std::exp(static_cast<double>(ln->value[static_cast<size_t>(i * c + j)]) - mx) / denom;
                    const double t = static_cast<double>(tn->value[static_cast<size_t>(i * c + j)]);
                    ln->grad[static_cast<size_t>(i * c + j)] += static_cast<S>(g * (sm - t));
                }
            }
        });
        loss.set_requires_grad(true);
    }
    return loss;
}

template TensorT<float> kl_loss<float>(const TensorT<float>&, const TensorT<float>&);
template TensorT<double> kl_loss<double>(const TensorT<double>&, const TensorT<double>&);

SgdState SgdState::zeros_like(const std::vector<Tensor>& params) {
    SgdState s;
    for (const auto& p : params) s.velocity.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
    return s;
}

void sgd_step(std::vector<Tensor>& params, SgdState& state, double lr, double momentum, double weight_decay) {
    if (state.velocity.size() != params.size()) throw ShapeMismatch("optimizer state does not match parameter list");
    const float lrf = static_cast<float>(lr);
    const float mf = static_cast<float>(momentum);
    const float wdf = static_cast<float>(weight_decay);
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto pv = params[pi].data();
        auto gv = params[pi].grad();
        auto& vel = state.velocity[pi];
        if (vel.size() != static_cast<size_t>(params[pi].numel()))
            throw ShapeMismatch("velocity buffer " + std::to_string(pi) + " does not match parameter shape");
        for (size_t i = 0; i < vel.size(); ++i) {
            vel[i] = mf * vel[i] + gv[i] + wdf * pv[i];
            pv[i] -= lrf * vel[i];
        }
    }
}

namespace {

// Forward + KL + backward at the current parameters; grads land on the
// parameter tensors. Returns the loss value.
float loss_and_grad(ViTModel& model, std::vector<Tensor>& params, const Tensor& batch, const Tensor& targets,
                    uint64_t dropout_seed) {
    for (auto& p : params) p.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    ForwardOpts opts;
    opts.training = true;
    opts.dropout_seed = dropout_seed;
    Tensor logits = forward(model, batch, opts);

    auto lv = logits.data();
    std::ostringstream bad;
    bool any_bad = false;
    for (int64_t i = 0; i < logits.dim(0); ++i)
        for (int64_t j = 0; j < logits.dim(1); ++j)
            if (!std::isfinite(lv[i * logits.dim(1) + j])) {
                if (any_bad) bad << ",";
                bad << i;
                any_bad = true;
                break;
            }
    if (any_bad) throw NonFiniteLoss("non-finite logits for batch rows [" + bad.str() + "]");

    Tensor loss = kl_loss(logits, targets);
    const float value = loss.item();
    if (!std::isfinite(value)) throw NonFiniteLoss("non-finite loss value");
    tape.backward(loss);
    return value;
}

} // namespace

float sam_step(ViTModel& model, SgdState& state, const Tensor& batch, const Tensor& targets,
               const TrainConfig& cfg, uint64_t dropout_seed) {
    auto params = model.parameters();
    const float loss_at_w = loss_and_grad(model, params, batch, targets, dropout_seed);

    if (cfg.sam_rho > 0.0) {
        double norm_sq = 0.0;
        for (auto& p : params) {
            auto g = p.grad();
            for (float v : g) norm_sq += static_cast<double>(v) * static_cast<double>(v);
        }
        const double norm = std::sqrt(norm_sq);
        if (norm > 0.0) {
            // Save w, ascend to w + rho * g / ||g||, take the gradient there,
            // then restore w exactly from the saved copy.
            std::vector<std::vector<float>> saved;
            saved.reserve(params.size());
            const double scale = cfg.sam_rho / norm;
            for (auto& p : params) {
                auto pv = p.data();
                auto gv = p.grad();
                saved.emplace_back(pv.begin(), pv.end());
                for (size_t i = 0; i < pv.size(); ++i)
                    pv[i] = static_cast<float>(pv[i] + static_cast<float>(static_cast<double>(gv[i]) * scale));
            }
            try {
                loss_and_grad(model, params, batch, targets, dropout_seed);
            } catch (...) {
                for (size_t pi = 0; pi < params.size(); ++pi)
                    std::copy(saved[pi].begin(), saved[pi].end(), params[pi].data().begin());
                throw;
            }
            for (size_t pi = 0; pi < params.size(); ++pi)
                std::copy(saved[pi].begin(), saved[pi].end(), params[pi].data().begin());
        }
    }

    sgd_step(params, state, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    return loss_at_w;
}

Tensor targets_to_batch(const std::vector<Label>& labels, double label_smoothing) {
    Tensor t = Tensor::zeros({static_cast<int64_t>(labels.size()), 4});
    auto tv = t.data();
    for (size_t i = 0; i < labels.size(); ++i) {
        const auto row = target_distribution(labels[i], label_smoothing);
        for (int j = 0; j < 4; ++j) tv[static_cast<int64_t>(i) * 4 + j] = static_cast<float>(row[static_cast<size_t>(j)]);
    }
    return t;
}

TrainResult train(const Manifest& manifest, const ViTConfig& vit_cfg, const TrainConfig& train_cfg,
                  const std::function<void(const EpochLog&)>& on_epoch) {
    vit_cfg.validate();
    train_cfg.validate();

    const Manifest agreed = consensus_filter(manifest);
    const auto train_records = records_in_split(agreed, Split::TRAIN);
    if (train_records.empty()) throw EmptyTrainSplit("no consensus TRAIN records");
    const bool has_val = !records_in_split(agreed, Split::VAL).empty();

    SamplingPlan plan;
    plan.p = {1.0, 1.0, 1.0, 1.0};
    if (train_cfg.sampling)
        plan = compute_inclusion_probs(class_distribution(agreed, Split::TRAIN),
                                       class_distribution(agreed, Split::SNAPSHOT));

    Manifest train_split;
    train_split.base_dir = agreed.base_dir;
    for (const auto* r : train_records) train_split.records.push_back(*r);

    ViTModel model = init_model(vit_cfg, train_cfg.seed);
    auto params = model.parameters();
    SgdState opt = SgdState::zeros_like(params);

    // Preprocessing is deterministic, so decoded frames are cached by path.
    std::unordered_map<std::string, Image> cache;
    auto load_frame = [&](const FrameRecord& r) -> const Image& {
        auto it = cache.find(r.image_path);
        if (it != cache.end()) return it->second;
        Image img;
        try {
            img = preprocess(read_ppm(train_split.resolve(r)), train_cfg.preprocess);
        } catch (const IoError& e) {
            throw IoError(std::string(e.what()) + " (frame " + r.video_id + "/" + std::to_string(r.frame_idx) + ")");
        } catch (const DegenerateImage& e) {
            throw DegenerateImage(std::string(e.what()) + " (frame " + r.video_id + "/" + std::to_string(r.frame_idx) + ")");
        }
        return cache.emplace(r.image_path, std::move(img)).first->second;
    };

    TrainResult result;
    double best_val = -1.0;

    for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
        const uint64_t epoch_seed = rng_finalize(train_cfg.seed ^ static_cast<uint64_t>(epoch));
        const Manifest sampled = train_cfg.sampling ? sample_epoch(train_split, plan, epoch_seed) : train_split;
        const auto order = shuffle_indices(sampled.records.size(), counter_hash(epoch_seed, 0x73687566));

        double loss_sum = 0.0;
        int64_t frames = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(train_cfg.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(train_cfg.batch_size));
            std::vector<Image> images;
            std::vector<Label> labels;
            std::vector<std::string> frame_ids;
            for (size_t i = start; i < end; ++i) {
                const auto& r = sampled.records[order[i]];
                images.push_back(load_frame(r));
                labels.push_back(r.effective_label());
                frame_ids.push_back(r.video_id + "/" + std::to_string(r.frame_idx));
            }
            const Tensor batch = images_to_batch(images);
            const Tensor targets = targets_to_batch(labels, train_cfg.label_smoothing);
            const uint64_t step_seed = counter_hash(epoch_seed, 0x64726f70 + start);
            float loss;
            try {
                loss = sam_step(model, opt, batch, targets, train_cfg, step_seed);
            } catch (const NonFiniteLoss& e) {
                std::ostringstream msg;
                msg << e.what() << " at epoch " << epoch << ", frames";
                for (const auto& f : frame_ids) msg << " " << f;
                throw NonFiniteLoss(msg.str());
            }
            loss_sum += static_cast<double>(loss) * static_cast<double>(end - start);
            frames += static_cast<int64_t>(end - start);
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_loss = frames > 0 ? loss_sum / static_cast<double>(frames) : 0.0;
        log.sampled_frames = frames;
        if (has_val) {
            const ConfusionMatrix cm = confusion(model, agreed, Split::VAL, train_cfg.preprocess);
            log.val_accuracy = metrics(cm).accuracy;
            if (*log.val_accuracy > best_val) {
                best_val = *log.val_accuracy;
                result.best = Checkpoint{1, vit_cfg, model.clone(), epoch + 1, train_cfg.seed, opt};
            }
        }
        result.log.push_back(log);
        if (on_epoch) on_epoch(log);
    }

    result.final = Checkpoint{1, vit_cfg, model.clone(), train_cfg.epochs, train_cfg.seed, opt};
    if (best_val < 0.0) result.best = result.final;
    return result;
}

} // namespace clmk
