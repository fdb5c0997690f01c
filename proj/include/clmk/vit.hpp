#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "clmk/error.hpp"
#include "clmk/image.hpp"
#include "clmk/rng.hpp"
#include "clmk/tensor.hpp"

namespace clmk {

struct ViTConfig {
    int image_size = 224;
    int patch_size = 16;
    int dim = 768;
    int depth = 12;
    int heads = 12;
    int mlp_dim = 3072;
    int num_classes = 4;
    std::vector<int> head_hidden = {768}; // classifier hidden widths; empty = single linear
    double dropout = 0.1;

    // The standard B/16 geometry at 224x224 input.
    static ViTConfig b16();
    // Small configuration for CPU-scale experiments.
    static ViTConfig desk();

    int grid() const { return image_size / patch_size; }
    int tokens() const { return 1 + grid() * grid(); }
    int patch_dim() const { return patch_size * patch_size * 3; }

    void validate() const;

    bool operator==(const ViTConfig&) const = default;
};

// Exact number of scalars in a model built from cfg.
int64_t parameter_count(const ViTConfig& cfg);

struct ForwardOpts {
    bool training = false;      // enables dropout
    uint64_t dropout_seed = 0;  // stream key for dropout masks
    // When set, receives each block's post-softmax attention tensor
    // [B*heads, T, T] in block order.
    std::vector<Tensor>* attention_probe = nullptr;
};

template <typename S>
struct ViTModelT {
    ViTConfig cfg;

    TensorT<S> patch_weight; // [patch_dim, dim]
    TensorT<S> patch_bias;   // [dim]
    TensorT<S> cls_token;    // [1, 1, dim]
    TensorT<S> pos_embed;    // [1, tokens, dim]

    struct Block {
        TensorT<S> ln1_gain, ln1_bias;
        TensorT<S> qkv_weight; // [dim, 3*dim]
        TensorT<S> qkv_bias;   // [3*dim]
        TensorT<S> proj_weight; // [dim, dim]
        TensorT<S> proj_bias;   // [dim]
        TensorT<S> ln2_gain, ln2_bias;
        TensorT<S> fc1_weight; // [dim, mlp_dim]
        TensorT<S> fc1_bias;   // [mlp_dim]
        TensorT<S> fc2_weight; // [mlp_dim, dim]
        TensorT<S> fc2_bias;   // [dim]
    };
    std::vector<Block> blocks;

    TensorT<S> final_ln_gain, final_ln_bias;

    // Hidden layers (gelu) followed by the final linear to num_classes.
    std::vector<TensorT<S>> head_weights;
    std::vector<TensorT<S>> head_biases;

    // Canonical parameter order; shared handles, so mutating the returned
    // tensors mutates the model.
    std::vector<TensorT<S>> parameters() const {
        std::vector<TensorT<S>> out = {patch_weight, patch_bias, cls_token, pos_embed};
        for (const auto& blk : blocks) {
            out.insert(out.end(), {blk.ln1_gain, blk.ln1_bias, blk.qkv_weight, blk.qkv_bias, blk.proj_weight,
                                   blk.proj_bias, blk.ln2_gain, blk.ln2_bias, blk.fc1_weight, blk.fc1_bias,
                                   blk.fc2_weight, blk.fc2_bias});
        }
        out.push_back(final_ln_gain);
        out.push_back(final_ln_bias);
        for (size_t i = 0; i < head_weights.size(); ++i) {
            out.push_back(head_weights[i]);
            out.push_back(head_biases[i]);
        }
        return out;
    }

    std::vector<std::string> parameter_names() const {
        std::vector<std::string> out = {"patch_proj.weight", "patch_proj.bias", "cls_token", "pos_embed"};
        for (size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "blocks." + std::to_string(i) + ".";
            for (const char* s : {"ln1.gain", "ln1.bias", "qkv.weight", "qkv.bias", "proj.weight", "proj.bias",
                                  "ln2.gain", "ln2.bias", "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight",
                                  "mlp.fc2.bias"})
                out.push_back(p + s);
        }
        out.push_back("final_ln.gain");
        out.push_back("final_ln.bias");
        for (size_t i = 0; i < head_weights.size(); ++i) {
            out.push_back("head." + std::to_string(i) + ".weight");
            out.push_back("head." + std::to_string(i) + ".bias");
        }
        return out;
    }

    // Deep copy; the clone's tensors share nothing with this model's.
    ViTModelT clone() const {
        ViTModelT out;
        out.cfg = cfg;
        out.patch_weight = patch_weight.clone();
        out.patch_bias = patch_bias.clone();
        out.cls_token = cls_token.clone();
        out.pos_embed = pos_embed.clone();
        for (const auto& blk : blocks) {
            Block nb;
            nb.ln1_gain = blk.ln1_gain.clone();
            nb.ln1_bias = blk.ln1_bias.clone();
            nb.qkv_weight = blk.qkv_weight.clone();
            nb.qkv_bias = blk.qkv_bias.clone();
            nb.proj_weight = blk.proj_weight.clone();
            nb.proj_bias = blk.proj_bias.clone();
            nb.ln2_gain = blk.ln2_gain.clone();
            nb.ln2_bias = blk.ln2_bias.clone();
            nb.fc1_weight = blk.fc1_weight.clone();
            nb.fc1_bias = blk.fc1_bias.clone();
            nb.fc2_weight = blk.fc2_weight.clone();
            nb.fc2_bias = blk.fc2_bias.clone();
            out.blocks.push_back(std::move(nb));
        }
        out.final_ln_gain = final_ln_gain.clone();
        out.final_ln_bias = final_ln_bias.clone();
        for (size_t i = 0; i < head_weights.size(); ++i) {
            out.head_weights.push_back(head_weights[i].clone());
            out.head_biases.push_back(head_biases[i].clone());
        }
        return out;
    }

    template <typename T2>
    ViTModelT<T2> cast() const {
        ViTModelT<T2> out;
        out.cfg = cfg;
        out.patch_weight = patch_weight.template cast<T2>();
        out.patch_bias = patch_bias.template cast<T2>();
        out.cls_token = cls_token.template cast<T2>();
        out.pos_embed = pos_embed.template cast<T2>();
        for (const auto& blk : blocks) {
            typename ViTModelT<T2>::Block nb;
            nb.ln1_gain = blk.ln1_gain.template cast<T2>();
            nb.ln1_bias = blk.ln1_bias.template cast<T2>();
            nb.qkv_weight = blk.qkv_weight.template cast<T2>();
            nb.qkv_bias = blk.qkv_bias.template cast<T2>();
            nb.proj_weight = blk.proj_weight.template cast<T2>();
            nb.proj_bias = blk.proj_bias.template cast<T2>();
            nb.ln2_gain = blk.ln2_gain.template cast<T2>();
            nb.ln2_bias = blk.ln2_bias.template cast<T2>();
            nb.fc1_weight = blk.fc1_weight.template cast<T2>();
            nb.fc1_bias = blk.fc1_bias.template cast<T2>();
            nb.fc2_weight = blk.fc2_weight.template cast<T2>();
            nb.fc2_bias = blk.fc2_bias.template cast<T2>();
            out.blocks.push_back(std::move(nb));
        }
        out.final_ln_gain = final_ln_gain.template cast<T2>();
        out.final_ln_bias = final_ln_bias.template cast<T2>();
        for (size_t i = 0; i < head_weights.size(); ++i) {
            out.head_weights.push_back(head_weights[i].template cast<T2>());
            out.head_biases.push_back(head_biases[i].template cast<T2>());
        }
        return out;
    }
};

using ViTModel = ViTModelT<float>;

// Truncated-normal (std 0.02) projection weights, zero biases, zero class
// token, layer-norm gains of one. A single counter stream keyed by `seed`
// fills the randomly initialized tensors in canonical parameter order.
ViTModel init_model(const ViTConfig& cfg, uint64_t seed);

namespace detail {
// Model skeleton with all-zero parameters; used by init and checkpoint load.
ViTModel build_zero_model(const ViTConfig& cfg);
} // namespace detail

// ---------------------------------------------------------------------------
// Forward pass (templated so tests can shadow-evaluate in double)
// ---------------------------------------------------------------------------

namespace detail {

// Inverted dropout as a constant mask multiply; mask depends only on
// (dropout_seed, site index, element index).
template <typename S>
TensorT<S> apply_dropout(const TensorT<S>& x, double rate, const ForwardOpts& opts, int* site) {
    const int this_site = (*site)++;
    if (!opts.training || rate <= 0.0) return x;
    const uint64_t key = counter_hash(opts.dropout_seed, static_cast<uint64_t>(this_site));
    TensorT<S> mask = TensorT<S>::zeros(x.shape());
    auto mv = mask.data();
    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    for (int64_t i = 0; i < mask.numel(); ++i)
        mv[i] = to_unit(counter_hash(key, static_cast<uint64_t>(i))) < rate ? S(0) : keep_scale;
    return mul(x, mask);
}

} // namespace detail

// Backbone to the post-final-layer-norm class-token vector [B, dim].
template <typename S>
TensorT<S> extract_features(const ViTModelT<S>& m, const TensorT<S>& batch, const ForwardOpts& opts = {}) {
    const auto& cfg = m.cfg;
    if (batch.rank() != 4 || batch.dim(1) != cfg.image_size || batch.dim(2) != cfg.image_size || batch.dim(3) != 3)
        throw ShapeMismatch("expected batch [B," + std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) +
                            ",3], got " + shape_str(batch.shape()));
    const int64_t b = batch.dim(0);
    const int64_t t = cfg.tokens();
    const int64_t d = cfg.dim;
    const int64_t h = cfg.heads;
    const int64_t hd = d / h;
    int site = 0;

    TensorT<S> x = extract_patches(batch, cfg.patch_size);           // [B,P,pd]
    x = add(matmul(x, m.patch_weight), m.patch_bias);                // [B,P,D]
    TensorT<S> cls = add(TensorT<S>::zeros({b, 1, d}), m.cls_token); // broadcast to batch
    x = concat<S>({cls, x}, 1);                                      // [B,T,D]
    x = add(x, m.pos_embed);
    x = detail::apply_dropout(x, cfg.dropout, opts, &site);

    for (const auto& blk : m.blocks) {
        TensorT<S> hnorm = layer_norm(x, blk.ln1_gain, blk.ln1_bias, 2, 1e-5);
        TensorT<S> qkv = add(matmul(hnorm, blk.qkv_weight), blk.qkv_bias); // [B,T,3D]

        auto heads_of = [&](const TensorT<S>& part) {
            // [B,T,D] -> [B*H, T, hd]
            return reshape(transpose(reshape(part, {b, t, h, hd}), 1, 2), {b * h, t, hd});
        };
        TensorT<S> q = heads_of(slice(qkv, 2, 0, d));
        TensorT<S> k = heads_of(slice(qkv, 2, d, d));
        TensorT<S> v = heads_of(slice(qkv, 2, 2 * d, d));

        TensorT<S> att = softmax(scale(matmul(q, transpose(k, 1, 2)), 1.0 / std::sqrt(static_cast<double>(hd))), 2);
        if (opts.attention_probe != nullptr) {
            if constexpr (std::is_same_v<S, float>) opts.attention_probe->push_back(att);
        }
        TensorT<S> ctx = matmul(att, v);                                   // [B*H,T,hd]
        ctx = reshape(transpose(reshape(ctx, {b, h, t, hd}), 1, 2), {b, t, d});
        ctx = add(matmul(ctx, blk.proj_weight), blk.proj_bias);
        ctx = detail::apply_dropout(ctx, cfg.dropout, opts, &site);
        x = add(x, ctx);

        TensorT<S> mnorm = layer_norm(x, blk.ln2_gain, blk.ln2_bias, 2, 1e-5);
        TensorT<S> mlp = gelu(add(matmul(mnorm, blk.fc1_weight), blk.fc1_bias));
        mlp = add(matmul(mlp, blk.fc2_weight), blk.fc2_bias);
        mlp = detail::apply_dropout(mlp, cfg.dropout, opts, &site);
        x = add(x, mlp);
    }

    x = layer_norm(x, m.final_ln_gain, m.final_ln_bias, 2, 1e-5);
    return reshape(slice(x, 1, 0, 1), {b, d}); // class token
}

// Classifier head over feature vectors [B, dim] -> logits [B, num_classes].
template <typename S>
TensorT<S> apply_head(const ViTModelT<S>& m, const TensorT<S>& features, const ForwardOpts& opts = {}) {
    // Dropout sites in the head continue after the backbone's; the offset
    // only has to be consistent between calls, so a fixed base is used.
    int site = 1000;
    TensorT<S> f = features;
    const size_t layers = m.head_weights.size();
    for (size_t i = 0; i + 1 < layers; ++i) {
        f = gelu(add(matmul(f, m.head_weights[i]), m.head_biases[i]));
        f = detail::apply_dropout(f, m.cfg.dropout, opts, &site);
    }
    return add(matmul(f, m.head_weights[layers - 1]), m.head_biases[layers - 1]);
}

// Full classifier: logits [B, num_classes]. Softmax is applied only inside
// the loss and predict(), never here.
template <typename S>
TensorT<S> forward(const ViTModelT<S>& m, const TensorT<S>& batch, const ForwardOpts& opts = {}) {
    return apply_head(m, extract_features(m, batch, opts), opts);
}

struct Prediction {
    std::vector<int> labels; // argmax, ties broken toward the lowest index
    Tensor probs;            // [B, num_classes]
};

// Eval-mode prediction: probabilities = softmax(logits).
Prediction predict(const ViTModel& m, const Tensor& batch);

// Stacks same-sized preprocessed images into a [B,H,W,3] model input.
Tensor images_to_batch(const std::vector<Image>& images);

} // namespace clmk
