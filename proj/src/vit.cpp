#include "clmk/vit.hpp"

#include <algorithm>

namespace clmk {

ViTConfig ViTConfig::b16() {
    ViTConfig cfg;
    cfg.image_size = 224;
    cfg.patch_size = 16;
    cfg.dim = 768;
    cfg.depth = 12;
    cfg.heads = 12;
    cfg.mlp_dim = 3072;
    cfg.head_hidden = {768};
    return cfg;
}

ViTConfig ViTConfig::desk() {
    ViTConfig cfg;
    cfg.image_size = 64;
    cfg.patch_size = 8;
    cfg.dim = 64;
    cfg.depth = 2;
    cfg.heads = 4;
    cfg.mlp_dim = 128;
    cfg.head_hidden = {64};
    return cfg;
}

void ViTConfig::validate() const {
    if (image_size < 1 || patch_size < 1 || dim < 1 || depth < 1 || heads < 1 || mlp_dim < 1)
        throw InvalidConfig("model dimensions must be positive");
    if (image_size % patch_size != 0) throw InvalidConfig("image_size must be divisible by patch_size");
    if (dim % heads != 0) throw InvalidConfig("dim must be divisible by heads");
    if (num_classes != 4) throw InvalidConfig("num_classes must be 4");
    for (int h : head_hidden)
        if (h < 1) throw InvalidConfig("head_hidden widths must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidConfig("dropout must be in [0,1)");
}

int64_t parameter_count(const ViTConfig& cfg) {
    cfg.validate();
    const int64_t d = cfg.dim;
    const int64_t pd = cfg.patch_dim();
    const int64_t t = cfg.tokens();
    int64_t total = pd * d + d; // patch projection
    total += d;                 // class token
    total += t * d;             // positional embeddings
    const int64_t per_block = 2 * d                       // ln1
                              + d * 3 * d + 3 * d         // qkv
                              + d * d + d                 // attention out projection
                              + 2 * d                     // ln2
                              + d * cfg.mlp_dim + cfg.mlp_dim // fc1
                              + cfg.mlp_dim * d + d;      // fc2
    total += per_block * cfg.depth;
    total += 2 * d; // final layer norm
    int64_t prev = d;
    for (int h : cfg.head_hidden) {
        total += prev * h + h;
        prev = h;
    }
    total += prev * cfg.num_classes + cfg.num_classes;
    return total;
}

namespace {

Tensor const_fill(Shape shape, float value) {
    Tensor t = Tensor::filled(std::move(shape), value);
    t.set_requires_grad(true);
    return t;
}

} // namespace

namespace detail {

ViTModel build_zero_model(const ViTConfig& cfg) {
    cfg.validate();
    ViTModel m;
    m.cfg = cfg;
    const int64_t d = cfg.dim;

    m.patch_weight = const_fill({cfg.patch_dim(), d}, 0.0f);
    m.patch_bias = const_fill({d}, 0.0f);
    m.cls_token = const_fill({1, 1, d}, 0.0f);
    m.pos_embed = const_fill({1, cfg.tokens(), d}, 0.0f);

    for (int i = 0; i < cfg.depth; ++i) {
        ViTModel::Block blk;
        blk.ln1_gain = const_fill({d}, 1.0f);
        blk.ln1_bias = const_fill({d}, 0.0f);
        blk.qkv_weight = const_fill({d, 3 * d}, 0.0f);
        blk.qkv_bias = const_fill({3 * d}, 0.0f);
        blk.proj_weight = const_fill({d, d}, 0.0f);
        blk.proj_bias = const_fill({d}, 0.0f);
        blk.ln2_gain = const_fill({d}, 1.0f);
        blk.ln2_bias = const_fill({d}, 0.0f);
        blk.fc1_weight = const_fill({d, cfg.mlp_dim}, 0.0f);
        blk.fc1_bias = const_fill({cfg.mlp_dim}, 0.0f);
        blk.fc2_weight = const_fill({cfg.mlp_dim, d}, 0.0f);
        blk.fc2_bias = const_fill({d}, 0.0f);
        m.blocks.push_back(std::move(blk));
    }

    m.final_ln_gain = const_fill({d}, 1.0f);
    m.final_ln_bias = const_fill({d}, 0.0f);

    int64_t prev = d;
    for (int h : cfg.head_hidden) {
        m.head_weights.push_back(const_fill({prev, h}, 0.0f));
        m.head_biases.push_back(const_fill({h}, 0.0f));
        prev = h;
    }
    m.head_weights.push_back(const_fill({prev, cfg.num_classes}, 0.0f));
    m.head_biases.push_back(const_fill({cfg.num_classes}, 0.0f));
    return m;
}

} // namespace detail

ViTModel init_model(const ViTConfig& cfg, uint64_t seed) {
    ViTModel m = detail::build_zero_model(cfg);
    CounterRng rng(seed);
    // Weight matrices and positional embeddings draw from the stream in
    // canonical parameter order; biases, gains and the class token do not.
    auto fill_tn = [&rng](Tensor& t) {
        auto v = t.data();
        for (int64_t i = 0; i < t.numel(); ++i) v[i] = static_cast<float>(rng.next_trunc_normal(0.0, 0.02));
    };
    fill_tn(m.patch_weight);
    fill_tn(m.pos_embed);
    for (auto& blk : m.blocks) {
        fill_tn(blk.qkv_weight);
        fill_tn(blk.proj_weight);
        fill_tn(blk.fc1_weight);
        fill_tn(blk.fc2_weight);
    }
    for (auto& w : m.head_weights) fill_tn(w);
    return m;
}

Tensor images_to_batch(const std::vector<Image>& images) {
    if (images.empty()) throw Error("empty image batch");
    const int w = images[0].width, h = images[0].height;
    Tensor batch = Tensor::zeros({static_cast<int64_t>(images.size()), h, w, 3});
    auto bv = batch.data();
    size_t off = 0;
    for (const auto& img : images) {
        if (img.width != w || img.height != h) throw ShapeMismatch("batch images must share dimensions");
        std::copy(img.pixels.begin(), img.pixels.end(), bv.begin() + static_cast<std::ptrdiff_t>(off));
        off += img.pixels.size();
    }
    return batch;
}

Prediction predict(const ViTModel& m, const Tensor& batch) {
    const Tensor logits = forward(m, batch);
    Prediction out;
    out.probs = softmax(logits, 1);
    const int64_t b = logits.dim(0);
    const int64_t c = logits.dim(1);
    auto pv = out.probs.data();
    for (int64_t i = 0; i < b; ++i) {
        int best = 0;
        for (int64_t j = 1; j < c; ++j)
            if (pv[i * c + j] > pv[i * c + best]) best = static_cast<int>(j);
        out.labels.push_back(best);
    }
    return out;
}

} // namespace clmk
