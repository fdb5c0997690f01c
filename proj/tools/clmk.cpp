// clmk: colonoscopy landmark classification pipeline tool.
//
// Subcommands cover the full flow: synthetic data generation, preprocessing,
// video-level splitting, sampling-plan inspection, training, evaluation and
// embedding export. stdout always carries a single JSON document; logs and
// tables go to stderr. Exit codes: 0 success, 2 usage/config error, 3 I/O
// error, 4 numerical failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "clmk/dataset.hpp"
#include "clmk/eval.hpp"
#include "clmk/image.hpp"
#include "clmk/sampling.hpp"
#include "clmk/synth.hpp"
#include "clmk/train.hpp"
#include "clmk/vit.hpp"

namespace {

using clmk::ConfigError;
using nlohmann::json;

json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
}

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) ok = true;
        if (!ok) throw ConfigError("unknown key \"" + key + "\" in " + where);
    }
}

std::array<int, 4> counts_from(const json& j, const char* key) {
    if (!j.contains(key)) return {0, 0, 0, 0};
    const auto v = j.at(key).get<std::vector<int>>();
    if (v.size() != 4) throw ConfigError(std::string(key) + " must have 4 entries (AO, ICV_CEC, REC_RF, OTHER)");
    return {v[0], v[1], v[2], v[3]};
}

clmk::SynthConfig synth_config_from_json(const json& j) {
    reject_unknown(j, {"train_counts", "val_counts", "test_counts", "snapshot_counts", "image_size",
                       "disagreement_rate", "border_fraction", "border_px", "frames_per_video"},
                   "synthetic data config");
    clmk::SynthConfig cfg;
    cfg.train_counts = counts_from(j, "train_counts");
    cfg.val_counts = counts_from(j, "val_counts");
    cfg.test_counts = counts_from(j, "test_counts");
    cfg.snapshot_counts = counts_from(j, "snapshot_counts");
    if (j.contains("image_size")) cfg.image_size = j.at("image_size").get<int>();
    if (j.contains("disagreement_rate")) cfg.disagreement_rate = j.at("disagreement_rate").get<double>();
    if (j.contains("border_fraction")) cfg.border_fraction = j.at("border_fraction").get<double>();
    if (j.contains("border_px")) cfg.border_px = j.at("border_px").get<int>();
    if (j.contains("frames_per_video")) cfg.frames_per_video = j.at("frames_per_video").get<int>();
    return cfg;
}

clmk::PreprocessConfig preprocess_config_from_json(const json& j) {
    reject_unknown(j, {"dark_threshold", "target_width", "target_height", "gamma_correction"}, "preprocess config");
    clmk::PreprocessConfig cfg;
    if (j.contains("dark_threshold")) cfg.dark_threshold = j.at("dark_threshold").get<double>();
    if (j.contains("target_width")) cfg.target_width = j.at("target_width").get<int>();
    if (j.contains("target_height")) cfg.target_height = j.at("target_height").get<int>();
    if (j.contains("gamma_correction")) cfg.gamma_correction = j.at("gamma_correction").get<bool>();
    return cfg;
}

clmk::ViTConfig vit_config_from_json(const json& j) {
    reject_unknown(j, {"preset", "image_size", "patch_size", "dim", "depth", "heads", "mlp_dim", "num_classes",
                       "head_hidden", "dropout"},
                   "model config");
    clmk::ViTConfig cfg = clmk::ViTConfig::desk();
    if (j.contains("preset")) {
        const auto p = j.at("preset").get<std::string>();
        if (p == "desk")
            cfg = clmk::ViTConfig::desk();
        else if (p == "b16")
            cfg = clmk::ViTConfig::b16();
        else
            throw ConfigError("unknown model preset: " + p);
    }
    if (j.contains("image_size")) cfg.image_size = j.at("image_size").get<int>();
    if (j.contains("patch_size")) cfg.patch_size = j.at("patch_size").get<int>();
    if (j.contains("dim")) cfg.dim = j.at("dim").get<int>();
    if (j.contains("depth")) cfg.depth = j.at("depth").get<int>();
    if (j.contains("heads")) cfg.heads = j.at("heads").get<int>();
    if (j.contains("mlp_dim")) cfg.mlp_dim = j.at("mlp_dim").get<int>();
    if (j.contains("num_classes")) cfg.num_classes = j.at("num_classes").get<int>();
    if (j.contains("head_hidden")) cfg.head_hidden = j.at("head_hidden").get<std::vector<int>>();
    if (j.contains("dropout")) cfg.dropout = j.at("dropout").get<double>();
    return cfg;
}

clmk::TrainConfig train_config_from_json(const json& j) {
    reject_unknown(j, {"epochs", "batch_size", "learning_rate", "momentum", "weight_decay", "sam_rho",
                       "label_smoothing", "seed", "sampling"},
                   "train config");
    clmk::TrainConfig cfg;
    if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
    if (j.contains("learning_rate")) cfg.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("momentum")) cfg.momentum = j.at("momentum").get<double>();
    if (j.contains("weight_decay")) cfg.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("sam_rho")) cfg.sam_rho = j.at("sam_rho").get<double>();
    if (j.contains("label_smoothing")) cfg.label_smoothing = j.at("label_smoothing").get<double>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
    if (j.contains("sampling")) cfg.sampling = j.at("sampling").get<bool>();
    return cfg;
}

std::string dist_json(const std::array<double, 4>& values) {
    char buf[256];
    std::snprintf(buf, sizeof buf, R"({"AO": %.6f, "ICV_CEC": %.6f, "REC_RF": %.6f, "OTHER": %.6f})",
                  values[0], values[1], values[2], values[3]);
    return buf;
}

int run_gen_data(const std::string& out_dir, const std::string& config_path, uint64_t seed) {
    const clmk::SynthConfig cfg = synth_config_from_json(load_config_file(config_path));
    const clmk::Manifest m = clmk::generate_synthetic_dataset(cfg, seed, out_dir);

    std::array<std::array<int64_t, 4>, 4> counts{};
    for (const auto& r : m.records) counts[static_cast<size_t>(r.split)][static_cast<size_t>(r.effective_label())]++;
    json out;
    for (int s = 0; s < 4; ++s) {
        json per;
        for (int c = 0; c < 4; ++c)
            per[clmk::to_string(clmk::label_from_index(c))] = counts[static_cast<size_t>(s)][static_cast<size_t>(c)];
        out[clmk::to_string(static_cast<clmk::Split>(s))] = per;
    }
    out["total"] = m.records.size();
    out["manifest"] = (std::filesystem::path(out_dir) / "manifest.jsonl").string();
    std::cout << out.dump() << "\n";
    return 0;
}

int run_sample_plan(const std::string& manifest_path) {
    const clmk::Manifest m = clmk::consensus_filter(clmk::load_manifest(manifest_path));
    const auto train_dist = clmk::class_distribution(m, clmk::Split::TRAIN);
    const auto snap_dist = clmk::class_distribution(m, clmk::Split::SNAPSHOT);
    const auto plan = clmk::compute_inclusion_probs(train_dist, snap_dist);
    const auto expected = clmk::expected_post_sampling_distribution(train_dist, plan);
    std::cout << R"({"p": )" << dist_json(plan.p) << R"(, "expected_distribution": )" << dist_json(expected.proportion)
              << "}\n";
    return 0;
}

int run_preprocess(const std::string& in_path, const std::string& out_path, const clmk::PreprocessConfig& cfg) {
    const clmk::Image out = clmk::preprocess(clmk::read_ppm(in_path), cfg);
    clmk::write_ppm(out, out_path);
    json j;
    j["in"] = in_path;
    j["out"] = out_path;
    j["width"] = out.width;
    j["height"] = out.height;
    std::cout << j.dump() << "\n";
    return 0;
}

int run_split(const std::string& manifest_path, const std::string& ratios_str, uint64_t seed, std::string out_path) {
    std::array<double, 3> ratios{};
    {
        std::stringstream ss(ratios_str);
        std::string tok;
        size_t i = 0;
        while (std::getline(ss, tok, ',') && i < 3) ratios[i++] = std::stod(tok);
        if (i != 3 || std::getline(ss, tok, ','))
            throw ConfigError("--ratios expects exactly three comma-separated values");
    }
    const clmk::Manifest m = clmk::load_manifest(manifest_path);
    clmk::Manifest out;
    try {
        out = clmk::split_by_video(m, ratios, seed);
    } catch (const clmk::InsufficientVideos&) {
        throw;
    } catch (const clmk::Error& e) {
        throw ConfigError(e.what());
    }
    if (out_path.empty()) out_path = manifest_path;
    clmk::save_manifest(out, out_path);

    json j;
    for (int s = 0; s < 4; ++s) {
        std::set<std::string> videos;
        int64_t frames = 0;
        for (const auto& r : out.records)
            if (r.split == static_cast<clmk::Split>(s)) {
                videos.insert(r.video_id);
                ++frames;
            }
        j[clmk::to_string(static_cast<clmk::Split>(s))] = {{"videos", videos.size()}, {"frames", frames}};
    }
    j["manifest"] = out_path;
    std::cout << j.dump() << "\n";
    return 0;
}

int run_train(const std::string& manifest_path, const std::string& config_path, const std::string& out_path,
              std::string log_path, int epochs_override, int64_t seed_override) {
    const json file = load_config_file(config_path);
    reject_unknown(file, {"model", "train", "preprocess"}, "run config");
    clmk::ViTConfig vit_cfg = vit_config_from_json(file.value("model", json::object()));
    clmk::TrainConfig train_cfg = train_config_from_json(file.value("train", json::object()));
    train_cfg.preprocess = preprocess_config_from_json(file.value("preprocess", json::object()));
    if (epochs_override >= 0) train_cfg.epochs = epochs_override;
    if (seed_override >= 0) train_cfg.seed = static_cast<uint64_t>(seed_override);

    const clmk::Manifest manifest = clmk::load_manifest(manifest_path);

    if (log_path.empty()) log_path = out_path + ".log.jsonl";
    std::ofstream log(log_path, std::ios::binary);
    if (!log) throw clmk::IoError("cannot open training log for writing: " + log_path);

    const auto result = clmk::train(manifest, vit_cfg, train_cfg, [&log](const clmk::EpochLog& e) {
        json j;
        j["epoch"] = e.epoch;
        j["train_loss"] = e.train_loss;
        if (e.val_accuracy)
            j["val_accuracy"] = *e.val_accuracy;
        else
            j["val_accuracy"] = nullptr;
        j["sampled_frames"] = e.sampled_frames;
        log << j.dump() << "\n";
        std::cerr << "epoch " << e.epoch << " loss " << e.train_loss;
        if (e.val_accuracy) std::cerr << " val_acc " << *e.val_accuracy;
        std::cerr << " frames " << e.sampled_frames << "\n";
    });

    clmk::save_checkpoint(result.final, out_path);
    clmk::save_checkpoint(result.best, out_path + ".best");

    json j;
    j["checkpoint"] = out_path;
    j["best_checkpoint"] = out_path + ".best";
    j["log"] = log_path;
    j["epochs"] = train_cfg.epochs;
    if (!result.log.empty()) {
        j["final_train_loss"] = result.log.back().train_loss;
        double best = -1.0;
        for (const auto& e : result.log)
            if (e.val_accuracy && *e.val_accuracy > best) best = *e.val_accuracy;
        if (best >= 0.0)
            j["best_val_accuracy"] = best;
        else
            j["best_val_accuracy"] = nullptr;
    }
    std::cout << j.dump() << "\n";
    return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& manifest_path, const std::string& split_name,
             const clmk::PreprocessConfig& cfg) {
    const clmk::Checkpoint c = clmk::load_checkpoint(ckpt_path);
    const clmk::Manifest manifest = clmk::consensus_filter(clmk::load_manifest(manifest_path));
    const clmk::Split split = clmk::split_from_string(split_name);
    const auto cm = clmk::confusion(c.model, manifest, split, cfg);
    const auto report = clmk::metrics(cm);
    std::cerr << clmk::format_metrics_table(report);
    std::cout << clmk::metrics_to_json(report, cm) << "\n";
    return 0;
}

int run_embed(const std::string& ckpt_path, const std::string& manifest_path, const std::string& split_name,
              const std::string& out_path, const clmk::PreprocessConfig& cfg) {
    const clmk::Checkpoint c = clmk::load_checkpoint(ckpt_path);
    const clmk::Manifest manifest = clmk::consensus_filter(clmk::load_manifest(manifest_path));
    const clmk::Split split = clmk::split_from_string(split_name);
    const auto proj = clmk::export_embeddings(c.model, manifest, split, cfg, out_path);
    int64_t rows = 0;
    for (const auto& r : manifest.records)
        if (r.split == split) ++rows;
    json j;
    j["out"] = out_path;
    j["rows"] = rows;
    j["explained_variance"] = {proj.explained[0], proj.explained[1]};
    std::cout << j.dump() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"colonoscopy landmark classification pipeline"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    std::string gen_out, gen_config;
    uint64_t gen_seed = 0;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--config", gen_config, "synthetic data config (JSON)")->required();
    gen->add_option("--seed", gen_seed, "generator seed");

    // sample-plan
    auto* plan = app.add_subcommand("sample-plan", "inclusion probabilities from TRAIN vs SNAPSHOT distributions");
    std::string plan_manifest;
    plan->add_option("--manifest", plan_manifest, "manifest.jsonl path")->required();

    // preprocess
    auto* prep = app.add_subcommand("preprocess", "run the preprocessing pipeline on one image");
    std::string prep_in, prep_out, prep_config;
    double prep_threshold = -1.0;
    int prep_w = -1, prep_h = -1;
    bool prep_no_gamma = false;
    prep->add_option("--in", prep_in, "input PPM")->required();
    prep->add_option("--out", prep_out, "output PPM")->required();
    prep->add_option("--config", prep_config, "config file with a preprocess section");
    prep->add_option("--dark-threshold", prep_threshold, "border luminance threshold");
    prep->add_option("--target-width", prep_w, "output width");
    prep->add_option("--target-height", prep_h, "output height");
    prep->add_flag("--no-gamma", prep_no_gamma, "disable adaptive gamma correction");

    // split
    auto* split = app.add_subcommand("split", "assign videos to TRAIN/VAL/TEST");
    std::string split_manifest, split_ratios, split_out;
    uint64_t split_seed = 0;
    split->add_option("--manifest", split_manifest, "manifest.jsonl path")->required();
    split->add_option("--ratios", split_ratios, "train,val,test ratios, e.g. 0.8,0.1,0.1")->required();
    split->add_option("--seed", split_seed, "assignment seed");
    split->add_option("--out", split_out, "output manifest (default: rewrite input)");

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model");
    std::string train_manifest, train_config, train_out, train_log;
    int train_epochs = -1;
    int64_t train_seed = -1;
    train_cmd->add_option("--manifest", train_manifest, "manifest.jsonl path")->required();
    train_cmd->add_option("--config", train_config, "run config (JSON)")->required();
    train_cmd->add_option("--out", train_out, "checkpoint output path")->required();
    train_cmd->add_option("--log", train_log, "training log path (default: <out>.log.jsonl)");
    train_cmd->add_option("--epochs", train_epochs, "override config epochs");
    train_cmd->add_option("--seed", train_seed, "override config seed");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on one split");
    std::string eval_ckpt, eval_manifest, eval_split, eval_config;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--manifest", eval_manifest, "manifest.jsonl path")->required();
    eval_cmd->add_option("--split", eval_split, "TRAIN, VAL, TEST or SNAPSHOT")->required();
    eval_cmd->add_option("--config", eval_config, "config file with a preprocess section");

    // embed
    auto* embed_cmd = app.add_subcommand("embed", "export 2D feature embeddings as CSV");
    std::string emb_ckpt, emb_manifest, emb_split, emb_out, emb_config;
    embed_cmd->add_option("--checkpoint", emb_ckpt, "checkpoint path")->required();
    embed_cmd->add_option("--manifest", emb_manifest, "manifest.jsonl path")->required();
    embed_cmd->add_option("--split", emb_split, "TRAIN, VAL, TEST or SNAPSHOT")->required();
    embed_cmd->add_option("--out", emb_out, "output CSV path")->required();
    embed_cmd->add_option("--config", emb_config, "config file with a preprocess section");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp" || e.get_name() == "CallForVersion")
            return app.exit(e);
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    auto preprocess_cfg_for = [&](const std::string& cfg_path) {
        clmk::PreprocessConfig cfg;
        if (!cfg_path.empty()) {
            const json file = load_config_file(cfg_path);
            reject_unknown(file, {"model", "train", "preprocess"}, "run config");
            cfg = preprocess_config_from_json(file.value("preprocess", json::object()));
        }
        return cfg;
    };

    try {
        if (gen->parsed()) return run_gen_data(gen_out, gen_config, gen_seed);
        if (plan->parsed()) return run_sample_plan(plan_manifest);
        if (prep->parsed()) {
            clmk::PreprocessConfig cfg = preprocess_cfg_for(prep_config);
            if (prep_threshold >= 0.0) cfg.dark_threshold = prep_threshold;
            if (prep_w > 0) cfg.target_width = prep_w;
            if (prep_h > 0) cfg.target_height = prep_h;
            if (prep_no_gamma) cfg.gamma_correction = false;
            return run_preprocess(prep_in, prep_out, cfg);
        }
        if (split->parsed()) return run_split(split_manifest, split_ratios, split_seed, split_out);
        if (train_cmd->parsed()) return run_train(train_manifest, train_config, train_out, train_log, train_epochs, train_seed);
        if (eval_cmd->parsed()) return run_eval(eval_ckpt, eval_manifest, eval_split, preprocess_cfg_for(eval_config));
        if (embed_cmd->parsed()) return run_embed(emb_ckpt, emb_manifest, emb_split, emb_out, preprocess_cfg_for(emb_config));
    } catch (const clmk::NonFiniteLoss& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const clmk::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const clmk::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const clmk::DuplicateFrame& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const clmk::BadMagic& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const clmk::VersionMismatch& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const clmk::Truncated& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const clmk::DegenerateImage& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const clmk::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
