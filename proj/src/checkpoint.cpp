#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "clmk/train.hpp"

namespace clmk {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'C', 'L', 'M', 'K'};
constexpr uint32_t kVersion = 1;

void put_u32_le(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) | (static_cast<uint32_t>(p[2]) << 16) |
           (static_cast<uint32_t>(p[3]) << 24);
}

uint64_t get_u64_le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

json config_to_json(const ViTConfig& cfg) {
    json j;
    j["image_size"] = cfg.image_size;
    j["patch_size"] = cfg.patch_size;
    j["dim"] = cfg.dim;
    j["depth"] = cfg.depth;
    j["heads"] = cfg.heads;
    j["mlp_dim"] = cfg.mlp_dim;
    j["num_classes"] = cfg.num_classes;
    j["head_hidden"] = cfg.head_hidden;
    j["dropout"] = cfg.dropout;
    return j;
}

ViTConfig config_from_json(const json& j) {
    ViTConfig cfg;
    cfg.image_size = j.at("image_size").get<int>();
    cfg.patch_size = j.at("patch_size").get<int>();
    cfg.dim = j.at("dim").get<int>();
    cfg.depth = j.at("depth").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.mlp_dim = j.at("mlp_dim").get<int>();
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.head_hidden = j.at("head_hidden").get<std::vector<int>>();
    cfg.dropout = j.at("dropout").get<double>();
    return cfg;
}

void append_f32_le(std::string& out, std::span<const float> values) {
    for (float f : values) {
        const uint32_t bits = std::bit_cast<uint32_t>(f);
        put_u32_le(out, bits);
    }
}

} // namespace

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    auto params = c.model.parameters();
    const auto names = c.model.parameter_names();
    if (c.opt.velocity.size() != params.size()) throw ShapeMismatch("optimizer state does not match parameter list");

    json dir = json::array();
    std::string payload;
    uint64_t offset = 0;
    auto add_tensor = [&](const std::string& name, const Shape& shape, std::span<const float> values) {
        json t;
        t["name"] = name;
        t["shape"] = shape;
        t["offset"] = offset;
        t["nbytes"] = values.size() * 4;
        dir.push_back(t);
        append_f32_le(payload, values);
        offset += values.size() * 4;
    };
    for (size_t i = 0; i < params.size(); ++i) add_tensor(names[i], params[i].shape(), params[i].data());
    for (size_t i = 0; i < params.size(); ++i)
        add_tensor("opt.velocity." + names[i], params[i].shape(), c.opt.velocity[i]);

    json header;
    header["vit"] = config_to_json(c.config);
    header["state"]["epochs_completed"] = c.epochs_completed;
    header["state"]["seed"] = c.seed;
    header["tensors"] = dir;
    const std::string header_str = header.dump();

    std::string blob;
    blob.append(kMagic, 4);
    put_u32_le(blob, kVersion);
    put_u64_le(blob, header_str.size());
    blob += header_str;
    blob += payload;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("short write: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data());

    if (blob.size() < 16) throw Truncated("checkpoint shorter than its fixed header: " + path.string());
    if (std::memcmp(blob.data(), kMagic, 4) != 0) throw BadMagic("bad magic bytes in " + path.string());
    const uint32_t version = get_u32_le(p + 4);
    if (version != kVersion)
        throw VersionMismatch("checkpoint version " + std::to_string(version) + ", expected " + std::to_string(kVersion));
    const uint64_t header_len = get_u64_le(p + 8);
    if (blob.size() < 16 + header_len) throw Truncated("checkpoint header truncated: " + path.string());

    json header;
    try {
        header = json::parse(blob.substr(16, header_len));
    } catch (const json::exception& e) {
        throw Truncated("unreadable checkpoint header: " + std::string(e.what()));
    }

    Checkpoint c;
    c.version = version;
    try {
        c.config = config_from_json(header.at("vit"));
        c.epochs_completed = header.at("state").at("epochs_completed").get<int64_t>();
        c.seed = header.at("state").at("seed").get<uint64_t>();
    } catch (const json::exception& e) {
        throw Truncated("incomplete checkpoint header: " + std::string(e.what()));
    }

    c.model = detail::build_zero_model(c.config);
    auto params = c.model.parameters();
    const auto names = c.model.parameter_names();
    std::map<std::string, size_t> index;
    for (size_t i = 0; i < names.size(); ++i) index[names[i]] = i;
    c.opt.velocity.clear();
    for (const auto& prm : params) c.opt.velocity.emplace_back(static_cast<size_t>(prm.numel()), 0.0f);

    const size_t payload_base = 16 + static_cast<size_t>(header_len);
    size_t loaded = 0;
    for (const auto& t : header.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const uint64_t off = t.at("offset").get<uint64_t>();
        const uint64_t nbytes = t.at("nbytes").get<uint64_t>();
        if (payload_base + off + nbytes > blob.size()) throw Truncated("tensor " + name + " extends past end of file");

        const bool is_velocity = name.rfind("opt.velocity.", 0) == 0;
        const std::string param_name = is_velocity ? name.substr(13) : name;
        auto it = index.find(param_name);
        if (it == index.end()) throw Truncated("unknown tensor in checkpoint: " + name);
        const size_t pi = it->second;

        const uint64_t count = nbytes / 4;
        if (count != static_cast<uint64_t>(params[pi].numel()))
            throw Truncated("tensor " + name + " has " + std::to_string(count) + " scalars, expected " +
                            std::to_string(params[pi].numel()));
        float* dst = is_velocity ? c.opt.velocity[pi].data() : params[pi].data().data();
        const unsigned char* src = p + payload_base + off;
        for (uint64_t i = 0; i < count; ++i) dst[i] = std::bit_cast<float>(get_u32_le(src + 4 * i));
        ++loaded;
    }
    if (loaded != 2 * params.size())
        throw Truncated("checkpoint lists " + std::to_string(loaded) + " tensors, expected " +
                        std::to_string(2 * params.size()));
    return c;
}

} // namespace clmk
