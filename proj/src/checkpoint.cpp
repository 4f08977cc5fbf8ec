#include "mshift/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <vector>

#include "mshift/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint layout assumes a little-endian host");

namespace mshift::checkpoint {

namespace {

constexpr char kMagic[8] = {'M', 'S', 'H', 'I', 'F', 'T', '0', '1'};

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_i64(std::ostream& os, std::int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& is, const char* what) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw DataError(std::string("checkpoint: truncated ") + what);
    return v;
}
std::int64_t read_i64(std::istream& is, const char* what) {
    std::int64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw DataError(std::string("checkpoint: truncated ") + what);
    return v;
}
std::string read_str(std::istream& is, const char* what) {
    const std::uint32_t n = read_u32(is, what);
    if (n > 4096) throw DataError(std::string("checkpoint: implausible string length in ") + what);
    std::string s(n, '\0');
    if (!is.read(s.data(), n)) throw DataError(std::string("checkpoint: truncated ") + what);
    return s;
}

std::vector<std::pair<std::string, std::int64_t>> config_entries(const backbone::VptViT& m) {
    return {
        {"image_side", m.cfg.image_side},
        {"patch_size", m.cfg.patch_size},
        {"embed_dim", m.cfg.embed_dim},
        {"num_layers", m.cfg.num_layers},
        {"num_heads", m.cfg.num_heads},
        {"mlp_ratio", m.cfg.mlp_ratio},
        {"num_classes", m.cfg.num_classes},
        {"prompt_len", m.cfg.prompt_len},
        {"lora_rank", m.cfg.lora_rank},
        {"adaptation", static_cast<std::int64_t>(m.mode)},
        {"input_kind", static_cast<std::int64_t>(m.input)},
        {"num_domains", m.num_domains},
    };
}

}  // namespace

void save(const std::string& path, const backbone::VptViT& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot write " + path);
    os.write(kMagic, sizeof(kMagic));
    const auto entries = config_entries(model);
    write_u32(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [k, v] : entries) {
        write_str(os, k);
        write_i64(os, v);
    }
    const auto params = backbone::parameters(model);
    write_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        write_str(os, p.name);
        write_u32(os, static_cast<std::uint32_t>(p.tensor.ndim()));
        for (int d : p.tensor.shape()) write_i64(os, d);
        os.write(reinterpret_cast<const char*>(p.tensor.array().data()),
                 static_cast<std::streamsize>(p.tensor.size()) * 8);
    }
    if (!os) throw DataError("checkpoint: write failed for " + path);
}

backbone::VptViT load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw DataError("checkpoint: bad magic in " + path);

    std::map<std::string, std::int64_t> cfgmap;
    const std::uint32_t n_entries = read_u32(is, "config");
    for (std::uint32_t i = 0; i < n_entries; ++i) {
        const std::string key = read_str(is, "config key");
        cfgmap[key] = read_i64(is, "config value");
    }
    auto need = [&](const char* key) {
        auto it = cfgmap.find(key);
        if (it == cfgmap.end())
            throw DataError("checkpoint: missing config entry \"" + std::string(key) + "\"");
        return it->second;
    };

    backbone::ViTConfig cfg;
    cfg.image_side = static_cast<int>(need("image_side"));
    cfg.patch_size = static_cast<int>(need("patch_size"));
    cfg.embed_dim = static_cast<int>(need("embed_dim"));
    cfg.num_layers = static_cast<int>(need("num_layers"));
    cfg.num_heads = static_cast<int>(need("num_heads"));
    cfg.mlp_ratio = static_cast<int>(need("mlp_ratio"));
    cfg.num_classes = static_cast<int>(need("num_classes"));
    cfg.prompt_len = static_cast<int>(need("prompt_len"));
    cfg.lora_rank = static_cast<int>(need("lora_rank"));
    const auto mode = static_cast<backbone::Adaptation>(need("adaptation"));
    const auto input = static_cast<backbone::InputKind>(need("input_kind"));
    const int num_domains = static_cast<int>(need("num_domains"));

    backbone::VptViT model =
        input == backbone::InputKind::Feature
            ? backbone::make_feature_model(cfg.embed_dim, cfg.num_classes, num_domains, 0)
            : backbone::make_model(cfg, mode, num_domains, 0);

    auto params = backbone::parameters(model);
    const std::uint32_t n_tensors = read_u32(is, "tensor count");
    if (n_tensors != params.size())
        throw DataError("checkpoint: expected " + std::to_string(params.size()) + " tensors, found " +
                        std::to_string(n_tensors));
    for (auto& p : params) {
        const std::string name = read_str(is, "tensor name");
        if (name != p.name)
            throw DataError("checkpoint: tensor \"" + name + "\" where \"" + p.name +
                            "\" was expected");
        const std::uint32_t ndim = read_u32(is, "tensor rank");
        if (ndim != static_cast<std::uint32_t>(p.tensor.ndim()))
            throw DataError("checkpoint: rank mismatch for " + name);
        for (int d : p.tensor.shape()) {
            if (read_i64(is, "tensor shape") != d)
                throw DataError("checkpoint: shape mismatch for " + name);
        }
        if (!is.read(reinterpret_cast<char*>(p.tensor.value_mut().data()),
                     static_cast<std::streamsize>(p.tensor.size()) * 8))
            throw DataError("checkpoint: truncated data for " + name);
    }
    return model;
}

}  // namespace mshift::checkpoint
