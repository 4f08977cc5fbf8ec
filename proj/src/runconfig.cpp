#include "mshift/runconfig.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "mshift/errors.hpp"

namespace mshift::config {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    if (!cur.empty() || !out.empty()) out.push_back(trim(cur));
    return out;
}

const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> kDefaults = {
        {"seed", "0"},
        {"model.image_side", "64"},
        {"model.patch_size", "8"},
        {"model.embed_dim", "64"},
        {"model.num_layers", "4"},
        {"model.num_heads", "4"},
        {"model.mlp_ratio", "4"},
        {"model.num_classes", "2"},
        {"model.prompt_len", "4"},
        {"model.lora_rank", "4"},
        {"train.adaptation", "vpt"},
        {"train.epochs", "10"},
        {"train.batch_size", "16"},
        {"train.learning_rate", "0.001"},
        {"train.adapter_lr_scale", "0.1"},
        {"train.domain_loss_weight", "1"},
        {"train.class_weights", ""},
        {"train.grl", "on"},
        {"train.grl_lambda", "1"},
        {"train.grl_schedule", "constant"},
        {"train.grl_gamma", "10"},
        {"train.stain", "off"},
        {"train.reference", ""},
        {"tta.geo", "full"},
        {"tta.stains", "identity,macenko,vahadane"},
        {"synth.n_per_class_per_domain", "100"},
        {"synth.side", "64"},
        {"synth.noise_sigma", "0"},
        {"synth.difficulty", "easy"},
        {"synth.domains", "0:0,1:10"},
        {"eval.threshold", "0.5"},
    };
    return kDefaults;
}

}  // namespace

RunConfig::RunConfig() : values_(defaults()) {}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("config: cannot open " + path);
    return from_stream(in, path);
}

RunConfig RunConfig::from_stream(std::istream& in, const std::string& origin) {
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + " line " + std::to_string(lineno) +
                              ": expected key=value, got \"" + line + "\"");
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (values_.find(key) == values_.end())
        throw ConfigError("config: unknown key \"" + key + "\"");
    values_[key] = value;
}

const std::string& RunConfig::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: unknown key \"" + key + "\"");
    return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
    const std::string& v = get(key);
    std::int64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size())
        throw ConfigError("config: key \"" + key + "\" needs an integer, got \"" + v + "\"");
    return out;
}

double RunConfig::get_double(const std::string& key) const {
    const std::string& v = get(key);
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: key \"" + key + "\" needs a number, got \"" + v + "\"");
    }
}

std::uint64_t RunConfig::seed() const { return static_cast<std::uint64_t>(get_int("seed")); }

std::string RunConfig::resolved() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << '=' << v << '\n';
    return os.str();
}

backbone::ViTConfig RunConfig::vit_config() const {
    backbone::ViTConfig c;
    c.image_side = static_cast<int>(get_int("model.image_side"));
    c.patch_size = static_cast<int>(get_int("model.patch_size"));
    c.embed_dim = static_cast<int>(get_int("model.embed_dim"));
    c.num_layers = static_cast<int>(get_int("model.num_layers"));
    c.num_heads = static_cast<int>(get_int("model.num_heads"));
    c.mlp_ratio = static_cast<int>(get_int("model.mlp_ratio"));
    c.num_classes = static_cast<int>(get_int("model.num_classes"));
    c.prompt_len = static_cast<int>(get_int("model.prompt_len"));
    c.lora_rank = static_cast<int>(get_int("model.lora_rank"));
    return c;
}

train::TrainConfig RunConfig::train_config() const {
    train::TrainConfig c;
    c.adaptation = backbone::adaptation_from_string(get("train.adaptation"));
    c.epochs = static_cast<int>(get_int("train.epochs"));
    c.batch_size = static_cast<int>(get_int("train.batch_size"));
    c.learning_rate = get_double("train.learning_rate");
    c.seed = seed();
    c.domain_loss_weight = get_double("train.domain_loss_weight");
    c.adapter_lr_scale = get_double("train.adapter_lr_scale");

    const std::string grl = get("train.grl");
    if (grl != "on" && grl != "off")
        throw ConfigError("config: train.grl must be on or off, got \"" + grl + "\"");
    c.grl_enabled = grl == "on";
    c.grl.lambda = get_double("train.grl_lambda");
    const std::string sched = get("train.grl_schedule");
    if (sched == "constant")
        c.grl.schedule = domain::GrlCoeff::Schedule::Constant;
    else if (sched == "dann_ramp")
        c.grl.schedule = domain::GrlCoeff::Schedule::DannRamp;
    else
        throw ConfigError("config: train.grl_schedule must be constant or dann_ramp, got \"" +
                          sched + "\"");
    c.grl.gamma = get_double("train.grl_gamma");

    const std::string cw = get("train.class_weights");
    if (!cw.empty()) {
        for (const std::string& part : split(cw, ',')) {
            try {
                c.class_weights.push_back(std::stod(part));
            } catch (const std::exception&) {
                throw ConfigError("config: train.class_weights needs numbers, got \"" + cw + "\"");
            }
        }
    }
    const std::string stain = get("train.stain");
    if (stain != "off" && stain != "macenko" && stain != "vahadane")
        throw ConfigError("config: train.stain must be off, macenko or vahadane, got \"" + stain +
                          "\"");
    c.validate();
    return c;
}

data::SynthConfig RunConfig::synth_config() const {
    data::SynthConfig c;
    c.seed = seed();
    c.n_per_class_per_domain = static_cast<int>(get_int("synth.n_per_class_per_domain"));
    c.side = static_cast<int>(get_int("synth.side"));
    c.noise_sigma = get_double("synth.noise_sigma");
    const std::string diff = get("synth.difficulty");
    if (diff == "easy")
        c.difficulty = data::Difficulty::Easy;
    else if (diff == "hard")
        c.difficulty = data::Difficulty::Hard;
    else
        throw ConfigError("config: synth.difficulty must be easy or hard, got \"" + diff + "\"");
    c.domains.clear();
    for (const std::string& part : split(get("synth.domains"), ',')) {
        if (part.empty()) continue;
        const auto colon = part.find(':');
        if (colon == std::string::npos)
            throw ConfigError("config: synth.domains entries are seed:angle, got \"" + part + "\"");
        try {
            data::DomainSpec spec;
            spec.seed = static_cast<std::uint64_t>(std::stoull(part.substr(0, colon)));
            spec.angle_deg = std::stod(part.substr(colon + 1));
            c.domains.push_back(spec);
        } catch (const std::exception&) {
            throw ConfigError("config: bad synth.domains entry \"" + part + "\"");
        }
    }
    if (c.domains.empty()) throw ConfigError("config: synth.domains is empty");
    return c;
}

tta::TtaPlan RunConfig::tta_plan() const {
    tta::TtaPlan plan;
    const std::string geo = get("tta.geo");
    if (geo == "off")
        plan.geo = {tta::Geo::Identity};
    else if (geo == "flips")
        plan.geo = tta::plan_flips().geo;
    else if (geo == "full")
        plan.geo = {tta::kAllGeo.begin(), tta::kAllGeo.end()};
    else {
        plan.geo.clear();
        for (const std::string& part : split(geo, ','))
            if (!part.empty()) plan.geo.push_back(tta::geo_from_string(part));
    }
    const std::string stains = get("tta.stains");
    plan.stains.clear();
    if (stains == "off") {
        plan.stains = {tta::StainVariant::Identity};
    } else {
        for (const std::string& part : split(stains, ','))
            if (!part.empty()) plan.stains.push_back(tta::stain_variant_from_string(part));
    }
    if (plan.geo.empty() || plan.stains.empty())
        throw ConfigError("config: tta.geo and tta.stains must be nonempty");
    return plan;
}

}  // namespace mshift::config
