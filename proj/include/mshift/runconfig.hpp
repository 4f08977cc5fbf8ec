#ifndef MSHIFT_RUNCONFIG_HPP
#define MSHIFT_RUNCONFIG_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mshift/backbone.hpp"
#include "mshift/data.hpp"
#include "mshift/train.hpp"
#include "mshift/tta.hpp"

namespace mshift::config {

/// Flat key=value run configuration. Every key has a registered default;
/// unknown keys are rejected by name. '#' starts a comment.
class RunConfig {
public:
    RunConfig();  // defaults only
    static RunConfig from_file(const std::string& path);
    static RunConfig from_stream(std::istream& in, const std::string& origin);

    void set(const std::string& key, const std::string& value);  // rejects unknown keys
    const std::string& get(const std::string& key) const;

    std::int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    std::uint64_t seed() const;

    /// Serialized key=value lines, sorted; written next to every command's
    /// outputs.
    std::string resolved() const;

    backbone::ViTConfig vit_config() const;
    train::TrainConfig train_config() const;
    data::SynthConfig synth_config() const;
    tta::TtaPlan tta_plan() const;

    /// Train-time stain preprocessing: "off", "macenko" or "vahadane".
    std::string train_stain() const { return get("train.stain"); }
    std::string train_reference() const { return get("train.reference"); }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace mshift::config

#endif
