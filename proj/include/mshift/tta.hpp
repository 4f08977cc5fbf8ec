#ifndef MSHIFT_TTA_HPP
#define MSHIFT_TTA_HPP

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mshift/backbone.hpp"
#include "mshift/image.hpp"
#include "mshift/stain.hpp"

namespace mshift::tta {

/// The 8 symmetries of a square. rot90 is a quarter turn counterclockwise;
/// transpose mirrors across the main diagonal, anti_transpose across the
/// other one.
enum class Geo {
    Identity = 0,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    Transpose,
    AntiTranspose
};

inline constexpr std::array<Geo, 8> kAllGeo = {
    Geo::Identity, Geo::Rot90,  Geo::Rot180,    Geo::Rot270,
    Geo::FlipH,    Geo::FlipV,  Geo::Transpose, Geo::AntiTranspose};

Geo inverse(Geo t);
std::string to_string(Geo t);
Geo geo_from_string(const std::string& s);

/// Exact pixel permutation; requires a square patch.
RgbPatch d4_apply(const RgbPatch& p, Geo t);

enum class StainVariant { Identity = 0, Macenko, Vahadane };
std::string to_string(StainVariant v);
StainVariant stain_variant_from_string(const std::string& s);

/// Test-time plan: every (stain, geometric) pair contributes one forward
/// pass; softmax probabilities are averaged. Normalization runs once per
/// stain variant, then the geometric transforms apply to the normalized
/// patch (per-pixel color ops commute with pixel permutations).
struct TtaPlan {
    std::vector<Geo> geo = {kAllGeo.begin(), kAllGeo.end()};
    std::vector<StainVariant> stains = {StainVariant::Identity, StainVariant::Macenko,
                                        StainVariant::Vahadane};
};

TtaPlan plan_off();    // identity x identity: the plain forward
TtaPlan plan_flips();  // identity + flips + rot180, identity stain set
TtaPlan plan_full();   // all 8 x all 3

struct StainTargets {
    std::optional<stain::ReferenceTarget> macenko;
    std::optional<stain::ReferenceTarget> vahadane;
};

struct TtaResult {
    double prob_atypical = 0.0;
    int n_fallbacks = 0;  // stain variants that fell back to the raw patch
};

/// Mean over all plan variants of softmax(logits)[atypical]. A stain
/// estimator failing on this patch falls back to the raw patch for that
/// variant and is counted, never raised.
TtaResult predict_tta(const backbone::VptViT& model, const RgbPatch& p, const TtaPlan& plan,
                      const StainTargets& targets);

}  // namespace mshift::tta

#endif
