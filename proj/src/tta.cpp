#include "mshift/tta.hpp"

#include <algorithm>

#include "mshift/errors.hpp"

namespace mshift::tta {

Geo inverse(Geo t) {
    switch (t) {
        case Geo::Rot90: return Geo::Rot270;
        case Geo::Rot270: return Geo::Rot90;
        default: return t;  // identity, rot180, flips and transposes are involutions
    }
}

std::string to_string(Geo t) {
    switch (t) {
        case Geo::Identity: return "identity";
        case Geo::Rot90: return "rot90";
        case Geo::Rot180: return "rot180";
        case Geo::Rot270: return "rot270";
        case Geo::FlipH: return "fliph";
        case Geo::FlipV: return "flipv";
        case Geo::Transpose: return "transpose";
        case Geo::AntiTranspose: return "antitranspose";
    }
    return "?";
}

Geo geo_from_string(const std::string& s) {
    for (Geo g : kAllGeo)
        if (to_string(g) == s) return g;
    throw ConfigError("tta: unknown geometric transform \"" + s + "\"");
}

std::string to_string(StainVariant v) {
    switch (v) {
        case StainVariant::Identity: return "identity";
        case StainVariant::Macenko: return "macenko";
        case StainVariant::Vahadane: return "vahadane";
    }
    return "?";
}

StainVariant stain_variant_from_string(const std::string& s) {
    if (s == "identity") return StainVariant::Identity;
    if (s == "macenko") return StainVariant::Macenko;
    if (s == "vahadane") return StainVariant::Vahadane;
    throw ConfigError("tta: unknown stain variant \"" + s + "\"");
}

RgbPatch d4_apply(const RgbPatch& p, Geo t) {
    if (!p.square()) throw NumericError("d4: patch must be square");
    const int n = p.width;
    RgbPatch out(n, n);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            int sr = r, sc = c;
            switch (t) {
                case Geo::Identity: break;
                case Geo::Rot90: sr = c; sc = n - 1 - r; break;
                case Geo::Rot180: sr = n - 1 - r; sc = n - 1 - c; break;
                case Geo::Rot270: sr = n - 1 - c; sc = r; break;
                case Geo::FlipH: sc = n - 1 - c; break;
                case Geo::FlipV: sr = n - 1 - r; break;
                case Geo::Transpose: sr = c; sc = r; break;
                case Geo::AntiTranspose: sr = n - 1 - c; sc = n - 1 - r; break;
            }
            for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = p.at(sr, sc, ch);
        }
    }
    return out;
}

TtaPlan plan_off() {
    TtaPlan plan;
    plan.geo = {Geo::Identity};
    plan.stains = {StainVariant::Identity};
    return plan;
}

TtaPlan plan_flips() {
    TtaPlan plan;
    plan.geo = {Geo::Identity, Geo::FlipH, Geo::FlipV, Geo::Rot180};
    plan.stains = {StainVariant::Identity};
    return plan;
}

TtaPlan plan_full() { return TtaPlan{}; }

namespace {

double forward_prob(const backbone::VptViT& model, const RgbPatch& p) {
    const diff::Tensor logits = backbone::forward(nullptr, model, p).logits;
    const diff::Tensor sm = diff::softmax(nullptr, logits);
    return sm[1];
}

std::vector<Geo> sorted_unique(std::vector<Geo> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

std::vector<StainVariant> sorted_unique(std::vector<StainVariant> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

}  // namespace

TtaResult predict_tta(const backbone::VptViT& model, const RgbPatch& p, const TtaPlan& plan,
                      const StainTargets& targets) {
    if (plan.geo.empty() || plan.stains.empty())
        throw ConfigError("tta: plan needs at least one geometric and one stain variant");
    // fixed variant order keeps the average bit-stable
    const std::vector<StainVariant> stains = sorted_unique(plan.stains);
    const std::vector<Geo> geos = sorted_unique(plan.geo);

    TtaResult result;
    double acc = 0.0;
    for (StainVariant sv : stains) {
        RgbPatch variant = p;
        if (sv != StainVariant::Identity) {
            const auto& target =
                sv == StainVariant::Macenko ? targets.macenko : targets.vahadane;
            if (!target)
                throw ConfigError("tta: plan includes " + to_string(sv) +
                                  " but no reference target was provided");
            try {
                variant = stain::normalize(
                    p, sv == StainVariant::Macenko ? stain::Estimator::Macenko
                                                   : stain::Estimator::Vahadane,
                    *target);
            } catch (const NumericError&) {
                variant = p;  // estimator failed on this patch; keep it raw
                ++result.n_fallbacks;
            }
        }
        for (Geo g : geos) acc += forward_prob(model, d4_apply(variant, g));
    }
    result.prob_atypical = acc / (static_cast<double>(stains.size()) * geos.size());
    return result;
}

}  // namespace mshift::tta
