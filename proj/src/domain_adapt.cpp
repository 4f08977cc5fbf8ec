#include "mshift/domain_adapt.hpp"

#include <cmath>

#include "mshift/errors.hpp"

namespace mshift::domain {

using diff::Tensor;

double GrlCoeff::value(double progress) const {
    if (lambda < 0) throw NumericError("grl: negative lambda");
    if (schedule == Schedule::Constant) return lambda;
    const double p = std::clamp(progress, 0.0, 1.0);
    return 2.0 / (1.0 + std::exp(-gamma * p)) - 1.0;
}

DomainHead make_domain_head(int embed_dim, int hidden, int num_domains, Rng& rng) {
    DomainHead h;
    h.w1 = Tensor::normal({embed_dim, hidden}, rng, 0.0, 0.02);
    h.b1 = Tensor({hidden});
    h.w2 = Tensor::normal({hidden, num_domains}, rng, 0.0, 0.02);
    h.b2 = Tensor({num_domains});
    return h;
}

Tensor grl(diff::Tape* tape, const Tensor& x, double lambda) {
    Tensor out(x.shape());
    out.value_mut() = x.array();
    if (tape && tape->tracked(x)) {
        const int ix = tape->node_for(x);
        const Eigen::Index n = x.size();
        tape->record({ix}, out, [ix, n, lambda](const Eigen::ArrayXd& g, diff::GradStore& gs) {
            gs.accum(ix, n) += g * (-lambda);
        });
    }
    return out;
}

Tensor domain_logits(diff::Tape* tape, const Tensor& shared, const DomainHead& head,
                     double lambda) {
    Tensor h = diff::affine(tape, grl(tape, shared, lambda), head.w1, head.b1);
    h = diff::gelu(tape, h);
    return diff::affine(tape, h, head.w2, head.b2);
}

}  // namespace mshift::domain
