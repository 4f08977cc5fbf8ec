#ifndef MSHIFT_DOMAIN_ADAPT_HPP
#define MSHIFT_DOMAIN_ADAPT_HPP

#include "mshift/autodiff.hpp"
#include "mshift/rng.hpp"

namespace mshift::domain {

/// Reversal strength. The ramp follows lambda(p) = 2/(1+exp(-gamma p)) - 1
/// over training progress p in [0,1], independent of the lambda field.
struct GrlCoeff {
    enum class Schedule { Constant, DannRamp };
    double lambda = 1.0;
    Schedule schedule = Schedule::Constant;
    double gamma = 10.0;

    double value(double progress) const;
};

/// Two fully connected layers with GELU between: embed -> hidden -> domains.
struct DomainHead {
    diff::Tensor w1, b1, w2, b2;
    int num_domains() const { return static_cast<int>(w2.shape()[1]); }
};

DomainHead make_domain_head(int embed_dim, int hidden, int num_domains, Rng& rng);

/// Gradient reversal: bitwise identity forward, upstream gradient scaled by
/// -lambda in backward.
diff::Tensor grl(diff::Tape* tape, const diff::Tensor& x, double lambda);

/// head(grl(shared, lambda)). Head parameters always receive the ordinary
/// gradient; only the backbone-side path is reversed.
diff::Tensor domain_logits(diff::Tape* tape, const diff::Tensor& shared, const DomainHead& head,
                           double lambda);

}  // namespace mshift::domain

#endif
