#include <cmath>

#include "doctest.h"
#include "mshift/domain_adapt.hpp"
#include "mshift/errors.hpp"

using namespace mshift;
using namespace mshift::domain;
using diff::Tape;
using diff::Tensor;

TEST_CASE("grl forward is bitwise identity; backward scales by -lambda") {
    Rng rng(4);
    Tensor x = Tensor::uniform({3, 5}, rng, -10, 10);
    Tensor y = grl(nullptr, x, 0.7);
    for (Eigen::Index i = 0; i < x.size(); ++i) CHECK(x[i] == y[i]);

    // lambda = 1: plain sign flip
    {
        Tensor v = Tensor::from({2}, {1.0, -2.0});
        v.set_requires_grad(true);
        Tape tape;
        Tensor g = grl(&tape, v, 1.0);
        Tensor weights = Tensor::from({2}, {3.0, 5.0});
        tape.backward(diff::sum_all(&tape, diff::mul(&tape, g, weights)));
        CHECK(v.grad()[0] == -3.0);
        CHECK(v.grad()[1] == -5.0);
    }
    // lambda = 0.37 with downstream grad [2, -4] -> upstream [-0.74, 1.48]
    {
        Tensor v = Tensor::from({2}, {0.0, 0.0});
        v.set_requires_grad(true);
        Tape tape;
        Tensor g = grl(&tape, v, 0.37);
        Tensor weights = Tensor::from({2}, {2.0, -4.0});
        tape.backward(diff::sum_all(&tape, diff::mul(&tape, g, weights)));
        CHECK(v.grad()[0] == doctest::Approx(-0.74).epsilon(1e-15));
        CHECK(v.grad()[1] == doctest::Approx(1.48).epsilon(1e-15));
    }
}

TEST_CASE("grl backward is linear in lambda") {
    Rng rng(9);
    Tensor base = Tensor::uniform({1, 8}, rng, -1, 1);
    DomainHead head = make_domain_head(8, 16, 3, rng);
    std::vector<int> label = {2};

    auto grad_at = [&](double lambda) {
        Tensor f(base.shape());
        f.value_mut() = base.array();
        f.set_requires_grad(true);
        Tape tape;
        Tensor logits = domain_logits(&tape, f, head, lambda);
        tape.backward(diff::cross_entropy_with_logits(&tape, logits, label));
        return Eigen::ArrayXd(f.grad());
    };

    const Eigen::ArrayXd g1 = grad_at(1.0);
    const Eigen::ArrayXd g2 = grad_at(2.0);
    for (Eigen::Index i = 0; i < g1.size(); ++i) CHECK(g2[i] == 2.0 * g1[i]);
}

TEST_CASE("twin comparison: feature gradient equals -lambda times the no-grl twin") {
    Rng rng(13);
    DomainHead head = make_domain_head(12, 16, 4, rng);
    Tensor base = Tensor::uniform({2, 12}, rng, -1, 1);
    std::vector<int> labels = {1, 3};

    auto feature_grad = [&](bool use_grl, double lambda) {
        Tensor f(base.shape());
        f.value_mut() = base.array();
        f.set_requires_grad(true);
        Tape tape;
        Tensor h = use_grl ? grl(&tape, f, lambda) : f;
        Tensor l1 = diff::gelu(&tape, diff::affine(&tape, h, head.w1, head.b1));
        Tensor logits = diff::affine(&tape, l1, head.w2, head.b2);
        tape.backward(diff::cross_entropy_with_logits(&tape, logits, labels));
        return Eigen::ArrayXd(f.grad());
    };

    const Eigen::ArrayXd twin = feature_grad(false, 0.0);
    for (double lambda : {0.0, 0.5, 1.0}) {
        const Eigen::ArrayXd g = feature_grad(true, lambda);
        for (Eigen::Index i = 0; i < g.size(); ++i)
            CHECK(std::abs(g[i] - (-lambda) * twin[i]) <= 1e-10);
    }
}

TEST_CASE("head parameters receive the ordinary gradient regardless of lambda") {
    Rng rng(31);
    Tensor feats = Tensor::uniform({3, 10}, rng, -1, 1);
    std::vector<int> labels = {0, 1, 2};

    auto head_grads = [&](double lambda) {
        Rng hr(77);
        DomainHead head = make_domain_head(10, 8, 3, hr);
        for (Tensor* t : {&head.w1, &head.b1, &head.w2, &head.b2}) t->set_requires_grad(true);
        Tape tape;
        Tensor logits = domain_logits(&tape, feats, head, lambda);
        tape.backward(diff::cross_entropy_with_logits(&tape, logits, labels));
        Eigen::ArrayXd all(head.w1.size() + head.b1.size() + head.w2.size() + head.b2.size());
        Eigen::Index at = 0;
        for (Tensor* t : {&head.w1, &head.b1, &head.w2, &head.b2}) {
            all.segment(at, t->size()) = t->grad();
            at += t->size();
        }
        return all;
    };

    const Eigen::ArrayXd g0 = head_grads(0.0);
    const Eigen::ArrayXd g1 = head_grads(1.0);
    const Eigen::ArrayXd g5 = head_grads(5.0);
    for (Eigen::Index i = 0; i < g0.size(); ++i) {
        CHECK(g0[i] == g1[i]);
        CHECK(g0[i] == g5[i]);
    }
}

TEST_CASE("dann ramp schedule") {
    GrlCoeff ramp{0.0, GrlCoeff::Schedule::DannRamp, 10.0};
    CHECK(ramp.value(0.0) == 0.0);
    CHECK(ramp.value(1.0) == doctest::Approx(2.0 / (1.0 + std::exp(-10.0)) - 1.0).epsilon(1e-15));
    CHECK(ramp.value(1.0) < 1.0);
    double prev = -1.0;
    for (double p = 0.0; p <= 1.0; p += 0.1) {
        const double v = ramp.value(p);
        CHECK(v >= prev);
        CHECK(v >= 0.0);
        prev = v;
    }
    GrlCoeff constant{0.6, GrlCoeff::Schedule::Constant, 10.0};
    CHECK(constant.value(0.3) == 0.6);
    GrlCoeff bad{-1.0, GrlCoeff::Schedule::Constant, 10.0};
    CHECK_THROWS_AS(bad.value(0.0), NumericError);
}
