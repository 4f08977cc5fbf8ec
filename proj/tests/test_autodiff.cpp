#include <cmath>
#include <vector>

#include "doctest.h"
#include "mshift/autodiff.hpp"
#include "mshift/errors.hpp"

using namespace mshift;
using namespace mshift::diff;

namespace {

// Independent reference evaluations, plain loops only.
std::vector<double> ref_matmul(const std::vector<double>& a, int m, int k,
                               const std::vector<double>& b, int n) {
    std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int t = 0; t < k; ++t) c[i * n + j] += a[i * k + t] * b[t * n + j];
    return c;
}

std::vector<double> ref_softmax_row(const std::vector<double>& z) {
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    double s = 0.0;
    std::vector<double> e(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        e[i] = std::exp(z[i] - m);
        s += e[i];
    }
    for (double& v : e) v /= s;
    return e;
}

// Single-coordinate finite-difference check of an arbitrary scalar graph.
double fd_max_rel(const std::function<Tensor(Tape*)>& f, std::span<Tensor> params) {
    return grad_check(f, params, 1e-5, 500, 1234);
}

}  // namespace

TEST_CASE("matmul identity and reference agreement") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor c = matmul(nullptr, a, id);
    CHECK(c[0] == 1.0);
    CHECK(c[1] == 2.0);
    CHECK(c[2] == 3.0);
    CHECK(c[3] == 4.0);

    Rng rng(7);
    Tensor x = Tensor::uniform({3, 5}, rng, -2, 2);
    Tensor y = Tensor::uniform({5, 4}, rng, -2, 2);
    Tensor z = matmul(nullptr, x, y);
    std::vector<double> xa(x.array().data(), x.array().data() + x.size());
    std::vector<double> ya(y.array().data(), y.array().data() + y.size());
    auto zr = ref_matmul(xa, 3, 5, ya, 4);
    for (Eigen::Index i = 0; i < z.size(); ++i)
        CHECK(z[i] == doctest::Approx(zr[static_cast<std::size_t>(i)]).epsilon(1e-12));
}

TEST_CASE("matmul shape mismatch names primitive and shapes") {
    Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from({2, 2}, {1, 0, 0, 1});
    try {
        matmul(nullptr, a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("matmul") != std::string::npos);
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[2,2]") != std::string::npos);
    }
}

TEST_CASE("softmax symmetry, simplex invariant, stability") {
    Tensor z = Tensor::from({3}, {0, 0, 0});
    Tensor s = softmax(nullptr, z);
    for (int i = 0; i < 3; ++i) CHECK(s[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));

    Rng rng(3);
    Tensor big = Tensor::uniform({4, 6}, rng, -1e3, 1e3);
    Tensor sb = softmax(nullptr, big);
    for (Eigen::Index r = 0; r < 4; ++r) {
        double sum = 0.0;
        for (Eigen::Index c = 0; c < 6; ++c) {
            const double v = sb[r * 6 + c];
            CHECK(std::isfinite(v));
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }

    std::vector<double> row = {0.3, -1.2, 2.0, 0.0, 5.5, -3.0};
    Tensor t = Tensor::from({1, 6}, row);
    Tensor st = softmax(nullptr, t);
    auto ref = ref_softmax_row(row);
    for (int i = 0; i < 6; ++i)
        CHECK(st[i] == doctest::Approx(ref[static_cast<std::size_t>(i)]).epsilon(1e-12));
}

TEST_CASE("layer_norm zero-variance convention") {
    Tensor x = Tensor::from({1, 4}, {3.5, 3.5, 3.5, 3.5});
    Tensor g = Tensor::full({4}, 1.0);
    Tensor b = Tensor::full({4}, 0.0);
    Tensor y = layer_norm(nullptr, x, g, b);
    for (int i = 0; i < 4; ++i) CHECK(y[i] == 0.0);

    // with affine shift the zero pre-affine output lands on beta
    Tensor b2 = Tensor::full({4}, -1.5);
    Tensor y2 = layer_norm(nullptr, x, g, b2);
    for (int i = 0; i < 4; ++i) CHECK(y2[i] == -1.5);
}

TEST_CASE("backward sum and dot") {
    {
        Tensor x = Tensor::from({3}, {1.0, -2.0, 0.5});
        x.set_requires_grad(true);
        Tape tape;
        Tensor loss = sum_all(&tape, x);
        tape.backward(loss);
        for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);
    }
    {
        Tensor x = Tensor::from({1, 2}, {1, 2});
        Tensor y = Tensor::from({2, 1}, {3, 4});
        x.set_requires_grad(true);
        y.set_requires_grad(true);
        Tape tape;
        Tensor loss = matmul(&tape, x, y);
        tape.backward(loss);
        CHECK(x.grad()[0] == 3.0);
        CHECK(x.grad()[1] == 4.0);
        CHECK(y.grad()[0] == 1.0);
        CHECK(y.grad()[1] == 2.0);
    }
}

TEST_CASE("backward rejects non-scalar loss and untouched leaves stay untouched") {
    Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
    x.set_requires_grad(true);
    Tensor unused = Tensor::from({2}, {5, 6});
    unused.set_requires_grad(true);
    Tape tape;
    Tensor y = scale(&tape, x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), NumericError);
    Tensor loss = sum_all(&tape, y);
    tape.backward(loss);
    CHECK(x.grad()[0] == 2.0);
    CHECK_FALSE(unused.has_grad());
}

TEST_CASE("diamond graph accumulates both paths and visits nodes once") {
    // loss = sum(x*y) + sum(x)  => dx = y + 1, dy = x
    Tensor x = Tensor::from({2}, {1.5, -0.5});
    Tensor y = Tensor::from({2}, {2.0, 3.0});
    x.set_requires_grad(true);
    y.set_requires_grad(true);
    Tape tape;
    Tensor loss = add(&tape, sum_all(&tape, mul(&tape, x, y)), sum_all(&tape, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(3.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(y.grad()[0] == doctest::Approx(1.5));
    CHECK(y.grad()[1] == doctest::Approx(-0.5));
    // ops recorded: mul, sum, sum, add -> exactly 4 backward visits
    CHECK(tape.backward_visits() == 4);
}

TEST_CASE("finite differences across the primitive suite") {
    Rng rng(11);
    Tensor w1 = Tensor::uniform({4, 6}, rng, -0.8, 0.8);
    Tensor w2 = Tensor::uniform({3, 6}, rng, -0.8, 0.8);
    Tensor gamma = Tensor::uniform({6}, rng, 0.5, 1.5);
    Tensor beta = Tensor::uniform({6}, rng, -0.3, 0.3);
    Tensor bias = Tensor::uniform({6}, rng, -0.5, 0.5);
    for (Tensor* p : {&w1, &w2, &gamma, &beta, &bias}) p->set_requires_grad(true);
    std::vector<Tensor> params = {w1, w2, gamma, beta, bias};

    Tensor x = Tensor::uniform({5, 4}, rng, -1, 1);
    std::vector<int> labels = {0, 2, 1, 1, 0};

    auto f = [&](Tape* tape) {
        Tensor h = matmul(tape, x, w1);                      // [5,6]
        h = add(tape, h, bias);                              // row broadcast
        h = layer_norm(tape, h, gamma, beta);
        h = gelu(tape, h);
        Tensor top = slice_rows(tape, h, 0, 3);
        Tensor bottom = slice_rows(tape, h, 3, 2);
        std::vector<Tensor> parts = {top, bottom};
        h = concat_rows(tape, parts);
        Tensor left = slice_cols(tape, h, 0, 2);
        Tensor right = slice_cols(tape, h, 2, 4);
        std::vector<Tensor> cparts = {left, right};
        h = concat_cols(tape, cparts);
        Tensor logits = matmul(tape, h, transpose(tape, w2));  // [5,3]
        Tensor sm = softmax(tape, scale(tape, logits, 0.7));
        Tensor ce = cross_entropy_with_logits(tape, logits, labels);
        return add(tape, ce, mean_all(tape, mul(tape, sm, sm)));
    };

    CHECK(fd_max_rel(f, params) < 1e-6);
}

TEST_CASE("grad_check on x^2 and a weighted cross-entropy head") {
    Tensor x = Tensor::scalar(3.0);
    x.set_requires_grad(true);
    std::vector<Tensor> px = {x};
    auto sq = [&](Tape* t) { return mul(t, x, x); };
    CHECK(grad_check(sq, px, 1e-5, 10, 1) < 1e-9);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-9));

    Rng rng(5);
    Tensor w = Tensor::uniform({4, 2}, rng, -1, 1);
    Tensor b = Tensor::uniform({2}, rng, -0.2, 0.2);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    Tensor input = Tensor::uniform({6, 4}, rng, -1, 1);
    std::vector<int> labels = {0, 1, 1, 0, 1, 0};
    std::vector<double> cw = {0.4, 1.6};
    std::vector<Tensor> params = {w, b};
    auto f = [&](Tape* t) {
        return cross_entropy_with_logits(t, affine(t, input, w, b), labels, cw);
    };
    CHECK(grad_check(f, params, 1e-5, 200, 2) < 1e-6);
}

TEST_CASE("grad_check rejects bad eps") {
    Tensor x = Tensor::scalar(1.0);
    x.set_requires_grad(true);
    std::vector<Tensor> p = {x};
    auto f = [&](Tape* t) { return mul(t, x, x); };
    CHECK_THROWS_AS(grad_check(f, p, 1e-2, 5, 0), NumericError);
}

TEST_CASE("cross-entropy analytic values") {
    // uniform logits over 2 classes -> ln 2
    Tensor z = Tensor::from({1, 2}, {0.0, 0.0});
    std::vector<int> y = {1};
    CHECK(cross_entropy_with_logits(nullptr, z, y).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-15));
    // one-hot +-20 logits: loss ~ log(1+exp(-40)) <= 1e-8
    Tensor sharp = Tensor::from({2, 2}, {20.0, -20.0, -20.0, 20.0});
    std::vector<int> y2 = {0, 1};
    CHECK(cross_entropy_with_logits(nullptr, sharp, y2).item() <= 1e-8);
    // out-of-range label
    std::vector<int> bad = {2};
    CHECK_THROWS_AS(cross_entropy_with_logits(nullptr, z, bad), NumericError);
}

TEST_CASE("concat/slice round trip is an exact scatter-gather") {
    Rng rng(9);
    Tensor a = Tensor::uniform({6, 3}, rng, -1, 1);
    a.set_requires_grad(true);
    std::vector<Tensor> pa = {a};
    auto f = [&](Tape* t) {
        Tensor s1 = slice_rows(t, a, 0, 2);
        Tensor s2 = slice_rows(t, a, 2, 4);
        std::vector<Tensor> parts = {s1, s2};
        Tensor back = concat_rows(t, parts);
        return sum_all(t, mul(t, back, back));
    };
    Tape tape;
    Tensor loss = f(&tape);
    tape.backward(loss);
    // d/da sum(a^2) = 2a exactly; the round trip must not perturb it
    for (Eigen::Index i = 0; i < a.size(); ++i) CHECK(a.grad()[i] == 2.0 * a[i]);
}

TEST_CASE("no NaN/Inf after public ops on extreme finite inputs") {
    Rng rng(13);
    Tensor x = Tensor::uniform({3, 4}, rng, -700, 700);
    for (const Tensor& t : {softmax(nullptr, x), gelu(nullptr, x),
                            layer_norm(nullptr, x, Tensor::full({4}, 1.0), Tensor::full({4}, 0.0))}) {
        for (Eigen::Index i = 0; i < t.size(); ++i) CHECK(std::isfinite(t[i]));
    }
}
