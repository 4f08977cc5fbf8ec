#ifndef MSHIFT_AUTODIFF_HPP
#define MSHIFT_AUTODIFF_HPP

#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "mshift/tensor.hpp"

namespace mshift::diff {

/// Per-node gradient accumulators, allocated lazily during backward().
class GradStore {
public:
    explicit GradStore(std::size_t n) : slots_(n) {}
    Eigen::ArrayXd& accum(int node, Eigen::Index size);
    const Eigen::ArrayXd* get(int node) const;

private:
    std::vector<std::optional<Eigen::ArrayXd>> slots_;
};

using BackwardFn = std::function<void(const Eigen::ArrayXd& gout, GradStore& grads)>;

/// Define-by-run recording of one forward pass. Rebuilt per pass; nodes are
/// appended in execution order, so reverse iteration is a valid topological
/// backward order and visits each node exactly once.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool tracked(const Tensor& t) const;
    /// Node id for t, creating a leaf node on first sight.
    int node_for(const Tensor& t);
    int record(std::vector<int> inputs, const Tensor& output, BackwardFn fn);

    /// Populates .grad on every requires_grad leaf reachable from loss.
    /// Leaves that do not participate are left untouched.
    void backward(const Tensor& loss);

    std::size_t num_nodes() const { return nodes_.size(); }
    std::size_t backward_visits() const { return backward_visits_; }

private:
    struct Node {
        std::vector<int> inputs;
        BackwardFn fn;  // empty for leaves
        Eigen::Index size = 0;
    };
    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> by_storage_;
    std::vector<std::pair<int, Tensor>> leaves_;
    std::size_t backward_visits_ = 0;
};

// ---- primitive suite ------------------------------------------------------
// Every op allocates fresh output storage and registers a backward rule when
// tape != nullptr and any input is tracked. Forward values are plain double
// arithmetic; no op introduces NaN/Inf on finite inputs.

Tensor add(Tape* tape, const Tensor& a, const Tensor& b);  // same shape, or b broadcast over rows
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(Tape* tape, const Tensor& a, double c);
Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape* tape, const Tensor& a);
Tensor reshape(Tape* tape, const Tensor& a, Shape shape);
Tensor softmax(Tape* tape, const Tensor& a);     // over the last axis
Tensor gelu(Tape* tape, const Tensor& a);        // tanh form, see implementation
Tensor layer_norm(Tape* tape, const Tensor& a, const Tensor& gamma, const Tensor& beta);
Tensor concat_rows(Tape* tape, std::span<const Tensor> parts);
Tensor slice_rows(Tape* tape, const Tensor& a, Eigen::Index begin, Eigen::Index count);
Tensor concat_cols(Tape* tape, std::span<const Tensor> parts);
Tensor slice_cols(Tape* tape, const Tensor& a, Eigen::Index begin, Eigen::Index count);
Tensor sum_all(Tape* tape, const Tensor& a);
Tensor mean_all(Tape* tape, const Tensor& a);
Tensor cross_entropy_with_logits(Tape* tape, const Tensor& logits, std::span<const int> labels,
                                 std::span<const double> class_weights = {});

inline Tensor affine(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(tape, matmul(tape, x, w), b);
}

constexpr double kLayerNormEps = 1e-5;  // inside the variance square root

// ---- finite-difference oracle ---------------------------------------------

/// Max over sampled coordinates of |analytic - central difference| scaled by
/// max(1, |analytic|, |numeric|). f(tape) must be deterministic and must
/// rebuild the forward pass on every call; params are perturbed in place.
double grad_check(const std::function<Tensor(Tape*)>& f, std::span<Tensor> params, double eps,
                  int n_coords, std::uint64_t seed);

}  // namespace mshift::diff

#endif
