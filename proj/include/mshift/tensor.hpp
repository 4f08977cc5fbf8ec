#ifndef MSHIFT_TENSOR_HPP
#define MSHIFT_TENSOR_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mshift/rng.hpp"

namespace mshift::diff {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

/// Dense N-d array of doubles, row-major, with an optional gradient buffer.
/// Copies share storage; parameters rely on this so that gradients written
/// by the tape are visible through every handle. Values are never mutated
/// by the ops layer; only the optimizer writes through value_mut().
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);  // zero-filled

    static Tensor scalar(double v);
    static Tensor full(Shape shape, double v);
    static Tensor from(Shape shape, std::initializer_list<double> vals);
    static Tensor from(Shape shape, const std::vector<double>& vals);
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);
    static Tensor normal(Shape shape, Rng& rng, double mean, double stddev);

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    int ndim() const { return static_cast<int>(s_->shape.size()); }
    Eigen::Index size() const { return s_ ? s_->value.size() : 0; }
    std::string shape_string() const { return shape_str(s_->shape); }

    // 2-d accessors; a 1-d tensor is viewed as a single row.
    Eigen::Index rows() const;
    Eigen::Index cols() const;
    ConstMatMap mat() const { return ConstMatMap(s_->value.data(), rows(), cols()); }
    MatMap mat_mut() { return MatMap(s_->value.data(), rows(), cols()); }

    const Eigen::ArrayXd& array() const { return s_->value; }
    Eigen::ArrayXd& value_mut() { return s_->value; }
    double operator[](Eigen::Index i) const { return s_->value[i]; }
    double& operator[](Eigen::Index i) { return s_->value[i]; }
    double item() const;  // requires size() == 1

    bool requires_grad() const { return s_ && s_->requires_grad; }
    void set_requires_grad(bool b) { s_->requires_grad = b; }

    bool has_grad() const { return s_ && s_->grad.has_value(); }
    const Eigen::ArrayXd& grad() const;
    Eigen::ArrayXd& grad_mut();  // allocates zeros on first use
    void zero_grad();
    void clear_grad() { s_->grad.reset(); }

    // Storage identity; the tape uses this to dedupe tensors reused in a
    // forward pass.
    const void* id() const { return s_.get(); }

private:
    struct Storage {
        Shape shape;
        Eigen::ArrayXd value;
        bool requires_grad = false;
        std::optional<Eigen::ArrayXd> grad;
    };
    std::shared_ptr<Storage> s_;
};

Eigen::Index shape_size(const Shape& s);

}  // namespace mshift::diff

#endif
