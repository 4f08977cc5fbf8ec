#include "mshift/tensor.hpp"

#include <sstream>

#include "mshift/errors.hpp"

namespace mshift::diff {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

Eigen::Index shape_size(const Shape& s) {
    Eigen::Index n = 1;
    for (int d : s) {
        if (d < 0) throw ShapeError("tensor: negative extent in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

Tensor::Tensor(Shape shape) {
    const Eigen::Index n = shape_size(shape);
    s_ = std::make_shared<Storage>();
    s_->shape = std::move(shape);
    s_->value = Eigen::ArrayXd::Zero(n);
}

Tensor Tensor::scalar(double v) {
    Tensor t(Shape{});
    t.s_->value[0] = v;
    return t;
}

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    t.s_->value.setConstant(v);
    return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> vals) {
    return from(std::move(shape), std::vector<double>(vals));
}

Tensor Tensor::from(Shape shape, const std::vector<double>& vals) {
    Tensor t(std::move(shape));
    if (static_cast<Eigen::Index>(vals.size()) != t.size())
        throw ShapeError("tensor: " + std::to_string(vals.size()) + " values for shape " +
                         t.shape_string());
    for (Eigen::Index i = 0; i < t.size(); ++i) t.s_->value[i] = vals[static_cast<std::size_t>(i)];
    return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (Eigen::Index i = 0; i < t.size(); ++i) t.s_->value[i] = rng.uniform(lo, hi);
    return t;
}

Tensor Tensor::normal(Shape shape, Rng& rng, double mean, double stddev) {
    Tensor t(std::move(shape));
    for (Eigen::Index i = 0; i < t.size(); ++i) t.s_->value[i] = mean + stddev * rng.normal();
    return t;
}

Eigen::Index Tensor::rows() const {
    if (ndim() == 2) return s_->shape[0];
    if (ndim() == 1) return 1;
    throw ShapeError("tensor: 2-d view of shape " + shape_string());
}

Eigen::Index Tensor::cols() const {
    if (ndim() == 2) return s_->shape[1];
    if (ndim() == 1) return s_->shape[0];
    throw ShapeError("tensor: 2-d view of shape " + shape_string());
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("tensor: item() on shape " + shape_string());
    return s_->value[0];
}

const Eigen::ArrayXd& Tensor::grad() const {
    if (!has_grad()) throw NumericError("tensor: gradient not populated");
    return *s_->grad;
}

Eigen::ArrayXd& Tensor::grad_mut() {
    if (!s_->grad) s_->grad = Eigen::ArrayXd::Zero(s_->value.size());
    return *s_->grad;
}

void Tensor::zero_grad() {
    grad_mut().setZero();
}

}  // namespace mshift::diff
