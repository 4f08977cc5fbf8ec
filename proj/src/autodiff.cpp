#include "mshift/autodiff.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>

#include "mshift/errors.hpp"

namespace mshift::diff {

namespace {

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
    throw ShapeError(std::string(op) + ": lhs " + a.shape_string() + " rhs " + b.shape_string());
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const std::string& detail) {
    throw ShapeError(std::string(op) + ": " + detail + ", got " + a.shape_string());
}

// Rows x cols view of the last axis, for reductions over it.
std::pair<Eigen::Index, Eigen::Index> lastdim_view(const Tensor& a) {
    if (a.ndim() < 1) throw ShapeError("lastdim: scalar input");
    const Eigen::Index c = a.shape().back();
    if (c == 0) throw ShapeError("lastdim: empty last axis");
    return {a.size() / c, c};
}

}  // namespace

// ---- GradStore / Tape ------------------------------------------------------

Eigen::ArrayXd& GradStore::accum(int node, Eigen::Index size) {
    auto& slot = slots_[static_cast<std::size_t>(node)];
    if (!slot) slot = Eigen::ArrayXd::Zero(size);
    return *slot;
}

const Eigen::ArrayXd* GradStore::get(int node) const {
    const auto& slot = slots_[static_cast<std::size_t>(node)];
    return slot ? &*slot : nullptr;
}

bool Tape::tracked(const Tensor& t) const {
    return t.requires_grad() || by_storage_.count(t.id()) != 0;
}

int Tape::node_for(const Tensor& t) {
    auto it = by_storage_.find(t.id());
    if (it != by_storage_.end()) return it->second;
    assert(t.requires_grad());
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{{}, BackwardFn{}, t.size()});
    by_storage_[t.id()] = id;
    leaves_.emplace_back(id, t);
    return id;
}

int Tape::record(std::vector<int> inputs, const Tensor& output, BackwardFn fn) {
    const int id = static_cast<int>(nodes_.size());
    for ([[maybe_unused]] int in : inputs) assert(in < id);
    nodes_.push_back(Node{std::move(inputs), std::move(fn), output.size()});
    by_storage_[output.id()] = id;
    // Keep the output storage alive so node ids cannot alias recycled
    // addresses.
    leaves_.emplace_back(-1, output);
    return id;
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw NumericError("backward: loss must be a scalar, got " +
                           (loss.defined() ? loss.shape_string() : std::string("<empty>")));
    if (nodes_.empty()) throw NumericError("backward: empty tape");
    auto it = by_storage_.find(loss.id());
    if (it == by_storage_.end())
        throw NumericError("backward: loss is not connected to this tape");

    GradStore grads(nodes_.size());
    grads.accum(it->second, 1)[0] = 1.0;
    backward_visits_ = 0;
    for (int i = it->second; i >= 0; --i) {
        const Node& node = nodes_[static_cast<std::size_t>(i)];
        if (!node.fn) continue;
        const Eigen::ArrayXd* g = grads.get(i);
        if (!g) continue;
        node.fn(*g, grads);
        ++backward_visits_;
    }
    for (auto& [node, tensor] : leaves_) {
        if (node < 0 || !tensor.requires_grad()) continue;
        if (const Eigen::ArrayXd* g = grads.get(node)) tensor.grad_mut() += *g;
    }
}

// ---- helpers for op recording ----------------------------------------------

namespace {

struct InputRef {
    int node = -1;
    Eigen::Index size = 0;
};

InputRef ref_of(Tape* tape, const Tensor& t) {
    if (tape && tape->tracked(t)) return {tape->node_for(t), t.size()};
    return {};
}

bool any_tracked(Tape* tape, std::initializer_list<const Tensor*> ts) {
    if (!tape) return false;
    for (const Tensor* t : ts)
        if (tape->tracked(*t)) return true;
    return false;
}

}  // namespace

// ---- ops --------------------------------------------------------------------

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    const bool bcast = !same && a.ndim() == 2 && b.size() == a.cols() && b.ndim() <= 2 &&
                       (b.ndim() == 1 || b.shape()[0] == 1);
    if (!same && !bcast) shape_fail("add", a, b);

    Tensor out(a.shape());
    if (same) {
        out.value_mut() = a.array() + b.array();
    } else {
        out.mat_mut() = a.mat();
        out.mat_mut().rowwise() += b.mat().row(0);
    }
    if (any_tracked(tape, {&a, &b})) {
        const InputRef ia = ref_of(tape, a), ib = ref_of(tape, b);
        const Eigen::Index r = same ? 0 : a.rows(), c = same ? 0 : a.cols();
        tape->record({ia.node, ib.node}, out,
                     [ia, ib, same, r, c](const Eigen::ArrayXd& g, GradStore& gs) {
                         if (ia.node >= 0) gs.accum(ia.node, ia.size) += g;
                         if (ib.node >= 0) {
                             if (same) {
                                 gs.accum(ib.node, ib.size) += g;
                             } else {
                                 ConstMatMap gm(g.data(), r, c);
                                 Eigen::ArrayXd& gb = gs.accum(ib.node, ib.size);
                                 MatMap(gb.data(), 1, c) += gm.colwise().sum();
                             }
                         }
                     });
    }
    return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_fail("mul", a, b);
    Tensor out(a.shape());
    out.value_mut() = a.array() * b.array();
    if (any_tracked(tape, {&a, &b})) {
        const InputRef ia = ref_of(tape, a), ib = ref_of(tape, b);
        tape->record({ia.node, ib.node}, out, [ia, ib, a, b](const Eigen::ArrayXd& g, GradStore& gs) {
            if (ia.node >= 0) gs.accum(ia.node, ia.size) += g * b.array();
            if (ib.node >= 0) gs.accum(ib.node, ib.size) += g * a.array();
        });
    }
    return out;
}

Tensor scale(Tape* tape, const Tensor& a, double c) {
    Tensor out(a.shape());
    out.value_mut() = a.array() * c;
    if (any_tracked(tape, {&a})) {
        const InputRef ia = ref_of(tape, a);
        tape->record({ia.node}, out, [ia, c](const Eigen::ArrayXd& g, GradStore& gs) {
            gs.accum(ia.node, ia.size) += g * c;
        });
    }
    return out;
}

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.ndim() > 2 || b.ndim() > 2 || a.ndim() < 1 || b.ndim() < 1) shape_fail("matmul", a, b);
    if (a.cols() != b.rows()) shape_fail("matmul", a, b);
    const Eigen::Index m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out(Shape{static_cast<int>(m), static_cast<int>(n)});
    out.mat_mut().noalias() = a.mat() * b.mat();
    if (any_tracked(tape, {&a, &b})) {
        const InputRef ia = ref_of(tape, a), ib = ref_of(tape, b);
        tape->record({ia.node, ib.node}, out,
                     [ia, ib, a, b, m, k, n](const Eigen::ArrayXd& g, GradStore& gs) {
                         ConstMatMap gm(g.data(), m, n);
                         if (ia.node >= 0) {
                             Eigen::ArrayXd& ga = gs.accum(ia.node, ia.size);
                             MatMap(ga.data(), m, k).noalias() += gm * b.mat().transpose();
                         }
                         if (ib.node >= 0) {
                             Eigen::ArrayXd& gb = gs.accum(ib.node, ib.size);
                             MatMap(gb.data(), k, n).noalias() += a.mat().transpose() * gm;
                         }
                     });
    }
    return out;
}

Tensor transpose(Tape* tape, const Tensor& a) {
    if (a.ndim() > 2) shape_fail("transpose", a, "1-d or 2-d input");
    const Eigen::Index r = a.rows(), c = a.cols();
    Tensor out(Shape{static_cast<int>(c), static_cast<int>(r)});
    out.mat_mut() = a.mat().transpose();
    if (any_tracked(tape, {&a})) {
        const InputRef ia = ref_of(tape, a);
        tape->record({ia.node}, out, [ia, r, c](const Eigen::ArrayXd& g, GradStore& gs) {
            ConstMatMap gm(g.data(), c, r);
            Eigen::ArrayXd& ga = gs.accum(ia.node, ia.size);
            MatMap(ga.data(), r, c) += gm.transpose();
        });
    }
    return out;
}

Tensor reshape(Tape* tape, const Tensor& a, Shape shape) {
    if (shape_size(shape) != a.size())
        throw ShapeError("reshape: " + a.shape_string() + " to " + shape_str(shape));
    Tensor out(std::move(shape));
    out.value_mut() = a.array();
    if (any_tracked(tape, {&a})) {
        const InputRef ia = ref_of(tape, a);
        tape->record({ia.node}, out, [ia](const Eigen::ArrayXd& g, GradStore& gs) {
            gs.accum(ia.node, ia.size) += g;
        });
    }
    return out;
}

Tensor softmax(Tape* tape, const Tensor& a) {
    const auto rc = lastdim_view(a);
    const Eigen::Index r = rc.first, c = rc.second;
    Tensor out(a.shape());
    ConstMatMap x(a.array().data(), r, c);
    MatMap y(out.value_mut().data(), r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
        const double m = x.row(i).maxCoeff();
        y.row(i) = (x.row(i).array() - m).exp();
        y.row(i) /= y.row(i).sum();
    }
    if (any_tracked(tape, {&a})) {
        const InputRef ia = ref_of(tape, a);
        tape->record({ia.node}, out, [ia, out, r, c](const Eigen::ArrayXd& g, GradStore& gs) {
            ConstMatMap gm(g.data(), r, c);
            ConstMatMap s(out.array().data(), r, c);
            Eigen::ArrayXd& ga = gs.accum(ia.node, ia.size);
            MatMap gam(ga.data(), r, c);
            for (Eigen::Index i = 0; i < r; ++i) {
                const double dot = gm.row(i).cwiseProduct(s.row(i)).sum();
                gam.row(i) += s.row(i).cwiseProduct((gm.row(i).array() - dot).matrix());
            }
        });
    }
    return out;
}

namespace {
constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;
}  // namespace

// GELU, tanh form:
//   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
// The derivative below matches this expression exactly so that central
// differences agree with the analytic gradient.
Tensor gelu(Tape* tape, const Tensor& a) {
    constexpr double c0 = kGeluC0;
    constexpr double c1 = kGeluC1;
    Tensor out(a.shape());
    const Eigen::ArrayXd& x = a.array();
    const Eigen::ArrayXd t = (c0 * (x + c1 * x.cube())).tanh();
    out.value_mut() = 0.5 * x * (1.0 + t);
    if (any_tracked(tape, {&a})) {
        const InputRef ia = ref_of(tape, a);
        tape->record({ia.node}, out, [ia, a, t](const Eigen::ArrayXd& g, GradStore& gs) {
            const Eigen::ArrayXd& x = a.array();
            const Eigen::ArrayXd du = kGeluC0 * (1.0 + 3.0 * kGeluC1 * x.square());
            const Eigen::ArrayXd dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t.square()) * du;
            gs.accum(ia.node, ia.size) += g * dy;
        });
    }
    return out;
}

// Normalizes over the last axis with biased variance and eps inside the
// square root. A zero-variance row maps to zeros before gamma/beta.
Tensor layer_norm(Tape* tape, const Tensor& a, const Tensor& gamma, const Tensor& beta) {
    const auto rc = lastdim_view(a);
    const Eigen::Index r = rc.first, c = rc.second;
    if (gamma.size() != c || beta.size() != c)
        throw ShapeError("layer_norm: params " + gamma.shape_string() + "/" + beta.shape_string() +
                         " for input " + a.shape_string());
    Tensor out(a.shape());
    Tensor xhat(a.shape());       // cached for backward
    Eigen::ArrayXd inv_sd(r);
    {
        ConstMatMap x(a.array().data(), r, c);
        MatMap xh(xhat.value_mut().data(), r, c);
        MatMap y(out.value_mut().data(), r, c);
        for (Eigen::Index i = 0; i < r; ++i) {
            const double mu = x.row(i).mean();
            const Eigen::ArrayXd d = x.row(i).array() - mu;
            const double var = d.square().mean();
            inv_sd[i] = 1.0 / std::sqrt(var + kLayerNormEps);
            xh.row(i) = (d * inv_sd[i]).matrix();
            y.row(i) = (xh.row(i).array() * gamma.array().transpose() + beta.array().transpose())
                           .matrix();
        }
    }
    if (any_tracked(tape, {&a, &gamma, &beta})) {
        const InputRef ia = ref_of(tape, a), ig = ref_of(tape, gamma), ib = ref_of(tape, beta);
        tape->record(
            {ia.node, ig.node, ib.node}, out,
            [ia, ig, ib, gamma, xhat, inv_sd, r, c](const Eigen::ArrayXd& g, GradStore& gs) {
                ConstMatMap gm(g.data(), r, c);
                ConstMatMap xh(xhat.array().data(), r, c);
                if (ig.node >= 0) {
                    Eigen::ArrayXd& gg = gs.accum(ig.node, ig.size);
                    MatMap(gg.data(), 1, c) += gm.cwiseProduct(xh).colwise().sum();
                }
                if (ib.node >= 0) {
                    Eigen::ArrayXd& gb = gs.accum(ib.node, ib.size);
                    MatMap(gb.data(), 1, c) += gm.colwise().sum();
                }
                if (ia.node >= 0) {
                    Eigen::ArrayXd& ga = gs.accum(ia.node, ia.size);
                    MatMap gam(ga.data(), r, c);
                    for (Eigen::Index i = 0; i < r; ++i) {
                        const Eigen::ArrayXd gh =
                            gm.row(i).array().transpose() * gamma.array();
                        const Eigen::ArrayXd xr = xh.row(i).array().transpose();
                        const double m1 = gh.mean();
                        const double m2 = (gh * xr).mean();
                        gam.row(i) += ((gh - m1 - xr * m2) * inv_sd[i]).matrix().transpose();
                    }
                }
            });
    }
    return out;
}

namespace {

Tensor concat_axis(Tape* tape, std::span<const Tensor> parts, bool rows) {
    const char* op = rows ? "concat_rows" : "concat_cols";
    if (parts.empty()) throw ShapeError(std::string(op) + ": no parts");
    Eigen::Index fixed = rows ? parts[0].cols() : parts[0].rows();
    Eigen::Index total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != 2) shape_fail(op, p, "2-d parts");
        if ((rows ? p.cols() : p.rows()) != fixed) shape_fail(op, parts[0], p);
        total += rows ? p.rows() : p.cols();
    }
    Tensor out(rows ? Shape{static_cast<int>(total), static_cast<int>(fixed)}
                    : Shape{static_cast<int>(fixed), static_cast<int>(total)});
    Eigen::Index at = 0;
    for (const Tensor& p : parts) {
        if (rows) {
            out.mat_mut().middleRows(at, p.rows()) = p.mat();
            at += p.rows();
        } else {
            out.mat_mut().middleCols(at, p.cols()) = p.mat();
            at += p.cols();
        }
    }
    bool track = false;
    if (tape)
        for (const Tensor& p : parts) track = track || tape->tracked(p);
    if (track) {
        struct Piece {
            InputRef ref;
            Eigen::Index at, extent, r, c;
        };
        std::vector<Piece> pieces;
        std::vector<int> in_nodes;
        Eigen::Index pos = 0;
        for (const Tensor& p : parts) {
            const Eigen::Index extent = rows ? p.rows() : p.cols();
            pieces.push_back({ref_of(tape, p), pos, extent, p.rows(), p.cols()});
            in_nodes.push_back(pieces.back().ref.node);
            pos += extent;
        }
        const Eigen::Index or_ = out.rows(), oc = out.cols();
        tape->record(std::move(in_nodes), out,
                     [pieces, rows, or_, oc](const Eigen::ArrayXd& g, GradStore& gs) {
                         ConstMatMap gm(g.data(), or_, oc);
                         for (const Piece& p : pieces) {
                             if (p.ref.node < 0) continue;
                             Eigen::ArrayXd& gp = gs.accum(p.ref.node, p.ref.size);
                             MatMap gpm(gp.data(), p.r, p.c);
                             if (rows)
                                 gpm += gm.middleRows(p.at, p.extent);
                             else
                                 gpm += gm.middleCols(p.at, p.extent);
                         }
                     });
    }
    return out;
}

Tensor slice_axis(Tape* tape, const Tensor& a, Eigen::Index begin, Eigen::Index count, bool rows) {
    const char* op = rows ? "slice_rows" : "slice_cols";
    if (a.ndim() != 2) shape_fail(op, a, "2-d input");
    const Eigen::Index extent = rows ? a.rows() : a.cols();
    if (begin < 0 || count < 0 || begin + count > extent)
        throw ShapeError(std::string(op) + ": range [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") of " + a.shape_string());
    Tensor out(rows ? Shape{static_cast<int>(count), static_cast<int>(a.cols())}
                    : Shape{static_cast<int>(a.rows()), static_cast<int>(count)});
    if (rows)
        out.mat_mut() = a.mat().middleRows(begin, count);
    else
        out.mat_mut() = a.mat().middleCols(begin, count);
    if (any_tracked(tape, {&a})) {
        const InputRef ia = ref_of(tape, a);
        const Eigen::Index ar = a.rows(), ac = a.cols();
        tape->record({ia.node}, out,
                     [ia, begin, count, rows, ar, ac](const Eigen::ArrayXd& g, GradStore& gs) {
                         Eigen::ArrayXd& ga = gs.accum(ia.node, ia.size);
                         MatMap gam(ga.data(), ar, ac);
                         if (rows) {
                             ConstMatMap gm(g.data(), count, ac);
                             gam.middleRows(begin, count) += gm;
                         } else {
                             ConstMatMap gm(g.data(), ar, count);
                             gam.middleCols(begin, count) += gm;
                         }
                     });
    }
    return out;
}

}  // namespace

Tensor concat_rows(Tape* tape, std::span<const Tensor> parts) { return concat_axis(tape, parts, true); }
Tensor slice_rows(Tape* tape, const Tensor& a, Eigen::Index begin, Eigen::Index count) {
    return slice_axis(tape, a, begin, count, true);
}
Tensor concat_cols(Tape* tape, std::span<const Tensor> parts) { return concat_axis(tape, parts, false); }
Tensor slice_cols(Tape* tape, const Tensor& a, Eigen::Index begin, Eigen::Index count) {
    return slice_axis(tape, a, begin, count, false);
}

Tensor sum_all(Tape* tape, const Tensor& a) {
    Tensor out = Tensor::scalar(a.array().sum());
    if (any_tracked(tape, {&a})) {
        const InputRef ia = ref_of(tape, a);
        tape->record({ia.node}, out, [ia](const Eigen::ArrayXd& g, GradStore& gs) {
            gs.accum(ia.node, ia.size) += g[0];
        });
    }
    return out;
}

Tensor mean_all(Tape* tape, const Tensor& a) {
    if (a.size() == 0) throw ShapeError("mean_all: empty input");
    return scale(tape, sum_all(tape, a), 1.0 / static_cast<double>(a.size()));
}

Tensor cross_entropy_with_logits(Tape* tape, const Tensor& logits, std::span<const int> labels,
                                 std::span<const double> class_weights) {
    if (logits.ndim() != 2) shape_fail("cross_entropy", logits, "2-d logits");
    const Eigen::Index b = logits.rows(), c = logits.cols();
    if (static_cast<Eigen::Index>(labels.size()) != b)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         logits.shape_string());
    if (!class_weights.empty() && static_cast<Eigen::Index>(class_weights.size()) != c)
        throw ShapeError("cross_entropy: " + std::to_string(class_weights.size()) +
                         " class weights for logits " + logits.shape_string());
    for (int y : labels)
        if (y < 0 || y >= c)
            throw NumericError("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                               std::to_string(c) + ")");

    // Stabilized log-sum-exp; the softmax rows are cached for backward.
    Eigen::ArrayXXd probs(b, c);
    Eigen::ArrayXd wvec(b);
    double total = 0.0, wsum = 0.0;
    ConstMatMap z(logits.array().data(), b, c);
    for (Eigen::Index i = 0; i < b; ++i) {
        const double m = z.row(i).maxCoeff();
        const Eigen::ArrayXd e = (z.row(i).array() - m).exp().transpose();
        const double s = e.sum();
        probs.row(i) = (e / s).transpose();
        const double lse = m + std::log(s);
        const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(labels[i])];
        wvec[i] = w;
        total += w * (lse - z(i, labels[static_cast<std::size_t>(i)]));
        wsum += w;
    }
    if (wsum <= 0.0) throw NumericError("cross_entropy: nonpositive weight total");
    Tensor out = Tensor::scalar(total / wsum);
    if (any_tracked(tape, {&logits})) {
        const InputRef il = ref_of(tape, logits);
        std::vector<int> ylab(labels.begin(), labels.end());
        tape->record({il.node}, out,
                     [il, probs, wvec, wsum, ylab, b, c](const Eigen::ArrayXd& g, GradStore& gs) {
                         Eigen::ArrayXd& gl = gs.accum(il.node, il.size);
                         MatMap glm(gl.data(), b, c);
                         for (Eigen::Index i = 0; i < b; ++i) {
                             const double s = g[0] * wvec[i] / wsum;
                             glm.row(i) += (probs.row(i) * s).matrix();
                             glm(i, ylab[static_cast<std::size_t>(i)]) -= s;
                         }
                     });
    }
    return out;
}

// ---- finite differences ------------------------------------------------------

double grad_check(const std::function<Tensor(Tape*)>& f, std::span<Tensor> params, double eps,
                  int n_coords, std::uint64_t seed) {
    if (!(eps >= 1e-7 && eps <= 1e-3)) throw NumericError("grad_check: eps outside [1e-7,1e-3]");
    for (Tensor& p : params) p.zero_grad();
    Tape tape;
    Tensor loss = f(&tape);
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
    tape.backward(loss);

    Eigen::Index total = 0;
    for (const Tensor& p : params) total += p.size();
    std::vector<Eigen::Index> coords(static_cast<std::size_t>(total));
    std::iota(coords.begin(), coords.end(), Eigen::Index{0});
    Rng rng(seed);
    if (total > n_coords) {
        rng.shuffle(coords.begin(), coords.end());
        coords.resize(static_cast<std::size_t>(n_coords));
    }

    double max_rel = 0.0;
    for (Eigen::Index flat : coords) {
        Eigen::Index off = flat;
        std::size_t pi = 0;
        while (off >= params[pi].size()) {
            off -= params[pi].size();
            ++pi;
        }
        Tensor& p = params[pi];
        const double old = p[off];
        p[off] = old + eps;
        const double lp = f(nullptr).item();
        p[off] = old - eps;
        const double lm = f(nullptr).item();
        p[off] = old;
        if (!std::isfinite(lp) || !std::isfinite(lm))
            throw NumericError("grad_check: non-finite loss under perturbation");
        const double numeric = (lp - lm) / (2.0 * eps);
        const double analytic = p.grad()[off];
        const double rel =
            std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace mshift::diff
