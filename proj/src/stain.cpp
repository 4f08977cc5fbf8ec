#include "mshift/stain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mshift/errors.hpp"

namespace mshift::stain {

namespace {

constexpr double kLog10 = 2.302585092994045684;  // ln(10)

double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = (q / 100.0) * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= v.size()) return v.back();
    const double frac = pos - static_cast<double>(lo);
    return v[lo] + frac * (v[lo + 1] - v[lo]);
}

// Tissue pixels (all OD components > beta), sorted lexicographically so
// every downstream statistic is invariant to pixel order.
Eigen::Matrix3Xd tissue_pixels(const OdImage& img, double beta) {
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < img.od.cols(); ++i) {
        if (img.od(0, i) > beta && img.od(1, i) > beta && img.od(2, i) > beta)
            keep.push_back(i);
    }
    std::sort(keep.begin(), keep.end(), [&](Eigen::Index a, Eigen::Index b) {
        for (int ch = 0; ch < 3; ++ch) {
            if (img.od(ch, a) != img.od(ch, b)) return img.od(ch, a) < img.od(ch, b);
        }
        return false;
    });
    Eigen::Matrix3Xd out(3, static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = img.od.col(keep[k]);
    return out;
}

void require_tissue(const Eigen::Matrix3Xd& tissue) {
    if (tissue.cols() < kMinTissuePixels)
        throw NumericError("insufficient tissue: " + std::to_string(tissue.cols()) +
                           " pixels above the OD threshold, need " +
                           std::to_string(kMinTissuePixels));
}

// Eigen-decomposition of the tissue scatter; throws on a rank-deficient
// (single stain) point cloud. Returns eigenvectors of the two largest
// eigenvalues as columns.
Eigen::Matrix<double, 3, 2> scatter_plane(const Eigen::Matrix3Xd& tissue) {
    const Eigen::Vector3d mean = tissue.rowwise().mean();
    const Eigen::Matrix3Xd centered = tissue.colwise() - mean;
    const Eigen::Matrix3d cov =
        centered * centered.transpose() / static_cast<double>(tissue.cols() - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
    const Eigen::Vector3d evals = es.eigenvalues();  // ascending
    if (evals[1] <= std::max(1e-6 * evals[2], 1e-12))
        throw NumericError("degenerate stain plane: tissue OD scatter is rank deficient");
    Eigen::Matrix<double, 3, 2> basis;
    basis.col(0) = es.eigenvectors().col(2);
    basis.col(1) = es.eigenvectors().col(1);
    return basis;
}

// Flip toward the nonnegative octant, clamp stray negative components,
// renormalize to unit length.
Eigen::Vector3d to_stain_direction(Eigen::Vector3d v) {
    if (v.sum() < 0) v = -v;
    v = v.cwiseMax(0.0);
    const double n = v.norm();
    if (n < 1e-6) throw NumericError("degenerate stain plane: extreme direction collapsed");
    return v / n;
}

// Hematoxylin first: the column with the larger red-channel OD component.
Eigen::Matrix<double, 3, 2> order_columns(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
    Eigen::Matrix<double, 3, 2> s;
    if (a[0] >= b[0]) {
        s.col(0) = a;
        s.col(1) = b;
    } else {
        s.col(0) = b;
        s.col(1) = a;
    }
    return s;
}

Eigen::Vector2d conc_percentile(const Eigen::Matrix2Xd& conc, double q) {
    Eigen::Vector2d out;
    for (int r = 0; r < 2; ++r) {
        std::vector<double> row(conc.cols());
        for (Eigen::Index i = 0; i < conc.cols(); ++i) row[static_cast<std::size_t>(i)] = conc(r, i);
        out[r] = percentile(std::move(row), q);
    }
    return out;
}

// Unconstrained least-squares concentrations for a fixed 3x2 matrix.
Eigen::Matrix2Xd lsq_concentrations(const Eigen::Matrix3Xd& od, const Eigen::Matrix<double, 3, 2>& s) {
    const Eigen::Matrix2d gram = s.transpose() * s;
    return gram.ldlt().solve(s.transpose() * od);
}

// Exact nonnegative least squares for two columns: try the interior
// solution, fall back to the best feasible edge.
Eigen::Matrix2Xd nnls_concentrations(const Eigen::Matrix3Xd& od, const Eigen::Matrix<double, 3, 2>& s) {
    const Eigen::Matrix2d g = s.transpose() * s;
    const double det = g(0, 0) * g(1, 1) - g(0, 1) * g(1, 0);
    Eigen::Matrix2Xd out(2, od.cols());
    for (Eigen::Index i = 0; i < od.cols(); ++i) {
        const Eigen::Vector2d b = s.transpose() * od.col(i);
        if (det > 1e-12) {
            const double c0 = (g(1, 1) * b[0] - g(0, 1) * b[1]) / det;
            const double c1 = (g(0, 0) * b[1] - g(1, 0) * b[0]) / det;
            if (c0 >= 0 && c1 >= 0) {
                out(0, i) = c0;
                out(1, i) = c1;
                continue;
            }
        }
        const double e0 = g(0, 0) > 0 ? std::max(0.0, b[0] / g(0, 0)) : 0.0;
        const double e1 = g(1, 1) > 0 ? std::max(0.0, b[1] / g(1, 1)) : 0.0;
        // residual^2 = ||v||^2 - 2 b.c + c'Gc; ||v||^2 is common, compare the rest
        const double r0 = -2.0 * b[0] * e0 + g(0, 0) * e0 * e0;
        const double r1 = -2.0 * b[1] * e1 + g(1, 1) * e1 * e1;
        if (r0 <= r1) {
            out(0, i) = e0;
            out(1, i) = 0.0;
        } else {
            out(0, i) = 0.0;
            out(1, i) = e1;
        }
    }
    return out;
}

double nmf_objective(const Eigen::Matrix3Xd& v, const Eigen::Matrix<double, 3, 2>& w,
                     const Eigen::Matrix2Xd& h, double lambda) {
    return (v - w * h).squaredNorm() + lambda * h.sum();
}

}  // namespace

Eigen::Matrix<double, 3, 2> ruifrok_he() {
    Eigen::Matrix<double, 3, 2> s;
    s.col(0) = Eigen::Vector3d(0.65, 0.70, 0.29).normalized();  // hematoxylin
    s.col(1) = Eigen::Vector3d(0.07, 0.99, 0.11).normalized();  // eosin
    return s;
}

OdImage rgb_to_od(const RgbPatch& p) {
    OdImage out;
    out.width = p.width;
    out.height = p.height;
    out.od.resize(3, p.n_pixels());
    for (long i = 0; i < p.n_pixels(); ++i) {
        for (int ch = 0; ch < 3; ++ch) {
            const double inten = static_cast<double>(p.pixels[static_cast<std::size_t>(3 * i + ch)]);
            out.od(ch, i) = std::max(0.0, -std::log10((inten + 1.0) / 255.0));
        }
    }
    return out;
}

RgbPatch od_to_rgb(const OdImage& od) {
    RgbPatch out(od.width, od.height);
    for (Eigen::Index i = 0; i < od.od.cols(); ++i) {
        for (int ch = 0; ch < 3; ++ch) {
            const double inten = std::nearbyint(255.0 * std::pow(10.0, -od.od(ch, i)));
            out.pixels[static_cast<std::size_t>(3 * i + ch)] =
                static_cast<std::uint8_t>(std::clamp(inten, 0.0, 255.0));
        }
    }
    return out;
}

StainModel estimate_macenko(const OdImage& od, double beta, double alpha_pct) {
    const Eigen::Matrix3Xd tissue = tissue_pixels(od, beta);
    require_tissue(tissue);
    const Eigen::Matrix<double, 3, 2> basis = scatter_plane(tissue);

    Eigen::Vector3d e1 = basis.col(0), e2 = basis.col(1);
    // orient the leading axis toward the data so angles stay in (-pi/2, pi/2)
    if ((e1.transpose() * tissue).mean() < 0) e1 = -e1;

    std::vector<double> phi(static_cast<std::size_t>(tissue.cols()));
    for (Eigen::Index i = 0; i < tissue.cols(); ++i) {
        const double p1 = e1.dot(tissue.col(i));
        const double p2 = e2.dot(tissue.col(i));
        phi[static_cast<std::size_t>(i)] = std::atan2(p2, p1);
    }
    const double lo = percentile(phi, alpha_pct);
    const double hi = percentile(phi, 100.0 - alpha_pct);

    const Eigen::Vector3d d_lo = to_stain_direction(std::cos(lo) * e1 + std::sin(lo) * e2);
    const Eigen::Vector3d d_hi = to_stain_direction(std::cos(hi) * e1 + std::sin(hi) * e2);

    StainModel m;
    m.stain_matrix = order_columns(d_lo, d_hi);
    m.max_conc = conc_percentile(lsq_concentrations(tissue, m.stain_matrix), 99.0);
    return m;
}

StainModel estimate_vahadane(const OdImage& od, double lambda_sparse, int iters,
                             VahadaneTrace* trace) {
    const Eigen::Matrix3Xd v = tissue_pixels(od, kTissueBeta);
    require_tissue(v);
    scatter_plane(v);  // rank check; throws "degenerate stain plane"

    Eigen::Matrix<double, 3, 2> w;
    try {
        w = estimate_macenko(od).stain_matrix;
    } catch (const NumericError&) {
        w = ruifrok_he();
    }
    Eigen::Matrix2Xd h = nnls_concentrations(v, w);

    double obj = nmf_objective(v, w, h, lambda_sparse);
    if (trace) trace->objective.push_back(obj);

    for (int it = 0; it < iters; ++it) {
        // H-step: exact coordinate descent on the nonnegative lasso,
        // one pixel at a time.
        const Eigen::Matrix2d g = w.transpose() * w;
        const Eigen::Matrix2Xd b = w.transpose() * v;
        for (Eigen::Index px = 0; px < v.cols(); ++px) {
            double h0 = h(0, px), h1 = h(1, px);
            for (int inner = 0; inner < 20; ++inner) {
                h0 = g(0, 0) > 0
                         ? std::max(0.0, (b(0, px) - g(0, 1) * h1 - lambda_sparse / 2.0) / g(0, 0))
                         : 0.0;
                h1 = g(1, 1) > 0
                         ? std::max(0.0, (b(1, px) - g(1, 0) * h0 - lambda_sparse / 2.0) / g(1, 1))
                         : 0.0;
            }
            h(0, px) = h0;
            h(1, px) = h1;
        }

        // W-step: projected gradient on {W >= 0, ||w_k||_2 <= 1} with the
        // Lipschitz step 1/L, L = 2 * lmax(H H'). Each accepted step cannot
        // increase the objective; step halving guards rounding.
        const Eigen::Matrix2d hht = h * h.transpose();
        const double tr = hht(0, 0) + hht(1, 1);
        const double disc = std::sqrt(std::max(0.0, 0.25 * (hht(0, 0) - hht(1, 1)) * (hht(0, 0) - hht(1, 1)) +
                                               hht(0, 1) * hht(1, 0)));
        const double lmax = 0.5 * tr + disc;
        if (lmax > 0) {
            double step = 1.0 / (2.0 * lmax);
            for (int pg = 0; pg < 5; ++pg) {
                const Eigen::Matrix<double, 3, 2> grad = -2.0 * (v - w * h) * h.transpose();
                Eigen::Matrix<double, 3, 2> cand = (w - step * grad).cwiseMax(0.0);
                for (int k = 0; k < 2; ++k) {
                    const double n = cand.col(k).norm();
                    if (n > 1.0) cand.col(k) /= n;
                }
                const double cand_obj = nmf_objective(v, cand, h, lambda_sparse);
                const double cur_obj = nmf_objective(v, w, h, lambda_sparse);
                if (cand_obj <= cur_obj + 1e-12 * std::max(1.0, cur_obj)) {
                    w = cand;
                } else {
                    step *= 0.5;
                }
            }
        }

        const double new_obj = nmf_objective(v, w, h, lambda_sparse);
        if (new_obj > obj + 1e-9 * std::max(1.0, std::abs(obj)))
            throw NumericError("vahadane: alternation increased the objective");
        obj = new_obj;
        if (trace) trace->objective.push_back(obj);
    }

    for (int k = 0; k < 2; ++k) {
        if (w.col(k).norm() < 1e-3)
            throw NumericError("degenerate stain plane: dictionary column collapsed");
        w.col(k).normalize();
    }

    StainModel m;
    m.stain_matrix = order_columns(w.col(0), w.col(1));
    m.max_conc = conc_percentile(nnls_concentrations(v, m.stain_matrix), 99.0);
    return m;
}

Eigen::Matrix2Xd concentrations(const OdImage& od, const StainModel& m) {
    return nnls_concentrations(od.od, m.stain_matrix);
}

RgbPatch normalize(const RgbPatch& p, Estimator estimator, const ReferenceTarget& target) {
    const OdImage od = rgb_to_od(p);
    const StainModel source = estimator == Estimator::Macenko
                                  ? estimate_macenko(od)
                                  : estimate_vahadane(od);
    Eigen::Matrix2Xd conc = concentrations(od, source);
    for (int r = 0; r < 2; ++r) {
        if (source.max_conc[r] < 1e-8)
            throw NumericError("degenerate stain plane: vanishing source concentration scale");
        conc.row(r) *= target.max_conc[r] / source.max_conc[r];
    }
    OdImage out;
    out.width = od.width;
    out.height = od.height;
    out.od = target.stain_matrix * conc;
    return od_to_rgb(out);
}

StainModel fit_reference(const RgbPatch& p, Estimator estimator) {
    const OdImage od = rgb_to_od(p);
    return estimator == Estimator::Macenko ? estimate_macenko(od) : estimate_vahadane(od);
}

std::string stain_model_to_string(const StainModel& m) {
    char buf[64];
    std::string out;
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 2; ++c) {
            std::snprintf(buf, sizeof(buf), "%.17g", m.stain_matrix(r, c));
            out += buf;
            out += c == 0 ? ' ' : '\n';
        }
    }
    for (int r = 0; r < 2; ++r) {
        std::snprintf(buf, sizeof(buf), "%.17g", m.max_conc[r]);
        out += buf;
        out += r == 0 ? ' ' : '\n';
    }
    return out;
}

StainModel stain_model_from_string(const std::string& text) {
    std::istringstream is(text);
    double vals[8];
    for (double& v : vals) {
        if (!(is >> v)) throw DataError("stain model: expected 8 whitespace-separated values");
    }
    StainModel m;
    m.stain_matrix << vals[0], vals[1], vals[2], vals[3], vals[4], vals[5];
    m.max_conc << vals[6], vals[7];
    for (int c = 0; c < 2; ++c) {
        if (std::abs(m.stain_matrix.col(c).norm() - 1.0) > 1e-9)
            throw DataError("stain model: column " + std::to_string(c) + " is not unit norm");
        if (m.stain_matrix.col(c).minCoeff() < 0)
            throw DataError("stain model: negative stain component");
    }
    return m;
}

void save_stain_model(const std::string& path, const StainModel& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("stain model: cannot write " + path);
    os << stain_model_to_string(m);
}

StainModel load_stain_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("stain model: cannot read " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return stain_model_from_string(ss.str());
}

}  // namespace mshift::stain
