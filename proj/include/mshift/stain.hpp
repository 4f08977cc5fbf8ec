#ifndef MSHIFT_STAIN_HPP
#define MSHIFT_STAIN_HPP

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "mshift/image.hpp"

namespace mshift::stain {

/// Per-pixel base-10 optical densities, one column per pixel.
struct OdImage {
    int width = 0;
    int height = 0;
    Eigen::Matrix3Xd od;
};

/// Columns are unit OD absorption vectors, hematoxylin first (the column
/// with the larger red-channel component). max_conc holds the 99th
/// percentile concentration per stain, used as the normalization scale.
struct StainModel {
    Eigen::Matrix<double, 3, 2> stain_matrix;
    Eigen::Vector2d max_conc;
};

/// A StainModel fitted once on a designated reference patch.
using ReferenceTarget = StainModel;

enum class Estimator { Macenko, Vahadane };

// OD = -log10((I+1)/255), clamped at zero so I in {254,255} maps to 0.
// The +1 keeps the logarithm total on [0,255].
OdImage rgb_to_od(const RgbPatch& p);

// I = clamp(round(255 * 10^-OD), 0, 255); inverts rgb_to_od within one
// channel unit.
RgbPatch od_to_rgb(const OdImage& od);

constexpr double kTissueBeta = 0.15;      // tissue mask: all OD components > beta
constexpr double kAnglePercentile = 1.0;  // extreme-direction percentile
constexpr double kDefaultSparsity = 0.1;
constexpr int kDefaultNmfIters = 50;
constexpr int kMinTissuePixels = 100;

/// Standard H&E absorption columns (unit norm), used as the generator
/// ground truth and as the NMF fallback initializer.
Eigen::Matrix<double, 3, 2> ruifrok_he();

/// SVD-plane method: scatter of tissue OD, project onto the two leading
/// eigenvectors, take the alpha / 100-alpha angle percentiles as the
/// extreme stain directions.
StainModel estimate_macenko(const OdImage& od, double beta = kTissueBeta,
                            double alpha_pct = kAnglePercentile);

struct VahadaneTrace {
    std::vector<double> objective;  // after each alternation
};

/// Sparse nonnegative dictionary learning:
///   min ||V - WH||_F^2 + lambda * sum_j ||H_j||_1,  W >= 0 unit columns, H >= 0
/// H-step: exact per-pixel coordinate descent; W-step: projected gradient
/// onto {W >= 0, ||w_k|| <= 1}. The objective is nonincreasing across
/// alternations by construction.
StainModel estimate_vahadane(const OdImage& od, double lambda_sparse = kDefaultSparsity,
                             int iters = kDefaultNmfIters, VahadaneTrace* trace = nullptr);

/// Per-pixel nonnegative least squares  argmin_{c>=0} ||od_px - S c||_2,
/// solved exactly for the two-stain case.
Eigen::Matrix2Xd concentrations(const OdImage& od, const StainModel& m);

/// Re-render p under the target stain matrix: concentrations are scaled
/// per stain by target.max_conc / source.max_conc.
RgbPatch normalize(const RgbPatch& p, Estimator estimator, const ReferenceTarget& target);

StainModel fit_reference(const RgbPatch& p, Estimator estimator);

// Text serialization: 6 stain-matrix values row-major, then the 2 max_conc
// values, whitespace-separated, 17 significant digits.
void save_stain_model(const std::string& path, const StainModel& m);
StainModel load_stain_model(const std::string& path);
std::string stain_model_to_string(const StainModel& m);
StainModel stain_model_from_string(const std::string& text);

}  // namespace mshift::stain

#endif
