#ifndef MSHIFT_TRAIN_HPP
#define MSHIFT_TRAIN_HPP

#include <iosfwd>
#include <span>
#include <vector>

#include "mshift/backbone.hpp"
#include "mshift/data.hpp"
#include "mshift/domain_adapt.hpp"

namespace mshift::train {

struct TrainConfig {
    backbone::Adaptation adaptation = backbone::Adaptation::Vpt;
    int epochs = 10;
    int batch_size = 16;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    bool grl_enabled = true;
    domain::GrlCoeff grl;               // constant lambda = 1 by default
    std::vector<double> class_weights;  // empty, or one weight per class
    double domain_loss_weight = 1.0;    // w_d
    // Learning-rate multiplier for the adapted backbone-side parameters
    // (prompts, class token, LoRA factors). They sit upstream of the heads;
    // full-rate Adam steps churn the feature distribution faster than the
    // heads can track it.
    double adapter_lr_scale = 0.1;

    void validate() const;
};

/// L = CE_class(logits_cls, y) + w_d * CE_domain(logits_dom, d).
/// Any gradient reversal sits inside the domain-logits path upstream of
/// this call. With w_d == 0 the result is bitwise the classification loss.
diff::Tensor total_loss(diff::Tape* tape, const diff::Tensor& logits_cls, std::span<const int> y,
                        const diff::Tensor& logits_dom, std::span<const int> d, double w_d,
                        std::span<const double> class_weights = {});

/// Adam, beta = (0.9, 0.999), eps = 1e-8. Accepts trainable parameters
/// only; step() consumes and zeroes their gradients. lr_scales, when
/// given, holds one per-parameter-group rate multiplier (standard Adam
/// parameter groups).
class AdamOptimizer {
public:
    AdamOptimizer(std::vector<diff::Tensor> params, double lr,
                  std::vector<double> lr_scales = {});
    void step();
    int steps() const { return t_; }

private:
    struct Slot {
        diff::Tensor p;
        double lr_scale;
        Eigen::ArrayXd m, v;
    };
    std::vector<Slot> slots_;
    double lr_;
    int t_ = 0;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0;
    double val_balanced_accuracy = 0;  // NaN when the split lacks a class
    double val_auc = 0;
};

struct TrainResult {
    std::vector<EpochStats> log;
    std::vector<int> train_indices;
    std::vector<int> val_indices;
    bool domain_branch_active = false;
    std::vector<std::string> warnings;
};

inline constexpr const char* kMetricsCsvHeader = "epoch,train_loss,val_balanced_accuracy,val_auc";

/// Full loop over an image dataset: stratified 80/20 split by
/// (class, domain), deterministic shuffling from cfg.seed, Adam on the
/// trainable set, per-epoch validation metrics. The frozen-parameter
/// checksum is verified at every epoch boundary. Training on a
/// single-domain dataset with w_d > 0 disables the domain branch with a
/// warning instead of failing.
TrainResult train_loop(backbone::VptViT& model, const data::Dataset& ds, const TrainConfig& cfg,
                       std::ostream* metrics_csv);

/// Same loop over precomputed feature vectors (external encoder path).
TrainResult train_loop_features(backbone::VptViT& model, const Eigen::MatrixXd& features,
                                const std::vector<int>& labels,
                                const std::vector<int>& domain_ids, const TrainConfig& cfg,
                                std::ostream* metrics_csv);

}  // namespace mshift::train

#endif
