#ifndef MSHIFT_METRICS_HPP
#define MSHIFT_METRICS_HPP

#include <span>
#include <string>

namespace mshift::metrics {

// Positive class = atypical (label 1).
struct ConfusionCounts {
    long tp = 0, fn = 0, tn = 0, fp = 0;
};

ConfusionCounts confusion(std::span<const int> labels, std::span<const int> preds);

// sens = tp/(tp+fn), spec = tn/(tn+fp), BA = (sens+spec)/2.
// An empty class raises NumericError("undefined metric ..."), never a silent 0.
double sensitivity(const ConfusionCounts& c);
double specificity(const ConfusionCounts& c);
double balanced_accuracy(const ConfusionCounts& c);

/// Mann-Whitney AUC: P(score+ > score-) + 0.5 * P(tie), computed from
/// average ranks. Exact (bit-for-bit) against the all-pairs sum.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

/// Text report with the four leaderboard columns.
std::string metric_report(std::span<const double> scores, std::span<const int> labels,
                          double threshold);

}  // namespace mshift::metrics

#endif
