#include "mshift/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <vector>

#include "mshift/errors.hpp"

namespace mshift::metrics {

ConfusionCounts confusion(std::span<const int> labels, std::span<const int> preds) {
    if (labels.size() != preds.size())
        throw NumericError("confusion: " + std::to_string(labels.size()) + " labels vs " +
                           std::to_string(preds.size()) + " predictions");
    if (labels.empty()) throw NumericError("confusion: empty input");
    ConfusionCounts c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if ((labels[i] != 0 && labels[i] != 1) || (preds[i] != 0 && preds[i] != 1))
            throw NumericError("confusion: non-binary value at index " + std::to_string(i));
        if (labels[i] == 1)
            (preds[i] == 1 ? c.tp : c.fn)++;
        else
            (preds[i] == 0 ? c.tn : c.fp)++;
    }
    return c;
}

double sensitivity(const ConfusionCounts& c) {
    if (c.tp + c.fn == 0) throw NumericError("undefined metric: sensitivity with no positives");
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

double specificity(const ConfusionCounts& c) {
    if (c.tn + c.fp == 0) throw NumericError("undefined metric: specificity with no negatives");
    return static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
}

double balanced_accuracy(const ConfusionCounts& c) {
    return 0.5 * (sensitivity(c) + specificity(c));
}

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size())
        throw NumericError("roc_auc: " + std::to_string(scores.size()) + " scores vs " +
                           std::to_string(labels.size()) + " labels");
    const std::size_t n = scores.size();
    long npos = 0, nneg = 0;
    for (int y : labels) (y == 1 ? npos : nneg)++;
    if (npos == 0 || nneg == 0)
        throw NumericError("undefined metric: roc_auc needs both classes");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Average ranks within tie groups; ranks are 1-based. All rank values
    // are exact multiples of 0.5, so the rank sum equals the pairwise
    // "wins + half ties" count without rounding.
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t k = i; k <= j; ++k)
            if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(npos) * static_cast<double>(npos + 1);
    return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

std::string metric_report(std::span<const double> scores, std::span<const int> labels,
                          double threshold) {
    std::vector<int> preds(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) preds[i] = scores[i] >= threshold ? 1 : 0;
    const ConfusionCounts c = confusion(labels, preds);
    const double ba = balanced_accuracy(c);
    const double sens = sensitivity(c);
    const double spec = specificity(c);
    const double auc = roc_auc(scores, labels);
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "%-14s %-12s %-12s %-8s\n%-14.4f %-12.4f %-12.4f %-8.4f\n",
                  "Balanced Acc.", "Sensitivity", "Specificity", "ROC AUC", ba, sens, spec, auc);
    return buf;
}

}  // namespace mshift::metrics
