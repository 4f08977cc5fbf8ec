#include <cmath>
#include <vector>

#include "doctest.h"
#include "mshift/errors.hpp"
#include "mshift/metrics.hpp"
#include "mshift/rng.hpp"

using namespace mshift;
using namespace mshift::metrics;

namespace {

// O(n^2) pairwise oracle, half credit for ties.
double brute_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    double num = 0.0;
    long npos = 0, nneg = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 1) continue;
        ++npos;
        for (std::size_t j = 0; j < labels.size(); ++j) {
            if (labels[j] == 1) continue;
            if (scores[i] > scores[j])
                num += 1.0;
            else if (scores[i] == scores[j])
                num += 0.5;
        }
    }
    for (int y : labels)
        if (y == 0) ++nneg;
    return num / (static_cast<double>(npos) * static_cast<double>(nneg));
}

}  // namespace

TEST_CASE("confusion counting") {
    std::vector<int> labels = {1, 0};
    std::vector<int> preds = {1, 0};
    ConfusionCounts c = confusion(labels, preds);
    CHECK(c.tp == 1);
    CHECK(c.tn == 1);
    CHECK(c.fp == 0);
    CHECK(c.fn == 0);

    std::vector<int> l2 = {1, 1, 0};
    std::vector<int> p2 = {0, 0, 0};
    ConfusionCounts c2 = confusion(l2, p2);
    CHECK(c2.fn == 2);
    CHECK(c2.tn == 1);

    std::vector<int> empty;
    CHECK_THROWS_AS(confusion(empty, empty), NumericError);
}

TEST_CASE("balanced accuracy and friends, hand-computed") {
    ConfusionCounts c{95, 5, 80, 20};
    CHECK(sensitivity(c) == doctest::Approx(0.95).epsilon(1e-15));
    CHECK(specificity(c) == doctest::Approx(0.80).epsilon(1e-15));
    CHECK(balanced_accuracy(c) == doctest::Approx(0.875).epsilon(1e-15));

    ConfusionCounts perfect{10, 0, 10, 0};
    CHECK(balanced_accuracy(perfect) == 1.0);

    ConfusionCounts all_pos{10, 0, 0, 10};  // all-positive predictor on balanced data
    CHECK(balanced_accuracy(all_pos) == 0.5);

    ConfusionCounts no_neg{3, 1, 0, 0};
    CHECK_THROWS_AS(balanced_accuracy(no_neg), NumericError);
}

TEST_CASE("roc_auc basic values") {
    std::vector<double> sep = {0.1, 0.2, 0.8, 0.9};
    std::vector<int> ysep = {0, 0, 1, 1};
    CHECK(roc_auc(sep, ysep) == 1.0);

    std::vector<double> ties = {0.5, 0.5, 0.5, 0.5};
    CHECK(roc_auc(ties, ysep) == 0.5);

    std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
    std::vector<int> y = {0, 0, 1, 1};
    CHECK(roc_auc(s, y) == doctest::Approx(0.75).epsilon(1e-15));

    std::vector<int> ones = {1, 1, 1, 1};
    CHECK_THROWS_AS(roc_auc(s, ones), NumericError);
}

TEST_CASE("roc_auc equals the pairwise oracle exactly on random instances") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 2 + rng.uniform_int(199);
        std::vector<double> scores(static_cast<std::size_t>(n));
        std::vector<int> labels(static_cast<std::size_t>(n));
        bool has0 = false, has1 = false;
        for (int i = 0; i < n; ++i) {
            // quantized scores force tie groups
            scores[static_cast<std::size_t>(i)] = rng.uniform_int(10) / 10.0;
            labels[static_cast<std::size_t>(i)] = rng.uniform_int(2);
            has0 = has0 || labels[static_cast<std::size_t>(i)] == 0;
            has1 = has1 || labels[static_cast<std::size_t>(i)] == 1;
        }
        if (!has0) labels[0] = 0;
        if (!has1) labels[1 % static_cast<std::size_t>(n)] = 1;
        CHECK(roc_auc(scores, labels) == brute_auc(scores, labels));
    }
}

TEST_CASE("roc_auc invariant under strictly monotone transforms") {
    Rng rng(7);
    std::vector<double> scores(60);
    std::vector<int> labels(60);
    for (std::size_t i = 0; i < 60; ++i) {
        scores[i] = rng.uniform(-3, 3);
        labels[i] = rng.uniform_int(2);
    }
    labels[0] = 0;
    labels[1] = 1;
    std::vector<double> warped(60);
    for (std::size_t i = 0; i < 60; ++i) warped[i] = std::tanh(scores[i]) * 5 + 1;
    CHECK(roc_auc(scores, labels) == doctest::Approx(roc_auc(warped, labels)).epsilon(1e-15));
}

TEST_CASE("label/score complement flips AUC for tie-free inputs") {
    Rng rng(21);
    std::vector<double> scores(41);
    std::vector<int> labels(41);
    for (std::size_t i = 0; i < 41; ++i) {
        scores[i] = rng.uniform(0, 1);
        labels[i] = rng.uniform_int(2);
    }
    labels[0] = 0;
    labels[1] = 1;
    std::vector<double> neg(41);
    std::vector<int> flip(41);
    for (std::size_t i = 0; i < 41; ++i) {
        neg[i] = -scores[i];
        flip[i] = 1 - labels[i];
    }
    CHECK(roc_auc(neg, flip) == doctest::Approx(roc_auc(scores, labels)).epsilon(1e-12));
    CHECK(roc_auc(neg, labels) == doctest::Approx(1.0 - roc_auc(scores, labels)).epsilon(1e-12));
}

TEST_CASE("report carries the four leaderboard column names") {
    std::vector<double> s = {0.9, 0.8, 0.2, 0.1};
    std::vector<int> y = {1, 1, 0, 0};
    const std::string rep = metric_report(s, y, 0.5);
    CHECK(rep.find("Balanced Acc.") != std::string::npos);
    CHECK(rep.find("Sensitivity") != std::string::npos);
    CHECK(rep.find("Specificity") != std::string::npos);
    CHECK(rep.find("ROC AUC") != std::string::npos);
    CHECK(rep.find("1.0000") != std::string::npos);
}
