#include "mshift/train.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <ostream>
#include <set>

#include "mshift/errors.hpp"
#include "mshift/metrics.hpp"

namespace mshift::train {

using backbone::VptViT;
using diff::Tape;
using diff::Tensor;

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("train: learning_rate must be positive");
    if (domain_loss_weight < 0) throw ConfigError("train: domain_loss_weight must be >= 0");
    if (!(adapter_lr_scale > 0)) throw ConfigError("train: adapter_lr_scale must be positive");
    if (!class_weights.empty() && class_weights.size() != 2)
        throw ConfigError("train: class_weights needs one weight per class");
}

Tensor total_loss(Tape* tape, const Tensor& logits_cls, std::span<const int> y,
                  const Tensor& logits_dom, std::span<const int> d, double w_d,
                  std::span<const double> class_weights) {
    Tensor cls = diff::cross_entropy_with_logits(tape, logits_cls, y, class_weights);
    if (w_d == 0.0) return cls;
    if (!logits_dom.defined())
        throw NumericError("total_loss: w_d > 0 but no domain logits were provided");
    Tensor dom = diff::cross_entropy_with_logits(tape, logits_dom, d);
    return diff::add(tape, cls, diff::scale(tape, dom, w_d));
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, double lr, std::vector<double> lr_scales)
    : lr_(lr) {
    if (!lr_scales.empty() && lr_scales.size() != params.size())
        throw NumericError("adam: lr_scales size does not match params");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (!p.requires_grad())
            throw NumericError("adam: received a frozen parameter");
        slots_.push_back({p, lr_scales.empty() ? 1.0 : lr_scales[i],
                          Eigen::ArrayXd::Zero(p.size()), Eigen::ArrayXd::Zero(p.size())});
    }
}

void AdamOptimizer::step() {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t_;
    const double c1 = 1.0 - std::pow(b1, t_);
    const double c2 = 1.0 - std::pow(b2, t_);
    for (Slot& s : slots_) {
        if (!s.p.has_grad()) s.p.zero_grad();
        const Eigen::ArrayXd& g = s.p.grad();
        s.m = b1 * s.m + (1.0 - b1) * g;
        s.v = b2 * s.v + (1.0 - b2) * g.square();
        s.p.value_mut() -= lr_ * s.lr_scale * (s.m / c1) / ((s.v / c2).sqrt() + eps);
        s.p.zero_grad();
    }
}

namespace {

// Per-sample feature rows, either a backbone pass over an image or a
// constant row from an external feature matrix.
using FeatureProvider = std::function<Tensor(Tape*, int)>;

std::pair<std::vector<int>, std::vector<int>> stratified_split(
    const std::vector<int>& labels, const std::vector<int>& domain_ids, std::uint64_t seed) {
    std::map<std::pair<int, int>, std::vector<int>> groups;
    for (std::size_t i = 0; i < labels.size(); ++i)
        groups[{labels[i], domain_ids[i]}].push_back(static_cast<int>(i));
    std::vector<int> train_idx, val_idx;
    Rng rng(Rng::mix(seed, 0x5711ULL));
    for (auto& [key, idx] : groups) {
        rng.shuffle(idx.begin(), idx.end());
        const std::size_t n_val = idx.size() / 5;
        for (std::size_t k = 0; k < idx.size(); ++k)
            (k < n_val ? val_idx : train_idx).push_back(idx[k]);
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());
    return {train_idx, val_idx};
}

TrainResult run_loop(VptViT& model, const FeatureProvider& features,
                     const std::vector<int>& labels, const std::vector<int>& domain_ids,
                     const TrainConfig& cfg, std::ostream* metrics_csv) {
    cfg.validate();
    if (labels.empty()) throw DataError("train: empty dataset");
    if (labels.size() != domain_ids.size())
        throw DataError("train: labels/domains length mismatch");

    TrainResult result;

    int max_domain = 0;
    for (int d : domain_ids) max_domain = std::max(max_domain, d);
    const int distinct = static_cast<int>(
        std::set<int>(domain_ids.begin(), domain_ids.end()).size());
    double w_d = cfg.grl_enabled ? cfg.domain_loss_weight : 0.0;
    if (w_d > 0 && distinct < 2) {
        result.warnings.push_back(
            "train: single-domain dataset, domain-adversarial branch disabled");
        w_d = 0.0;
    }
    if (w_d > 0 && max_domain >= model.domain_head.num_domains())
        throw ConfigError("train: dataset has more domains than the model's domain head");
    result.domain_branch_active = w_d > 0;

    auto [train_idx, val_idx] = stratified_split(labels, domain_ids, cfg.seed);
    result.train_indices = train_idx;
    result.val_indices = val_idx;
    if (train_idx.empty()) throw DataError("train: empty training split");

    std::vector<Tensor> trainable;
    std::vector<double> lr_scales;
    for (const auto& p : backbone::parameters(model)) {
        if (!p.trainable) continue;
        trainable.push_back(p.tensor);
        const bool adapter = p.name.rfind("prompt_", 0) == 0 || p.name == "cls_token" ||
                             p.name.find("lora_") != std::string::npos;
        lr_scales.push_back(adapter ? cfg.adapter_lr_scale : 1.0);
    }
    AdamOptimizer opt(trainable, cfg.learning_rate, std::move(lr_scales));

    const std::uint64_t frozen0 = backbone::frozen_checksum(model);
    Rng shuffle_rng(Rng::mix(cfg.seed, 0xba7c4));

    const long steps_per_epoch =
        (static_cast<long>(train_idx.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = steps_per_epoch * cfg.epochs;
    long global_step = 0;

    if (metrics_csv) (*metrics_csv) << kMetricsCsvHeader << '\n';

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order = train_idx;
        shuffle_rng.shuffle(order.begin(), order.end());

        double loss_sum = 0.0;
        long loss_count = 0;
        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
            Tape tape;
            std::vector<Tensor> rows;
            std::vector<int> ys, ds;
            for (std::size_t k = at; k < end; ++k) {
                const int i = order[k];
                rows.push_back(features(&tape, i));
                ys.push_back(labels[static_cast<std::size_t>(i)]);
                ds.push_back(domain_ids[static_cast<std::size_t>(i)]);
            }
            Tensor feats = rows.size() == 1 ? rows[0] : diff::concat_rows(&tape, rows);
            Tensor logits = backbone::class_logits(&tape, model, feats);
            Tensor dom_logits;
            if (w_d > 0) {
                const double progress =
                    total_steps > 1 ? static_cast<double>(global_step) / static_cast<double>(total_steps)
                                    : 0.0;
                dom_logits = domain::domain_logits(&tape, feats, model.domain_head,
                                                   cfg.grl.value(progress));
            }
            Tensor loss = total_loss(&tape, logits, ys, dom_logits, ds, w_d, cfg.class_weights);
            tape.backward(loss);
            opt.step();
            loss_sum += loss.item() * static_cast<double>(end - at);
            loss_count += static_cast<long>(end - at);
            ++global_step;
        }

        if (backbone::frozen_checksum(model) != frozen0)
            throw NumericError("train: frozen parameters changed during epoch " +
                               std::to_string(epoch));

        // validation: plain forward, probability of the atypical class
        double ba = std::nan(""), auc = std::nan("");
        if (!val_idx.empty()) {
            std::vector<double> probs;
            std::vector<int> ys;
            for (int i : val_idx) {
                Tensor f = features(nullptr, i);
                Tensor logits = backbone::class_logits(nullptr, model, f);
                Tensor sm = diff::softmax(nullptr, logits);
                probs.push_back(sm[1]);
                ys.push_back(labels[static_cast<std::size_t>(i)]);
            }
            std::vector<int> preds(probs.size());
            for (std::size_t k = 0; k < probs.size(); ++k) preds[k] = probs[k] >= 0.5 ? 1 : 0;
            try {
                ba = metrics::balanced_accuracy(metrics::confusion(ys, preds));
                auc = metrics::roc_auc(probs, ys);
            } catch (const NumericError&) {
                // single-class validation split; metrics stay NaN
            }
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / static_cast<double>(loss_count);
        stats.val_balanced_accuracy = ba;
        stats.val_auc = auc;
        result.log.push_back(stats);
        if (metrics_csv) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%d,%.9f,%.9f,%.9f", epoch, stats.train_loss, ba, auc);
            (*metrics_csv) << buf << '\n';
        }
    }
    return result;
}

}  // namespace

TrainResult train_loop(VptViT& model, const data::Dataset& ds, const TrainConfig& cfg,
                       std::ostream* metrics_csv) {
    if (model.input != backbone::InputKind::Image)
        throw ConfigError("train: feature-input model needs train_loop_features");
    FeatureProvider provider = [&](Tape* tape, int i) {
        return backbone::backbone_features(tape, model, ds.images[static_cast<std::size_t>(i)]);
    };
    return run_loop(model, provider, ds.labels, ds.domain_ids, cfg, metrics_csv);
}

TrainResult train_loop_features(VptViT& model, const Eigen::MatrixXd& features,
                                const std::vector<int>& labels,
                                const std::vector<int>& domain_ids, const TrainConfig& cfg,
                                std::ostream* metrics_csv) {
    if (features.rows() != static_cast<Eigen::Index>(labels.size()))
        throw DataError("train: feature rows do not match labels");
    if (features.cols() != model.cfg.embed_dim)
        throw ConfigError("train: feature width " + std::to_string(features.cols()) +
                          " does not match the model embed_dim " +
                          std::to_string(model.cfg.embed_dim));
    FeatureProvider provider = [&](Tape*, int i) {
        Tensor row(diff::Shape{1, static_cast<int>(features.cols())});
        for (Eigen::Index c = 0; c < features.cols(); ++c) row[c] = features(i, c);
        return row;
    };
    return run_loop(model, provider, labels, domain_ids, cfg, metrics_csv);
}

}  // namespace mshift::train
