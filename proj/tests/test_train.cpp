#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mshift/checkpoint.hpp"
#include "mshift/errors.hpp"
#include "mshift/train.hpp"

using namespace mshift;
using namespace mshift::train;
using backbone::Adaptation;
using backbone::VptViT;
using diff::Tape;
using diff::Tensor;

namespace {

backbone::ViTConfig tiny_config() {
    backbone::ViTConfig c;
    c.image_side = 32;
    c.patch_size = 8;
    c.embed_dim = 32;
    c.num_layers = 2;
    c.num_heads = 4;
    c.mlp_ratio = 2;
    c.prompt_len = 3;
    c.lora_rank = 2;
    return c;
}

data::Dataset small_dataset(int per_class, int n_domains, double angle_step,
                            std::uint64_t seed = 0) {
    data::SynthConfig cfg;
    cfg.side = 32;
    cfg.seed = seed;
    cfg.noise_sigma = 1.0;
    cfg.domains.clear();
    for (int d = 0; d < n_domains; ++d)
        cfg.domains.push_back({static_cast<std::uint64_t>(d), d * angle_step});
    std::vector<RgbPatch> imgs;
    std::vector<int> labels;
    std::vector<std::string> doms;
    for (int d = 0; d < n_domains; ++d) {
        for (int label = 0; label < 2; ++label) {
            for (int i = 0; i < per_class; ++i) {
                imgs.push_back(data::gen_patch(cfg, d, label, i).image);
                labels.push_back(label);
                doms.push_back("scanner_" + std::to_string(d));
            }
        }
    }
    return data::dataset_from_memory(std::move(imgs), std::move(labels), std::move(doms));
}

}  // namespace

TEST_CASE("total_loss analytic values") {
    // uniform logits: ln2 + ln3 with two classes, three domains, w_d = 1
    Tensor cls = Tensor::from({1, 2}, {0.0, 0.0});
    Tensor dom = Tensor::from({1, 3}, {0.0, 0.0, 0.0});
    std::vector<int> y = {1}, d = {2};
    const double loss = total_loss(nullptr, cls, y, dom, d, 1.0).item();
    CHECK(loss == doctest::Approx(std::log(2.0) + std::log(3.0)).epsilon(1e-15));

    // near-one-hot logits
    Tensor sharp_cls = Tensor::from({1, 2}, {-20.0, 20.0});
    Tensor sharp_dom = Tensor::from({1, 3}, {20.0, -20.0, -20.0});
    std::vector<int> d0 = {0};
    CHECK(total_loss(nullptr, sharp_cls, y, sharp_dom, d0, 1.0).item() <= 1e-8);

    // w_d = 0 equals the pure classification loss bitwise
    const double pure = diff::cross_entropy_with_logits(nullptr, cls, y).item();
    CHECK(total_loss(nullptr, cls, y, Tensor(), d, 0.0).item() == pure);

    std::vector<int> bad = {7};
    CHECK_THROWS_AS(total_loss(nullptr, cls, bad, dom, d, 1.0), NumericError);
}

TEST_CASE("loss with w_d 0 is invariant to permuting domain labels") {
    Rng rng(3);
    Tensor cls = Tensor::uniform({5, 2}, rng, -2, 2);
    Tensor dom = Tensor::uniform({5, 3}, rng, -2, 2);
    std::vector<int> y = {0, 1, 1, 0, 1};
    std::vector<int> d1 = {0, 1, 2, 0, 1};
    std::vector<int> d2 = {2, 0, 1, 1, 0};
    CHECK(total_loss(nullptr, cls, y, dom, d1, 0.0).item() ==
          total_loss(nullptr, cls, y, dom, d2, 0.0).item());
}

TEST_CASE("adam: first step magnitude, zero grad, determinism, frozen rejection") {
    {
        Tensor p = Tensor::scalar(1.0);
        p.set_requires_grad(true);
        AdamOptimizer opt({p}, 1e-2);
        p.grad_mut()[0] = 1.0;
        opt.step();
        CHECK(p[0] == doctest::Approx(1.0 - 1e-2).epsilon(1e-6));
    }
    {
        Tensor p = Tensor::scalar(2.5);
        p.set_requires_grad(true);
        AdamOptimizer opt({p}, 1e-2);
        p.zero_grad();
        opt.step();
        CHECK(p[0] == 2.5);
    }
    {
        auto run = [] {
            Rng rng(8);
            Tensor p = Tensor::uniform({4}, rng, -1, 1);
            p.set_requires_grad(true);
            AdamOptimizer opt({p}, 3e-3);
            Rng grad_rng(9);
            for (int s = 0; s < 25; ++s) {
                for (Eigen::Index i = 0; i < 4; ++i) p.grad_mut()[i] = grad_rng.uniform(-1, 1);
                opt.step();
            }
            return Eigen::ArrayXd(p.array());
        };
        const Eigen::ArrayXd a = run(), b = run();
        for (Eigen::Index i = 0; i < 4; ++i) CHECK(a[i] == b[i]);
    }
    {
        Tensor frozen = Tensor::scalar(0.0);
        CHECK_THROWS_AS(AdamOptimizer({frozen}, 1e-3), NumericError);
    }
}

TEST_CASE("train_loop: loss decreases, freeze contract, reproducibility") {
    const data::Dataset ds = small_dataset(25, 2, 10.0);
    TrainConfig cfg;
    cfg.adaptation = Adaptation::Vpt;
    cfg.epochs = 4;
    cfg.batch_size = 16;
    cfg.seed = 5;

    VptViT model = backbone::make_model(tiny_config(), Adaptation::Vpt, 2, 5);
    const std::uint64_t frozen_before = backbone::frozen_checksum(model);
    std::ostringstream csv;
    const TrainResult res = train_loop(model, ds, cfg, &csv);

    REQUIRE(res.log.size() == 4);
    CHECK(res.domain_branch_active);
    CHECK(res.log[1].train_loss < res.log[0].train_loss);
    CHECK(res.log[2].train_loss < res.log[1].train_loss);
    CHECK(backbone::frozen_checksum(model) == frozen_before);

    // csv structure: header + one row per epoch
    std::istringstream lines(csv.str());
    std::string line;
    std::getline(lines, line);
    CHECK(line == kMetricsCsvHeader);
    int rows = 0;
    while (std::getline(lines, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 4);

    // identical rerun: same checkpoint bytes, same metrics log
    VptViT model2 = backbone::make_model(tiny_config(), Adaptation::Vpt, 2, 5);
    std::ostringstream csv2;
    train_loop(model2, ds, cfg, &csv2);
    CHECK(csv2.str() == csv.str());
    CHECK(backbone::full_checksum(model2) == backbone::full_checksum(model));
}

TEST_CASE("head_only training changes only the heads") {
    const data::Dataset ds = small_dataset(10, 2, 10.0);
    VptViT model = backbone::make_model(tiny_config(), Adaptation::HeadOnly, 2, 1);

    std::vector<std::uint64_t> before;
    for (const auto& p : backbone::parameters(model))
        before.push_back(backbone::fnv1a(p.tensor.array().data(), p.tensor.size()));

    TrainConfig cfg;
    cfg.adaptation = Adaptation::HeadOnly;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    train_loop(model, ds, cfg, nullptr);

    const auto params = backbone::parameters(model);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::uint64_t now =
            backbone::fnv1a(params[i].tensor.array().data(), params[i].tensor.size());
        if (params[i].trainable)
            CHECK(now != before[i]);
        else
            CHECK(now == before[i]);
    }
}

TEST_CASE("lora training keeps the frozen base stable") {
    const data::Dataset ds = small_dataset(10, 2, 10.0);
    VptViT model = backbone::make_model(tiny_config(), Adaptation::Lora, 2, 2);
    const std::uint64_t frozen_before = backbone::frozen_checksum(model);
    TrainConfig cfg;
    cfg.adaptation = Adaptation::Lora;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    train_loop(model, ds, cfg, nullptr);
    CHECK(backbone::frozen_checksum(model) == frozen_before);
    CHECK(model.layers[0].lora_a.has_grad());
}

TEST_CASE("single-domain data disables the domain branch with a warning") {
    const data::Dataset ds = small_dataset(12, 1, 0.0);
    VptViT model = backbone::make_model(tiny_config(), Adaptation::Vpt, 2, 3);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.domain_loss_weight = 1.0;
    const TrainResult res = train_loop(model, ds, cfg, nullptr);
    CHECK_FALSE(res.domain_branch_active);
    REQUIRE(res.warnings.size() == 1);
    CHECK(res.warnings[0].find("single-domain") != std::string::npos);
}

// The reversed gradient is not the derivative of the forward identity, so
// the finite-difference oracle runs against the equivalent scalar per
// parameter group: backbone-side parameters see L_cls - lambda*w_d*L_dom,
// the domain head sees L_cls + w_d*L_dom. The twin test pins the actual
// GRL backward to those gradients bitwise.
TEST_CASE("gradient check of the full training loss over all trainables") {
    const data::Dataset ds = small_dataset(4, 2, 12.0);
    VptViT model = backbone::make_model(tiny_config(), Adaptation::Vpt, 2, 7);
    const double lambda = 1.0, w_d = 1.0;

    std::vector<Tensor> backbone_side, head_side;
    for (const auto& p : backbone::parameters(model)) {
        if (!p.trainable) continue;
        if (p.name.rfind("domain.", 0) == 0)
            head_side.push_back(p.tensor);
        else
            backbone_side.push_back(p.tensor);
    }

    std::vector<int> batch = {0, 5, 9, 14};
    auto losses = [&](Tape* tape) {
        std::vector<Tensor> rows;
        std::vector<int> ys, dsid;
        for (int i : batch) {
            rows.push_back(backbone::backbone_features(tape, model,
                                                       ds.images[static_cast<std::size_t>(i)]));
            ys.push_back(ds.labels[static_cast<std::size_t>(i)]);
            dsid.push_back(ds.domain_ids[static_cast<std::size_t>(i)]);
        }
        Tensor feats = diff::concat_rows(tape, rows);
        Tensor cls_loss = diff::cross_entropy_with_logits(
            tape, backbone::class_logits(tape, model, feats), ys);
        Tensor h = diff::gelu(tape, diff::affine(tape, feats, model.domain_head.w1,
                                                 model.domain_head.b1));
        Tensor dom_logits = diff::affine(tape, h, model.domain_head.w2, model.domain_head.b2);
        Tensor dom_loss = diff::cross_entropy_with_logits(tape, dom_logits, dsid);
        return std::pair<Tensor, Tensor>(cls_loss, dom_loss);
    };
    auto f_backbone = [&](Tape* tape) {
        auto [cls, dom] = losses(tape);
        return diff::add(tape, cls, diff::scale(tape, dom, -lambda * w_d));
    };
    auto f_head = [&](Tape* tape) {
        auto [cls, dom] = losses(tape);
        return diff::add(tape, cls, diff::scale(tape, dom, w_d));
    };
    CHECK(diff::grad_check(f_backbone, backbone_side, 1e-5, 100, 17) <= 1e-4);
    CHECK(diff::grad_check(f_head, head_side, 1e-5, 60, 18) <= 1e-4);

    // the actual GRL pipeline produces exactly those gradients
    auto pipeline_grads = [&] {
        for (Tensor& t : backbone_side) t.zero_grad();
        for (Tensor& t : head_side) t.zero_grad();
        Tape tape;
        std::vector<Tensor> rows;
        std::vector<int> ys, dsid;
        for (int i : batch) {
            rows.push_back(backbone::backbone_features(&tape, model,
                                                       ds.images[static_cast<std::size_t>(i)]));
            ys.push_back(ds.labels[static_cast<std::size_t>(i)]);
            dsid.push_back(ds.domain_ids[static_cast<std::size_t>(i)]);
        }
        Tensor feats = diff::concat_rows(&tape, rows);
        Tensor cls = backbone::class_logits(&tape, model, feats);
        Tensor dom = domain::domain_logits(&tape, feats, model.domain_head, lambda);
        tape.backward(total_loss(&tape, cls, ys, dom, dsid, w_d));
    };
    std::vector<Eigen::ArrayXd> expect_bb, expect_hd;
    diff::grad_check(f_backbone, backbone_side, 1e-5, 1, 1);  // repopulates analytic grads
    for (Tensor& t : backbone_side) expect_bb.push_back(t.grad());
    diff::grad_check(f_head, head_side, 1e-5, 1, 1);
    for (Tensor& t : head_side) expect_hd.push_back(t.grad());
    pipeline_grads();
    for (std::size_t k = 0; k < backbone_side.size(); ++k)
        CHECK((backbone_side[k].grad() == expect_bb[k]).all());
    for (std::size_t k = 0; k < head_side.size(); ++k)
        CHECK((head_side[k].grad() == expect_hd[k]).all());
}

TEST_CASE("feature-path training mirrors the image path") {
    Rng rng(41);
    const int n = 60, dim = 12;
    Eigen::MatrixXd feats(n, dim);
    std::vector<int> labels(n), domains(n);
    for (int i = 0; i < n; ++i) {
        labels[i] = i % 2;
        domains[i] = (i / 2) % 2;
        for (int j = 0; j < dim; ++j)
            feats(i, j) = rng.normal() + (labels[i] ? 1.0 : -1.0) * (j < 4 ? 0.8 : 0.0) +
                          (domains[i] ? 0.5 : 0.0) * (j >= 8 ? 1.0 : 0.0);
    }
    VptViT model = backbone::make_feature_model(dim, 2, 2, 11);
    TrainConfig cfg;
    cfg.adaptation = Adaptation::HeadOnly;
    cfg.epochs = 12;
    cfg.batch_size = 10;
    cfg.learning_rate = 1e-2;
    const TrainResult res = train_loop_features(model, feats, labels, domains, cfg, nullptr);
    CHECK(res.log.back().train_loss < res.log.front().train_loss);
    CHECK(res.log.back().val_balanced_accuracy > 0.7);

    Eigen::MatrixXd wrong(n, dim + 1);
    CHECK_THROWS_AS(train_loop_features(model, wrong, labels, domains, cfg, nullptr), ConfigError);
}

TEST_CASE("checkpoint round trip preserves every parameter and the config") {
    VptViT model = backbone::make_model(tiny_config(), Adaptation::Vpt, 3, 9);
    // make the weights non-fresh
    const data::Dataset ds = small_dataset(6, 3, 8.0);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    train_loop(model, ds, cfg, nullptr);

    const std::string path = (std::filesystem::temp_directory_path() / "mshift_ckpt.bin").string();
    checkpoint::save(path, model);
    const VptViT back = checkpoint::load(path);
    CHECK(backbone::full_checksum(back) == backbone::full_checksum(model));
    CHECK(back.mode == model.mode);
    CHECK(back.num_domains == 3);
    CHECK(back.cfg.embed_dim == model.cfg.embed_dim);

    // logits agree bitwise
    const RgbPatch p = ds.images[0];
    const Tensor a = backbone::forward(nullptr, model, p).logits;
    const Tensor b = backbone::forward(nullptr, back, p).logits;
    for (Eigen::Index i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

    CHECK_THROWS_AS(checkpoint::load("/nonexistent/ckpt.bin"), DataError);

    // corrupt magic
    {
        std::ofstream bad(path, std::ios::binary);
        bad << "NOTMAGIC";
    }
    CHECK_THROWS_AS(checkpoint::load(path), DataError);
}
