#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "mshift/checkpoint.hpp"
#include "mshift/data.hpp"
#include "mshift/errors.hpp"
#include "mshift/metrics.hpp"
#include "mshift/runconfig.hpp"
#include "mshift/stain.hpp"
#include "mshift/train.hpp"
#include "mshift/tta.hpp"

namespace fs = std::filesystem;
using namespace mshift;

namespace {

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const DataError*>(&e)) return 3;
    if (dynamic_cast<const NumericError*>(&e)) return 4;
    return 1;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    os << text;
    if (!os) throw DataError("write failed for " + path.string());
}

void prepare_out_dir(const fs::path& out, const config::RunConfig& cfg) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw DataError("cannot create output directory " + out.string());
    write_text(out / "resolved_config.txt", cfg.resolved());
}

config::RunConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
    config::RunConfig cfg = path.empty() ? config::RunConfig() : config::RunConfig::from_file(path);
    if (seed) cfg.set("seed", std::to_string(*seed));
    return cfg;
}

struct CommonArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
};

int cmd_gen_synth(const CommonArgs& common, const std::string& out) {
    const config::RunConfig cfg = load_config(common.config, common.seed);
    const data::SynthConfig synth = cfg.synth_config();
    prepare_out_dir(out, cfg);
    data::gen_synth(synth, out);
    const long total = static_cast<long>(synth.domains.size()) * 2 * synth.n_per_class_per_domain;
    std::printf("gen-synth: %zu domains, %d per class per domain -> %ld images in %s\n",
                synth.domains.size(), synth.n_per_class_per_domain, total, out.c_str());
    return 0;
}

stain::Estimator estimator_from_string(const std::string& s) {
    return s == "macenko" ? stain::Estimator::Macenko : stain::Estimator::Vahadane;
}

int cmd_train(const CommonArgs& common, const std::string& manifest, const std::string& embeddings,
              const std::string& out, const std::string& adaptation_override,
              const std::string& grl_override, const std::string& stain_override) {
    config::RunConfig cfg = load_config(common.config, common.seed);
    if (!adaptation_override.empty()) cfg.set("train.adaptation", adaptation_override);
    if (!grl_override.empty()) cfg.set("train.grl", grl_override);
    if (!stain_override.empty()) cfg.set("train.stain", stain_override);
    if (manifest.empty() == embeddings.empty())
        throw ConfigError("train: provide exactly one of --manifest or --embeddings");

    const train::TrainConfig tc = cfg.train_config();
    prepare_out_dir(out, cfg);
    std::ofstream metrics_csv(fs::path(out) / "metrics.csv", std::ios::binary);
    if (!metrics_csv) throw DataError("train: cannot write metrics.csv in " + out);

    backbone::VptViT model;
    train::TrainResult result;
    if (!embeddings.empty()) {
        const data::EmbeddingSet set = data::load_embeddings(embeddings);
        std::set<std::string> names;
        for (const auto& rec : set.records) names.insert(rec.domain);
        std::vector<std::string> domain_names(names.begin(), names.end());
        std::vector<int> labels, domain_ids;
        for (const auto& rec : set.records) {
            labels.push_back(rec.label);
            const auto it = std::lower_bound(domain_names.begin(), domain_names.end(), rec.domain);
            domain_ids.push_back(static_cast<int>(it - domain_names.begin()));
        }
        model = backbone::make_feature_model(
            set.dim, cfg.vit_config().num_classes,
            static_cast<int>(std::max<std::size_t>(domain_names.size(), 1)), cfg.seed());
        result = train::train_loop_features(model, set.vectors, labels, domain_ids, tc,
                                            &metrics_csv);
    } else {
        data::Dataset ds = data::load_dataset(manifest);
        const std::string stain_mode = cfg.train_stain();
        if (stain_mode != "off") {
            const stain::Estimator est = estimator_from_string(stain_mode);
            RgbPatch ref = cfg.train_reference().empty() ? ds.images.front()
                                                         : read_png(cfg.train_reference());
            const stain::ReferenceTarget target = stain::fit_reference(ref, est);
            stain::save_stain_model((fs::path(out) / ("reference_" + stain_mode + ".txt")).string(),
                                    target);
            int fallbacks = 0;
            for (auto& img : ds.images) {
                try {
                    img = stain::normalize(img, est, target);
                } catch (const NumericError&) {
                    ++fallbacks;  // keep the raw patch
                }
            }
            if (fallbacks > 0)
                std::fprintf(stderr, "train: stain normalization fell back on %d patches\n",
                             fallbacks);
        }
        model = backbone::make_model(cfg.vit_config(), tc.adaptation,
                                     static_cast<int>(ds.domain_names.size()), cfg.seed());
        result = train::train_loop(model, ds, tc, &metrics_csv);
    }
    for (const std::string& w : result.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    checkpoint::save((fs::path(out) / "checkpoint.bin").string(), model);

    const auto& last = result.log.back();
    std::printf("train: %zu epochs, final train_loss %.6f val_ba %.4f val_auc %.4f -> %s\n",
                result.log.size(), last.train_loss, last.val_balanced_accuracy, last.val_auc,
                out.c_str());
    return 0;
}

int cmd_infer(const CommonArgs& common, const std::string& checkpoint_path,
              const std::string& manifest, const std::string& out, const std::string& tta_preset,
              const std::string& reference_dir, const std::string& reference_image,
              double threshold) {
    config::RunConfig cfg = load_config(common.config, common.seed);
    if (!tta_preset.empty()) {
        if (tta_preset == "off") {
            cfg.set("tta.geo", "off");
            cfg.set("tta.stains", "off");
        } else if (tta_preset == "flips") {
            cfg.set("tta.geo", "flips");
        } else if (tta_preset == "full") {
            cfg.set("tta.geo", "full");
            cfg.set("tta.stains", "identity,macenko,vahadane");
        } else {
            throw ConfigError("infer: --tta must be off, flips or full, got \"" + tta_preset +
                              "\"");
        }
    }
    const tta::TtaPlan plan = cfg.tta_plan();

    if (!fs::exists(checkpoint_path))
        throw DataError("infer: checkpoint not found: " + checkpoint_path);
    const backbone::VptViT model = checkpoint::load(checkpoint_path);
    if (model.input != backbone::InputKind::Image)
        throw ConfigError("infer: checkpoint was trained on external features, not images");

    const data::Dataset ds = data::load_dataset(manifest);

    tta::StainTargets targets;
    auto want = [&](tta::StainVariant v) {
        return std::find(plan.stains.begin(), plan.stains.end(), v) != plan.stains.end();
    };
    auto resolve_target = [&](tta::StainVariant v) -> stain::ReferenceTarget {
        const std::string name = tta::to_string(v);
        if (!reference_dir.empty())
            return stain::load_stain_model(
                (fs::path(reference_dir) / ("reference_" + name + ".txt")).string());
        if (!reference_image.empty())
            return stain::fit_reference(read_png(reference_image), estimator_from_string(name));
        throw ConfigError("infer: the TTA plan includes " + name +
                          " normalization; provide --reference-dir or --reference-image");
    };
    if (want(tta::StainVariant::Macenko))
        targets.macenko = resolve_target(tta::StainVariant::Macenko);
    if (want(tta::StainVariant::Vahadane))
        targets.vahadane = resolve_target(tta::StainVariant::Vahadane);

    prepare_out_dir(out, cfg);
    std::ofstream csv(fs::path(out) / "predictions.csv", std::ios::binary);
    if (!csv) throw DataError("infer: cannot write predictions.csv in " + out);
    csv << "image_path,prob_atypical,pred_label,n_fallbacks\n";
    long total_fallbacks = 0;
    char buf[64];
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        const tta::TtaResult r = tta::predict_tta(model, ds.images[i], plan, targets);
        total_fallbacks += r.n_fallbacks;
        std::snprintf(buf, sizeof(buf), "%.17g", r.prob_atypical);
        csv << ds.records[i].image_path << ',' << buf << ','
            << (r.prob_atypical >= threshold ? 1 : 0) << ',' << r.n_fallbacks << '\n';
    }
    if (!csv) throw DataError("infer: write failed for predictions.csv");
    std::printf("infer: %zu patches, %zu passes each, %ld stain fallbacks -> %s\n",
                ds.images.size(), plan.geo.size() * plan.stains.size(), total_fallbacks,
                out.c_str());
    return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& predictions, const std::string& manifest,
             std::optional<double> threshold_flag, const std::string& out) {
    const config::RunConfig cfg = load_config(common.config, common.seed);
    const double threshold = threshold_flag ? *threshold_flag : cfg.get_double("eval.threshold");

    std::ifstream pred_in(predictions, std::ios::binary);
    if (!pred_in) throw DataError("eval: cannot open " + predictions);
    std::string line;
    if (!std::getline(pred_in, line) ||
        line.rfind("image_path,prob_atypical,pred_label", 0) != 0)
        throw DataError("eval: bad predictions header in " + predictions);

    std::map<std::string, int> label_by_path;
    for (const auto& rec : data::load_manifest(manifest)) label_by_path[rec.image_path] = rec.label;

    std::vector<double> scores;
    std::vector<int> labels;
    int lineno = 1;
    while (std::getline(pred_in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string path, prob_s;
        if (!std::getline(row, path, ',') || !std::getline(row, prob_s, ','))
            throw DataError("eval: malformed prediction row at line " + std::to_string(lineno));
        const auto it = label_by_path.find(path);
        if (it == label_by_path.end())
            throw DataError("eval: prediction line " + std::to_string(lineno) + " references \"" +
                            path + "\" which is not in the manifest");
        try {
            scores.push_back(std::stod(prob_s));
        } catch (const std::exception&) {
            throw DataError("eval: bad probability at line " + std::to_string(lineno));
        }
        labels.push_back(it->second);
    }
    if (scores.empty()) throw DataError("eval: no prediction rows in " + predictions);

    const std::string report = metrics::metric_report(scores, labels, threshold);
    std::fputs(report.c_str(), stdout);
    if (!out.empty()) {
        prepare_out_dir(out, cfg);
        write_text(fs::path(out) / "report.txt", report);
    }
    return 0;
}

int cmd_fit_reference(const CommonArgs& common, const std::string& image, const std::string& out) {
    const config::RunConfig cfg = load_config(common.config, common.seed);
    const RgbPatch patch = read_png(image);
    prepare_out_dir(out, cfg);
    for (const auto& [name, est] :
         {std::pair<std::string, stain::Estimator>{"macenko", stain::Estimator::Macenko},
          std::pair<std::string, stain::Estimator>{"vahadane", stain::Estimator::Vahadane}}) {
        const stain::ReferenceTarget target = stain::fit_reference(patch, est);
        stain::save_stain_model((fs::path(out) / ("reference_" + name + ".txt")).string(), target);
    }
    std::printf("fit-reference: wrote reference_macenko.txt and reference_vahadane.txt to %s\n",
                out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mshift - stain-robust atypical-mitosis patch classification toolkit"};
    app.require_subcommand(1);

    CommonArgs common;
    std::string manifest, embeddings, out, checkpoint_path, predictions, image;
    std::string adaptation_override, grl_override, stain_override, tta_preset;
    std::string reference_dir, reference_image;
    double infer_threshold = 0.5;
    std::optional<double> eval_threshold;

    auto add_common = [&](CLI::App* cmd, bool with_seed = true) {
        cmd->add_option("--config", common.config, "run configuration file (key=value lines)");
        if (with_seed) {
            cmd->add_option_function<std::uint64_t>(
                "--seed", [&](std::uint64_t s) { common.seed = s; }, "override the config seed");
        }
    };

    CLI::App* gen = app.add_subcommand("gen-synth", "generate a synthetic labeled dataset");
    add_common(gen);
    gen->add_option("--out", out, "output directory")->required();

    CLI::App* tr = app.add_subcommand("train", "train a model and write a checkpoint");
    add_common(tr);
    tr->add_option("--manifest", manifest, "dataset manifest CSV");
    tr->add_option("--embeddings", embeddings, "precomputed embeddings file");
    tr->add_option("--out", out, "output directory")->required();
    tr->add_option("--adaptation", adaptation_override, "vpt | lora | head_only");
    tr->add_option("--grl", grl_override, "on | off");
    tr->add_option("--stain", stain_override, "train-time normalization: off | macenko | vahadane");

    CLI::App* inf = app.add_subcommand("infer", "predict atypical probabilities for a manifest");
    add_common(inf);
    inf->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    inf->add_option("--manifest", manifest, "dataset manifest CSV")->required();
    inf->add_option("--out", out, "output directory")->required();
    inf->add_option("--tta", tta_preset, "off | flips | full (default: plan from config)");
    inf->add_option("--reference-dir", reference_dir,
                    "directory with reference_macenko.txt / reference_vahadane.txt");
    inf->add_option("--reference-image", reference_image, "fit stain targets from this image");
    inf->add_option("--threshold", infer_threshold, "probability threshold for pred_label");

    CLI::App* ev = app.add_subcommand("eval", "score predictions against a labeled manifest");
    add_common(ev, false);
    ev->add_option("--predictions", predictions, "predictions CSV from infer")->required();
    ev->add_option("--manifest", manifest, "labeled manifest CSV")->required();
    ev->add_option_function<double>(
        "--threshold", [&](double t) { eval_threshold = t; }, "decision threshold");
    ev->add_option("--out", out, "optional output directory for report.txt");

    CLI::App* fit = app.add_subcommand("fit-reference", "fit and serialize stain targets");
    add_common(fit, false);
    fit->add_option("--image", image, "reference patch (PNG)")->required();
    fit->add_option("--out", out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_synth(common, out);
        if (tr->parsed())
            return cmd_train(common, manifest, embeddings, out, adaptation_override, grl_override,
                             stain_override);
        if (inf->parsed())
            return cmd_infer(common, checkpoint_path, manifest, out, tta_preset, reference_dir,
                             reference_image, infer_threshold);
        if (ev->parsed()) return cmd_eval(common, predictions, manifest, eval_threshold, out);
        if (fit->parsed()) return cmd_fit_reference(common, image, out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code_for(e);
    }
    return 1;
}
