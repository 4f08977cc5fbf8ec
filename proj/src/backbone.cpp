#include "mshift/backbone.hpp"

#include <cmath>
#include <cstring>

#include "mshift/errors.hpp"

namespace mshift::backbone {

using diff::Tape;
using diff::Tensor;

namespace {

void validate(const ViTConfig& c, InputKind input) {
    if (input == InputKind::Feature) {
        if (c.embed_dim < 1 || c.num_classes < 2)
            throw ConfigError("model: feature model needs embed_dim >= 1 and num_classes >= 2");
        return;
    }
    if (c.image_side < 1 || c.patch_size < 1 || c.image_side % c.patch_size != 0)
        throw ConfigError("model: image_side must be a positive multiple of patch_size");
    if (c.embed_dim < 1 || c.num_heads < 1 || c.embed_dim % c.num_heads != 0)
        throw ConfigError("model: embed_dim must be a positive multiple of num_heads");
    if (c.num_layers < 1 || c.mlp_ratio < 1 || c.num_classes < 2)
        throw ConfigError("model: bad num_layers/mlp_ratio/num_classes");
    if (c.prompt_len < 0 || c.lora_rank < 0)
        throw ConfigError("model: prompt_len and lora_rank must be nonnegative");
}

}  // namespace

Adaptation adaptation_from_string(const std::string& s) {
    if (s == "vpt") return Adaptation::Vpt;
    if (s == "lora") return Adaptation::Lora;
    if (s == "head_only") return Adaptation::HeadOnly;
    throw ConfigError("adaptation must be vpt, lora or head_only, got \"" + s + "\"");
}

std::string to_string(Adaptation a) {
    switch (a) {
        case Adaptation::Vpt: return "vpt";
        case Adaptation::Lora: return "lora";
        case Adaptation::HeadOnly: return "head_only";
    }
    return "?";
}

VptViT make_model(const ViTConfig& cfg, Adaptation mode, int num_domains, std::uint64_t seed) {
    validate(cfg, InputKind::Image);
    if (mode == Adaptation::Vpt && cfg.prompt_len < 1)
        throw ConfigError("model: vpt adaptation needs prompt_len >= 1");
    if (mode == Adaptation::Lora && cfg.lora_rank < 1)
        throw ConfigError("model: lora adaptation needs lora_rank >= 1");
    if (num_domains < 1) throw ConfigError("model: num_domains must be >= 1");

    Rng rng(seed);
    VptViT m;
    m.cfg = cfg;
    m.mode = mode;
    m.input = InputKind::Image;
    m.num_domains = num_domains;

    const int d = cfg.embed_dim;
    m.patch_w = Tensor::normal({cfg.patch_dim(), d}, rng, 0.0, 0.02);
    m.patch_b = Tensor({d});
    m.pos_embed = Tensor::normal({cfg.num_tokens(), d}, rng, 0.0, 0.02);
    m.cls_token = Tensor::normal({1, d}, rng, 0.0, 0.02);

    const double prompt_bound = 0.5 / std::sqrt(static_cast<double>(d));
    for (int l = 0; l < cfg.num_layers; ++l)
        m.prompts.push_back(cfg.prompt_len > 0
                                ? Tensor::uniform({cfg.prompt_len, d}, rng, -prompt_bound,
                                                  prompt_bound)
                                : Tensor());

    for (int l = 0; l < cfg.num_layers; ++l) {
        EncoderLayer layer;
        layer.ln1_g = Tensor::full({d}, 1.0);
        layer.ln1_b = Tensor({d});
        layer.w_qkv = Tensor::normal({d, 3 * d}, rng, 0.0, 0.02);
        layer.b_qkv = Tensor({3 * d});
        if (cfg.lora_rank > 0) {
            layer.lora_a = Tensor::normal({cfg.lora_rank, 3 * d}, rng, 0.0, 0.02);
            layer.lora_b = Tensor({d, cfg.lora_rank});  // zero init: adapter starts as identity
        }
        layer.w_out = Tensor::normal({d, d}, rng, 0.0, 0.02);
        layer.b_out = Tensor({d});
        layer.ln2_g = Tensor::full({d}, 1.0);
        layer.ln2_b = Tensor({d});
        layer.w_fc1 = Tensor::normal({d, cfg.mlp_ratio * d}, rng, 0.0, 0.02);
        layer.b_fc1 = Tensor({cfg.mlp_ratio * d});
        layer.w_fc2 = Tensor::normal({cfg.mlp_ratio * d, d}, rng, 0.0, 0.02);
        layer.b_fc2 = Tensor({d});
        m.layers.push_back(std::move(layer));
    }

    m.final_ln_g = Tensor::full({d}, 1.0);
    m.final_ln_b = Tensor({d});
    m.head_w = Tensor::normal({d, cfg.num_classes}, rng, 0.0, 0.02);
    m.head_b = Tensor({cfg.num_classes});
    m.domain_head = domain::make_domain_head(d, 64, num_domains, rng);

    apply_freeze_policy(m);
    return m;
}

VptViT make_feature_model(int feature_dim, int num_classes, int num_domains, std::uint64_t seed) {
    Rng rng(seed);
    VptViT m;
    m.cfg = ViTConfig{};
    m.cfg.embed_dim = feature_dim;
    m.cfg.num_classes = num_classes;
    m.cfg.num_layers = 0;
    m.cfg.prompt_len = 0;
    m.cfg.lora_rank = 0;
    m.cfg.image_side = 0;
    m.mode = Adaptation::HeadOnly;
    m.input = InputKind::Feature;
    m.num_domains = num_domains;
    validate(m.cfg, InputKind::Feature);

    m.head_w = Tensor::normal({feature_dim, num_classes}, rng, 0.0, 0.02);
    m.head_b = Tensor({num_classes});
    m.domain_head = domain::make_domain_head(feature_dim, 64, num_domains, rng);
    apply_freeze_policy(m);
    return m;
}

std::vector<Param> parameters(const VptViT& m) {
    std::vector<Param> out;
    const bool vpt = m.mode == Adaptation::Vpt;
    const bool lora = m.mode == Adaptation::Lora;
    auto push = [&out](const std::string& name, const Tensor& t, bool trainable) {
        if (t.defined()) out.push_back({name, t, trainable});
    };

    push("patch_w", m.patch_w, false);
    push("patch_b", m.patch_b, false);
    push("pos_embed", m.pos_embed, false);
    // the class token is declared learnable; it adapts together with prompts
    push("cls_token", m.cls_token, vpt);
    for (std::size_t l = 0; l < m.prompts.size(); ++l)
        push("prompt_" + std::to_string(l), m.prompts[l], vpt);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        const EncoderLayer& e = m.layers[l];
        push(p + "ln1_g", e.ln1_g, false);
        push(p + "ln1_b", e.ln1_b, false);
        push(p + "w_qkv", e.w_qkv, false);
        push(p + "b_qkv", e.b_qkv, false);
        push(p + "lora_a", e.lora_a, lora);
        push(p + "lora_b", e.lora_b, lora);
        push(p + "w_out", e.w_out, false);
        push(p + "b_out", e.b_out, false);
        push(p + "ln2_g", e.ln2_g, false);
        push(p + "ln2_b", e.ln2_b, false);
        push(p + "w_fc1", e.w_fc1, false);
        push(p + "b_fc1", e.b_fc1, false);
        push(p + "w_fc2", e.w_fc2, false);
        push(p + "b_fc2", e.b_fc2, false);
    }
    push("final_ln_g", m.final_ln_g, false);
    push("final_ln_b", m.final_ln_b, false);
    push("head_w", m.head_w, true);
    push("head_b", m.head_b, true);
    push("domain.w1", m.domain_head.w1, true);
    push("domain.b1", m.domain_head.b1, true);
    push("domain.w2", m.domain_head.w2, true);
    push("domain.b2", m.domain_head.b2, true);
    return out;
}

void apply_freeze_policy(VptViT& m) {
    for (auto& p : parameters(m)) p.tensor.set_requires_grad(p.trainable);
}

std::uint64_t fnv1a(const double* data, Eigen::Index n, std::uint64_t h) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(data);
    const std::size_t len = static_cast<std::size_t>(n) * sizeof(double);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    return h;
}

namespace {
std::uint64_t checksum_filtered(const VptViT& m, bool frozen_only) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : parameters(m)) {
        if (frozen_only && p.trainable) continue;
        h = fnv1a(p.tensor.array().data(), p.tensor.size(), h);
    }
    return h;
}
}  // namespace

std::uint64_t frozen_checksum(const VptViT& m) { return checksum_filtered(m, true); }
std::uint64_t full_checksum(const VptViT& m) { return checksum_filtered(m, false); }

namespace {

Tensor patch_matrix(const ViTConfig& cfg, const RgbPatch& p) {
    if (p.width != cfg.image_side || p.height != cfg.image_side)
        throw ShapeError("patch_embed: image " + std::to_string(p.width) + "x" +
                         std::to_string(p.height) + " does not match image_side " +
                         std::to_string(cfg.image_side));
    const int side = cfg.tokens_per_side();
    const int ps = cfg.patch_size;
    Tensor x(diff::Shape{cfg.num_tokens(), cfg.patch_dim()});
    Eigen::Index at = 0;
    for (int ti = 0; ti < side; ++ti) {
        for (int tj = 0; tj < side; ++tj) {
            for (int py = 0; py < ps; ++py) {
                for (int px = 0; px < ps; ++px) {
                    for (int ch = 0; ch < 3; ++ch) {
                        const double v = p.at(ti * ps + py, tj * ps + px, ch);
                        x[at++] = v / 127.5 - 1.0;
                    }
                }
            }
        }
    }
    return x;
}

// One pre-norm encoder block with multi-head self-attention.
Tensor encoder_block(Tape* tape, const VptViT& m, const EncoderLayer& e, const Tensor& x) {
    const int d = m.cfg.embed_dim;
    const int heads = m.cfg.num_heads;
    const int dh = d / heads;

    Tensor h = diff::layer_norm(tape, x, e.ln1_g, e.ln1_b);
    Tensor qkv = diff::affine(tape, h, e.w_qkv, e.b_qkv);
    if (m.mode == Adaptation::Lora && m.cfg.lora_rank > 0) {
        // adapted projection x(W + B A) = xW + (xB)A
        Tensor delta = diff::matmul(tape, diff::matmul(tape, h, e.lora_b), e.lora_a);
        qkv = diff::add(tape, qkv, delta);
    }
    Tensor q = diff::slice_cols(tape, qkv, 0, d);
    Tensor k = diff::slice_cols(tape, qkv, d, d);
    Tensor v = diff::slice_cols(tape, qkv, 2 * d, d);

    std::vector<Tensor> head_outs;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int hd = 0; hd < heads; ++hd) {
        Tensor qh = diff::slice_cols(tape, q, hd * dh, dh);
        Tensor kh = diff::slice_cols(tape, k, hd * dh, dh);
        Tensor vh = diff::slice_cols(tape, v, hd * dh, dh);
        Tensor scores = diff::scale(tape, diff::matmul(tape, qh, diff::transpose(tape, kh)),
                                    inv_sqrt);
        Tensor attn = diff::softmax(tape, scores);
        head_outs.push_back(diff::matmul(tape, attn, vh));
    }
    Tensor merged = diff::concat_cols(tape, head_outs);
    Tensor attn_out = diff::affine(tape, merged, e.w_out, e.b_out);
    Tensor res1 = diff::add(tape, x, attn_out);

    Tensor h2 = diff::layer_norm(tape, res1, e.ln2_g, e.ln2_b);
    Tensor mlp = diff::affine(tape, h2, e.w_fc1, e.b_fc1);
    mlp = diff::gelu(tape, mlp);
    mlp = diff::affine(tape, mlp, e.w_fc2, e.b_fc2);
    return diff::add(tape, res1, mlp);
}

}  // namespace

Tensor patch_projection(const VptViT& m, const RgbPatch& p) {
    return diff::affine(nullptr, patch_matrix(m.cfg, p), m.patch_w, m.patch_b);
}

Tensor embed_patch(Tape* tape, const VptViT& m, const RgbPatch& p) {
    Tensor tokens = diff::affine(tape, patch_matrix(m.cfg, p), m.patch_w, m.patch_b);
    return diff::add(tape, tokens, m.pos_embed);
}

Tensor backbone_features(Tape* tape, const VptViT& m, const RgbPatch& p, ForwardTrace* trace) {
    if (m.input != InputKind::Image)
        throw ConfigError("model: feature-input model cannot process images");
    const int t = m.cfg.num_tokens();
    const bool use_prompts = m.mode == Adaptation::Vpt && m.cfg.prompt_len > 0;

    Tensor tokens = embed_patch(tape, m, p);
    std::vector<Tensor> start = {m.cls_token, tokens};
    Tensor seq = diff::concat_rows(tape, start);  // [1+T, D]

    for (int l = 0; l < m.cfg.num_layers; ++l) {
        if (use_prompts) {
            std::vector<Tensor> with_prompts = {diff::slice_rows(tape, seq, 0, 1),
                                                m.prompts[static_cast<std::size_t>(l)],
                                                diff::slice_rows(tape, seq, 1, t)};
            seq = diff::concat_rows(tape, with_prompts);
        }
        if (trace) trace->block_input_len.push_back(static_cast<int>(seq.rows()));
        seq = encoder_block(tape, m, m.layers[static_cast<std::size_t>(l)], seq);
        if (use_prompts) {
            // drop the prompt rows: [cls; P_l; patches] -> [cls; patches]
            std::vector<Tensor> kept = {diff::slice_rows(tape, seq, 0, 1),
                                        diff::slice_rows(tape, seq, 1 + m.cfg.prompt_len, t)};
            seq = diff::concat_rows(tape, kept);
        }
        if (trace) trace->block_output_len.push_back(static_cast<int>(seq.rows()));
    }
    Tensor normed = diff::layer_norm(tape, seq, m.final_ln_g, m.final_ln_b);
    return diff::slice_rows(tape, normed, 0, 1);
}

Tensor class_logits(Tape* tape, const VptViT& m, const Tensor& features) {
    return diff::affine(tape, features, m.head_w, m.head_b);
}

ForwardOut forward(Tape* tape, const VptViT& m, const RgbPatch& p, ForwardTrace* trace) {
    ForwardOut out;
    out.shared = backbone_features(tape, m, p, trace);
    out.logits = class_logits(tape, m, out.shared);
    return out;
}

}  // namespace mshift::backbone
