#ifndef MSHIFT_BACKBONE_HPP
#define MSHIFT_BACKBONE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "mshift/autodiff.hpp"
#include "mshift/domain_adapt.hpp"
#include "mshift/image.hpp"

namespace mshift::backbone {

struct ViTConfig {
    int image_side = 64;
    int patch_size = 8;
    int embed_dim = 64;
    int num_layers = 4;
    int num_heads = 4;
    int mlp_ratio = 4;
    int num_classes = 2;
    int prompt_len = 4;
    int lora_rank = 4;

    int tokens_per_side() const { return image_side / patch_size; }
    int num_tokens() const { return tokens_per_side() * tokens_per_side(); }
    int patch_dim() const { return 3 * patch_size * patch_size; }
};

enum class Adaptation { Vpt, Lora, HeadOnly };
/// Image models run the transformer; feature models apply the heads to
/// externally computed embedding vectors.
enum class InputKind { Image, Feature };

Adaptation adaptation_from_string(const std::string& s);
std::string to_string(Adaptation a);

struct EncoderLayer {
    diff::Tensor ln1_g, ln1_b;
    diff::Tensor w_qkv, b_qkv;    // fused projection, embed -> 3*embed
    diff::Tensor lora_a, lora_b;  // qkv adapter, effective weight W + B*A
    diff::Tensor w_out, b_out;
    diff::Tensor ln2_g, ln2_b;
    diff::Tensor w_fc1, b_fc1, w_fc2, b_fc2;
};

struct VptViT {
    ViTConfig cfg;
    Adaptation mode = Adaptation::Vpt;
    InputKind input = InputKind::Image;
    int num_domains = 2;

    diff::Tensor patch_w, patch_b;  // patch projection
    diff::Tensor pos_embed;         // [tokens, embed]
    diff::Tensor cls_token;         // [1, embed]
    std::vector<diff::Tensor> prompts;  // per layer, [prompt_len, embed]
    std::vector<EncoderLayer> layers;
    diff::Tensor final_ln_g, final_ln_b;
    diff::Tensor head_w, head_b;  // classification head
    domain::DomainHead domain_head;
};

struct Param {
    std::string name;
    diff::Tensor tensor;
    bool trainable = false;
};

VptViT make_model(const ViTConfig& cfg, Adaptation mode, int num_domains, std::uint64_t seed);
/// Heads-only model over precomputed feature vectors of the given width.
VptViT make_feature_model(int feature_dim, int num_classes, int num_domains, std::uint64_t seed);

/// Parameters in fixed declaration order with the freeze policy applied:
///   vpt:       prompts, class token, heads trainable; backbone frozen
///   lora:      lora factors and heads trainable; base weights frozen
///   head_only: heads trainable only
/// requires_grad on each tensor mirrors the trainable flag.
std::vector<Param> parameters(const VptViT& m);
void apply_freeze_policy(VptViT& m);

std::uint64_t frozen_checksum(const VptViT& m);
std::uint64_t full_checksum(const VptViT& m);
std::uint64_t fnv1a(const double* data, Eigen::Index n, std::uint64_t h = 1469598103934665603ULL);

/// Raw patch projection before the positional embedding, one row per patch.
/// Pixel values are mapped to [-1, 1].
diff::Tensor patch_projection(const VptViT& m, const RgbPatch& p);

/// Patch tokens with positions added (the transformer input).
diff::Tensor embed_patch(diff::Tape* tape, const VptViT& m, const RgbPatch& p);

struct ForwardTrace {
    std::vector<int> block_input_len;
    std::vector<int> block_output_len;
};

/// Class-token embedding after the final layer norm, shape [1, embed].
/// Under VPT the per-layer prompt rows are inserted before each block and
/// dropped after it, so the sequence leaving every block has the same
/// length that entered the first one.
diff::Tensor backbone_features(diff::Tape* tape, const VptViT& m, const RgbPatch& p,
                               ForwardTrace* trace = nullptr);

diff::Tensor class_logits(diff::Tape* tape, const VptViT& m, const diff::Tensor& features);

struct ForwardOut {
    diff::Tensor logits;
    diff::Tensor shared;
};
ForwardOut forward(diff::Tape* tape, const VptViT& m, const RgbPatch& p,
                   ForwardTrace* trace = nullptr);

}  // namespace mshift::backbone

#endif
