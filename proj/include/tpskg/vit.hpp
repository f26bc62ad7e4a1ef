#pragma once

// Vision-transformer encoder: patchify, content-masked token embedding,
// pre-norm MSA+MLP stack with key masking, and per-layer attention recording.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tpskg/common.hpp"
#include "tpskg/tensor.hpp"

namespace tpskg {

constexpr double kLayerNormEps = 1e-6;
constexpr double kMaskedLogitBias = -1e9;
constexpr double kInitStd = 0.02;

struct ModelConfig {
  int image_h = 32;
  int image_w = 32;
  int channels = 1;
  int patch = 8;
  int embed_dim = 64;
  int layers = 4;
  int heads = 4;
  double mlp_ratio = 4.0;
  int classes = 8;
  uint64_t seed = 1;

  int grid_h() const { return image_h / patch; }
  int grid_w() const { return image_w / patch; }
  int patches() const { return grid_h() * grid_w(); }      // N
  int tokens() const { return patches() + 1; }             // N + 1
  int patch_dim() const { return patch * patch * channels; }
  int head_dim() const { return embed_dim / heads; }
  int mlp_dim() const { return static_cast<int>(embed_dim * mlp_ratio); }

  void validate() const {
    if (image_h <= 0 || image_w <= 0) throw ConfigError("image_h/image_w must be positive");
    if (channels <= 0) throw ConfigError("channels must be positive");
    if (patch <= 0 || image_h % patch != 0 || image_w % patch != 0)
      throw ConfigError("patch must divide image_h and image_w");
    if (embed_dim <= 0) throw ConfigError("embed_dim must be positive");
    if (heads <= 0 || embed_dim % heads != 0) throw ConfigError("heads must divide embed_dim");
    if (layers <= 0) throw ConfigError("layers must be positive");
    if (mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be positive");
    if (classes <= 1) throw ConfigError("classes must be at least 2");
  }
};

/// Attendability of the N+1 token positions. Position 0 (class token) is
/// always attendable.
struct KeyMask {
  std::vector<uint8_t> attendable;

  static KeyMask all_true(int tokens) { return KeyMask{std::vector<uint8_t>(static_cast<size_t>(tokens), 1)}; }

  int size() const { return static_cast<int>(attendable.size()); }
  bool all() const {
    for (uint8_t b : attendable)
      if (!b) return false;
    return true;
  }
  void validate() const {
    if (attendable.empty() || !attendable[0]) throw ContractError("KeyMask: class-token position must stay attendable");
  }
};

/// Post-softmax attention weights for every layer and head, recorded during a
/// forward pass. Stored in double regardless of model precision; rollout and
/// mask selection run outside the differentiation tape.
struct AttentionStack {
  int layers = 0;
  int heads = 0;
  int tokens = 0;
  std::vector<double> weights;  // [layer][head][query][key]

  double at(int l, int h, int q, int k) const {
    return weights[static_cast<size_t>(((l * heads + h) * tokens + q) * tokens + k)];
  }
};

template <typename S>
struct EncoderBlock {
  Tensor<S> norm1_gain, norm1_bias;
  Tensor<S> query_w, query_b, key_w, key_b, value_w, value_b, out_w, out_b;
  Tensor<S> norm2_gain, norm2_bias;
  Tensor<S> mlp_fc1_w, mlp_fc1_b, mlp_fc2_w, mlp_fc2_b;
};

template <typename S>
struct EncoderParams {
  Tensor<S> patch_proj;   // (P*P*C, D)
  Tensor<S> class_token;  // (D)
  Tensor<S> pos_embed;    // (N+1, D)
  std::vector<EncoderBlock<S>> blocks;
  Tensor<S> final_norm_gain, final_norm_bias;

  // Embeddings start at truncated normal std 0.02; linear projections at
  // fan-in-scaled truncated normal (std 1/sqrt(fan_in)). A flat 0.02 on the
  // projections shrinks input signal by ~std*sqrt(D) per layer, leaving the
  // class-token representation nearly input-independent and untrainable with
  // plain SGD at this scale.
  static EncoderParams init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    auto trunc = [&rng](Shape shape, double stddev) {
      Tensor<S> t = Tensor<S>::zeros(std::move(shape));
      for (S& v : t.mutable_data()) v = static_cast<S>(rng.truncated_normal(stddev));
      t.set_requires_grad(true);
      return t;
    };
    auto proj = [&](int64_t fan_in, int64_t fan_out) {
      return trunc({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    };
    auto ones = [](int64_t d) { return Tensor<S>::full({d}, S(1)).set_requires_grad(true); };
    auto zeros_param = [](Shape shape) { return Tensor<S>::zeros(std::move(shape)).set_requires_grad(true); };

    int64_t d = cfg.embed_dim, pd = cfg.patch_dim(), t = cfg.tokens(), md = cfg.mlp_dim();
    EncoderParams p;
    p.patch_proj = proj(pd, d);
    p.class_token = trunc({d}, kInitStd);
    p.pos_embed = trunc({t, d}, kInitStd);
    p.blocks.reserve(static_cast<size_t>(cfg.layers));
    for (int l = 0; l < cfg.layers; ++l) {
      EncoderBlock<S> b;
      b.norm1_gain = ones(d);
      b.norm1_bias = zeros_param({d});
      b.query_w = proj(d, d);
      b.query_b = zeros_param({d});
      b.key_w = proj(d, d);
      b.key_b = zeros_param({d});
      b.value_w = proj(d, d);
      b.value_b = zeros_param({d});
      b.out_w = proj(d, d);
      b.out_b = zeros_param({d});
      b.norm2_gain = ones(d);
      b.norm2_bias = zeros_param({d});
      b.mlp_fc1_w = proj(d, md);
      b.mlp_fc1_b = zeros_param({md});
      b.mlp_fc2_w = proj(md, d);
      b.mlp_fc2_b = zeros_param({d});
      p.blocks.push_back(std::move(b));
    }
    p.final_norm_gain = ones(d);
    p.final_norm_bias = zeros_param({d});
    return p;
  }

  void append_named(const std::string& prefix, std::vector<std::pair<std::string, Tensor<S>>>& out) {
    out.emplace_back(prefix + "patch_proj", patch_proj);
    out.emplace_back(prefix + "class_token", class_token);
    out.emplace_back(prefix + "pos_embed", pos_embed);
    for (size_t l = 0; l < blocks.size(); ++l) {
      std::string bp = prefix + "block" + std::to_string(l) + ".";
      EncoderBlock<S>& b = blocks[l];
      out.emplace_back(bp + "norm1_gain", b.norm1_gain);
      out.emplace_back(bp + "norm1_bias", b.norm1_bias);
      out.emplace_back(bp + "query_w", b.query_w);
      out.emplace_back(bp + "query_b", b.query_b);
      out.emplace_back(bp + "key_w", b.key_w);
      out.emplace_back(bp + "key_b", b.key_b);
      out.emplace_back(bp + "value_w", b.value_w);
      out.emplace_back(bp + "value_b", b.value_b);
      out.emplace_back(bp + "out_w", b.out_w);
      out.emplace_back(bp + "out_b", b.out_b);
      out.emplace_back(bp + "norm2_gain", b.norm2_gain);
      out.emplace_back(bp + "norm2_bias", b.norm2_bias);
      out.emplace_back(bp + "mlp_fc1_w", b.mlp_fc1_w);
      out.emplace_back(bp + "mlp_fc1_b", b.mlp_fc1_b);
      out.emplace_back(bp + "mlp_fc2_w", b.mlp_fc2_w);
      out.emplace_back(bp + "mlp_fc2_b", b.mlp_fc2_b);
    }
    out.emplace_back(prefix + "final_norm_gain", final_norm_gain);
    out.emplace_back(prefix + "final_norm_bias", final_norm_bias);
  }
};

// ---------------------------------------------------------------------------
// patchify / unpatchify: non-overlapping P x P patches, row-major over the
// patch grid, each flattened row-major over (y, x, channel). Pure data
// movement; images never carry gradients.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> patchify(const Tensor<S>& image, const ModelConfig& cfg) {
  const Shape want{cfg.image_h, cfg.image_w, cfg.channels};
  if (image.shape() != want)
    throw ConfigError("patchify: image shape " + shape_str(image.shape()) + " does not match configured " +
                      shape_str(want));
  int p = cfg.patch, gw = cfg.grid_w(), c = cfg.channels, w = cfg.image_w;
  Tensor<S> out = Tensor<S>::zeros({cfg.patches(), cfg.patch_dim()});
  const S* src = image.data().data();
  S* dst = out.mutable_data().data();
  for (int pr = 0; pr < cfg.grid_h(); ++pr) {
    for (int pc = 0; pc < gw; ++pc) {
      S* drow = dst + static_cast<int64_t>(pr * gw + pc) * cfg.patch_dim();
      for (int py = 0; py < p; ++py) {
        for (int px = 0; px < p; ++px) {
          for (int ch = 0; ch < c; ++ch) {
            drow[(py * p + px) * c + ch] = src[((pr * p + py) * w + (pc * p + px)) * c + ch];
          }
        }
      }
    }
  }
  return out;
}

template <typename S>
Tensor<S> unpatchify(const Tensor<S>& patches, const ModelConfig& cfg) {
  const Shape want{cfg.patches(), cfg.patch_dim()};
  if (patches.shape() != want)
    throw ConfigError("unpatchify: shape " + shape_str(patches.shape()) + " does not match configured " +
                      shape_str(want));
  int p = cfg.patch, gw = cfg.grid_w(), c = cfg.channels, w = cfg.image_w;
  Tensor<S> out = Tensor<S>::zeros({cfg.image_h, cfg.image_w, cfg.channels});
  const S* src = patches.data().data();
  S* dst = out.mutable_data().data();
  for (int pr = 0; pr < cfg.grid_h(); ++pr) {
    for (int pc = 0; pc < gw; ++pc) {
      const S* srow = src + static_cast<int64_t>(pr * gw + pc) * cfg.patch_dim();
      for (int py = 0; py < p; ++py) {
        for (int px = 0; px < p; ++px) {
          for (int ch = 0; ch < c; ++ch) {
            dst[((pr * p + py) * w + (pc * p + px)) * c + ch] = srow[(py * p + px) * c + ch];
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// embed: class token + masked patch content + positional embedding.
// Masked patches contribute zero content but keep their positional row.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> embed(const Tensor<S>& patches, EncoderParams<S>& params, const ModelConfig& cfg,
                const KeyMask& mask) {
  if (mask.size() != cfg.tokens())
    throw ShapeError("embed: mask length " + std::to_string(mask.size()) + " != token count " +
                     std::to_string(cfg.tokens()));
  mask.validate();
  Tensor<S> content = matmul(patches, params.patch_proj);  // (N, D)
  // Content gate: row i multiplied by mask bit i+1. Constant, carries no grad.
  Tensor<S> gate = Tensor<S>::zeros({cfg.patches(), cfg.embed_dim});
  S* pg = gate.mutable_data().data();
  for (int i = 0; i < cfg.patches(); ++i) {
    S bit = mask.attendable[static_cast<size_t>(i + 1)] ? S(1) : S(0);
    for (int j = 0; j < cfg.embed_dim; ++j) pg[static_cast<int64_t>(i) * cfg.embed_dim + j] = bit;
  }
  content = mul(content, gate);
  Tensor<S> cls = reshape(params.class_token, {1, cfg.embed_dim});
  Tensor<S> tokens = concat_rows(cls, content);
  return add(tokens, params.pos_embed);
}

// ---------------------------------------------------------------------------
// forward: L pre-norm MSA+MLP layers. Attention logits toward masked key
// positions get kMaskedLogitBias before the softmax; the post-softmax weights
// of every layer and head are recorded into the returned AttentionStack.
// ---------------------------------------------------------------------------

template <typename S>
struct EncoderOutput {
  Tensor<S> y;  // (D), final-layernormed class token
  AttentionStack attn;
};

template <typename S>
EncoderOutput<S> forward(const Tensor<S>& z0, EncoderParams<S>& params, const ModelConfig& cfg,
                         const KeyMask& mask) {
  if (z0.shape() != Shape{cfg.tokens(), cfg.embed_dim})
    throw ShapeError("forward: token sequence " + shape_str(z0.shape()) + " does not match config");
  mask.validate();
  int64_t t = cfg.tokens(), d = cfg.embed_dim, h = cfg.heads, hd = cfg.head_dim();

  // Additive key-mask bias, broadcast over heads and query rows.
  Tensor<S> mask_bias = Tensor<S>::zeros({t});
  for (int64_t j = 0; j < t; ++j)
    mask_bias.mutable_data()[static_cast<size_t>(j)] = mask.attendable[static_cast<size_t>(j)] ? S(0) : S(kMaskedLogitBias);

  AttentionStack stack;
  stack.layers = cfg.layers;
  stack.heads = cfg.heads;
  stack.tokens = cfg.tokens();
  stack.weights.resize(static_cast<size_t>(cfg.layers) * h * t * t);

  S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
  Tensor<S> z = z0;
  for (int l = 0; l < cfg.layers; ++l) {
    EncoderBlock<S>& b = params.blocks[static_cast<size_t>(l)];
    Tensor<S> x = layernorm(z, b.norm1_gain, b.norm1_bias, S(kLayerNormEps));
    Tensor<S> q = add(matmul(x, b.query_w), b.query_b);
    Tensor<S> k = add(matmul(x, b.key_w), b.key_b);
    Tensor<S> v = add(matmul(x, b.value_w), b.value_b);
    Tensor<S> qh = permute(reshape(q, {t, h, hd}), {1, 0, 2});  // (h, T, hd)
    Tensor<S> kt = permute(reshape(k, {t, h, hd}), {1, 2, 0});  // (h, hd, T)
    Tensor<S> vh = permute(reshape(v, {t, h, hd}), {1, 0, 2});
    Tensor<S> logits = scale(matmul(qh, kt), inv_sqrt_hd);      // (h, T, T)
    logits = add(logits, mask_bias);
    Tensor<S> attn = softmax(logits, 2);
    {
      const S* pa = attn.data().data();
      double* pw = stack.weights.data() + static_cast<size_t>(l) * h * t * t;
      for (int64_t i = 0; i < h * t * t; ++i) pw[i] = static_cast<double>(pa[i]);
    }
    Tensor<S> mixed = matmul(attn, vh);                          // (h, T, hd)
    Tensor<S> merged = reshape(permute(mixed, {1, 0, 2}), {t, d});
    Tensor<S> proj = add(matmul(merged, b.out_w), b.out_b);
    z = add(z, proj);

    Tensor<S> x2 = layernorm(z, b.norm2_gain, b.norm2_bias, S(kLayerNormEps));
    Tensor<S> hidden = gelu(add(matmul(x2, b.mlp_fc1_w), b.mlp_fc1_b));
    Tensor<S> mlp_out = add(matmul(hidden, b.mlp_fc2_w), b.mlp_fc2_b);
    z = add(z, mlp_out);
  }
  Tensor<S> y = layernorm(row(z, 0), params.final_norm_gain, params.final_norm_bias, S(kLayerNormEps));
  return EncoderOutput<S>{y, std::move(stack)};
}

template <typename S>
EncoderOutput<S> forward(const Tensor<S>& z0, EncoderParams<S>& params, const ModelConfig& cfg) {
  return forward(z0, params, cfg, KeyMask::all_true(cfg.tokens()));
}

/// Image -> representation, the composition patchify + embed + forward. This
/// is the unit the cost accounting brackets: every matmul inside contributes
/// to macs::encoder_total.
template <typename S>
EncoderOutput<S> encode(const Tensor<S>& image, EncoderParams<S>& params, const ModelConfig& cfg,
                        const KeyMask& mask) {
  uint64_t before = macs::forward_total;
  Tensor<S> patches = patchify(image, cfg);
  Tensor<S> z0 = embed(patches, params, cfg, mask);
  EncoderOutput<S> out = forward(z0, params, cfg, mask);
  macs::encoder_total += macs::forward_total - before;
  return out;
}

template <typename S>
EncoderOutput<S> encode(const Tensor<S>& image, EncoderParams<S>& params, const ModelConfig& cfg) {
  return encode(image, params, cfg, KeyMask::all_true(cfg.tokens()));
}

}  // namespace tpskg
