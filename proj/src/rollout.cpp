#include "tpskg/rollout.hpp"

#include "tpskg/common.hpp"

namespace tpskg {

std::vector<double> average_heads(const AttentionStack& attn, int layer) {
  if (layer < 0 || layer >= attn.layers)
    throw IndexError("average_heads: layer " + std::to_string(layer) + " out of range [0, " +
                     std::to_string(attn.layers) + ")");
  int t = attn.tokens;
  std::vector<double> out(static_cast<size_t>(t) * t, 0.0);
  double inv = 1.0 / attn.heads;
  for (int h = 0; h < attn.heads; ++h) {
    const double* src =
        attn.weights.data() + (static_cast<size_t>(layer) * attn.heads + h) * t * t;
    for (int i = 0; i < t * t; ++i) out[static_cast<size_t>(i)] += src[i];
  }
  for (double& v : out) v *= inv;
  return out;
}

namespace {

// rownorm(M + I) for a head-averaged layer matrix.
std::vector<double> identity_corrected(const std::vector<double>& m, int t) {
  std::vector<double> out(m);
  for (int i = 0; i < t; ++i) out[static_cast<size_t>(i) * t + i] += 1.0;
  for (int i = 0; i < t; ++i) {
    double sum = 0.0;
    for (int j = 0; j < t; ++j) sum += out[static_cast<size_t>(i) * t + j];
    double inv = 1.0 / sum;
    for (int j = 0; j < t; ++j) out[static_cast<size_t>(i) * t + j] *= inv;
  }
  return out;
}

}  // namespace

RolloutMap rollout(const AttentionStack& attn) {
  if (attn.layers < 1) throw ContractError("rollout: attention stack has no layers");
  int t = attn.tokens;
  std::vector<double> acc = identity_corrected(average_heads(attn, 0), t);
  for (int l = 1; l < attn.layers; ++l) {
    std::vector<double> layer = identity_corrected(average_heads(attn, l), t);
    std::vector<double> next(static_cast<size_t>(t) * t, 0.0);
    for (int i = 0; i < t; ++i) {
      for (int k = 0; k < t; ++k) {
        double a = layer[static_cast<size_t>(i) * t + k];
        for (int j = 0; j < t; ++j) next[static_cast<size_t>(i) * t + j] += a * acc[static_cast<size_t>(k) * t + j];
      }
    }
    acc = std::move(next);
  }
  return RolloutMap{t, attn.layers, std::move(acc)};
}

PatchAttentionMap class_token_map(const RolloutMap& map) {
  PatchAttentionMap out;
  out.values.assign(map.matrix.begin() + 1, map.matrix.begin() + map.tokens);
  return out;
}

}  // namespace tpskg
