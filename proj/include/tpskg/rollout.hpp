#pragma once

// Attention rollout: head-averaged per-layer attention, identity-corrected
// and row-normalized, accumulated into a token-to-input flow map.
// Everything here runs outside the differentiation tape.

#include <vector>

#include "tpskg/vit.hpp"

namespace tpskg {

/// Dense square matrix of attention flow, rows = tokens at the rollout layer,
/// columns = input tokens.
struct RolloutMap {
  int tokens = 0;
  int layer_index = 0;  // 1-based layer the rollout was carried to
  std::vector<double> matrix;

  double at(int r, int c) const { return matrix[static_cast<size_t>(r) * tokens + c]; }
};

/// Class-token attention over the N patch positions (class-token column
/// dropped).
struct PatchAttentionMap {
  std::vector<double> values;
};

/// Arithmetic mean over heads of one layer's post-softmax attention.
std::vector<double> average_heads(const AttentionStack& attn, int layer);

/// Adds I to each head-averaged layer matrix, renormalizes rows to sum 1,
/// and left-multiplies layer by layer up to the final layer.
RolloutMap rollout(const AttentionStack& attn);

/// Row 0 of the rollout with element 0 removed.
PatchAttentionMap class_token_map(const RolloutMap& map);

}  // namespace tpskg
