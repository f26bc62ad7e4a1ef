#pragma once

// Peak suppression: binary mask over the N+1 tokens zeroing the patch with
// the strongest rollout attention, and the two-pass training forward that
// applies it.

#include <cstdint>
#include <vector>

#include "tpskg/rollout.hpp"
#include "tpskg/vit.hpp"

namespace tpskg {

/// Binary vector over the N+1 tokens; 0 marks a suppressed position. Bit 0
/// (class token) is always 1. Training masks carry exactly top_k zeros,
/// inference masks none.
struct SuppressionMask {
  std::vector<uint8_t> bits;

  int zero_count() const {
    int n = 0;
    for (uint8_t b : bits) n += b ? 0 : 1;
    return n;
  }

  KeyMask to_key_mask() const { return KeyMask{bits}; }
};

/// Zeroes the single largest map entry, lowest index on ties.
SuppressionMask build_mask(const PatchAttentionMap& map);

/// Extension knob: zeroes the top_k largest entries (rank ties broken by
/// lowest index). top_k = 1 is the shipped behavior.
SuppressionMask build_mask(const PatchAttentionMap& map, int top_k);

template <typename S>
struct SuppressedStepResult {
  Tensor<S> y;
  SuppressionMask mask;
  PatchAttentionMap map;
};

/// Two-pass training forward. Pass 1 runs with the all-true mask and
/// recording suspended, only to locate the peak; pass 2 runs with the
/// suppression mask on the active tape and produces the representation that
/// gets supervised. Inference uses a plain single-pass encode instead.
template <typename S>
SuppressedStepResult<S> suppressed_step(const Tensor<S>& image, EncoderParams<S>& params,
                                        const ModelConfig& cfg, int top_k = 1) {
  PatchAttentionMap map;
  {
    NoGradScope<S> no_grad;
    EncoderOutput<S> probe = encode(image, params, cfg);
    map = class_token_map(rollout(probe.attn));
  }
  SuppressionMask mask = build_mask(map, top_k);
  EncoderOutput<S> out = encode(image, params, cfg, mask.to_key_mask());
  return SuppressedStepResult<S>{out.y, std::move(mask), std::move(map)};
}

}  // namespace tpskg
