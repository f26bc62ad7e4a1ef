#include "tpskg/suppression.hpp"

#include <algorithm>

#include "tpskg/common.hpp"

namespace tpskg {

SuppressionMask build_mask(const PatchAttentionMap& map) { return build_mask(map, 1); }

SuppressionMask build_mask(const PatchAttentionMap& map, int top_k) {
  int n = static_cast<int>(map.values.size());
  if (n < 1) throw ContractError("build_mask: empty attention map");
  if (top_k < 1 || top_k >= n)
    throw ContractError("build_mask: top_k " + std::to_string(top_k) + " must be in [1, " +
                        std::to_string(n) + ")");
  SuppressionMask mask;
  mask.bits.assign(static_cast<size_t>(n) + 1, 1);
  std::vector<uint8_t> taken(static_cast<size_t>(n), 0);
  for (int round = 0; round < top_k; ++round) {
    int best = -1;
    for (int i = 0; i < n; ++i) {
      if (taken[static_cast<size_t>(i)]) continue;
      if (best < 0 || map.values[static_cast<size_t>(i)] > map.values[static_cast<size_t>(best)]) best = i;
    }
    taken[static_cast<size_t>(best)] = 1;
    mask.bits[static_cast<size_t>(best) + 1] = 0;
  }
  return mask;
}

}  // namespace tpskg
