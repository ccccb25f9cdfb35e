// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "modnet/modular.h"

namespace modnet {

/// Mixture-of-experts gate: clean logits x Wg + bg, perturbed in training by
/// standard normal noise scaled by softplus(x Wn + bn). All but the k largest
/// perturbed logits are masked before the softmax.
class NoisyTopKGate {
 public:
  std::size_t num_modules = 0;
  std::size_t in_dim = 0;
  std::size_t k = 1;
  ParamId gate_w = 0;
  ParamId gate_b = 0;
  ParamId noise_w = 0;
  ParamId noise_b = 0;

  static NoisyTopKGate create(ParamStore& store, const std::string& prefix,
                              std::size_t modules, std::size_t in_dim, std::size_t k, Rng& rng);
};

struct TopKResult {
  ad::Var output;
  /// [B,M] renormalized gate weights, zero outside the active set.
  ad::Var weights;
  /// Surviving experts per row, in descending logit order.
  std::vector<std::vector<std::size_t>> active;
};

/// Weighted sum of the surviving experts. Only active experts are evaluated,
/// so inactive ones receive no gradient. Eval mode (train == false) uses no
/// noise and is deterministic; train mode requires `rng`. The gate reads
/// `gate_input` when given and `x` otherwise.
TopKResult noisy_topk_forward(const BoundParams& p, const NoisyTopKGate& gate,
                              const ModulePool& pool, ad::Var x, bool train, Rng* rng,
                              std::optional<ad::Var> gate_input = std::nullopt);

}  // namespace modnet
