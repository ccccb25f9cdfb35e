// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Modular layers: a pool of M modules, a controller with K categorical
// heads, and the stacked feed-forward network built from them.
//
// Module indices are 0-based throughout the library.

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modnet/autodiff.h"
#include "modnet/params.h"
#include "modnet/rng.h"

namespace modnet {

enum class ModuleKind { kLinearRelu, kLinear };
enum class Combine { kSum, kConcat };
enum class HeadKind { kGaussian, kCategorical };
/// How a layer decides which modules run.
enum class Routing { kController, kNoisyTopK, kStatic };
/// How compositions are obtained during a forward pass.
enum class Select { kGiven, kSample, kArgmax };

/// The latent variable: `positions` rows (layers, or timesteps for the
/// recurrent cell) of `slots` module indices each. Duplicates are allowed.
struct Composition {
  std::size_t positions = 0;
  std::size_t slots = 0;
  std::vector<int> modules;

  Composition() = default;
  Composition(std::size_t positions, std::size_t slots, int fill = 0)
      : positions(positions), slots(slots), modules(positions * slots, fill) {}

  int& at(std::size_t p, std::size_t k) { return modules[p * slots + k]; }
  int at(std::size_t p, std::size_t k) const { return modules[p * slots + k]; }
  std::span<const int> tuple(std::size_t p) const {
    return std::span<const int>(modules).subspan(p * slots, slots);
  }

  friend bool operator==(const Composition&, const Composition&) = default;
};

/// M^(slots*positions), saturating at SIZE_MAX.
std::size_t composition_count(std::size_t modules, std::size_t slots, std::size_t positions);

/// All ordered compositions in lexicographic order. Throws BudgetError when
/// the count exceeds `budget`.
std::vector<Composition> enumerate_compositions(std::size_t modules, std::size_t slots,
                                                std::size_t positions, std::size_t budget);

/// Each slot drawn uniformly from {0..M-1}.
Composition uniform_composition(std::size_t modules, std::size_t slots, std::size_t positions,
                                Rng& rng);

/// M modules with identical in/out dimensions: f_i(x) = act(x W_i + b_i).
struct ModulePool {
  std::size_t num_modules = 0;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  ModuleKind kind = ModuleKind::kLinearRelu;
  std::vector<ParamId> weights;
  std::vector<ParamId> biases;

  static ModulePool create(ParamStore& store, const std::string& prefix, std::size_t modules,
                           std::size_t in_dim, std::size_t out_dim, ModuleKind kind, Rng& rng);

  ad::Var apply(const BoundParams& p, std::size_t module, ad::Var x) const;
};

/// K independent linear+softmax heads over the layer input.
struct Controller {
  std::size_t slots = 0;
  std::size_t num_modules = 0;
  std::size_t in_dim = 0;
  std::vector<ParamId> weights;
  std::vector<ParamId> biases;

  static Controller create(ParamStore& store, const std::string& prefix, std::size_t slots,
                           std::size_t modules, std::size_t in_dim, Rng& rng);

  /// One [B,M] logit matrix per head.
  std::vector<ad::Var> logits(const BoundParams& p, ad::Var x) const;
};

/// K x M probability matrix p_k(. | x) for a single input row.
Tensor controller_distribution(const ParamStore& store, const Controller& ctrl,
                               std::span<const double> x);

/// Per-row selection: slot_modules[k][n] is the module used by row n in slot k.
/// Sum mode adds the K module outputs; concat mode joins them along the last
/// axis. Each module runs only on the rows that selected it.
ad::Var combine_modules(const BoundParams& p, const ModulePool& pool, ad::Var x,
                        const std::vector<std::vector<int>>& slot_modules, Combine mode);

/// Modular layer where every row uses the same tuple.
ad::Var layer_forward(const BoundParams& p, const ModulePool& pool, ad::Var x,
                      std::span<const int> tuple, Combine mode);

/// Chooses per-row tuples from head logits, writing them into `comps` at
/// `position`, and returns the [B,1] summed log-probability of the choices.
ad::Var select_from_logits(const std::vector<ad::Var>& head_logits,
                           std::vector<Composition>& comps, std::size_t position, Select mode,
                           Rng* rng);

/// Hyperparameters of a stacked modular network.
struct NetSpec {
  std::size_t in_dim = 2;
  std::size_t out_dim = 2;
  std::size_t hidden = 8;
  std::size_t layers = 1;
  std::size_t modules = 2;
  std::size_t slots = 1;
  Combine combine = Combine::kSum;
  ModuleKind module_kind = ModuleKind::kLinearRelu;
  HeadKind head = HeadKind::kGaussian;
  Routing routing = Routing::kController;
  std::size_t topk = 1;
  std::vector<int> static_indices;
};

class NoisyTopKGate;

/// L stacked modular layers followed by an output head. The final layer
/// emits the Gaussian mean or the categorical logits.
class ModularNet {
 public:
  ModularNet(const NetSpec& spec, ParamStore& store, Rng& init_rng);
  ~ModularNet();
  ModularNet(ModularNet&&) noexcept;

  const NetSpec& spec() const { return spec_; }
  const ModulePool& pool(std::size_t layer) const { return pools_[layer]; }
  const Controller& controller(std::size_t layer) const { return controllers_.at(layer); }
  const NoisyTopKGate& gate(std::size_t layer) const;
  Composition static_composition() const;

  struct Forward {
    ad::Var output;
    /// [B,1] log p(a | x, phi); absent for static and noisy top-k routing.
    std::optional<ad::Var> controller_log_prob;
    /// Head probabilities per layer, layers x slots tensors of [B,M].
    std::vector<std::vector<Tensor>> probs;
    /// Noisy top-k surviving experts per layer and row.
    std::vector<std::vector<std::vector<std::size_t>>> active;
  };

  /// Controller routing. In kGiven mode `comps` must hold one composition per
  /// row; otherwise it is overwritten with the sampled or argmax choices. Each
  /// controller sees the realized output of the preceding layer.
  Forward forward(const BoundParams& p, ad::Var x, std::vector<Composition>& comps,
                  Select mode, Rng* rng) const;
  /// Noisy top-k or static routing.
  Forward forward_routed(const BoundParams& p, ad::Var x, bool train, Rng* rng) const;

  /// [B,1] log p(y | output) for the configured head.
  ad::Var head_log_likelihood(ad::Var output, const Tensor& targets,
                              std::span<const std::size_t> labels) const;

 private:
  std::size_t layer_in(std::size_t l) const;
  std::size_t module_out(std::size_t l) const;

  NetSpec spec_;
  std::vector<ModulePool> pools_;
  std::vector<Controller> controllers_;
  std::vector<NoisyTopKGate> gates_;
};

}  // namespace modnet
