// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Modular GRU: a gated recurrent cell whose candidate state is a modular
// layer with one module selection per timestep.
//
//   z_t = sigmoid([h_{t-1}, x_t] W_z)
//   r_t = sigmoid([h_{t-1}, x_t] W_r)
//   c_t = relu(sum_k f_{a_k}([r_t * h_{t-1}, x_t]))
//   h_t = (1 - z_t) * h_{t-1} + z_t * c_t
//
// The controller reads [h_{t-1}, x_t]. Hidden state starts at zero in every
// window and is projected to vocabulary logits by h_t U + c.

#pragma once

#include <cstddef>
#include <vector>

#include "modnet/data.h"
#include "modnet/model.h"
#include "modnet/noisy_topk.h"

namespace modnet {

struct GruSpec {
  std::size_t vocab = 8;
  std::size_t embedding = 32;
  std::size_t hidden = 8;
  std::size_t modules = 2;
  std::size_t slots = 1;
  Combine combine = Combine::kSum;
  ModuleKind module_kind = ModuleKind::kLinear;
  Routing routing = Routing::kController;
  std::size_t topk = 1;
  std::vector<int> static_indices;
};

class ModularGruCell {
 public:
  ModularGruCell(const GruSpec& spec, ParamStore& store, Rng& init_rng);

  const GruSpec& spec() const { return spec_; }
  const ModulePool& pool() const { return pool_; }
  const Controller& controller() const { return controller_; }
  const NoisyTopKGate& gate() const { return gate_; }

  struct Step {
    ad::Var h;
    ad::Var z;
    ad::Var r;
    ad::Var candidate;
  };

  /// [h_{t-1}, x_t], the input of the gates and the controller.
  ad::Var gate_input(ad::Var h_prev, ad::Var x) const;
  std::vector<ad::Var> controller_logits(const BoundParams& p, ad::Var gate_in) const;

  /// One step with per-row selections: slot_modules[k][n].
  Step step(const BoundParams& p, ad::Var h_prev, ad::Var x, ad::Var gate_in,
            const std::vector<std::vector<int>>& slot_modules) const;
  /// One step under noisy top-k or static routing.
  Step step_routed(const BoundParams& p, ad::Var h_prev, ad::Var x, ad::Var gate_in, bool train,
                   Rng* rng, std::vector<Tensor>* weights = nullptr,
                   std::vector<std::vector<std::size_t>>* active = nullptr) const;

  ad::Var embed(const BoundParams& p, std::span<const std::size_t> ids) const;
  ad::Var output_logits(const BoundParams& p, ad::Var h) const;

  ParamId embedding_id() const { return embedding_; }
  ParamId wz_id() const { return wz_; }
  ParamId wr_id() const { return wr_; }

 private:
  Step finish(ad::Var h_prev, ad::Var z, ad::Var r, ad::Var pre) const;
  ad::Var candidate_input(const BoundParams& p, ad::Var h_prev, ad::Var x, ad::Var gate_in,
                          ad::Var* z, ad::Var* r) const;

  GruSpec spec_;
  ParamId embedding_ = 0;
  ParamId wz_ = 0;
  ParamId wr_ = 0;
  ParamId out_w_ = 0;
  ParamId out_b_ = 0;
  ModulePool pool_;
  Controller controller_;
  NoisyTopKGate gate_;
};

/// Modular GRU language model over the fixed windows of a corpus.
class SequenceModel final : public LatentModel {
 public:
  SequenceModel(const GruSpec& spec, Corpus corpus, std::uint64_t seed);

  std::size_t num_datapoints() const override { return corpus_.num_windows(); }
  std::size_t num_modules() const override { return cell_.spec().modules; }
  std::size_t positions() const override { return corpus_.unroll; }
  std::size_t slots() const override { return cell_.spec().slots; }
  Routing routing() const override { return cell_.spec().routing; }
  std::size_t units_per_datapoint() const override { return corpus_.unroll; }
  ParamStore& params() override { return store_; }
  const ParamStore& params() const override { return store_; }

  Terms forward_terms(const BoundParams& p, std::span<const std::size_t> idx,
                      std::vector<Composition>& comps, Select mode, Rng* rng) const override;
  ad::Var routed_log_likelihood(const BoundParams& p, std::span<const std::size_t> idx,
                                bool train, Rng* rng) const override;
  /// Rows are (window, timestep) pairs, window-major, with a single position.
  SelectionSnapshot snapshot(std::span<const std::size_t> idx) const override;
  EvalMetrics evaluate(std::span<const std::size_t> idx, EvalMode mode,
                       std::size_t budget) const override;
  std::string context(std::size_t n, std::size_t position) const override;

  const ModularGruCell& cell() const { return cell_; }
  const Corpus& corpus() const { return corpus_; }

 private:
  std::vector<std::size_t> column(std::span<const std::size_t> idx, std::size_t offset) const;

  ParamStore store_;
  ModularGruCell cell_;
  Corpus corpus_;
};

/// Mean per-token NLL of windows `idx` under the given composition sequences.
double sequence_nll(const SequenceModel& model, std::span<const std::size_t> idx,
                    const std::vector<Composition>& comps);

struct SampledSequences {
  std::vector<Composition> comps;
  /// sum_t log p(a_t | h_{t-1}, x_t, phi) per window.
  std::vector<double> controller_log_prob;
};

/// Ancestral sampling of per-timestep compositions.
SampledSequences sample_composition_sequence(const SequenceModel& model,
                                             std::span<const std::size_t> idx, Rng& rng);

}  // namespace modnet
