// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// The latent-variable model seen by trainers: a fixed dataset of N
// datapoints, each with a composition latent of `positions` x `slots`
// module indices.

#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modnet/autodiff.h"
#include "modnet/diagnostics.h"
#include "modnet/modular.h"
#include "modnet/params.h"
#include "modnet/rng.h"

namespace modnet {

enum class EvalMode { kMostLikely, kEnumerate };

struct EvalMetrics {
  std::string mode;
  std::size_t datapoints = 0;
  /// Mean negative log-likelihood per unit (datapoint or token).
  double nll = 0.0;
  /// Mean squared error over rows and output dims; NaN for categorical heads.
  double mse = std::numeric_limits<double>::quiet_NaN();
  /// exp(nll) for language models; NaN otherwise.
  double perplexity = std::numeric_limits<double>::quiet_NaN();
};

class LatentModel {
 public:
  virtual ~LatentModel() = default;

  virtual std::size_t num_datapoints() const = 0;
  virtual std::size_t num_modules() const = 0;
  /// Layers for feed-forward nets, timesteps for the recurrent cell.
  virtual std::size_t positions() const = 0;
  virtual std::size_t slots() const = 0;
  virtual Routing routing() const = 0;
  /// Likelihood units per datapoint: 1, or tokens per window.
  virtual std::size_t units_per_datapoint() const = 0;

  virtual ParamStore& params() = 0;
  virtual const ParamStore& params() const = 0;

  struct Terms {
    /// [B,1] log p(y | x, a, theta), summed over units.
    ad::Var conditional;
    /// [B,1] log p(a | x, phi); absent without a controller.
    std::optional<ad::Var> controller;
  };

  /// Controller routing. Row i evaluates datapoint idx[i]. With Select::kGiven
  /// `comps` supplies the compositions; otherwise they are chosen ancestrally
  /// and written back.
  virtual Terms forward_terms(const BoundParams& p, std::span<const std::size_t> idx,
                              std::vector<Composition>& comps, Select mode, Rng* rng) const = 0;

  /// Static or noisy top-k routing: [B,1] log-likelihood summed over units.
  virtual ad::Var routed_log_likelihood(const BoundParams& p, std::span<const std::size_t> idx,
                                        bool train, Rng* rng) const = 0;

  /// Selection probabilities on the given datapoints under deterministic
  /// (argmax or eval-mode) routing.
  virtual SelectionSnapshot snapshot(std::span<const std::size_t> idx) const = 0;

  virtual EvalMetrics evaluate(std::span<const std::size_t> idx, EvalMode mode,
                               std::size_t budget) const = 0;

  /// Human-readable context of datapoint `n` at `position`, for context dumps.
  virtual std::string context(std::size_t n, std::size_t position) const = 0;
};

/// log p(y_n | x_n, a, theta) + log p(a | x_n, phi) for one datapoint.
double joint_log_prob(const LatentModel& model, std::size_t n, const Composition& a);

/// log sum_a exp(joint_log_prob) over every ordered composition. Throws
/// BudgetError when M^(slots*positions) exceeds `budget`.
double marginal_log_likelihood_enumerate(const LatentModel& model, std::size_t n,
                                         std::size_t budget = 10000);

/// Stable log(sum(exp(v))).
double log_sum_exp(std::span<const double> v);

/// Mean conditional NLL per unit under argmax compositions, or under the
/// routed forward pass for static and noisy top-k models.
double most_likely_nll(const LatentModel& model, std::span<const std::size_t> idx);

// ---------------------------------------------------------------------------

/// Stacked modular network over an in-memory regression or classification set.
class FeedForwardModel final : public LatentModel {
 public:
  /// Gaussian head: `y` holds [N, out_dim] targets. Categorical head: `labels`.
  FeedForwardModel(const NetSpec& spec, Tensor x, Tensor y, std::vector<std::size_t> labels,
                   std::uint64_t seed);

  std::size_t num_datapoints() const override { return x_.rows(); }
  std::size_t num_modules() const override { return net_.spec().modules; }
  std::size_t positions() const override { return net_.spec().layers; }
  std::size_t slots() const override { return net_.spec().slots; }
  Routing routing() const override { return net_.spec().routing; }
  std::size_t units_per_datapoint() const override { return 1; }
  ParamStore& params() override { return store_; }
  const ParamStore& params() const override { return store_; }

  Terms forward_terms(const BoundParams& p, std::span<const std::size_t> idx,
                      std::vector<Composition>& comps, Select mode, Rng* rng) const override;
  ad::Var routed_log_likelihood(const BoundParams& p, std::span<const std::size_t> idx,
                                bool train, Rng* rng) const override;
  SelectionSnapshot snapshot(std::span<const std::size_t> idx) const override;
  EvalMetrics evaluate(std::span<const std::size_t> idx, EvalMode mode,
                       std::size_t budget) const override;
  std::string context(std::size_t n, std::size_t position) const override;

  const ModularNet& net() const { return net_; }
  const Tensor& inputs() const { return x_; }
  const Tensor& targets() const { return y_; }

 private:
  Tensor gather(const Tensor& t, std::span<const std::size_t> idx) const;
  ad::Var conditional(const BoundParams& p, ad::Var output,
                      std::span<const std::size_t> idx) const;

  ParamStore store_;
  ModularNet net_;
  Tensor x_;
  Tensor y_;
  std::vector<std::size_t> labels_;
};

}  // namespace modnet
