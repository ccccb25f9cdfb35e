// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Trainers for latent-composition models.
//
// One iteration is one gradient step. The EM trainer runs a partial E-step
// before every `m_steps`-th iteration, so each E-step is followed by
// `m_steps` M-step updates on freshly sampled minibatches.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modnet/model.h"
#include "modnet/optim.h"

namespace modnet {

/// Viterbi variational state: the best-known composition per datapoint.
struct AssignmentBuffer {
  std::vector<Composition> assignments;
  /// Joint log-prob of each assignment at its last evaluation; stale once
  /// parameters move and recomputed by every E-step.
  std::vector<double> joint;

  std::size_t size() const { return assignments.size(); }
};

/// Every slot drawn uniformly; deterministic in `seed`.
AssignmentBuffer init_buffer(std::size_t n, std::size_t modules, std::size_t slots,
                             std::size_t positions, std::uint64_t seed);

struct EStepResult {
  /// joint(new a*) - joint(old a*) under current parameters, per batch entry.
  std::vector<double> delta;
  /// Entries whose composition changed.
  std::size_t improved = 0;
  /// Sampled compositions dropped for a non-finite joint log-prob.
  std::size_t discarded = 0;
};

/// Replaces a*_n by the best of S controller samples when one strictly beats
/// the incumbent. Entries outside `idx` are untouched.
EStepResult partial_e_step(const LatentModel& model, std::span<const std::size_t> idx,
                           AssignmentBuffer& buffer, std::size_t samples, Rng& rng);

/// Gradients of (1/|B|) sum_n [log p(y|x,a*) + log p(a*|x)] per unit, with
/// the objective value.
struct Objective {
  double value = 0.0;
  std::vector<Tensor> grads;
};
Objective em_objective(const LatentModel& model, std::span<const std::size_t> idx,
                       const AssignmentBuffer& buffer);

/// Score-function estimate for one batch of sampled compositions. Network
/// parameters get the gradient of the mean conditional log-likelihood;
/// controller parameters get mean (R - baseline) * grad log p(a|x) with R the
/// conditional log-likelihood of the datapoint. Without a baseline the batch
/// mean reward is used.
struct ReinforceEstimate {
  double objective = 0.0;
  std::vector<Tensor> grads;
  /// Per-sample reward R.
  std::vector<double> rewards;
};
ReinforceEstimate reinforce_gradient(const LatentModel& model, std::span<const std::size_t> idx,
                                     std::optional<double> baseline, Rng& rng);

/// Exponential-moving-average control variate.
struct ReinforceState {
  double ema = 0.0;
  double decay = 0.99;
  bool initialized = false;

  /// ema <- decay * ema + (1 - decay) * batch_mean. The first call seeds the
  /// average with the batch mean, which also serves as that step's baseline.
  void update(double batch_mean);
};

enum class TrainerKind { kEm, kReinforce, kNoisyTopK, kStatic };

const char* trainer_name(TrainerKind kind);

struct TrainerConfig {
  TrainerKind kind = TrainerKind::kEm;
  std::size_t samples_e = 10;      // S
  std::size_t m_steps = 15;
  std::size_t e_batch = 0;         // 0: same as m_batch
  std::size_t m_batch = 128;
  AdamConfig adam;
  std::uint64_t max_iterations = 50000;
  std::size_t reinforce_samples = 1;
  double ema_decay = 0.99;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
  std::size_t max_skips = 10;
};

/// Minibatch of distinct indices; every index when batch >= n.
std::vector<std::size_t> sample_batch(std::size_t n, std::size_t batch, Rng& rng);

struct StepReport {
  std::uint64_t iteration = 0;
  double objective = 0.0;
  bool e_step = false;
  /// Fraction of the most recent E-step batch whose assignment changed.
  double improved_fraction = 0.0;
  bool skipped = false;
  std::size_t discarded = 0;
};

/// Mutable trainer state beyond the model parameters, for checkpoints.
struct TrainerSnapshot {
  std::uint64_t iteration = 0;
  std::vector<Tensor> adam_m;
  std::vector<Tensor> adam_v;
  std::uint64_t adam_steps = 0;
  AssignmentBuffer buffer;
  ReinforceState reinforce;
  std::uint64_t estep_counter = 0;
  std::uint64_t trainer_counter = 0;
  double improved_fraction = 0.0;
  std::uint64_t consecutive_skips = 0;
  /// Objective of the most recent step; NaN before the first.
  double last_objective = std::numeric_limits<double>::quiet_NaN();
};

class Trainer {
 public:
  Trainer(LatentModel& model, const TrainerConfig& config, std::uint64_t seed);

  /// One iteration. Throws NumericError after `max_skips` consecutive
  /// non-finite steps.
  StepReport step();

  std::uint64_t iteration() const { return iteration_; }
  const TrainerConfig& config() const { return config_; }
  const AssignmentBuffer& buffer() const { return buffer_; }
  const ReinforceState& reinforce_state() const { return reinforce_; }
  double last_objective() const { return last_objective_; }

  TrainerSnapshot save() const;
  void restore(const TrainerSnapshot& s);

  /// Called after every partial E-step with the batch and its result.
  std::function<void(std::span<const std::size_t>, const EStepResult&)> on_e_step;

 private:
  /// Counts a non-finite objective or gradient as a skip; otherwise clips
  /// and takes the optimizer step.
  bool apply(double objective, std::vector<Tensor>& grads);

  LatentModel& model_;
  TrainerConfig config_;
  Adam adam_;
  AssignmentBuffer buffer_;
  ReinforceState reinforce_;
  Rng estep_rng_;
  Rng trainer_rng_;
  std::uint64_t iteration_ = 0;
  double improved_fraction_ = 0.0;
  std::uint64_t consecutive_skips_ = 0;
  double last_objective_ = std::numeric_limits<double>::quiet_NaN();
};

}  // namespace modnet
