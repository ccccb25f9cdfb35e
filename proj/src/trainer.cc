// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "modnet/trainer.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "modnet/error.h"

namespace modnet {

namespace {

// Rows evaluated per tape during E-step scoring.
constexpr std::size_t kScoringRows = 256;

double joint_value(const LatentModel::Terms& t, std::size_t i) {
  return t.conditional.value()[i] + t.controller->value()[i];
}

void check_controller(const LatentModel& model, const char* what) {
  if (model.routing() != Routing::kController) {
    throw ConfigError("trainer.kind", std::string(what) + " needs controller routing");
  }
}

}  // namespace

AssignmentBuffer init_buffer(std::size_t n, std::size_t modules, std::size_t slots,
                             std::size_t positions, std::uint64_t seed) {
  if (n == 0) throw ConfigError("data", "assignment buffer needs at least one datapoint");
  Rng rng(seed, Stream::kBuffer);
  AssignmentBuffer b;
  b.assignments.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    b.assignments.push_back(uniform_composition(modules, slots, positions, rng));
  }
  b.joint.assign(n, std::numeric_limits<double>::quiet_NaN());
  return b;
}

EStepResult partial_e_step(const LatentModel& model, std::span<const std::size_t> idx,
                           AssignmentBuffer& buffer, std::size_t samples, Rng& rng) {
  check_controller(model, "the E-step");
  if (samples == 0) throw ConfigError("trainer.S", "must be >= 1");
  for (auto n : idx) {
    if (n >= buffer.size()) throw IndexError("E-step: datapoint index out of range");
  }
  EStepResult res;
  res.delta.resize(idx.size());
  const std::size_t per_chunk = std::max<std::size_t>(1, kScoringRows / (samples + 1));
  for (std::size_t b = 0; b < idx.size(); b += per_chunk) {
    const auto chunk = idx.subspan(b, std::min(per_chunk, idx.size() - b));
    const std::size_t c = chunk.size();

    std::vector<double> incumbent(c);
    {
      ad::Tape tape;
      BoundParams p(tape, model.params());
      std::vector<Composition> comps;
      for (auto n : chunk) comps.push_back(buffer.assignments[n]);
      const auto terms = model.forward_terms(p, chunk, comps, Select::kGiven, nullptr);
      for (std::size_t i = 0; i < c; ++i) incumbent[i] = joint_value(terms, i);
    }

    std::vector<std::size_t> rep;
    rep.reserve(c * samples);
    for (auto n : chunk) rep.insert(rep.end(), samples, n);
    ad::Tape tape;
    BoundParams p(tape, model.params());
    std::vector<Composition> comps;
    const auto terms = model.forward_terms(p, rep, comps, Select::kSample, &rng);

    for (std::size_t i = 0; i < c; ++i) {
      const std::size_t n = chunk[i];
      double best = incumbent[i];
      std::size_t best_s = samples;
      for (std::size_t s = 0; s < samples; ++s) {
        const double v = joint_value(terms, i * samples + s);
        if (!std::isfinite(v)) {
          ++res.discarded;
          continue;
        }
        // Strict comparison: ties and NaN incumbents resolve as documented.
        if (v > best || (!std::isfinite(best) && best_s == samples)) {
          best = v;
          best_s = s;
        }
      }
      if (best_s != samples && !(buffer.assignments[n] == comps[i * samples + best_s])) {
        buffer.assignments[n] = comps[i * samples + best_s];
        ++res.improved;
      }
      buffer.joint[n] = best;
      res.delta[b + i] = best - incumbent[i];
    }
  }
  return res;
}

Objective em_objective(const LatentModel& model, std::span<const std::size_t> idx,
                       const AssignmentBuffer& buffer) {
  check_controller(model, "the EM objective");
  ad::Tape tape;
  BoundParams p(tape, model.params());
  std::vector<Composition> comps;
  comps.reserve(idx.size());
  for (auto n : idx) comps.push_back(buffer.assignments.at(n));
  const auto terms = model.forward_terms(p, idx, comps, Select::kGiven, nullptr);
  const double scale = 1.0 / static_cast<double>(idx.size() * model.units_per_datapoint());
  const ad::Var obj = ad::affine(ad::sum_all(ad::add(terms.conditional, *terms.controller)), scale, 0.0);
  Objective out;
  out.value = obj.value().item();
  out.grads = p.gradients(tape.backward(obj));
  return out;
}

ReinforceEstimate reinforce_gradient(const LatentModel& model, std::span<const std::size_t> idx,
                                     std::optional<double> baseline, Rng& rng) {
  check_controller(model, "REINFORCE");
  ad::Tape tape;
  BoundParams p(tape, model.params());
  std::vector<Composition> comps;
  const auto terms = model.forward_terms(p, idx, comps, Select::kSample, &rng);
  const std::size_t b = idx.size();
  const double scale = 1.0 / static_cast<double>(b * model.units_per_datapoint());

  ReinforceEstimate out;
  const auto r = terms.conditional.value().values();
  out.rewards.assign(r.begin(), r.end());
  const ad::Var net_obj = ad::affine(ad::sum_all(terms.conditional), scale, 0.0);
  out.objective = net_obj.value().item();
  if (!baseline) {
    baseline = 0.0;
    for (double v : out.rewards) *baseline += v;
    *baseline /= static_cast<double>(b);
  }

  Tensor w({b, 1});
  for (std::size_t i = 0; i < b; ++i) w[i] = (out.rewards[i] - *baseline) * scale;
  const ad::Var surrogate = ad::sum_all(ad::mul(*terms.controller, tape.constant(std::move(w))));

  auto net_grads = p.gradients(tape.backward(net_obj));
  auto ctrl_grads = p.gradients(tape.backward(surrogate));
  const ParamStore& store = model.params();
  out.grads.resize(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    out.grads[i] = store.group(i) == ParamGroup::kController ? std::move(ctrl_grads[i])
                                                             : std::move(net_grads[i]);
  }
  return out;
}

void ReinforceState::update(double batch_mean) {
  if (!initialized) {
    ema = batch_mean;
    initialized = true;
    return;
  }
  ema = decay * ema + (1.0 - decay) * batch_mean;
}

const char* trainer_name(TrainerKind kind) {
  switch (kind) {
    case TrainerKind::kEm: return "em";
    case TrainerKind::kReinforce: return "reinforce";
    case TrainerKind::kNoisyTopK: return "noisy-topk";
    case TrainerKind::kStatic: return "static";
  }
  return "?";
}

std::vector<std::size_t> sample_batch(std::size_t n, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  if (batch >= n) return all;
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < batch; ++i) std::swap(all[i], all[i + rng.below(n - i)]);
  all.resize(batch);
  return all;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(LatentModel& model, const TrainerConfig& config, std::uint64_t seed)
    : model_(model),
      config_(config),
      adam_(model.params(), config.adam),
      estep_rng_(seed, Stream::kEStep),
      trainer_rng_(seed, Stream::kTrainer) {
  if (config_.m_batch == 0) throw ConfigError("trainer.m_batch", "must be >= 1");
  if (config_.m_steps == 0) throw ConfigError("trainer.m_steps", "must be >= 1");
  if (config_.samples_e == 0) throw ConfigError("trainer.S", "must be >= 1");
  if (config_.reinforce_samples == 0) throw ConfigError("trainer.samples", "must be >= 1");
  if (!(config_.ema_decay > 0.0 && config_.ema_decay < 1.0)) {
    throw ConfigError("trainer.ema_decay", "must lie in (0, 1)");
  }
  if (config_.e_batch == 0) config_.e_batch = config_.m_batch;
  const Routing need = [&] {
    switch (config_.kind) {
      case TrainerKind::kNoisyTopK: return Routing::kNoisyTopK;
      case TrainerKind::kStatic: return Routing::kStatic;
      default: return Routing::kController;
    }
  }();
  if (model.routing() != need) {
    throw ConfigError("trainer.kind", std::string(trainer_name(config_.kind)) +
                                          " does not match the model's routing");
  }
  reinforce_.decay = config_.ema_decay;
  if (config_.kind == TrainerKind::kEm) {
    buffer_ = init_buffer(model.num_datapoints(), model.num_modules(), model.slots(),
                          model.positions(), seed);
  }
}

bool Trainer::apply(double objective, std::vector<Tensor>& grads) {
  if (!std::isfinite(objective) || !all_finite(grads)) {
    if (++consecutive_skips_ >= config_.max_skips) {
      throw NumericError("training aborted after " + std::to_string(consecutive_skips_) +
                         " consecutive non-finite steps at iteration " +
                         std::to_string(iteration_));
    }
    return false;
  }
  consecutive_skips_ = 0;
  if (config_.clip_norm > 0.0) {
    const double norm = global_norm(grads);
    if (norm > config_.clip_norm) scale_in_place(grads, config_.clip_norm / norm);
  }
  adam_.ascend(model_.params(), grads);
  return true;
}

StepReport Trainer::step() {
  StepReport r;
  const std::size_t n = model_.num_datapoints();
  switch (config_.kind) {
    case TrainerKind::kEm: {
      if (iteration_ % config_.m_steps == 0) {
        const auto e_idx = sample_batch(n, config_.e_batch, estep_rng_);
        const EStepResult e = partial_e_step(model_, e_idx, buffer_, config_.samples_e, estep_rng_);
        improved_fraction_ = static_cast<double>(e.improved) / static_cast<double>(e_idx.size());
        r.e_step = true;
        r.discarded = e.discarded;
        if (on_e_step) on_e_step(e_idx, e);
      }
      const auto idx = sample_batch(n, config_.m_batch, trainer_rng_);
      Objective obj = em_objective(model_, idx, buffer_);
      r.objective = obj.value;
      r.skipped = !apply(obj.value, obj.grads);
      break;
    }
    case TrainerKind::kReinforce: {
      const auto base = sample_batch(n, config_.m_batch, trainer_rng_);
      std::vector<std::size_t> idx;
      idx.reserve(base.size() * config_.reinforce_samples);
      for (auto i : base) idx.insert(idx.end(), config_.reinforce_samples, i);
      const std::optional<double> baseline =
          reinforce_.initialized ? std::optional<double>(reinforce_.ema) : std::nullopt;
      ReinforceEstimate est = reinforce_gradient(model_, idx, baseline, trainer_rng_);
      double mean = 0.0;
      for (double v : est.rewards) mean += v;
      mean /= static_cast<double>(est.rewards.size());
      r.objective = est.objective;
      r.skipped = !apply(est.objective, est.grads);
      if (std::isfinite(mean)) reinforce_.update(mean);
      break;
    }
    case TrainerKind::kNoisyTopK:
    case TrainerKind::kStatic: {
      const auto idx = sample_batch(n, config_.m_batch, trainer_rng_);
      ad::Tape tape;
      BoundParams p(tape, model_.params());
      const double scale = 1.0 / static_cast<double>(idx.size() * model_.units_per_datapoint());
      const ad::Var ll = model_.routed_log_likelihood(p, idx, true, &trainer_rng_);
      const ad::Var obj = ad::affine(ad::sum_all(ll), scale, 0.0);
      r.objective = obj.value().item();
      auto grads = p.gradients(tape.backward(obj));
      r.skipped = !apply(r.objective, grads);
      break;
    }
  }
  ++iteration_;
  last_objective_ = r.objective;
  r.iteration = iteration_;
  r.improved_fraction = improved_fraction_;
  return r;
}

TrainerSnapshot Trainer::save() const {
  TrainerSnapshot s;
  s.iteration = iteration_;
  s.adam_m = adam_.first_moment();
  s.adam_v = adam_.second_moment();
  s.adam_steps = adam_.steps();
  s.buffer = buffer_;
  s.reinforce = reinforce_;
  s.estep_counter = estep_rng_.counter();
  s.trainer_counter = trainer_rng_.counter();
  s.improved_fraction = improved_fraction_;
  s.consecutive_skips = consecutive_skips_;
  s.last_objective = last_objective_;
  return s;
}

void Trainer::restore(const TrainerSnapshot& s) {
  const auto& params = model_.params().values();
  auto check = [&](const std::vector<Tensor>& v, const char* what) {
    if (v.size() != params.size()) throw Error(std::string("checkpoint: ") + what + " count mismatch");
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i].shape() != params[i].shape()) {
        throw Error(std::string("checkpoint: ") + what + " shape mismatch for " +
                    model_.params().name(i));
      }
    }
  };
  check(s.adam_m, "first moment");
  check(s.adam_v, "second moment");
  if (config_.kind == TrainerKind::kEm && s.buffer.size() != model_.num_datapoints()) {
    throw Error("checkpoint: assignment buffer size mismatch");
  }
  iteration_ = s.iteration;
  adam_.first_moment() = s.adam_m;
  adam_.second_moment() = s.adam_v;
  adam_.set_steps(s.adam_steps);
  buffer_ = s.buffer;
  reinforce_ = s.reinforce;
  reinforce_.decay = config_.ema_decay;
  estep_rng_.set_counter(s.estep_counter);
  trainer_rng_.set_counter(s.trainer_counter);
  improved_fraction_ = s.improved_fraction;
  consecutive_skips_ = s.consecutive_skips;
  last_objective_ = s.last_objective;
}

}  // namespace modnet
