// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "modnet/model.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "modnet/error.h"

namespace modnet {

double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

double joint_log_prob(const LatentModel& model, std::size_t n, const Composition& a) {
  if (model.routing() != Routing::kController) {
    throw Error("joint_log_prob: model has no controller");
  }
  ad::Tape tape;
  BoundParams p(tape, model.params());
  std::vector<Composition> comps{a};
  const std::size_t idx[1] = {n};
  const auto terms = model.forward_terms(p, idx, comps, Select::kGiven, nullptr);
  const double v = terms.conditional.value().item() + terms.controller->value().item();
  if (!std::isfinite(v)) {
    throw NumericError("joint_log_prob: non-finite value for datapoint " + std::to_string(n));
  }
  return v;
}

double marginal_log_likelihood_enumerate(const LatentModel& model, std::size_t n,
                                         std::size_t budget) {
  if (model.routing() != Routing::kController) {
    throw Error("marginal_log_likelihood_enumerate: model has no controller");
  }
  auto comps = enumerate_compositions(model.num_modules(), model.slots(), model.positions(), budget);
  // One batched pass: every composition scored against datapoint n.
  std::vector<std::size_t> idx(comps.size(), n);
  ad::Tape tape;
  BoundParams p(tape, model.params());
  const auto terms = model.forward_terms(p, idx, comps, Select::kGiven, nullptr);
  std::vector<double> joint(comps.size());
  for (std::size_t i = 0; i < comps.size(); ++i) {
    joint[i] = terms.conditional.value()[i] + (*terms.controller).value()[i];
  }
  return log_sum_exp(joint);
}

double most_likely_nll(const LatentModel& model, std::span<const std::size_t> idx) {
  ad::Tape tape;
  BoundParams p(tape, model.params());
  double total = 0.0;
  if (model.routing() == Routing::kController) {
    std::vector<Composition> comps;
    const auto terms = model.forward_terms(p, idx, comps, Select::kArgmax, nullptr);
    for (double v : terms.conditional.value().values()) total -= v;
  } else {
    for (double v : model.routed_log_likelihood(p, idx, false, nullptr).value().values()) total -= v;
  }
  return total / static_cast<double>(idx.size() * model.units_per_datapoint());
}

// ---------------------------------------------------------------------------

namespace {

ModularNet make_net(const NetSpec& spec, ParamStore& store, std::uint64_t seed) {
  Rng init(seed, Stream::kInit);
  return ModularNet(spec, store, init);
}

}  // namespace

FeedForwardModel::FeedForwardModel(const NetSpec& spec, Tensor x, Tensor y,
                                   std::vector<std::size_t> labels, std::uint64_t seed)
    : net_(make_net(spec, store_, seed)),
      x_(std::move(x)),
      y_(std::move(y)),
      labels_(std::move(labels)) {
  if (x_.rank() != 2 || x_.cols() != spec.in_dim) {
    throw ShapeError("feed-forward model: inputs " + shape_str(x_.shape()) +
                     " do not match input dim " + std::to_string(spec.in_dim));
  }
  if (spec.head == HeadKind::kGaussian) {
    if (y_.rank() != 2 || y_.rows() != x_.rows() || y_.cols() != spec.out_dim) {
      throw ShapeError("feed-forward model: targets " + shape_str(y_.shape()) +
                       " do not match " + std::to_string(x_.rows()) + " rows of dim " +
                       std::to_string(spec.out_dim));
    }
  } else {
    if (labels_.size() != x_.rows()) throw ShapeError("feed-forward model: label count mismatch");
    for (auto c : labels_) {
      if (c >= spec.out_dim) throw IndexError("feed-forward model: label outside class range");
    }
  }
}

Tensor FeedForwardModel::gather(const Tensor& t, std::span<const std::size_t> idx) const {
  const std::size_t c = t.cols();
  Tensor out({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= t.rows()) throw IndexError("datapoint index out of range");
    std::copy_n(t.storage().begin() + static_cast<std::ptrdiff_t>(idx[i] * c), c,
                out.storage().begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return out;
}

ad::Var FeedForwardModel::conditional(const BoundParams& p, ad::Var output,
                                      std::span<const std::size_t> idx) const {
  (void)p;
  if (net_.spec().head == HeadKind::kGaussian) {
    return net_.head_log_likelihood(output, gather(y_, idx), {});
  }
  std::vector<std::size_t> lab(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) lab[i] = labels_.at(idx[i]);
  return net_.head_log_likelihood(output, Tensor(), lab);
}

LatentModel::Terms FeedForwardModel::forward_terms(const BoundParams& p,
                                                   std::span<const std::size_t> idx,
                                                   std::vector<Composition>& comps,
                                                   Select mode, Rng* rng) const {
  ad::Var x = p.tape().constant(gather(x_, idx));
  auto fwd = net_.forward(p, x, comps, mode, rng);
  return Terms{conditional(p, fwd.output, idx), fwd.controller_log_prob};
}

ad::Var FeedForwardModel::routed_log_likelihood(const BoundParams& p,
                                                std::span<const std::size_t> idx, bool train,
                                                Rng* rng) const {
  ad::Var x = p.tape().constant(gather(x_, idx));
  auto fwd = net_.forward_routed(p, x, train, rng);
  return conditional(p, fwd.output, idx);
}

SelectionSnapshot FeedForwardModel::snapshot(std::span<const std::size_t> idx) const {
  const auto& spec = net_.spec();
  SelectionSnapshot s(idx.size(), spec.layers, spec.slots, spec.modules);
  ad::Tape tape;
  BoundParams p(tape, store_);
  ad::Var x = tape.constant(gather(x_, idx));
  if (spec.routing == Routing::kController) {
    std::vector<Composition> comps;
    const auto fwd = net_.forward(p, x, comps, Select::kArgmax, nullptr);
    for (std::size_t n = 0; n < idx.size(); ++n)
      for (std::size_t l = 0; l < spec.layers; ++l)
        for (std::size_t k = 0; k < spec.slots; ++k) {
          const auto row = fwd.probs[l][k].values().subspan(n * spec.modules, spec.modules);
          std::copy(row.begin(), row.end(), s.dist(n, l, k).begin());
          s.choice(n, l, k) = comps[n].at(l, k);
        }
  } else if (spec.routing == Routing::kNoisyTopK) {
    const auto fwd = net_.forward_routed(p, x, false, nullptr);
    for (std::size_t n = 0; n < idx.size(); ++n)
      for (std::size_t l = 0; l < spec.layers; ++l) {
        const auto row = fwd.probs[l][0].values().subspan(n * spec.modules, spec.modules);
        for (std::size_t k = 0; k < spec.slots; ++k) {
          std::copy(row.begin(), row.end(), s.dist(n, l, k).begin());
          s.choice(n, l, k) = static_cast<int>(fwd.active[l][n][0]);
        }
      }
  } else {
    for (std::size_t n = 0; n < idx.size(); ++n)
      for (std::size_t l = 0; l < spec.layers; ++l)
        for (std::size_t k = 0; k < spec.slots; ++k) {
          const int m = spec.static_indices[k];
          s.dist(n, l, k)[static_cast<std::size_t>(m)] = 1.0;
          s.choice(n, l, k) = m;
        }
  }
  return s;
}

EvalMetrics FeedForwardModel::evaluate(std::span<const std::size_t> idx, EvalMode mode,
                                       std::size_t budget) const {
  if (idx.empty()) throw Error("evaluate: empty datapoint set");
  EvalMetrics m;
  m.datapoints = idx.size();
  const auto& spec = net_.spec();
  if (mode == EvalMode::kEnumerate) {
    if (spec.routing != Routing::kController) {
      throw ConfigError("mode", "enumerate mode needs a controller-routed model");
    }
    m.mode = "enumerate-marginal";
    double total = 0.0;
    for (auto n : idx) total -= marginal_log_likelihood_enumerate(*this, n, budget);
    m.nll = total / static_cast<double>(idx.size());
    return m;
  }
  m.mode = "most-likely-composition";
  ad::Tape tape;
  BoundParams p(tape, store_);
  ad::Var x = tape.constant(gather(x_, idx));
  ModularNet::Forward fwd;
  if (spec.routing == Routing::kController) {
    std::vector<Composition> comps;
    fwd = net_.forward(p, x, comps, Select::kArgmax, nullptr);
  } else {
    fwd = net_.forward_routed(p, x, false, nullptr);
  }
  const ad::Var ll = conditional(p, fwd.output, idx);
  double total = 0.0;
  for (double v : ll.value().values()) total -= v;
  m.nll = total / static_cast<double>(idx.size());
  if (spec.head == HeadKind::kGaussian) {
    const Tensor y = gather(y_, idx);
    const Tensor& yhat = fwd.output.value();
    double se = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) se += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    m.mse = se / static_cast<double>(y.numel());
  }
  return m;
}

std::string FeedForwardModel::context(std::size_t n, std::size_t position) const {
  std::ostringstream os;
  os << "datapoint " << n << " layer " << position << " x=[";
  for (std::size_t j = 0; j < x_.cols(); ++j) os << (j ? "," : "") << x_.at(n, j);
  os << ']';
  return os.str();
}

}  // namespace modnet
