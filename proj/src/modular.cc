// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "modnet/modular.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "modnet/error.h"
#include "modnet/noisy_topk.h"

namespace modnet {

std::size_t composition_count(std::size_t modules, std::size_t slots, std::size_t positions) {
  std::size_t n = 1;
  const std::size_t limit = std::numeric_limits<std::size_t>::max();
  for (std::size_t i = 0; i < slots * positions; ++i) {
    if (modules != 0 && n > limit / modules) return limit;
    n *= modules;
  }
  return n;
}

std::vector<Composition> enumerate_compositions(std::size_t modules, std::size_t slots,
                                                std::size_t positions, std::size_t budget) {
  const std::size_t count = composition_count(modules, slots, positions);
  if (count > budget) {
    throw BudgetError("composition space has " + std::to_string(count) +
                      " states, exceeding budget " + std::to_string(budget));
  }
  std::vector<Composition> out;
  out.reserve(count);
  Composition c(positions, slots, 0);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(c);
    // Odometer increment, last slot fastest.
    for (std::size_t d = c.modules.size(); d-- > 0;) {
      if (++c.modules[d] < static_cast<int>(modules)) break;
      c.modules[d] = 0;
    }
  }
  return out;
}

Composition uniform_composition(std::size_t modules, std::size_t slots, std::size_t positions,
                                Rng& rng) {
  Composition c(positions, slots);
  for (auto& m : c.modules) m = static_cast<int>(rng.below(modules));
  return c;
}

// ---------------------------------------------------------------------------

ModulePool ModulePool::create(ParamStore& store, const std::string& prefix, std::size_t modules,
                              std::size_t in_dim, std::size_t out_dim, ModuleKind kind,
                              Rng& rng) {
  ModulePool pool;
  pool.num_modules = modules;
  pool.in_dim = in_dim;
  pool.out_dim = out_dim;
  pool.kind = kind;
  for (std::size_t i = 0; i < modules; ++i) {
    const std::string name = prefix + ".module" + std::to_string(i);
    pool.weights.push_back(store.add_weight(name + ".w", in_dim, out_dim, rng));
    pool.biases.push_back(store.add_bias(name + ".b", out_dim));
  }
  return pool;
}

ad::Var ModulePool::apply(const BoundParams& p, std::size_t module, ad::Var x) const {
  if (module >= num_modules) {
    throw IndexError("module index " + std::to_string(module) + " outside pool of " +
                     std::to_string(num_modules));
  }
  ad::Var y = ad::add(ad::matmul(x, p[weights[module]]), p[biases[module]]);
  return kind == ModuleKind::kLinearRelu ? ad::relu(y) : y;
}

Controller Controller::create(ParamStore& store, const std::string& prefix, std::size_t slots,
                              std::size_t modules, std::size_t in_dim, Rng& rng) {
  Controller c;
  c.slots = slots;
  c.num_modules = modules;
  c.in_dim = in_dim;
  for (std::size_t k = 0; k < slots; ++k) {
    const std::string name = prefix + ".head" + std::to_string(k);
    c.weights.push_back(store.add_weight(name + ".w", in_dim, modules, rng, ParamGroup::kController));
    c.biases.push_back(store.add_bias(name + ".b", modules, ParamGroup::kController));
  }
  return c;
}

std::vector<ad::Var> Controller::logits(const BoundParams& p, ad::Var x) const {
  if (x.cols() != in_dim) {
    throw ShapeError("controller: input width " + std::to_string(x.cols()) +
                     " does not match controller input " + std::to_string(in_dim));
  }
  std::vector<ad::Var> out;
  out.reserve(slots);
  for (std::size_t k = 0; k < slots; ++k) {
    out.push_back(ad::add(ad::matmul(x, p[weights[k]]), p[biases[k]]));
  }
  return out;
}

Tensor controller_distribution(const ParamStore& store, const Controller& ctrl,
                               std::span<const double> x) {
  ad::Tape tape;
  BoundParams p(tape, store);
  if (x.size() != ctrl.in_dim) {
    throw ShapeError("controller_distribution: input length " + std::to_string(x.size()) +
                     " does not match controller input " + std::to_string(ctrl.in_dim));
  }
  ad::Var xv = tape.constant(Tensor({1, x.size()}, std::vector<double>(x.begin(), x.end())));
  Tensor out({ctrl.slots, ctrl.num_modules});
  const auto heads = ctrl.logits(p, xv);
  for (std::size_t k = 0; k < ctrl.slots; ++k) {
    const Tensor& probs = ad::row_softmax(heads[k]).value();
    std::copy(probs.storage().begin(), probs.storage().end(),
              out.storage().begin() + static_cast<std::ptrdiff_t>(k * ctrl.num_modules));
  }
  return out;
}

ad::Var combine_modules(const BoundParams& p, const ModulePool& pool, ad::Var x,
                        const std::vector<std::vector<int>>& slot_modules, Combine mode) {
  const std::size_t n = x.rows();
  if (x.cols() != pool.in_dim) {
    throw ShapeError("modular layer: input width " + std::to_string(x.cols()) +
                     " does not match module input " + std::to_string(pool.in_dim));
  }
  std::vector<ad::Var> slot_out;
  slot_out.reserve(slot_modules.size());
  std::vector<std::vector<std::size_t>> rows_of(pool.num_modules);
  for (const auto& choice : slot_modules) {
    if (choice.size() != n) throw ShapeError("modular layer: selection length mismatch");
    for (auto& r : rows_of) r.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const int m = choice[i];
      if (m < 0 || static_cast<std::size_t>(m) >= pool.num_modules) {
        throw IndexError("modular layer: module index " + std::to_string(m) +
                         " outside pool of " + std::to_string(pool.num_modules));
      }
      rows_of[static_cast<std::size_t>(m)].push_back(i);
    }
    std::optional<ad::Var> acc;
    for (std::size_t m = 0; m < pool.num_modules; ++m) {
      if (rows_of[m].empty()) continue;
      ad::Var y;
      if (rows_of[m].size() == n) {
        y = pool.apply(p, m, x);
      } else {
        y = ad::scatter_add_rows(pool.apply(p, m, ad::gather_rows(x, rows_of[m])), rows_of[m], n);
      }
      acc = acc ? ad::add(*acc, y) : y;
    }
    slot_out.push_back(*acc);
  }
  if (mode == Combine::kConcat) return ad::concat(slot_out);
  ad::Var sum = slot_out[0];
  for (std::size_t k = 1; k < slot_out.size(); ++k) sum = ad::add(sum, slot_out[k]);
  return sum;
}

ad::Var layer_forward(const BoundParams& p, const ModulePool& pool, ad::Var x,
                      std::span<const int> tuple, Combine mode) {
  std::vector<std::vector<int>> sel;
  for (int m : tuple) sel.emplace_back(x.rows(), m);
  return combine_modules(p, pool, x, sel, mode);
}

ad::Var select_from_logits(const std::vector<ad::Var>& head_logits,
                           std::vector<Composition>& comps, std::size_t position, Select mode,
                           Rng* rng) {
  const std::size_t n = head_logits[0].rows();
  const std::size_t m = head_logits[0].cols();
  if (comps.size() != n) throw ShapeError("controller: composition count mismatch");
  std::vector<Tensor> probs;
  if (mode != Select::kGiven) {
    for (const auto& h : head_logits) probs.push_back(ad::row_softmax(h).value());
  }
  if (mode == Select::kSample && rng == nullptr) throw Error("controller: sampling needs an rng");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < head_logits.size(); ++k) {
      if (mode == Select::kGiven) continue;
      const auto row = probs[k].values().subspan(i * m, m);
      std::size_t choice;
      if (mode == Select::kSample) {
        choice = rng->categorical(row);
      } else {
        choice = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      }
      comps[i].at(position, k) = static_cast<int>(choice);
    }
  }
  std::optional<ad::Var> total;
  std::vector<std::size_t> targets(n);
  for (std::size_t k = 0; k < head_logits.size(); ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      const int a = comps[i].at(position, k);
      if (a < 0 || static_cast<std::size_t>(a) >= m) {
        throw IndexError("controller: module index " + std::to_string(a) + " outside pool of " +
                         std::to_string(m));
      }
      targets[i] = static_cast<std::size_t>(a);
    }
    ad::Var lp = ad::categorical_log_prob(head_logits[k], targets);
    total = total ? ad::add(*total, lp) : lp;
  }
  return *total;
}

// ---------------------------------------------------------------------------

ModularNet::ModularNet(const NetSpec& spec, ParamStore& store, Rng& init_rng) : spec_(spec) {
  if (spec.layers == 0) throw ConfigError("architecture.layers", "must be >= 1");
  if (spec.modules == 0) throw ConfigError("architecture.modules", "must be >= 1");
  if (spec.slots == 0) throw ConfigError("architecture.slots", "must be >= 1");
  if (spec.combine == Combine::kConcat && spec.out_dim % spec.slots != 0) {
    throw ConfigError("architecture.combine",
                      "concat requires output dim divisible by slots");
  }
  if (spec.routing == Routing::kStatic) {
    if (spec.static_indices.size() != spec.slots) {
      throw ConfigError("architecture.static_indices", "length must equal slots");
    }
    for (int m : spec.static_indices) {
      if (m < 0 || static_cast<std::size_t>(m) >= spec.modules) {
        throw ConfigError("architecture.static_indices", "index " + std::to_string(m) +
                                                             " outside module pool");
      }
    }
  }
  if (spec.routing == Routing::kNoisyTopK && spec.combine != Combine::kSum) {
    throw ConfigError("architecture.combine", "noisy top-k mixes experts by weighted sum");
  }
  // Routing parameters draw from their own stream so that the module weights
  // are identical across routing kinds for one seed.
  Rng route_rng(init_rng.next_u64(), Stream::kInit);
  for (std::size_t l = 0; l < spec.layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l);
    pools_.push_back(ModulePool::create(store, prefix, spec.modules, layer_in(l), module_out(l),
                                        spec.module_kind, init_rng));
    if (spec.routing == Routing::kController) {
      controllers_.push_back(
          Controller::create(store, prefix + ".ctrl", spec.slots, spec.modules, layer_in(l), route_rng));
    } else if (spec.routing == Routing::kNoisyTopK) {
      gates_.push_back(
          NoisyTopKGate::create(store, prefix, spec.modules, layer_in(l), spec.topk, route_rng));
    }
  }
}

ModularNet::~ModularNet() = default;
ModularNet::ModularNet(ModularNet&&) noexcept = default;

const NoisyTopKGate& ModularNet::gate(std::size_t layer) const { return gates_.at(layer); }

std::size_t ModularNet::layer_in(std::size_t l) const {
  if (l == 0) return spec_.in_dim;
  const std::size_t out = module_out(l - 1);
  return spec_.combine == Combine::kConcat ? out * spec_.slots : out;
}

std::size_t ModularNet::module_out(std::size_t l) const {
  const std::size_t width = l + 1 == spec_.layers ? spec_.out_dim : spec_.hidden;
  if (spec_.combine == Combine::kConcat) {
    if (l + 1 == spec_.layers) return width / spec_.slots;
    return width;
  }
  return width;
}

Composition ModularNet::static_composition() const {
  Composition c(spec_.layers, spec_.slots);
  for (std::size_t l = 0; l < spec_.layers; ++l)
    for (std::size_t k = 0; k < spec_.slots; ++k) c.at(l, k) = spec_.static_indices[k];
  return c;
}

ModularNet::Forward ModularNet::forward(const BoundParams& p, ad::Var x,
                                        std::vector<Composition>& comps, Select mode,
                                        Rng* rng) const {
  const std::size_t n = x.rows();
  if (mode != Select::kGiven) {
    comps.assign(n, Composition(spec_.layers, spec_.slots));
  } else if (comps.size() != n) {
    throw ShapeError("modular net: " + std::to_string(comps.size()) + " compositions for " +
                     std::to_string(n) + " rows");
  }
  for (const auto& c : comps) {
    if (c.positions != spec_.layers || c.slots != spec_.slots) {
      throw ShapeError("modular net: composition shape does not match architecture");
    }
  }
  const bool has_ctrl = spec_.routing == Routing::kController;
  Forward out;
  ad::Var h = x;
  std::optional<ad::Var> lp;
  for (std::size_t l = 0; l < spec_.layers; ++l) {
    if (has_ctrl) {
      const auto heads = controllers_[l].logits(p, h);
      ad::Var layer_lp = select_from_logits(heads, comps, l, mode, rng);
      lp = lp ? ad::add(*lp, layer_lp) : layer_lp;
      std::vector<Tensor> probs;
      for (const auto& hd : heads) probs.push_back(ad::row_softmax(hd).value());
      out.probs.push_back(std::move(probs));
    } else if (mode != Select::kGiven) {
      throw Error("modular net: sampling requires controller routing");
    }
    std::vector<std::vector<int>> sel(spec_.slots, std::vector<int>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < spec_.slots; ++k) sel[k][i] = comps[i].at(l, k);
    h = combine_modules(p, pools_[l], h, sel, spec_.combine);
  }
  out.output = h;
  out.controller_log_prob = lp;
  return out;
}

ModularNet::Forward ModularNet::forward_routed(const BoundParams& p, ad::Var x, bool train,
                                               Rng* rng) const {
  Forward out;
  const std::size_t n = x.rows();
  ad::Var h = x;
  for (std::size_t l = 0; l < spec_.layers; ++l) {
    if (spec_.routing == Routing::kNoisyTopK) {
      TopKResult r = noisy_topk_forward(p, gates_[l], pools_[l], h, train, rng);
      out.probs.push_back({r.weights.value()});
      out.active.push_back(std::move(r.active));
      h = r.output;
    } else if (spec_.routing == Routing::kStatic) {
      std::vector<std::vector<int>> sel;
      for (int m : spec_.static_indices) sel.emplace_back(n, m);
      h = combine_modules(p, pools_[l], h, sel, spec_.combine);
    } else {
      throw Error("modular net: forward_routed needs static or noisy top-k routing");
    }
  }
  out.output = h;
  return out;
}

ad::Var ModularNet::head_log_likelihood(ad::Var output, const Tensor& targets,
                                        std::span<const std::size_t> labels) const {
  if (spec_.head == HeadKind::kGaussian) return ad::gaussian_log_density(output, targets);
  return ad::categorical_log_prob(output, labels);
}

}  // namespace modnet
