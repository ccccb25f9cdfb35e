// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "modnet/params.h"

#include <cmath>

#include "modnet/error.h"

namespace modnet {

ParamId ParamStore::add(std::string name, Tensor value, ParamGroup group) {
  values_.push_back(std::move(value));
  names_.push_back(std::move(name));
  groups_.push_back(group);
  return values_.size() - 1;
}

ParamId ParamStore::add_weight(std::string name, std::size_t fan_in, std::size_t fan_out,
                               Rng& rng, ParamGroup group) {
  Tensor w({fan_in, fan_out});
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : w.storage()) v = rng.uniform(-bound, bound);
  return add(std::move(name), std::move(w), group);
}

ParamId ParamStore::add_bias(std::string name, std::size_t n, ParamGroup group) {
  return add(std::move(name), Tensor({1, n}), group);
}

std::size_t ParamStore::total_numel() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.numel();
  return n;
}

ParamId ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  throw IndexError("no parameter named '" + name + "'");
}

BoundParams::BoundParams(ad::Tape& tape, const ParamStore& store) : tape_(&tape) {
  leaves_.reserve(store.size());
  for (const auto& v : store.values()) leaves_.push_back(tape.leaf(v));
}

BoundParams::BoundParams(ad::Tape& tape, std::span<const ad::Var> leaves)
    : tape_(&tape), leaves_(leaves.begin(), leaves.end()) {}

std::vector<Tensor> BoundParams::gradients(const ad::Gradients& g) const {
  std::vector<Tensor> out;
  out.reserve(leaves_.size());
  for (const auto& leaf : leaves_) out.push_back(g[leaf]);
  return out;
}

double global_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g.storage()) s += v * v;
  return std::sqrt(s);
}

bool all_finite(const std::vector<Tensor>& grads) {
  for (const auto& g : grads) {
    if (!g.all_finite()) return false;
  }
  return true;
}

void scale_in_place(std::vector<Tensor>& grads, double s) {
  for (auto& g : grads)
    for (auto& v : g.storage()) v *= s;
}

}  // namespace modnet
