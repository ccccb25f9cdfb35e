// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "modnet/autodiff.h"
#include "modnet/rng.h"
#include "modnet/tensor.h"

namespace modnet {

/// Which part of the model a parameter belongs to. REINFORCE routes
/// different gradient estimates to each group.
enum class ParamGroup { kNetwork, kController };

using ParamId = std::size_t;

/// Owns every trainable tensor of a model, in registration order.
class ParamStore {
 public:
  ParamId add(std::string name, Tensor value, ParamGroup group = ParamGroup::kNetwork);
  /// Weight matrix [fan_in, fan_out] with entries uniform in +-1/sqrt(fan_in).
  ParamId add_weight(std::string name, std::size_t fan_in, std::size_t fan_out, Rng& rng,
                     ParamGroup group = ParamGroup::kNetwork);
  ParamId add_bias(std::string name, std::size_t n, ParamGroup group = ParamGroup::kNetwork);

  std::size_t size() const { return values_.size(); }
  Tensor& value(ParamId id) { return values_[id]; }
  const Tensor& value(ParamId id) const { return values_[id]; }
  const std::string& name(ParamId id) const { return names_[id]; }
  ParamGroup group(ParamId id) const { return groups_[id]; }
  const std::vector<Tensor>& values() const { return values_; }
  std::vector<Tensor>& values() { return values_; }
  std::size_t total_numel() const;
  ParamId find(const std::string& name) const;

 private:
  std::vector<Tensor> values_;
  std::vector<std::string> names_;
  std::vector<ParamGroup> groups_;
};

/// Parameters placed on a tape as leaves, indexable by ParamId.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ParamStore& store);
  /// Wraps leaves already on `tape`, one per parameter in store order; used
  /// by finite-difference checks that own the leaves.
  BoundParams(ad::Tape& tape, std::span<const ad::Var> leaves);
  ad::Var operator[](ParamId id) const { return leaves_[id]; }
  ad::Tape& tape() const { return *tape_; }
  /// Gradient tensor per parameter, zeros for unreached ones.
  std::vector<Tensor> gradients(const ad::Gradients& g) const;

 private:
  ad::Tape* tape_;
  std::vector<ad::Var> leaves_;
};

double global_norm(const std::vector<Tensor>& grads);
bool all_finite(const std::vector<Tensor>& grads);
void scale_in_place(std::vector<Tensor>& grads, double s);

}  // namespace modnet
