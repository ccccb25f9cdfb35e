// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "modnet/params.h"

namespace modnet {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam performing gradient *ascent*: callers pass gradients of the
/// objective being maximized.
class Adam {
 public:
  Adam(const ParamStore& store, AdamConfig config);

  void ascend(ParamStore& store, const std::vector<Tensor>& grads);

  const AdamConfig& config() const { return config_; }
  std::uint64_t steps() const { return steps_; }
  std::vector<Tensor>& first_moment() { return m_; }
  std::vector<Tensor>& second_moment() { return v_; }
  const std::vector<Tensor>& first_moment() const { return m_; }
  const std::vector<Tensor>& second_moment() const { return v_; }
  void set_steps(std::uint64_t s) { steps_ = s; }

 private:
  AdamConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t steps_ = 0;
};

}  // namespace modnet
