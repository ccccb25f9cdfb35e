// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "modnet/optim.h"

#include <cmath>

#include "modnet/error.h"

namespace modnet {

Adam::Adam(const ParamStore& store, AdamConfig config) : config_(config) {
  for (const auto& v : store.values()) {
    m_.emplace_back(v.shape());
    v_.emplace_back(v.shape());
  }
}

void Adam::ascend(ParamStore& store, const std::vector<Tensor>& grads) {
  if (grads.size() != store.size()) throw ShapeError("adam: gradient count mismatch");
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t p = 0; p < grads.size(); ++p) {
    auto& w = store.value(p).storage();
    auto& m = m_[p].storage();
    auto& v = v_[p].storage();
    const auto& g = grads[p].storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      w[i] += config_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.epsilon);
    }
  }
}

}  // namespace modnet
