// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "modnet/noisy_topk.h"

#include "modnet/error.h"

namespace modnet {

NoisyTopKGate NoisyTopKGate::create(ParamStore& store, const std::string& prefix,
                                    std::size_t modules, std::size_t in_dim, std::size_t k,
                                    Rng& rng) {
  if (k == 0 || k > modules) {
    throw ConfigError("architecture.topk", "k=" + std::to_string(k) + " must lie in [1, " +
                                               std::to_string(modules) + "]");
  }
  NoisyTopKGate g;
  g.num_modules = modules;
  g.in_dim = in_dim;
  g.k = k;
  g.gate_w = store.add_weight(prefix + ".gate.w", in_dim, modules, rng, ParamGroup::kController);
  g.gate_b = store.add_bias(prefix + ".gate.b", modules, ParamGroup::kController);
  g.noise_w = store.add_weight(prefix + ".noise.w", in_dim, modules, rng, ParamGroup::kController);
  g.noise_b = store.add_bias(prefix + ".noise.b", modules, ParamGroup::kController);
  return g;
}

TopKResult noisy_topk_forward(const BoundParams& p, const NoisyTopKGate& gate,
                              const ModulePool& pool, ad::Var x, bool train, Rng* rng,
                              std::optional<ad::Var> gate_input) {
  const ad::Var g = gate_input.value_or(x);
  if (g.cols() != gate.in_dim) {
    throw ShapeError("noisy-topk: input width " + std::to_string(g.cols()) +
                     " does not match gate input " + std::to_string(gate.in_dim));
  }
  ad::Tape& tape = p.tape();
  const std::size_t n = x.rows();
  const std::size_t m = gate.num_modules;
  ad::Var logits = ad::add(ad::matmul(g, p[gate.gate_w]), p[gate.gate_b]);
  if (train) {
    if (rng == nullptr) throw Error("noisy-topk: train mode requires an rng");
    Tensor eps({n, m});
    for (auto& v : eps.storage()) v = rng->normal();
    ad::Var scale = ad::softplus(ad::add(ad::matmul(g, p[gate.noise_w]), p[gate.noise_b]));
    logits = ad::add(logits, ad::mul(tape.constant(std::move(eps)), scale));
  }
  ad::Var weights = ad::topk_softmax(logits, gate.k);

  TopKResult res{.output = {}, .weights = weights, .active = {}};
  res.active.resize(n);
  std::vector<std::vector<std::size_t>> rows_of(m);
  const Tensor& lv = logits.value();
  for (std::size_t i = 0; i < n; ++i) {
    res.active[i] = ad::topk_indices(lv.values().subspan(i * m, m), gate.k);
    for (auto e : res.active[i]) rows_of[e].push_back(i);
  }
  std::optional<ad::Var> out;
  for (std::size_t e = 0; e < m; ++e) {
    if (rows_of[e].empty()) continue;
    const bool all = rows_of[e].size() == n;
    ad::Var xe = all ? x : ad::gather_rows(x, rows_of[e]);
    ad::Var we = ad::slice_col(all ? weights : ad::gather_rows(weights, rows_of[e]), e);
    ad::Var ye = ad::mul(pool.apply(p, e, xe), we);
    if (!all) ye = ad::scatter_add_rows(ye, rows_of[e], n);
    out = out ? ad::add(*out, ye) : ye;
  }
  res.output = *out;
  return res;
}

}  // namespace modnet
