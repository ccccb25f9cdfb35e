// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "modnet/error.h"
#include "modnet/modular.h"
#include "test_util.h"

namespace modnet {
namespace {

using testing::random_tensor;

// Independent module evaluation: act(x W + b) row by row.
Tensor module_oracle(const ParamStore& s, const ModulePool& pool, std::size_t m, const Tensor& x) {
  const Tensor& w = s.value(pool.weights[m]);
  const Tensor& b = s.value(pool.biases[m]);
  Tensor out({x.rows(), pool.out_dim});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < pool.out_dim; ++j) {
      double v = b[j];
      for (std::size_t k = 0; k < pool.in_dim; ++k) v += x.at(i, k) * w.at(k, j);
      out.at(i, j) = pool.kind == ModuleKind::kLinearRelu ? std::max(0.0, v) : v;
    }
  return out;
}

struct PoolFixture {
  ParamStore store;
  ModulePool pool;
  Tensor x;

  explicit PoolFixture(ModuleKind kind, std::size_t modules = 3) {
    Rng rng(5, Stream::kTest);
    pool = ModulePool::create(store, "p", modules, 4, 3, kind, rng);
    for (auto id : pool.biases) store.value(id) = random_tensor({1, 3}, rng);
    x = random_tensor({5, 4}, rng);
  }
};

TEST(Composition, CountIsMToTheKL) {
  EXPECT_EQ(composition_count(6, 3, 1), 216u);
  EXPECT_EQ(composition_count(2, 1, 35), std::size_t{1} << 35);
  const auto all = enumerate_compositions(6, 3, 1, 1000);
  ASSERT_EQ(all.size(), 216u);
  std::set<std::vector<int>> distinct;
  for (const auto& c : all) distinct.insert(c.modules);
  EXPECT_EQ(distinct.size(), 216u);
  EXPECT_EQ(all.front().modules, (std::vector<int>{0, 0, 0}));
  EXPECT_EQ(all.back().modules, (std::vector<int>{5, 5, 5}));
  EXPECT_THROW(enumerate_compositions(6, 3, 1, 215), BudgetError);
}

TEST(Composition, UniformDrawStaysInRange) {
  Rng rng(1, Stream::kTest);
  for (int i = 0; i < 200; ++i) {
    const auto c = uniform_composition(4, 2, 3, rng);
    for (int m : c.modules) {
      ASSERT_GE(m, 0);
      ASSERT_LT(m, 4);
    }
  }
}

TEST(ModularLayer, SingleSlotEqualsModule) {
  PoolFixture f(ModuleKind::kLinearRelu);
  ad::Tape tape;
  BoundParams p(tape, f.store);
  const std::vector<int> a = {2};
  const Tensor out = layer_forward(p, f.pool, tape.constant(f.x), a, Combine::kSum).value();
  EXPECT_LT(testing::max_abs_diff(out, module_oracle(f.store, f.pool, 2, f.x)), 1e-14);
}

TEST(ModularLayer, DuplicateSlotsSumTwice) {
  PoolFixture f(ModuleKind::kLinearRelu);
  ad::Tape tape;
  BoundParams p(tape, f.store);
  const std::vector<int> a = {1, 1};
  const Tensor out = layer_forward(p, f.pool, tape.constant(f.x), a, Combine::kSum).value();
  Tensor twice = module_oracle(f.store, f.pool, 1, f.x);
  for (auto& v : twice.storage()) v *= 2.0;
  EXPECT_LT(testing::max_abs_diff(out, twice), 1e-14);
}

TEST(ModularLayer, ZeroParametersGiveZeroOutput) {
  PoolFixture f(ModuleKind::kLinearRelu);
  for (auto& t : f.store.values()) t.fill(0.0);
  ad::Tape tape;
  BoundParams p(tape, f.store);
  const std::vector<int> a = {0, 2};
  for (double v : layer_forward(p, f.pool, tape.constant(f.x), a, Combine::kSum).value().values()) {
    EXPECT_EQ(v, 0.0);
  }
}

TEST(ModularLayer, SumIsInvariantToSlotOrder) {
  PoolFixture f(ModuleKind::kLinear);
  ad::Tape tape;
  BoundParams p(tape, f.store);
  ad::Var x = tape.constant(f.x);
  const std::vector<int> a = {0, 2, 1}, b = {1, 0, 2};
  EXPECT_LT(testing::max_abs_diff(layer_forward(p, f.pool, x, a, Combine::kSum).value(),
                                  layer_forward(p, f.pool, x, b, Combine::kSum).value()),
            1e-14);
}

TEST(ModularLayer, ConcatJoinsModuleOutputs) {
  PoolFixture f(ModuleKind::kLinear);
  ad::Tape tape;
  BoundParams p(tape, f.store);
  const std::vector<int> a = {2, 0};
  const Tensor out = layer_forward(p, f.pool, tape.constant(f.x), a, Combine::kConcat).value();
  ASSERT_EQ(out.cols(), 6u);
  const Tensor f2 = module_oracle(f.store, f.pool, 2, f.x), f0 = module_oracle(f.store, f.pool, 0, f.x);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(out.at(i, j), f2.at(i, j), 1e-14);
      EXPECT_NEAR(out.at(i, j + 3), f0.at(i, j), 1e-14);
    }
}

TEST(ModularLayer, RejectsInvalidModuleIndex) {
  PoolFixture f(ModuleKind::kLinear);
  ad::Tape tape;
  BoundParams p(tape, f.store);
  const std::vector<int> a = {3};
  EXPECT_THROW(layer_forward(p, f.pool, tape.constant(f.x), a, Combine::kSum), IndexError);
}

TEST(ModularLayer, PerRowSelectionMatchesOracleAndLeavesOthersUntouched) {
  PoolFixture f(ModuleKind::kLinearRelu, 4);
  ad::Tape tape;
  BoundParams p(tape, f.store);
  const std::vector<std::vector<int>> sel = {{0, 2, 2, 0, 2}};
  ad::Var out = combine_modules(p, f.pool, tape.constant(f.x), sel, Combine::kSum);
  for (std::size_t i = 0; i < 5; ++i) {
    const Tensor row = module_oracle(f.store, f.pool, sel[0][i], f.x);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.value().at(i, j), row.at(i, j), 1e-14);
  }
  const auto grads = p.gradients(tape.backward(ad::sum_all(out)));
  for (std::size_t m : {1u, 3u}) {
    for (double g : grads[f.pool.weights[m]].values()) EXPECT_EQ(g, 0.0);
    for (double g : grads[f.pool.biases[m]].values()) EXPECT_EQ(g, 0.0);
  }
}

TEST(Controller, ZeroWeightsGiveUniformRows) {
  ParamStore store;
  Rng rng(1, Stream::kTest);
  Controller c = Controller::create(store, "c", 2, 5, 3, rng);
  for (auto& t : store.values()) t.fill(0.0);
  const std::vector<double> x = {0.3, -1.0, 2.0};
  const Tensor d = controller_distribution(store, c, x);
  for (double v : d.values()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(Controller, SingleModuleIsDeterministic) {
  ParamStore store;
  Rng rng(2, Stream::kTest);
  Controller c = Controller::create(store, "c", 1, 1, 3, rng);
  const std::vector<double> x = {0.3, -1.0, 2.0};
  EXPECT_NEAR(controller_distribution(store, c, x).item(), 1.0, 1e-15);
  ad::Tape tape;
  BoundParams p(tape, store);
  std::vector<Composition> comps(1, Composition(1, 1));
  auto logits = c.logits(p, tape.constant(Tensor({1, 3}, std::vector<double>(x))));
  EXPECT_NEAR(select_from_logits(logits, comps, 0, Select::kGiven, nullptr).value().item(), 0.0,
              1e-15);
}

TEST(Controller, RowsSumToOneForLargeInputs) {
  ParamStore store;
  Rng rng(3, Stream::kTest);
  Controller c = Controller::create(store, "c", 3, 4, 2, rng);
  for (double scale : {1.0, 1e3, 1e6}) {
    const std::vector<double> x = {scale, -0.5 * scale};
    const Tensor d = controller_distribution(store, c, x);
    for (std::size_t k = 0; k < 3; ++k) {
      double s = 0.0;
      for (std::size_t m = 0; m < 4; ++m) s += d.at(k, m);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Controller, CompositionLogProbIsSumOfIndexedEntries) {
  ParamStore store;
  Rng rng(4, Stream::kTest);
  Controller c = Controller::create(store, "c", 2, 3, 4, rng);
  for (auto id : c.biases) store.value(id) = random_tensor({1, 3}, rng);
  const Tensor x = random_tensor({1, 4}, rng);
  const Tensor d = controller_distribution(store, c, x.values());
  ad::Tape tape;
  BoundParams p(tape, store);
  std::vector<Composition> comps(1, Composition(1, 2));
  comps[0].at(0, 0) = 2;
  comps[0].at(0, 1) = 0;
  const double lp =
      select_from_logits(c.logits(p, tape.constant(x)), comps, 0, Select::kGiven, nullptr)
          .value()
          .item();
  EXPECT_NEAR(lp, std::log(d.at(0, 2)) + std::log(d.at(1, 0)), 1e-12);
}

TEST(Controller, ArgmaxSelectsMostProbable) {
  ad::Tape tape;
  ad::Var logits = tape.constant(Tensor::matrix({{0.1, 2.0, -1.0}, {3.0, 0.0, 2.9}}));
  std::vector<Composition> comps(2, Composition(1, 1));
  select_from_logits({logits}, comps, 0, Select::kArgmax, nullptr);
  EXPECT_EQ(comps[0].at(0, 0), 1);
  EXPECT_EQ(comps[1].at(0, 0), 0);
}

NetSpec two_layer_spec() {
  NetSpec s;
  s.in_dim = 3;
  s.out_dim = 2;
  s.hidden = 4;
  s.layers = 2;
  s.modules = 3;
  s.slots = 2;
  s.module_kind = ModuleKind::kLinearRelu;
  return s;
}

TEST(ModularNet, ControllerOfSecondLayerSeesRealizedOutput) {
  ParamStore store;
  Rng rng(6, Stream::kInit);
  ModularNet net(two_layer_spec(), store, rng);
  Rng data(7, Stream::kTest);
  const Tensor x = random_tensor({1, 3}, data);
  std::vector<Composition> comps(1, Composition(2, 2));
  comps[0].modules = {0, 2, 1, 1};

  ad::Tape tape;
  BoundParams p(tape, store);
  auto fwd = net.forward(p, tape.constant(x), comps, Select::kGiven, nullptr);

  // Recompute layer by layer with the oracle.
  Tensor h1 = module_oracle(store, net.pool(0), 0, x);
  const Tensor h1b = module_oracle(store, net.pool(0), 2, x);
  for (std::size_t j = 0; j < h1.numel(); ++j) h1[j] += h1b[j];
  const Tensor h2 = module_oracle(store, net.pool(1), 1, h1);
  EXPECT_NEAR(fwd.output.value()[0], 2.0 * h2[0], 1e-12);
  EXPECT_NEAR(fwd.output.value()[1], 2.0 * h2[1], 1e-12);

  const Tensor d0 = controller_distribution(store, net.controller(0), x.values());
  const Tensor d1 = controller_distribution(store, net.controller(1), h1.values());
  const double expected = std::log(d0.at(0, 0)) + std::log(d0.at(1, 2)) +
                          std::log(d1.at(0, 1)) + std::log(d1.at(1, 1));
  EXPECT_NEAR(fwd.controller_log_prob->value().item(), expected, 1e-12);
}

TEST(ModularNet, GradCheckWithFixedComposition) {
  ParamStore store;
  Rng rng(8, Stream::kInit);
  NetSpec spec = two_layer_spec();
  ModularNet net(spec, store, rng);
  Rng data(9, Stream::kTest);
  const Tensor x = random_tensor({4, 3}, data);
  const Tensor y = random_tensor({4, 2}, data);
  for (auto& t : store.values())
    for (auto& v : t.storage()) v += data.uniform(-0.2, 0.2);
  std::vector<Composition> comps(4, Composition(2, 2));
  for (auto& c : comps) c = uniform_composition(3, 2, 2, data);

  auto fn = [&](ad::Tape& tape, std::span<const ad::Var> leaves) {
    BoundParams p(tape, leaves);
    auto local = comps;
    auto fwd = net.forward(p, tape.constant(x), local, Select::kGiven, nullptr);
    ad::Var ll = net.head_log_likelihood(fwd.output, y, {});
    return ad::sum_all(ad::add(ll, *fwd.controller_log_prob));
  };
  const auto r = ad::grad_check(fn, store.values(), 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_GT(r.checked, 50u);
}

}  // namespace
}  // namespace modnet
