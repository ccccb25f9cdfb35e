// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Each criterion prints one PASS or FAIL line with the
// measured evidence; the exit status is nonzero when any criterion fails.
// Arguments select criteria by number; none runs all of them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "modnet/autodiff.h"
#include "modnet/checkpoint.h"
#include "modnet/data.h"
#include "modnet/diagnostics.h"
#include "modnet/experiment.h"
#include "modnet/gru.h"
#include "modnet/noisy_topk.h"
#include "modnet/trainer.h"
#include "oracles.h"

namespace modnet {
namespace {

using nlohmann::json;
using testing::row_of;

const double kLn2 = std::log(2.0);

struct Outcome {
  bool pass = true;
  std::string detail;

  // Records the first failure; later ones only count.
  void require(bool ok, const std::string& what) {
    if (ok) return;
    if (pass) detail = what;
    pass = false;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::filesystem::path source_path(const std::string& rel) {
  return std::filesystem::path(MODNET_SOURCE_DIR) / rel;
}

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<json> read_jsonl(const std::filesystem::path& p) {
  std::vector<json> out;
  std::istringstream lines(slurp(p));
  std::string line;
  while (std::getline(lines, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

json shipped_config(const std::string& name, const std::filesystem::path& out) {
  json j = load_json_file(source_path("configs/" + name));
  j["output_dir"] = out.string();
  if (j.at("task") == "text-lm") j["data"]["path"] = source_path(j["data"]["path"]).string();
  return j;
}

// ---------------------------------------------------------------------------

Outcome toy_reproduction() {
  Outcome o;
  int good = 0;
  std::string seeds;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    json j = shipped_config("toy_em.json", testing::scratch_dir("acc1-" + std::to_string(seed)));
    j["seed"] = seed;
    const RunRecord rec = run_experiment(parse_config(j));
    const RunSummary& s = rec.summary;
    const bool ok = rec.completed && s.iterations <= 20000 && s.eval.mse < 1e-2 && s.h_a < 0.05 &&
                    std::abs(s.h_b - kLn2) < 0.1;
    good += ok;
    seeds += " s" + std::to_string(seed) + (ok ? "+" : "-") + "(mse " + fmt("%.2g", s.eval.mse) +
             " Hb " + fmt("%.3f", s.h_b) + ")";
  }
  o.require(good >= 8, "too few seeds converged");
  o.detail = std::to_string(good) + "/10 seeds meet mse<1e-2, H_a<0.05, |H_b-ln2|<0.1;" + seeds;
  return o;
}

Outcome planted_solution() {
  Outcome o;
  ToyConfig c;
  const ToyDataset d = gen_toy_regression(c);
  for (std::size_t n = 0; n < c.n; ++n) {
    if ((d.x.at(n, 0) < 0.0) != (d.component[n] == 1)) {
      o.require(false, "clusters not separable by sign of x0");
      return o;
    }
  }
  NetSpec spec;
  spec.in_dim = 2;
  spec.out_dim = 2;
  spec.modules = 2;
  spec.module_kind = ModuleKind::kLinear;
  FeedForwardModel m(spec, d.x, d.y, {}, 1);
  ParamStore& s = m.params();
  Tensor& w0 = s.value(s.find("layer0.module0.w"));
  Tensor& w1 = s.value(s.find("layer0.module1.w"));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      w0.at(i, j) = d.rotation.at(j, i);  // row convention: y = x R^T
      w1.at(i, j) = d.scaling.at(i, j);
    }
  s.value(s.find("layer0.module0.b")).fill(0.0);
  s.value(s.find("layer0.module1.b")).fill(0.0);
  Tensor& wc = s.value(s.find("layer0.ctrl.head0.w"));
  wc.fill(0.0);
  wc.at(0, 0) = -50.0;
  wc.at(0, 1) = 50.0;
  s.value(s.find("layer0.ctrl.head0.b")).fill(0.0);
  const double mse = m.evaluate(iota_n(c.n), EvalMode::kMostLikely, 0).mse;
  o.require(mse < 1e-9, "planted mse too large");
  o.detail = "planted mse " + fmt("%.3g", mse) + " over " + std::to_string(c.n) + " points";
  return o;
}

// Scalarizes an output against a fixed random weighting.
ad::Var weigh(ad::Var out, std::uint64_t seed) {
  Rng rng(seed, Stream::kTest);
  Tensor w = testing::random_tensor(out.value().shape(), rng);
  return ad::sum_all(ad::mul(out, out.tape->constant(w)));
}

Outcome gradient_correctness() {
  Outcome o;
  using ad::Var;
  using testing::random_tensor;
  Rng rng(300, Stream::kTest);
  double worst = 0.0;
  std::string worst_name;
  std::size_t total = 0;
  const auto check = [&](const std::string& name, const ad::ScalarFn& fn,
                         const std::vector<Tensor>& params) {
    const auto r = ad::grad_check(fn, params, 1e-5);
    total += r.checked;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = name;
    }
    o.require(r.checked > 0 && r.max_rel_error < 1e-4, name + " rel error " + fmt("%.3g", r.max_rel_error));
  };

  check("matmul", [](ad::Tape&, std::span<const Var> v) { return weigh(ad::matmul(v[0], v[1]), 1); },
        {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
  check("add/sub broadcast",
        [](ad::Tape&, std::span<const Var> v) {
          return ad::add(weigh(ad::sub(ad::add(v[0], v[1]), v[2]), 2),
                         weigh(ad::sub(v[2], v[1]), 16));
        },
        {random_tensor({3, 4}, rng), random_tensor({1, 4}, rng), random_tensor({3, 4}, rng)});
  check("mul broadcast",
        [](ad::Tape&, std::span<const Var> v) { return weigh(ad::mul(ad::mul(v[0], v[1]), v[2]), 3); },
        {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng), random_tensor({3, 1}, rng)});
  check("affine/tanh/sigmoid/softplus",
        [](ad::Tape&, std::span<const Var> v) {
          Var a = ad::affine(v[0], -1.5, 0.25);
          return weigh(ad::add(ad::tanh(a), ad::add(ad::sigmoid(a), ad::softplus(a))), 4);
        },
        {random_tensor({3, 3}, rng, -3.0, 3.0)});
  check("relu", [](ad::Tape&, std::span<const Var> v) { return weigh(ad::relu(v[0]), 5); },
        {testing::away_from_zero({4, 3}, rng)});
  check("row_softmax", [](ad::Tape&, std::span<const Var> v) { return weigh(ad::row_softmax(v[0]), 6); },
        {random_tensor({3, 5}, rng, -2.0, 2.0)});
  check("concat/slice",
        [](ad::Tape&, std::span<const Var> v) {
          Var c = ad::concat(v[0], v[1]);
          return ad::add(weigh(c, 7), weigh(ad::slice_col(c, 3), 8));
        },
        {random_tensor({3, 2}, rng), random_tensor({3, 3}, rng)});
  check("sum_axis",
        [](ad::Tape&, std::span<const Var> v) {
          return ad::add(weigh(ad::sum_axis(v[0], 0), 9), weigh(ad::sum_axis(v[0], 1), 10));
        },
        {random_tensor({4, 3}, rng)});
  const std::vector<std::size_t> ids = {2, 0, 2, 3};
  check("embedding_lookup",
        [&](ad::Tape&, std::span<const Var> v) { return weigh(ad::embedding_lookup(v[0], ids), 11); },
        {random_tensor({5, 3}, rng)});
  const Tensor target = random_tensor({4, 2}, rng);
  check("gaussian_log_density",
        [&](ad::Tape&, std::span<const Var> v) { return weigh(ad::gaussian_log_density(v[0], target), 12); },
        {random_tensor({4, 2}, rng)});
  const std::vector<std::size_t> labels = {0, 3, 1};
  check("categorical_log_prob",
        [&](ad::Tape&, std::span<const Var> v) { return weigh(ad::categorical_log_prob(v[0], labels), 13); },
        {random_tensor({3, 4}, rng, -3.0, 3.0)});
  const std::vector<std::size_t> rows = {1, 1, 0, 2};
  check("gather/scatter rows",
        [&](ad::Tape&, std::span<const Var> v) {
          return weigh(ad::scatter_add_rows(ad::gather_rows(v[0], rows), rows, 5), 14);
        },
        {random_tensor({3, 2}, rng)});
  check("topk_softmax",
        [](ad::Tape&, std::span<const Var> v) { return weigh(ad::topk_softmax(v[0], 2), 15); },
        {Tensor::matrix({{0.1, 1.3, -0.7, 0.9}, {2.0, -1.0, 0.4, 0.45}})});

  {
    ParamStore store;
    Rng init(8, Stream::kInit);
    NetSpec spec;
    spec.in_dim = 3;
    spec.out_dim = 2;
    spec.hidden = 4;
    spec.layers = 2;
    spec.modules = 3;
    spec.slots = 2;
    spec.module_kind = ModuleKind::kLinearRelu;
    ModularNet net(spec, store, init);
    Rng data(9, Stream::kTest);
    const Tensor x = random_tensor({4, 3}, data);
    const Tensor y = random_tensor({4, 2}, data);
    for (auto& t : store.values())
      for (auto& v : t.storage()) v += data.uniform(-0.2, 0.2);
    std::vector<Composition> comps;
    for (int i = 0; i < 4; ++i) comps.push_back(uniform_composition(3, 2, 2, data));
    check("modular net forward",
          [&](ad::Tape& tape, std::span<const Var> leaves) {
            BoundParams p(tape, leaves);
            auto local = comps;
            auto fwd = net.forward(p, tape.constant(x), local, Select::kGiven, nullptr);
            return ad::sum_all(ad::add(net.head_log_likelihood(fwd.output, y, {}), *fwd.controller_log_prob));
          },
          store.values());
  }
  {
    const Corpus c = tokenize("abcabdacbdaabcbbadcab", TokenMode::kChar, 4);
    GruSpec spec;
    spec.vocab = c.vocab_size();
    spec.embedding = 3;
    spec.hidden = 4;
    spec.modules = 2;
    spec.slots = 2;
    for (ModuleKind kind : {ModuleKind::kLinear, ModuleKind::kLinearRelu}) {
      spec.module_kind = kind;
      SequenceModel m(spec, c, 7);
      Rng jitter(8, Stream::kTest);
      for (auto& t : m.params().values())
        for (auto& v : t.storage()) v += jitter.uniform(-0.3, 0.3);
      const std::vector<std::size_t> idx = {0, 2, 3};
      std::vector<Composition> comps;
      for (std::size_t i = 0; i < idx.size(); ++i) comps.push_back(uniform_composition(2, 2, 4, jitter));
      check(std::string("modular gru window ") + (kind == ModuleKind::kLinear ? "linear" : "linear-relu"),
            [&](ad::Tape& tape, std::span<const Var> leaves) {
              BoundParams p(tape, leaves);
              auto local = comps;
              const auto t = m.forward_terms(p, idx, local, Select::kGiven, nullptr);
              return ad::sum_all(ad::add(t.conditional, *t.controller));
            },
            m.params().values());
    }
  }
  if (o.pass) {
    o.detail = std::to_string(total) + " coordinates, worst rel error " + fmt("%.3g", worst) +
               " (" + worst_name + ")";
  }
  return o;
}

std::unique_ptr<FeedForwardModel> random_model(const NetSpec& spec, std::size_t rows, Rng& rng,
                                               double scale) {
  auto m = std::make_unique<FeedForwardModel>(
      spec, testing::random_tensor({rows, spec.in_dim}, rng, -2.0, 2.0),
      testing::random_tensor({rows, spec.out_dim}, rng, -2.0, 2.0), std::vector<std::size_t>{},
      rng.next_u64());
  for (auto& t : m->params().values())
    for (auto& v : t.storage()) v = rng.uniform(-scale, scale);
  return m;
}

NetSpec small_spec(std::size_t layers, std::size_t modules) {
  NetSpec s;
  s.in_dim = 2;
  s.out_dim = 2;
  s.hidden = 3;
  s.layers = layers;
  s.modules = modules;
  return s;
}

Outcome viterbi_e_step() {
  Outcome o;
  Rng rng(400, Stream::kTest);
  const NetSpec spec = small_spec(2, 2);
  std::size_t exact = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto m = random_model(spec, 1, rng, 1.0);
    AssignmentBuffer buf = init_buffer(1, 2, 1, 2, rng.next_u64());
    const auto x = row_of(m->inputs(), 0), y = row_of(m->targets(), 0);
    // Oracle argmax; the incumbent survives ties.
    Composition best = buf.assignments[0];
    double best_j = testing::oracle_joint(m->params(), spec, x, y, best.modules).joint();
    for (const auto& d : testing::all_digit_strings(2, 2)) {
      const double j = testing::oracle_joint(m->params(), spec, x, y, d).joint();
      if (j > best_j) {
        best_j = j;
        best.modules = d;
      }
    }
    Rng e(rng.next_u64(), Stream::kEStep);
    partial_e_step(*m, iota_n(1), buf, 1000, e);
    exact += buf.assignments[0] == best;
  }
  o.require(exact == 100, "exhaustive E-step missed the argmax");

  // S = 1 over a full training run: every E-step update is checked.
  auto m = random_model(small_spec(2, 3), 40, rng, 0.7);
  const NetSpec spec3 = small_spec(2, 3);
  TrainerConfig cfg;
  cfg.samples_e = 1;
  cfg.m_steps = 3;
  cfg.m_batch = 8;
  cfg.adam.learning_rate = 1e-2;
  cfg.max_iterations = 3000;
  Trainer tr(*m, cfg, 4);
  AssignmentBuffer prev = tr.buffer();
  std::size_t checked = 0, decreased = 0, improved = 0;
  tr.on_e_step = [&](std::span<const std::size_t> idx, const EStepResult& r) {
    for (std::size_t n : idx) {
      const auto x = row_of(m->inputs(), n), y = row_of(m->targets(), n);
      const double before = testing::oracle_joint(m->params(), spec3, x, y, prev.assignments[n].modules).joint();
      const double after = testing::oracle_joint(m->params(), spec3, x, y, tr.buffer().assignments[n].modules).joint();
      decreased += after < before - 1e-12;
      ++checked;
    }
    improved += r.improved;
    prev = tr.buffer();
  };
  while (tr.iteration() < cfg.max_iterations) tr.step();
  o.require(decreased == 0, std::to_string(decreased) + " S=1 updates decreased the joint");
  o.require(checked == 1000u * 8u, "unexpected E-step count");
  if (o.pass) {
    o.detail = "exhaustive argmax " + std::to_string(exact) + "/100; S=1 run: " +
               std::to_string(checked) + " updates checked, 0 decreases, " +
               std::to_string(improved) + " improvements";
  }
  return o;
}

Outcome marginal_oracle() {
  Outcome o;
  Rng rng(500, Stream::kTest);
  double worst = 0.0;
  std::size_t points = 0, bounds = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto inst = testing::random_tiny_instance(rng, 2);
    const auto& m = *inst.model;
    for (std::size_t n = 0; n < m.num_datapoints(); ++n) {
      const auto x = row_of(m.inputs(), n), y = row_of(m.targets(), n);
      const double lib = marginal_log_likelihood_enumerate(m, n);
      const double ref = testing::oracle_marginal(m.params(), inst.spec, x, y);
      worst = std::max(worst, std::abs(lib - ref));
      ++points;
      for (const auto& d : testing::all_digit_strings(inst.spec.modules, inst.spec.layers * inst.spec.slots)) {
        Composition c(inst.spec.layers, inst.spec.slots);
        c.modules = d;
        o.require(lib >= joint_log_prob(m, n, c) - 1e-12, "marginal below a joint");
        ++bounds;
      }
    }
  }
  o.require(worst < 1e-9, "marginal differs from brute force by " + fmt("%.3g", worst));
  if (o.pass) {
    o.detail = std::to_string(points) + " datapoints on 100 instances, max |diff| " +
               fmt("%.3g", worst) + ", " + std::to_string(bounds) + " joints bounded";
  }
  return o;
}

Outcome reinforce_estimator() {
  Outcome o;
  Rng rng(600, Stream::kTest);
  const NetSpec spec = small_spec(1, 2);
  auto m = random_model(spec, 1, rng, 1.0);
  const ParamStore& s = m->params();
  const auto x = row_of(m->inputs(), 0), y = row_of(m->targets(), 0);
  const double baseline = -3.0;
  const auto lp = testing::log_softmax(testing::affine_row(
      x, testing::named(s, "layer0.ctrl.head0.w"), testing::named(s, "layer0.ctrl.head0.b"), false));
  std::vector<double> exact(6, 0.0);
  for (int a = 0; a < 2; ++a) {
    const double pa = std::exp(lp[a]);
    const double reward = testing::oracle_joint(s, spec, x, y, std::vector<int>{a}).conditional;
    for (std::size_t k = 0; k < 2; ++k) {
      const double score = (static_cast<int>(k) == a) - std::exp(lp[k]);
      for (std::size_t i = 0; i < 2; ++i) exact[i * 2 + k] += pa * (reward - baseline) * x[i] * score;
      exact[4 + k] += pa * (reward - baseline) * score;
    }
  }
  // 10^5 single-sample estimates, averaged in batches of 1000.
  const std::size_t batches = 100, per = 1000;
  const std::vector<std::size_t> idx(per, 0);
  std::vector<double> sum(6, 0.0), sum2(6, 0.0);
  Rng r(3, Stream::kTrainer);
  for (std::size_t b = 0; b < batches; ++b) {
    const auto est = reinforce_gradient(*m, idx, baseline, r);
    const auto& gw = est.grads[s.find("layer0.ctrl.head0.w")];
    const auto& gb = est.grads[s.find("layer0.ctrl.head0.b")];
    for (std::size_t c = 0; c < 6; ++c) {
      const double v = c < 4 ? gw[c] : gb[c - 4];
      sum[c] += v;
      sum2[c] += v * v;
    }
  }
  double worst_z = 0.0;
  for (std::size_t c = 0; c < 6; ++c) {
    const double mean = sum[c] / batches;
    const double se = std::sqrt((sum2[c] / batches - mean * mean) / (batches - 1));
    const double z = std::abs(mean - exact[c]) / se;
    worst_z = std::max(worst_z, z);
    o.require(z < 3.0, "coordinate " + std::to_string(c) + " off by " + fmt("%.2f", z) + " SE");
  }
  if (o.pass) o.detail = "10^5 samples, 6 coordinates, worst deviation " + fmt("%.2f", worst_z) + " SE";
  return o;
}

Outcome noisy_topk_contract() {
  Outcome o;
  std::size_t cases = 0;
  double worst = 0.0;
  Rng rng(700, Stream::kTest);
  for (std::size_t modules = 2; modules <= 6; ++modules) {
    for (std::size_t k = 1; k <= modules; ++k) {
      ParamStore store;
      const ModulePool pool = ModulePool::create(store, "p", modules, 4, 3, ModuleKind::kLinearRelu, rng);
      const NoisyTopKGate gate = NoisyTopKGate::create(store, "g", modules, 4, k, rng);
      for (auto& t : store.values())
        for (auto& v : t.storage()) v = rng.uniform(-1.0, 1.0);
      const Tensor x = testing::random_tensor({8, 4}, rng);
      for (bool train : {false, true}) {
        ad::Tape tape;
        BoundParams p(tape, store);
        const auto r = noisy_topk_forward(p, gate, pool, tape.constant(x), train, train ? &rng : nullptr);
        const Tensor& w = r.weights.value();
        for (std::size_t i = 0; i < x.rows(); ++i) {
          std::size_t nonzero = 0;
          double total = 0.0;
          for (std::size_t e = 0; e < modules; ++e) {
            total += w.at(i, e);
            nonzero += w.at(i, e) > 0.0;
          }
          o.require(r.active[i].size() == k && nonzero == k, "active count differs from k");
          o.require(std::abs(total - 1.0) < 1e-9, "weights do not sum to one");
        }
        if (train) continue;
        // Sort clean logits, keep k, renormalize, mix the survivors.
        const Tensor& gw = store.value(gate.gate_w);
        const Tensor& gb = store.value(gate.gate_b);
        for (std::size_t i = 0; i < x.rows(); ++i) {
          std::vector<double> logit(modules);
          for (std::size_t e = 0; e < modules; ++e) {
            logit[e] = gb[e];
            for (std::size_t c = 0; c < 4; ++c) logit[e] += x.at(i, c) * gw.at(c, e);
          }
          std::vector<std::size_t> order = iota_n(modules);
          std::stable_sort(order.begin(), order.end(),
                           [&](std::size_t a, std::size_t b) { return logit[a] > logit[b]; });
          double z = 0.0;
          for (std::size_t j = 0; j < k; ++j) z += std::exp(logit[order[j]] - logit[order[0]]);
          for (std::size_t d = 0; d < pool.out_dim; ++d) {
            double want = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
              const std::size_t e = order[j];
              double v = store.value(pool.biases[e])[d];
              for (std::size_t c = 0; c < 4; ++c) v += x.at(i, c) * store.value(pool.weights[e]).at(c, d);
              want += std::exp(logit[e] - logit[order[0]]) / z * std::max(0.0, v);
            }
            worst = std::max(worst, std::abs(want - r.output.value().at(i, d)));
          }
        }
      }
      ++cases;
    }
  }
  o.require(worst < 1e-9, "eval output differs from oracle by " + fmt("%.3g", worst));
  if (o.pass) {
    o.detail = std::to_string(cases) + " (M, k) cases in train and eval mode, eval max |diff| " +
               fmt("%.3g", worst);
  }
  return o;
}

// Best probe NLL over the metrics file of a run.
double best_probe_nll(const std::filesystem::path& metrics) {
  double best = INFINITY;
  for (const auto& j : read_jsonl(metrics))
    if (j.at("probe_nll").is_number()) best = std::min(best, j.at("probe_nll").get<double>());
  return best;
}

Outcome two_regime_substitute() {
  Outcome o;
  const double margin = 0.05;
  int em_good = 0, em_bad = 0, seeds_run = 0;
  bool static_ok = true;
  std::string log;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    json je = shipped_config("two_regime_em.json", testing::scratch_dir("acc8-em-" + std::to_string(seed)));
    je["seed"] = seed;
    json js = shipped_config("two_regime_static.json", testing::scratch_dir("acc8-st-" + std::to_string(seed)));
    js["seed"] = seed;
    // Probe every window so the probe NLL is the full-corpus NLL.
    je["diagnostics"]["probe_batch"] = je["data"]["windows"];
    js["diagnostics"]["probe_batch"] = js["data"]["windows"];
    const ExperimentConfig ce = parse_config(je);
    const double bayes = *build_experiment(ce).bayes_nll();
    const RunRecord re = run_experiment(ce);
    const RunRecord rs = run_experiment(parse_config(js));
    const double em_gap = best_probe_nll(re.metrics_path) - bayes;
    const double st_gap = best_probe_nll(rs.metrics_path) - bayes;
    const bool em_ok = em_gap <= margin && re.summary.h_b > 0.5 * kLn2;
    em_good += em_ok;
    em_bad += !em_ok;
    static_ok = static_ok && st_gap >= margin;
    ++seeds_run;
    log += " s" + std::to_string(seed) + "(em " + fmt("%+.3f", em_gap) + " H_b " +
           fmt("%.2f", re.summary.h_b) + ", static " + fmt("%+.3f", st_gap) + ")";
    if (em_bad > 3) break;  // 7 of 10 is out of reach
  }
  o.require(em_good >= 7, "em within 0.05 of Bayes on too few seeds");
  o.require(static_ok, "static baseline came within 0.05 of Bayes");
  o.detail = "em ok on " + std::to_string(em_good) + "/" + std::to_string(seeds_run) +
             " seeds run (need 7/10), static gap >= 0.05 on all: " + (static_ok ? "yes" : "no") +
             "; gaps vs Bayes:" + log;
  return o;
}

SelectionSnapshot one_hot_or_uniform(std::size_t rows, std::size_t modules,
                                     const std::function<std::vector<double>(std::size_t)>& row) {
  SelectionSnapshot s(rows, 1, 1, modules);
  for (std::size_t n = 0; n < rows; ++n) {
    const auto p = row(n);
    std::copy(p.begin(), p.end(), s.dist(n, 0, 0).begin());
  }
  return s;
}

Outcome entropy_suite() {
  Outcome o;
  const auto near = [&](double got, double want, const std::string& what) {
    o.require(std::abs(got - want) < 1e-9, what + " gave " + fmt("%.12g", got));
  };
  const auto det = one_hot_or_uniform(6, 3, [](std::size_t) { return std::vector<double>{0, 1, 0}; });
  near(module_selection_entropy(det), 0.0, "deterministic H_a");
  near(batch_selection_entropy(det), 0.0, "deterministic H_b");
  for (std::size_t m : {2u, 3u, 7u}) {
    const auto u = one_hot_or_uniform(5, m, [m](std::size_t) { return std::vector<double>(m, 1.0 / m); });
    near(module_selection_entropy(u), std::log(m), "uniform H_a");
    near(batch_selection_entropy(u), std::log(m), "uniform H_b");
  }
  const auto split = one_hot_or_uniform(10, 2, [](std::size_t n) {
    return n % 2 ? std::vector<double>{0, 1} : std::vector<double>{1, 0};
  });
  near(module_selection_entropy(split), 0.0, "split H_a");
  near(batch_selection_entropy(split), kLn2, "split H_b");

  Rng rng(900, Stream::kTest);
  double min_margin = INFINITY;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = 1 + rng.below(20), layers = 1 + rng.below(3), slots = 1 + rng.below(3),
                      modules = 2 + rng.below(5);
    SelectionSnapshot s(rows, layers, slots, modules);
    for (std::size_t n = 0; n < rows; ++n)
      for (std::size_t l = 0; l < layers; ++l)
        for (std::size_t k = 0; k < slots; ++k) {
          auto d = s.dist(n, l, k);
          const double sharp = rng.uniform(0.1, 8.0);
          double z = 0.0;
          for (auto& v : d) z += v = std::pow(rng.uniform(), sharp);
          for (auto& v : d) v /= z;
        }
    const double ha = module_selection_entropy(s), hb = batch_selection_entropy(s);
    min_margin = std::min(min_margin, hb - ha);
    o.require(hb >= ha - 1e-12, "H_b < H_a on a random snapshot");
  }
  if (o.pass) o.detail = "analytic cases exact; 1000 random snapshots, min H_b - H_a " + fmt("%.3g", min_margin);
  return o;
}

// Shipped configs shortened so each run takes seconds; dense metrics lines.
json short_config(const std::string& name, const std::filesystem::path& out) {
  json j = shipped_config(name, out);
  j["trainer"]["max_iterations"] = 300;
  j["checkpoint_interval"] = 0;
  j["diagnostics"]["interval"] = 20;
  j["diagnostics"]["export_interval"] = 100;
  return j;
}

std::vector<std::string> shipped_config_names() {
  std::vector<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(source_path("configs")))
    if (e.path().extension() == ".json") names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

Outcome determinism() {
  Outcome o;
  std::size_t configs = 0;
  for (const auto& name : shipped_config_names()) {
    const std::string stem = std::filesystem::path(name).stem().string();
    const auto a = testing::scratch_dir("acc10-a-" + stem);
    const auto b = testing::scratch_dir("acc10-b-" + stem);
    const auto split = testing::scratch_dir("acc10-split-" + stem);
    run_experiment(parse_config(short_config(name, a)));
    run_experiment(parse_config(short_config(name, b)));
    o.require(slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl"), name + ": repeated run differs");
    json js = short_config(name, split);
    js["trainer"]["max_iterations"] = 137;
    run_experiment(parse_config(js));
    resume_experiment(split / "checkpoints" / "ckpt-137.bin", {"trainer.max_iterations=300"});
    o.require(slurp(a / "metrics.jsonl") == slurp(split / "metrics.jsonl"), name + ": resumed run differs");
    o.require(!slurp(a / "metrics.jsonl").empty(), name + ": empty metrics");
    ++configs;
  }
  if (o.pass) {
    o.detail = std::to_string(configs) +
               " shipped configs (300 iterations each): repeat and resume-at-137 metrics byte-identical";
  }
  return o;
}

Outcome export_integrity() {
  Outcome o;
  // Every path graph emitted by runs of the shipped configs.
  std::size_t graphs = 0;
  for (const auto& name : shipped_config_names()) {
    const std::string stem = std::filesystem::path(name).stem().string();
    const auto dir = testing::scratch_dir("acc11-" + stem);
    const ExperimentConfig cfg = parse_config(short_config(name, dir));
    const RunRecord rec = run_experiment(cfg);
    const Experiment probe_size_source = build_experiment(cfg);
    const long n = static_cast<long>(
        std::min<std::size_t>(cfg.diagnostics.probe_batch, probe_size_source.model->num_datapoints()));
    for (const auto& p : rec.exports) {
      if (p.extension() != ".dot") continue;
      const auto g = testing::parse_dot(p);
      std::size_t layers = 0;
      for (const auto& [node, u] : g.usage) layers = std::max(layers, testing::dot_layer(node) + 1);
      const std::string v = testing::dot_flow_violation(g, layers, n);
      o.require(v.empty(), p.filename().string() + " of " + name + ": " + v);
      ++graphs;
    }
  }
  o.require(graphs > 0, "no path graphs emitted");

  // Decision matrices of a trained model's snapshot against the snapshot.
  std::size_t pixels = 0;
  {
    ToyConfig tc;
    tc.n = 300;
    const ToyDataset d = gen_toy_regression(tc);
    NetSpec spec;
    spec.in_dim = 2;
    spec.out_dim = 2;
    spec.hidden = 4;
    spec.layers = 2;
    spec.modules = 3;
    FeedForwardModel m(spec, d.x, d.y, {}, 3);
    TrainerConfig cfg;
    cfg.m_batch = 32;
    cfg.adam.learning_rate = 1e-2;
    Trainer tr(m, cfg, 3);
    for (int i = 0; i < 200; ++i) tr.step();
    const SelectionSnapshot snap = m.snapshot(iota_n(tc.n));
    const auto dir = testing::scratch_dir("acc11-pgm");
    for (std::size_t l = 0; l < snap.layers; ++l) {
      const auto path = dir / ("l" + std::to_string(l) + ".pgm");
      export_decision_matrix(snap, path, l);
      const GrayImage img = read_pgm(path);
      o.require(img.width == snap.modules && img.height == snap.rows, "pgm dimensions");
      for (std::size_t r = 0; r < snap.rows; ++r)
        for (std::size_t k = 0; k < snap.modules; ++k) {
          const int want = static_cast<int>(std::lround(255.0 * snap.dist(r, l, 0)[k]));
          o.require(img.pixels[r * snap.modules + k] == want, "pgm pixel mismatch");
          ++pixels;
        }
    }
  }
  if (o.pass) {
    o.detail = std::to_string(graphs) + " emitted path graphs conserve flow; " + std::to_string(pixels) +
               " decision-matrix pixels round-trip exactly";
  }
  return o;
}

struct Criterion {
  int number;
  const char* name;
  Outcome (*run)();
};

const Criterion kCriteria[] = {
    {1, "toy regression reproduction", toy_reproduction},
    {2, "planted exact solution", planted_solution},
    {3, "gradient correctness", gradient_correctness},
    {4, "viterbi e-step exactness", viterbi_e_step},
    {5, "marginal likelihood oracle", marginal_oracle},
    {6, "reinforce estimator", reinforce_estimator},
    {7, "noisy top-k contract", noisy_topk_contract},
    {8, "two-regime language model", two_regime_substitute},
    {9, "entropy metrics", entropy_suite},
    {10, "determinism", determinism},
    {11, "export integrity", export_integrity},
};

}  // namespace
}  // namespace modnet

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : modnet::kCriteria) {
    if (!wanted.empty() && !wanted.count(c.number)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    modnet::Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %2d %-30s %s  [%.0fs] %s\n", c.number, c.name, o.pass ? "PASS" : "FAIL", secs,
                o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
