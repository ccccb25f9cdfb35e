// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "modnet/gru.h"

#include <cmath>
#include <sstream>

#include "modnet/error.h"

namespace modnet {

namespace {

constexpr std::size_t kEvalChunk = 256;

}  // namespace

ModularGruCell::ModularGruCell(const GruSpec& spec, ParamStore& store, Rng& init_rng)
    : spec_(spec) {
  if (spec.vocab == 0) throw ConfigError("data.vocab", "vocabulary is empty");
  if (spec.embedding == 0) throw ConfigError("architecture.embedding", "must be >= 1");
  if (spec.hidden == 0) throw ConfigError("architecture.hidden", "must be >= 1");
  if (spec.modules == 0) throw ConfigError("architecture.modules", "must be >= 1");
  if (spec.slots == 0) throw ConfigError("architecture.slots", "must be >= 1");
  std::size_t module_out = spec.hidden;
  if (spec.combine == Combine::kConcat) {
    if (spec.hidden % spec.slots != 0) {
      throw ConfigError("architecture.combine", "concat requires hidden divisible by slots");
    }
    module_out = spec.hidden / spec.slots;
  }
  if (spec.routing == Routing::kStatic) {
    if (spec.static_indices.size() != spec.slots) {
      throw ConfigError("architecture.static_indices", "length must equal slots");
    }
    for (int m : spec.static_indices) {
      if (m < 0 || static_cast<std::size_t>(m) >= spec.modules) {
        throw ConfigError("architecture.static_indices",
                          "index " + std::to_string(m) + " outside module pool");
      }
    }
  }
  if (spec.routing == Routing::kNoisyTopK && spec.combine != Combine::kSum) {
    throw ConfigError("architecture.combine", "noisy top-k mixes experts by weighted sum");
  }
  const std::size_t in = spec.hidden + spec.embedding;
  // Routing parameters draw from their own stream; see ModularNet.
  Rng route_rng(init_rng.next_u64(), Stream::kInit);
  embedding_ = store.add_weight("gru.embedding", spec.vocab, spec.embedding, init_rng);
  wz_ = store.add_weight("gru.wz", in, spec.hidden, init_rng);
  wr_ = store.add_weight("gru.wr", in, spec.hidden, init_rng);
  pool_ = ModulePool::create(store, "gru", spec.modules, in, module_out, spec.module_kind, init_rng);
  if (spec.routing == Routing::kController) {
    controller_ = Controller::create(store, "gru.ctrl", spec.slots, spec.modules, in, route_rng);
  } else if (spec.routing == Routing::kNoisyTopK) {
    gate_ = NoisyTopKGate::create(store, "gru", spec.modules, in, spec.topk, route_rng);
  }
  out_w_ = store.add_weight("gru.out.w", spec.hidden, spec.vocab, init_rng);
  out_b_ = store.add_bias("gru.out.b", spec.vocab);
}

ad::Var ModularGruCell::gate_input(ad::Var h_prev, ad::Var x) const { return ad::concat(h_prev, x); }

std::vector<ad::Var> ModularGruCell::controller_logits(const BoundParams& p,
                                                       ad::Var gate_in) const {
  return controller_.logits(p, gate_in);
}

ad::Var ModularGruCell::candidate_input(const BoundParams& p, ad::Var h_prev, ad::Var x,
                                        ad::Var gate_in, ad::Var* z, ad::Var* r) const {
  *z = ad::sigmoid(ad::matmul(gate_in, p[wz_]));
  *r = ad::sigmoid(ad::matmul(gate_in, p[wr_]));
  return ad::concat(ad::mul(*r, h_prev), x);
}

ModularGruCell::Step ModularGruCell::finish(ad::Var h_prev, ad::Var z, ad::Var r,
                                            ad::Var pre) const {
  Step s;
  s.z = z;
  s.r = r;
  s.candidate = ad::relu(pre);
  s.h = ad::add(ad::mul(ad::affine(z, -1.0, 1.0), h_prev), ad::mul(z, s.candidate));
  return s;
}

ModularGruCell::Step ModularGruCell::step(const BoundParams& p, ad::Var h_prev, ad::Var x,
                                          ad::Var gate_in,
                                          const std::vector<std::vector<int>>& slot_modules) const {
  ad::Var z, r;
  const ad::Var cin = candidate_input(p, h_prev, x, gate_in, &z, &r);
  return finish(h_prev, z, r, combine_modules(p, pool_, cin, slot_modules, spec_.combine));
}

ModularGruCell::Step ModularGruCell::step_routed(const BoundParams& p, ad::Var h_prev, ad::Var x,
                                                 ad::Var gate_in, bool train, Rng* rng,
                                                 std::vector<Tensor>* weights,
                                                 std::vector<std::vector<std::size_t>>* active) const {
  ad::Var z, r;
  const ad::Var cin = candidate_input(p, h_prev, x, gate_in, &z, &r);
  ad::Var pre;
  if (spec_.routing == Routing::kNoisyTopK) {
    TopKResult res = noisy_topk_forward(p, gate_, pool_, cin, train, rng, gate_in);
    if (weights) weights->push_back(res.weights.value());
    if (active) *active = std::move(res.active);
    pre = res.output;
  } else if (spec_.routing == Routing::kStatic) {
    pre = layer_forward(p, pool_, cin, spec_.static_indices, spec_.combine);
  } else {
    throw Error("modular gru: step_routed needs static or noisy top-k routing");
  }
  return finish(h_prev, z, r, pre);
}

ad::Var ModularGruCell::embed(const BoundParams& p, std::span<const std::size_t> ids) const {
  return ad::embedding_lookup(p[embedding_], ids);
}

ad::Var ModularGruCell::output_logits(const BoundParams& p, ad::Var h) const {
  return ad::add(ad::matmul(h, p[out_w_]), p[out_b_]);
}

// ---------------------------------------------------------------------------

namespace {

ModularGruCell make_cell(const GruSpec& spec, ParamStore& store, std::uint64_t seed) {
  Rng init(seed, Stream::kInit);
  return ModularGruCell(spec, store, init);
}

}  // namespace

SequenceModel::SequenceModel(const GruSpec& spec, Corpus corpus, std::uint64_t seed)
    : cell_(make_cell(spec, store_, seed)), corpus_(std::move(corpus)) {
  if (corpus_.num_windows() == 0) throw ConfigError("data", "corpus yields no complete window");
  for (auto id : corpus_.ids) {
    if (id >= spec.vocab) throw IndexError("sequence model: token id outside vocabulary");
  }
}

std::vector<std::size_t> SequenceModel::column(std::span<const std::size_t> idx,
                                               std::size_t offset) const {
  std::vector<std::size_t> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out[i] = corpus_.ids[corpus_.window_starts.at(idx[i]) + offset];
  }
  return out;
}

LatentModel::Terms SequenceModel::forward_terms(const BoundParams& p,
                                                std::span<const std::size_t> idx,
                                                std::vector<Composition>& comps, Select mode,
                                                Rng* rng) const {
  if (routing() != Routing::kController) throw Error("modular gru: model has no controller");
  const std::size_t n = idx.size();
  const std::size_t steps = corpus_.unroll;
  const std::size_t k_slots = slots();
  if (mode != Select::kGiven) {
    comps.assign(n, Composition(steps, k_slots));
  } else if (comps.size() != n) {
    throw ShapeError("modular gru: composition count mismatch");
  }
  for (const auto& c : comps) {
    if (c.positions != steps || c.slots != k_slots) {
      throw ShapeError("modular gru: composition sequence length must equal the unroll length");
    }
  }
  ad::Tape& tape = p.tape();
  ad::Var h = tape.constant(Tensor({n, cell_.spec().hidden}));
  std::optional<ad::Var> cond, ctrl;
  std::vector<std::vector<int>> sel(k_slots, std::vector<int>(n));
  for (std::size_t t = 0; t < steps; ++t) {
    const auto ids = column(idx, t);
    const auto targets = column(idx, t + 1);
    const ad::Var x = cell_.embed(p, ids);
    const ad::Var gin = cell_.gate_input(h, x);
    const ad::Var lp = select_from_logits(cell_.controller_logits(p, gin), comps, t, mode, rng);
    ctrl = ctrl ? ad::add(*ctrl, lp) : lp;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < k_slots; ++k) sel[k][i] = comps[i].at(t, k);
    h = cell_.step(p, h, x, gin, sel).h;
    const ad::Var ll = ad::categorical_log_prob(cell_.output_logits(p, h), targets);
    cond = cond ? ad::add(*cond, ll) : ll;
  }
  return Terms{*cond, ctrl};
}

ad::Var SequenceModel::routed_log_likelihood(const BoundParams& p,
                                             std::span<const std::size_t> idx, bool train,
                                             Rng* rng) const {
  const std::size_t n = idx.size();
  ad::Tape& tape = p.tape();
  ad::Var h = tape.constant(Tensor({n, cell_.spec().hidden}));
  std::optional<ad::Var> cond;
  for (std::size_t t = 0; t < corpus_.unroll; ++t) {
    const ad::Var x = cell_.embed(p, column(idx, t));
    const ad::Var gin = cell_.gate_input(h, x);
    h = cell_.step_routed(p, h, x, gin, train, rng).h;
    const ad::Var ll = ad::categorical_log_prob(cell_.output_logits(p, h), column(idx, t + 1));
    cond = cond ? ad::add(*cond, ll) : ll;
  }
  return *cond;
}

SelectionSnapshot SequenceModel::snapshot(std::span<const std::size_t> idx) const {
  const std::size_t n = idx.size();
  const std::size_t steps = corpus_.unroll;
  const std::size_t m = num_modules();
  const std::size_t k_slots = slots();
  SelectionSnapshot s(n * steps, 1, k_slots, m);
  ad::Tape tape;
  BoundParams p(tape, store_);
  ad::Var h = tape.constant(Tensor({n, cell_.spec().hidden}));
  std::vector<Composition> comps(n, Composition(steps, k_slots));
  std::vector<std::vector<int>> sel(k_slots, std::vector<int>(n));
  for (std::size_t t = 0; t < steps; ++t) {
    const ad::Var x = cell_.embed(p, column(idx, t));
    const ad::Var gin = cell_.gate_input(h, x);
    if (routing() == Routing::kController) {
      const auto heads = cell_.controller_logits(p, gin);
      select_from_logits(heads, comps, t, Select::kArgmax, nullptr);
      for (std::size_t k = 0; k < k_slots; ++k) {
        const Tensor probs = ad::row_softmax(heads[k]).value();
        for (std::size_t i = 0; i < n; ++i) {
          const auto row = probs.values().subspan(i * m, m);
          std::copy(row.begin(), row.end(), s.dist(i * steps + t, 0, k).begin());
          s.choice(i * steps + t, 0, k) = comps[i].at(t, k);
          sel[k][i] = comps[i].at(t, k);
        }
      }
      h = cell_.step(p, h, x, gin, sel).h;
    } else if (routing() == Routing::kNoisyTopK) {
      std::vector<Tensor> weights;
      std::vector<std::vector<std::size_t>> active;
      h = cell_.step_routed(p, h, x, gin, false, nullptr, &weights, &active).h;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < k_slots; ++k) {
          const auto row = weights[0].values().subspan(i * m, m);
          std::copy(row.begin(), row.end(), s.dist(i * steps + t, 0, k).begin());
          s.choice(i * steps + t, 0, k) = static_cast<int>(active[i][0]);
        }
    } else {
      h = cell_.step_routed(p, h, x, gin, false, nullptr).h;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < k_slots; ++k) {
          const int mod = cell_.spec().static_indices[k];
          s.dist(i * steps + t, 0, k)[static_cast<std::size_t>(mod)] = 1.0;
          s.choice(i * steps + t, 0, k) = mod;
        }
    }
  }
  return s;
}

EvalMetrics SequenceModel::evaluate(std::span<const std::size_t> idx, EvalMode mode,
                                    std::size_t budget) const {
  if (idx.empty()) throw Error("evaluate: empty window set");
  EvalMetrics m;
  m.datapoints = idx.size();
  double total = 0.0;
  if (mode == EvalMode::kEnumerate) {
    if (routing() != Routing::kController) {
      throw ConfigError("mode", "enumerate mode needs a controller-routed model");
    }
    m.mode = "enumerate-marginal";
    for (auto n : idx) total -= marginal_log_likelihood_enumerate(*this, n, budget);
  } else {
    m.mode = "most-likely-composition";
    for (std::size_t b = 0; b < idx.size(); b += kEvalChunk) {
      const auto chunk = idx.subspan(b, std::min(kEvalChunk, idx.size() - b));
      total += most_likely_nll(*this, chunk) * static_cast<double>(chunk.size() * corpus_.unroll);
    }
  }
  m.nll = total / static_cast<double>(idx.size() * corpus_.unroll);
  m.perplexity = std::exp(m.nll);
  return m;
}

std::string SequenceModel::context(std::size_t n, std::size_t position) const {
  const std::size_t start = corpus_.window_starts.at(n);
  const std::size_t at = start + position;
  const std::size_t from = at >= 12 ? at - 12 : 0;
  std::ostringstream os;
  auto put = [&](std::size_t id) {
    const std::string& tok = corpus_.vocab[id];
    for (char c : tok) {
      if (c == '\n') {
        os << "\\n";
      } else if (static_cast<unsigned char>(c) < 0x20) {
        os << '?';
      } else {
        os << c;
      }
    }
    if (tok.size() > 1) os << ' ';
  };
  for (std::size_t i = from; i < at; ++i) put(corpus_.ids[i]);
  os << '[';
  put(corpus_.ids[at]);
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------

double sequence_nll(const SequenceModel& model, std::span<const std::size_t> idx,
                    const std::vector<Composition>& comps) {
  ad::Tape tape;
  BoundParams p(tape, model.params());
  auto c = comps;
  const auto terms = model.forward_terms(p, idx, c, Select::kGiven, nullptr);
  double total = 0.0;
  for (double v : terms.conditional.value().values()) total -= v;
  return total / static_cast<double>(idx.size() * model.units_per_datapoint());
}

SampledSequences sample_composition_sequence(const SequenceModel& model,
                                             std::span<const std::size_t> idx, Rng& rng) {
  ad::Tape tape;
  BoundParams p(tape, model.params());
  SampledSequences out;
  const auto terms = model.forward_terms(p, idx, out.comps, Select::kSample, &rng);
  const auto v = terms.controller->value().values();
  out.controller_log_prob.assign(v.begin(), v.end());
  return out;
}

}  // namespace modnet
