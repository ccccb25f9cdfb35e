// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "modnet/experiment.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "modnet/checkpoint.h"
#include "modnet/diagnostics.h"
#include "modnet/error.h"

namespace modnet {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Strict section reader: every key read is recorded, leftovers are errors.

class Section {
 public:
  Section(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(prefix_.empty() ? "config" : prefix_, "must be an object");
  }

  std::string field(const std::string& key) const {
    return prefix_.empty() ? key : prefix_ + "." + key;
  }
  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::uint64_t uint(const std::string& key, std::uint64_t def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) {
      // Literals built in code are signed even when non-negative.
      if (v.get<std::int64_t>() < 0) throw ConfigError(field(key), "must be >= 0");
      return static_cast<std::uint64_t>(v.get<std::int64_t>());
    }
    throw ConfigError(field(key), "must be a non-negative integer");
  }
  std::uint64_t positive(const std::string& key, std::uint64_t def) {
    const std::uint64_t v = uint(key, def);
    if (v == 0) throw ConfigError(field(key), "must be >= 1");
    return v;
  }
  double number(const std::string& key, double def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(field(key), "must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ConfigError(field(key), "must be finite");
    return d;
  }
  std::string string(const std::string& key, const std::string& def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(field(key), "must be a string");
    return v.get<std::string>();
  }
  std::vector<double> vector(const std::string& key, const std::vector<double>& def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(field(key), "must be an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(field(key), "must be an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }
  std::vector<std::vector<double>> matrix(const std::string& key) {
    if (!has(key)) return {};
    const json& v = j_.at(key);
    std::vector<std::vector<double>> out;
    if (!v.is_array()) throw ConfigError(field(key), "must be an array of rows");
    for (const auto& row : v) {
      if (!row.is_array()) throw ConfigError(field(key), "must be an array of rows");
      std::vector<double> r;
      for (const auto& e : row) {
        if (!e.is_number()) throw ConfigError(field(key), "entries must be numbers");
        r.push_back(e.get<double>());
      }
      out.push_back(std::move(r));
    }
    return out;
  }
  template <class E>
  E choice(const std::string& key, E def, const std::vector<std::pair<std::string, E>>& options) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    std::string names;
    for (const auto& [name, value] : options) {
      if (v.is_string() && v.get<std::string>() == name) return value;
      names += (names.empty() ? "" : ", ") + name;
    }
    throw ConfigError(field(key), "must be one of {" + names + "}");
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(field(key), "unknown key");
    }
  }

 private:
  json j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

const std::vector<std::pair<std::string, Task>> kTasks = {
    {"toy-regression", Task::kToyRegression},
    {"two-regime-lm", Task::kTwoRegimeLm},
    {"text-lm", Task::kTextLm}};
const std::vector<std::pair<std::string, TrainerKind>> kTrainers = {
    {"em", TrainerKind::kEm},
    {"reinforce", TrainerKind::kReinforce},
    {"noisy-topk", TrainerKind::kNoisyTopK},
    {"static", TrainerKind::kStatic}};
const std::vector<std::pair<std::string, Combine>> kCombine = {{"sum", Combine::kSum},
                                                               {"concat", Combine::kConcat}};
const std::vector<std::pair<std::string, ModuleKind>> kModuleKinds = {
    {"linear", ModuleKind::kLinear}, {"linear-relu", ModuleKind::kLinearRelu}};
const std::vector<std::pair<std::string, TokenMode>> kTokenModes = {{"char", TokenMode::kChar},
                                                                    {"word", TokenMode::kWord}};
const std::vector<std::pair<std::string, EvalMode>> kEvalModes = {
    {"most-likely", EvalMode::kMostLikely}, {"enumerate", EvalMode::kEnumerate}};

template <class E>
std::string name_of(E value, const std::vector<std::pair<std::string, E>>& options) {
  for (const auto& [name, v] : options)
    if (v == value) return name;
  throw Error("unnamed enum value");
}

Routing routing_for(TrainerKind k) {
  switch (k) {
    case TrainerKind::kNoisyTopK: return Routing::kNoisyTopK;
    case TrainerKind::kStatic: return Routing::kStatic;
    default: return Routing::kController;
  }
}

std::size_t latent_positions(const ExperimentConfig& c) {
  switch (c.task) {
    case Task::kToyRegression: return c.model.layers;
    case Task::kTwoRegimeLm: return c.data.regime.unroll;
    case Task::kTextLm: return c.data.unroll;
  }
  return 0;
}

void parse_data(Section s, ExperimentConfig& c) {
  DataSection& d = c.data;
  switch (c.task) {
    case Task::kToyRegression: {
      ToyConfig& t = d.toy;
      t.dim = s.positive("dim", t.dim);
      // Default means sit at -2 and +2 along the first axis in any dimension.
      t.mean1.assign(t.dim, 0.0);
      t.mean2.assign(t.dim, 0.0);
      t.mean1[0] = -2.0;
      t.mean2[0] = 2.0;
      t.mean1 = s.vector("mean1", t.mean1);
      t.mean2 = s.vector("mean2", t.mean2);
      t.cov1 = s.matrix("cov1");
      t.cov2 = s.matrix("cov2");
      t.scale_min = s.number("scale_min", t.scale_min);
      t.scale_max = s.number("scale_max", t.scale_max);
      t.n = s.positive("n", t.n);
      if (t.mean1.size() != t.dim) throw ConfigError("data.mean1", "length must equal dim");
      if (t.mean2.size() != t.dim) throw ConfigError("data.mean2", "length must equal dim");
      if (!(t.scale_min > 0.0 && t.scale_min <= t.scale_max)) {
        throw ConfigError("data.scale_min", "scaling range must be positive and ordered");
      }
      break;
    }
    case Task::kTwoRegimeLm: {
      TwoRegimeConfig& r = d.regime;
      r.symbols = s.uint("symbols", r.symbols);
      r.regimes = s.positive("regimes", r.regimes);
      r.peak = s.number("peak", r.peak);
      r.switch_prob = s.number("switch_prob", r.switch_prob);
      r.unroll = s.uint("unroll", r.unroll);
      r.windows = s.positive("windows", r.windows);
      if (s.has("tables")) {
        const json& tables = s.raw("tables");
        if (!tables.is_array()) throw ConfigError("data.tables", "must be an array of matrices");
        for (const auto& t : tables) {
          Section holder(json{{"m", t}}, "data.tables");
          const auto rows = holder.matrix("m");
          if (rows.empty()) throw ConfigError("data.tables", "tables must be non-empty");
          Tensor m({rows.size(), rows[0].size()});
          for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != rows[0].size()) throw ConfigError("data.tables", "ragged table");
            for (std::size_t j = 0; j < rows[i].size(); ++j) m.at(i, j) = rows[i][j];
          }
          r.tables.push_back(std::move(m));
        }
        r.symbols = r.tables.empty() ? r.symbols : r.tables[0].rows();
      }
      if (r.symbols < 2) throw ConfigError("data.symbols", "must be >= 2");
      if (r.unroll < 2) throw ConfigError("data.unroll", "must be >= 2");
      if (!(r.peak > 0.0 && r.peak < 1.0)) throw ConfigError("data.peak", "must lie in (0, 1)");
      if (!(r.switch_prob >= 0.0 && r.switch_prob < 1.0)) {
        throw ConfigError("data.switch_prob", "must lie in [0, 1)");
      }
      break;
    }
    case Task::kTextLm: {
      d.text_path = s.string("path", "");
      if (d.text_path.empty()) throw ConfigError("data.path", "is required for text-lm");
      d.text_mode = s.choice("mode", d.text_mode, kTokenModes);
      d.unroll = s.positive("unroll", d.unroll);
      d.vocab_cap = s.positive("vocab_cap", d.vocab_cap);
      break;
    }
  }
  s.finish();
}

json data_json(const ExperimentConfig& c) {
  const DataSection& d = c.data;
  switch (c.task) {
    case Task::kToyRegression: {
      const ToyConfig& t = d.toy;
      return {{"dim", t.dim},           {"mean1", t.mean1},         {"mean2", t.mean2},
              {"cov1", t.cov1},         {"cov2", t.cov2},           {"scale_min", t.scale_min},
              {"scale_max", t.scale_max}, {"n", t.n}};
    }
    case Task::kTwoRegimeLm: {
      const TwoRegimeConfig& r = d.regime;
      json j = {{"symbols", r.symbols}, {"regimes", r.regimes},   {"peak", r.peak},
                {"switch_prob", r.switch_prob}, {"unroll", r.unroll}, {"windows", r.windows}};
      if (!r.tables.empty()) {
        json tables = json::array();
        for (const auto& t : r.tables) {
          json rows = json::array();
          for (std::size_t i = 0; i < t.rows(); ++i) {
            json row = json::array();
            for (std::size_t k = 0; k < t.cols(); ++k) row.push_back(t.at(i, k));
            rows.push_back(row);
          }
          tables.push_back(rows);
        }
        j["tables"] = tables;
      }
      return j;
    }
    case Task::kTextLm:
      return {{"path", d.text_path},
              {"mode", name_of(d.text_mode, kTokenModes)},
              {"unroll", d.unroll},
              {"vocab_cap", d.vocab_cap}};
  }
  return json::object();
}

// ---------------------------------------------------------------------------
// Small file helpers.

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw Error("cannot open '" + tmp.string() + "' for writing");
    f << text;
    if (!f) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

/// Keeps JSONL lines whose "iteration" is at most `last`.
void truncate_jsonl(const std::filesystem::path& path, std::uint64_t last) {
  std::ifstream in(path);
  if (!in) return;
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("iteration")) continue;
    if (j.at("iteration").get<std::uint64_t>() <= last) kept += line + "\n";
  }
  in.close();
  write_text_atomic(path, kept);
}

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// ---------------------------------------------------------------------------
// Training loop shared by run and resume.

struct RunState {
  Experiment exp;
  std::filesystem::path dir;
  std::vector<std::size_t> probe;
  std::vector<std::size_t> all;
};

std::vector<std::size_t> probe_indices(const ExperimentConfig& c, std::size_t n) {
  Rng rng(c.seed, Stream::kProbe);
  auto idx = sample_batch(n, c.diagnostics.probe_batch, rng);
  std::sort(idx.begin(), idx.end());
  return idx;
}

RunState prepare(const ExperimentConfig& config) {
  RunState st{build_experiment(config), resolve_output_dir(config.output_dir), {}, {}};
  const std::size_t n = st.exp.model->num_datapoints();
  st.probe = probe_indices(config, n);
  st.all.resize(n);
  std::iota(st.all.begin(), st.all.end(), std::size_t{0});
  std::filesystem::create_directories(st.dir / "checkpoints");
  std::filesystem::create_directories(st.dir / "exports");
  return st;
}

/// Rows of a snapshot grouped into one composition per probe datapoint.
std::vector<Composition> snapshot_paths(const SelectionSnapshot& s, std::size_t datapoints) {
  const std::size_t rows_per = s.rows / datapoints;
  std::vector<Composition> out;
  for (std::size_t n = 0; n < datapoints; ++n) {
    Composition c(rows_per * s.layers, s.slots);
    for (std::size_t r = 0; r < rows_per; ++r)
      for (std::size_t l = 0; l < s.layers; ++l)
        for (std::size_t k = 0; k < s.slots; ++k)
          c.at(r * s.layers + l, k) = s.chosen[((n * rows_per + r) * s.layers + l) * s.slots + k];
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<std::filesystem::path> write_exports(const RunState& st, const Trainer& trainer,
                                                 const std::string& tag, bool contexts) {
  std::vector<std::filesystem::path> out;
  const LatentModel& model = *st.exp.model;
  const SelectionSnapshot snap = model.snapshot(st.probe);
  if (snap.slots != 1) return out;
  const std::filesystem::path dir = st.dir / "exports";
  for (std::size_t l = 0; l < snap.layers; ++l) {
    std::string name = "decision-" + tag;
    if (snap.layers > 1) name += "-l" + std::to_string(l);
    out.push_back(dir / (name + ".pgm"));
    export_decision_matrix(snap, out.back(), l);
  }
  std::vector<Composition> paths;
  if (trainer.config().kind == TrainerKind::kEm) {
    for (std::size_t n : st.probe) paths.push_back(trainer.buffer().assignments[n]);
  } else {
    paths = snapshot_paths(snap, st.probe.size());
  }
  out.push_back(dir / ("paths-" + tag + ".dot"));
  export_path_trace(paths, model.num_modules(), out.back(), "iteration " + tag);
  if (contexts) {
    std::vector<ContextSample> samples;
    const std::size_t rows_per = snap.rows / st.probe.size();
    for (std::size_t i = 0; i < st.probe.size(); ++i) {
      for (std::size_t r = 0; r < rows_per; ++r) {
        for (std::size_t l = 0; l < snap.layers; ++l) {
          const std::size_t pos = r * snap.layers + l;
          samples.push_back({snap.chosen[(i * rows_per + r) * snap.layers + l],
                             model.context(st.probe[i], pos)});
        }
      }
    }
    out.push_back(dir / "contexts.txt");
    write_context_dump(samples, model.num_modules(), st.exp.config.diagnostics.context_per_module,
                       out.back());
  }
  return out;
}

json metrics_line(const RunState& st, const Trainer& trainer, std::uint64_t iteration) {
  const LatentModel& model = *st.exp.model;
  const SelectionSnapshot snap = model.snapshot(st.probe);
  const EvalMetrics ev = model.evaluate(st.probe, EvalMode::kMostLikely, 0);
  json j = {{"iteration", iteration},
            {"trainer", trainer_name(trainer.config().kind)},
            {"objective", num(iteration == 0 ? NAN : trainer.last_objective())},
            {"H_a", module_selection_entropy(snap)},
            {"H_b", batch_selection_entropy(snap)},
            {"probe_nll", num(ev.nll)}};
  if (std::isfinite(ev.mse)) j["probe_mse"] = ev.mse;
  if (trainer.config().kind == TrainerKind::kEm) {
    j["e_step_improved_fraction"] = trainer.save().improved_fraction;
  }
  return j;
}

std::string ckpt_name(std::uint64_t iteration) {
  return "ckpt-" + std::to_string(iteration) + ".bin";
}

std::filesystem::path save_checkpoint(const RunState& st, const Trainer& trainer) {
  Checkpoint ck;
  ck.library_version = kLibraryVersion;
  ck.config_json = to_json(st.exp.config).dump();
  const ParamStore& store = st.exp.model->params();
  for (std::size_t i = 0; i < store.size(); ++i) ck.param_names.push_back(store.name(i));
  ck.params = store.values();
  ck.trainer = trainer.save();
  const auto path = st.dir / "checkpoints" / ckpt_name(ck.trainer.iteration);
  write_checkpoint(path, ck);
  return path;
}

void write_record(const RunRecord& rec) {
  write_text_atomic(rec.output_dir / "run.json", rec.to_json().dump(2) + "\n");
}

RunRecord train_loop(RunState& st, Trainer& trainer, bool fresh) {
  const ExperimentConfig& c = st.exp.config;
  RunRecord rec;
  rec.config = to_json(c);
  rec.library_version = kLibraryVersion;
  rec.output_dir = st.dir;
  rec.metrics_path = st.dir / "metrics.jsonl";
  write_text_atomic(st.dir / "config.json", rec.config.dump(2) + "\n");

  const auto timing_path = st.dir / "timing.jsonl";
  if (fresh) {
    write_text_atomic(rec.metrics_path, "");
    write_text_atomic(timing_path, "");
  } else {
    truncate_jsonl(rec.metrics_path, trainer.iteration());
    truncate_jsonl(timing_path, trainer.iteration());
  }
  std::ofstream metrics(rec.metrics_path, std::ios::app);
  std::ofstream timing(timing_path, std::ios::app);
  if (!metrics || !timing) throw Error("cannot open metrics files in '" + st.dir.string() + "'");

  const auto t0 = std::chrono::steady_clock::now();
  auto emit = [&](std::uint64_t it) {
    metrics << metrics_line(st, trainer, it).dump() << "\n" << std::flush;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timing << json{{"iteration", it}, {"wall_time_s", secs}}.dump() << "\n" << std::flush;
  };
  if (fresh) emit(0);

  const auto& diag = c.diagnostics;
  try {
    while (trainer.iteration() < c.trainer.max_iterations) {
      trainer.step();
      const std::uint64_t it = trainer.iteration();
      if (it % diag.interval == 0) emit(it);
      if (diag.export_interval > 0 && it % diag.export_interval == 0) {
        auto ex = write_exports(st, trainer, std::to_string(it), false);
        rec.exports.insert(rec.exports.end(), ex.begin(), ex.end());
      }
      if (c.checkpoint_interval > 0 && it % c.checkpoint_interval == 0 &&
          it != c.trainer.max_iterations) {
        rec.checkpoints.push_back(save_checkpoint(st, trainer));
      }
    }
  } catch (const NumericError& e) {
    rec.completed = false;
    rec.failure = e.what();
    rec.summary.iterations = trainer.iteration();
    rec.summary.final_objective = trainer.last_objective();
    write_record(rec);
    throw;
  }

  rec.checkpoints.push_back(save_checkpoint(st, trainer));
  auto ex = write_exports(st, trainer, "final", true);
  rec.exports.insert(rec.exports.end(), ex.begin(), ex.end());

  const LatentModel& model = *st.exp.model;
  const SelectionSnapshot snap = model.snapshot(st.all);
  rec.summary.iterations = trainer.iteration();
  rec.summary.final_objective = trainer.last_objective();
  rec.summary.h_a = module_selection_entropy(snap);
  rec.summary.h_b = batch_selection_entropy(snap);
  rec.summary.eval = model.evaluate(st.all, c.eval_mode, c.eval_budget);
  rec.completed = true;
  write_record(rec);
  return rec;
}

void load_params(ParamStore& store, const Checkpoint& ck) {
  if (ck.param_names.size() != store.size()) {
    throw Error("checkpoint: parameter count does not match the model");
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (ck.param_names[i] != store.name(i) || ck.params[i].shape() != store.value(i).shape()) {
      throw Error("checkpoint: parameter '" + ck.param_names[i] + "' does not match the model");
    }
    store.value(i) = ck.params[i];
  }
}

void check_version(const Checkpoint& ck) {
  if (ck.library_version != kLibraryVersion) {
    throw Error("checkpoint written by library version " + ck.library_version +
                ", this is " + kLibraryVersion);
  }
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char ch : s) {
    const bool ok = std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '-' ||
                    ch == '_' || ch == '=';
    out += ok ? ch : '_';
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

const char* task_name(Task t) {
  switch (t) {
    case Task::kToyRegression: return "toy-regression";
    case Task::kTwoRegimeLm: return "two-regime-lm";
    case Task::kTextLm: return "text-lm";
  }
  return "?";
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  Section top(j, "");
  if (!top.has("task")) throw ConfigError("task", "is required");
  c.task = top.choice("task", c.task, kTasks);
  c.seed = top.uint("seed", c.seed);
  c.output_dir = top.string("output_dir", c.output_dir);
  if (c.output_dir.empty()) throw ConfigError("output_dir", "must be non-empty");
  c.checkpoint_interval = top.uint("checkpoint_interval", c.checkpoint_interval);

  if (c.task == Task::kTwoRegimeLm) {
    c.data.regime.seed = c.seed;
  } else if (c.task == Task::kToyRegression) {
    c.data.toy.seed = c.seed;
  }
  parse_data(Section(top.has("data") ? top.raw("data") : json::object(), "data"), c);
  c.data.regime.seed = c.seed;
  c.data.toy.seed = c.seed;

  {
    Section s(top.has("architecture") ? top.raw("architecture") : json::object(), "architecture");
    ModelSection& m = c.model;
    m.layers = s.positive("layers", m.layers);
    m.modules = s.positive("modules", m.modules);
    m.slots = s.positive("slots", m.slots);
    m.hidden = s.positive("hidden", m.hidden);
    m.embedding = s.positive("embedding", m.embedding);
    m.combine = s.choice("combine", m.combine, kCombine);
    m.module_kind = s.choice("module_kind", m.module_kind, kModuleKinds);
    m.topk = s.positive("topk", std::min<std::size_t>(4, m.modules));
    if (s.has("static_indices")) {
      const json& v = s.raw("static_indices");
      if (!v.is_array()) throw ConfigError("architecture.static_indices", "must be an array");
      m.static_indices.clear();
      for (const auto& e : v) {
        if (!e.is_number_integer()) {
          throw ConfigError("architecture.static_indices", "entries must be integers");
        }
        m.static_indices.push_back(e.get<int>());
      }
    }
    s.finish();
    if (c.task != Task::kToyRegression && m.layers != 1) {
      throw ConfigError("architecture.layers", "language models use a single recurrent layer");
    }
  }

  {
    Section s(top.has("trainer") ? top.raw("trainer") : json::object(), "trainer");
    TrainerConfig& t = c.trainer;
    t.kind = s.choice("kind", t.kind, kTrainers);
    t.samples_e = s.positive("S", t.samples_e);
    t.m_steps = s.positive("m_steps", t.m_steps);
    t.m_batch = s.positive("m_batch", t.m_batch);
    t.e_batch = s.uint("e_batch", t.m_batch);
    if (t.e_batch == 0) t.e_batch = t.m_batch;
    t.adam.learning_rate = s.number("learning_rate", t.adam.learning_rate);
    t.adam.beta1 = s.number("beta1", t.adam.beta1);
    t.adam.beta2 = s.number("beta2", t.adam.beta2);
    t.adam.epsilon = s.number("epsilon", t.adam.epsilon);
    t.max_iterations = s.uint("max_iterations", t.max_iterations);
    t.reinforce_samples = s.positive("samples", t.reinforce_samples);
    t.ema_decay = s.number("ema_decay", t.ema_decay);
    t.clip_norm = s.number("clip_norm", c.task == Task::kToyRegression ? 0.0 : 5.0);
    t.max_skips = s.positive("max_skips", t.max_skips);
    s.finish();
    if (!(t.adam.learning_rate > 0.0)) throw ConfigError("trainer.learning_rate", "must be > 0");
    if (!(t.adam.beta1 >= 0.0 && t.adam.beta1 < 1.0)) throw ConfigError("trainer.beta1", "must lie in [0, 1)");
    if (!(t.adam.beta2 >= 0.0 && t.adam.beta2 < 1.0)) throw ConfigError("trainer.beta2", "must lie in [0, 1)");
    if (!(t.adam.epsilon > 0.0)) throw ConfigError("trainer.epsilon", "must be > 0");
    if (!(t.ema_decay > 0.0 && t.ema_decay < 1.0)) throw ConfigError("trainer.ema_decay", "must lie in (0, 1)");
    if (t.clip_norm < 0.0) throw ConfigError("trainer.clip_norm", "must be >= 0");
  }

  {
    Section s(top.has("diagnostics") ? top.raw("diagnostics") : json::object(), "diagnostics");
    DiagnosticsSection& d = c.diagnostics;
    d.interval = s.positive("interval", d.interval);
    d.probe_batch = s.positive("probe_batch", d.probe_batch);
    d.export_interval = s.uint("export_interval", d.export_interval);
    d.context_per_module = s.uint("context_per_module", d.context_per_module);
    s.finish();
  }

  {
    Section s(top.has("eval") ? top.raw("eval") : json::object(), "eval");
    c.eval_mode = s.choice("mode", c.eval_mode, kEvalModes);
    c.eval_budget = s.positive("budget", c.eval_budget);
    s.finish();
  }
  top.finish();

  ModelSection& m = c.model;
  if (c.trainer.kind == TrainerKind::kStatic && m.static_indices.empty()) {
    m.static_indices.assign(m.slots, 0);
  }
  if (c.trainer.kind == TrainerKind::kStatic && m.static_indices.size() != m.slots) {
    throw ConfigError("architecture.static_indices", "length must equal slots");
  }
  for (int idx : m.static_indices) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= m.modules) {
      throw ConfigError("architecture.static_indices",
                        "index " + std::to_string(idx) + " outside module pool");
    }
  }
  if (c.trainer.kind == TrainerKind::kNoisyTopK) {
    if (m.topk > m.modules) throw ConfigError("architecture.topk", "must be <= modules");
    if (m.combine != Combine::kSum) {
      throw ConfigError("architecture.combine", "noisy top-k mixes experts by weighted sum");
    }
  }
  if (m.combine == Combine::kConcat && m.hidden % m.slots != 0) {
    throw ConfigError("architecture.combine", "concat requires hidden divisible by slots");
  }
  if (c.eval_mode == EvalMode::kEnumerate) {
    if (routing_for(c.trainer.kind) != Routing::kController) {
      throw ConfigError("eval.mode", "enumerate needs a controller-routed trainer");
    }
    if (composition_count(m.modules, m.slots, latent_positions(c)) > c.eval_budget) {
      throw ConfigError("eval.mode", "enumeration exceeds eval.budget compositions");
    }
  }
  return c;
}

json to_json(const ExperimentConfig& c) {
  const ModelSection& m = c.model;
  const TrainerConfig& t = c.trainer;
  const DiagnosticsSection& d = c.diagnostics;
  return {{"task", task_name(c.task)},
          {"seed", c.seed},
          {"output_dir", c.output_dir},
          {"data", data_json(c)},
          {"architecture",
           {{"layers", m.layers},
            {"modules", m.modules},
            {"slots", m.slots},
            {"hidden", m.hidden},
            {"embedding", m.embedding},
            {"combine", name_of(m.combine, kCombine)},
            {"module_kind", name_of(m.module_kind, kModuleKinds)},
            {"topk", m.topk},
            {"static_indices", m.static_indices}}},
          {"trainer",
           {{"kind", name_of(t.kind, kTrainers)},
            {"S", t.samples_e},
            {"m_steps", t.m_steps},
            {"e_batch", t.e_batch},
            {"m_batch", t.m_batch},
            {"learning_rate", t.adam.learning_rate},
            {"beta1", t.adam.beta1},
            {"beta2", t.adam.beta2},
            {"epsilon", t.adam.epsilon},
            {"max_iterations", t.max_iterations},
            {"samples", t.reinforce_samples},
            {"ema_decay", t.ema_decay},
            {"clip_norm", t.clip_norm},
            {"max_skips", t.max_skips}}},
          {"checkpoint_interval", c.checkpoint_interval},
          {"diagnostics",
           {{"interval", d.interval},
            {"probe_batch", d.probe_batch},
            {"export_interval", d.export_interval},
            {"context_per_module", d.context_per_module}}},
          {"eval", {{"mode", name_of(c.eval_mode, kEvalModes)}, {"budget", c.eval_budget}}}};
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override must look like key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty()) throw ConfigError(key, "empty key component");
    if (!node->is_object()) throw ConfigError(key, "parent is not an object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

json load_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config", "cannot read '" + path.string() + "'");
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config", "'" + path.string() + "' is not valid JSON");
  return j;
}

std::filesystem::path resolve_output_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv("MODNET_OUTPUT_ROOT"); root && *root) {
      p = std::filesystem::path(root) / p;
    }
  }
  return p;
}

std::optional<double> Experiment::bayes_nll() const {
  if (!regime) return std::nullopt;
  return empirical_bayes_nll(*regime);
}

namespace {

NetSpec net_spec(const ExperimentConfig& c, std::size_t dim) {
  NetSpec s;
  s.in_dim = dim;
  s.out_dim = dim;
  s.hidden = c.model.hidden;
  s.layers = c.model.layers;
  s.modules = c.model.modules;
  s.slots = c.model.slots;
  s.combine = c.model.combine;
  s.module_kind = c.model.module_kind;
  s.head = HeadKind::kGaussian;
  s.routing = routing_for(c.trainer.kind);
  s.topk = c.model.topk;
  s.static_indices = c.model.static_indices;
  return s;
}

GruSpec gru_spec(const ExperimentConfig& c, std::size_t vocab) {
  GruSpec s;
  s.vocab = vocab;
  s.embedding = c.model.embedding;
  s.hidden = c.model.hidden;
  s.modules = c.model.modules;
  s.slots = c.model.slots;
  s.combine = c.model.combine;
  s.module_kind = c.model.module_kind;
  s.routing = routing_for(c.trainer.kind);
  s.topk = c.model.topk;
  s.static_indices = c.model.static_indices;
  return s;
}

}  // namespace

Experiment build_experiment(const ExperimentConfig& config) {
  Experiment e;
  e.config = config;
  switch (config.task) {
    case Task::kToyRegression: {
      e.toy = gen_toy_regression(config.data.toy);
      e.model = std::make_unique<FeedForwardModel>(net_spec(config, config.data.toy.dim),
                                                   e.toy->x, e.toy->y,
                                                   std::vector<std::size_t>{}, config.seed);
      break;
    }
    case Task::kTwoRegimeLm: {
      e.regime = gen_two_regime_sequences(config.data.regime);
      e.model = std::make_unique<SequenceModel>(gru_spec(config, e.regime->corpus.vocab_size()),
                                                e.regime->corpus, config.seed);
      break;
    }
    case Task::kTextLm: {
      if (!std::filesystem::exists(config.data.text_path)) {
        throw ConfigError("data.path", "'" + config.data.text_path + "' does not exist");
      }
      e.corpus = load_corpus(config.data.text_path, config.data.text_mode, config.data.unroll,
                             config.data.vocab_cap);
      e.model = std::make_unique<SequenceModel>(gru_spec(config, e.corpus->vocab_size()),
                                                *e.corpus, config.seed);
      break;
    }
  }
  return e;
}

std::unique_ptr<LatentModel> build_model(const ExperimentConfig& config,
                                         const std::filesystem::path& dataset_base) {
  const std::string kind = cache_kind(dataset_base);
  if (kind == "regression") {
    if (config.task != Task::kToyRegression) {
      throw ConfigError("dataset", "regression data does not fit a " +
                                       std::string(task_name(config.task)) + " model");
    }
    ToyDataset d = read_toy_cache(dataset_base);
    return std::make_unique<FeedForwardModel>(net_spec(config, d.x.cols()), d.x, d.y,
                                              std::vector<std::size_t>{}, config.seed);
  }
  if (config.task == Task::kToyRegression) {
    throw ConfigError("dataset", "token corpus does not fit a toy-regression model");
  }
  Corpus corpus = read_corpus_cache(dataset_base);
  const GruSpec spec = gru_spec(config, corpus.vocab_size());
  return std::make_unique<SequenceModel>(spec, std::move(corpus), config.seed);
}

json eval_json(const EvalMetrics& m) {
  json j = {{"mode", m.mode}, {"datapoints", m.datapoints}, {"nll", num(m.nll)}};
  if (std::isfinite(m.mse)) j["mse"] = m.mse;
  if (std::isfinite(m.perplexity)) j["perplexity"] = m.perplexity;
  return j;
}

json RunRecord::to_json() const {
  std::vector<std::string> ck, ex;
  for (const auto& p : checkpoints) ck.push_back(p.string());
  for (const auto& p : exports) ex.push_back(p.string());
  json j = {{"config", config},
            {"library_version", library_version},
            {"output_dir", output_dir.string()},
            {"metrics", metrics_path.string()},
            {"checkpoints", ck},
            {"exports", ex},
            {"status", completed ? "completed" : "failed"},
            {"summary",
             {{"iterations", summary.iterations},
              {"final_objective", num(summary.final_objective)},
              {"H_a", num(summary.h_a)},
              {"H_b", num(summary.h_b)}}}};
  if (completed) j["summary"]["eval"] = eval_json(summary.eval);
  if (!failure.empty()) j["failure"] = failure;
  return j;
}

RunRecord run_experiment(const ExperimentConfig& config) {
  RunState st = prepare(config);
  const auto base = st.dir / "dataset";
  const std::string cfg = to_json(config).dump();
  if (st.exp.toy) {
    write_toy_cache(*st.exp.toy, base, cfg);
  } else {
    write_corpus_cache(st.exp.regime ? st.exp.regime->corpus : *st.exp.corpus, base, cfg);
  }
  Trainer trainer(*st.exp.model, config.trainer, config.seed);
  RunRecord rec = train_loop(st, trainer, true);
  if (auto b = st.exp.bayes_nll()) {
    json j = rec.to_json();
    j["summary"]["bayes_nll"] = *b;
    write_text_atomic(rec.output_dir / "run.json", j.dump(2) + "\n");
  }
  return rec;
}

RunRecord resume_experiment(const std::filesystem::path& checkpoint,
                            const std::vector<std::string>& overrides) {
  const Checkpoint ck = read_checkpoint(checkpoint);
  check_version(ck);
  json cfg = json::parse(ck.config_json);
  static const std::set<std::string> allowed = {
      "trainer.max_iterations", "checkpoint_interval", "diagnostics.interval",
      "diagnostics.probe_batch", "diagnostics.export_interval", "diagnostics.context_per_module"};
  for (const auto& o : overrides) {
    const std::string key = o.substr(0, o.find('='));
    if (!allowed.count(key)) throw ConfigError(key, "cannot be changed when resuming");
    apply_override(cfg, o);
  }
  const ExperimentConfig config = parse_config(cfg);
  if (config.trainer.max_iterations < ck.trainer.iteration) {
    throw ConfigError("trainer.max_iterations", "is below the checkpoint iteration");
  }
  RunState st = prepare(config);
  load_params(st.exp.model->params(), ck);
  Trainer trainer(*st.exp.model, config.trainer, config.seed);
  trainer.restore(ck.trainer);
  return train_loop(st, trainer, false);
}

EvalMetrics evaluate_checkpoint(const std::filesystem::path& checkpoint,
                                const std::filesystem::path& dataset, EvalMode mode,
                                std::size_t budget) {
  const Checkpoint ck = read_checkpoint(checkpoint);
  check_version(ck);
  const ExperimentConfig config = parse_config(json::parse(ck.config_json));
  std::filesystem::path base = dataset;
  if (base.extension() == ".json" || base.extension() == ".bin") base.replace_extension();
  auto model = build_model(config, base);
  load_params(model->params(), ck);
  std::vector<std::size_t> all(model->num_datapoints());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return model->evaluate(all, mode, budget);
}

std::vector<json> expand_sweep(const json& grid, const std::filesystem::path& base_dir) {
  if (!grid.is_object() || !grid.contains("base") || !grid.contains("grid")) {
    throw ConfigError("sweep", "needs \"base\" and \"grid\"");
  }
  for (const auto& [key, v] : grid.items()) {
    if (key != "base" && key != "grid") throw ConfigError("sweep." + key, "unknown key");
  }
  json base = grid.at("base");
  if (base.is_string()) base = load_json_file(base_dir / base.get<std::string>());
  if (!base.is_object()) throw ConfigError("sweep.base", "must be a config object or path");
  const json& axes = grid.at("grid");
  if (!axes.is_object() || axes.empty()) throw ConfigError("sweep.grid", "must be a non-empty object");

  std::vector<std::pair<std::string, std::vector<json>>> dims;
  for (const auto& [key, values] : axes.items()) {
    if (!values.is_array() || values.empty()) {
      throw ConfigError("sweep.grid." + key, "must be a non-empty array");
    }
    dims.emplace_back(key, std::vector<json>(values.begin(), values.end()));
  }
  const std::string base_out = base.value("output_dir", std::string("runs/sweep"));
  std::vector<json> out;
  std::vector<std::size_t> pos(dims.size(), 0);
  while (true) {
    json cfg = base;
    std::string suffix;
    for (std::size_t d = 0; d < dims.size(); ++d) {
      const json& v = dims[d].second[pos[d]];
      apply_override(cfg, dims[d].first + "=" + v.dump());
      const std::string text = v.is_string() ? v.get<std::string>() : v.dump();
      suffix += (suffix.empty() ? "" : ",") + dims[d].first + "=" + text;
    }
    cfg["output_dir"] = base_out + "/" + sanitize(suffix);
    parse_config(cfg);
    out.push_back(std::move(cfg));
    std::size_t d = dims.size();
    while (d > 0) {
      --d;
      if (++pos[d] < dims[d].second.size()) break;
      pos[d] = 0;
      if (d == 0) return out;
    }
  }
}

}  // namespace modnet
