// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: JSON configs, dataset and model construction,
// the training loop with metrics and exports, evaluation, and resume.
//
// A run directory holds:
//   config.json      resolved config (every default filled in)
//   metrics.jsonl    one line per diagnostics interval; byte-deterministic
//   timing.jsonl     wall-clock seconds per metrics line
//   dataset.{bin,json}
//   checkpoints/     ckpt-<iteration>.bin
//   exports/         decision matrices, path traces, context dumps
//   run.json         RunRecord, written last

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "modnet/data.h"
#include "modnet/gru.h"
#include "modnet/model.h"
#include "modnet/trainer.h"

namespace modnet {

inline constexpr const char* kLibraryVersion = "0.1.0";

enum class Task { kToyRegression, kTwoRegimeLm, kTextLm };

struct DataSection {
  ToyConfig toy;
  TwoRegimeConfig regime;
  std::string text_path;
  TokenMode text_mode = TokenMode::kChar;
  std::size_t unroll = 35;
  std::size_t vocab_cap = 10000;
};

struct ModelSection {
  std::size_t layers = 1;
  std::size_t modules = 2;
  std::size_t slots = 1;
  std::size_t hidden = 8;
  std::size_t embedding = 32;
  Combine combine = Combine::kSum;
  ModuleKind module_kind = ModuleKind::kLinear;
  /// Noisy top-k only; defaults to min(4, modules).
  std::size_t topk = 1;
  /// Static routing only; empty selects module 0 in every slot.
  std::vector<int> static_indices;
};

struct DiagnosticsSection {
  std::uint64_t interval = 100;
  std::size_t probe_batch = 256;
  /// Exports every this many iterations; 0 exports only at the end.
  std::uint64_t export_interval = 0;
  std::size_t context_per_module = 20;
};

struct ExperimentConfig {
  Task task = Task::kToyRegression;
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  DataSection data;
  ModelSection model;
  TrainerConfig trainer;
  /// Checkpoint every this many iterations; 0 writes only the final one.
  std::uint64_t checkpoint_interval = 0;
  DiagnosticsSection diagnostics;
  EvalMode eval_mode = EvalMode::kMostLikely;
  std::size_t eval_budget = 10000;
};

const char* task_name(Task t);

/// Parses and validates. Unknown keys and out-of-range values raise
/// ConfigError naming the dotted field. Missing keys take their defaults.
ExperimentConfig parse_config(const nlohmann::json& j);
/// Every field, including defaults. parse_config(to_json(c)) == c.
nlohmann::json to_json(const ExperimentConfig& c);

/// Applies `key=value` with a dotted key. The value is parsed as JSON, and
/// taken as a plain string when that fails.
void apply_override(nlohmann::json& j, const std::string& assignment);

nlohmann::json load_json_file(const std::filesystem::path& path);

/// Relative output directories resolve under $MODNET_OUTPUT_ROOT when set.
std::filesystem::path resolve_output_dir(const std::string& dir);

/// Dataset plus model for one config.
struct Experiment {
  ExperimentConfig config;
  std::optional<ToyDataset> toy;
  std::optional<TwoRegimeCorpus> regime;
  std::optional<Corpus> corpus;
  std::unique_ptr<LatentModel> model;

  /// Bayes-optimal per-token NLL of the two-regime training windows.
  std::optional<double> bayes_nll() const;
};

Experiment build_experiment(const ExperimentConfig& config);
/// Model for `config` over an already loaded dataset cache.
std::unique_ptr<LatentModel> build_model(const ExperimentConfig& config,
                                         const std::filesystem::path& dataset_base);

nlohmann::json eval_json(const EvalMetrics& m);

struct RunSummary {
  std::uint64_t iterations = 0;
  double final_objective = 0.0;
  double h_a = 0.0;
  double h_b = 0.0;
  EvalMetrics eval;
};

struct RunRecord {
  nlohmann::json config;
  std::string library_version;
  std::filesystem::path output_dir;
  std::filesystem::path metrics_path;
  std::vector<std::filesystem::path> checkpoints;
  std::vector<std::filesystem::path> exports;
  bool completed = false;
  std::string failure;
  RunSummary summary;

  nlohmann::json to_json() const;
};

/// Trains `config` from scratch into its output directory.
RunRecord run_experiment(const ExperimentConfig& config);

/// Continues from a checkpoint. Only schedule fields may be overridden:
/// trainer.max_iterations, checkpoint_interval, and diagnostics.*.
RunRecord resume_experiment(const std::filesystem::path& checkpoint,
                            const std::vector<std::string>& overrides);

/// Evaluates a checkpoint on a dataset cache (`<base>` or `<base>.json`).
EvalMetrics evaluate_checkpoint(const std::filesystem::path& checkpoint,
                                const std::filesystem::path& dataset, EvalMode mode,
                                std::size_t budget);

/// Expands {"base": <config or path>, "grid": {"dotted.key": [values...]}}
/// into one config per grid point, output directories suffixed by the point.
std::vector<nlohmann::json> expand_sweep(const nlohmann::json& grid,
                                         const std::filesystem::path& base_dir);

}  // namespace modnet
