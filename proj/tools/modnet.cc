// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line runner. Exit codes: 0 success, 1 other failure, 2 invalid
// config or rejected request, 3 numeric abort.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "modnet/error.h"
#include "modnet/experiment.h"

namespace {

void print_summary(const modnet::RunRecord& rec) {
  const auto& s = rec.summary;
  std::cout << "run complete: " << rec.output_dir.string() << "\n"
            << "  iterations " << s.iterations << "  objective " << s.final_objective << "  H_a "
            << s.h_a << "  H_b " << s.h_b << "\n"
            << "  eval " << modnet::eval_json(s.eval).dump() << "\n";
}

modnet::ExperimentConfig load(const std::string& path, const std::vector<std::string>& sets) {
  nlohmann::json j = modnet::load_json_file(path);
  for (const auto& s : sets) modnet::apply_override(j, s);
  return modnet::parse_config(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modular networks trained with generalized Viterbi EM"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, dataset, grid_path, mode = "most-likely";
  std::vector<std::string> sets;
  std::size_t budget = 10000;
  bool dry_run = false;

  auto* run = app.add_subcommand("run", "train one experiment config");
  run->add_option("config", config_path, "config JSON")->required();
  run->add_option("--set", sets, "override a dotted key, e.g. trainer.S=10");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset cache");
  eval->add_option("checkpoint", checkpoint)->required();
  eval->add_option("dataset", dataset, "dataset cache base or its .json sidecar")->required();
  eval->add_option("--mode", mode)->check(CLI::IsMember({"most-likely", "enumerate"}));
  eval->add_option("--budget", budget, "composition budget for enumerate mode");

  auto* resume = app.add_subcommand("resume", "continue training from a checkpoint");
  resume->add_option("checkpoint", checkpoint)->required();
  resume->add_option("--set", sets, "schedule override, e.g. trainer.max_iterations=40000");

  auto* sweep = app.add_subcommand("sweep", "run every point of a grid file");
  sweep->add_option("grid", grid_path)->required();
  sweep->add_flag("--dry-run", dry_run, "print the expanded configs only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (run->parsed()) {
      print_summary(modnet::run_experiment(load(config_path, sets)));
    } else if (resume->parsed()) {
      print_summary(modnet::resume_experiment(checkpoint, sets));
    } else if (eval->parsed()) {
      const auto m = modnet::evaluate_checkpoint(
          checkpoint, dataset,
          mode == "enumerate" ? modnet::EvalMode::kEnumerate : modnet::EvalMode::kMostLikely,
          budget);
      std::cout << modnet::eval_json(m).dump() << "\n";
    } else if (sweep->parsed()) {
      const auto configs = modnet::expand_sweep(
          modnet::load_json_file(grid_path), std::filesystem::path(grid_path).parent_path());
      for (const auto& c : configs) {
        if (dry_run) {
          std::cout << c.dump() << "\n";
          continue;
        }
        std::cout << "== " << c.at("output_dir").get<std::string>() << "\n";
        print_summary(modnet::run_experiment(modnet::parse_config(c)));
      }
    }
  } catch (const modnet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const modnet::BudgetError& e) {
    std::cerr << "rejected: " << e.what() << "\n";
    return 2;
  } catch (const modnet::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
