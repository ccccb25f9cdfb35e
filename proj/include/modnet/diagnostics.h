// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Selection entropies and file exports for inspecting module usage.
//
// Entropies use natural logarithms. With K > 1 heads per layer, the entropy
// of each head is computed separately and the K values are averaged before
// averaging over layers.

#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "modnet/modular.h"

namespace modnet {

/// Controller probability vectors for a batch of datapoints.
struct SelectionSnapshot {
  std::size_t rows = 0;
  std::size_t layers = 0;
  std::size_t slots = 0;
  std::size_t modules = 0;
  /// rows x layers x slots x modules, row-major.
  std::vector<double> probs;
  /// rows x layers x slots chosen module indices.
  std::vector<int> chosen;

  SelectionSnapshot() = default;
  SelectionSnapshot(std::size_t rows, std::size_t layers, std::size_t slots, std::size_t modules);

  std::span<double> dist(std::size_t n, std::size_t l, std::size_t k);
  std::span<const double> dist(std::size_t n, std::size_t l, std::size_t k) const;
  int& choice(std::size_t n, std::size_t l, std::size_t k) {
    return chosen[(n * layers + l) * slots + k];
  }

  /// Throws NumericError if any distribution fails to sum to 1 within 1e-9.
  void validate() const;
};

double entropy(std::span<const double> p);

/// H_a: mean over layers and datapoints of the per-datapoint selection entropy.
double module_selection_entropy(const SelectionSnapshot& s);
/// H_b: mean over layers of the entropy of the batch-averaged distribution.
double batch_selection_entropy(const SelectionSnapshot& s);

/// Binary PGM (P5): rows = datapoints, columns = modules, pixel = round(255 p).
/// Requires a single-slot snapshot.
void export_decision_matrix(const SelectionSnapshot& s, const std::filesystem::path& path,
                            std::size_t layer = 0);

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<unsigned char> pixels;
};
GrayImage read_pgm(const std::filesystem::path& path);

/// Node usage and transition counts of single-slot module paths.
struct PathTrace {
  std::size_t layers = 0;
  std::size_t modules = 0;
  /// usage[l * modules + m]
  std::vector<std::size_t> usage;
  /// edges[(l * modules + m) * modules + m2] counts m at layer l then m2 at l+1.
  std::vector<std::size_t> edges;
};
PathTrace build_path_trace(std::span<const Composition> assignments, std::size_t modules);

/// Graphviz DOT digraph of a path trace. Node width scales with usage and
/// edge penwidth with the transition count.
void export_path_trace(std::span<const Composition> assignments, std::size_t modules,
                       const std::filesystem::path& path, const std::string& label);

/// One token-context line, grouped later by the selected module.
struct ContextSample {
  int module = 0;
  std::string text;
};
/// Plain-text listing of contexts per module.
void write_context_dump(std::span<const ContextSample> samples, std::size_t modules,
                        std::size_t per_module, const std::filesystem::path& path);

}  // namespace modnet
