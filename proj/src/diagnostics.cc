// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "modnet/diagnostics.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "modnet/error.h"

namespace modnet {

SelectionSnapshot::SelectionSnapshot(std::size_t rows, std::size_t layers, std::size_t slots,
                                     std::size_t modules)
    : rows(rows),
      layers(layers),
      slots(slots),
      modules(modules),
      probs(rows * layers * slots * modules, 0.0),
      chosen(rows * layers * slots, 0) {}

std::span<double> SelectionSnapshot::dist(std::size_t n, std::size_t l, std::size_t k) {
  return std::span<double>(probs).subspan(((n * layers + l) * slots + k) * modules, modules);
}

std::span<const double> SelectionSnapshot::dist(std::size_t n, std::size_t l,
                                                std::size_t k) const {
  return std::span<const double>(probs).subspan(((n * layers + l) * slots + k) * modules,
                                                modules);
}

void SelectionSnapshot::validate() const {
  for (std::size_t n = 0; n < rows; ++n)
    for (std::size_t l = 0; l < layers; ++l)
      for (std::size_t k = 0; k < slots; ++k) {
        double s = 0.0;
        for (double v : dist(n, l, k)) {
          if (!(v >= 0.0)) throw NumericError("snapshot: negative or NaN probability");
          s += v;
        }
        if (std::abs(s - 1.0) > 1e-9) {
          std::ostringstream os;
          os << "snapshot: distribution (" << n << ',' << l << ',' << k << ") sums to " << s;
          throw NumericError(os.str());
        }
      }
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

double module_selection_entropy(const SelectionSnapshot& s) {
  if (s.rows == 0) throw Error("module_selection_entropy: empty snapshot");
  double total = 0.0;
  for (std::size_t l = 0; l < s.layers; ++l)
    for (std::size_t n = 0; n < s.rows; ++n) {
      double head_avg = 0.0;
      for (std::size_t k = 0; k < s.slots; ++k) head_avg += entropy(s.dist(n, l, k));
      total += head_avg / static_cast<double>(s.slots);
    }
  return total / static_cast<double>(s.rows * s.layers);
}

double batch_selection_entropy(const SelectionSnapshot& s) {
  if (s.rows == 0) throw Error("batch_selection_entropy: empty snapshot");
  double total = 0.0;
  std::vector<double> mean(s.modules);
  for (std::size_t l = 0; l < s.layers; ++l) {
    double head_avg = 0.0;
    for (std::size_t k = 0; k < s.slots; ++k) {
      std::fill(mean.begin(), mean.end(), 0.0);
      for (std::size_t n = 0; n < s.rows; ++n) {
        const auto d = s.dist(n, l, k);
        for (std::size_t m = 0; m < s.modules; ++m) mean[m] += d[m];
      }
      for (auto& v : mean) v /= static_cast<double>(s.rows);
      head_avg += entropy(mean);
    }
    total += head_avg / static_cast<double>(s.slots);
  }
  return total / static_cast<double>(s.layers);
}

namespace {

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, mode);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  return f;
}

}  // namespace

void export_decision_matrix(const SelectionSnapshot& s, const std::filesystem::path& path,
                            std::size_t layer) {
  if (s.slots != 1) throw Error("export_decision_matrix: requires a single-slot snapshot");
  if (layer >= s.layers) throw IndexError("export_decision_matrix: layer out of range");
  auto f = open_out(path, std::ios::binary);
  f << "P5\n" << s.modules << ' ' << s.rows << "\n255\n";
  std::vector<unsigned char> row(s.modules);
  for (std::size_t n = 0; n < s.rows; ++n) {
    const auto d = s.dist(n, layer, 0);
    for (std::size_t m = 0; m < s.modules; ++m) {
      row[m] = static_cast<unsigned char>(std::lround(255.0 * std::clamp(d[m], 0.0, 1.0)));
    }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw Error("write failed for '" + path.string() + "'");
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path.string() + "'");
  std::string magic;
  GrayImage img;
  int maxval = 0;
  f >> magic >> img.width >> img.height >> maxval;
  if (magic != "P5" || maxval != 255) throw Error("'" + path.string() + "' is not an 8-bit P5 PGM");
  f.get();
  img.pixels.resize(img.width * img.height);
  f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw Error("'" + path.string() + "' is truncated");
  return img;
}

PathTrace build_path_trace(std::span<const Composition> assignments, std::size_t modules) {
  PathTrace t;
  if (assignments.empty()) return t;
  t.layers = assignments[0].positions;
  t.modules = modules;
  t.usage.assign(t.layers * modules, 0);
  t.edges.assign(t.layers * modules * modules, 0);
  for (const auto& a : assignments) {
    if (a.slots != 1 || a.positions != t.layers) {
      throw Error("path trace: requires single-slot compositions of equal depth");
    }
    for (std::size_t l = 0; l < t.layers; ++l) {
      const auto m = static_cast<std::size_t>(a.at(l, 0));
      if (m >= modules) throw IndexError("path trace: module index out of range");
      ++t.usage[l * modules + m];
      if (l + 1 < t.layers) {
        const auto m2 = static_cast<std::size_t>(a.at(l + 1, 0));
        ++t.edges[(l * modules + m) * modules + m2];
      }
    }
  }
  return t;
}

void export_path_trace(std::span<const Composition> assignments, std::size_t modules,
                       const std::filesystem::path& path, const std::string& label) {
  const PathTrace t = build_path_trace(assignments, modules);
  const double n = std::max<double>(1.0, static_cast<double>(assignments.size()));
  auto f = open_out(path, std::ios::out);
  f << "digraph paths {\n";
  f << "  label=\"" << label << "\";\n  rankdir=LR;\n";
  for (std::size_t l = 0; l < t.layers; ++l)
    for (std::size_t m = 0; m < modules; ++m) {
      const std::size_t u = t.usage[l * modules + m];
      f << "  \"l" << l << "_m" << m << "\" [usage=" << u << ", width="
        << 0.2 + 1.8 * static_cast<double>(u) / n << ", label=\"" << m << "\"];\n";
    }
  for (std::size_t l = 0; l + 1 < t.layers; ++l)
    for (std::size_t m = 0; m < modules; ++m)
      for (std::size_t m2 = 0; m2 < modules; ++m2) {
        const std::size_t w = t.edges[(l * modules + m) * modules + m2];
        if (w == 0) continue;
        f << "  \"l" << l << "_m" << m << "\" -> \"l" << l + 1 << "_m" << m2 << "\" [weight=" << w
          << ", penwidth=" << 0.5 + 8.0 * static_cast<double>(w) / n << "];\n";
      }
  f << "}\n";
  if (!f) throw Error("write failed for '" + path.string() + "'");
}

void write_context_dump(std::span<const ContextSample> samples, std::size_t modules,
                        std::size_t per_module, const std::filesystem::path& path) {
  std::vector<std::vector<const ContextSample*>> by_module(modules);
  for (const auto& s : samples) {
    auto& bucket = by_module.at(static_cast<std::size_t>(s.module));
    if (bucket.size() < per_module) bucket.push_back(&s);
  }
  std::vector<std::size_t> counts(modules, 0);
  for (const auto& s : samples) ++counts[static_cast<std::size_t>(s.module)];
  auto f = open_out(path, std::ios::out);
  for (std::size_t m = 0; m < modules; ++m) {
    f << "== module " << m << " (" << counts[m] << " selections)\n";
    for (const auto* s : by_module[m]) f << "  " << s->text << '\n';
  }
}

}  // namespace modnet
