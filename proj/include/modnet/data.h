// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "modnet/rng.h"
#include "modnet/tensor.h"

namespace modnet {

// ---------------------------------------------------------------------------
// Toy regression: a two-component Gaussian mixture whose targets are a
// rotation of the input for component 1 and a diagonal scaling otherwise.

struct ToyConfig {
  std::size_t dim = 2;
  std::vector<double> mean1 = {-2.0, 0.0};
  std::vector<double> mean2 = {2.0, 0.0};
  /// dim x dim covariance matrices; empty means 0.25 * I.
  std::vector<std::vector<double>> cov1;
  std::vector<std::vector<double>> cov2;
  double scale_min = 0.5;
  double scale_max = 2.0;
  std::size_t n = 2000;
  std::uint64_t seed = 1;
};

struct ToyDataset {
  Tensor x;  // [N, d]
  Tensor y;  // [N, d]
  /// Generating component per datapoint (1 or 2). Never shown to trainers.
  std::vector<int> component;
  Tensor rotation;  // [d, d]
  Tensor scaling;   // [d, d] diagonal
};

ToyDataset gen_toy_regression(const ToyConfig& config);

/// Uniformly distributed rotation (orthogonal, det +1) from the QR
/// factorization of a Gaussian matrix.
Tensor random_rotation(std::size_t d, std::uint64_t seed);
Tensor random_rotation(std::size_t d, Rng& rng);

/// Lower Cholesky factor; throws ConfigError if `cov` is not positive definite.
Tensor cholesky_factor(const Tensor& cov, const std::string& field);
double determinant(const Tensor& m);

// ---------------------------------------------------------------------------
// Token corpora split into fixed-length, non-overlapping windows.

enum class TokenMode { kChar, kWord };

struct Corpus {
  std::vector<std::size_t> ids;
  std::vector<std::string> vocab;
  std::size_t unroll = 35;
  /// Window n reads inputs ids[s, s+unroll) and targets ids[s+1, s+unroll].
  std::vector<std::size_t> window_starts;
  /// Word types folded into <unk> by the vocabulary cap.
  std::size_t replaced_types = 0;

  std::size_t vocab_size() const { return vocab.size(); }
  std::size_t num_windows() const { return window_starts.size(); }
};

inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kEosToken = "<eos>";

/// Ids are assigned by descending frequency, ties broken lexicographically.
/// Word mode splits on whitespace, appends <eos> per line, and reserves ids 0
/// and 1 for <unk> and <eos>; `vocab_cap` bounds the number of other word
/// types. Char mode maps bytes and rejects more than `vocab_cap` symbols.
Corpus tokenize(std::string_view text, TokenMode mode, std::size_t unroll,
                std::size_t vocab_cap = 10000);
Corpus load_corpus(const std::filesystem::path& path, TokenMode mode, std::size_t unroll,
                   std::size_t vocab_cap = 10000);
void build_windows(Corpus& corpus, std::size_t unroll);

// ---------------------------------------------------------------------------
// Two-regime Markov sequences.
//
// Every window opens with a regime marker. Inside a window each step either
// switches regime (probability `switch_prob`, emitting the new regime's
// marker) or emits a symbol: uniform right after a marker, otherwise drawn
// from the active regime's transition table given the previous symbol.

struct TwoRegimeConfig {
  std::size_t symbols = 6;
  std::size_t regimes = 2;
  /// Probability mass each table puts on its preferred successor.
  double peak = 0.9;
  double switch_prob = 0.05;
  std::size_t unroll = 35;
  std::size_t windows = 256;
  std::uint64_t seed = 1;
  /// Optional explicit tables, one [symbols, symbols] row-stochastic matrix
  /// per regime. Generated from `seed` when empty.
  std::vector<Tensor> tables;
};

struct TwoRegimeCorpus {
  Corpus corpus;
  std::vector<Tensor> tables;
  /// Active regime when each position's token was emitted.
  std::vector<int> regime;
  /// log p(ids[i+1] | in-window history) under the generating process.
  std::vector<double> true_log_prob;

  std::size_t marker(std::size_t r) const { return tables.at(0).rows() + r; }
};

TwoRegimeCorpus gen_two_regime_sequences(const TwoRegimeConfig& config);

/// Bayes-optimal mean per-token NLL over all window targets of the corpus.
double empirical_bayes_nll(const TwoRegimeCorpus& data);
/// Expected Bayes-optimal per-token NLL of the generating process, by exact
/// propagation of the (regime, previous token) state distribution.
double expected_bayes_nll(const TwoRegimeConfig& config, const std::vector<Tensor>& tables);

/// Row-stochastic tables with distinct preferred successors per regime.
std::vector<Tensor> make_regime_tables(std::size_t symbols, std::size_t regimes, double peak,
                                       Rng& rng);

// ---------------------------------------------------------------------------
// Dataset cache: `<base>.bin` holds little-endian doubles, `<base>.json`
// describes the layout and the generating config.

void write_toy_cache(const ToyDataset& data, const std::filesystem::path& base,
                     const std::string& config_json);
ToyDataset read_toy_cache(const std::filesystem::path& base);
void write_corpus_cache(const Corpus& corpus, const std::filesystem::path& base,
                        const std::string& config_json);
Corpus read_corpus_cache(const std::filesystem::path& base);
/// "regression" or "corpus".
std::string cache_kind(const std::filesystem::path& base);

}  // namespace modnet
