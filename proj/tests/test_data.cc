// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "modnet/data.h"
#include "modnet/error.h"
#include "test_util.h"

namespace modnet {
namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

Tensor transpose_times(const Tensor& a, const Tensor& b) {
  Tensor out({a.cols(), b.cols()});
  for (std::size_t i = 0; i < a.cols(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j)
      for (std::size_t k = 0; k < a.rows(); ++k) out.at(i, j) += a.at(k, i) * b.at(k, j);
  return out;
}

TEST(Rotation, OrthogonalWithUnitDeterminant) {
  for (std::size_t d : {2u, 3u, 5u, 8u}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const Tensor r = random_rotation(d, seed);
      const Tensor rtr = transpose_times(r, r);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(rtr.at(i, j), i == j ? 1.0 : 0.0, 1e-9);
      EXPECT_NEAR(determinant(r), 1.0, 1e-6);
      EXPECT_EQ(r.storage(), random_rotation(d, seed).storage());
    }
  }
}

TEST(Rotation, TwoDimensionalFormIsCosSin) {
  const Tensor r = random_rotation(2, 3);
  EXPECT_NEAR(r.at(1, 1), r.at(0, 0), 1e-12);
  EXPECT_NEAR(r.at(1, 0), -r.at(0, 1), 1e-12);
  const double alpha = std::atan2(r.at(1, 0), r.at(0, 0));
  EXPECT_NEAR(r.at(0, 0), std::cos(alpha), 1e-12);
  EXPECT_NEAR(r.at(0, 1), -std::sin(alpha), 1e-12);
}

TEST(ToyRegression, TargetsFollowTheGeneratingComponent) {
  ToyConfig c;
  c.dim = 3;
  c.mean1 = {-2, 0, 0};
  c.mean2 = {2, 0, 0};
  c.n = 500;
  const ToyDataset d = gen_toy_regression(c);
  for (std::size_t n = 0; n < c.n; ++n) {
    const auto x = d.x.values().subspan(n * 3, 3);
    const auto y = d.y.values().subspan(n * 3, 3);
    if (d.component[n] == 1) {
      EXPECT_NEAR(norm(y), norm(x), 1e-9);
    } else {
      ASSERT_EQ(d.component[n], 2);
      for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y[i], d.scaling.at(i, i) * x[i], 1e-12);
    }
  }
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_GE(d.scaling.at(i, i), c.scale_min);
    EXPECT_LE(d.scaling.at(i, i), c.scale_max);
    for (std::size_t j = 0; j < 3; ++j)
      if (i != j) EXPECT_EQ(d.scaling.at(i, j), 0.0);
  }
}

TEST(ToyRegression, ComponentFrequencyWithinThreeSigma) {
  ToyConfig c;
  c.n = 10000;
  const ToyDataset d = gen_toy_regression(c);
  double ones = 0;
  for (int s : d.component) ones += s == 1;
  EXPECT_LT(std::abs(ones - 5000.0), 3.0 * std::sqrt(10000 * 0.25));
}

TEST(ToyRegression, ClusterMeansAndSpreadMatchConfig) {
  ToyConfig c;
  c.n = 4000;
  const ToyDataset d = gen_toy_regression(c);
  double sum[2][2] = {}, sq[2] = {}, cnt[2] = {};
  for (std::size_t n = 0; n < c.n; ++n) {
    const int s = d.component[n] - 1;
    cnt[s] += 1;
    for (int i = 0; i < 2; ++i) sum[s][i] += d.x.at(n, i);
    sq[s] += std::pow(d.x.at(n, 1), 2);
  }
  EXPECT_NEAR(sum[0][0] / cnt[0], -2.0, 0.05);
  EXPECT_NEAR(sum[1][0] / cnt[1], 2.0, 0.05);
  EXPECT_NEAR(sq[0] / cnt[0], 0.25, 0.03);
}

TEST(ToyRegression, DeterministicAndRejectsIndefiniteCovariance) {
  ToyConfig c;
  c.n = 50;
  EXPECT_EQ(gen_toy_regression(c).y.storage(), gen_toy_regression(c).y.storage());
  c.cov1 = {{1.0, 2.0}, {2.0, 1.0}};
  EXPECT_THROW(gen_toy_regression(c), ConfigError);
}

TEST(Tokenizer, CharModeOrdersByFrequencyThenBytes) {
  const Corpus c = tokenize("aab", TokenMode::kChar, 1);
  EXPECT_EQ(c.vocab, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(c.ids, (std::vector<std::size_t>{0, 0, 1}));
  const Corpus tie = tokenize("cba", TokenMode::kChar, 1);
  EXPECT_EQ(tie.vocab, (std::vector<std::string>{"a", "b", "c"}));
}

TEST(Tokenizer, WordModeCapsVocabularyWithUnk) {
  const Corpus c = tokenize("x y y\nz z y\n", TokenMode::kWord, 2, 2);
  EXPECT_EQ(c.vocab, (std::vector<std::string>{"<unk>", "<eos>", "y", "z"}));
  EXPECT_EQ(c.replaced_types, 1u);
  EXPECT_EQ(c.ids, (std::vector<std::size_t>{0, 2, 2, 1, 3, 3, 2, 1}));
}

TEST(Tokenizer, WindowsAreNonOverlappingAndInRange) {
  const Corpus c = tokenize("the quick brown fox jumps over the lazy dog", TokenMode::kChar, 5);
  ASSERT_GT(c.num_windows(), 0u);
  for (std::size_t w = 0; w < c.num_windows(); ++w) {
    EXPECT_EQ(c.window_starts[w], w * 5);
    EXPECT_LE(c.window_starts[w] + 5, c.ids.size() - 1);
  }
  for (auto id : c.ids) EXPECT_LT(id, c.vocab_size());
}

TEST(Tokenizer, ReloadIsIdenticalAndErrorsAreExplicit) {
  const auto dir = testing::scratch_dir("tok");
  {
    std::ofstream(dir / "t.txt") << "to be or not to be\nthat is the question\n";
    std::ofstream(dir / "empty.txt");
  }
  const Corpus a = load_corpus(dir / "t.txt", TokenMode::kWord, 3);
  const Corpus b = load_corpus(dir / "t.txt", TokenMode::kWord, 3);
  EXPECT_EQ(a.ids, b.ids);
  EXPECT_EQ(a.vocab, b.vocab);
  EXPECT_EQ(a.window_starts, b.window_starts);
  EXPECT_THROW(load_corpus(dir / "empty.txt", TokenMode::kChar, 3), Error);
  EXPECT_THROW(load_corpus(dir / "missing.txt", TokenMode::kChar, 3), Error);
  EXPECT_THROW(tokenize("abcdef", TokenMode::kChar, 1, 3), ConfigError);
}

// Log-prob of each target recomputed from the documented process.
double oracle_empirical_nll(const TwoRegimeCorpus& d, const TwoRegimeConfig& c) {
  const std::size_t s = c.symbols, r = c.regimes;
  const double q = r > 1 ? c.switch_prob : 0.0;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t w = 0; w < d.corpus.num_windows(); ++w) {
    const std::size_t st = d.corpus.window_starts[w];
    for (std::size_t i = st + 1; i <= st + c.unroll; ++i) {
      const std::size_t tok = d.corpus.ids[i], prev = d.corpus.ids[i - 1];
      double lp;
      if (i % c.unroll == 0) {
        lp = -std::log(static_cast<double>(r));
      } else if (tok >= s) {
        lp = std::log(q / static_cast<double>(r - 1));
      } else if (prev >= s) {
        lp = std::log((1.0 - q) / static_cast<double>(s));
      } else {
        lp = std::log((1.0 - q) * d.tables[static_cast<std::size_t>(d.regime[i])].at(prev, tok));
      }
      total -= lp;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// Closed form for doubly stochastic tables: the previous-symbol marginal
// stays uniform, so only "previous token was a marker" matters.
double oracle_entropy_rate(const TwoRegimeConfig& c, const std::vector<Tensor>& tables) {
  const double s = static_cast<double>(c.symbols), r = static_cast<double>(c.regimes);
  const double q = c.regimes > 1 ? c.switch_prob : 0.0;
  double row_h = 0.0;
  for (const auto& t : tables)
    for (std::size_t a = 0; a < c.symbols; ++a)
      for (std::size_t b = 0; b < c.symbols; ++b) row_h -= t.at(a, b) * std::log(t.at(a, b));
  row_h /= s * r;
  const double h_switch = q > 0 ? -q * std::log(q / (r - 1)) : 0.0;
  const double h_after_marker = h_switch - (1 - q) * std::log((1 - q) / s);
  const double h_after_symbol = h_switch - (1 - q) * std::log(1 - q) + (1 - q) * row_h;
  const double t = static_cast<double>(c.unroll);
  const double inner = (t - 2) * (q * h_after_marker + (1 - q) * h_after_symbol);
  return (h_after_marker + inner + std::log(r)) / t;
}

TEST(TwoRegime, EmpiricalBayesMatchesIndependentRecount) {
  for (double q : {0.0, 0.05, 0.3}) {
    TwoRegimeConfig c;
    c.switch_prob = q;
    c.windows = 64;
    c.seed = 3;
    const auto d = gen_two_regime_sequences(c);
    EXPECT_NEAR(empirical_bayes_nll(d), oracle_empirical_nll(d, c), 1e-12) << q;
  }
}

TEST(TwoRegime, ExpectedBayesMatchesEntropyRateClosedForm) {
  for (std::size_t symbols : {3u, 6u, 12u})
    for (double q : {0.0, 0.05, 0.2}) {
      TwoRegimeConfig c;
      c.symbols = symbols;
      c.switch_prob = q;
      c.unroll = 20;
      Rng rng(4, Stream::kTest);
      const auto tables = make_regime_tables(symbols, 2, 0.85, rng);
      EXPECT_NEAR(expected_bayes_nll(c, tables), oracle_entropy_rate(c, tables), 1e-12);
    }
}

TEST(TwoRegime, EmpiricalConvergesToExpected) {
  TwoRegimeConfig c;
  c.windows = 4000;
  const auto d = gen_two_regime_sequences(c);
  EXPECT_NEAR(empirical_bayes_nll(d), expected_bayes_nll(c, d.tables), 0.01);
}

TEST(TwoRegime, BigramFrequenciesMatchTablesWithinThreeSigma) {
  TwoRegimeConfig c;
  c.symbols = 4;
  c.windows = 3000;
  const auto d = gen_two_regime_sequences(c);
  // counts[r][a][b] over in-regime symbol pairs.
  std::vector<double> counts(2 * 16, 0.0), rows(2 * 4, 0.0);
  const auto& ids = d.corpus.ids;
  for (std::size_t i = 1; i < ids.size(); ++i) {
    if (ids[i] >= 4 || ids[i - 1] >= 4) continue;
    const auto r = static_cast<std::size_t>(d.regime[i]);
    counts[r * 16 + ids[i - 1] * 4 + ids[i]] += 1;
    rows[r * 4 + ids[i - 1]] += 1;
  }
  // The 3-sigma level (two-sided 0.27%) is held family-wise over the 32
  // cells by Bonferroni, which puts the per-cell bound at 4.0 sigma.
  double z2 = 0.0, expected_z2 = 0.0;
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t b = 0; b < 4; ++b) {
        const double n = rows[r * 4 + a], p = d.tables[r].at(a, b);
        const double z = (counts[r * 16 + a * 4 + b] - n * p) / std::sqrt(n * p * (1 - p));
        EXPECT_LT(std::abs(z), 4.0) << r << " " << a << " " << b;
        z2 += z * z;
        expected_z2 += 1.0;
      }
  // Pooled check: mean squared z is 1 in expectation per cell.
  EXPECT_LT(std::abs(z2 / expected_z2 - 1.0), 0.6);
}

TEST(TwoRegime, TablesAreStochasticWithDistinctPreferences) {
  Rng rng(5, Stream::kTest);
  const auto t = make_regime_tables(6, 2, 0.9, rng);
  for (const auto& tab : t)
    for (std::size_t a = 0; a < 6; ++a) {
      double s = 0.0;
      for (std::size_t b = 0; b < 6; ++b) s += tab.at(a, b);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  for (std::size_t a = 0; a < 6; ++a) {
    std::size_t best0 = 0, best1 = 0;
    for (std::size_t b = 0; b < 6; ++b) {
      if (t[0].at(a, b) > t[0].at(a, best0)) best0 = b;
      if (t[1].at(a, b) > t[1].at(a, best1)) best1 = b;
    }
    EXPECT_NE(best0, best1);
  }
}

TEST(TwoRegime, SingleRegimeIsOneMarkovSource) {
  TwoRegimeConfig c;
  c.regimes = 1;
  c.windows = 20;
  const auto d = gen_two_regime_sequences(c);
  ASSERT_EQ(d.tables.size(), 1u);
  for (int r : d.regime) EXPECT_EQ(r, 0);
  for (std::size_t i = 0; i < d.corpus.ids.size(); ++i) {
    if (d.corpus.ids[i] >= c.symbols) EXPECT_EQ(i % c.unroll, 0u);
  }
  EXPECT_NEAR(empirical_bayes_nll(d), oracle_empirical_nll(d, c), 1e-12);
}

TEST(TwoRegime, PureFunctionOfConfig) {
  TwoRegimeConfig c;
  c.windows = 10;
  const auto a = gen_two_regime_sequences(c), b = gen_two_regime_sequences(c);
  EXPECT_EQ(a.corpus.ids, b.corpus.ids);
  c.seed = 2;
  EXPECT_NE(a.corpus.ids, gen_two_regime_sequences(c).corpus.ids);
}

TEST(DatasetCache, ToyRoundTrip) {
  ToyConfig c;
  c.n = 40;
  const ToyDataset d = gen_toy_regression(c);
  const auto base = testing::scratch_dir("cache-toy") / "dataset";
  write_toy_cache(d, base, "{\"n\":40}");
  EXPECT_EQ(cache_kind(base), "regression");
  const ToyDataset r = read_toy_cache(base);
  EXPECT_EQ(r.x.storage(), d.x.storage());
  EXPECT_EQ(r.y.storage(), d.y.storage());
  EXPECT_EQ(r.component, d.component);
  EXPECT_EQ(r.rotation.storage(), d.rotation.storage());
}

TEST(DatasetCache, CorpusRoundTrip) {
  TwoRegimeConfig c;
  c.windows = 12;
  const auto d = gen_two_regime_sequences(c);
  const auto base = testing::scratch_dir("cache-corpus") / "dataset";
  write_corpus_cache(d.corpus, base, "{}");
  EXPECT_EQ(cache_kind(base), "corpus");
  const Corpus r = read_corpus_cache(base);
  EXPECT_EQ(r.ids, d.corpus.ids);
  EXPECT_EQ(r.vocab, d.corpus.vocab);
  EXPECT_EQ(r.window_starts, d.corpus.window_starts);
  EXPECT_EQ(r.unroll, d.corpus.unroll);
}

}  // namespace
}  // namespace modnet
