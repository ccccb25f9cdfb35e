// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "modnet/data.h"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "modnet/error.h"

namespace modnet {

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix to_eigen(const Tensor& t) {
  Matrix m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  return m;
}

Tensor from_eigen(const Matrix& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      t.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
  return t;
}

Tensor matrix_from_rows(const std::vector<std::vector<double>>& rows, std::size_t d,
                        const std::string& field) {
  if (rows.empty()) {
    Tensor t({d, d});
    for (std::size_t i = 0; i < d; ++i) t.at(i, i) = 0.25;
    return t;
  }
  if (rows.size() != d) throw ConfigError(field, "expected " + std::to_string(d) + " rows");
  Tensor t({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    if (rows[i].size() != d) throw ConfigError(field, "expected a square matrix");
    for (std::size_t j = 0; j < d; ++j) t.at(i, j) = rows[i][j];
  }
  return t;
}

}  // namespace

Tensor cholesky_factor(const Tensor& cov, const std::string& field) {
  const Matrix m = to_eigen(cov);
  if (!m.isApprox(m.transpose(), 1e-12)) throw ConfigError(field, "covariance is not symmetric");
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) throw ConfigError(field, "covariance is not positive definite");
  return from_eigen(llt.matrixL());
}

double determinant(const Tensor& m) { return to_eigen(m).determinant(); }

Tensor random_rotation(std::size_t d, Rng& rng) {
  if (d < 2) throw ConfigError("data.dim", "rotation needs d >= 2");
  Matrix g(d, d);
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  if (q.determinant() < 0.0) q.col(0) *= -1.0;
  return from_eigen(q);
}

Tensor random_rotation(std::size_t d, std::uint64_t seed) {
  Rng rng(seed, Stream::kData);
  return random_rotation(d, rng);
}

ToyDataset gen_toy_regression(const ToyConfig& config) {
  const std::size_t d = config.dim;
  if (d < 2) throw ConfigError("data.dim", "must be >= 2");
  if (config.mean1.size() != d) throw ConfigError("data.mean1", "length must equal dim");
  if (config.mean2.size() != d) throw ConfigError("data.mean2", "length must equal dim");
  if (config.n == 0) throw ConfigError("data.n", "must be >= 1");
  if (!(config.scale_min > 0.0 && config.scale_max >= config.scale_min)) {
    throw ConfigError("data.scale_min", "scaling range must be positive and ordered");
  }
  const Tensor l1 = cholesky_factor(matrix_from_rows(config.cov1, d, "data.cov1"), "data.cov1");
  const Tensor l2 = cholesky_factor(matrix_from_rows(config.cov2, d, "data.cov2"), "data.cov2");

  Rng rng(config.seed, Stream::kData);
  ToyDataset out;
  out.rotation = random_rotation(d, rng);
  out.scaling = Tensor({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    out.scaling.at(i, i) = rng.uniform(config.scale_min, config.scale_max);
  }
  out.x = Tensor({config.n, d});
  out.y = Tensor({config.n, d});
  out.component.resize(config.n);
  std::vector<double> z(d);
  for (std::size_t n = 0; n < config.n; ++n) {
    const int s = rng.uniform() < 0.5 ? 1 : 2;
    out.component[n] = s;
    const Tensor& chol = s == 1 ? l1 : l2;
    const auto& mu = s == 1 ? config.mean1 : config.mean2;
    for (auto& v : z) v = rng.normal();
    for (std::size_t i = 0; i < d; ++i) {
      double v = mu[i];
      for (std::size_t j = 0; j <= i; ++j) v += chol.at(i, j) * z[j];
      out.x.at(n, i) = v;
    }
    const Tensor& map = s == 1 ? out.rotation : out.scaling;
    for (std::size_t i = 0; i < d; ++i) {
      double v = 0.0;
      for (std::size_t j = 0; j < d; ++j) v += map.at(i, j) * out.x.at(n, j);
      out.y.at(n, i) = v;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

void build_windows(Corpus& corpus, std::size_t unroll) {
  if (unroll == 0) throw ConfigError("data.unroll", "must be >= 1");
  corpus.unroll = unroll;
  corpus.window_starts.clear();
  for (std::size_t s = 0; s + unroll < corpus.ids.size(); s += unroll) {
    corpus.window_starts.push_back(s);
  }
}

namespace {

std::vector<std::string> rank_vocab(const std::map<std::string, std::size_t>& counts) {
  std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
  // std::map iteration is already lexicographic; stable sort keeps that order on ties.
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> out;
  out.reserve(items.size());
  for (auto& it : items) out.push_back(std::move(it.first));
  return out;
}

}  // namespace

Corpus tokenize(std::string_view text, TokenMode mode, std::size_t unroll,
                std::size_t vocab_cap) {
  if (text.empty()) throw ConfigError("data.path", "corpus is empty");
  Corpus c;
  std::vector<std::string> tokens;
  if (mode == TokenMode::kChar) {
    for (char ch : text) tokens.emplace_back(1, ch);
  } else {
    std::istringstream lines{std::string(text)};
    std::string line;
    while (std::getline(lines, line)) {
      std::istringstream words(line);
      std::string w;
      bool any = false;
      while (words >> w) {
        tokens.push_back(w);
        any = true;
      }
      if (any) tokens.emplace_back(kEosToken);
    }
    if (tokens.empty()) throw ConfigError("data.path", "corpus has no words");
  }

  std::map<std::string, std::size_t> counts;
  for (const auto& t : tokens) {
    if (mode == TokenMode::kWord && (t == kUnkToken || t == kEosToken)) continue;
    ++counts[t];
  }
  std::vector<std::string> ranked = rank_vocab(counts);
  if (mode == TokenMode::kChar) {
    if (ranked.size() > vocab_cap) {
      throw ConfigError("data.vocab_cap", "corpus has " + std::to_string(ranked.size()) +
                                              " distinct bytes, cap is " +
                                              std::to_string(vocab_cap));
    }
    c.vocab = std::move(ranked);
  } else {
    c.vocab = {std::string(kUnkToken), std::string(kEosToken)};
    if (ranked.size() > vocab_cap) {
      c.replaced_types = ranked.size() - vocab_cap;
      ranked.resize(vocab_cap);
    }
    c.vocab.insert(c.vocab.end(), ranked.begin(), ranked.end());
  }
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < c.vocab.size(); ++i) index.emplace(c.vocab[i], i);
  c.ids.reserve(tokens.size());
  for (const auto& t : tokens) {
    auto it = index.find(t);
    c.ids.push_back(it != index.end() ? it->second : 0);
  }
  build_windows(c, unroll);
  return c;
}

Corpus load_corpus(const std::filesystem::path& path, TokenMode mode, std::size_t unroll,
                   std::size_t vocab_cap) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("data.path", "cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return tokenize(ss.str(), mode, unroll, vocab_cap);
}

// ---------------------------------------------------------------------------

std::vector<Tensor> make_regime_tables(std::size_t symbols, std::size_t regimes, double peak,
                                       Rng& rng) {
  if (symbols < 2) throw ConfigError("data.symbols", "must be >= 2");
  if (!(peak > 0.0 && peak < 1.0)) throw ConfigError("data.peak", "must lie in (0, 1)");
  std::vector<std::vector<std::size_t>> succ;
  for (std::size_t r = 0; r < regimes; ++r) {
    std::vector<std::size_t> perm(symbols);
    for (;;) {
      std::iota(perm.begin(), perm.end(), 0);
      for (std::size_t i = symbols - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
      // Preferred successors must differ from every earlier regime's.
      bool ok = true;
      for (const auto& prev : succ)
        for (std::size_t c = 0; c < symbols; ++c) ok = ok && prev[c] != perm[c];
      if (ok || symbols < regimes) break;
    }
    succ.push_back(perm);
  }
  std::vector<Tensor> tables;
  const double rest = (1.0 - peak) / static_cast<double>(symbols - 1);
  for (const auto& perm : succ) {
    Tensor t({symbols, symbols}, rest);
    for (std::size_t c = 0; c < symbols; ++c) t.at(c, perm[c]) = peak;
    tables.push_back(std::move(t));
  }
  return tables;
}

namespace {

void validate_two_regime(const TwoRegimeConfig& config, const std::vector<Tensor>& tables) {
  if (config.regimes == 0) throw ConfigError("data.regimes", "must be >= 1");
  if (config.unroll < 2) throw ConfigError("data.unroll", "must be >= 2");
  if (config.windows == 0) throw ConfigError("data.windows", "must be >= 1");
  if (!(config.switch_prob >= 0.0 && config.switch_prob < 1.0)) {
    throw ConfigError("data.switch_prob", "must lie in [0, 1)");
  }
  if (tables.size() != config.regimes) {
    throw ConfigError("data.tables", "need one transition table per regime");
  }
  for (const auto& t : tables) {
    if (t.rank() != 2 || t.rows() != t.cols() || t.rows() != tables[0].rows()) {
      throw ConfigError("data.tables", "tables must be square and share one alphabet");
    }
    for (std::size_t i = 0; i < t.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < t.cols(); ++j) s += t.at(i, j);
      if (std::abs(s - 1.0) > 1e-9) throw ConfigError("data.tables", "rows must sum to 1");
    }
  }
}

std::vector<Tensor> resolve_tables(const TwoRegimeConfig& config, Rng& rng) {
  if (!config.tables.empty()) return config.tables;
  return make_regime_tables(config.symbols, config.regimes, config.peak, rng);
}

}  // namespace

TwoRegimeCorpus gen_two_regime_sequences(const TwoRegimeConfig& config) {
  Rng rng(config.seed, Stream::kData);
  TwoRegimeCorpus out;
  out.tables = resolve_tables(config, rng);
  validate_two_regime(config, out.tables);
  const std::size_t s_count = out.tables[0].rows();
  const std::size_t regimes = config.regimes;
  const double q = regimes > 1 ? config.switch_prob : 0.0;
  const std::size_t unroll = config.unroll;
  const double log_r = std::log(static_cast<double>(regimes));
  const double uniform_sym = 1.0 / static_cast<double>(s_count);

  auto& ids = out.corpus.ids;
  std::vector<double> lp;  // log prob of ids[i] given history, i >= 1
  for (std::size_t w = 0; w < config.windows; ++w) {
    int r = static_cast<int>(rng.below(regimes));
    ids.push_back(out.marker(static_cast<std::size_t>(r)));
    out.regime.push_back(r);
    lp.push_back(-log_r);
    std::size_t prev = s_count;  // s_count encodes "previous token was a marker"
    for (std::size_t t = 1; t < unroll; ++t) {
      if (q > 0.0 && rng.uniform() < q) {
        std::size_t nr = rng.below(regimes - 1);
        if (nr >= static_cast<std::size_t>(r)) ++nr;
        r = static_cast<int>(nr);
        ids.push_back(out.marker(nr));
        lp.push_back(std::log(q / static_cast<double>(regimes - 1)));
        prev = s_count;
      } else {
        std::size_t j;
        double p;
        if (prev == s_count) {
          j = rng.below(s_count);
          p = uniform_sym;
        } else {
          const Tensor& tab = out.tables[static_cast<std::size_t>(r)];
          j = rng.categorical(tab.values().subspan(prev * s_count, s_count));
          p = tab.at(prev, j);
        }
        ids.push_back(j);
        lp.push_back(std::log((1.0 - q) * p));
        prev = j;
      }
      out.regime.push_back(r);
    }
  }
  // Closing marker supplies the last window's final target.
  const int last = static_cast<int>(rng.below(regimes));
  ids.push_back(out.marker(static_cast<std::size_t>(last)));
  out.regime.push_back(last);
  lp.push_back(-log_r);

  for (std::size_t s = 0; s < s_count; ++s) out.corpus.vocab.push_back(std::string(1, static_cast<char>('a' + s)));
  for (std::size_t r = 0; r < regimes; ++r) {
    out.corpus.vocab.push_back("<" + std::string(1, static_cast<char>('A' + r)) + ">");
  }
  // lp[i] is the log prob of ids[i]; targets are ids[1..].
  out.true_log_prob.assign(lp.begin() + 1, lp.end());
  build_windows(out.corpus, unroll);
  return out;
}

double empirical_bayes_nll(const TwoRegimeCorpus& data) {
  const auto& c = data.corpus;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t s : c.window_starts) {
    for (std::size_t t = 0; t < c.unroll; ++t) {
      total -= data.true_log_prob[s + t];
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double expected_bayes_nll(const TwoRegimeConfig& config, const std::vector<Tensor>& tables) {
  validate_two_regime(config, tables);
  const std::size_t sc = tables[0].rows();
  const std::size_t regimes = config.regimes;
  const double q = regimes > 1 ? config.switch_prob : 0.0;
  const std::size_t states = regimes * (sc + 1);
  auto idx = [&](std::size_t r, std::size_t prev) { return r * (sc + 1) + prev; };

  // Conditional entropy of the next token and the successor map per state.
  std::vector<double> h(states, 0.0);
  for (std::size_t r = 0; r < regimes; ++r)
    for (std::size_t prev = 0; prev <= sc; ++prev) {
      double e = 0.0;
      if (q > 0.0) {
        const double pm = q / static_cast<double>(regimes - 1);
        e -= static_cast<double>(regimes - 1) * pm * std::log(pm);
      }
      for (std::size_t j = 0; j < sc; ++j) {
        const double p = (1.0 - q) * (prev == sc ? 1.0 / static_cast<double>(sc) : tables[r].at(prev, j));
        if (p > 0.0) e -= p * std::log(p);
      }
      h[idx(r, prev)] = e;
    }

  std::vector<double> dist(states, 0.0), next(states);
  for (std::size_t r = 0; r < regimes; ++r) dist[idx(r, sc)] = 1.0 / static_cast<double>(regimes);
  double total = std::log(static_cast<double>(regimes));  // window-final marker target
  for (std::size_t t = 1; t < config.unroll; ++t) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t r = 0; r < regimes; ++r)
      for (std::size_t prev = 0; prev <= sc; ++prev) {
        const double w = dist[idx(r, prev)];
        if (w == 0.0) continue;
        total += w * h[idx(r, prev)];
        if (q > 0.0) {
          for (std::size_t r2 = 0; r2 < regimes; ++r2) {
            if (r2 != r) next[idx(r2, sc)] += w * q / static_cast<double>(regimes - 1);
          }
        }
        for (std::size_t j = 0; j < sc; ++j) {
          const double p = prev == sc ? 1.0 / static_cast<double>(sc) : tables[r].at(prev, j);
          next[idx(r, j)] += w * (1.0 - q) * p;
        }
      }
    dist.swap(next);
  }
  return total / static_cast<double>(config.unroll);
}

// ---------------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "dataset cache assumes a little-endian host");

void write_doubles(const std::filesystem::path& path, const std::vector<double>& v) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!f) throw Error("write failed for '" + path.string() + "'");
}

std::vector<double> read_doubles(const std::filesystem::path& path, std::size_t count) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path.string() + "'");
  std::vector<double> v(count);
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!f) throw Error("'" + path.string() + "' is truncated");
  return v;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f << text;
}

nlohmann::json read_sidecar(const std::filesystem::path& base) {
  std::ifstream f(base.string() + ".json");
  if (!f) throw Error("cannot open dataset sidecar '" + base.string() + ".json'");
  return nlohmann::json::parse(f);
}

}  // namespace

void write_toy_cache(const ToyDataset& data, const std::filesystem::path& base,
                     const std::string& config_json) {
  const std::size_t n = data.x.rows(), d = data.x.cols();
  std::vector<double> flat;
  flat.reserve(n * (2 * d + 1) + 2 * d * d);
  flat.insert(flat.end(), data.x.storage().begin(), data.x.storage().end());
  flat.insert(flat.end(), data.y.storage().begin(), data.y.storage().end());
  for (int c : data.component) flat.push_back(c);
  flat.insert(flat.end(), data.rotation.storage().begin(), data.rotation.storage().end());
  flat.insert(flat.end(), data.scaling.storage().begin(), data.scaling.storage().end());
  write_doubles(base.string() + ".bin", flat);
  nlohmann::json side = {
      {"kind", "regression"},
      {"format", "little-endian float64"},
      {"layout", {"x[n,d]", "y[n,d]", "component[n]", "rotation[d,d]", "scaling[d,d]"}},
      {"n", n},
      {"d", d},
      {"config", nlohmann::json::parse(config_json)}};
  write_text(base.string() + ".json", side.dump(2) + "\n");
}

ToyDataset read_toy_cache(const std::filesystem::path& base) {
  const auto side = read_sidecar(base);
  if (side.at("kind") != "regression") throw Error("dataset cache is not a regression set");
  const std::size_t n = side.at("n"), d = side.at("d");
  const auto flat = read_doubles(base.string() + ".bin", n * (2 * d + 1) + 2 * d * d);
  ToyDataset out;
  auto it = flat.begin();
  auto take = [&](std::size_t count) {
    std::vector<double> v(it, it + static_cast<std::ptrdiff_t>(count));
    it += static_cast<std::ptrdiff_t>(count);
    return v;
  };
  out.x = Tensor({n, d}, take(n * d));
  out.y = Tensor({n, d}, take(n * d));
  for (double c : take(n)) out.component.push_back(static_cast<int>(c));
  out.rotation = Tensor({d, d}, take(d * d));
  out.scaling = Tensor({d, d}, take(d * d));
  return out;
}

void write_corpus_cache(const Corpus& corpus, const std::filesystem::path& base,
                        const std::string& config_json) {
  std::vector<double> flat(corpus.ids.begin(), corpus.ids.end());
  write_doubles(base.string() + ".bin", flat);
  nlohmann::json side = {{"kind", "corpus"},
                         {"format", "little-endian float64 token ids"},
                         {"tokens", corpus.ids.size()},
                         {"unroll", corpus.unroll},
                         {"vocab", corpus.vocab},
                         {"config", nlohmann::json::parse(config_json)}};
  write_text(base.string() + ".json", side.dump(2) + "\n");
}

Corpus read_corpus_cache(const std::filesystem::path& base) {
  const auto side = read_sidecar(base);
  if (side.at("kind") != "corpus") throw Error("dataset cache is not a corpus");
  Corpus c;
  c.vocab = side.at("vocab").get<std::vector<std::string>>();
  const std::size_t count = side.at("tokens");
  for (double v : read_doubles(base.string() + ".bin", count)) {
    c.ids.push_back(static_cast<std::size_t>(v));
  }
  for (auto id : c.ids) {
    if (id >= c.vocab.size()) throw IndexError("corpus cache: token id outside vocabulary");
  }
  build_windows(c, side.at("unroll").get<std::size_t>());
  return c;
}

std::string cache_kind(const std::filesystem::path& base) {
  return read_sidecar(base).at("kind").get<std::string>();
}

}  // namespace modnet
