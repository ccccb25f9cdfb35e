// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "modnet/autodiff.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "modnet/error.h"

namespace modnet::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "elementwise-mul";
    case Op::kAffine: return "affine";
    case Op::kRelu: return "relu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kSoftplus: return "softplus";
    case Op::kRowSoftmax: return "row-softmax";
    case Op::kConcat: return "concat-last-axis";
    case Op::kSumAxis: return "sum-over-axis";
    case Op::kSumAll: return "sum-all";
    case Op::kEmbedding: return "embedding-lookup";
    case Op::kGaussianLogDensity: return "gaussian-log-density";
    case Op::kCategoricalLogProb: return "categorical-log-prob";
    case Op::kGatherRows: return "gather-rows";
    case Op::kScatterAddRows: return "scatter-add-rows";
    case Op::kSliceCol: return "slice-col";
    case Op::kTopKSoftmax: return "topk-softmax";
  }
  return "?";
}

const Tensor& Var::value() const { return tape->value(*this); }

Tensor Gradients::operator[](Var v) const {
  if (reached(v)) return grads_[v.id];
  return Tensor(tape_->node(v.id).value.shape());
}

Tape::Tape() { nodes_.reserve(256); }

Var Tape::push(Op op, std::initializer_list<std::uint32_t> inputs, Tensor value) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  for (auto id : inputs) n.inputs[n.n_inputs++] = id;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(const Tensor& value) { return push(Op::kLeaf, {}, value); }
Var Tape::constant(Tensor value) { return push(Op::kConstant, {}, std::move(value)); }

void Tape::fold_kink(std::uint64_t v) {
  kink_hash_ ^= v + 0x9e3779b97f4a7c15ULL + (kink_hash_ << 6) + (kink_hash_ >> 2);
}

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

[[noreturn]] void shape_fail(const char* prim, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(prim) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

void require_rank2(const char* prim, const Tensor& t) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(prim) + ": expected rank-2 operand, got " +
                     shape_str(t.shape()));
  }
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw Error("autodiff: operands recorded on different tapes");
  return *a.tape;
}

enum class Bcast { kSame, kRow, kCol };

Bcast add_broadcast(const char* prim, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bcast::kSame;
  if (a.rank() == 2 && b.numel() == a.cols() && b.rows() == 1) return Bcast::kRow;
  shape_fail(prim, a.shape(), b.shape());
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows()) {
    shape_fail("matmul", x.shape(), y.shape());
  }
  const std::size_t n = x.rows(), k = x.cols(), m = y.cols();
  Tensor out({n, m});
  const double* xp = x.values().data();
  const double* yp = y.values().data();
  double* op = out.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = op + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = xp[i * k + p];
      const double* yrow = yp + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += xv * yrow[j];
    }
  }
  return t.push(Op::kMatmul, {a.id, b.id}, std::move(out));
}

namespace {

Var add_sub(Var a, Var b, double sign, Op op) {
  Tape& t = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const Bcast mode = add_broadcast(op_name(op), x, y);
  Tensor out = x;
  auto& o = out.storage();
  const auto& yv = y.storage();
  if (mode == Bcast::kSame) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += sign * yv[i];
  } else {
    const std::size_t m = x.cols();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += sign * yv[i % m];
  }
  return t.push(op, {a.id, b.id}, std::move(out));
}

}  // namespace

Var add(Var a, Var b) { return add_sub(a, b, 1.0, Op::kAdd); }
Var sub(Var a, Var b) { return add_sub(a, b, -1.0, Op::kSub); }

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out = x;
  auto& o = out.storage();
  const auto& yv = y.storage();
  if (x.shape() == y.shape()) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= yv[i];
  } else if (x.rank() == 2 && y.rank() == 2 && y.cols() == 1 && y.rows() == x.rows()) {
    const std::size_t m = x.cols();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= yv[i / m];
  } else {
    shape_fail("elementwise-mul", x.shape(), y.shape());
  }
  return t.push(Op::kMul, {a.id, b.id}, std::move(out));
}

Var affine(Var a, double alpha, double beta) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = alpha * v + beta;
  Var r = a.tape->push(Op::kAffine, {a.id}, std::move(out));
  a.tape->node(r).alpha = alpha;
  return r;
}

Var relu(Var a) {
  Tape& t = *a.tape;
  Tensor out = a.value();
  if (t.tracking_kinks()) {
    for (double v : out.storage()) {
      t.fold_kink(v > 0.0 ? 1 : (v < 0.0 ? 2 : 3));
    }
  }
  for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return t.push(Op::kRelu, {a.id}, std::move(out));
}

Var sigmoid(Var a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return a.tape->push(Op::kSigmoid, {a.id}, std::move(out));
}

Var tanh(Var a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = std::tanh(v);
  return a.tape->push(Op::kTanh, {a.id}, std::move(out));
}

Var softplus(Var a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  return a.tape->push(Op::kSoftplus, {a.id}, std::move(out));
}

namespace {

void softmax_row(const double* in, double* out, std::size_t m) {
  double mx = in[0];
  for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, in[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    out[j] = std::exp(in[j] - mx);
    s += out[j];
  }
  for (std::size_t j = 0; j < m; ++j) out[j] /= s;
}

}  // namespace

Var row_softmax(Var a) {
  const Tensor& x = a.value();
  require_rank2("row-softmax", x);
  Tensor out(x.shape());
  const std::size_t m = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    softmax_row(x.values().data() + i * m, out.values().data() + i * m, m);
  }
  return a.tape->push(Op::kRowSoftmax, {a.id}, std::move(out));
}

Var concat(Var a, Var b) {
  const Var parts[2] = {a, b};
  return concat(parts);
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat-last-axis: no operands");
  Tape& t = *parts[0].tape;
  const std::size_t n = parts[0].value().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    require_rank2("concat-last-axis", v);
    if (p.tape != &t) throw Error("autodiff: operands recorded on different tapes");
    if (v.rows() != n) shape_fail("concat-last-axis", parts[0].shape(), v.shape());
    total += v.cols();
  }
  Tensor out({n, total});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const std::size_t m = v.cols();
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(v.values().data() + i * m, m, out.values().data() + i * total + off);
    }
    off += m;
  }
  // Concat may have any arity; inputs beyond two are chained through index.
  Var r = t.push(Op::kConcat, {}, std::move(out));
  auto& node = t.node(r);
  for (const Var& p : parts) {
    node.index.push_back(p.id);
    node.index.push_back(p.value().cols());
  }
  return r;
}

Var sum_axis(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  require_rank2("sum-over-axis", x);
  const std::size_t n = x.rows(), m = x.cols();
  Tensor out;
  if (axis == 0) {
    out = Tensor({1, m});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out[j] += x.at(i, j);
  } else if (axis == 1) {
    out = Tensor({n, 1});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out[i] += x.at(i, j);
  } else {
    throw ShapeError("sum-over-axis: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  }
  Var r = a.tape->push(Op::kSumAxis, {a.id}, std::move(out));
  a.tape->node(r).param = axis;
  return r;
}

Var sum_all(Var a) {
  double s = 0.0;
  for (double v : a.value().storage()) s += v;
  return a.tape->push(Op::kSumAll, {a.id}, Tensor::scalar(s));
}

Var embedding_lookup(Var table, std::span<const std::size_t> ids) {
  const Tensor& w = table.value();
  require_rank2("embedding-lookup", w);
  const std::size_t vocab = w.rows(), e = w.cols();
  if (ids.empty()) throw ShapeError("embedding-lookup: empty id list");
  Tensor out({ids.size(), e});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw IndexError("embedding-lookup: id " + std::to_string(ids[i]) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(w.values().data() + ids[i] * e, e, out.values().data() + i * e);
  }
  Var r = table.tape->push(Op::kEmbedding, {table.id}, std::move(out));
  table.tape->node(r).index.assign(ids.begin(), ids.end());
  return r;
}

Var gaussian_log_density(Var mean, const Tensor& target) {
  const Tensor& mu = mean.value();
  require_rank2("gaussian-log-density", mu);
  if (mu.shape() != target.shape()) {
    shape_fail("gaussian-log-density", mu.shape(), target.shape());
  }
  const std::size_t n = mu.rows(), d = mu.cols();
  Tensor out({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double r = target.at(i, j) - mu.at(i, j);
      sq += r * r;
    }
    out[i] = -0.5 * sq - 0.5 * static_cast<double>(d) * kLog2Pi;
  }
  Var r = mean.tape->push(Op::kGaussianLogDensity, {mean.id}, std::move(out));
  mean.tape->node(r).saved = target;
  return r;
}

Var categorical_log_prob(Var logits, std::span<const std::size_t> targets) {
  const Tensor& z = logits.value();
  require_rank2("categorical-log-prob", z);
  const std::size_t n = z.rows(), m = z.cols();
  if (targets.size() != n) {
    throw ShapeError("categorical-log-prob: " + std::to_string(targets.size()) +
                     " targets for logits " + shape_str(z.shape()));
  }
  Tensor probs(z.shape());
  Tensor out({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= m) {
      throw IndexError("categorical-log-prob: target " + std::to_string(targets[i]) +
                       " outside " + std::to_string(m) + " classes");
    }
    const double* row = z.values().data() + i * m;
    double mx = row[0];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < m; ++j) probs.at(i, j) = std::exp(row[j] - lse);
    out[i] = row[targets[i]] - lse;
  }
  Var r = logits.tape->push(Op::kCategoricalLogProb, {logits.id}, std::move(out));
  auto& node = logits.tape->node(r);
  node.saved = std::move(probs);
  node.index.assign(targets.begin(), targets.end());
  return r;
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& x = a.value();
  require_rank2("gather-rows", x);
  if (rows.empty()) throw ShapeError("gather-rows: empty row list");
  const std::size_t m = x.cols();
  Tensor out({rows.size(), m});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) {
      throw IndexError("gather-rows: row " + std::to_string(rows[i]) + " outside " +
                       shape_str(x.shape()));
    }
    std::copy_n(x.values().data() + rows[i] * m, m, out.values().data() + i * m);
  }
  Var r = a.tape->push(Op::kGatherRows, {a.id}, std::move(out));
  a.tape->node(r).index.assign(rows.begin(), rows.end());
  return r;
}

Var scatter_add_rows(Var a, std::span<const std::size_t> rows, std::size_t out_rows) {
  const Tensor& x = a.value();
  require_rank2("scatter-add-rows", x);
  if (rows.size() != x.rows()) {
    throw ShapeError("scatter-add-rows: " + std::to_string(rows.size()) +
                     " row indices for operand " + shape_str(x.shape()));
  }
  const std::size_t m = x.cols();
  Tensor out({out_rows, m});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= out_rows) {
      throw IndexError("scatter-add-rows: row " + std::to_string(rows[i]) + " outside " +
                       std::to_string(out_rows) + " output rows");
    }
    for (std::size_t j = 0; j < m; ++j) out.at(rows[i], j) += x.at(i, j);
  }
  Var r = a.tape->push(Op::kScatterAddRows, {a.id}, std::move(out));
  a.tape->node(r).index.assign(rows.begin(), rows.end());
  return r;
}

Var slice_col(Var a, std::size_t j) {
  const Tensor& x = a.value();
  require_rank2("slice-col", x);
  if (j >= x.cols()) {
    throw IndexError("slice-col: column " + std::to_string(j) + " outside " +
                     shape_str(x.shape()));
  }
  Tensor out({x.rows(), 1});
  for (std::size_t i = 0; i < x.rows(); ++i) out[i] = x.at(i, j);
  Var r = a.tape->push(Op::kSliceCol, {a.id}, std::move(out));
  a.tape->node(r).param = j;
  return r;
}

std::vector<std::size_t> topk_indices(std::span<const double> row, std::size_t k) {
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t i, std::size_t j) { return row[i] > row[j]; });
  idx.resize(k);
  return idx;
}

Var topk_softmax(Var logits, std::size_t k) {
  Tape& t = *logits.tape;
  const Tensor& z = logits.value();
  require_rank2("topk-softmax", z);
  const std::size_t n = z.rows(), m = z.cols();
  if (k == 0 || k > m) {
    throw ShapeError("topk-softmax: k=" + std::to_string(k) + " invalid for " +
                     shape_str(z.shape()));
  }
  Tensor out(z.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = z.values().subspan(i * m, m);
    const auto keep = topk_indices(row, k);
    double mx = row[keep[0]];
    double s = 0.0;
    for (auto j : keep) {
      out.at(i, j) = std::exp(row[j] - mx);
      s += out.at(i, j);
      if (t.tracking_kinks()) t.fold_kink(i * m + j + 7);
    }
    for (auto j : keep) out.at(i, j) /= s;
  }
  return t.push(Op::kTopKSoftmax, {logits.id}, std::move(out));
}

// ---------------------------------------------------------------------------

Gradients Tape::backward(Var loss) const {
  if (loss.tape != this) throw Error("backward: loss belongs to a different tape");
  const Tensor& lv = nodes_[loss.id].value;
  if (lv.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(lv.shape()));
  }
  std::vector<Tensor> g(loss.id + 1);
  std::vector<bool> present(loss.id + 1, false);
  g[loss.id] = Tensor(lv.shape(), 1.0);
  present[loss.id] = true;

  auto acc = [&](std::uint32_t id) -> Tensor& {
    if (!present[id]) {
      g[id] = Tensor(nodes_[id].value.shape());
      present[id] = true;
    }
    return g[id];
  };

  for (std::int64_t idx = loss.id; idx >= 0; --idx) {
    const auto id = static_cast<std::uint32_t>(idx);
    if (!present[id]) continue;
    const Node& nd = nodes_[id];
    const Tensor& dy = g[id];
    const Tensor& y = nd.value;
    switch (nd.op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kMatmul: {
        const Tensor& a = nodes_[nd.inputs[0]].value;
        const Tensor& b = nodes_[nd.inputs[1]].value;
        const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
        Tensor& da = acc(nd.inputs[0]);
        for (std::size_t i = 0; i < n; ++i) {
          const double* dyr = dy.values().data() + i * m;
          for (std::size_t p = 0; p < k; ++p) {
            const double* br = b.values().data() + p * m;
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += dyr[j] * br[j];
            da[i * k + p] += s;
          }
        }
        Tensor& db = acc(nd.inputs[1]);
        for (std::size_t i = 0; i < n; ++i) {
          const double* dyr = dy.values().data() + i * m;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            double* dbr = db.values().data() + p * m;
            for (std::size_t j = 0; j < m; ++j) dbr[j] += av * dyr[j];
          }
        }
        break;
      }
      case Op::kAdd:
      case Op::kSub: {
        const double sign = nd.op == Op::kAdd ? 1.0 : -1.0;
        Tensor& da = acc(nd.inputs[0]);
        for (std::size_t i = 0; i < dy.numel(); ++i) da[i] += dy[i];
        Tensor& db = acc(nd.inputs[1]);
        if (db.numel() == dy.numel()) {
          for (std::size_t i = 0; i < dy.numel(); ++i) db[i] += sign * dy[i];
        } else {
          const std::size_t m = db.numel();
          for (std::size_t i = 0; i < dy.numel(); ++i) db[i % m] += sign * dy[i];
        }
        break;
      }
      case Op::kMul: {
        const Tensor& a = nodes_[nd.inputs[0]].value;
        const Tensor& b = nodes_[nd.inputs[1]].value;
        Tensor& da = acc(nd.inputs[0]);
        if (a.shape() == b.shape()) {
          for (std::size_t i = 0; i < dy.numel(); ++i) da[i] += dy[i] * b[i];
          Tensor& db = acc(nd.inputs[1]);
          for (std::size_t i = 0; i < dy.numel(); ++i) db[i] += dy[i] * a[i];
        } else {
          const std::size_t m = a.cols();
          for (std::size_t i = 0; i < dy.numel(); ++i) da[i] += dy[i] * b[i / m];
          Tensor& db = acc(nd.inputs[1]);
          for (std::size_t i = 0; i < dy.numel(); ++i) db[i / m] += dy[i] * a[i];
        }
        break;
      }
      case Op::kAffine: {
        Tensor& da = acc(nd.inputs[0]);
        for (std::size_t i = 0; i < dy.numel(); ++i) da[i] += nd.alpha * dy[i];
        break;
      }
      case Op::kRelu: {
        Tensor& da = acc(nd.inputs[0]);
        for (std::size_t i = 0; i < dy.numel(); ++i) {
          if (y[i] > 0.0) da[i] += dy[i];
        }
        break;
      }
      case Op::kSigmoid: {
        Tensor& da = acc(nd.inputs[0]);
        for (std::size_t i = 0; i < dy.numel(); ++i) da[i] += dy[i] * y[i] * (1.0 - y[i]);
        break;
      }
      case Op::kTanh: {
        Tensor& da = acc(nd.inputs[0]);
        for (std::size_t i = 0; i < dy.numel(); ++i) da[i] += dy[i] * (1.0 - y[i] * y[i]);
        break;
      }
      case Op::kSoftplus: {
        const Tensor& a = nodes_[nd.inputs[0]].value;
        Tensor& da = acc(nd.inputs[0]);
        for (std::size_t i = 0; i < dy.numel(); ++i) {
          const double v = a[i];
          const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
          da[i] += dy[i] * s;
        }
        break;
      }
      case Op::kRowSoftmax:
      case Op::kTopKSoftmax: {
        // Masked entries have y == 0, so the same expression covers top-k.
        Tensor& da = acc(nd.inputs[0]);
        const std::size_t m = y.cols();
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < m; ++j) dot += dy.at(i, j) * y.at(i, j);
          for (std::size_t j = 0; j < m; ++j) da.at(i, j) += y.at(i, j) * (dy.at(i, j) - dot);
        }
        break;
      }
      case Op::kConcat: {
        const std::size_t total = y.cols();
        std::size_t off = 0;
        for (std::size_t p = 0; p < nd.index.size(); p += 2) {
          const auto in = static_cast<std::uint32_t>(nd.index[p]);
          const std::size_t m = nd.index[p + 1];
          Tensor& da = acc(in);
          for (std::size_t i = 0; i < y.rows(); ++i)
            for (std::size_t j = 0; j < m; ++j) da[i * m + j] += dy[i * total + off + j];
          off += m;
        }
        break;
      }
      case Op::kSumAxis: {
        Tensor& da = acc(nd.inputs[0]);
        const std::size_t n = da.rows(), m = da.cols();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) da[i * m + j] += nd.param == 0 ? dy[j] : dy[i];
        break;
      }
      case Op::kSumAll: {
        Tensor& da = acc(nd.inputs[0]);
        for (std::size_t i = 0; i < da.numel(); ++i) da[i] += dy[0];
        break;
      }
      case Op::kEmbedding: {
        Tensor& dw = acc(nd.inputs[0]);
        const std::size_t e = y.cols();
        for (std::size_t i = 0; i < nd.index.size(); ++i)
          for (std::size_t j = 0; j < e; ++j) dw[nd.index[i] * e + j] += dy[i * e + j];
        break;
      }
      case Op::kGaussianLogDensity: {
        const Tensor& mu = nodes_[nd.inputs[0]].value;
        Tensor& dm = acc(nd.inputs[0]);
        const std::size_t d = mu.cols();
        for (std::size_t i = 0; i < mu.rows(); ++i)
          for (std::size_t j = 0; j < d; ++j)
            dm[i * d + j] += dy[i] * (nd.saved[i * d + j] - mu[i * d + j]);
        break;
      }
      case Op::kCategoricalLogProb: {
        Tensor& dz = acc(nd.inputs[0]);
        const std::size_t m = nd.saved.cols();
        for (std::size_t i = 0; i < nd.index.size(); ++i) {
          for (std::size_t j = 0; j < m; ++j) dz[i * m + j] -= dy[i] * nd.saved[i * m + j];
          dz[i * m + nd.index[i]] += dy[i];
        }
        break;
      }
      case Op::kGatherRows: {
        Tensor& da = acc(nd.inputs[0]);
        const std::size_t m = y.cols();
        for (std::size_t i = 0; i < nd.index.size(); ++i)
          for (std::size_t j = 0; j < m; ++j) da[nd.index[i] * m + j] += dy[i * m + j];
        break;
      }
      case Op::kScatterAddRows: {
        Tensor& da = acc(nd.inputs[0]);
        const std::size_t m = y.cols();
        for (std::size_t i = 0; i < nd.index.size(); ++i)
          for (std::size_t j = 0; j < m; ++j) da[i * m + j] += dy[nd.index[i] * m + j];
        break;
      }
      case Op::kSliceCol: {
        Tensor& da = acc(nd.inputs[0]);
        const std::size_t m = da.cols();
        for (std::size_t i = 0; i < dy.numel(); ++i) da[i * m + nd.param] += dy[i];
        break;
      }
    }
  }
  return Gradients(this, std::move(g), std::move(present));
}

// ---------------------------------------------------------------------------

namespace {

struct Eval {
  double value;
  std::uint64_t signature;
};

Eval evaluate(const ScalarFn& fn, const std::vector<Tensor>& params) {
  Tape tape;
  tape.track_kinks(true);
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p));
  Var out = fn(tape, leaves);
  return {out.value().item(), tape.kink_signature()};
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& fn, const std::vector<Tensor>& params,
                           double fd_step) {
  if (!(fd_step > 0.0)) throw Error("grad_check: fd_step must be positive");
  Tape tape;
  tape.track_kinks(true);
  std::vector<Var> leaves;
  for (const auto& p : params) leaves.push_back(tape.leaf(p));
  Var out = fn(tape, leaves);
  if (!std::isfinite(out.value().item())) {
    throw NumericError("grad_check: non-finite function value at base point");
  }
  const std::uint64_t base_sig = tape.kink_signature();
  const Gradients grads = tape.backward(out);

  GradCheckResult res;
  std::vector<Tensor> probe = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor analytic = grads[leaves[p]];
    for (std::size_t i = 0; i < params[p].numel(); ++i) {
      const double orig = params[p][i];
      probe[p][i] = orig + fd_step;
      const Eval plus = evaluate(fn, probe);
      probe[p][i] = orig - fd_step;
      const Eval minus = evaluate(fn, probe);
      probe[p][i] = orig;
      const double numeric = (plus.value - minus.value) / (2.0 * fd_step);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
        std::ostringstream os;
        os << "grad_check: non-finite value at parameter " << p << " coordinate " << i;
        throw NumericError(os.str());
      }
      if (plus.signature != base_sig || minus.signature != base_sig) {
        ++res.skipped;
        continue;
      }
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      const double err = std::abs(analytic[i] - numeric) / denom;
      ++res.checked;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = p;
        res.worst_index = i;
      }
    }
  }
  return res;
}

}  // namespace modnet::ad
