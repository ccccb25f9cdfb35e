// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over a linear tape.
//
// A Tape owns every value produced during one forward computation. Nodes are
// appended in execution order, so the tape is topologically sorted by
// construction and backward() is a single reverse sweep. Tapes are not
// thread-safe; independent tapes may be used from different threads.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "modnet/tensor.h"

namespace modnet::ad {

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kAffine,
  kRelu,
  kSigmoid,
  kTanh,
  kSoftplus,
  kRowSoftmax,
  kConcat,
  kSumAxis,
  kSumAll,
  kEmbedding,
  kGaussianLogDensity,
  kCategoricalLogProb,
  kGatherRows,
  kScatterAddRows,
  kSliceCol,
  kTopKSoftmax,
};

const char* op_name(Op op);

class Tape;

/// Handle to a node on a tape. Cheap to copy.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Gradient map keyed by node id. Nodes the loss does not depend on report
/// zero tensors of the matching shape.
class Gradients {
 public:
  Gradients() = default;
  Gradients(const Tape* tape, std::vector<Tensor> grads, std::vector<bool> present)
      : tape_(tape), grads_(std::move(grads)), present_(std::move(present)) {}

  Tensor operator[](Var v) const;
  bool reached(Var v) const { return v.id < present_.size() && present_[v.id]; }

 private:
  const Tape* tape_ = nullptr;
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
};

class Tape {
 public:
  Tape();

  /// Trainable input. The tensor is copied onto the tape.
  Var leaf(const Tensor& value);
  Var constant(Tensor value);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar loss.
  Gradients backward(Var loss) const;

  /// When enabled, every non-differentiable decision (relu sign, top-k
  /// membership) is folded into a hash. Finite-difference checks compare the
  /// signature of perturbed evaluations to detect kink crossings.
  void track_kinks(bool on) { track_kinks_ = on; }
  std::uint64_t kink_signature() const { return kink_hash_; }

  // Primitive implementations; use the free functions below.
  Var push(Op op, std::initializer_list<std::uint32_t> inputs, Tensor value);
  struct Node {
    Op op = Op::kLeaf;
    std::uint8_t n_inputs = 0;
    std::uint32_t inputs[2] = {0, 0};
    Tensor value;
    Tensor saved;
    std::vector<std::size_t> index;
    double alpha = 0.0;
    double beta = 0.0;
    std::size_t param = 0;
  };
  Node& node(Var v) { return nodes_[v.id]; }
  const Node& node(std::uint32_t id) const { return nodes_[id]; }
  void fold_kink(std::uint64_t v);
  bool tracking_kinks() const { return track_kinks_; }

 private:
  std::vector<Node> nodes_;
  bool track_kinks_ = false;
  std::uint64_t kink_hash_ = 1469598103934665603ULL;
};

// ---------------------------------------------------------------------------
// Primitives. Shape errors throw ShapeError naming the primitive and shapes.

/// [n,k] x [k,m] -> [n,m]
Var matmul(Var a, Var b);
/// Elementwise a + b. b may also be a single row [1,m] broadcast over a's rows.
Var add(Var a, Var b);
/// Elementwise a - b, same broadcasting as add.
Var sub(Var a, Var b);
/// Elementwise a * b. b may also be a column [n,1] broadcast over a's columns.
Var mul(Var a, Var b);
/// alpha * a + beta, elementwise.
Var affine(Var a, double alpha, double beta);
/// Subgradient at 0 is 0.
Var relu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var softplus(Var a);
Var row_softmax(Var a);
/// Joins rank-2 operands with equal row counts along the last axis.
Var concat(std::span<const Var> parts);
Var concat(Var a, Var b);
/// axis 0: [n,m] -> [1,m]; axis 1: [n,m] -> [n,1].
Var sum_axis(Var a, std::size_t axis);
Var sum_all(Var a);
/// Rows of `table` [V,E] selected by ids -> [ids.size(), E].
Var embedding_lookup(Var table, std::span<const std::size_t> ids);
/// Per-row log N(target | mean, I): [n,d] -> [n,1].
Var gaussian_log_density(Var mean, const Tensor& target);
/// Per-row log softmax(logits)[target] with log-sum-exp stabilization -> [n,1].
Var categorical_log_prob(Var logits, std::span<const std::size_t> targets);
Var gather_rows(Var a, std::span<const std::size_t> rows);
/// out[rows[i]] += a[i]; output has `out_rows` rows.
Var scatter_add_rows(Var a, std::span<const std::size_t> rows, std::size_t out_rows);
/// Column j of a as [n,1].
Var slice_col(Var a, std::size_t j);
/// Softmax over the k largest entries of each row; other entries are 0.
/// Ties keep the lower index.
Var topk_softmax(Var logits, std::size_t k);

/// Indices of the k largest entries of a row, ties broken by lower index.
std::vector<std::size_t> topk_indices(std::span<const double> row, std::size_t k);

// ---------------------------------------------------------------------------
// Finite-difference gradient check.

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose perturbation crossed a kink and were excluded.
  std::size_t skipped = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
};

/// Compares backward() against central differences of `fn` at `params`.
/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check(const ScalarFn& fn, const std::vector<Tensor>& params,
                           double fd_step);

}  // namespace modnet::ad
