// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace modnet {

/// Independent random streams derived from one experiment seed.
enum class Stream : std::uint64_t {
  kData = 1,
  kInit = 2,
  kEStep = 3,
  kTrainer = 4,
  kProbe = 5,
  kBuffer = 6,
  kTest = 99,
};

/// Counter-based generator: output i is a bijective hash of (key, i). The
/// full state is (key, counter), which makes checkpointing trivial and keeps
/// distinct streams statistically independent.
class Rng {
 public:
  Rng(std::uint64_t seed, Stream stream);
  Rng(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  /// Standard normal via Box-Muller (one output per call, no cached spare).
  double normal();
  /// Index drawn from a probability vector. Falls back to the last index
  /// when rounding leaves the cumulative sum short of 1.
  std::size_t categorical(std::span<const double> probs);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t z);

}  // namespace modnet
