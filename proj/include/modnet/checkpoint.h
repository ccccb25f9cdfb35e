// Copyright 2026 The modnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Single-file training snapshot.
//
// Layout:
//   bytes 0..7    magic "MODNETCK"
//   bytes 8..11   format version (u32, little-endian)
//   bytes 12..15  reserved, zero
//   bytes 16..23  header length H in bytes (u64, little-endian)
//   next H bytes  UTF-8 JSON header
//   remainder     little-endian float64 payload
//
// The header holds the resolved experiment config, the library version, and
// a section table of {name, offset, count, shape} entries whose offsets and
// counts are in doubles relative to the payload start. Integer state (module
// indices, counters) is stored exactly as doubles below 2^53; the two rng
// counters, which may exceed that, are stored in the header as decimal
// strings.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "modnet/tensor.h"
#include "modnet/trainer.h"

namespace modnet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string library_version;
  /// Resolved config as compact JSON.
  std::string config_json;
  std::vector<std::string> param_names;
  std::vector<Tensor> params;
  TrainerSnapshot trainer;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
/// Throws Error on bad magic, unknown version, or truncated payload.
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace modnet
