// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint interchange format.
//
// A checkpoint is a directory with two files:
//
//   manifest.json  schema_version, layout ("dense" or "factored"), the
//                  VitConfig fields, normalization mean/std, an ordered
//                  tensor table {name, shape, dtype: "f32", byte_offset},
//                  the weights byte count and its CRC32, and free-form
//                  string metadata.
//   weights.bin    little-endian IEEE-754 float32 tensors, row-major,
//                  concatenated in table order with no padding.
//
// In the factored layout every linear weight B.weight is replaced by the
// triple B.U (out x r), B.S (r), B.V (in x r); the fused qkv weight is
// stored as three blocks blocks.i.attn.{q,k,v}. Bias tensors keep their
// dense names in both layouts.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sinder/model.hpp"

namespace sinder {

inline constexpr int kSchemaVersion = 1;

struct TensorRecord {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const;
};

struct CheckpointContents {
  VitConfig config;
  Normalization normalization;
  std::string layout = "dense";
  std::map<std::string, std::string> metadata;
  std::vector<TensorRecord> tensors;

  const TensorRecord& find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& dir, const CheckpointContents& contents);
/// Verifies schema, byte counts, CRC32 and per-tensor extents. Throws
/// FormatError naming the offending tensor.
CheckpointContents read_checkpoint(const std::filesystem::path& dir);

/// Ordered dense tensor table for a model (values narrowed to float32).
std::vector<TensorRecord> dense_tensors(const VitModel& model);

/// Expected (name, shape) table of a layout, in file order.
std::vector<std::pair<std::string, std::vector<std::int64_t>>> expected_tensor_table(
    const VitConfig& cfg, const std::string& layout);

/// Linear tensors subject to reparameterization, as factored base names
/// (blocks.i.attn.q, ..., blocks.i.mlp.w3).
std::vector<std::string> linear_names(int layer);

void save_checkpoint(const VitModel& model, const std::filesystem::path& dir,
                     const std::map<std::string, std::string>& metadata = {});

/// Loads either layout; factored linears are recomposed to dense weights.
VitModel load_checkpoint(const std::filesystem::path& dir);

/// Builds a dense model from contents (dense layout tensors or recomposed).
VitModel model_from_contents(const CheckpointContents& contents);

/// Rounds every parameter to float32 precision in place.
void round_to_f32(VitModel& model);

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes);

}  // namespace sinder
