// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

// Affine approximations of transformer blocks for a lone token, and the
// per-layer defect directions derived from their composition.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sinder/model.hpp"

namespace sinder {

/// x -> mat * x + off.
struct AffineMap {
  Matrix mat;
  Vector off;

  Vector apply(const Vector& x) const { return mat * x + off; }
};

/// Attention branch of a layer with the std divide dropped: the softmax over a
/// single token is 1, leaving centering, norm1 affine, value rows, output
/// projection and layer scale.
AffineMap linearize_attention(const LayerParams& layer);

struct MlpLinearization {
  AffineMap map;
  Matrix core;          // least-squares surrogate of the gated core, M x D
  double residual = 0;  // ||core Z - Y||_F / ||Y||_F on the samples
  bool rank_deficient = false;
};

/// Maps a D x N sample matrix to the M x N gated-core outputs.
using CoreFn = std::function<Matrix(const Matrix&)>;

inline constexpr int kDefaultMlpSamples = 8192;

/// MLP branch linearization. Samples X ~ N(0, 1) (D x n_samples), pushes them
/// through the norm2 affine (no std divide) to Z, fits core * Z ~= Y by least
/// squares and composes with the surrounding affine pieces.
MlpLinearization linearize_mlp(const LayerParams& layer, int n_samples, std::uint64_t seed);

/// Same, with the gated core replaced by `core`.
MlpLinearization linearize_mlp(const LayerParams& layer, int n_samples, std::uint64_t seed,
                               const CoreFn& core);

/// Whole layer with identity paths: E = (I + C)(I + A), f = (I + C) b + d.
AffineMap compose_layer(const AffineMap& attn, const AffineMap& mlp);

/// G_i = E_i ... E_0 for every i; offsets are dropped.
std::vector<Matrix> compose_prefix(const std::vector<AffineMap>& layers);

struct DefectDirection {
  Vector nu;              // unit, largest-magnitude entry positive
  double sigma1 = 0;      // leading singular value of G_i
  double gap = 0;         // sigma1 - sigma2
  double mlp_residual = 0;
  bool near_degenerate = false;
  bool degenerate = false;  // G_i == 0; nu is a placeholder
  bool rank_deficient = false;
};

struct SingularDefectTable {
  int n_samples = kDefaultMlpSamples;
  std::uint64_t seed = 0;
  std::vector<DefectDirection> layers;

  const Vector& nu(int layer) const { return layers.at(static_cast<std::size_t>(layer)).nu; }
  std::size_t size() const { return layers.size(); }
};

/// Seed of the MLP fit for layer `layer` under a table seed.
std::uint64_t layer_seed(std::uint64_t seed, int layer);

/// Per-layer affine maps E_i, f_i (the MLP fits seeded per layer).
std::vector<AffineMap> linearize_layers(const VitModel& model, int n_samples,
                                        std::uint64_t seed,
                                        std::vector<MlpLinearization>* mlps = nullptr);

SingularDefectTable singular_defect_table(const VitModel& model,
                                          int n_samples = kDefaultMlpSamples,
                                          std::uint64_t seed = 0);

/// Analysis JSON: per-layer {layer, sigma1, gap, nu, mlp_residual, flags}.
std::string table_to_json(const SingularDefectTable& table);
SingularDefectTable table_from_json(const std::string& text);

}  // namespace sinder
