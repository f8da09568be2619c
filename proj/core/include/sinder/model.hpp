// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "sinder/image.hpp"
#include "sinder/linalg.hpp"

namespace sinder {

using linalg::Matrix;
using linalg::Vector;

struct VitConfig {
  int depth = 8;
  int dim = 64;
  int heads = 4;
  int mlp_hidden = 128;
  int patch = 8;
  int img_size = 128;
  int n_registers = 0;
  double ln_eps = 1e-6;

  int grid() const { return img_size / patch; }
  int patch_tokens() const { return grid() * grid(); }
  int prefix_tokens() const { return 1 + n_registers; }
  int head_dim() const { return dim / heads; }
  int patch_dim() const { return 3 * patch * patch; }

  /// Throws InvalidInput when the invariants do not hold.
  void validate() const;
  bool operator==(const VitConfig&) const = default;
};

/// One transformer layer: pre-norm attention and SwiGLU MLP, each behind a
/// layer-scale diagonal. Fused qkv rows are [query | key | value].
struct LayerParams {
  Vector ln1_w, ln1_b;
  Matrix qkv_w;  // 3D x D
  Vector qkv_b;  // 3D
  Matrix proj_w;  // D x D
  Vector proj_b;
  Vector ls1;
  Vector ln2_w, ln2_b;
  Matrix mlp_w1;  // M x D
  Vector mlp_h1;
  Matrix mlp_w2;  // M x D
  Vector mlp_h2;
  Matrix mlp_w3;  // D x M
  Vector mlp_d3;
  Vector ls2;

  static LayerParams zeros(const VitConfig& cfg);
};

struct VitModel {
  VitConfig config;
  Normalization normalization;
  Matrix patch_embed_w;  // D x 3p^2, input index = c*p*p + py*p + px
  Vector patch_embed_b;
  Matrix pos_embed;  // T x D, patch tokens only
  Vector cls_token;
  Matrix registers;  // n_registers x D
  std::vector<LayerParams> layers;
  Vector final_ln_w, final_ln_b;

  static VitModel zeros(const VitConfig& cfg);
  void validate() const;
};

/// Patch tokens of one layer boundary; token t sits at (t / w, t % w).
struct TokenGrid {
  int h = 0;
  int w = 0;
  Matrix tokens;  // (h*w) x d

  int count() const { return h * w; }
  int dim() const { return static_cast<int>(tokens.cols()); }
  Vector token(int t) const { return tokens.row(t).transpose(); }
};

struct ForwardOptions {
  /// When false the layer-norm std divide is skipped (centering and affine
  /// kept), which is the regime the linearization describes.
  bool exact_ln = true;
  /// Optional per-layer M x D matrices replacing silu(W1 x+h1)*(W2 x+h2).
  std::span<const Matrix> mlp_surrogate{};
};

/// T x 3p^2 patch matrix of a normalized image.
Matrix patchify(const ImageTensor& image, int patch);

/// Full token matrix (cls, registers, patches) entering the first layer.
Matrix embed(const VitModel& model, const ImageTensor& image);

/// Runs every layer over a token matrix. Returns depth + 1 matrices: the
/// input followed by each layer's output.
std::vector<Matrix> forward_tokens(const VitModel& model, const Matrix& tokens,
                                   const ForwardOptions& opts = {});

/// depth + 1 patch-token grids: the embedding and every layer's output
/// (after both residual additions, before the final norm).
std::vector<TokenGrid> forward(const VitModel& model, const ImageTensor& image);
std::vector<TokenGrid> forward(const VitModel& model, const RgbImage& image);

/// Per-layer outputs for a lone token (no cls). Attention over a single
/// token reduces to the value path.
std::vector<Vector> forward_single_token(const VitModel& model, const Vector& x,
                                         bool exact_ln,
                                         std::span<const Matrix> mlp_surrogate = {});

TokenGrid patch_grid(const VitConfig& cfg, const Matrix& tokens);

/// Copies the three row blocks out of a fused qkv weight.
Matrix qkv_block(const Matrix& qkv_w, int block, int dim);

}  // namespace sinder
