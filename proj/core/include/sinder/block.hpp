// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

// Single-layer building blocks with optional tapes for reverse mode.

#pragma once

#include <cmath>
#include <vector>

#include "sinder/model.hpp"

namespace sinder::block {

struct LayerNormTape {
  Matrix xhat;  // normalized rows (or centered rows when not exact)
  Vector rstd;  // 1/sqrt(var+eps) per row; ones when not exact
};

/// Row-wise layer norm. With exact=false the std divide is skipped.
Matrix layer_norm(const Matrix& x, const Vector& w, const Vector& b, double eps,
                  bool exact, LayerNormTape* tape = nullptr);

struct LayerTape {
  LayerNormTape ln1;
  Matrix h1;                  // norm1 output
  Matrix q, k, v;             // N x D
  std::vector<Matrix> probs;  // per head N x N
  Matrix attn;                // concatenated head outputs, N x D
  Matrix proj;                // proj output before layer scale
  LayerNormTape ln2;
  Matrix h2;                  // norm2 output
  Matrix z1, z2;              // N x M pre-activations
  Matrix gated;               // silu(z1) * z2
  Matrix mlp;                 // w3 output before layer scale
};

/// ls1 * Attention(norm1(x)) for a token matrix.
Matrix attention_branch(const LayerParams& layer, const VitConfig& cfg,
                        const Matrix& x, bool exact_ln,
                        LayerTape* tape = nullptr);

/// ls2 * Mlp(norm2(x)); `surrogate` replaces the gated core when non-null.
Matrix mlp_branch(const LayerParams& layer, const VitConfig& cfg,
                  const Matrix& x, bool exact_ln,
                  const Matrix* surrogate = nullptr, LayerTape* tape = nullptr);

/// x + attention branch, then + mlp branch.
Matrix layer_forward(const LayerParams& layer, const VitConfig& cfg,
                     const Matrix& x, bool exact_ln = true,
                     const Matrix* surrogate = nullptr,
                     LayerTape* tape = nullptr);

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }

/// The SwiGLU core silu(W1 z + h1) * (W2 z + h2) applied column-wise to a
/// D x N sample matrix.
Matrix swiglu_core(const LayerParams& layer, const Matrix& z_cols);

}  // namespace sinder::block
