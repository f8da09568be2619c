// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

// Hand-written reverse mode through the exact layer forward.

#include <cmath>
#include <string>

#include "sinder/block.hpp"
#include "sinder/error.hpp"
#include "sinder/repair.hpp"

namespace sinder {
namespace {

using WeightGrads = std::array<Matrix, kLinearCount>;

Matrix layer_norm_backward(const block::LayerNormTape& tape, const Vector& w, const Matrix& dh) {
  const double inv_d = 1.0 / static_cast<double>(dh.cols());
  const Matrix g = dh * w.asDiagonal();
  const Vector g_mean = g.rowwise().sum() * inv_d;
  const Vector gx_mean = g.cwiseProduct(tape.xhat).rowwise().sum() * inv_d;
  Matrix dx = g;
  dx.colwise() -= g_mean;
  dx -= gx_mean.asDiagonal() * tape.xhat;
  return tape.rstd.asDiagonal() * dx;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// dy is the gradient at the layer output; returns the gradient at its input
// and fills the dense weight gradients.
Matrix layer_backward(const LayerParams& l, const VitConfig& cfg, const block::LayerTape& tp,
                      const Matrix& dy, WeightGrads& dW) {
  const int d = cfg.dim, hd = cfg.head_dim();
  auto slot = [&dW](LinearKind k) -> Matrix& { return dW[static_cast<std::size_t>(k)]; };

  // MLP branch.
  const Matrix d_mlp = dy * l.ls2.asDiagonal();
  slot(LinearKind::W3) = d_mlp.transpose() * tp.gated;
  const Matrix d_gated = d_mlp * l.mlp_w3;
  const Matrix sig = tp.z1.unaryExpr([](double z) { return sigmoid(z); });
  const Matrix act = tp.z1.cwiseProduct(sig);
  const Matrix dact = sig.array() * (1.0 + tp.z1.array() * (1.0 - sig.array()));
  const Matrix dz1 = d_gated.cwiseProduct(tp.z2).cwiseProduct(dact);
  const Matrix dz2 = d_gated.cwiseProduct(act);
  slot(LinearKind::W1) = dz1.transpose() * tp.h2;
  slot(LinearKind::W2) = dz2.transpose() * tp.h2;
  const Matrix dh2 = dz1 * l.mlp_w1 + dz2 * l.mlp_w2;
  const Matrix dmid = dy + layer_norm_backward(tp.ln2, l.ln2_w, dh2);

  // Attention branch.
  const Matrix d_proj = dmid * l.ls1.asDiagonal();
  slot(LinearKind::Proj) = d_proj.transpose() * tp.attn;
  const Matrix d_attn = d_proj * l.proj_w;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix dq(tp.q.rows(), d), dk(tp.k.rows(), d), dv(tp.v.rows(), d);
  for (int h = 0; h < cfg.heads; ++h) {
    const Matrix& p = tp.probs[static_cast<std::size_t>(h)];
    const auto da = d_attn.middleCols(h * hd, hd);
    const Matrix dp = da * tp.v.middleCols(h * hd, hd).transpose();
    dv.middleCols(h * hd, hd) = p.transpose() * da;
    Matrix ds = dp;
    ds.colwise() -= dp.cwiseProduct(p).rowwise().sum();
    ds = ds.cwiseProduct(p) * scale;
    dq.middleCols(h * hd, hd) = ds * tp.k.middleCols(h * hd, hd);
    dk.middleCols(h * hd, hd) = ds.transpose() * tp.q.middleCols(h * hd, hd);
  }
  slot(LinearKind::Q) = dq.transpose() * tp.h1;
  slot(LinearKind::K) = dk.transpose() * tp.h1;
  slot(LinearKind::V) = dv.transpose() * tp.h1;
  const Matrix dh1 = dq * qkv_block(l.qkv_w, 0, d) + dk * qkv_block(l.qkv_w, 1, d) +
                     dv * qkv_block(l.qkv_w, 2, d);
  return dmid + layer_norm_backward(tp.ln1, l.ln1_w, dh1);
}

void check_layer(const SvdModel& model, int layer) {
  if (layer < 0 || layer >= static_cast<int>(model.layers.size())) {
    fail(ErrorKind::InvalidInput, "loss layer " + std::to_string(layer) + " out of range");
  }
}

}  // namespace

double evaluate_loss(const SvdModel& model, const ImageTensor& image, const LossSpec& spec) {
  check_layer(model, spec.layer);
  const VitModel dense = model.materialize();
  Matrix x = embed(dense, image);
  for (int i = 0; i <= spec.layer; ++i) {
    x = block::layer_forward(dense.layers[static_cast<std::size_t>(i)], dense.config, x);
  }
  return repair_loss(patch_grid(dense.config, x), spec.targets);
}

SvdGradient backward_to_singular_values(const SvdModel& model, const ImageTensor& image,
                                        const LossSpec& spec, int lo) {
  check_layer(model, spec.layer);
  if (lo < 0 || lo > spec.layer) fail(ErrorKind::InvalidInput, "window start out of range");
  if (spec.targets.indices.empty()) fail(ErrorKind::NoDefects, "backward: empty mask");

  const VitModel dense = model.materialize();
  const auto& cfg = dense.config;
  Matrix x = embed(dense, image);
  for (int i = 0; i < lo; ++i) {
    x = block::layer_forward(dense.layers[static_cast<std::size_t>(i)], cfg, x);
  }
  std::vector<block::LayerTape> tapes(static_cast<std::size_t>(spec.layer - lo + 1));
  for (int i = lo; i <= spec.layer; ++i) {
    x = block::layer_forward(dense.layers[static_cast<std::size_t>(i)], cfg, x, true, nullptr,
                             &tapes[static_cast<std::size_t>(i - lo)]);
  }

  SvdGradient out;
  out.lo = lo;
  out.hi = spec.layer;
  out.dS.resize(model.layers.size());
  const TokenGrid grid = patch_grid(cfg, x);
  out.loss = repair_loss(grid, spec.targets);

  const int prefix = cfg.prefix_tokens();
  const double inv_n = 1.0 / static_cast<double>(spec.targets.indices.size());
  Matrix dx = Matrix::Zero(x.rows(), x.cols());
  for (std::size_t k = 0; k < spec.targets.indices.size(); ++k) {
    const int t = spec.targets.indices[k];
    const Vector diff = (grid.tokens.row(t) -
                         spec.targets.targets.row(static_cast<Eigen::Index>(k))).transpose();
    const double n = diff.norm();
    if (n > 0) dx.row(prefix + t) += (diff * (inv_n / n)).transpose();
  }

  for (int i = spec.layer; i >= lo; --i) {
    const auto li = static_cast<std::size_t>(i);
    WeightGrads dW;
    dx = layer_backward(dense.layers[li], cfg, tapes[static_cast<std::size_t>(i - lo)], dx, dW);
    for (int k = 0; k < kLinearCount; ++k) {
      const auto& lin = model.layers[li].linears[static_cast<std::size_t>(k)];
      Vector g = Vector::Zero(lin.rank());
      if (lin.trainable) {
        g = lin.U.cwiseProduct(dW[static_cast<std::size_t>(k)] * lin.V).colwise().sum().transpose();
        if (!g.allFinite()) {
          fail(ErrorKind::NumericalFailure, "non-finite gradient at layer " + std::to_string(i) +
                                                " " + to_string(static_cast<LinearKind>(k)));
        }
      }
      out.dS[li][static_cast<std::size_t>(k)] = std::move(g);
    }
  }
  return out;
}

}  // namespace sinder
