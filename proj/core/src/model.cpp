// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#include "sinder/model.hpp"

#include <cassert>
#include <cmath>
#include <string>

#include "sinder/block.hpp"
#include "sinder/error.hpp"

namespace sinder {

void VitConfig::validate() const {
  auto bad = [](const std::string& why) { fail(ErrorKind::InvalidInput, "VitConfig: " + why); };
  if (depth < 1) bad("depth must be >= 1");
  if (dim < 1 || heads < 1 || mlp_hidden < 1 || patch < 1 || img_size < 1) {
    bad("all counts must be positive");
  }
  if (n_registers < 0) bad("n_registers must be >= 0");
  if (dim % heads != 0) bad("dim must be divisible by heads");
  if (img_size % patch != 0) bad("img_size must be divisible by patch");
  if (!(ln_eps > 0)) bad("ln_eps must be positive");
}

LayerParams LayerParams::zeros(const VitConfig& cfg) {
  const int d = cfg.dim, m = cfg.mlp_hidden;
  LayerParams p;
  p.ln1_w = Vector::Ones(d);
  p.ln1_b = Vector::Zero(d);
  p.qkv_w = Matrix::Zero(3 * d, d);
  p.qkv_b = Vector::Zero(3 * d);
  p.proj_w = Matrix::Zero(d, d);
  p.proj_b = Vector::Zero(d);
  p.ls1 = Vector::Zero(d);
  p.ln2_w = Vector::Ones(d);
  p.ln2_b = Vector::Zero(d);
  p.mlp_w1 = Matrix::Zero(m, d);
  p.mlp_h1 = Vector::Zero(m);
  p.mlp_w2 = Matrix::Zero(m, d);
  p.mlp_h2 = Vector::Zero(m);
  p.mlp_w3 = Matrix::Zero(d, m);
  p.mlp_d3 = Vector::Zero(d);
  p.ls2 = Vector::Zero(d);
  return p;
}

VitModel VitModel::zeros(const VitConfig& cfg) {
  cfg.validate();
  VitModel m;
  m.config = cfg;
  m.patch_embed_w = Matrix::Zero(cfg.dim, cfg.patch_dim());
  m.patch_embed_b = Vector::Zero(cfg.dim);
  m.pos_embed = Matrix::Zero(cfg.patch_tokens(), cfg.dim);
  m.cls_token = Vector::Zero(cfg.dim);
  m.registers = Matrix::Zero(cfg.n_registers, cfg.dim);
  m.layers.assign(cfg.depth, LayerParams::zeros(cfg));
  m.final_ln_w = Vector::Ones(cfg.dim);
  m.final_ln_b = Vector::Zero(cfg.dim);
  return m;
}

void VitModel::validate() const {
  config.validate();
  const int d = config.dim, m = config.mlp_hidden;
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::InvalidInput, "VitModel: bad shape for " + what);
  };
  auto vec = [&](const Vector& v, int n, const std::string& what) {
    check(v.size() == n, what);
    if (!v.allFinite()) fail(ErrorKind::InvalidInput, "VitModel: non-finite " + what);
  };
  auto mat = [&](const Matrix& a, int r, int c, const std::string& what) {
    check(a.rows() == r && a.cols() == c, what);
    if (!a.allFinite()) fail(ErrorKind::InvalidInput, "VitModel: non-finite " + what);
  };
  mat(patch_embed_w, d, config.patch_dim(), "patch_embed_w");
  vec(patch_embed_b, d, "patch_embed_b");
  mat(pos_embed, config.patch_tokens(), d, "pos_embed");
  vec(cls_token, d, "cls_token");
  mat(registers, config.n_registers, d, "registers");
  check(static_cast<int>(layers.size()) == config.depth, "layers (count)");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layer " + std::to_string(i) + " ";
    vec(l.ln1_w, d, p + "ln1_w");
    vec(l.ln1_b, d, p + "ln1_b");
    mat(l.qkv_w, 3 * d, d, p + "qkv_w");
    vec(l.qkv_b, 3 * d, p + "qkv_b");
    mat(l.proj_w, d, d, p + "proj_w");
    vec(l.proj_b, d, p + "proj_b");
    vec(l.ls1, d, p + "ls1");
    vec(l.ln2_w, d, p + "ln2_w");
    vec(l.ln2_b, d, p + "ln2_b");
    mat(l.mlp_w1, m, d, p + "mlp_w1");
    vec(l.mlp_h1, m, p + "mlp_h1");
    mat(l.mlp_w2, m, d, p + "mlp_w2");
    vec(l.mlp_h2, m, p + "mlp_h2");
    mat(l.mlp_w3, d, m, p + "mlp_w3");
    vec(l.mlp_d3, d, p + "mlp_d3");
    vec(l.ls2, d, p + "ls2");
  }
  vec(final_ln_w, d, "final_ln_w");
  vec(final_ln_b, d, "final_ln_b");
}

Matrix qkv_block(const Matrix& qkv_w, int block, int dim) {
  return qkv_w.middleRows(static_cast<Eigen::Index>(block) * dim, dim);
}

namespace block {

Matrix layer_norm(const Matrix& x, const Vector& w, const Vector& b, double eps,
                  bool exact, LayerNormTape* tape) {
  const Eigen::Index n = x.rows();
  const double inv_d = 1.0 / static_cast<double>(x.cols());
  Matrix xhat = x.colwise() - x.rowwise().sum() * inv_d;
  Vector rstd = Vector::Ones(n);
  if (exact) {
    rstd = ((xhat.array().square().rowwise().sum() * inv_d) + eps).rsqrt();
    xhat = rstd.asDiagonal() * xhat;
  }
  Matrix out = (xhat * w.asDiagonal()).rowwise() + b.transpose();
  if (tape) {
    tape->xhat = std::move(xhat);
    tape->rstd = std::move(rstd);
  }
  return out;
}

Matrix attention_branch(const LayerParams& layer, const VitConfig& cfg,
                        const Matrix& x, bool exact_ln, LayerTape* tape) {
  const int d = cfg.dim, hd = cfg.head_dim();
  const Eigen::Index n = x.rows();
  LayerNormTape ln;
  Matrix h = layer_norm(x, layer.ln1_w, layer.ln1_b, cfg.ln_eps, exact_ln, tape ? &ln : nullptr);
  Matrix qkv = (h * layer.qkv_w.transpose()).rowwise() + layer.qkv_b.transpose();
  Matrix q = qkv.leftCols(d), k = qkv.middleCols(d, d), v = qkv.rightCols(d);

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix attn(n, d);
  std::vector<Matrix> probs;
  if (tape) probs.reserve(cfg.heads);
  for (int head = 0; head < cfg.heads; ++head) {
    const auto qh = q.middleCols(head * hd, hd);
    const auto kh = k.middleCols(head * hd, hd);
    Matrix p = (qh * kh.transpose()) * scale;
    for (Eigen::Index r = 0; r < n; ++r) {
      auto row = p.row(r);
      row = (row.array() - row.maxCoeff()).exp();
      row /= row.sum();
      assert(std::abs(row.sum() - 1.0) <= 1e-9);
    }
    attn.middleCols(head * hd, hd).noalias() = p * v.middleCols(head * hd, hd);
    if (tape) probs.push_back(std::move(p));
  }
  Matrix proj = (attn * layer.proj_w.transpose()).rowwise() + layer.proj_b.transpose();
  Matrix out = proj * layer.ls1.asDiagonal();
  if (tape) {
    tape->ln1 = std::move(ln);
    tape->h1 = std::move(h);
    tape->q = std::move(q);
    tape->k = std::move(k);
    tape->v = std::move(v);
    tape->probs = std::move(probs);
    tape->attn = std::move(attn);
    tape->proj = std::move(proj);
  }
  return out;
}

Matrix swiglu_core(const LayerParams& layer, const Matrix& z_cols) {
  Matrix z1 = (layer.mlp_w1 * z_cols).colwise() + layer.mlp_h1;
  const Matrix z2 = (layer.mlp_w2 * z_cols).colwise() + layer.mlp_h2;
  return z1.unaryExpr([](double z) { return silu(z); }).cwiseProduct(z2);
}

Matrix mlp_branch(const LayerParams& layer, const VitConfig& cfg,
                  const Matrix& x, bool exact_ln, const Matrix* surrogate,
                  LayerTape* tape) {
  LayerNormTape ln;
  Matrix h = layer_norm(x, layer.ln2_w, layer.ln2_b, cfg.ln_eps, exact_ln, tape ? &ln : nullptr);
  Matrix z1, z2, gated;
  if (surrogate) {
    gated = h * surrogate->transpose();
  } else {
    z1 = (h * layer.mlp_w1.transpose()).rowwise() + layer.mlp_h1.transpose();
    z2 = (h * layer.mlp_w2.transpose()).rowwise() + layer.mlp_h2.transpose();
    gated = z1.unaryExpr([](double z) { return silu(z); }).cwiseProduct(z2);
  }
  Matrix mlp = (gated * layer.mlp_w3.transpose()).rowwise() + layer.mlp_d3.transpose();
  Matrix out = mlp * layer.ls2.asDiagonal();
  if (tape) {
    tape->ln2 = std::move(ln);
    tape->h2 = std::move(h);
    tape->z1 = std::move(z1);
    tape->z2 = std::move(z2);
    tape->gated = std::move(gated);
    tape->mlp = std::move(mlp);
  }
  return out;
}

Matrix layer_forward(const LayerParams& layer, const VitConfig& cfg,
                     const Matrix& x, bool exact_ln, const Matrix* surrogate,
                     LayerTape* tape) {
  Matrix mid = x + attention_branch(layer, cfg, x, exact_ln, tape);
  return mid + mlp_branch(layer, cfg, mid, exact_ln, surrogate, tape);
}

}  // namespace block

Matrix patchify(const ImageTensor& image, int patch) {
  const int gh = image.height / patch, gw = image.width / patch;
  Matrix out(gh * gw, 3 * patch * patch);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      auto row = out.row(gy * gw + gx);
      int j = 0;
      for (int c = 0; c < 3; ++c)
        for (int py = 0; py < patch; ++py)
          for (int px = 0; px < patch; ++px)
            row[j++] = image.channels[c](gy * patch + py, gx * patch + px);
    }
  }
  return out;
}

Matrix embed(const VitModel& model, const ImageTensor& image) {
  const auto& cfg = model.config;
  if (image.width != cfg.img_size || image.height != cfg.img_size) {
    fail(ErrorKind::InvalidInput,
         "image is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
             ", model expects " + std::to_string(cfg.img_size) + "x" +
             std::to_string(cfg.img_size));
  }
  const int prefix = cfg.prefix_tokens();
  Matrix tokens(prefix + cfg.patch_tokens(), cfg.dim);
  tokens.row(0) = model.cls_token.transpose();
  if (cfg.n_registers > 0) tokens.middleRows(1, cfg.n_registers) = model.registers;
  Matrix patches = patchify(image, cfg.patch) * model.patch_embed_w.transpose();
  patches.rowwise() += model.patch_embed_b.transpose();
  tokens.bottomRows(cfg.patch_tokens()) = patches + model.pos_embed;
  return tokens;
}

std::vector<Matrix> forward_tokens(const VitModel& model, const Matrix& tokens,
                                   const ForwardOptions& opts) {
  const auto& cfg = model.config;
  if (tokens.cols() != cfg.dim) {
    fail(ErrorKind::InvalidInput, "forward: token dimension mismatch");
  }
  if (!opts.mlp_surrogate.empty() &&
      opts.mlp_surrogate.size() != model.layers.size()) {
    fail(ErrorKind::InvalidInput, "forward: need one MLP surrogate per layer");
  }
  std::vector<Matrix> out;
  out.reserve(model.layers.size() + 1);
  out.push_back(tokens);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Matrix* surrogate = opts.mlp_surrogate.empty() ? nullptr : &opts.mlp_surrogate[i];
    out.push_back(block::layer_forward(model.layers[i], cfg, out.back(), opts.exact_ln, surrogate));
  }
  return out;
}

TokenGrid patch_grid(const VitConfig& cfg, const Matrix& tokens) {
  TokenGrid g;
  g.h = g.w = cfg.grid();
  g.tokens = tokens.bottomRows(cfg.patch_tokens());
  return g;
}

std::vector<TokenGrid> forward(const VitModel& model, const ImageTensor& image) {
  const auto all = forward_tokens(model, embed(model, image));
  std::vector<TokenGrid> grids;
  grids.reserve(all.size());
  for (const auto& t : all) grids.push_back(patch_grid(model.config, t));
  return grids;
}

std::vector<TokenGrid> forward(const VitModel& model, const RgbImage& image) {
  return forward(model, to_tensor(image, model.normalization));
}

std::vector<Vector> forward_single_token(const VitModel& model, const Vector& x,
                                         bool exact_ln,
                                         std::span<const Matrix> mlp_surrogate) {
  if (x.size() != model.config.dim) {
    fail(ErrorKind::InvalidInput, "forward_single_token: dimension mismatch");
  }
  const auto all = forward_tokens(model, x.transpose(), {exact_ln, mlp_surrogate});
  std::vector<Vector> out;
  out.reserve(all.size() - 1);
  for (std::size_t i = 1; i < all.size(); ++i) out.push_back(all[i].row(0).transpose());
  return out;
}

}  // namespace sinder
