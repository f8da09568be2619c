// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#include "sinder/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "sinder/checkpoint.hpp"
#include "sinder/error.hpp"

namespace sinder {
namespace {

constexpr int kTriggerCount = 6;
constexpr double kLayerScale = 0.2;
constexpr double kProjGain = 0.5;       // leading singular value of proj_w before inflation
constexpr double kValueGain = 2.0;      // operator scale of the value projection
constexpr double kTriggerStrength = 1.2;  // trigger component relative to a typical token norm
constexpr double kQkGain = 1.0;

// Orthonormal completion whose first column is `first`.
Matrix orthonormal_with(const Vector& first, std::mt19937_64& rng) {
  const auto n = first.size();
  std::normal_distribution<double> normal;
  Matrix m(n, n);
  m.col(0) = first.normalized();
  for (Eigen::Index j = 1; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) m(i, j) = normal(rng);
  Eigen::HouseholderQR<Matrix> qr(m);
  Matrix q = qr.householderQ();
  if (q.col(0).dot(first) < 0) q.col(0) = -q.col(0);
  return q;
}

Matrix gaussian(Eigen::Index r, Eigen::Index c, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = normal(rng);
  return m;
}

Vector gaussian(Eigen::Index n, double stddev, std::mt19937_64& rng) {
  return gaussian(n, 1, stddev, rng).col(0);
}

Vector around(Eigen::Index n, double centre, double spread, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(centre - spread, centre + spread);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

Matrix project_out(const Matrix& rows, const Vector& dir) {
  return rows - (rows * dir) * dir.transpose();
}

}  // namespace

VitConfig fixture_config() {
  VitConfig cfg;
  cfg.depth = 6;
  cfg.dim = 64;
  cfg.heads = 4;
  cfg.mlp_hidden = 128;
  cfg.patch = 8;
  cfg.img_size = 128;
  return cfg;
}

std::vector<int> synth_trigger_positions(const VitConfig& cfg, std::uint64_t seed) {
  const int g = cfg.grid();
  std::vector<int> picked;
  if (g < 3) return picked;
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  std::uniform_int_distribution<int> coord(1, g - 2);
  int attempts = 0;
  while (static_cast<int>(picked.size()) < kTriggerCount && attempts++ < 10000) {
    const int y = coord(rng), x = coord(rng);
    const bool clash = std::any_of(picked.begin(), picked.end(), [&](int t) {
      return std::abs(t / g - y) < 3 && std::abs(t % g - x) < 3;
    });
    if (!clash) picked.push_back(y * g + x);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

VitModel synth_defective_model(const VitConfig& cfg, int defect_layer, double inflation,
                               std::uint64_t seed) {
  cfg.validate();
  if (defect_layer < 0 || defect_layer >= cfg.depth) {
    fail(ErrorKind::InvalidInput, "synth: defect_layer out of range");
  }
  if (!(inflation >= 1.0)) fail(ErrorKind::InvalidInput, "synth: inflation must be >= 1");

  std::mt19937_64 rng(seed);
  const int d = cfg.dim, m = cfg.mlp_hidden;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(m));
  VitModel model = VitModel::zeros(cfg);

  // Layer-norm affines close to identity so the trigger survives norm1.
  for (auto& l : model.layers) {
    l.ln1_w = around(d, 1.0, 0.1, rng);
    l.ln1_b = gaussian(d, 0.02, rng);
    l.ln2_w = around(d, 1.0, 0.1, rng);
    l.ln2_b = gaussian(d, 0.02, rng);
    l.ls1 = around(d, kLayerScale, 0.05, rng);
    l.ls2 = around(d, kLayerScale, 0.05, rng);
  }

  // Trigger direction: what the defect layer's value path reads through
  // norm1, restricted to the centred subspace.
  const Vector v1 = gaussian(d, 1.0, rng).normalized();
  auto& hot = model.layers[static_cast<std::size_t>(defect_layer)];
  const Matrix hot_wv = gaussian(d, d, kValueGain * inv_sqrt_d, rng);
  Vector r = hot.ln1_w.asDiagonal() * (hot_wv.transpose() * v1);
  r.array() -= r.mean();
  r.normalize();

  // Embedding: every ordinary token orthogonal to r.
  model.patch_embed_w = project_out(
      gaussian(d, cfg.patch_dim(), 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())), rng)
          .transpose(),
      r).transpose();
  model.patch_embed_b = project_out(gaussian(d, 0.1, rng).transpose(), r).transpose();
  model.pos_embed = project_out(gaussian(cfg.patch_tokens(), d, 1.0, rng), r);
  model.cls_token = project_out(gaussian(d, 1.0, rng).transpose(), r).transpose();
  if (cfg.n_registers > 0) model.registers = project_out(gaussian(cfg.n_registers, d, 1.0, rng), r);
  // A typical token has unit-variance entries, norm about sqrt(2d).
  const double token_norm = std::sqrt(2.0 * d);
  for (int t : synth_trigger_positions(cfg, seed)) {
    model.pos_embed.row(t) += kTriggerStrength * token_norm * r.transpose();
  }

  for (int i = 0; i < cfg.depth; ++i) {
    auto& l = model.layers[static_cast<std::size_t>(i)];
    Matrix wq = gaussian(d, d, 0.3 * inv_sqrt_d, rng);
    Matrix wk = gaussian(d, d, 0.3 * inv_sqrt_d, rng);
    for (int h = 0; h < cfg.heads; ++h) {
      wq.row(h * cfg.head_dim()) += kQkGain * r.transpose();
      wk.row(h * cfg.head_dim()) += kQkGain * r.transpose();
    }
    const Matrix wv =
        i == defect_layer ? hot_wv : gaussian(d, d, kValueGain * inv_sqrt_d, rng);
    l.qkv_w.resize(3 * d, d);
    l.qkv_w << wq, wk, wv;
    l.qkv_b = gaussian(3 * d, 0.02, rng);

    // proj_w = U diag(s) V^T with a flat-ish random spectrum topped at kProjGain.
    std::mt19937_64 basis_rng(rng());
    const Vector lead = (i == defect_layer) ? v1 : gaussian(d, 1.0, rng).normalized();
    const Matrix right = orthonormal_with(lead, basis_rng);
    const Matrix left = orthonormal_with(gaussian(d, 1.0, rng), basis_rng);
    Vector s(d);
    for (int k = 0; k < d; ++k) s[k] = kProjGain * (1.0 - 0.8 * k / static_cast<double>(d));
    if (i == defect_layer) s[0] *= inflation;
    l.proj_w = left * s.asDiagonal() * right.transpose();
    l.proj_b = gaussian(d, 0.02, rng);

    l.mlp_w1 = gaussian(m, d, inv_sqrt_d, rng);
    l.mlp_h1 = gaussian(m, 0.02, rng);
    l.mlp_w2 = gaussian(m, d, inv_sqrt_d, rng);
    l.mlp_h2 = gaussian(m, 0.02, rng);
    l.mlp_w3 = gaussian(d, m, inv_sqrt_m, rng);
    l.mlp_d3 = gaussian(d, 0.02, rng);
  }

  // Ordinary tokens see no constant push along v1 in the defect layer.
  {
    Eigen::Ref<Vector> bv = hot.qkv_b.tail(d);
    bv -= v1 * v1.dot(hot_wv * hot.ln1_b + bv);
  }
  model.final_ln_w = Vector::Ones(d);
  model.final_ln_b = Vector::Zero(d);
  round_to_f32(model);
  return model;
}

}  // namespace sinder
