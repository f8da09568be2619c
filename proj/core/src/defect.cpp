// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#include "sinder/defect.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <nlohmann/json.hpp>

#include "sinder/error.hpp"

namespace sinder {

std::vector<int> DefectMask::indices() const {
  std::vector<int> out;
  for (std::size_t t = 0; t < mask.size(); ++t)
    if (mask[t]) out.push_back(static_cast<int>(t));
  return out;
}

Vector defect_logits(const TokenGrid& tokens, const Vector& nu) {
  if (tokens.dim() != nu.size()) {
    fail(ErrorKind::InvalidInput, "defect_logits: token and direction dimensions differ");
  }
  const Vector dots = tokens.tokens * nu;
  const Vector norms = tokens.tokens.rowwise().norm();
  Vector out(dots.size());
  for (Eigen::Index t = 0; t < dots.size(); ++t) {
    out[t] = norms[t] > 0 ? std::min(1.0, std::abs(dots[t]) / norms[t]) : 0.0;
  }
  return out;
}

DefectMask detect_defects(const Vector& logits, double mu, int layer) {
  if (logits.size() < 2) fail(ErrorKind::InvalidInput, "detect_defects: need at least 2 tokens");
  if (!(mu > 0)) fail(ErrorKind::InvalidInput, "detect_defects: mu must be positive");
  DefectMask m;
  m.layer = layer;
  m.logits = logits;
  m.mean_logit = logits.mean();
  m.std_logit = std::sqrt((logits.array() - m.mean_logit).square().mean());
  const double threshold = m.mean_logit + mu * m.std_logit;
  m.mask.resize(static_cast<std::size_t>(logits.size()));
  for (Eigen::Index t = 0; t < logits.size(); ++t) {
    m.mask[static_cast<std::size_t>(t)] = logits[t] > threshold;
    m.count += logits[t] > threshold;
  }
  return m;
}

std::vector<DefectMask> detect_all_layers(std::span<const TokenGrid> grids,
                                          const SingularDefectTable& table, double mu) {
  if (grids.size() != table.size() + 1) {
    fail(ErrorKind::InvalidInput, "detect_all_layers: expected depth + 1 grids");
  }
  std::vector<DefectMask> out;
  out.reserve(table.size());
  for (std::size_t i = 0; i < table.size(); ++i) {
    out.push_back(detect_defects(defect_logits(grids[i + 1], table.layers[i].nu), mu,
                                 static_cast<int>(i)));
  }
  return out;
}

bool is_clear(std::span<const DefectMask> masks, int sigma) {
  return std::all_of(masks.begin(), masks.end(),
                     [sigma](const DefectMask& m) { return m.count < std::max(sigma, 1); });
}

bool is_clear(std::span<const TokenGrid> grids, const SingularDefectTable& table, int sigma,
              double mu) {
  const auto masks = detect_all_layers(grids, table, mu);
  return is_clear(std::span<const DefectMask>(masks), sigma);
}

namespace {

// Running sign-aligned sum of unit vectors.
struct AlignedSum {
  Vector sum;
  int n = 0;

  void add(const Vector& x) {
    const double norm = x.norm();
    if (norm == 0) return;
    const Vector unit = x / norm;
    if (sum.size() == 0) sum = Vector::Zero(unit.size());
    sum += (sum.dot(unit) < 0 ? -1.0 : 1.0) * unit;
    ++n;
  }

  Vector direction() const {
    if (n == 0 || sum.norm() == 0) fail(ErrorKind::NoDefects, "no defective tokens");
    Vector out = sum.normalized();
    linalg::canonicalize_sign(out);
    return out;
  }
};

double mean_pairwise_angle(const Matrix& rows) {
  const Eigen::Index n = rows.rows();
  if (n < 2) return 0.0;
  Matrix unit = rows;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = unit.row(i).norm();
    if (norm > 0) unit.row(i) /= norm;
  }
  const Matrix cosines = unit * unit.transpose();
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      total += std::acos(std::clamp(std::abs(cosines(i, j)), 0.0, 1.0));
  return total / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1)) * 180.0 / std::numbers::pi;
}

}  // namespace

Vector empirical_defect_direction(std::span<const TokenGrid> grids,
                                  std::span<const DefectMask> masks) {
  if (grids.size() != masks.size()) {
    fail(ErrorKind::InvalidInput, "empirical_defect_direction: grids and masks differ in count");
  }
  AlignedSum acc;
  for (std::size_t g = 0; g < grids.size(); ++g) {
    for (int t : masks[g].indices()) acc.add(grids[g].token(t));
  }
  return acc.direction();
}

DefectStats defect_stats(std::span<const TokenGrid> grids, std::span<const DefectMask> masks) {
  if (grids.empty()) fail(ErrorKind::InvalidInput, "defect_stats: empty corpus");
  if (grids.size() != masks.size()) {
    fail(ErrorKind::InvalidInput, "defect_stats: grids and masks differ in count");
  }
  DefectStats s;
  s.images = static_cast<int>(grids.size());
  double normal_sum = 0, defect_sum = 0, intra_sum = 0, all_sum = 0;
  int normal_images = 0, intra_images = 0;
  std::vector<Vector> per_image_dirs;

  for (std::size_t g = 0; g < grids.size(); ++g) {
    const auto& grid = grids[g];
    const Vector norms = token_norms(grid);
    const auto defects = masks[g].indices();
    all_sum += mean_pairwise_angle(grid.tokens);

    const Eigen::Index normal_count = grid.count() - static_cast<Eigen::Index>(defects.size());
    if (normal_count > 0) {
      double total = norms.sum();
      for (int t : defects) total -= norms[t];
      normal_sum += total / static_cast<double>(normal_count);
      ++normal_images;
    }
    if (defects.empty()) continue;

    ++s.images_with_defects;
    Matrix rows(static_cast<Eigen::Index>(defects.size()), grid.dim());
    AlignedSum acc;
    double norm_total = 0;
    for (std::size_t k = 0; k < defects.size(); ++k) {
      rows.row(static_cast<Eigen::Index>(k)) = grid.tokens.row(defects[k]);
      norm_total += norms[defects[k]];
      acc.add(grid.token(defects[k]));
    }
    defect_sum += norm_total / static_cast<double>(defects.size());
    if (defects.size() >= 2) {
      intra_sum += mean_pairwise_angle(rows);
      ++intra_images;
    }
    per_image_dirs.push_back(acc.direction());
  }
  if (s.images_with_defects == 0) fail(ErrorKind::NoDefects, "defect_stats: no image has defects");

  s.mean_defect_norm = defect_sum / s.images_with_defects;
  s.mean_normal_norm = normal_images > 0 ? normal_sum / normal_images : 0.0;
  s.intra_image_defect_angle = intra_images > 0 ? intra_sum / intra_images : 0.0;
  s.all_token_pairwise_angle = all_sum / s.images;
  Matrix dirs(static_cast<Eigen::Index>(per_image_dirs.size()), grids[0].dim());
  for (std::size_t k = 0; k < per_image_dirs.size(); ++k) {
    dirs.row(static_cast<Eigen::Index>(k)) = per_image_dirs[k].transpose();
  }
  s.cross_image_defect_angle = mean_pairwise_angle(dirs);
  return s;
}

std::string stats_to_json(const DefectStats& s) {
  nlohmann::ordered_json doc = {{"mean_defect_norm", s.mean_defect_norm},
                                {"mean_normal_norm", s.mean_normal_norm},
                                {"intra_image_defect_angle", s.intra_image_defect_angle},
                                {"all_token_pairwise_angle", s.all_token_pairwise_angle},
                                {"cross_image_defect_angle", s.cross_image_defect_angle},
                                {"images", s.images},
                                {"images_with_defects", s.images_with_defects}};
  return doc.dump(2) + "\n";
}

Vector token_norms(const TokenGrid& grid) { return grid.tokens.rowwise().norm(); }

double max_median_norm_ratio(const TokenGrid& grid) {
  Vector norms = token_norms(grid);
  std::vector<double> v(norms.data(), norms.data() + norms.size());
  if (v.empty()) fail(ErrorKind::InvalidInput, "max_median_norm_ratio: empty grid");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  const double median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  if (median == 0) fail(ErrorKind::InvalidInput, "max_median_norm_ratio: zero median norm");
  return v.back() / median;
}

}  // namespace sinder
