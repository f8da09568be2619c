// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#include "sinder/report.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <nlohmann/json.hpp>
#include <sstream>

#include "sinder/error.hpp"
#include "sinder/repair.hpp"

namespace sinder {
namespace {

std::uint8_t to_byte(double unit) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(unit, 0.0, 1.0) * 255.0));
}

GrayImage blank(const TokenGrid& g) {
  return {g.w, g.h, std::vector<std::uint8_t>(static_cast<std::size_t>(g.count()), 0)};
}

// Shortest round-trip decimal form.
std::string num(double v) { return nlohmann::json(v).dump(); }

}  // namespace

RgbImage pca_rgb(const TokenGrid& tokens) {
  if (tokens.count() < 3) fail(ErrorKind::InvalidInput, "pca_rgb: need at least 3 tokens");
  const Matrix centered = tokens.tokens.rowwise() - tokens.tokens.colwise().mean();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(tokens.count());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  const Vector values = eig.eigenvalues();  // ascending
  const double total = std::max(values.sum(), 0.0);

  RgbImage out(tokens.w, tokens.h, 128);
  const Eigen::Index d = cov.rows();
  for (int c = 0; c < 3 && c < d; ++c) {
    const Eigen::Index idx = d - 1 - c;
    if (!(values[idx] > 1e-12 * total) || total == 0) continue;
    Vector axis = eig.eigenvectors().col(idx);
    linalg::canonicalize_sign(axis);
    const Vector proj = centered * axis;
    const double lo = proj.minCoeff(), hi = proj.maxCoeff();
    if (!(hi > lo)) continue;
    for (int t = 0; t < tokens.count(); ++t) {
      out.at(t % tokens.w, t / tokens.w)[c] = to_byte((proj[t] - lo) / (hi - lo));
    }
  }
  return out;
}

GrayImage angle_heatmap(const TokenGrid& tokens, const Vector& nu) {
  if (tokens.dim() != nu.size()) fail(ErrorKind::InvalidInput, "angle_heatmap: dimension mismatch");
  if (nu.norm() == 0) fail(ErrorKind::InvalidInput, "angle_heatmap: zero direction");
  GrayImage out = blank(tokens);
  for (int t = 0; t < tokens.count(); ++t) {
    const Vector x = tokens.token(t);
    out.pixels[static_cast<std::size_t>(t)] =
        x.norm() == 0 ? 255 : to_byte(linalg::acute_angle(x, nu) / 90.0);
  }
  return out;
}

GrayImage norm_map(const TokenGrid& tokens) {
  GrayImage out = blank(tokens);
  const Vector norms = token_norms(tokens);
  const double top = norms.size() ? norms.maxCoeff() : 0.0;
  if (top == 0) return out;
  for (int t = 0; t < tokens.count(); ++t) {
    out.pixels[static_cast<std::size_t>(t)] = to_byte(norms[t] / top);
  }
  return out;
}

NormReport norm_map_and_violin(std::span<const TokenGrid> layer_grids,
                               const SingularDefectTable* table) {
  if (layer_grids.empty()) fail(ErrorKind::InvalidInput, "norm_map_and_violin: no grids");
  if (table && table->size() < layer_grids.size()) {
    fail(ErrorKind::InvalidInput, "norm_map_and_violin: table has fewer layers than grids");
  }
  NormReport out;
  std::ostringstream csv;
  csv << "layer,token_index,norm,logit\n";
  for (std::size_t layer = 0; layer < layer_grids.size(); ++layer) {
    const auto& g = layer_grids[layer];
    out.maps.push_back(norm_map(g));
    const Vector norms = token_norms(g);
    Vector logits;
    if (table) logits = defect_logits(g, table->nu(static_cast<int>(layer)));
    for (int t = 0; t < g.count(); ++t) {
      csv << layer << ',' << t << ',' << num(norms[t]) << ',';
      if (table) csv << num(logits[t]);
      csv << '\n';
    }
  }
  out.csv = csv.str();
  return out;
}

std::vector<SingularValueDiffRow> singular_value_diff(const VitModel& before,
                                                      const VitModel& after, int top_k) {
  if (!(before.config == after.config)) {
    fail(ErrorKind::InvalidInput, "singular_value_diff: architectures differ");
  }
  if (top_k < 1) fail(ErrorKind::InvalidInput, "singular_value_diff: top_k must be positive");
  before.validate();
  after.validate();
  const int d = before.config.dim;
  std::vector<SingularValueDiffRow> rows;
  for (int i = 0; i < before.config.depth; ++i) {
    for (int k = 0; k < kLinearCount; ++k) {
      const auto kind = static_cast<LinearKind>(k);
      const auto li = static_cast<std::size_t>(i);
      const Vector sb = linalg::singular_values(linear_weight(before.layers[li], kind, d));
      const Vector sa = linalg::singular_values(linear_weight(after.layers[li], kind, d));
      SingularValueDiffRow row{i, to_string(kind), {}};
      for (Eigen::Index j = 0; j < std::min<Eigen::Index>(top_k, sb.size()); ++j) {
        row.diff.push_back(sa[j] - sb[j]);
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string diff_to_json(std::span<const SingularValueDiffRow> rows) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    doc.push_back({{"layer", r.layer}, {"tensor", r.tensor}, {"diff", r.diff}});
  }
  return doc.dump(2) + "\n";
}

std::vector<LayerDefectRow> defect_rows(std::span<const TokenGrid> grids,
                                        std::span<const DefectMask> masks,
                                        const SingularDefectTable& table) {
  if (grids.size() != table.size() + 1 || masks.size() != table.size()) {
    fail(ErrorKind::InvalidInput, "defect_rows: expected depth + 1 grids and depth masks");
  }
  std::vector<LayerDefectRow> rows;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    LayerDefectRow r;
    r.layer = static_cast<int>(i);
    r.count = masks[i].count;
    r.mean_logit = masks[i].mean_logit;
    r.std_logit = masks[i].std_logit;
    r.sigma1 = table.layers[i].sigma1;
    if (masks[i].count > 0) {
      const Vector dir = empirical_defect_direction(grids.subspan(i + 1, 1), masks.subspan(i, 1));
      r.angle_to_empirical = linalg::acute_angle(dir, table.nu(static_cast<int>(i)));
    }
    rows.push_back(r);
  }
  return rows;
}

std::string defect_rows_csv(std::span<const LayerDefectRow> rows) {
  std::ostringstream csv;
  csv << "layer,count,mean_logit,std_logit,sigma1,angle_to_empirical\n";
  for (const auto& r : rows) {
    csv << r.layer << ',' << r.count << ',' << num(r.mean_logit) << ',' << num(r.std_logit) << ','
        << num(r.sigma1) << ',';
    if (r.angle_to_empirical >= 0) csv << num(r.angle_to_empirical);
    csv << '\n';
  }
  return csv.str();
}

std::string defect_rows_json(std::span<const LayerDefectRow> rows) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j = {{"layer", r.layer},
                                {"count", r.count},
                                {"mean_logit", r.mean_logit},
                                {"std_logit", r.std_logit},
                                {"sigma1", r.sigma1}};
    if (r.angle_to_empirical >= 0) j["angle_to_empirical"] = r.angle_to_empirical;
    else j["angle_to_empirical"] = nullptr;
    doc.push_back(std::move(j));
  }
  return doc.dump(2) + "\n";
}

}  // namespace sinder
