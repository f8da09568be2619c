// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include "sinder/defect.hpp"
#include "sinder/image.hpp"
#include "sinder/linearize.hpp"
#include "sinder/model.hpp"

namespace sinder {

/// Tokens projected on their top three principal components, each scaled
/// min-max to 0..255 (R, G, B). Components without variance render as 128.
RgbImage pca_rgb(const TokenGrid& tokens);

/// Acute angle to nu per token, 0 deg -> 0 (black), 90 deg -> 255.
GrayImage angle_heatmap(const TokenGrid& tokens, const Vector& nu);

/// Token norms scaled so the largest maps to 255.
GrayImage norm_map(const TokenGrid& tokens);

struct NormReport {
  std::vector<GrayImage> maps;  // one per grid
  std::string csv;              // layer,token_index,norm,logit
};

/// Norm maps and distribution rows for the layer outputs `layer_grids`
/// (grid k is layer k). The logit column is empty without a table.
NormReport norm_map_and_violin(std::span<const TokenGrid> layer_grids,
                               const SingularDefectTable* table = nullptr);

struct SingularValueDiffRow {
  int layer = 0;
  std::string tensor;
  std::vector<double> diff;  // S_after - S_before for the leading values
};

/// Leading `top_k` singular value changes of every linear, layer by layer.
std::vector<SingularValueDiffRow> singular_value_diff(const VitModel& before,
                                                      const VitModel& after, int top_k = 3);
std::string diff_to_json(std::span<const SingularValueDiffRow> rows);

struct LayerDefectRow {
  int layer = 0;
  int count = 0;
  double mean_logit = 0;
  double std_logit = 0;
  double sigma1 = 0;
  double angle_to_empirical = -1;  // -1 when the layer has no defects
};

/// Per-layer detection summary of one image.
std::vector<LayerDefectRow> defect_rows(std::span<const TokenGrid> grids,
                                        std::span<const DefectMask> masks,
                                        const SingularDefectTable& table);
std::string defect_rows_csv(std::span<const LayerDefectRow> rows);
std::string defect_rows_json(std::span<const LayerDefectRow> rows);

}  // namespace sinder
