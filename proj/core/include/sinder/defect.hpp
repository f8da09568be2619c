// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include "sinder/linearize.hpp"
#include "sinder/model.hpp"

namespace sinder {

struct DefectMask {
  int layer = -1;
  Vector logits;
  std::vector<bool> mask;
  double mean_logit = 0;
  double std_logit = 0;  // population standard deviation
  int count = 0;

  std::vector<int> indices() const;
};

/// l_t = |x_t / ||x_t|| . nu|; zero tokens get 0.
Vector defect_logits(const TokenGrid& tokens, const Vector& nu);

/// Marks l_t > mean + mu * std (strict, upper tail only).
DefectMask detect_defects(const Vector& logits, double mu, int layer = -1);

/// Masks for layers 0..depth-1; `grids` holds depth + 1 grids from forward()
/// and layer i is judged on grids[i + 1].
std::vector<DefectMask> detect_all_layers(std::span<const TokenGrid> grids,
                                          const SingularDefectTable& table, double mu);

/// True iff every layer has fewer than `sigma` defective tokens; sigma = 0
/// behaves as 1, so an image is clear only with no defects at all.
bool is_clear(std::span<const TokenGrid> grids, const SingularDefectTable& table, int sigma,
              double mu);
bool is_clear(std::span<const DefectMask> masks, int sigma);

/// Sign-aligned mean of normalized defective tokens over all grids, unit
/// norm with the largest-magnitude entry positive. Throws NoDefects.
Vector empirical_defect_direction(std::span<const TokenGrid> grids,
                                  std::span<const DefectMask> masks);

struct DefectStats {
  double mean_defect_norm = 0;
  double mean_normal_norm = 0;
  double intra_image_defect_angle = 0;  // degrees
  double all_token_pairwise_angle = 0;  // degrees
  double cross_image_defect_angle = 0;  // degrees
  int images = 0;
  int images_with_defects = 0;
};

/// Corpus statistics over one grid (and its mask) per image.
DefectStats defect_stats(std::span<const TokenGrid> grids, std::span<const DefectMask> masks);

std::string stats_to_json(const DefectStats& stats);

Vector token_norms(const TokenGrid& grid);

/// max / median of the per-token L2 norms.
double max_median_norm_ratio(const TokenGrid& grid);

}  // namespace sinder
