// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sinder/model.hpp"

namespace sinder::testing {

inline constexpr std::uint64_t kFixtureSeed = 7;
inline constexpr int kDefectLayer = 2;
inline constexpr std::uint64_t kProbeImageSeed = 1000;
inline constexpr std::uint64_t kTrainImageSeed = 5000;

/// Fixture model (depth 6, dim 64) with the defect layer inflated; cached.
const VitModel& fixture_model(double inflation);

/// synth_image(img_size, base_seed + i) for i < n.
std::vector<RgbImage> seeded_images(int n, std::uint64_t base_seed, int img_size = 128);

/// Last-layer max/median token norm ratio averaged over images.
double mean_norm_ratio(const VitModel& model, std::span<const RgbImage> images);

/// Fresh empty directory under the system temp dir.
std::filesystem::path temp_dir(const std::string& name);

/// Small random model with every parameter N(0, scale^2) except layer norm
/// weights (1 + noise) for oracle comparisons.
VitModel random_model(const VitConfig& cfg, std::uint64_t seed, double scale = 0.2);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

namespace oracle {

/// Straight scalar-loop forward of a model: returns every layer's full token
/// list (cls first) as nested vectors.
std::vector<std::vector<std::vector<double>>> forward(const VitModel& model,
                                                      const ImageTensor& image);

}  // namespace oracle
}  // namespace sinder::testing
