// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "sinder/model.hpp"

namespace sinder {

/// Random small-weight model with a planted high-gain path.
///
/// A handful of fixed grid positions carry an extra position-embedding
/// component along a trigger direction r that every other token embedding
/// is orthogonal to. In the defect layer, proj_w's leading right singular
/// vector is the image of r under norm1 and the value projection, and that
/// singular value is multiplied by `inflation`. Query/key weights carry a
/// rank-one term along r so trigger tokens attend to each other. With
/// inflation = 1 nothing stands out; large inflation makes the trigger
/// tokens high-norm from the defect layer on. Deterministic in `seed`;
/// every parameter is an exact float32 value.
VitModel synth_defective_model(const VitConfig& cfg, int defect_layer, double inflation,
                               std::uint64_t seed);

/// Grid positions (row-major token indices) carrying the trigger component.
std::vector<int> synth_trigger_positions(const VitConfig& cfg, std::uint64_t seed);

/// Fixture architecture used by the tests: depth 6, dim 64, 4 heads,
/// mlp_hidden 128, patch 8, 128 px images.
VitConfig fixture_config();

}  // namespace sinder
