// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

// Defect repair by fine-tuning singular values.
//
// Every linear weight is held as U diag(S) V^T with U and V frozen. A
// training step runs the exact forward, finds the first layer with enough
// defective tokens, pulls those tokens toward a smoothed combination of
// their neighbours and updates S in a window of layers ending there.

#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sinder/defect.hpp"
#include "sinder/linearize.hpp"
#include "sinder/model.hpp"

namespace sinder {

/// The reparameterized linears of a layer, in checkpoint order.
enum class LinearKind { Q = 0, K, V, Proj, W1, W2, W3 };
inline constexpr int kLinearCount = 7;
const char* to_string(LinearKind kind);

/// Dense weight of one linear of a layer (q, k, v are row blocks of qkv).
Matrix linear_weight(const LayerParams& layer, LinearKind kind, int dim);

struct SvdLinear {
  Matrix U;  // out x r
  Vector S;  // r
  Matrix V;  // in x r
  Vector bias;
  Vector S_init;
  bool trainable = true;

  static SvdLinear from_weight(const Matrix& w, const Vector& bias, bool trainable);
  Matrix weight() const;
  int rank() const { return static_cast<int>(S.size()); }
  /// True when S differs bitwise from its value at construction.
  bool changed() const;
};

struct SvdLayer {
  std::array<SvdLinear, kLinearCount> linears;

  SvdLinear& operator[](LinearKind k) { return linears[static_cast<std::size_t>(k)]; }
  const SvdLinear& operator[](LinearKind k) const { return linears[static_cast<std::size_t>(k)]; }
};

struct SvdModel {
  VitModel base;  // non-linear parameters, and the original dense linears
  std::vector<SvdLayer> layers;
  bool exclude_qk = true;

  /// Dense model with every linear recomposed from U diag(S) V^T. With
  /// `only_changed` set, linears whose S never moved keep their original
  /// dense weights bit for bit.
  VitModel materialize(bool only_changed = false) const;
  std::int64_t trainable_parameter_count() const;
};

/// Replaces each linear (q, k, v, proj, w1, w2, w3) with its thin SVD. With
/// exclude_qk the query and key factors are frozen as well.
SvdModel svd_reparameterize(const VitModel& model, bool exclude_qk = true);

/// Factored layout stores U, S, V per linear; dense stores recomposed
/// weights (untouched linears verbatim).
void save_svd_checkpoint(const SvdModel& model, const std::filesystem::path& dir, bool factored,
                         const std::map<std::string, std::string>& metadata = {});
/// Factored checkpoints load their factors directly; dense ones are
/// decomposed.
SvdModel load_svd_checkpoint(const std::filesystem::path& dir, bool exclude_qk = true);

struct RepairConfig {
  double rho = 0.25;
  int window_M = 500;
  int sigma_skip = 3;
  double mu_mask = 4.0;
  int lambda_layers = 10;
  double tau = 0.1;
  double kernel_sigma = 1.0;
  double lr = 0.005;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int max_iters = 20000;
  bool exclude_qk = true;
  int n_samples = kDefaultMlpSamples;
  std::uint64_t nu_seed = 0;
  std::uint64_t shuffle_seed = 0;
  /// Recompute the defect table every this many iterations; 0 disables.
  int refresh_nu = 0;

  void validate() const;
};

std::string config_to_json(const RepairConfig& cfg);
/// Overlays the keys present in `text` onto `base`; unknown keys are rejected.
RepairConfig config_from_json(const std::string& text, RepairConfig base = {});

/// Masked tokens and their neighbourhood targets (rows aligned with indices).
struct SmoothingTargets {
  std::vector<int> indices;
  Matrix targets;
  /// Some masked token had only masked neighbours.
  bool all_neighbors_defective = false;
};

/// For each masked token t: weights softmax(-l/tau) over the in-grid 3x3
/// neighbours (t excluded), times the Gaussian kernel entry of the offset,
/// renormalized; the target is the weighted sum of neighbour tokens.
SmoothingTargets smoothing_target(const TokenGrid& tokens, const DefectMask& mask, double tau,
                                  double kernel_sigma);

/// Mean (unsquared) L2 distance between masked tokens and their targets.
double repair_loss(const TokenGrid& tokens, const SmoothingTargets& targets);

struct LossSpec {
  int layer = 0;
  SmoothingTargets targets;
};

/// dL/dS for the linears of layers lo..spec.layer; other layers hold empty
/// vectors. Frozen linears get exact zeros.
struct SvdGradient {
  int lo = 0;
  int hi = -1;
  double loss = 0;
  std::vector<std::array<Vector, kLinearCount>> dS;

  bool in_window(int layer) const { return layer >= lo && layer <= hi; }
};

/// Loss of `spec` under the exact forward of `model` (targets held fixed).
double evaluate_loss(const SvdModel& model, const ImageTensor& image, const LossSpec& spec);

/// Reverse mode through layers spec.layer down to lo of the exact forward.
SvdGradient backward_to_singular_values(const SvdModel& model, const ImageTensor& image,
                                        const LossSpec& spec, int lo);

struct LogRecord {
  int iter = 0;
  std::string image_id;
  int hit_layer = -1;  // -1: clear
  double loss = 0;
  int defect_count = 0;
  double clear_fraction = 0;

  std::string to_json() const;
};

struct TrainState {
  int iteration = 0;
  std::deque<bool> clarity;  // last window_M outcomes, true = clear
  std::map<std::pair<int, int>, Vector> momentum;  // (layer, linear kind)
  std::mt19937_64 rng;
  std::vector<LogRecord> log;

  double clear_fraction() const;
  int non_clear() const;
};

struct StepOutcome {
  int hit_layer = -1;
  double loss = 0;
  int defect_count = 0;
  bool all_neighbors_defective = false;

  bool clear() const { return hit_layer < 0; }
};

/// Window of trainable layers for a loss at `layer`.
int window_start(int layer, int lambda_layers);

/// One iteration of the repair loop on one image. A clear image leaves the
/// model untouched.
StepOutcome sinder_step(SvdModel& model, const ImageTensor& image,
                        const SingularDefectTable& table, const RepairConfig& cfg,
                        TrainState& state);

struct TrainResult {
  SingularDefectTable table;
  std::vector<LogRecord> log;
  int iterations = 0;
  bool converged = false;

  /// JSON lines: one record per iteration, then a status line.
  std::string log_jsonl() const;
};

/// Repairs until at most rho * window_M of the last window_M images were
/// non-clear, or max_iters is hit (converged = false).
TrainResult sinder_train(SvdModel& model, std::span<const RgbImage> dataset,
                         const RepairConfig& cfg, std::span<const std::string> ids = {});

/// Caps every singular value of every linear at gamma. Linears already
/// below gamma are left untouched.
VitModel clamp_singular_values(const VitModel& model, double gamma);

}  // namespace sinder
