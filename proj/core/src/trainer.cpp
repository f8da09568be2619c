// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <nlohmann/json.hpp>
#include <numeric>

#include "sinder/error.hpp"
#include "sinder/repair.hpp"

namespace sinder {

std::string LogRecord::to_json() const {
  nlohmann::ordered_json j;
  j["iter"] = iter;
  j["image_id"] = image_id;
  if (hit_layer < 0) j["hit_layer"] = "clear";
  else j["hit_layer"] = hit_layer;
  j["loss"] = loss;
  j["defect_count"] = defect_count;
  j["clear_fraction"] = clear_fraction;
  return j.dump();
}

double TrainState::clear_fraction() const {
  if (clarity.empty()) return 0.0;
  return static_cast<double>(clarity.size() - static_cast<std::size_t>(non_clear())) /
         static_cast<double>(clarity.size());
}

int TrainState::non_clear() const {
  return static_cast<int>(std::count(clarity.begin(), clarity.end(), false));
}

int window_start(int layer, int lambda_layers) { return std::max(0, layer - lambda_layers + 1); }

StepOutcome sinder_step(SvdModel& model, const ImageTensor& image,
                        const SingularDefectTable& table, const RepairConfig& cfg,
                        TrainState& state) {
  if (table.size() != model.layers.size()) {
    fail(ErrorKind::InvalidInput, "sinder_step: defect table depth does not match the model");
  }
  const auto grids = forward(model.materialize(), image);
  StepOutcome outcome;
  DefectMask hit;
  for (std::size_t i = 0; i < table.size(); ++i) {
    auto mask = detect_defects(defect_logits(grids[i + 1], table.nu(static_cast<int>(i))),
                               cfg.mu_mask, static_cast<int>(i));
    if (mask.count >= std::max(cfg.sigma_skip, 1)) {
      hit = std::move(mask);
      break;
    }
  }

  ++state.iteration;
  state.clarity.push_back(hit.layer < 0);
  while (static_cast<int>(state.clarity.size()) > cfg.window_M) state.clarity.pop_front();
  if (hit.layer < 0) return outcome;

  outcome.hit_layer = hit.layer;
  outcome.defect_count = hit.count;
  LossSpec spec{hit.layer, smoothing_target(grids[static_cast<std::size_t>(hit.layer) + 1], hit,
                                            cfg.tau, cfg.kernel_sigma)};
  outcome.all_neighbors_defective = spec.targets.all_neighbors_defective;
  const int lo = window_start(hit.layer, cfg.lambda_layers);
  const auto grad = backward_to_singular_values(model, image, spec, lo);
  outcome.loss = grad.loss;

  for (int i = lo; i <= hit.layer; ++i) {
    for (int k = 0; k < kLinearCount; ++k) {
      auto& lin = model.layers[static_cast<std::size_t>(i)].linears[static_cast<std::size_t>(k)];
      if (!lin.trainable) continue;
      Vector g = grad.dS[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
      if (cfg.weight_decay != 0) g += cfg.weight_decay * lin.S;
      auto [it, fresh] = state.momentum.try_emplace({i, k}, g);
      if (!fresh) it->second = cfg.momentum * it->second + g;
      lin.S -= cfg.lr * it->second;
    }
  }
  return outcome;
}

std::string TrainResult::log_jsonl() const {
  std::string out;
  for (const auto& r : log) out += r.to_json() + "\n";
  nlohmann::ordered_json status;
  status["status"] = converged ? "converged" : "incomplete";
  status["iterations"] = iterations;
  out += status.dump() + "\n";
  return out;
}

TrainResult sinder_train(SvdModel& model, std::span<const RgbImage> dataset,
                         const RepairConfig& cfg, std::span<const std::string> ids) {
  cfg.validate();
  if (dataset.empty()) fail(ErrorKind::InvalidInput, "sinder_train: empty dataset");
  if (!ids.empty() && ids.size() != dataset.size()) {
    fail(ErrorKind::InvalidInput, "sinder_train: one id per image required");
  }

  TrainResult result;
  result.table = singular_defect_table(model.materialize(), cfg.n_samples, cfg.nu_seed);
  TrainState state;
  state.rng.seed(cfg.shuffle_seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t pos = order.size();

  while (state.iteration < cfg.max_iters) {
    if (pos == order.size()) {
      std::shuffle(order.begin(), order.end(), state.rng);
      pos = 0;
    }
    const std::size_t idx = order[pos++];
    if (cfg.refresh_nu > 0 && state.iteration > 0 && state.iteration % cfg.refresh_nu == 0) {
      result.table = singular_defect_table(model.materialize(), cfg.n_samples, cfg.nu_seed);
    }
    const auto outcome = sinder_step(model, to_tensor(dataset[idx], model.base.normalization),
                                     result.table, cfg, state);
    LogRecord rec;
    rec.iter = state.iteration;
    rec.image_id = ids.empty() ? std::to_string(idx) : ids[idx];
    rec.hit_layer = outcome.hit_layer;
    rec.loss = outcome.loss;
    rec.defect_count = outcome.defect_count;
    rec.clear_fraction = state.clear_fraction();
    state.log.push_back(std::move(rec));

    if (static_cast<int>(state.clarity.size()) == cfg.window_M &&
        state.non_clear() <= cfg.rho * cfg.window_M) {
      result.converged = true;
      break;
    }
  }
  result.iterations = state.iteration;
  result.log = std::move(state.log);
  return result;
}

}  // namespace sinder
