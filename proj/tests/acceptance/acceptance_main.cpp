// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Tolerances and budgets are fixed below.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "sinder/block.hpp"
#include "sinder/checkpoint.hpp"
#include "sinder/defect.hpp"
#include "sinder/linalg.hpp"
#include "sinder/linearize.hpp"
#include "sinder/repair.hpp"
#include "sinder/synth.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace sinder;

namespace {

// Tolerances.
constexpr double kSvdAngleRad = 1e-6;
constexpr double kSvdReconstruction = 1e-8;
constexpr double kLinearizeMaxAbs = 1e-9;
constexpr double kComposeMaxAbs = 1e-12;
constexpr double kDefectAngleDeg = 20.0;
constexpr double kRandomControlDeg = 45.0;
constexpr double kGradRelError = 1e-4;
constexpr double kFdStep = 1e-4;
constexpr double kNonClearFraction = 0.25;
constexpr double kRatioDrop = 2.0;
constexpr int kClampInversions = 1;

// Runtime budgets, seconds.
constexpr double kSvdBudget = 10;
constexpr double kLinearizeBudget = 5;
constexpr double kDefectBudget = 60;
constexpr double kGradBudget = 60;
constexpr double kRepairBudget = 600;

constexpr double kRadToDeg = 180.0 / std::numbers::pi;

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const std::string& name, const std::function<Verdict()>& body, double budget = 0) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream line;
  if (budget > 0 && secs >= budget) {
    v.pass = false;
    v.detail += "; over the " + std::to_string(static_cast<int>(budget)) + " s budget";
  }
  line.setf(std::ios::fixed);
  line.precision(2);
  line << (v.pass ? "PASS " : "FAIL ") << name << ": " << v.detail << " [" << secs << " s]";
  std::cout << line.str() << std::endl;
  if (!v.pass) ++failures;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

Verdict svd_oracle() {
  const std::pair<int, int> shapes[] = {{8, 8}, {32, 16}, {16, 48}, {64, 64}};
  double worst_angle = 0, worst_rec = 0;
  std::uint64_t seed = 1;
  for (auto [r, c] : shapes) {
    for (int i = 0; i < 25; ++i, ++seed) {
      const Matrix m = linalg::random_normal(r, c, seed);
      const auto full = linalg::svd(m);
      const auto lead = linalg::leading_left_singular_vector(m);
      worst_angle = std::max(worst_angle, linalg::acute_angle(lead.u, full.U.col(0)) / kRadToDeg);
      worst_rec = std::max(worst_rec,
                           (full.U * full.S.asDiagonal() * full.V.transpose() - m).norm() / m.norm());
    }
  }
  return {worst_angle <= kSvdAngleRad && worst_rec <= kSvdReconstruction,
          "100 matrices, max angle " + fmt(worst_angle) + " rad, max reconstruction " + fmt(worst_rec)};
}

Verdict linearization_exactness() {
  VitConfig cfg;
  cfg.depth = 1;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.mlp_hidden = 24;
  cfg.patch = 4;
  cfg.img_size = 16;
  const VitModel m = testing::random_model(cfg, 2);
  const auto map = linearize_attention(m.layers[0]);
  double worst = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Vector x = 2.0 * linalg::random_normal(cfg.dim, 1, 500 + s).col(0);
    const Matrix got = block::attention_branch(m.layers[0], m.config, x.transpose(), false);
    worst = std::max(worst, (got.row(0).transpose() - map.apply(x)).cwiseAbs().maxCoeff());
  }
  return {worst <= kLinearizeMaxAbs, "100 tokens, max abs " + fmt(worst)};
}

Verdict composition() {
  double worst = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const AffineMap a{linalg::random_normal(8, 8, 10 * s + 1), linalg::random_normal(8, 1, 10 * s + 2).col(0)};
    const AffineMap c{linalg::random_normal(8, 8, 10 * s + 3), linalg::random_normal(8, 1, 10 * s + 4).col(0)};
    const auto e = compose_layer(a, c);
    // Entrywise expansion of (I + C)(I + A) and (I + C) b + d.
    double err = 0;
    for (int i = 0; i < 8; ++i) {
      for (int j = 0; j < 8; ++j) {
        double v = (i == j ? 1.0 : 0.0) + a.mat(i, j) + c.mat(i, j);
        for (int k = 0; k < 8; ++k) v += c.mat(i, k) * a.mat(k, j);
        err = std::max(err, std::abs(e.mat(i, j) - v));
      }
      double o = a.off[i] + c.off[i];
      for (int k = 0; k < 8; ++k) o += c.mat(i, k) * a.off[k];
      err = std::max(err, std::abs(e.off[i] - o));
    }
    worst = std::max(worst, err);
  }
  return {worst <= kComposeMaxAbs, "20 random 8x8 maps, max abs " + fmt(worst)};
}

Verdict defect_prediction() {
  const VitModel& m = testing::fixture_model(50.0);
  const auto table = singular_defect_table(m);
  std::vector<std::vector<TokenGrid>> grids;
  for (const auto& img : testing::seeded_images(20, testing::kProbeImageSeed)) grids.push_back(forward(m, img));
  bool ok = true;
  std::string detail;
  for (int layer : {4, 5}) {
    std::vector<TokenGrid> g;
    std::vector<DefectMask> k;
    for (const auto& per : grids) {
      g.push_back(per[static_cast<std::size_t>(layer) + 1]);
      k.push_back(detect_defects(defect_logits(g.back(), table.nu(layer)), 4.0, layer));
    }
    const Vector empirical = empirical_defect_direction(g, k);
    const double angle = linalg::acute_angle(table.nu(layer), empirical);
    double control = 90;
    for (std::uint64_t s = 0; s < 10; ++s) {
      control = std::min(control, linalg::acute_angle(linalg::random_normal(m.config.dim, 1, 900 + s).col(0),
                                                      empirical));
    }
    ok = ok && angle < kDefectAngleDeg && control > kRandomControlDeg;
    if (!detail.empty()) detail += "; ";
    detail += "layer " + std::to_string(layer) + ": nu " + fmt(angle) + " deg, random min " +
              fmt(control) + " deg";
  }
  return {ok, detail};
}

Verdict gradient_check() {
  const VitModel& m = testing::fixture_model(50.0);
  const SvdModel s = svd_reparameterize(m, true);
  const auto table = singular_defect_table(m);
  const ImageTensor img = to_tensor(testing::seeded_images(1, testing::kProbeImageSeed)[0], m.normalization);
  const auto grids = forward(m, img);
  const auto masks = detect_all_layers(grids, table, 4.0);
  int hit = -1;
  for (const auto& k : masks) {
    if (k.count >= 3) {
      hit = k.layer;
      break;
    }
  }
  if (hit < 0) return {false, "fixture image is clear"};
  const LossSpec spec{hit, smoothing_target(grids[static_cast<std::size_t>(hit) + 1],
                                            masks[static_cast<std::size_t>(hit)], 0.1, 1.0)};
  const int lo = window_start(hit, 4);
  const auto grad = backward_to_singular_values(s, img, spec, lo);

  std::mt19937_64 rng(2024);
  double worst = 0;
  for (int n = 0; n < 20;) {
    const int layer = lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hit - lo + 1));
    const int kind = static_cast<int>(rng() % kLinearCount);
    const auto& lin = s.layers[static_cast<std::size_t>(layer)].linears[static_cast<std::size_t>(kind)];
    if (!lin.trainable) continue;
    const int idx = static_cast<int>(rng() % static_cast<std::uint64_t>(lin.rank()));
    SvdModel plus = s, minus = s;
    plus.layers[static_cast<std::size_t>(layer)].linears[static_cast<std::size_t>(kind)].S[idx] += kFdStep;
    minus.layers[static_cast<std::size_t>(layer)].linears[static_cast<std::size_t>(kind)].S[idx] -= kFdStep;
    const double numeric = (evaluate_loss(plus, img, spec) - evaluate_loss(minus, img, spec)) / (2 * kFdStep);
    const double analytic = grad.dS[static_cast<std::size_t>(layer)][static_cast<std::size_t>(kind)][idx];
    worst = std::max(worst, std::abs(analytic - numeric) /
                                std::max({std::abs(analytic), std::abs(numeric), 1e-8}));
    ++n;
  }
  return {worst <= kGradRelError, "20 entries in layers " + std::to_string(lo) + ".." +
                                      std::to_string(hit) + ", max relative error " + fmt(worst)};
}

struct RepairRun {
  TrainResult result;
  SvdModel model;
  double seconds = 0;
};

RepairConfig efficacy_config() {
  RepairConfig cfg;
  cfg.window_M = 100;
  cfg.lambda_layers = 4;
  return cfg;
}

RepairRun run_repair(const VitModel& start, std::span<const RgbImage> data) {
  RepairRun r;
  r.model = svd_reparameterize(start, true);
  const auto t0 = std::chrono::steady_clock::now();
  r.result = sinder_train(r.model, data, efficacy_config());
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

int non_clear(const VitModel& m, const SingularDefectTable& table, std::span<const RgbImage> data) {
  int n = 0;
  for (const auto& img : data) n += !is_clear(forward(m, img), table, 3, 4.0);
  return n;
}

Verdict repair_efficacy(const VitModel& start, std::span<const RgbImage> data, const RepairRun& run) {
  const VitModel after = run.model.materialize();
  const int before_n = non_clear(start, run.result.table, data);
  const int after_n = non_clear(after, run.result.table, data);
  const double r0 = testing::mean_norm_ratio(start, data);
  const double r1 = testing::mean_norm_ratio(after, data);
  const double frac = static_cast<double>(after_n) / static_cast<double>(data.size());
  return {run.result.converged && frac < kNonClearFraction && r0 / r1 >= kRatioDrop,
          std::to_string(run.result.iterations) + " iterations, non-clear " + std::to_string(before_n) +
              " -> " + std::to_string(after_n) + " of " + std::to_string(data.size()) +
              ", norm ratio " + fmt(r0) + " -> " + fmt(r1) + " (" + fmt(r0 / r1) + "x)"};
}

Verdict containment(const VitModel& start, const RepairRun& run) {
  const fs::path root = testing::temp_dir("acceptance_containment");
  save_svd_checkpoint(svd_reparameterize(start, true), root / "before", true);
  save_svd_checkpoint(run.model, root / "after", true);
  const auto a = testing::read_bytes(root / "before" / "weights.bin");
  const auto b = testing::read_bytes(root / "after" / "weights.bin");
  if (a.size() != b.size()) return {false, "weights.bin sizes differ"};
  const auto manifest = nlohmann::json::parse([&] {
    const auto bytes = testing::read_bytes(root / "after" / "manifest.json");
    return std::string(bytes.begin(), bytes.end());
  }());
  const auto& tensors = manifest.at("tensors");
  std::set<std::string> touched;
  std::size_t differing = 0, t = 0;
  for (std::size_t off = 0; off < a.size(); ++off) {
    if (a[off] == b[off]) continue;
    ++differing;
    while (t + 1 < tensors.size() && tensors[t + 1].at("byte_offset").get<std::size_t>() <= off) ++t;
    touched.insert(tensors[t].at("name").get<std::string>());
  }
  fs::remove_all(root);
  std::vector<std::string> bad;
  for (const auto& name : touched) {
    const bool is_s = name.size() > 2 && name.compare(name.size() - 2, 2, ".S") == 0;
    const bool frozen = name.find(".attn.q.") != std::string::npos || name.find(".attn.k.") != std::string::npos;
    if (!is_s || frozen) bad.push_back(name);
  }
  std::string detail = std::to_string(differing) + " differing bytes in " + std::to_string(touched.size()) +
                       " tensors";
  for (const auto& n : bad) detail += ", unexpected " + n;
  return {differing > 0 && bad.empty(), detail};
}

Verdict clamp_sweep() {
  const double sigma_bar =
      linalg::singular_values(testing::fixture_model(1.0).layers[testing::kDefectLayer].proj_w)[0];
  const VitModel& m = testing::fixture_model(50.0);
  const auto images = testing::seeded_images(20, testing::kProbeImageSeed);
  std::vector<double> ratios{testing::mean_norm_ratio(m, images)};
  for (double f : {2.0, 1.5, 1.3}) {
    ratios.push_back(testing::mean_norm_ratio(clamp_singular_values(m, f * sigma_bar), images));
  }
  int inversions = 0;
  for (std::size_t i = 1; i < ratios.size(); ++i) inversions += ratios[i] > ratios[i - 1];
  std::string detail = "sigma_bar " + fmt(sigma_bar) + ", ratios";
  for (double r : ratios) detail += " " + fmt(r);
  detail += ", inversions " + std::to_string(inversions);
  return {inversions <= kClampInversions && ratios.back() < ratios.front(), detail};
}

Verdict unit_suite() {
  std::string detail;
  bool ok = true;
  for (const char* exe : {SINDER_DEFECT_TEST, SINDER_REPAIR_TEST}) {
    const int status = std::system((std::string(exe) + " --gtest_brief=1 > /dev/null 2>&1").c_str());
    const bool pass = WIFEXITED(status) && WEXITSTATUS(status) == 0;
    ok = ok && pass;
    if (!detail.empty()) detail += ", ";
    detail += fs::path(exe).filename().string() + (pass ? " ok" : " failed");
  }
  return {ok, detail};
}

Verdict determinism(const VitModel& start, std::span<const RgbImage> data, const RepairRun& first) {
  const RepairRun second = run_repair(start, data);
  const fs::path root = testing::temp_dir("acceptance_determinism");
  save_svd_checkpoint(first.model, root / "a", false);
  save_svd_checkpoint(second.model, root / "b", false);
  const bool weights = testing::read_bytes(root / "a" / "weights.bin") ==
                       testing::read_bytes(root / "b" / "weights.bin");
  const bool manifest = testing::read_bytes(root / "a" / "manifest.json") ==
                        testing::read_bytes(root / "b" / "manifest.json");
  const bool log = first.result.log_jsonl() == second.result.log_jsonl();
  fs::remove_all(root);
  return {weights && manifest && log, std::string("weights ") + (weights ? "identical" : "differ") +
                                          ", manifest " + (manifest ? "identical" : "differ") +
                                          ", log " + (log ? "identical" : "differs")};
}

}  // namespace

int main() {
  report("svd-oracle", svd_oracle, kSvdBudget);
  report("linearization-exactness", linearization_exactness, kLinearizeBudget);
  report("layer-composition", composition);
  report("defect-prediction", defect_prediction, kDefectBudget);
  report("gradient-finite-differences", gradient_check, kGradBudget);

  const VitModel start = synth_defective_model(fixture_config(), testing::kDefectLayer, 30.0, testing::kFixtureSeed);
  const auto data = testing::seeded_images(200, testing::kTrainImageSeed);
  RepairRun first;
  report("repair-efficacy", [&] {
    first = run_repair(start, data);
    return repair_efficacy(start, data, first);
  }, kRepairBudget);
  report("parameter-containment", [&] { return containment(start, first); });
  report("clamp-sweep", clamp_sweep);
  report("defect-repair-unit-suite", unit_suite);
  report("determinism", [&] { return determinism(start, data, first); });

  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
