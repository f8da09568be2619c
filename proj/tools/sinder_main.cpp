// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

// sinder: defect analysis and repair for small vision transformers.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sinder/checkpoint.hpp"
#include "sinder/defect.hpp"
#include "sinder/error.hpp"
#include "sinder/linearize.hpp"
#include "sinder/repair.hpp"
#include "sinder/report.hpp"
#include "sinder/synth.hpp"

namespace fs = std::filesystem;
using namespace sinder;

namespace {

enum Exit { kOk = 0, kInput = 2, kNumerical = 3, kIncomplete = 4 };

struct Options {
  std::string checkpoint, dataset, image, out, config;
  std::uint64_t seed = 0;
  int samples = kDefaultMlpSamples;
  double mu = 4.0;
  std::vector<int> layers;
  double gamma = 0;
  bool factored = false;

  // Repair overrides.
  std::optional<double> tau, rho, lr, momentum;
  std::optional<int> sigma_skip, lambda, window_m, max_iters, refresh_nu, repair_samples;
  std::optional<double> mu_override;

  // synth
  VitConfig synth_cfg = fixture_config();
  int defect_layer = 2;
  double inflation = 50;
  int images = 0;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::InvalidInput, "cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::InvalidInput, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require_checkpoint(const std::string& dir) {
  if (!fs::is_regular_file(fs::path(dir) / "manifest.json")) {
    fail(ErrorKind::InvalidInput, "no checkpoint at " + dir);
  }
}

void require_dataset(const std::string& dir) {
  if (!fs::is_directory(dir)) fail(ErrorKind::InvalidInput, "dataset " + dir + " is not a directory");
}

fs::path prepare_out(const Options& o) {
  const fs::path out(o.out);
  if (!o.checkpoint.empty() && fs::exists(out) &&
      fs::equivalent(out, fs::path(o.checkpoint))) {
    fail(ErrorKind::InvalidInput, "--out must differ from --checkpoint");
  }
  fs::create_directories(out);
  return out;
}

struct Dataset {
  std::vector<RgbImage> images;
  std::vector<std::string> ids;
};

Dataset load_dataset(const std::string& dir) {
  Dataset d;
  for (const auto& p : list_images(dir)) {
    d.images.push_back(read_ppm(p));
    d.ids.push_back(p.filename().string());
  }
  if (d.images.empty()) fail(ErrorKind::InvalidInput, "dataset " + dir + " has no .ppm images");
  return d;
}

std::vector<int> selected_layers(const Options& o, int depth) {
  std::vector<int> layers = o.layers;
  if (layers.empty())
    for (int i = 0; i < depth; ++i) layers.push_back(i);
  for (int l : layers)
    if (l < 0 || l >= depth) fail(ErrorKind::InvalidInput, "--layer " + std::to_string(l) + " out of range");
  return layers;
}

int cmd_analyze(const Options& o) {
  require_checkpoint(o.checkpoint);
  const auto model = load_checkpoint(o.checkpoint);
  const auto out = prepare_out(o);
  write_text(out / "analysis.json", table_to_json(singular_defect_table(model, o.samples, o.seed)));
  return kOk;
}

int cmd_detect(const Options& o) {
  require_checkpoint(o.checkpoint);
  const auto model = load_checkpoint(o.checkpoint);
  const auto image = read_ppm(o.image);
  const auto out = prepare_out(o);
  const auto table = singular_defect_table(model, o.samples, o.seed);
  const auto grids = forward(model, image);
  const auto masks = detect_all_layers(grids, table, o.mu);
  const auto rows = defect_rows(grids, masks, table);
  write_text(out / "detect.csv", defect_rows_csv(rows));
  write_text(out / "detect.json", defect_rows_json(rows));
  return kOk;
}

int cmd_render(const Options& o) {
  require_checkpoint(o.checkpoint);
  const auto model = load_checkpoint(o.checkpoint);
  const auto image = read_ppm(o.image);
  const auto out = prepare_out(o);
  const auto table = singular_defect_table(model, o.samples, o.seed);
  const auto grids = forward(model, image);
  const std::vector<TokenGrid> layer_grids(grids.begin() + 1, grids.end());
  const auto report = norm_map_and_violin(layer_grids, &table);
  for (int l : selected_layers(o, model.config.depth)) {
    const auto& g = layer_grids[static_cast<std::size_t>(l)];
    const std::string tag = std::to_string(l);
    write_ppm(out / ("pca_" + tag + ".ppm"), pca_rgb(g));
    write_ppm(out / ("norm_" + tag + ".ppm"), to_rgb(report.maps[static_cast<std::size_t>(l)]));
    write_ppm(out / ("angle_" + tag + ".ppm"), to_rgb(angle_heatmap(g, table.nu(l))));
  }
  write_text(out / "violin.csv", report.csv);
  return kOk;
}

RepairConfig repair_config(const Options& o) {
  RepairConfig c;
  if (!o.config.empty()) c = config_from_json(read_text(o.config));
  c.nu_seed = c.shuffle_seed = o.seed;
  if (o.tau) c.tau = *o.tau;
  if (o.rho) c.rho = *o.rho;
  if (o.lr) c.lr = *o.lr;
  if (o.momentum) c.momentum = *o.momentum;
  if (o.sigma_skip) c.sigma_skip = *o.sigma_skip;
  if (o.lambda) c.lambda_layers = *o.lambda;
  if (o.window_m) c.window_M = *o.window_m;
  if (o.max_iters) c.max_iters = *o.max_iters;
  if (o.refresh_nu) c.refresh_nu = *o.refresh_nu;
  if (o.mu_override) c.mu_mask = *o.mu_override;
  if (o.repair_samples) c.n_samples = *o.repair_samples;
  c.validate();
  return c;
}

int cmd_repair(const Options& o) {
  require_checkpoint(o.checkpoint);
  require_dataset(o.dataset);
  const auto cfg = repair_config(o);
  const auto input = read_checkpoint(o.checkpoint);
  const auto data = load_dataset(o.dataset);
  const auto out = prepare_out(o);

  SvdModel model = load_svd_checkpoint(o.checkpoint, cfg.exclude_qk);
  const auto result = sinder_train(model, data.images, cfg, data.ids);
  auto metadata = input.metadata;
  metadata["repair.status"] = result.converged ? "converged" : "incomplete";
  metadata["repair.iterations"] = std::to_string(result.iterations);
  save_svd_checkpoint(model, out, o.factored || input.layout == "factored", metadata);
  write_text(out / "repair_log.jsonl", result.log_jsonl());
  write_text(out / "repair_config.json", config_to_json(cfg));
  if (!result.converged) {
    std::cerr << "sinder: repair incomplete after " << result.iterations << " iterations\n";
    return kIncomplete;
  }
  return kOk;
}

int cmd_clamp(const Options& o) {
  require_checkpoint(o.checkpoint);
  const auto input = read_checkpoint(o.checkpoint);
  const auto model = model_from_contents(input);
  const auto out = prepare_out(o);
  auto metadata = input.metadata;
  std::ostringstream g;
  g << o.gamma;
  metadata["clamp.gamma"] = g.str();
  save_checkpoint(clamp_singular_values(model, o.gamma), out, metadata);
  return kOk;
}

int cmd_synth(const Options& o) {
  const auto out = prepare_out(o);
  const auto model = synth_defective_model(o.synth_cfg, o.defect_layer, o.inflation, o.seed);
  std::ostringstream infl;
  infl << o.inflation;
  save_checkpoint(model, out,
                  {{"synth.defect_layer", std::to_string(o.defect_layer)},
                   {"synth.inflation", infl.str()},
                   {"synth.seed", std::to_string(o.seed)}});
  if (o.images > 0) {
    fs::create_directories(out / "images");
    for (int i = 0; i < o.images; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "img_%04d.ppm", i);
      write_ppm(out / "images" / name,
                synth_image(o.synth_cfg.img_size, o.seed * 1000003ULL + static_cast<std::uint64_t>(i)));
    }
  }
  return kOk;
}

int cmd_stats(const Options& o) {
  require_checkpoint(o.checkpoint);
  require_dataset(o.dataset);
  const auto model = load_checkpoint(o.checkpoint);
  const auto data = load_dataset(o.dataset);
  const auto out = prepare_out(o);
  const auto table = singular_defect_table(model, o.samples, o.seed);
  const int layer = o.layers.empty() ? model.config.depth - 1 : o.layers.front();
  selected_layers(o, model.config.depth);
  std::vector<TokenGrid> grids;
  std::vector<DefectMask> masks;
  for (const auto& img : data.images) {
    auto g = forward(model, img)[static_cast<std::size_t>(layer) + 1];
    masks.push_back(detect_defects(defect_logits(g, table.nu(layer)), o.mu, layer));
    grids.push_back(std::move(g));
  }
  write_text(out / "stats.json", stats_to_json(defect_stats(grids, masks)));
  return kOk;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NumericalFailure:
    case ErrorKind::DegenerateMatrix: return kNumerical;
    default: return kInput;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Singular defect analysis and repair for small vision transformers"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub, bool needs_checkpoint) {
    auto* ck = sub->add_option("--checkpoint", o.checkpoint, "Checkpoint directory");
    if (needs_checkpoint) ck->required();
    sub->add_option("--out", o.out, "Output directory")->required();
    sub->add_option("--seed", o.seed, "Seed for all randomness");
  };
  auto analysis = [&](CLI::App* sub) {
    sub->add_option("--samples", o.samples, "MLP fit sample count")->check(CLI::PositiveNumber);
  };

  auto* analyze = app.add_subcommand("analyze", "Per-layer singular defect directions");
  common(analyze, true);
  analysis(analyze);

  auto* detect = app.add_subcommand("detect", "Per-layer defect masks for one image");
  common(detect, true);
  analysis(detect);
  detect->add_option("--image", o.image, "PPM image")->required()->check(CLI::ExistingFile);
  detect->add_option("--mu", o.mu, "Mask threshold in standard deviations");

  auto* render = app.add_subcommand("render", "PCA, norm and angle maps for one image");
  common(render, true);
  analysis(render);
  render->add_option("--image", o.image, "PPM image")->required()->check(CLI::ExistingFile);
  render->add_option("--layer", o.layers, "Layers to render (default: all)");

  auto* repair = app.add_subcommand("repair", "Repair defects by tuning singular values");
  common(repair, true);
  repair->add_option("--dataset", o.dataset, "Directory of PPM images")->required();
  repair->add_option("--config", o.config, "Repair config JSON")->check(CLI::ExistingFile);
  repair->add_option("--samples", o.repair_samples, "MLP fit sample count")->check(CLI::PositiveNumber);
  repair->add_option("--tau", o.tau, "Neighbour softmax temperature");
  repair->add_option("--mu", o.mu_override, "Mask threshold in standard deviations");
  repair->add_option("--sigma-skip", o.sigma_skip, "Defect count that triggers a layer");
  repair->add_option("--lambda", o.lambda, "Trainable window length in layers");
  repair->add_option("--rho", o.rho, "Termination threshold on non-clear images");
  repair->add_option("--window-m", o.window_m, "Images in the termination window");
  repair->add_option("--lr", o.lr, "Learning rate");
  repair->add_option("--momentum", o.momentum, "SGD momentum");
  repair->add_option("--max-iters", o.max_iters, "Iteration cap");
  repair->add_option("--refresh-nu", o.refresh_nu, "Recompute directions every N iterations");
  repair->add_flag("--factored", o.factored, "Write the factored checkpoint layout");

  auto* clamp = app.add_subcommand("clamp", "Cap singular values of every linear");
  common(clamp, true);
  clamp->add_option("--gamma", o.gamma, "Singular value cap")->required()->check(CLI::PositiveNumber);

  auto* synth = app.add_subcommand("synth", "Write a synthetic defective checkpoint");
  common(synth, false);
  synth->add_option("--depth", o.synth_cfg.depth);
  synth->add_option("--dim", o.synth_cfg.dim);
  synth->add_option("--heads", o.synth_cfg.heads);
  synth->add_option("--mlp-hidden", o.synth_cfg.mlp_hidden);
  synth->add_option("--patch", o.synth_cfg.patch);
  synth->add_option("--img-size", o.synth_cfg.img_size);
  synth->add_option("--layer", o.defect_layer, "Layer whose projection is inflated");
  synth->add_option("--inflation", o.inflation, "Leading singular value multiplier");
  synth->add_option("--images", o.images, "Also write this many test images")->check(CLI::NonNegativeNumber);

  auto* stats = app.add_subcommand("stats", "Defect statistics over a corpus");
  common(stats, true);
  analysis(stats);
  stats->add_option("--dataset", o.dataset, "Directory of PPM images")->required();
  stats->add_option("--layer", o.layers, "Layer to measure (default: last)")->expected(1);
  stats->add_option("--mu", o.mu, "Mask threshold in standard deviations");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInput;
  }

  try {
    if (*analyze) return cmd_analyze(o);
    if (*detect) return cmd_detect(o);
    if (*render) return cmd_render(o);
    if (*repair) return cmd_repair(o);
    if (*clamp) return cmd_clamp(o);
    if (*synth) return cmd_synth(o);
    if (*stats) return cmd_stats(o);
  } catch (const Error& e) {
    std::cerr << "sinder: " << to_string(e.kind()) << ": " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "sinder: " << e.what() << '\n';
    return kInput;
  }
  return kInput;
}
