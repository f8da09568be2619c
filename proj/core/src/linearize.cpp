// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#include "sinder/linearize.hpp"

#include <nlohmann/json.hpp>

#include "sinder/block.hpp"
#include "sinder/error.hpp"
#include "sinder/parallel.hpp"

namespace sinder {
namespace {

Matrix centering(Eigen::Index d) {
  return Matrix::Identity(d, d) - Matrix::Constant(d, d, 1.0 / static_cast<double>(d));
}

}  // namespace

AffineMap linearize_attention(const LayerParams& layer) {
  const Eigen::Index d = layer.ln1_w.size();
  const Matrix value_w = layer.qkv_w.bottomRows(d);
  const Vector value_b = layer.qkv_b.tail(d);
  // A4 A3 A2 A1 A0 with A1, A4 diagonal.
  const Matrix a21 = value_w * layer.ln1_w.asDiagonal() * centering(d);
  AffineMap out;
  out.mat = layer.ls1.asDiagonal() * (layer.proj_w * a21);
  out.off = layer.ls1.asDiagonal() *
            (layer.proj_w * (value_w * layer.ln1_b + value_b) + layer.proj_b);
  return out;
}

MlpLinearization linearize_mlp(const LayerParams& layer, int n_samples, std::uint64_t seed) {
  return linearize_mlp(layer, n_samples, seed,
                       [&layer](const Matrix& z) { return block::swiglu_core(layer, z); });
}

MlpLinearization linearize_mlp(const LayerParams& layer, int n_samples, std::uint64_t seed,
                               const CoreFn& core) {
  const Eigen::Index d = layer.ln2_w.size();
  if (n_samples < d) {
    fail(ErrorKind::InvalidInput, "linearize_mlp: need at least D samples");
  }
  const Matrix c10 = layer.ln2_w.asDiagonal() * centering(d);
  const Matrix x = linalg::random_normal(d, n_samples, seed);
  const Matrix z = (c10 * x).colwise() + layer.ln2_b;
  const Matrix y = core(z);
  const auto fit = linalg::least_squares(z, y);

  MlpLinearization out;
  out.core = fit.C;
  out.residual = fit.relative_residual;
  out.rank_deficient = fit.rank_deficient;
  out.map.mat = layer.ls2.asDiagonal() * (layer.mlp_w3 * (fit.C * c10));
  out.map.off = layer.ls2.asDiagonal() * (layer.mlp_w3 * (fit.C * layer.ln2_b) + layer.mlp_d3);
  return out;
}

AffineMap compose_layer(const AffineMap& attn, const AffineMap& mlp) {
  if (attn.mat.rows() != mlp.mat.rows() || attn.mat.cols() != mlp.mat.cols()) {
    fail(ErrorKind::InvalidInput, "compose_layer: dimension mismatch");
  }
  const Eigen::Index d = attn.mat.rows();
  const Matrix i_plus_c = Matrix::Identity(d, d) + mlp.mat;
  AffineMap out;
  out.mat = i_plus_c * (Matrix::Identity(d, d) + attn.mat);
  out.off = i_plus_c * attn.off + mlp.off;
  return out;
}

std::vector<Matrix> compose_prefix(const std::vector<AffineMap>& layers) {
  if (layers.empty()) fail(ErrorKind::InvalidInput, "compose_prefix: no layers");
  std::vector<Matrix> out;
  out.reserve(layers.size());
  out.push_back(layers.front().mat);
  for (std::size_t i = 1; i < layers.size(); ++i) {
    if (layers[i].mat.rows() != out.back().rows()) {
      fail(ErrorKind::InvalidInput, "compose_prefix: non-uniform dimension");
    }
    out.push_back(layers[i].mat * out.back());
  }
  return out;
}

std::uint64_t layer_seed(std::uint64_t seed, int layer) {
  // splitmix64 step keeps per-layer streams unrelated.
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(layer + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<AffineMap> linearize_layers(const VitModel& model, int n_samples,
                                        std::uint64_t seed,
                                        std::vector<MlpLinearization>* mlps) {
  const std::size_t depth = model.layers.size();
  std::vector<AffineMap> maps(depth);
  std::vector<MlpLinearization> fits(depth);
  parallel_for(depth, [&](std::size_t i) {
    const auto& layer = model.layers[i];
    fits[i] = linearize_mlp(layer, n_samples, layer_seed(seed, static_cast<int>(i)));
    maps[i] = compose_layer(linearize_attention(layer), fits[i].map);
  });
  if (mlps) *mlps = std::move(fits);
  return maps;
}

SingularDefectTable singular_defect_table(const VitModel& model, int n_samples,
                                          std::uint64_t seed) {
  std::vector<MlpLinearization> fits;
  const auto maps = linearize_layers(model, n_samples, seed, &fits);
  const auto prefixes = compose_prefix(maps);

  SingularDefectTable table;
  table.n_samples = n_samples;
  table.seed = seed;
  table.layers.resize(prefixes.size());
  parallel_for(prefixes.size(), [&](std::size_t i) {
    auto& entry = table.layers[i];
    entry.mlp_residual = fits[i].residual;
    entry.rank_deficient = fits[i].rank_deficient;
    try {
      const auto lead = linalg::leading_left_singular_vector(prefixes[i]);
      entry.nu = lead.u;
      entry.sigma1 = lead.sigma1;
      entry.gap = lead.sigma1 - lead.sigma2;
      entry.near_degenerate = lead.near_degenerate;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateMatrix) throw;
      entry.nu = Vector::Ones(prefixes[i].rows()).normalized();
      entry.degenerate = true;
      entry.near_degenerate = true;
    }
  });
  return table;
}

std::string table_to_json(const SingularDefectTable& table) {
  using json = nlohmann::ordered_json;
  json doc;
  doc["n_samples"] = table.n_samples;
  doc["seed"] = table.seed;
  json layers = json::array();
  for (std::size_t i = 0; i < table.layers.size(); ++i) {
    const auto& e = table.layers[i];
    json flags = json::array();
    if (e.near_degenerate) flags.push_back("NearDegenerate");
    if (e.degenerate) flags.push_back("DegenerateMatrix");
    if (e.rank_deficient) flags.push_back("RankDeficient");
    layers.push_back({{"layer", i},
                      {"sigma1", e.sigma1},
                      {"gap", e.gap},
                      {"nu", std::vector<double>(e.nu.data(), e.nu.data() + e.nu.size())},
                      {"mlp_residual", e.mlp_residual},
                      {"flags", std::move(flags)}});
  }
  doc["layers"] = std::move(layers);
  return doc.dump(2) + "\n";
}

SingularDefectTable table_from_json(const std::string& text) {
  SingularDefectTable table;
  try {
    const auto doc = nlohmann::json::parse(text);
    table.n_samples = doc.at("n_samples").get<int>();
    table.seed = doc.at("seed").get<std::uint64_t>();
    for (const auto& l : doc.at("layers")) {
      DefectDirection e;
      const auto nu = l.at("nu").get<std::vector<double>>();
      e.nu = Eigen::Map<const Vector>(nu.data(), static_cast<Eigen::Index>(nu.size()));
      e.sigma1 = l.at("sigma1").get<double>();
      e.gap = l.at("gap").get<double>();
      e.mlp_residual = l.at("mlp_residual").get<double>();
      for (const auto& f : l.at("flags")) {
        const auto s = f.get<std::string>();
        e.near_degenerate |= s == "NearDegenerate";
        e.degenerate |= s == "DegenerateMatrix";
        e.rank_deficient |= s == "RankDeficient";
      }
      table.layers.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::FormatError, std::string("defect table: ") + e.what());
  }
  return table;
}

}  // namespace sinder
