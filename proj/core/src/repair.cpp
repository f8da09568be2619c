// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#include "sinder/repair.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>

#include "sinder/checkpoint.hpp"
#include "sinder/error.hpp"

namespace sinder {
namespace {

constexpr std::array<LinearKind, kLinearCount> kKinds = {
    LinearKind::Q, LinearKind::K, LinearKind::V, LinearKind::Proj,
    LinearKind::W1, LinearKind::W2, LinearKind::W3};

}  // namespace

Matrix linear_weight(const LayerParams& l, LinearKind kind, int d) {
  switch (kind) {
    case LinearKind::Q: return qkv_block(l.qkv_w, 0, d);
    case LinearKind::K: return qkv_block(l.qkv_w, 1, d);
    case LinearKind::V: return qkv_block(l.qkv_w, 2, d);
    case LinearKind::Proj: return l.proj_w;
    case LinearKind::W1: return l.mlp_w1;
    case LinearKind::W2: return l.mlp_w2;
    case LinearKind::W3: return l.mlp_w3;
  }
  return {};
}

namespace {

Vector dense_bias(const LayerParams& l, LinearKind kind, int d) {
  switch (kind) {
    case LinearKind::Q: return l.qkv_b.segment(0, d);
    case LinearKind::K: return l.qkv_b.segment(d, d);
    case LinearKind::V: return l.qkv_b.segment(2 * d, d);
    case LinearKind::Proj: return l.proj_b;
    case LinearKind::W1: return l.mlp_h1;
    case LinearKind::W2: return l.mlp_h2;
    case LinearKind::W3: return l.mlp_d3;
  }
  return {};
}

void set_weight(LayerParams& l, LinearKind kind, int d, const Matrix& w) {
  switch (kind) {
    case LinearKind::Q: l.qkv_w.middleRows(0, d) = w; break;
    case LinearKind::K: l.qkv_w.middleRows(d, d) = w; break;
    case LinearKind::V: l.qkv_w.middleRows(2 * d, d) = w; break;
    case LinearKind::Proj: l.proj_w = w; break;
    case LinearKind::W1: l.mlp_w1 = w; break;
    case LinearKind::W2: l.mlp_w2 = w; break;
    case LinearKind::W3: l.mlp_w3 = w; break;
  }
}

bool is_qk(LinearKind kind) { return kind == LinearKind::Q || kind == LinearKind::K; }

TensorRecord record(const std::string& name, const Matrix& m) {
  TensorRecord r{name, {m.rows(), m.cols()}, {}};
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.data.push_back(static_cast<float>(m(i, j)));
  return r;
}

TensorRecord record(const std::string& name, const Vector& v) {
  TensorRecord r{name, {v.size()}, {}};
  for (Eigen::Index i = 0; i < v.size(); ++i) r.data.push_back(static_cast<float>(v[i]));
  return r;
}

Matrix matrix_of(const TensorRecord& r) {
  Matrix m(r.shape.at(0), r.shape.at(1));
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.data[k++];
  return m;
}

Vector vector_of(const TensorRecord& r) {
  Vector v(r.shape.at(0));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = r.data[static_cast<std::size_t>(i)];
  return v;
}

}  // namespace

const char* to_string(LinearKind kind) {
  switch (kind) {
    case LinearKind::Q: return "attn.q";
    case LinearKind::K: return "attn.k";
    case LinearKind::V: return "attn.v";
    case LinearKind::Proj: return "attn.proj";
    case LinearKind::W1: return "mlp.w1";
    case LinearKind::W2: return "mlp.w2";
    case LinearKind::W3: return "mlp.w3";
  }
  return "?";
}

SvdLinear SvdLinear::from_weight(const Matrix& w, const Vector& bias, bool trainable) {
  const auto d = linalg::svd(w);
  SvdLinear l;
  l.U = d.U;
  l.S = d.S;
  l.V = d.V;
  l.bias = bias;
  l.S_init = d.S;
  l.trainable = trainable;
  return l;
}

Matrix SvdLinear::weight() const { return U * S.asDiagonal() * V.transpose(); }

bool SvdLinear::changed() const {
  return S.size() != S_init.size() ||
         !std::equal(S.data(), S.data() + S.size(), S_init.data(),
                     [](double a, double b) { return std::bit_cast<std::uint64_t>(a) ==
                                                     std::bit_cast<std::uint64_t>(b); });
}

VitModel SvdModel::materialize(bool only_changed) const {
  VitModel out = base;
  const int d = base.config.dim;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (auto kind : kKinds) {
      const auto& lin = layers[i][kind];
      if (only_changed && !lin.changed()) continue;
      set_weight(out.layers[i], kind, d, lin.weight());
    }
  }
  return out;
}

std::int64_t SvdModel::trainable_parameter_count() const {
  std::int64_t n = 0;
  for (const auto& layer : layers)
    for (const auto& lin : layer.linears)
      if (lin.trainable) n += lin.rank();
  return n;
}

SvdModel svd_reparameterize(const VitModel& model, bool exclude_qk) {
  model.validate();
  SvdModel out;
  out.base = model;
  out.exclude_qk = exclude_qk;
  const int d = model.config.dim;
  out.layers.resize(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    for (auto kind : kKinds) {
      const auto& l = model.layers[i];
      out.layers[i][kind] = SvdLinear::from_weight(linear_weight(l, kind, d), dense_bias(l, kind, d),
                                                   !(exclude_qk && is_qk(kind)));
    }
  }
  return out;
}

void save_svd_checkpoint(const SvdModel& model, const std::filesystem::path& dir, bool factored,
                         const std::map<std::string, std::string>& metadata) {
  if (!factored) {
    save_checkpoint(model.materialize(true), dir, metadata);
    return;
  }
  const auto& cfg = model.base.config;
  std::map<std::string, TensorRecord> dense;
  for (auto& t : dense_tensors(model.base)) dense.emplace(t.name, std::move(t));

  CheckpointContents c;
  c.config = cfg;
  c.normalization = model.base.normalization;
  c.layout = "factored";
  c.metadata = metadata;
  for (const auto& [name, shape] : expected_tensor_table(cfg, "factored")) {
    if (auto it = dense.find(name); it != dense.end()) {
      c.tensors.push_back(it->second);
      continue;
    }
    // blocks.<i>.<base>.<U|S|V>
    const auto first = name.find('.');
    const auto second = name.find('.', first + 1);
    const int layer = std::stoi(name.substr(first + 1, second - first - 1));
    const std::string base = name.substr(second + 1, name.size() - second - 3);
    const char part = name.back();
    const SvdLinear* lin = nullptr;
    for (auto kind : kKinds)
      if (base == to_string(kind)) lin = &model.layers[static_cast<std::size_t>(layer)][kind];
    if (!lin) fail(ErrorKind::InvalidInput, "save_svd_checkpoint: unknown tensor " + name);
    if (part == 'U') c.tensors.push_back(record(name, lin->U));
    else if (part == 'S') c.tensors.push_back(record(name, lin->S));
    else c.tensors.push_back(record(name, lin->V));
  }
  write_checkpoint(dir, c);
}

SvdModel load_svd_checkpoint(const std::filesystem::path& dir, bool exclude_qk) {
  const auto contents = read_checkpoint(dir);
  VitModel base = model_from_contents(contents);
  if (contents.layout != "factored") return svd_reparameterize(base, exclude_qk);

  SvdModel out;
  out.base = std::move(base);
  out.exclude_qk = exclude_qk;
  const int d = out.base.config.dim;
  out.layers.resize(out.base.layers.size());
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    for (auto kind : kKinds) {
      const std::string name = "blocks." + std::to_string(i) + "." + to_string(kind);
      auto& lin = out.layers[i][kind];
      lin.U = matrix_of(contents.find(name + ".U"));
      lin.S = vector_of(contents.find(name + ".S"));
      lin.V = matrix_of(contents.find(name + ".V"));
      lin.S_init = lin.S;
      lin.bias = dense_bias(out.base.layers[i], kind, d);
      lin.trainable = !(exclude_qk && is_qk(kind));
    }
  }
  return out;
}

void RepairConfig::validate() const {
  auto bad = [](const std::string& why) { fail(ErrorKind::InvalidInput, "RepairConfig: " + why); };
  if (!(rho > 0 && rho < 1)) bad("rho must lie in (0, 1)");
  if (window_M < 1) bad("window_M must be positive");
  if (sigma_skip < 0) bad("sigma_skip must be non-negative");
  if (!(mu_mask > 0)) bad("mu_mask must be positive");
  if (lambda_layers < 1) bad("lambda_layers must be positive");
  if (!(tau > 0)) bad("tau must be positive");
  if (!(kernel_sigma > 0)) bad("kernel_sigma must be positive");
  if (!(lr > 0)) bad("lr must be positive");
  if (!(momentum >= 0 && momentum < 1)) bad("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0)) bad("weight_decay must be non-negative");
  if (max_iters < 1) bad("max_iters must be positive");
  if (n_samples < 1) bad("n_samples must be positive");
  if (refresh_nu < 0) bad("refresh_nu must be non-negative");
}

std::string config_to_json(const RepairConfig& c) {
  nlohmann::ordered_json doc = {
      {"rho", c.rho},           {"window_M", c.window_M},
      {"sigma_skip", c.sigma_skip}, {"mu_mask", c.mu_mask},
      {"lambda_layers", c.lambda_layers}, {"tau", c.tau},
      {"kernel_sigma", c.kernel_sigma}, {"lr", c.lr},
      {"momentum", c.momentum}, {"weight_decay", c.weight_decay},
      {"max_iters", c.max_iters}, {"exclude_qk", c.exclude_qk},
      {"n_samples", c.n_samples}, {"nu_seed", c.nu_seed},
      {"shuffle_seed", c.shuffle_seed}, {"refresh_nu", c.refresh_nu}};
  return doc.dump(2) + "\n";
}

RepairConfig config_from_json(const std::string& text, RepairConfig c) {
  try {
    const auto doc = nlohmann::json::parse(text);
    if (!doc.is_object()) fail(ErrorKind::InvalidInput, "repair config must be a JSON object");
    for (const auto& [key, value] : doc.items()) {
      if (key == "rho") c.rho = value.get<double>();
      else if (key == "window_M") c.window_M = value.get<int>();
      else if (key == "sigma_skip") c.sigma_skip = value.get<int>();
      else if (key == "mu_mask") c.mu_mask = value.get<double>();
      else if (key == "lambda_layers") c.lambda_layers = value.get<int>();
      else if (key == "tau") c.tau = value.get<double>();
      else if (key == "kernel_sigma") c.kernel_sigma = value.get<double>();
      else if (key == "lr") c.lr = value.get<double>();
      else if (key == "momentum") c.momentum = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else if (key == "max_iters") c.max_iters = value.get<int>();
      else if (key == "exclude_qk") c.exclude_qk = value.get<bool>();
      else if (key == "n_samples") c.n_samples = value.get<int>();
      else if (key == "nu_seed") c.nu_seed = value.get<std::uint64_t>();
      else if (key == "shuffle_seed") c.shuffle_seed = value.get<std::uint64_t>();
      else if (key == "refresh_nu") c.refresh_nu = value.get<int>();
      else fail(ErrorKind::InvalidInput, "repair config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::InvalidInput, std::string("repair config: ") + e.what());
  }
  c.validate();
  return c;
}

SmoothingTargets smoothing_target(const TokenGrid& tokens, const DefectMask& mask, double tau,
                                  double kernel_sigma) {
  if (tokens.h < 2 || tokens.w < 2) {
    fail(ErrorKind::InvalidInput, "smoothing_target: grid must be at least 2x2");
  }
  if (!(tau > 0)) fail(ErrorKind::InvalidInput, "smoothing_target: tau must be positive");
  if (static_cast<int>(mask.mask.size()) != tokens.count() ||
      mask.logits.size() != tokens.count()) {
    fail(ErrorKind::InvalidInput, "smoothing_target: mask does not match the grid");
  }
  const Matrix kernel = linalg::gaussian_kernel_3x3(kernel_sigma);
  SmoothingTargets out;
  out.indices = mask.indices();
  out.targets = Matrix::Zero(static_cast<Eigen::Index>(out.indices.size()), tokens.dim());

  for (std::size_t k = 0; k < out.indices.size(); ++k) {
    const int t = out.indices[k];
    const int r = t / tokens.w, c = t % tokens.w;
    std::vector<std::pair<int, double>> nb;  // (token, kernel weight)
    double lmin = std::numeric_limits<double>::infinity();
    bool any_clean = false;
    for (int dr = -1; dr <= 1; ++dr) {
      for (int dc = -1; dc <= 1; ++dc) {
        if (dr == 0 && dc == 0) continue;
        const int rr = r + dr, cc = c + dc;
        if (rr < 0 || rr >= tokens.h || cc < 0 || cc >= tokens.w) continue;
        const int n = rr * tokens.w + cc;
        nb.emplace_back(n, kernel(dr + 1, dc + 1));
        lmin = std::min(lmin, mask.logits[n]);
        any_clean = any_clean || !mask.mask[static_cast<std::size_t>(n)];
      }
    }
    out.all_neighbors_defective = out.all_neighbors_defective || !any_clean;
    // The softmax normalizer cancels in the renormalization after the
    // kernel product, so only the shifted exponentials are needed.
    double total = 0;
    for (auto& [n, w] : nb) {
      w *= std::exp(-(mask.logits[n] - lmin) / tau);
      total += w;
    }
    auto row = out.targets.row(static_cast<Eigen::Index>(k));
    for (const auto& [n, w] : nb) row += (w / total) * tokens.tokens.row(n);
  }
  return out;
}

double repair_loss(const TokenGrid& tokens, const SmoothingTargets& targets) {
  if (targets.indices.empty()) fail(ErrorKind::NoDefects, "repair_loss: empty mask");
  double total = 0;
  for (std::size_t k = 0; k < targets.indices.size(); ++k) {
    total += (tokens.tokens.row(targets.indices[k]) -
              targets.targets.row(static_cast<Eigen::Index>(k)))
                 .norm();
  }
  return total / static_cast<double>(targets.indices.size());
}

VitModel clamp_singular_values(const VitModel& model, double gamma) {
  if (!(gamma > 0)) fail(ErrorKind::InvalidInput, "clamp: gamma must be positive");
  model.validate();
  VitModel out = model;
  const int d = model.config.dim;
  for (auto& layer : out.layers) {
    for (auto kind : kKinds) {
      const Matrix w = linear_weight(layer, kind, d);
      const auto f = linalg::svd(w);
      if (f.S.size() == 0 || f.S.maxCoeff() <= gamma) continue;
      const Vector s = f.S.cwiseMin(gamma);
      set_weight(layer, kind, d, f.U * s.asDiagonal() * f.V.transpose());
    }
  }
  return out;
}

}  // namespace sinder
