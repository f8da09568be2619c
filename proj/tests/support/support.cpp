// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#include "support.hpp"

#include <unistd.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <mutex>

#include "sinder/defect.hpp"
#include "sinder/synth.hpp"

namespace sinder::testing {

const VitModel& fixture_model(double inflation) {
  static std::mutex mu;
  static std::map<double, VitModel> cache;
  std::lock_guard lock(mu);
  auto it = cache.find(inflation);
  if (it == cache.end()) {
    it = cache.emplace(inflation, synth_defective_model(fixture_config(), kDefectLayer, inflation,
                                                        kFixtureSeed)).first;
  }
  return it->second;
}

std::vector<RgbImage> seeded_images(int n, std::uint64_t base_seed, int img_size) {
  std::vector<RgbImage> out;
  for (int i = 0; i < n; ++i) out.push_back(synth_image(img_size, base_seed + static_cast<std::uint64_t>(i)));
  return out;
}

double mean_norm_ratio(const VitModel& model, std::span<const RgbImage> images) {
  double total = 0;
  for (const auto& img : images) total += max_median_norm_ratio(forward(model, img).back());
  return total / static_cast<double>(images.size());
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("sinder_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

VitModel random_model(const VitConfig& cfg, std::uint64_t seed, double scale) {
  VitModel m = VitModel::zeros(cfg);
  std::uint64_t s = seed;
  auto mat = [&](Matrix& a) { a = linalg::random_normal(a.rows(), a.cols(), ++s) * scale; };
  auto vec = [&](Vector& v) { v = linalg::random_normal(v.size(), 1, ++s).col(0) * scale; };
  auto gain = [&](Vector& v) { v = Vector::Ones(v.size()) + linalg::random_normal(v.size(), 1, ++s).col(0) * 0.1; };
  mat(m.patch_embed_w);
  vec(m.patch_embed_b);
  mat(m.pos_embed);
  vec(m.cls_token);
  mat(m.registers);
  for (auto& l : m.layers) {
    gain(l.ln1_w);
    vec(l.ln1_b);
    mat(l.qkv_w);
    vec(l.qkv_b);
    mat(l.proj_w);
    vec(l.proj_b);
    gain(l.ls1);
    gain(l.ln2_w);
    vec(l.ln2_b);
    mat(l.mlp_w1);
    vec(l.mlp_h1);
    mat(l.mlp_w2);
    vec(l.mlp_h2);
    mat(l.mlp_w3);
    vec(l.mlp_d3);
    gain(l.ls2);
  }
  gain(m.final_ln_w);
  vec(m.final_ln_b);
  return m;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

namespace oracle {
namespace {

using Tok = std::vector<double>;

Tok layer_norm(const Tok& x, const Vector& w, const Vector& b, double eps) {
  const std::size_t d = x.size();
  double mean = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);
  Tok out(d);
  for (std::size_t i = 0; i < d; ++i) {
    out[i] = (x[i] - mean) / std::sqrt(var + eps) * w[static_cast<Eigen::Index>(i)] +
             b[static_cast<Eigen::Index>(i)];
  }
  return out;
}

Tok affine(const Matrix& w, const Vector& b, const Tok& x, Eigen::Index row0 = 0,
           Eigen::Index rows = -1) {
  if (rows < 0) rows = w.rows();
  Tok out(static_cast<std::size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    double acc = b[row0 + r];
    for (Eigen::Index c = 0; c < w.cols(); ++c) acc += w(row0 + r, c) * x[static_cast<std::size_t>(c)];
    out[static_cast<std::size_t>(r)] = acc;
  }
  return out;
}

}  // namespace

std::vector<std::vector<std::vector<double>>> forward(const VitModel& model,
                                                      const ImageTensor& image) {
  const auto& cfg = model.config;
  const int d = cfg.dim, p = cfg.patch, g = cfg.grid(), hd = cfg.head_dim();
  std::vector<Tok> x;
  Tok cls(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) cls[static_cast<std::size_t>(i)] = model.cls_token[i];
  x.push_back(cls);
  for (int r = 0; r < cfg.n_registers; ++r) {
    Tok reg(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) reg[static_cast<std::size_t>(i)] = model.registers(r, i);
    x.push_back(reg);
  }
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      Tok tok(static_cast<std::size_t>(d));
      for (int o = 0; o < d; ++o) {
        double acc = model.patch_embed_b[o] + model.pos_embed(gy * g + gx, o);
        for (int c = 0; c < 3; ++c)
          for (int py = 0; py < p; ++py)
            for (int px = 0; px < p; ++px)
              acc += model.patch_embed_w(o, c * p * p + py * p + px) *
                     image.channels[static_cast<std::size_t>(c)](gy * p + py, gx * p + px);
        tok[static_cast<std::size_t>(o)] = acc;
      }
      x.push_back(tok);
    }
  }

  std::vector<std::vector<Tok>> out{x};
  const std::size_t n = x.size();
  for (const auto& l : model.layers) {
    std::vector<Tok> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const Tok h = layer_norm(x[t], l.ln1_w, l.ln1_b, cfg.ln_eps);
      q[t] = affine(l.qkv_w, l.qkv_b, h, 0, d);
      k[t] = affine(l.qkv_w, l.qkv_b, h, d, d);
      v[t] = affine(l.qkv_w, l.qkv_b, h, 2 * d, d);
    }
    std::vector<Tok> mid(n);
    for (std::size_t t = 0; t < n; ++t) {
      Tok attn(static_cast<std::size_t>(d), 0.0);
      for (int head = 0; head < cfg.heads; ++head) {
        std::vector<double> s(n);
        double top = -1e300;
        for (std::size_t u = 0; u < n; ++u) {
          double dot = 0;
          for (int j = head * hd; j < (head + 1) * hd; ++j) {
            dot += q[t][static_cast<std::size_t>(j)] * k[u][static_cast<std::size_t>(j)];
          }
          s[u] = dot / std::sqrt(static_cast<double>(hd));
          top = std::max(top, s[u]);
        }
        double z = 0;
        for (auto& e : s) z += (e = std::exp(e - top));
        for (std::size_t u = 0; u < n; ++u)
          for (int j = head * hd; j < (head + 1) * hd; ++j)
            attn[static_cast<std::size_t>(j)] += s[u] / z * v[u][static_cast<std::size_t>(j)];
      }
      const Tok proj = affine(l.proj_w, l.proj_b, attn);
      mid[t] = x[t];
      for (int i = 0; i < d; ++i) mid[t][static_cast<std::size_t>(i)] += l.ls1[i] * proj[static_cast<std::size_t>(i)];
    }
    for (std::size_t t = 0; t < n; ++t) {
      const Tok h = layer_norm(mid[t], l.ln2_w, l.ln2_b, cfg.ln_eps);
      const Tok a = affine(l.mlp_w1, l.mlp_h1, h);
      const Tok b = affine(l.mlp_w2, l.mlp_h2, h);
      Tok gated(a.size());
      for (std::size_t j = 0; j < a.size(); ++j) gated[j] = a[j] / (1.0 + std::exp(-a[j])) * b[j];
      const Tok mlp = affine(l.mlp_w3, l.mlp_d3, gated);
      x[t] = mid[t];
      for (int i = 0; i < d; ++i) x[t][static_cast<std::size_t>(i)] += l.ls2[i] * mlp[static_cast<std::size_t>(i)];
    }
    out.push_back(x);
  }
  return out;
}

}  // namespace oracle
}  // namespace sinder::testing
