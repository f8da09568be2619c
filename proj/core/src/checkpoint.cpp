// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#include "sinder/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>

#include "sinder/error.hpp"

namespace sinder {
namespace {

static_assert(std::endian::native == std::endian::little,
              "weights.bin is little-endian; big-endian hosts need byte swapping");

using Shape = std::vector<std::int64_t>;
using json = nlohmann::ordered_json;

constexpr const char* kManifest = "manifest.json";
constexpr const char* kWeights = "weights.bin";

[[noreturn]] void format_error(const std::string& what) { fail(ErrorKind::FormatError, what); }

std::string layer_prefix(int i) { return "blocks." + std::to_string(i) + "."; }

TensorRecord record(std::string name, const Matrix& m) {
  TensorRecord r{std::move(name), {m.rows(), m.cols()}, {}};
  r.data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.data.push_back(static_cast<float>(m(i, j)));
  return r;
}

TensorRecord record(std::string name, const Vector& v) {
  TensorRecord r{std::move(name), {v.size()}, {}};
  r.data.reserve(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) r.data.push_back(static_cast<float>(v[i]));
  return r;
}

Matrix to_matrix(const TensorRecord& r) {
  if (r.shape.size() != 2) format_error("tensor " + r.name + " is not 2-D");
  Matrix m(r.shape[0], r.shape[1]);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.data[k++];
  return m;
}

Vector to_vector(const TensorRecord& r) {
  if (r.shape.size() != 1) format_error("tensor " + r.name + " is not 1-D");
  Vector v(r.shape[0]);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = r.data[static_cast<std::size_t>(i)];
  return v;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) format_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::int64_t TensorRecord::numel() const {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

const TensorRecord& CheckpointContents::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  format_error("missing tensor " + name);
}

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = crc32(crc, bytes.data() + pos, chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::string> linear_names(int layer) {
  const std::string p = layer_prefix(layer);
  return {p + "attn.q", p + "attn.k", p + "attn.v", p + "attn.proj",
          p + "mlp.w1", p + "mlp.w2", p + "mlp.w3"};
}

std::vector<std::pair<std::string, Shape>> expected_tensor_table(const VitConfig& cfg,
                                                                  const std::string& layout) {
  if (layout != "dense" && layout != "factored") format_error("unknown layout '" + layout + "'");
  const bool factored = layout == "factored";
  const std::int64_t d = cfg.dim, m = cfg.mlp_hidden;
  std::vector<std::pair<std::string, Shape>> t;
  t.emplace_back("patch_embed.weight", Shape{d, cfg.patch_dim()});
  t.emplace_back("patch_embed.bias", Shape{d});
  t.emplace_back("pos_embed", Shape{cfg.patch_tokens(), d});
  t.emplace_back("cls_token", Shape{d});
  if (cfg.n_registers > 0) t.emplace_back("register_tokens", Shape{cfg.n_registers, d});
  auto linear = [&](const std::string& base, std::int64_t out, std::int64_t in) {
    const std::int64_t r = std::min(out, in);
    t.emplace_back(base + ".U", Shape{out, r});
    t.emplace_back(base + ".S", Shape{r});
    t.emplace_back(base + ".V", Shape{in, r});
  };
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string p = layer_prefix(i);
    t.emplace_back(p + "norm1.weight", Shape{d});
    t.emplace_back(p + "norm1.bias", Shape{d});
    if (factored) {
      linear(p + "attn.q", d, d);
      linear(p + "attn.k", d, d);
      linear(p + "attn.v", d, d);
    } else {
      t.emplace_back(p + "attn.qkv.weight", Shape{3 * d, d});
    }
    t.emplace_back(p + "attn.qkv.bias", Shape{3 * d});
    if (factored) linear(p + "attn.proj", d, d);
    else t.emplace_back(p + "attn.proj.weight", Shape{d, d});
    t.emplace_back(p + "attn.proj.bias", Shape{d});
    t.emplace_back(p + "ls1.gamma", Shape{d});
    t.emplace_back(p + "norm2.weight", Shape{d});
    t.emplace_back(p + "norm2.bias", Shape{d});
    if (factored) linear(p + "mlp.w1", m, d);
    else t.emplace_back(p + "mlp.w1.weight", Shape{m, d});
    t.emplace_back(p + "mlp.w1.bias", Shape{m});
    if (factored) linear(p + "mlp.w2", m, d);
    else t.emplace_back(p + "mlp.w2.weight", Shape{m, d});
    t.emplace_back(p + "mlp.w2.bias", Shape{m});
    if (factored) linear(p + "mlp.w3", d, m);
    else t.emplace_back(p + "mlp.w3.weight", Shape{d, m});
    t.emplace_back(p + "mlp.w3.bias", Shape{d});
    t.emplace_back(p + "ls2.gamma", Shape{d});
  }
  t.emplace_back("norm.weight", Shape{d});
  t.emplace_back("norm.bias", Shape{d});
  return t;
}

std::vector<TensorRecord> dense_tensors(const VitModel& model) {
  const auto& cfg = model.config;
  std::vector<TensorRecord> t;
  t.push_back(record("patch_embed.weight", model.patch_embed_w));
  t.push_back(record("patch_embed.bias", model.patch_embed_b));
  t.push_back(record("pos_embed", model.pos_embed));
  t.push_back(record("cls_token", model.cls_token));
  if (cfg.n_registers > 0) t.push_back(record("register_tokens", model.registers));
  for (int i = 0; i < cfg.depth; ++i) {
    const auto& l = model.layers[static_cast<std::size_t>(i)];
    const std::string p = layer_prefix(i);
    t.push_back(record(p + "norm1.weight", l.ln1_w));
    t.push_back(record(p + "norm1.bias", l.ln1_b));
    t.push_back(record(p + "attn.qkv.weight", l.qkv_w));
    t.push_back(record(p + "attn.qkv.bias", l.qkv_b));
    t.push_back(record(p + "attn.proj.weight", l.proj_w));
    t.push_back(record(p + "attn.proj.bias", l.proj_b));
    t.push_back(record(p + "ls1.gamma", l.ls1));
    t.push_back(record(p + "norm2.weight", l.ln2_w));
    t.push_back(record(p + "norm2.bias", l.ln2_b));
    t.push_back(record(p + "mlp.w1.weight", l.mlp_w1));
    t.push_back(record(p + "mlp.w1.bias", l.mlp_h1));
    t.push_back(record(p + "mlp.w2.weight", l.mlp_w2));
    t.push_back(record(p + "mlp.w2.bias", l.mlp_h2));
    t.push_back(record(p + "mlp.w3.weight", l.mlp_w3));
    t.push_back(record(p + "mlp.w3.bias", l.mlp_d3));
    t.push_back(record(p + "ls2.gamma", l.ls2));
  }
  t.push_back(record("norm.weight", model.final_ln_w));
  t.push_back(record("norm.bias", model.final_ln_b));
  return t;
}

void write_checkpoint(const std::filesystem::path& dir, const CheckpointContents& c) {
  const auto expected = expected_tensor_table(c.config, c.layout);
  if (expected.size() != c.tensors.size()) {
    fail(ErrorKind::InvalidInput, "write_checkpoint: tensor count does not match layout");
  }
  std::vector<std::uint8_t> weights;
  json table = json::array();
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    const auto& t = c.tensors[i];
    if (t.name != expected[i].first || t.shape != expected[i].second ||
        static_cast<std::int64_t>(t.data.size()) != t.numel()) {
      fail(ErrorKind::InvalidInput, "write_checkpoint: unexpected tensor " + t.name);
    }
    table.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", "f32"},
                     {"byte_offset", weights.size()}});
    const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data.data());
    weights.insert(weights.end(), raw, raw + t.data.size() * sizeof(float));
  }

  json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["layout"] = c.layout;
  manifest["config"] = {{"depth", c.config.depth},
                        {"dim", c.config.dim},
                        {"heads", c.config.heads},
                        {"mlp_hidden", c.config.mlp_hidden},
                        {"patch", c.config.patch},
                        {"img_size", c.config.img_size},
                        {"n_registers", c.config.n_registers},
                        {"ln_eps", c.config.ln_eps}};
  manifest["normalization"] = {{"mean", c.normalization.mean}, {"std", c.normalization.std}};
  manifest["tensors"] = std::move(table);
  manifest["weights_bytes"] = weights.size();
  manifest["weights_crc32"] = crc32_of(weights);
  json meta = json::object();
  for (const auto& [k, v] : c.metadata) meta[k] = v;
  manifest["metadata"] = std::move(meta);

  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / kWeights, std::ios::binary);
    if (!out) fail(ErrorKind::InvalidInput, "cannot write " + (dir / kWeights).string());
    out.write(reinterpret_cast<const char*>(weights.data()),
              static_cast<std::streamsize>(weights.size()));
  }
  std::ofstream out(dir / kManifest);
  if (!out) fail(ErrorKind::InvalidInput, "cannot write " + (dir / kManifest).string());
  out << manifest.dump(2) << '\n';
}

CheckpointContents read_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_bytes = read_file(dir / kManifest);
  json m;
  try {
    m = json::parse(manifest_bytes.begin(), manifest_bytes.end());
  } catch (const json::exception& e) {
    format_error(std::string("manifest.json: ") + e.what());
  }

  CheckpointContents c;
  try {
    const int version = m.at("schema_version").get<int>();
    if (version != kSchemaVersion) {
      format_error("unsupported schema_version " + std::to_string(version));
    }
    c.layout = m.at("layout").get<std::string>();
    const auto& cfg = m.at("config");
    c.config.depth = cfg.at("depth").get<int>();
    c.config.dim = cfg.at("dim").get<int>();
    c.config.heads = cfg.at("heads").get<int>();
    c.config.mlp_hidden = cfg.at("mlp_hidden").get<int>();
    c.config.patch = cfg.at("patch").get<int>();
    c.config.img_size = cfg.at("img_size").get<int>();
    c.config.n_registers = cfg.at("n_registers").get<int>();
    c.config.ln_eps = cfg.at("ln_eps").get<double>();
    c.normalization.mean = m.at("normalization").at("mean").get<std::array<double, 3>>();
    c.normalization.std = m.at("normalization").at("std").get<std::array<double, 3>>();
    if (m.contains("metadata")) {
      for (const auto& [k, v] : m["metadata"].items()) c.metadata[k] = v.get<std::string>();
    }
  } catch (const json::exception& e) {
    format_error(std::string("manifest.json: ") + e.what());
  }
  try {
    c.config.validate();
  } catch (const Error& e) {
    format_error(e.what());
  }

  const auto expected = expected_tensor_table(c.config, c.layout);
  const auto& table = m.at("tensors");
  if (table.size() != expected.size()) {
    format_error("manifest lists " + std::to_string(table.size()) + " tensors, layout '" +
                 c.layout + "' requires " + std::to_string(expected.size()));
  }

  const auto weights = read_file(dir / kWeights);
  const auto declared = m.at("weights_bytes").get<std::uint64_t>();
  if (weights.size() != declared) {
    format_error("weights.bin has " + std::to_string(weights.size()) + " bytes, expected " +
                 std::to_string(declared));
  }
  if (crc32_of(weights) != m.at("weights_crc32").get<std::uint32_t>()) {
    format_error("weights.bin CRC32 mismatch");
  }

  std::uint64_t cursor = 0;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& entry = table[i];
    TensorRecord t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<Shape>();
    if (t.name != expected[i].first) {
      format_error("tensor " + std::to_string(i) + " is '" + t.name + "', expected '" +
                   expected[i].first + "'");
    }
    if (t.shape != expected[i].second) format_error("shape mismatch for tensor " + t.name);
    if (entry.at("dtype").get<std::string>() != "f32") {
      format_error("tensor " + t.name + " has unsupported dtype");
    }
    const auto offset = entry.at("byte_offset").get<std::uint64_t>();
    const auto bytes = static_cast<std::uint64_t>(t.numel()) * sizeof(float);
    if (offset != cursor) format_error("tensor " + t.name + " is not contiguous in weights.bin");
    if (offset + bytes > weights.size()) {
      format_error("tensor " + t.name + " extends past end of weights.bin: expected " +
                   std::to_string(offset + bytes) + " bytes, got " +
                   std::to_string(weights.size()));
    }
    t.data.resize(static_cast<std::size_t>(t.numel()));
    std::memcpy(t.data.data(), weights.data() + offset, bytes);
    cursor = offset + bytes;
    c.tensors.push_back(std::move(t));
  }
  if (cursor != weights.size()) {
    format_error("weights.bin has " + std::to_string(weights.size() - cursor) + " trailing bytes");
  }
  return c;
}

VitModel model_from_contents(const CheckpointContents& c) {
  VitModel model = VitModel::zeros(c.config);
  model.normalization = c.normalization;
  const bool factored = c.layout == "factored";
  auto mat = [&](const std::string& n) { return to_matrix(c.find(n)); };
  auto vec = [&](const std::string& n) { return to_vector(c.find(n)); };
  auto linear = [&](const std::string& base) -> Matrix {
    if (!factored) return mat(base + ".weight");
    return mat(base + ".U") * vec(base + ".S").asDiagonal() * mat(base + ".V").transpose();
  };

  model.patch_embed_w = mat("patch_embed.weight");
  model.patch_embed_b = vec("patch_embed.bias");
  model.pos_embed = mat("pos_embed");
  model.cls_token = vec("cls_token");
  if (c.config.n_registers > 0) model.registers = mat("register_tokens");
  const int d = c.config.dim;
  for (int i = 0; i < c.config.depth; ++i) {
    auto& l = model.layers[static_cast<std::size_t>(i)];
    const std::string p = layer_prefix(i);
    l.ln1_w = vec(p + "norm1.weight");
    l.ln1_b = vec(p + "norm1.bias");
    if (factored) {
      l.qkv_w.resize(3 * d, d);
      l.qkv_w.topRows(d) = linear(p + "attn.q");
      l.qkv_w.middleRows(d, d) = linear(p + "attn.k");
      l.qkv_w.bottomRows(d) = linear(p + "attn.v");
    } else {
      l.qkv_w = mat(p + "attn.qkv.weight");
    }
    l.qkv_b = vec(p + "attn.qkv.bias");
    l.proj_w = linear(p + "attn.proj");
    l.proj_b = vec(p + "attn.proj.bias");
    l.ls1 = vec(p + "ls1.gamma");
    l.ln2_w = vec(p + "norm2.weight");
    l.ln2_b = vec(p + "norm2.bias");
    l.mlp_w1 = linear(p + "mlp.w1");
    l.mlp_h1 = vec(p + "mlp.w1.bias");
    l.mlp_w2 = linear(p + "mlp.w2");
    l.mlp_h2 = vec(p + "mlp.w2.bias");
    l.mlp_w3 = linear(p + "mlp.w3");
    l.mlp_d3 = vec(p + "mlp.w3.bias");
    l.ls2 = vec(p + "ls2.gamma");
  }
  model.final_ln_w = vec("norm.weight");
  model.final_ln_b = vec("norm.bias");
  try {
    model.validate();
  } catch (const Error& e) {
    format_error(e.what());
  }
  return model;
}

void save_checkpoint(const VitModel& model, const std::filesystem::path& dir,
                     const std::map<std::string, std::string>& metadata) {
  model.validate();
  CheckpointContents c;
  c.config = model.config;
  c.normalization = model.normalization;
  c.layout = "dense";
  c.metadata = metadata;
  c.tensors = dense_tensors(model);
  write_checkpoint(dir, c);
}

VitModel load_checkpoint(const std::filesystem::path& dir) {
  return model_from_contents(read_checkpoint(dir));
}

void round_to_f32(VitModel& model) {
  auto r = [](auto& m) { m = m.template cast<float>().template cast<double>(); };
  r(model.patch_embed_w);
  r(model.patch_embed_b);
  r(model.pos_embed);
  r(model.cls_token);
  r(model.registers);
  for (auto& l : model.layers) {
    r(l.ln1_w); r(l.ln1_b); r(l.qkv_w); r(l.qkv_b); r(l.proj_w); r(l.proj_b); r(l.ls1);
    r(l.ln2_w); r(l.ln2_b); r(l.mlp_w1); r(l.mlp_h1); r(l.mlp_w2); r(l.mlp_h2);
    r(l.mlp_w3); r(l.mlp_d3); r(l.ls2);
  }
  r(model.final_ln_w);
  r(model.final_ln_b);
}

}  // namespace sinder
