// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "sinder/block.hpp"
#include "sinder/checkpoint.hpp"
#include "sinder/defect.hpp"
#include "sinder/error.hpp"
#include "sinder/model.hpp"
#include "sinder/synth.hpp"
#include "support.hpp"

namespace sinder {
namespace {

using testing::random_model;

VitConfig tiny_config() {
  VitConfig c;
  c.depth = 1;
  c.dim = 16;
  c.heads = 2;
  c.mlp_hidden = 24;
  c.patch = 4;
  c.img_size = 16;
  c.n_registers = 1;
  return c;
}

ImageTensor random_tensor(int size, std::uint64_t seed) {
  ImageTensor t{size, size, {}};
  for (int c = 0; c < 3; ++c) t.channels[c] = linalg::random_normal(size, size, seed + c);
  return t;
}

TEST(VitConfig, Validation) {
  VitConfig c;
  EXPECT_NO_THROW(c.validate());
  c.heads = 5;
  EXPECT_THROW(c.validate(), Error);
  c = VitConfig{};
  c.patch = 7;
  EXPECT_THROW(c.validate(), Error);
  c = VitConfig{};
  c.depth = 0;
  EXPECT_THROW(c.validate(), Error);
  c = VitConfig{};
  c.n_registers = -1;
  EXPECT_THROW(c.validate(), Error);
}

TEST(VitConfig, DefaultIsDeskScale) {
  const VitConfig c;
  EXPECT_EQ(c.depth, 8);
  EXPECT_EQ(c.dim, 64);
  EXPECT_EQ(c.heads, 4);
  EXPECT_EQ(c.mlp_hidden, 128);
  EXPECT_EQ(c.grid(), 16);
  EXPECT_EQ(c.ln_eps, 1e-6);
}

TEST(Forward, ZeroLayersAreIdentity) {
  VitConfig cfg = tiny_config();
  cfg.depth = 3;
  VitModel m = random_model(cfg, 1);
  for (auto& l : m.layers) l = LayerParams::zeros(cfg);
  const auto grids = forward(m, random_tensor(16, 4));
  ASSERT_EQ(grids.size(), 4u);
  for (std::size_t i = 1; i < grids.size(); ++i) EXPECT_EQ(grids[i].tokens, grids[0].tokens);
}

TEST(Forward, MatchesScalarOracle) {
  const VitModel m = random_model(tiny_config(), 2);
  const ImageTensor img = random_tensor(16, 9);
  const auto grids = forward(m, img);
  const auto ref = testing::oracle::forward(m, img);
  ASSERT_EQ(ref.size(), grids.size());
  const int prefix = m.config.prefix_tokens();
  for (std::size_t l = 0; l < grids.size(); ++l) {
    for (int t = 0; t < grids[l].count(); ++t)
      for (int j = 0; j < m.config.dim; ++j)
        EXPECT_NEAR(grids[l].tokens(t, j), ref[l][static_cast<std::size_t>(prefix + t)][static_cast<std::size_t>(j)], 1e-6);
  }
}

TEST(Forward, ReturnsPatchTokensOnly) {
  const VitModel m = random_model(tiny_config(), 3);
  const auto grids = forward(m, random_tensor(16, 1));
  EXPECT_EQ(grids[0].h, 4);
  EXPECT_EQ(grids[0].w, 4);
  EXPECT_EQ(grids[0].count(), 16);
  EXPECT_EQ(grids[0].tokens.rows(), 16);
}

TEST(Forward, ShapeMismatchNamesExpectedSize) {
  const VitModel m = random_model(tiny_config(), 3);
  try {
    forward(m, random_tensor(20, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidInput);
    EXPECT_NE(std::string(e.what()).find("16x16"), std::string::npos);
  }
}

TEST(Forward, IsBitwiseDeterministic) {
  const VitModel m = random_model(tiny_config(), 5);
  const auto a = forward(m, random_tensor(16, 2));
  const auto b = forward(m, random_tensor(16, 2));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].tokens, b[i].tokens);
}

TEST(Forward, ZeroLayerScaleMakesLayerTransparent) {
  VitConfig cfg = tiny_config();
  cfg.depth = 3;
  VitModel m = random_model(cfg, 6);
  m.layers[1].ls1.setZero();
  m.layers[1].ls2.setZero();
  const auto grids = forward(m, random_tensor(16, 3));
  EXPECT_EQ(grids[2].tokens, grids[1].tokens);
  EXPECT_NE(grids[1].tokens, grids[0].tokens);
}

TEST(Forward, AttentionRowsSumToOne) {
  const VitModel m = random_model(tiny_config(), 7);
  const Matrix x = embed(m, random_tensor(16, 5));
  block::LayerTape tape;
  block::layer_forward(m.layers[0], m.config, x, true, nullptr, &tape);
  for (const auto& p : tape.probs)
    for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-9);
}

TEST(Block, SwigluMatchesScalarFormula) {
  const VitModel m = random_model(tiny_config(), 8);
  const auto& l = m.layers[0];
  const Matrix z = linalg::random_normal(16, 10, 12);
  const Matrix got = block::swiglu_core(l, z);
  for (int n = 0; n < 10; ++n) {
    for (int i = 0; i < 24; ++i) {
      double a = l.mlp_h1[i], b = l.mlp_h2[i];
      for (int j = 0; j < 16; ++j) {
        a += l.mlp_w1(i, j) * z(j, n);
        b += l.mlp_w2(i, j) * z(j, n);
      }
      EXPECT_NEAR(got(i, n), a / (1 + std::exp(-a)) * b, 1e-9);
    }
  }
}

TEST(Block, LayerNormIsExactOrCentered) {
  Matrix x(2, 4);
  x << 1, 2, 3, 4, -1, 0, 0, 5;
  const Vector w = Vector::Ones(4), b = Vector::Zero(4);
  const Matrix exact = block::layer_norm(x, w, b, 1e-6, true);
  const Matrix centered = block::layer_norm(x, w, b, 1e-6, false);
  EXPECT_NEAR(exact.row(0).squaredNorm() / 4, 1.0, 1e-5);
  EXPECT_NEAR(centered(0, 0), -1.5, 1e-15);
  EXPECT_NEAR(centered.row(1).sum(), 0, 1e-15);
}

TEST(ForwardSingleToken, ZeroInputZeroBiasesGivesZero) {
  VitConfig cfg = tiny_config();
  cfg.depth = 2;
  VitModel m = random_model(cfg, 9);
  for (auto& l : m.layers) {
    l.ln1_b.setZero();
    l.qkv_b.setZero();
    l.proj_b.setZero();
    l.ln2_b.setZero();
    l.mlp_h1.setZero();
    l.mlp_h2.setZero();
    l.mlp_d3.setZero();
  }
  for (bool exact : {true, false}) {
    for (const auto& v : forward_single_token(m, Vector::Zero(16), exact)) {
      EXPECT_EQ(v.cwiseAbs().maxCoeff(), 0.0);
    }
  }
}

TEST(ForwardSingleToken, ExactAndApproximateNormDiffer) {
  const VitModel m = random_model(tiny_config(), 10);
  const Vector x = 3.0 * linalg::random_normal(16, 1, 4).col(0);
  const auto a = forward_single_token(m, x, true);
  const auto b = forward_single_token(m, x, false);
  EXPECT_GT((a[0] - b[0]).norm(), 1e-3);
}

TEST(ForwardSingleToken, RejectsWrongDimension) {
  const VitModel m = random_model(tiny_config(), 10);
  EXPECT_THROW(forward_single_token(m, Vector::Zero(5), true), Error);
}

TEST(Synth, IsDeterministic) {
  const auto dir = testing::temp_dir("synth_det");
  const auto cfg = fixture_config();
  save_checkpoint(synth_defective_model(cfg, 2, 50, 3), dir / "a");
  save_checkpoint(synth_defective_model(cfg, 2, 50, 3), dir / "b");
  EXPECT_EQ(testing::read_bytes(dir / "a" / "weights.bin"), testing::read_bytes(dir / "b" / "weights.bin"));
  EXPECT_EQ(testing::read_bytes(dir / "a" / "manifest.json"), testing::read_bytes(dir / "b" / "manifest.json"));
  std::filesystem::remove_all(dir);
}

TEST(Synth, ParametersAreFloat32Exact) {
  VitModel m = synth_defective_model(fixture_config(), 2, 50, 3);
  const VitModel copy = m;
  round_to_f32(m);
  EXPECT_EQ(m.layers[2].proj_w, copy.layers[2].proj_w);
  EXPECT_EQ(m.pos_embed, copy.pos_embed);
}

TEST(Synth, InflationScalesLeadingSingularValue) {
  const auto cfg = fixture_config();
  const double base = linalg::singular_values(synth_defective_model(cfg, 2, 1, 7).layers[2].proj_w)[0];
  const double hot = linalg::singular_values(synth_defective_model(cfg, 2, 50, 7).layers[2].proj_w)[0];
  EXPECT_NEAR(hot / base, 50, 1e-4);
}

TEST(Synth, RejectsBadArguments) {
  const auto cfg = fixture_config();
  EXPECT_THROW(synth_defective_model(cfg, 6, 50, 1), Error);
  EXPECT_THROW(synth_defective_model(cfg, -1, 50, 1), Error);
  EXPECT_THROW(synth_defective_model(cfg, 2, 0.5, 1), Error);
}

TEST(Synth, TriggerPositionsAreInteriorAndSeparated) {
  const auto cfg = fixture_config();
  const auto pos = synth_trigger_positions(cfg, 7);
  const int g = cfg.grid();
  for (std::size_t a = 0; a < pos.size(); ++a) {
    EXPECT_GT(pos[a] / g, 0);
    EXPECT_LT(pos[a] / g, g - 1);
    EXPECT_GT(pos[a] % g, 0);
    EXPECT_LT(pos[a] % g, g - 1);
    for (std::size_t b = a + 1; b < pos.size(); ++b) {
      const int dr = std::abs(pos[a] / g - pos[b] / g), dc = std::abs(pos[a] % g - pos[b] % g);
      EXPECT_GE(std::max(dr, dc), 3);
    }
  }
}

TEST(Synth, BaselineHasNoOutlierTokens) {
  const auto images = testing::seeded_images(20, testing::kProbeImageSeed);
  EXPECT_LT(testing::mean_norm_ratio(testing::fixture_model(1.0), images), 3.0);
}

TEST(Synth, InflatedModelHasHighNormTokens) {
  const auto images = testing::seeded_images(20, testing::kProbeImageSeed);
  EXPECT_GT(testing::mean_norm_ratio(testing::fixture_model(50.0), images), 5.0);
}

TEST(Image, PpmRoundTrip) {
  const RgbImage img = synth_image(24, 3);
  EXPECT_EQ(decode_ppm(encode_ppm(img)), img);
  const auto dir = testing::temp_dir("ppm");
  write_ppm(dir / "a.ppm", img);
  EXPECT_EQ(read_ppm(dir / "a.ppm"), img);
  std::filesystem::remove_all(dir);
}

TEST(Image, PpmRejectsMalformed) {
  auto bytes = encode_ppm(synth_image(8, 1));
  auto truncated = bytes;
  truncated.resize(truncated.size() - 5);
  EXPECT_THROW(decode_ppm(truncated), Error);
  auto wrong_magic = bytes;
  wrong_magic[1] = '3';
  EXPECT_THROW(decode_ppm(wrong_magic), Error);
}

TEST(Image, PpmSkipsComments) {
  const std::string text = "P6\n# comment\n1 1\n255\n";
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  bytes.insert(bytes.end(), {10, 20, 30});
  const RgbImage img = decode_ppm(bytes);
  EXPECT_EQ(img.width, 1);
  EXPECT_EQ(img.at(0, 0)[2], 30);
}

TEST(Image, TensorNormalization) {
  RgbImage img(2, 1);
  img.at(1, 0)[0] = 255;
  const Normalization n;
  const ImageTensor t = to_tensor(img, n);
  EXPECT_NEAR(t.channels[0](0, 0), -n.mean[0] / n.std[0], 1e-12);
  EXPECT_NEAR(t.channels[0](0, 1), (1 - n.mean[0]) / n.std[0], 1e-12);
}

}  // namespace
}  // namespace sinder
