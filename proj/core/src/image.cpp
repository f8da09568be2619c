// Copyright 2026 The sinder Authors
// SPDX-License-Identifier: Apache-2.0

#include "sinder/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "sinder/error.hpp"

namespace sinder {

RgbImage to_rgb(const GrayImage& gray) {
  RgbImage out(gray.width, gray.height);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i) {
    out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = gray.pixels[i];
  }
  return out;
}

std::vector<std::uint8_t> encode_ppm(const RgbImage& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string next_token(const std::vector<std::uint8_t>& bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(bytes[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  std::string tok;
  while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') {
    tok.push_back(static_cast<char>(bytes[pos++]));
  }
  return tok;
}

int parse_positive(const std::string& tok, const char* what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used == tok.size() && v > 0) return v;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::FormatError, std::string("ppm: bad ") + what + " '" + tok + "'");
}

}  // namespace

RgbImage decode_ppm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  if (next_token(bytes, pos) != "P6") {
    fail(ErrorKind::FormatError, "ppm: only binary P6 images are supported");
  }
  const int w = parse_positive(next_token(bytes, pos), "width");
  const int h = parse_positive(next_token(bytes, pos), "height");
  const int maxval = parse_positive(next_token(bytes, pos), "maxval");
  if (maxval != 255) {
    fail(ErrorKind::FormatError, "ppm: only 8-bit images (maxval 255) are supported");
  }
  ++pos;  // single whitespace byte before the raster
  RgbImage img(w, h);
  if (bytes.size() < pos + img.pixels.size()) {
    fail(ErrorKind::FormatError, "ppm: raster truncated, expected " +
                                     std::to_string(img.pixels.size()) + " bytes, got " +
                                     std::to_string(bytes.size() - std::min(pos, bytes.size())));
  }
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), img.pixels.size(),
              img.pixels.begin());
  return img;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::InvalidInput, "cannot write " + path.string());
  const auto bytes = encode_ppm(img);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::InvalidInput, "cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_ppm(bytes);
}

ImageTensor to_tensor(const RgbImage& img, const Normalization& norm) {
  ImageTensor t;
  t.width = img.width;
  t.height = img.height;
  for (int c = 0; c < 3; ++c) {
    t.channels[c].resize(img.height, img.width);
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        t.channels[c](y, x) = (img.at(x, y)[c] / 255.0 - norm.mean[c]) / norm.std[c];
      }
    }
  }
  return t;
}

RgbImage synth_image(int size, std::uint64_t seed) {
  if (size <= 0) fail(ErrorKind::InvalidInput, "synth_image: size must be positive");
  constexpr int kLattice = 5;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> colour(0.0, 255.0);
  std::normal_distribution<double> noise(0.0, 8.0);

  double lattice[kLattice][kLattice][3];
  for (auto& row : lattice)
    for (auto& cell : row)
      for (double& c : cell) c = colour(rng);

  RgbImage img(size, size);
  const double scale = static_cast<double>(kLattice - 1) / std::max(1, size - 1);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double fy = y * scale, fx = x * scale;
      const int y0 = std::min(static_cast<int>(fy), kLattice - 2);
      const int x0 = std::min(static_cast<int>(fx), kLattice - 2);
      const double ty = fy - y0, tx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - ty) * ((1 - tx) * lattice[y0][x0][c] + tx * lattice[y0][x0 + 1][c]) +
                         ty * ((1 - tx) * lattice[y0 + 1][x0][c] + tx * lattice[y0 + 1][x0 + 1][c]);
        img.at(x, y)[c] =
            static_cast<std::uint8_t>(std::clamp(std::lround(v + noise(rng)), 0L, 255L));
      }
    }
  }
  return img;
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) {
    fail(ErrorKind::InvalidInput, "not a directory: " + dir.string());
  }
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace sinder
