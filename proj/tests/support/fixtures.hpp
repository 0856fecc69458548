// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "seemore/seemore.hpp"

namespace fixtures {

using seemore::ImagePlane;

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::mt19937_64 rng(std::random_device{}());
  auto dir = std::filesystem::temp_directory_path() / ("seemore_" + tag + "_" + std::to_string(rng() % 1000000007));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline ImagePlane random_image(std::size_t w, std::size_t h, std::mt19937_64& rng) {
  ImagePlane img(w, h);
  std::uniform_int_distribution<int> u(0, 255);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(u(rng));
  return img;
}

inline ImagePlane constant_image(std::size_t w, std::size_t h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  ImagePlane img(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      img.at(x, y, 0) = r;
      img.at(x, y, 1) = g;
      img.at(x, y, 2) = b;
    }
  return img;
}

/// Band-limited texture: sums of oblique sinusoids at mid frequencies, the
/// range bicubic downscaling attenuates but a learned filter can restore.
inline ImagePlane texture(std::size_t w, std::size_t h, double phase = 0.0) {
  constexpr double tau = 2 * std::numbers::pi;
  ImagePlane img(w, h);
  for (std::size_t yi = 0; yi < h; ++yi)
    for (std::size_t xi = 0; xi < w; ++xi) {
      const double x = static_cast<double>(xi), y = static_cast<double>(yi);
      const double r = 128 + 50 * std::sin(tau * (0.12 * x + 0.05 * y) + phase) + 30 * std::sin(tau * (0.03 * x - 0.15 * y));
      const double g = 128 + 45 * std::sin(tau * (-0.08 * x + 0.13 * y) + 1 + phase) + 35 * std::sin(tau * 0.17 * x);
      const double b = 128 + 40 * std::sin(tau * (0.1 * x + 0.1 * y) + 2) + 40 * std::sin(tau * 0.06 * y + phase);
      img.at(xi, yi, 0) = seemore::to_byte(r / 255);
      img.at(xi, yi, 1) = seemore::to_byte(g / 255);
      img.at(xi, yi, 2) = seemore::to_byte(b / 255);
    }
  return img;
}

/// Mixed content for routing fixtures: gradient, blobs and noise, varied by `seed`.
inline ImagePlane scene(std::size_t w, std::size_t h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  const double cx = u(rng) * w, cy = u(rng) * h, rad = (0.2 + 0.3 * u(rng)) * w, noise = 40 * u(rng);
  const double freq = 0.02 + 0.2 * u(rng);
  ImagePlane img(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      const double base = 255.0 * x / w * (1 - u(rng) * 0.1);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = base * (c == 0) + (d < rad ? 200.0 : 40.0) * (c == 1) +
                   (128 + 100 * std::sin(2 * std::numbers::pi * freq * (x + y))) * (c == 2);
        v += noise * (u(rng) - 0.5);
        img.at(x, y, c) = seemore::to_byte(v / 255);
      }
    }
  return img;
}

// ---------------------------------------------------------------------------
// Hand-assembled PNG streams

inline void put_u32_be(std::string& s, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_chunk(std::string& png, const char* type, const std::string& data) {
  put_u32_be(png, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  png += body;
  put_u32_be(png, static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
                                                    static_cast<uInt>(body.size()))));
}

/// Minimal PNG: IHDR, one zlib IDAT of filter-0 scanlines, IEND.
/// `color_type` 2 = RGB, 0 = gray, 6 = RGBA; `raw` holds unfiltered samples.
inline std::string assemble_png(std::uint32_t w, std::uint32_t h, int bit_depth, int color_type,
                                const std::vector<std::uint8_t>& raw) {
  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32_be(ihdr, w);
  put_u32_be(ihdr, h);
  ihdr.push_back(static_cast<char>(bit_depth));
  ihdr.push_back(static_cast<char>(color_type));
  ihdr.append(3, '\0');
  put_chunk(png, "IHDR", ihdr);
  const std::size_t row = raw.size() / h;
  std::string scan;
  for (std::uint32_t y = 0; y < h; ++y) {
    scan.push_back('\0');
    scan.append(reinterpret_cast<const char*>(raw.data() + y * row), row);
  }
  uLongf len = compressBound(static_cast<uLong>(scan.size()));
  std::string z(len, '\0');
  compress(reinterpret_cast<Bytef*>(z.data()), &len, reinterpret_cast<const Bytef*>(scan.data()),
           static_cast<uLong>(scan.size()));
  z.resize(len);
  put_chunk(png, "IDAT", z);
  put_chunk(png, "IEND", "");
  return png;
}

// ---------------------------------------------------------------------------
// Parameters and configurations

/// Overwrites every parameter of a block (anything with visit(prefix, f)) with U(-spread, spread).
template <class P>
void randomize(P& params, std::mt19937_64& rng, double spread = 0.5) {
  std::uniform_real_distribution<double> u(-spread, spread);
  params.visit("", [&](const std::string&, seemore::Tensor<double>& t) {
    for (auto& v : t.mutable_data()) v = u(rng);
  });
}

template <class P>
void zero(P& params) {
  params.visit("", [](const std::string&, seemore::Tensor<double>& t) {
    for (auto& v : t.mutable_data()) v = 0;
  });
}

/// The smallest configuration the routing and pyramid paths accept comfortably.
inline seemore::ModelConfig tiny_config(std::size_t scale = 2) {
  seemore::ModelConfig c = seemore::preset("T", scale);
  c.n_rg = 2;
  c.channels = 8;
  c.n_experts = 2;
  c.ranks = {2, 4};
  c.see_kernel = 7;
  c.recursion = 1;
  return c;
}

}  // namespace fixtures
