// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "seemore/tensor.hpp"

namespace seemore {

/// 8-bit RGB image, row-major, channels interleaved.
struct ImagePlane {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  ImagePlane() = default;
  ImagePlane(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h * 3, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

  bool operator==(const ImagePlane&) const = default;
};

/// [0,1] float to byte: round half away from zero, then clamp.
inline std::uint8_t to_byte(double v) {
  const double r = std::round(v * 255.0);
  return static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
}

/// Images -> [N,3,H,W] float view in [0,1]. All images must share a size.
template <class T>
Tensor<T> to_tensor(const std::vector<ImagePlane>& images) {
  if (images.empty()) throw DimensionError("to_tensor: no images");
  const std::size_t w = images[0].width, h = images[0].height, plane = w * h;
  std::vector<T> data(images.size() * 3 * plane);
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n].width != w || images[n].height != h) throw DimensionError("to_tensor: mixed image sizes");
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < 3; ++c)
        data[(n * 3 + c) * plane + p] = static_cast<T>(images[n].pixels[p * 3 + c]) / T(255);
  }
  return Tensor<T>({images.size(), 3, h, w}, std::move(data));
}

template <class T>
Tensor<T> to_tensor(const ImagePlane& image) {
  return to_tensor<T>(std::vector<ImagePlane>{image});
}

/// Sample `index` of an [N,3,H,W] tensor back to bytes.
template <class T>
ImagePlane from_tensor(const Tensor<T>& t, std::size_t index = 0) {
  if (t.rank() != 4 || t.dim(1) != 3 || index >= t.dim(0)) throw DimensionError("from_tensor: expected [N,3,H,W]");
  const std::size_t h = t.dim(2), w = t.dim(3), plane = h * w;
  ImagePlane img(w, h);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      img.pixels[p * 3 + c] = to_byte(static_cast<double>(t[(index * 3 + c) * plane + p]));
  return img;
}

// ---------------------------------------------------------------------------
// PNG

inline ImagePlane load_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    const std::string msg = png.message;
    png_image_free(&png);
    if (!std::filesystem::exists(path)) throw DataError("cannot read " + path.string());
    throw FormatError("png " + path.string() + ": " + msg);
  }
  const auto fmt = png.format;
  auto reject = [&](const char* why) {
    png_image_free(&png);
    throw FormatError("png " + path.string() + ": unsupported format (" + why + ")");
  };
  if (fmt & PNG_FORMAT_FLAG_LINEAR) reject("16-bit samples");
  if (fmt & PNG_FORMAT_FLAG_COLORMAP) reject("palette");
  if (fmt & PNG_FORMAT_FLAG_ALPHA) reject("alpha channel");
  const bool color = fmt & PNG_FORMAT_FLAG_COLOR;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> raw(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, raw.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw FormatError("png " + path.string() + ": " + msg);
  }
  ImagePlane img(png.width, png.height);
  if (color) {
    img.pixels = std::move(raw);
  } else {
    for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[3 * i] = img.pixels[3 * i + 1] = img.pixels[3 * i + 2] = raw[i];
  }
  return img;
}

inline void save_png(const ImagePlane& img, const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, img.pixels.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw Error("cannot write png " + path.string() + ": " + msg);
  }
}

// ---------------------------------------------------------------------------
// Colour and geometry helpers

/// Studio-swing BT.601 luma, Y in [16, 235]. Returns an [H,W] plane.
inline Tensor<double> rgb_to_y(const ImagePlane& img) {
  std::vector<double> y(img.width * img.height);
  for (std::size_t p = 0; p < y.size(); ++p) {
    const double r = img.pixels[3 * p], g = img.pixels[3 * p + 1], b = img.pixels[3 * p + 2];
    y[p] = 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0;
  }
  return Tensor<double>({img.height, img.width}, std::move(y));
}

inline ImagePlane crop(const ImagePlane& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) {
  if (x0 + w > img.width || y0 + h > img.height || w == 0 || h == 0) throw DimensionError("crop: window out of bounds");
  ImagePlane out(w, h);
  for (std::size_t y = 0; y < h; ++y)
    std::copy_n(img.pixels.begin() + ((y0 + y) * img.width + x0) * 3, w * 3, out.pixels.begin() + y * w * 3);
  return out;
}

/// Largest top-left crop whose sides are multiples of `m`.
inline ImagePlane mod_crop(const ImagePlane& img, std::size_t m) {
  return crop(img, 0, 0, img.width - img.width % m, img.height - img.height % m);
}

// ---------------------------------------------------------------------------
// Bicubic resampling

struct BicubicOptions {
  double a = -0.5;
  bool antialias = true;
};

namespace detail {

inline double cubic_kernel(double x, double a) {
  const double ax = std::abs(x), ax2 = ax * ax, ax3 = ax2 * ax;
  if (ax <= 1.0) return (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0;
  if (ax <= 2.0) return a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a;
  return 0.0;
}

/// Source taps and normalized weights for one output coordinate along an axis.
struct Contribution {
  std::vector<std::size_t> index;
  std::vector<double> weight;
};

inline std::vector<Contribution> contributions(std::size_t in, std::size_t out, double scale,
                                               const BicubicOptions& opt) {
  const bool widen = scale < 1.0 && opt.antialias;
  const double width = widen ? 4.0 / scale : 4.0;
  const auto taps = static_cast<long>(std::ceil(width)) + 2;
  std::vector<Contribution> result(out);
  for (std::size_t o = 0; o < out; ++o) {
    // Pixel centres, 1-based, as in the classic resize.
    const double u = static_cast<double>(o + 1) / scale + 0.5 * (1.0 - 1.0 / scale);
    const auto left = static_cast<long>(std::floor(u - width / 2.0));
    auto& c = result[o];
    double total = 0.0;
    for (long k = 0; k < taps; ++k) {
      const long j = left + k;  // 1-based source index, may fall outside
      const double d = u - static_cast<double>(j);
      const double w = widen ? scale * cubic_kernel(scale * d, opt.a) : cubic_kernel(d, opt.a);
      if (w == 0.0) continue;
      // Symmetric (mirror) extension: ..., 2, 1, 1, 2, ..., n, n, n-1, ...
      const long period = 2 * static_cast<long>(in);
      long m = ((j - 1) % period + period) % period;
      const std::size_t src = static_cast<std::size_t>(m < static_cast<long>(in) ? m : period - 1 - m);
      c.index.push_back(src);
      c.weight.push_back(w);
      total += w;
    }
    for (auto& w : c.weight) w /= total;
  }
  return result;
}

}  // namespace detail

/// Resize by num/den with a cubic kernel; output side ceil(side * num / den).
inline ImagePlane bicubic_resize(const ImagePlane& img, std::size_t num, std::size_t den,
                                 const BicubicOptions& opt = {}) {
  if (num == 0 || den == 0) throw DimensionError("bicubic_resize: scale must be positive");
  const std::size_t ow = (img.width * num + den - 1) / den, oh = (img.height * num + den - 1) / den;
  if (ow == 0 || oh == 0) throw DimensionError("bicubic_resize: zero output size");
  const double scale = static_cast<double>(num) / static_cast<double>(den);
  const auto rows = detail::contributions(img.height, oh, scale, opt);
  const auto cols = detail::contributions(img.width, ow, scale, opt);

  // Vertical pass into doubles, then horizontal, rounding only at the end.
  std::vector<double> mid(img.width * oh * 3, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t k = 0; k < rows[y].index.size(); ++k) {
      const double w = rows[y].weight[k];
      const std::uint8_t* src = img.pixels.data() + rows[y].index[k] * img.width * 3;
      double* dst = mid.data() + y * img.width * 3;
      for (std::size_t i = 0; i < img.width * 3; ++i) dst[i] += w * src[i];
    }
  ImagePlane out(ow, oh);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < cols[x].index.size(); ++k)
          acc += cols[x].weight[k] * mid[(y * img.width + cols[x].index[k]) * 3 + c];
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::round(acc), 0.0, 255.0));
      }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics (64-bit regardless of the numeric profile)

inline Tensor<double> crop_plane(const Tensor<double>& plane, std::size_t border) {
  const std::size_t h = plane.dim(0), w = plane.dim(1);
  if (2 * border >= h || 2 * border >= w) throw DimensionError("metric: crop removes the whole image");
  std::vector<double> out;
  out.reserve((h - 2 * border) * (w - 2 * border));
  for (std::size_t y = border; y < h - border; ++y)
    for (std::size_t x = border; x < w - border; ++x) out.push_back(plane[y * w + x]);
  return Tensor<double>({h - 2 * border, w - 2 * border}, std::move(out));
}

/// 10 log10(255^2 / MSE); +infinity for identical planes.
inline double psnr_plane(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) throw DimensionError("psnr: size mismatch");
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / (se / static_cast<double>(a.numel())));
}

struct MetricOptions {
  std::size_t crop = 0;  // border pixels removed on each side
  bool round_y = false;  // quantize Y to integers before comparing
};

namespace detail {

inline Tensor<double> metric_plane(const ImagePlane& img, const MetricOptions& opt) {
  Tensor<double> y = rgb_to_y(img);
  if (opt.round_y)
    for (auto& v : y.mutable_data()) v = std::round(v);
  return opt.crop ? crop_plane(y, opt.crop) : y;
}

inline void require_same_size(const ImagePlane& a, const ImagePlane& b) {
  if (a.width != b.width || a.height != b.height) {
    throw DimensionError("metric: image sizes differ (" + std::to_string(a.width) + "x" + std::to_string(a.height) +
                         " vs " + std::to_string(b.width) + "x" + std::to_string(b.height) + ")");
  }
}

/// Normalized 1-D Gaussian taps.
inline std::vector<double> gaussian_taps(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double centre = static_cast<double>(size - 1) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - centre;
    total += (g[i] = std::exp(-d * d / (2.0 * sigma * sigma)));
  }
  for (auto& v : g) v /= total;
  return g;
}

// "Valid" separable filtering of an h×w plane.
inline std::vector<double> filter_valid(const std::vector<double>& src, std::size_t h, std::size_t w,
                                        const std::vector<double>& g) {
  const std::size_t k = g.size(), oh = h - k + 1, ow = w - k + 1;
  std::vector<double> tmp(h * ow, 0.0), out(oh * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * src[y * w + x + i];
      tmp[y * ow + x] = acc;
    }
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i) acc += g[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM over all valid 11×11 Gaussian (sigma 1.5) windows, L = 255.
inline double ssim_plane(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.shape() != b.shape()) throw DimensionError("ssim: size mismatch");
  constexpr std::size_t kWindow = 11;
  const std::size_t h = a.dim(0), w = a.dim(1);
  if (h < kWindow || w < kWindow) throw DimensionError("ssim: image smaller than the 11x11 window");
  const double c1 = (0.01 * 255.0) * (0.01 * 255.0), c2 = (0.03 * 255.0) * (0.03 * 255.0);
  const auto g = detail::gaussian_taps(kWindow, 1.5);
  std::vector<double> va(a.values()), vb(b.values()), aa(a.numel()), bb(a.numel()), ab(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    aa[i] = va[i] * va[i];
    bb[i] = vb[i] * vb[i];
    ab[i] = va[i] * vb[i];
  }
  const auto mu_a = detail::filter_valid(va, h, w, g), mu_b = detail::filter_valid(vb, h, w, g);
  const auto e_aa = detail::filter_valid(aa, h, w, g), e_bb = detail::filter_valid(bb, h, w, g);
  const auto e_ab = detail::filter_valid(ab, h, w, g);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double var_a = e_aa[i] - ma * ma, var_b = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

inline double psnr_y(const ImagePlane& sr, const ImagePlane& hr, const MetricOptions& opt = {}) {
  detail::require_same_size(sr, hr);
  return psnr_plane(detail::metric_plane(sr, opt), detail::metric_plane(hr, opt));
}

inline double ssim_y(const ImagePlane& sr, const ImagePlane& hr, const MetricOptions& opt = {}) {
  detail::require_same_size(sr, hr);
  return ssim_plane(detail::metric_plane(sr, opt), detail::metric_plane(hr, opt));
}

}  // namespace seemore
