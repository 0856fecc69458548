// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "seemore/tensor.hpp"

namespace seemore {

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <class T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
  require(a.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic and reductions

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "add",
                                [ai, bi](detail::TensorImpl<T>& self) {
                                  for (auto* in : {detail::sink(ai), detail::sink(bi)}) {
                                    if (!in) continue;
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      (*in)[i] += self.grad[i];
                                  }
                                });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "sub",
                                [ai, bi](detail::TensorImpl<T>& self) {
                                  if (auto* ga = detail::sink(ai))
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      (*ga)[i] += self.grad[i];
                                  if (auto* gb = detail::sink(bi))
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      (*gb)[i] -= self.grad[i];
                                });
}

/// Elementwise (Hadamard) product.
template <class T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "hadamard");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, "hadamard",
                                [ai, bi](detail::TensorImpl<T>& self) {
                                  if (auto* ga = detail::sink(ai))
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      (*ga)[i] += self.grad[i] * bi->data[i];
                                  if (auto* gb = detail::sink(bi))
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      (*gb)[i] += self.grad[i] * ai->data[i];
                                });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  auto ai = a.impl();
  return detail::make_result<T>(a.shape(), std::move(out), {a}, "scale",
                                [ai, s](detail::TensorImpl<T>& self) {
                                  auto& g = ai->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
                                });
}

/// |a| with subgradient 0 at 0.
template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(a[i]);
  auto ai = a.impl();
  return detail::make_result<T>(a.shape(), std::move(out), {a}, "abs",
                                [ai](detail::TensorImpl<T>& self) {
                                  auto& g = ai->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    T x = ai->data[i];
                                    T sign = x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
                                    g[i] += self.grad[i] * sign;
                                  }
                                });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  auto ai = a.impl();
  return detail::make_result<T>(Shape{1}, {total}, {a}, "sum", [ai](detail::TensorImpl<T>& self) {
    auto& g = ai->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Same data viewed under a new shape (copies; the tape stays simple).
template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require(shape_numel(shape) == a.numel(),
                  "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  auto ai = a.impl();
  return detail::make_result<T>(std::move(shape), a.values(), {a}, "reshape",
                                [ai](detail::TensorImpl<T>& self) {
                                  auto& g = ai->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                });
}

// ---------------------------------------------------------------------------
// Convolution and linear maps

struct Conv2dOptions {
  std::array<std::size_t, 2> stride{1, 1};
  std::array<std::size_t, 2> padding{0, 0};
  std::size_t groups = 1;
};

namespace detail {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, sh, sw, ph, pw, groups, ho, wo, cin_g, cout_g;

  // Output indices [first, last) whose tap `k` lands inside the input.
  static std::pair<std::size_t, std::size_t> valid(std::size_t k, std::size_t stride,
                                                   std::size_t pad, std::size_t in,
                                                   std::size_t out) {
    std::size_t first = pad > k ? (pad - k + stride - 1) / stride : 0;
    if (in + pad < k + 1) return {0, 0};
    std::size_t last = std::min(out, (in - 1 + pad - k) / stride + 1);
    return {std::min(first, last), last};
  }
};

inline ConvGeometry conv_geometry(const Shape& in, const Shape& wt, const Conv2dOptions& opt) {
  require(in.size() == 4, "conv2d: input must be NCHW, got " + shape_str(in));
  require(wt.size() == 4, "conv2d: weight must be [Cout,Cin/groups,kh,kw], got " + shape_str(wt));
  if (opt.groups == 0 || in[1] % opt.groups != 0 || wt[0] % opt.groups != 0) {
    throw ConfigError("conv2d: groups=" + std::to_string(opt.groups) + " does not divide channels");
  }
  if (opt.stride[0] == 0 || opt.stride[1] == 0) throw ConfigError("conv2d: zero stride");
  ConvGeometry g{};
  g.n = in[0];
  g.cin = in[1];
  g.h = in[2];
  g.w = in[3];
  g.cout = wt[0];
  g.kh = wt[2];
  g.kw = wt[3];
  g.sh = opt.stride[0];
  g.sw = opt.stride[1];
  g.ph = opt.padding[0];
  g.pw = opt.padding[1];
  g.groups = opt.groups;
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  require(wt[1] == g.cin_g, "conv2d: weight expects " + std::to_string(wt[1]) +
                                " input channels per group, input has " + std::to_string(g.cin_g));
  require(g.h + 2 * g.ph >= g.kh && g.w + 2 * g.pw >= g.kw,
          "conv2d: kernel larger than padded input");
  g.ho = (g.h + 2 * g.ph - g.kh) / g.sh + 1;
  g.wo = (g.w + 2 * g.pw - g.kw) / g.sw + 1;
  return g;
}

// Visits every (output, input, weight) triple as contiguous row segments:
// fn(out_offset, in_offset, weight_index, count) with out stride 1 and input stride sw.
template <class Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn) {
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t co = 0; co < g.cout; ++co) {
      const std::size_t grp = co / g.cout_g;
      const std::size_t out_plane = (n * g.cout + co) * g.ho * g.wo;
      for (std::size_t cl = 0; cl < g.cin_g; ++cl) {
        const std::size_t ci = grp * g.cin_g + cl;
        const std::size_t in_plane = (n * g.cin + ci) * g.h * g.w;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          auto [oy0, oy1] = ConvGeometry::valid(ky, g.sh, g.ph, g.h, g.ho);
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            auto [ox0, ox1] = ConvGeometry::valid(kx, g.sw, g.pw, g.w, g.wo);
            if (ox0 >= ox1) continue;
            const std::size_t widx = ((co * g.cin_g + cl) * g.kh + ky) * g.kw + kx;
            for (std::size_t oy = oy0; oy < oy1; ++oy) {
              const std::size_t iy = oy * g.sh + ky - g.ph;
              const std::size_t ix0 = ox0 * g.sw + kx - g.pw;
              fn(out_plane + oy * g.wo + ox0, in_plane + iy * g.w + ix0, widx, ox1 - ox0);
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. `bias` may be an undefined tensor.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias = {},
                 const Conv2dOptions& opt = {}) {
  const auto g = detail::conv_geometry(input.shape(), weight.shape(), opt);
  if (bias.defined()) {
    detail::require(bias.rank() == 1 && bias.dim(0) == g.cout,
                    "conv2d: bias shape " + shape_str(bias.shape()));
  }
  const std::size_t plane = g.ho * g.wo;
  std::vector<T> out(g.n * g.cout * plane, T(0));
  if (bias.defined()) {
    for (std::size_t n = 0; n < g.n; ++n)
      for (std::size_t co = 0; co < g.cout; ++co)
        std::fill_n(out.begin() + (n * g.cout + co) * plane, plane, bias[co]);
  }
  const T* x = input.data().data();
  const T* w = weight.data().data();
  const std::size_t sw = g.sw;
  detail::for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t widx, std::size_t count) {
    const T wv = w[widx];
    T* dst = out.data() + o;
    const T* src = x + i;
    for (std::size_t k = 0; k < count; ++k) dst[k] += wv * src[k * sw];
  });

  auto xi = input.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result<T>(
      Shape{g.n, g.cout, g.ho, g.wo}, std::move(out), inputs, "conv2d",
      [g, xi, wi, bi](detail::TensorImpl<T>& self) {
        auto* gx = detail::sink(xi);
        auto* gw = detail::sink(wi);
        const T* go = self.grad.data();
        const T* x = xi->data.data();
        const T* w = wi->data.data();
        const std::size_t sw = g.sw;
        if (gx || gw) {
          detail::for_each_tap(
              g, [&](std::size_t o, std::size_t i, std::size_t widx, std::size_t count) {
                const T* gsrc = go + o;
                if (gx) {
                  const T wv = w[widx];
                  T* dst = gx->data() + i;
                  for (std::size_t k = 0; k < count; ++k) dst[k * sw] += wv * gsrc[k];
                }
                if (gw) {
                  const T* src = x + i;
                  T acc = T(0);
                  for (std::size_t k = 0; k < count; ++k) acc += gsrc[k] * src[k * sw];
                  (*gw)[widx] += acc;
                }
              });
        }
        if (auto* gb = detail::sink(bi)) {
          const std::size_t plane = g.ho * g.wo;
          for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t co = 0; co < g.cout; ++co) {
              const T* src = go + (n * g.cout + co) * plane;
              T acc = T(0);
              for (std::size_t k = 0; k < plane; ++k) acc += src[k];
              (*gb)[co] += acc;
            }
        }
      });
}

/// y = x·Wᵀ + b over the last dimension of x.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  detail::require_rank(weight, 2, "linear weight");
  const std::size_t cout = weight.dim(0), cin = weight.dim(1);
  detail::require(x.shape().back() == cin, "linear: input last dim " +
                                               std::to_string(x.shape().back()) + " != " +
                                               std::to_string(cin));
  if (bias.defined()) {
    detail::require(bias.rank() == 1 && bias.dim(0) == cout, "linear: bias shape");
  }
  const std::size_t rows = x.numel() / cin;
  std::vector<T> out(rows * cout);
  const T* xp = x.data().data();
  const T* wp = weight.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < cout; ++o) {
      T acc = bias.defined() ? bias[o] : T(0);
      for (std::size_t i = 0; i < cin; ++i) acc += xp[r * cin + i] * wp[o * cin + i];
      out[r * cout + o] = acc;
    }
  }
  Shape shape = x.shape();
  shape.back() = cout;
  auto xi = x.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result<T>(
      std::move(shape), std::move(out), inputs, "linear",
      [xi, wi, bi, rows, cin, cout](detail::TensorImpl<T>& self) {
        auto* gx = detail::sink(xi);
        auto* gw = detail::sink(wi);
        auto* gb = detail::sink(bi);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t o = 0; o < cout; ++o) {
            const T g = self.grad[r * cout + o];
            if (gx)
              for (std::size_t i = 0; i < cin; ++i) (*gx)[r * cin + i] += g * wi->data[o * cin + i];
            if (gw)
              for (std::size_t i = 0; i < cin; ++i) (*gw)[o * cin + i] += g * xi->data[r * cin + i];
            if (gb) (*gb)[o] += g;
          }
        }
      });
}

/// Per-pixel linear map over the channel axis of an NCHW tensor
/// (a 1×1 convolution with a [Cout,Cin] weight).
template <class T>
Tensor<T> channel_linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  detail::require_rank(x, 4, "channel_linear");
  detail::require_rank(weight, 2, "channel_linear weight");
  const std::size_t n = x.dim(0), cin = x.dim(1), plane = x.dim(2) * x.dim(3);
  const std::size_t cout = weight.dim(0);
  detail::require(weight.dim(1) == cin, "channel_linear: weight expects " +
                                            std::to_string(weight.dim(1)) + " channels, input has " +
                                            std::to_string(cin));
  if (bias.defined()) {
    detail::require(bias.rank() == 1 && bias.dim(0) == cout, "channel_linear: bias shape");
  }
  std::vector<T> out(n * cout * plane);
  const T* xp = x.data().data();
  const T* wp = weight.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < cout; ++o) {
      T* dst = out.data() + (b * cout + o) * plane;
      std::fill_n(dst, plane, bias.defined() ? bias[o] : T(0));
      for (std::size_t i = 0; i < cin; ++i) {
        const T wv = wp[o * cin + i];
        const T* src = xp + (b * cin + i) * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] += wv * src[p];
      }
    }
  }
  auto xi = x.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : nullptr;
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result<T>(
      Shape{n, cout, x.dim(2), x.dim(3)}, std::move(out), inputs, "channel_linear",
      [xi, wi, bi, n, cin, cout, plane](detail::TensorImpl<T>& self) {
        auto* gx = detail::sink(xi);
        auto* gw = detail::sink(wi);
        auto* gb = detail::sink(bi);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t o = 0; o < cout; ++o) {
            const T* g = self.grad.data() + (b * cout + o) * plane;
            for (std::size_t i = 0; i < cin; ++i) {
              const std::size_t in_off = (b * cin + i) * plane;
              if (gx) {
                const T wv = wi->data[o * cin + i];
                T* dst = gx->data() + in_off;
                for (std::size_t p = 0; p < plane; ++p) dst[p] += wv * g[p];
              }
              if (gw) {
                const T* src = xi->data.data() + in_off;
                T acc = T(0);
                for (std::size_t p = 0; p < plane; ++p) acc += g[p] * src[p];
                (*gw)[o * cin + i] += acc;
              }
            }
            if (gb) {
              T acc = T(0);
              for (std::size_t p = 0; p < plane; ++p) acc += g[p];
              (*gb)[o] += acc;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and activations

/// Normalizes over channels independently at every (n, h, w) location.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  detail::require_rank(x, 4, "layer_norm");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  detail::require(gamma.numel() == c && beta.numel() == c,
                  "layer_norm: gamma/beta size does not match " + std::to_string(c) + " channels");
  std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(n * plane);
  std::vector<T> mu(plane), var(plane);
  for (std::size_t b = 0; b < n; ++b) {
    const T* src = x.data().data() + b * c * plane;
    std::fill(mu.begin(), mu.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < plane; ++p) mu[p] += src[ch * plane + p];
    for (auto& m : mu) m /= static_cast<T>(c);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < plane; ++p) {
        const T d = src[ch * plane + p] - mu[p];
        var[p] += d * d;
      }
    for (std::size_t p = 0; p < plane; ++p) {
      inv_std[b * plane + p] = T(1) / std::sqrt(var[p] / static_cast<T>(c) + eps);
    }
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t k = (b * c + ch) * plane + p;
        xhat[k] = (src[ch * plane + p] - mu[p]) * inv_std[b * plane + p];
        out[k] = gamma[ch] * xhat[k] + beta[ch];
      }
  }
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
      [xi, gi, bi, n, c, plane, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](detail::TensorImpl<T>& self) {
        auto* gx = detail::sink(xi);
        auto* gg = detail::sink(gi);
        auto* gb = detail::sink(bi);
        std::vector<T> mean_d(plane), mean_dx(plane);
        for (std::size_t b = 0; b < n; ++b) {
          std::fill(mean_d.begin(), mean_d.end(), T(0));
          std::fill(mean_dx.begin(), mean_dx.end(), T(0));
          for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t k = (b * c + ch) * plane + p;
              const T g = self.grad[k];
              if (gg) (*gg)[ch] += g * xhat[k];
              if (gb) (*gb)[ch] += g;
              const T d = g * gi->data[ch];
              mean_d[p] += d;
              mean_dx[p] += d * xhat[k];
            }
          }
          if (!gx) continue;
          for (std::size_t p = 0; p < plane; ++p) {
            mean_d[p] /= static_cast<T>(c);
            mean_dx[p] /= static_cast<T>(c);
          }
          for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t k = (b * c + ch) * plane + p;
              const T d = self.grad[k] * gi->data[ch];
              (*gx)[k] += inv_std[b * plane + p] * (d - mean_d[p] - xhat[k] * mean_dx[p]);
            }
          }
        }
      });
}

/// Exact GELU, x·Φ(x).
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  }
  auto xi = x.impl();
  return detail::make_result<T>(x.shape(), std::move(out), {x}, "gelu",
                                [xi, inv_sqrt2](detail::TensorImpl<T>& self) {
                                  const T inv_sqrt_2pi =
                                      std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    const T v = xi->data[i];
                                    const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                                    const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
                                    g[i] += self.grad[i] * (cdf + v * pdf);
                                  }
                                });
}

/// Softmax over the last dimension (max-subtracted).
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.numel() / k;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data().data() + r * k;
    T* dst = out.data() + r * k;
    const T mx = *std::max_element(src, src + k);
    T total = T(0);
    for (std::size_t i = 0; i < k; ++i) total += (dst[i] = std::exp(src[i] - mx));
    for (std::size_t i = 0; i < k; ++i) dst[i] /= total;
  }
  auto xi = x.impl();
  return detail::make_result<T>(x.shape(), std::move(out), {x}, "softmax",
                                [xi, rows, k](detail::TensorImpl<T>& self) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* y = self.data.data() + r * k;
                                    const T* go = self.grad.data() + r * k;
                                    T dot = T(0);
                                    for (std::size_t i = 0; i < k; ++i) dot += go[i] * y[i];
                                    for (std::size_t i = 0; i < k; ++i)
                                      g[r * k + i] += y[i] * (go[i] - dot);
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Layout and resampling

template <class T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r) {
  detail::require_rank(x, 4, "pixel_shuffle");
  if (r == 0 || x.dim(1) % (r * r) != 0) {
    throw DimensionError("pixel_shuffle: channels " + std::to_string(x.dim(1)) +
                         " not divisible by r^2 = " + std::to_string(r * r));
  }
  const std::size_t n = x.dim(0), c = x.dim(1) / (r * r), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * r, ow = w * r;
  // index[dst] = src
  std::vector<std::size_t> index(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const std::size_t src_c = ch * r * r + (y % r) * r + (xx % r);
          index[((b * c + ch) * oh + y) * ow + xx] =
              ((b * c * r * r + src_c) * h + y / r) * w + xx / r;
        }
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[index[i]];
  auto xi = x.impl();
  return detail::make_result<T>(Shape{n, c, oh, ow}, std::move(out), {x}, "pixel_shuffle",
                                [xi, index = std::move(index)](detail::TensorImpl<T>& self) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t i = 0; i < index.size(); ++i)
                                    g[index[i]] += self.grad[i];
                                });
}

template <class T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r) {
  detail::require_rank(x, 4, "pixel_unshuffle");
  if (r == 0 || x.dim(2) % r != 0 || x.dim(3) % r != 0) {
    throw DimensionError("pixel_unshuffle: spatial dims not divisible by " + std::to_string(r));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2) / r, w = x.dim(3) / r;
  std::vector<std::size_t> index(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < c * r * r; ++oc)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          const std::size_t ch = oc / (r * r), i = (oc % (r * r)) / r, j = oc % r;
          index[((b * c * r * r + oc) * h + y) * w + xx] =
              ((b * c + ch) * h * r + y * r + i) * w * r + xx * r + j;
        }
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[index[i]];
  auto xi = x.impl();
  return detail::make_result<T>(Shape{n, c * r * r, h, w}, std::move(out), {x}, "pixel_unshuffle",
                                [xi, index = std::move(index)](detail::TensorImpl<T>& self) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t i = 0; i < index.size(); ++i)
                                    g[index[i]] += self.grad[i];
                                });
}

/// Nearest-neighbour resize; source index floor(out * in / target).
template <class T>
Tensor<T> resize_nearest(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x, 4, "resize_nearest");
  if (out_h == 0 || out_w == 0) throw DimensionError("resize_nearest: zero target size");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> out(planes * out_h * out_w);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < out_h; ++y) {
      const std::size_t sy = y * h / out_h;
      for (std::size_t xx = 0; xx < out_w; ++xx)
        out[(p * out_h + y) * out_w + xx] = x[(p * h + sy) * w + xx * w / out_w];
    }
  auto xi = x.impl();
  return detail::make_result<T>(
      Shape{x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {x}, "resize_nearest",
      [xi, planes, h, w, out_h, out_w](detail::TensorImpl<T>& self) {
        auto& g = xi->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t y = 0; y < out_h; ++y)
            for (std::size_t xx = 0; xx < out_w; ++xx)
              g[(p * h + y * h / out_h) * w + xx * w / out_w] +=
                  self.grad[(p * out_h + y) * out_w + xx];
      });
}

/// Mean over H and W: [N,C,H,W] -> [N,C].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x, 4, "global_avg_pool");
  const std::size_t planes = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<T> out(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    T acc = T(0);
    for (std::size_t k = 0; k < plane; ++k) acc += x[p * plane + k];
    out[p] = acc / static_cast<T>(plane);
  }
  auto xi = x.impl();
  return detail::make_result<T>(Shape{x.dim(0), x.dim(1)}, std::move(out), {x}, "global_avg_pool",
                                [xi, planes, plane](detail::TensorImpl<T>& self) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t p = 0; p < planes; ++p) {
                                    const T v = self.grad[p] / static_cast<T>(plane);
                                    for (std::size_t k = 0; k < plane; ++k) g[p * plane + k] += v;
                                  }
                                });
}

/// Channels [start, start+count) of an NCHW tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_rank(x, 4, "slice_channels");
  detail::require(count > 0 && start + count <= x.dim(1), "slice_channels: range out of bounds");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<T> out(n * count * plane);
  for (std::size_t b = 0; b < n; ++b)
    std::copy_n(x.data().begin() + (b * c + start) * plane, count * plane,
                out.begin() + b * count * plane);
  auto xi = x.impl();
  return detail::make_result<T>(Shape{n, count, x.dim(2), x.dim(3)}, std::move(out), {x},
                                "slice_channels",
                                [xi, n, c, start, count, plane](detail::TensorImpl<T>& self) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t b = 0; b < n; ++b)
                                    for (std::size_t k = 0; k < count * plane; ++k)
                                      g[(b * c + start) * plane + k] +=
                                          self.grad[b * count * plane + k];
                                });
}

/// Sample `index` along the leading dimension, keeping that dimension (size 1).
template <class T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t index) {
  detail::require(index < x.dim(0), "slice_batch: index out of range");
  const std::size_t stride = x.numel() / x.dim(0);
  std::vector<T> out(x.data().begin() + index * stride, x.data().begin() + (index + 1) * stride);
  Shape shape = x.shape();
  shape[0] = 1;
  auto xi = x.impl();
  return detail::make_result<T>(std::move(shape), std::move(out), {x}, "slice_batch",
                                [xi, index, stride](detail::TensorImpl<T>& self) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t k = 0; k < stride; ++k)
                                    g[index * stride + k] += self.grad[k];
                                });
}

/// Concatenates along the leading dimension.
template <class T>
Tensor<T> concat_batch(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_batch: no inputs");
  Shape shape = parts.front().shape();
  shape[0] = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    Shape tail(p.shape().begin() + 1, p.shape().end());
    detail::require(tail == Shape(shape.begin() + 1, shape.end()),
                    "concat_batch: trailing shape mismatch");
    shape[0] += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return detail::make_result<T>(std::move(shape), std::move(out), parts, "concat_batch",
                                [impls](detail::TensorImpl<T>& self) {
                                  std::size_t offset = 0;
                                  for (const auto& in : impls) {
                                    if (auto* g = detail::sink(in))
                                      for (std::size_t k = 0; k < g->size(); ++k)
                                        (*g)[k] += self.grad[offset + k];
                                    offset += in->data.size();
                                  }
                                });
}

/// y[n, ...] = weights[n, column] * x[n, ...].
template <class T>
Tensor<T> scale_by_column(const Tensor<T>& x, const Tensor<T>& weights, std::size_t column) {
  detail::require_rank(weights, 2, "scale_by_column weights");
  detail::require(weights.dim(0) == x.dim(0) && column < weights.dim(1),
                  "scale_by_column: weights " + shape_str(weights.shape()) + " vs input " +
                      shape_str(x.shape()));
  const std::size_t n = x.dim(0), stride = x.numel() / n, k = weights.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < n; ++b) {
    const T s = weights[b * k + column];
    for (std::size_t i = 0; i < stride; ++i) out[b * stride + i] = s * x[b * stride + i];
  }
  auto xi = x.impl(), wi = weights.impl();
  return detail::make_result<T>(x.shape(), std::move(out), {x, weights}, "scale_by_column",
                                [xi, wi, n, stride, k, column](detail::TensorImpl<T>& self) {
                                  auto* gx = detail::sink(xi);
                                  auto* gw = detail::sink(wi);
                                  for (std::size_t b = 0; b < n; ++b) {
                                    const T s = wi->data[b * k + column];
                                    T acc = T(0);
                                    for (std::size_t i = 0; i < stride; ++i) {
                                      const T g = self.grad[b * stride + i];
                                      if (gx) (*gx)[b * stride + i] += s * g;
                                      acc += g * xi->data[b * stride + i];
                                    }
                                    if (gw) (*gw)[b * k + column] += acc;
                                  }
                                });
}

}  // namespace seemore
