// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <complex>
#include <numbers>
#include <vector>

#include "seemore/ops.hpp"

namespace seemore {

namespace fft {

/// Mixed-radix Cooley-Tukey DFT for any length. Prime factors are handled by
/// a direct butterfly, so a prime length degenerates to the plain O(n^2) sum.
/// Computes X[k] = sum_j x[j] * exp(sign * 2*pi*i * j*k / n).
template <class T>
class Plan {
 public:
  Plan(std::size_t n, int sign) : n_(n), twiddle_(n) {
    for (std::size_t j = 0; j < n; ++j) {
      const T angle = T(sign) * T(2) * std::numbers::pi_v<T> * static_cast<T>(j) / static_cast<T>(n);
      twiddle_[j] = {std::cos(angle), std::sin(angle)};
    }
    for (std::size_t m = n; m > 1;) {
      std::size_t p = 2;
      while (m % p != 0) p = (p * p > m) ? m : p + 1;
      factors_.push_back(p);
      m /= p;
    }
    scratch_.resize(n);
  }

  std::size_t size() const { return n_; }

  /// In-place transform of `count` elements spaced `stride` apart.
  void execute(std::complex<T>* data, std::size_t stride = 1) {
    std::vector<std::complex<T>> in(n_);
    for (std::size_t j = 0; j < n_; ++j) in[j] = data[j * stride];
    recurse(in.data(), 1, scratch_.data(), n_, 0);
    for (std::size_t j = 0; j < n_; ++j) data[j * stride] = scratch_[j];
  }

 private:
  void recurse(const std::complex<T>* in, std::size_t in_stride, std::complex<T>* out,
               std::size_t len, std::size_t level) {
    if (len == 1) {
      out[0] = in[0];
      return;
    }
    const std::size_t p = factors_[level];
    const std::size_t m = len / p;
    for (std::size_t r = 0; r < p; ++r) {
      recurse(in + r * in_stride, in_stride * p, out + r * m, m, level + 1);
    }
    // Twiddles for length `len` are every (n/len)-th entry of the base table.
    const std::size_t step = n_ / len;
    std::vector<std::complex<T>> t(p);
    for (std::size_t k = 0; k < m; ++k) {
      for (std::size_t r = 0; r < p; ++r) {
        t[r] = out[r * m + k] * twiddle_[(r * k % len) * step];
      }
      for (std::size_t q = 0; q < p; ++q) {
        std::complex<T> acc = t[0];
        for (std::size_t r = 1; r < p; ++r) acc += t[r] * twiddle_[(r * q % p) * m * step];
        out[q * m + k] = acc;
      }
    }
  }

  std::size_t n_;
  std::vector<std::complex<T>> twiddle_;
  std::vector<std::size_t> factors_;
  std::vector<std::complex<T>> scratch_;
};

/// Unnormalized 2-D transform of an h×w row-major plane, in place.
template <class T>
void transform_2d(std::complex<T>* plane, std::size_t h, std::size_t w, int sign) {
  Plan<T> rows(w, sign), cols(h, sign);
  for (std::size_t y = 0; y < h; ++y) rows.execute(plane + y * w, 1);
  for (std::size_t x = 0; x < w; ++x) cols.execute(plane + x, w);
}

}  // namespace fft

/// Real and imaginary parts of a spectrum, each shaped like the source.
template <class T>
struct ComplexPlane {
  Tensor<T> real;
  Tensor<T> imag;
};

/// Real and imaginary DFT planes packed as [2, N, C, H, W]. Differentiable.
template <class T>
Tensor<T> fft2d_packed(const Tensor<T>& x) {
  detail::require_rank(x, 4, "fft2d");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), hw = h * w;
  std::vector<T> out(2 * x.numel());
  std::vector<std::complex<T>> buf(hw);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t k = 0; k < hw; ++k) buf[k] = {x[p * hw + k], T(0)};
    fft::transform_2d(buf.data(), h, w, -1);
    for (std::size_t k = 0; k < hw; ++k) {
      out[p * hw + k] = buf[k].real();
      out[x.numel() + p * hw + k] = buf[k].imag();
    }
  }
  Shape shape{2, x.dim(0), x.dim(1), h, w};
  auto xi = x.impl();
  return detail::make_result<T>(
      std::move(shape), std::move(out), {x}, "fft2d", [xi, planes, h, w](detail::TensorImpl<T>& self) {
        // d/dx of Re/Im of sum x e^{-i theta} is Re(sum G e^{+i theta}) with G = gRe + i gIm.
        const std::size_t hw = h * w, total = planes * hw;
        auto& g = xi->grad_buffer();
        std::vector<std::complex<T>> buf(hw);
        for (std::size_t p = 0; p < planes; ++p) {
          for (std::size_t k = 0; k < hw; ++k)
            buf[k] = {self.grad[p * hw + k], self.grad[total + p * hw + k]};
          fft::transform_2d(buf.data(), h, w, +1);
          for (std::size_t k = 0; k < hw; ++k) g[p * hw + k] += buf[k].real();
        }
      });
}

/// Splits the leading size-2 axis of a packed spectrum.
template <class T>
ComplexPlane<T> unpack_complex(const Tensor<T>& packed) {
  detail::require(packed.rank() >= 2 && packed.dim(0) == 2, "unpack_complex: leading dim must be 2");
  Shape tail(packed.shape().begin() + 1, packed.shape().end());
  return {reshape(slice_batch(packed, 0), tail), reshape(slice_batch(packed, 1), tail)};
}

/// X(u,v) = sum_{h,w} x(h,w) exp(-2*pi*i (u h / H + v w / W)) per sample and channel.
template <class T>
ComplexPlane<T> fft2d(const Tensor<T>& x) {
  return unpack_complex(fft2d_packed(x));
}

}  // namespace seemore
