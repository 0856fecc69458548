// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <random>
#include <string>

#include "seemore/ops.hpp"

namespace seemore {

using Rng = std::mt19937_64;

namespace init {

/// Normal(0, sigma) redrawn until it falls inside ±2 sigma.
template <class T>
void truncated_normal(Tensor<T>& t, double sigma, Rng& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  for (auto& v : t.mutable_data()) {
    double s;
    do {
      s = dist(rng);
    } while (std::abs(s) > 2.0 * sigma);
    v = static_cast<T>(s);
  }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
void fan_in_uniform(Tensor<T>& t, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.mutable_data()) v = static_cast<T>(dist(rng));
}

}  // namespace init

/// Convolution parameters plus their fixed geometry.
template <class T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;
  Conv2dOptions options;

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, options); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

/// Channel-wise linear layer, weight [out, in].
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Tensor<T> operator()(const Tensor<T>& x) const { return channel_linear(x, weight, bias); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-6);

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

template <class T>
Conv2d<T> make_conv(std::size_t cin, std::size_t cout, std::size_t kh, std::size_t kw,
                    Conv2dOptions options, Rng& rng) {
  Conv2d<T> c;
  const std::size_t cin_g = cin / options.groups;
  c.weight = Tensor<T>::zeros({cout, cin_g, kh, kw});
  init::fan_in_uniform(c.weight, cin_g * kh * kw, rng);
  c.bias = Tensor<T>::zeros({cout});
  c.options = options;
  return c;
}

/// k×k convolution, stride 1, "same" zero padding.
template <class T>
Conv2d<T> make_conv_same(std::size_t cin, std::size_t cout, std::size_t k, Rng& rng,
                         std::size_t groups = 1) {
  return make_conv<T>(cin, cout, k, k, Conv2dOptions{{1, 1}, {k / 2, k / 2}, groups}, rng);
}

template <class T>
Linear<T> make_linear(std::size_t cin, std::size_t cout, Rng& rng) {
  Linear<T> l;
  l.weight = Tensor<T>::zeros({cout, cin});
  init::truncated_normal(l.weight, 0.02, rng);
  l.bias = Tensor<T>::zeros({cout});
  return l;
}

template <class T>
LayerNorm<T> make_layer_norm(std::size_t channels) {
  return LayerNorm<T>{Tensor<T>::ones({channels}), Tensor<T>::zeros({channels})};
}

}  // namespace seemore
