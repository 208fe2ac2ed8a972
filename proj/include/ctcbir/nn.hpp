// Copyright (c) 2026, The ctcbir Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

/**
 * @file nn.hpp
 * @brief Minimal feed-forward layers with explicit backward passes.
 *
 * Parameters of a whole network live in one flat vector; each layer owns a
 * contiguous slice of it at a fixed offset. That makes the optimizer, the
 * checkpoint format, and finite-difference checks operate on a plain span.
 *
 * Activations are (channels x height*width) row-major matrices, so a
 * channel-major Image maps onto one without copying. Convolutions take one
 * image at a time. Vector layers take (features x batch) matrices, one
 * sample per column; BatchNorm is the only layer that mixes columns.
 */

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ctcbir/core/array.hpp"
#include "ctcbir/core/error.hpp"
#include "ctcbir/core/rng.hpp"

namespace ctcbir::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct Tensor {
  Matrix<T> data;  // channels x (height * width)
  int height = 1;
  int width = 1;

  int channels() const { return static_cast<int>(data.rows()); }

  static Tensor from_image(const Image<T>& img) {
    Tensor t;
    t.height = img.height;
    t.width = img.width;
    t.data = Eigen::Map<const Matrix<T>>(img.data.data(), img.channels, static_cast<Eigen::Index>(img.plane()));
    return t;
  }
  static Tensor from_vector(const Vector<T>& v) {
    Tensor t;
    t.data = v;
    return t;
  }
  /// Columns are samples.
  static Tensor from_columns(const Matrix<T>& m) {
    Tensor t;
    t.data = m;
    t.width = static_cast<int>(m.cols());
    return t;
  }
  Vector<T> as_vector() const { return Eigen::Map<const Vector<T>>(data.data(), data.size()); }
};

struct Shape {
  int channels = 0;
  int height = 1;
  int width = 1;
};

/// Per-layer scratch kept between forward and backward.
template <typename T>
struct LayerCache {
  Matrix<T> a;
  Vector<T> v;
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string name() const = 0;
  virtual std::size_t param_count() const { return 0; }
  virtual Shape output_shape(const Shape& in) const { return in; }
  virtual void init(std::span<T> /*params*/, Rng& /*rng*/) const {}
  virtual void forward(const T* params, const Tensor<T>& in, Tensor<T>& out, LayerCache<T>& cache) const = 0;
  /// Accumulates parameter gradients into `grad` and writes the input gradient to `din`.
  virtual void backward(const T* params, const Tensor<T>& in, const Tensor<T>& out, const Tensor<T>& dout,
                        Tensor<T>& din, T* grad, const LayerCache<T>& cache) const = 0;
};

namespace detail {

/// He-uniform weights, zero bias.
template <typename T>
void he_uniform(std::span<T> w, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace detail

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad)
      : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(pad) {
    if (in_ <= 0 || out_ <= 0 || k_ <= 0 || stride_ <= 0 || pad_ < 0) throw InvalidArgument("Conv2d: bad geometry");
  }

  std::string name() const override {
    return "conv" + std::to_string(k_) + "x" + std::to_string(k_) + "s" + std::to_string(stride_) + "(" +
           std::to_string(in_) + "->" + std::to_string(out_) + ")";
  }
  std::size_t param_count() const override { return static_cast<std::size_t>(out_) * (patch() + 1); }
  Shape output_shape(const Shape& in) const override {
    if (in.channels != in_) throw InvalidArgument(name() + ": channel mismatch");
    const Shape s{out_, (in.height + 2 * pad_ - k_) / stride_ + 1, (in.width + 2 * pad_ - k_) / stride_ + 1};
    if (s.height <= 0 || s.width <= 0) throw InvalidArgument(name() + ": input too small");
    return s;
  }
  void init(std::span<T> params, Rng& rng) const override {
    detail::he_uniform(params.first(static_cast<std::size_t>(out_) * patch()), patch(), rng);
    for (auto& b : params.subspan(static_cast<std::size_t>(out_) * patch())) b = T(0);
  }

  void forward(const T* params, const Tensor<T>& in, Tensor<T>& out, LayerCache<T>& cache) const override {
    const auto s = output_shape({in.channels(), in.height, in.width});
    im2col(in, s, cache.a);
    out.height = s.height;
    out.width = s.width;
    out.data.noalias() = weights(params) * cache.a;
    out.data.colwise() += bias(params);
  }

  void backward(const T* params, const Tensor<T>& in, const Tensor<T>& out, const Tensor<T>& dout, Tensor<T>& din,
                T* grad, const LayerCache<T>& cache) const override {
    Eigen::Map<Matrix<T>> dw(grad, out_, patch());
    Eigen::Map<Vector<T>> db(grad + static_cast<std::ptrdiff_t>(out_) * patch(), out_);
    dw.noalias() += dout.data * cache.a.transpose();
    db += dout.data.rowwise().sum();
    const Matrix<T> dcol = weights(params).transpose() * dout.data;
    din.height = in.height;
    din.width = in.width;
    din.data.setZero(in_, static_cast<Eigen::Index>(in.height) * in.width);
    col2im(dcol, {out_, out.height, out.width}, din);
  }

 private:
  int patch() const { return in_ * k_ * k_; }
  Eigen::Map<const Matrix<T>> weights(const T* p) const { return {p, out_, patch()}; }
  Eigen::Map<const Vector<T>> bias(const T* p) const { return {p + static_cast<std::ptrdiff_t>(out_) * patch(), out_}; }

  void im2col(const Tensor<T>& in, const Shape& s, Matrix<T>& col) const {
    col.setZero(patch(), static_cast<Eigen::Index>(s.height) * s.width);
    for (int c = 0; c < in_; ++c)
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          const int row = (c * k_ + ky) * k_ + kx;
          for (int oy = 0; oy < s.height; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= in.height) continue;
            for (int ox = 0; ox < s.width; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= in.width) continue;
              col(row, oy * s.width + ox) = in.data(c, iy * in.width + ix);
            }
          }
        }
  }

  void col2im(const Matrix<T>& col, const Shape& s, Tensor<T>& din) const {
    for (int c = 0; c < in_; ++c)
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          const int row = (c * k_ + ky) * k_ + kx;
          for (int oy = 0; oy < s.height; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= din.height) continue;
            for (int ox = 0; ox < s.width; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= din.width) continue;
              din.data(c, iy * din.width + ix) += col(row, oy * s.width + ox);
            }
          }
        }
  }

  int in_, out_, k_, stride_, pad_;
};

template <typename T>
class Linear final : public Layer<T> {
 public:
  Linear(int in_features, int out_features) : in_(in_features), out_(out_features) {
    if (in_ <= 0 || out_ <= 0) throw InvalidArgument("Linear: bad size");
  }
  std::string name() const override { return "linear(" + std::to_string(in_) + "->" + std::to_string(out_) + ")"; }
  std::size_t param_count() const override { return static_cast<std::size_t>(out_) * (in_ + 1); }
  Shape output_shape(const Shape& in) const override {
    if (in.channels * in.height * in.width != in_) throw InvalidArgument(name() + ": input size mismatch");
    return {out_, 1, 1};
  }
  void init(std::span<T> params, Rng& rng) const override {
    detail::he_uniform(params.first(static_cast<std::size_t>(out_) * in_), in_, rng);
    for (auto& b : params.subspan(static_cast<std::size_t>(out_) * in_)) b = T(0);
  }
  void forward(const T* params, const Tensor<T>& in, Tensor<T>& out, LayerCache<T>&) const override {
    check(in);
    out.height = 1;
    out.width = static_cast<int>(in.data.cols());
    out.data.noalias() = weights(params) * in.data;
    out.data.colwise() += bias(params);
  }
  void backward(const T* params, const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& dout, Tensor<T>& din,
                T* grad, const LayerCache<T>&) const override {
    Eigen::Map<Matrix<T>> dw(grad, out_, in_);
    Eigen::Map<Vector<T>> db(grad + static_cast<std::ptrdiff_t>(out_) * in_, out_);
    dw.noalias() += dout.data * in.data.transpose();
    db += dout.data.rowwise().sum();
    din.height = in.height;
    din.width = in.width;
    din.data.noalias() = weights(params).transpose() * dout.data;
  }

 private:
  Eigen::Map<const Matrix<T>> weights(const T* p) const { return {p, out_, in_}; }
  Eigen::Map<const Vector<T>> bias(const T* p) const { return {p + static_cast<std::ptrdiff_t>(out_) * in_, out_}; }
  void check(const Tensor<T>& in) const {
    if (in.data.rows() != in_) throw InvalidArgument(name() + ": expects " + std::to_string(in_) + " features");
  }
  int in_, out_;
};

/// Per-sample normalization over the features of each column, with learned scale and shift.
template <typename T>
class LayerNorm final : public Layer<T> {
 public:
  explicit LayerNorm(int features, double eps = 1e-5) : n_(features), eps_(eps) {}
  std::string name() const override { return "layernorm(" + std::to_string(n_) + ")"; }
  std::size_t param_count() const override { return 2 * static_cast<std::size_t>(n_); }
  Shape output_shape(const Shape& in) const override {
    if (in.channels != n_ || in.height != 1 || in.width != 1) throw InvalidArgument(name() + ": expects a vector");
    return in;
  }
  void init(std::span<T> params, Rng&) const override {
    for (int i = 0; i < n_; ++i) {
      params[i] = T(1);
      params[n_ + i] = T(0);
    }
  }
  void forward(const T* params, const Tensor<T>& in, Tensor<T>& out, LayerCache<T>& cache) const override {
    if (in.data.rows() != n_) throw InvalidArgument(name() + ": feature count mismatch");
    const Eigen::Index b = in.data.cols();
    cache.a.resize(n_, b);
    cache.v.resize(b);
    for (Eigen::Index j = 0; j < b; ++j) {
      const T mean = in.data.col(j).mean();
      const T var = (in.data.col(j).array() - mean).square().sum() / T(n_);
      cache.v[j] = T(1) / std::sqrt(var + T(eps_));
      cache.a.col(j) = (in.data.col(j).array() - mean) * cache.v[j];
    }
    Eigen::Map<const Vector<T>> gamma(params, n_), beta(params + n_, n_);
    out.height = 1;
    out.width = static_cast<int>(b);
    out.data = (cache.a.array().colwise() * gamma.array()).colwise() + beta.array();
  }
  void backward(const T* params, const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& dout, Tensor<T>& din,
                T* grad, const LayerCache<T>& cache) const override {
    Eigen::Map<const Vector<T>> gamma(params, n_);
    Eigen::Map<Vector<T>> dgamma(grad, n_), dbeta(grad + n_, n_);
    dgamma += (dout.data.array() * cache.a.array()).rowwise().sum().matrix();
    dbeta += dout.data.rowwise().sum();
    din.height = in.height;
    din.width = in.width;
    din.data.resize(n_, dout.data.cols());
    for (Eigen::Index j = 0; j < dout.data.cols(); ++j) {
      const Vector<T> dxhat = (dout.data.col(j).array() * gamma.array()).matrix();
      const T m1 = dxhat.mean();
      const T m2 = (dxhat.array() * cache.a.col(j).array()).mean();
      din.data.col(j) = cache.v[j] * (dxhat.array() - m1 - cache.a.col(j).array() * m2);
    }
  }

 private:
  int n_;
  double eps_;
};

/// Normalization of each feature over the batch (columns), with learned
/// scale and shift. Always uses the statistics of the current batch.
template <typename T>
class BatchNorm final : public Layer<T> {
 public:
  explicit BatchNorm(int features, double eps = 1e-5) : n_(features), eps_(eps) {}
  std::string name() const override { return "batchnorm(" + std::to_string(n_) + ")"; }
  std::size_t param_count() const override { return 2 * static_cast<std::size_t>(n_); }
  Shape output_shape(const Shape& in) const override {
    if (in.channels != n_ || in.height != 1 || in.width != 1) throw InvalidArgument(name() + ": expects a vector");
    return in;
  }
  void init(std::span<T> params, Rng&) const override {
    for (int i = 0; i < n_; ++i) {
      params[i] = T(1);
      params[n_ + i] = T(0);
    }
  }
  void forward(const T* params, const Tensor<T>& in, Tensor<T>& out, LayerCache<T>& cache) const override {
    if (in.data.rows() != n_) throw InvalidArgument(name() + ": feature count mismatch");
    const Eigen::Index b = in.data.cols();
    if (b < 2) throw InvalidArgument(name() + ": needs a batch of at least 2 samples");
    const Vector<T> mean = in.data.rowwise().mean();
    cache.a = in.data.colwise() - mean;
    const Vector<T> var = cache.a.array().square().rowwise().sum() / T(static_cast<double>(b));
    cache.v = (var.array() + T(eps_)).rsqrt();
    cache.a.array().colwise() *= cache.v.array();
    Eigen::Map<const Vector<T>> gamma(params, n_), beta(params + n_, n_);
    out.height = 1;
    out.width = static_cast<int>(b);
    out.data = (cache.a.array().colwise() * gamma.array()).colwise() + beta.array();
  }
  void backward(const T* params, const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& dout, Tensor<T>& din,
                T* grad, const LayerCache<T>& cache) const override {
    Eigen::Map<const Vector<T>> gamma(params, n_);
    Eigen::Map<Vector<T>> dgamma(grad, n_), dbeta(grad + n_, n_);
    dgamma += (dout.data.array() * cache.a.array()).rowwise().sum().matrix();
    dbeta += dout.data.rowwise().sum();
    const Matrix<T> dxhat = dout.data.array().colwise() * gamma.array();
    const Vector<T> m1 = dxhat.rowwise().mean();
    const Vector<T> m2 = (dxhat.array() * cache.a.array()).rowwise().mean();
    din.height = in.height;
    din.width = in.width;
    din.data = ((dxhat.colwise() - m1).array() - cache.a.array().colwise() * m2.array()).colwise() * cache.v.array();
  }

 private:
  int n_;
  double eps_;
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  std::string name() const override { return "relu"; }
  void forward(const T*, const Tensor<T>& in, Tensor<T>& out, LayerCache<T>&) const override {
    out.height = in.height;
    out.width = in.width;
    out.data = in.data.cwiseMax(T(0));
  }
  void backward(const T*, const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& dout, Tensor<T>& din, T*,
                const LayerCache<T>&) const override {
    din.height = in.height;
    din.width = in.width;
    din.data = (in.data.array() > T(0)).select(dout.data, T(0));
  }
};

/// Mean over spatial positions: (C x HW) -> (C x 1).
template <typename T>
class GlobalAvgPool final : public Layer<T> {
 public:
  std::string name() const override { return "global_avg_pool"; }
  Shape output_shape(const Shape& in) const override { return {in.channels, 1, 1}; }
  void forward(const T*, const Tensor<T>& in, Tensor<T>& out, LayerCache<T>&) const override {
    out.height = out.width = 1;
    out.data = in.data.rowwise().mean();
  }
  void backward(const T*, const Tensor<T>& in, const Tensor<T>&, const Tensor<T>& dout, Tensor<T>& din, T*,
                const LayerCache<T>&) const override {
    const auto n = static_cast<Eigen::Index>(in.height) * in.width;
    din.height = in.height;
    din.width = in.width;
    din.data = (dout.data / T(static_cast<double>(n))).replicate(1, n);
  }
};

/// Activations and caches of one forward pass, consumed by backward.
template <typename T>
struct Trace {
  std::vector<Tensor<T>> acts;  // acts[0] is the input, acts[i+1] the output of layer i
  std::vector<LayerCache<T>> caches;
};

template <typename T>
class Sequential {
 public:
  Sequential() = default;
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  Sequential& add(std::unique_ptr<Layer<T>> layer) {
    offsets_.push_back(param_count_);
    param_count_ += layer->param_count();
    layers_.push_back(std::move(layer));
    return *this;
  }
  template <typename L, typename... Args>
  Sequential& emplace(Args&&... args) {
    return add(std::make_unique<L>(std::forward<Args>(args)...));
  }

  std::size_t param_count() const noexcept { return param_count_; }
  std::size_t size() const noexcept { return layers_.size(); }
  bool empty() const noexcept { return layers_.empty(); }
  const Layer<T>& layer(std::size_t i) const { return *layers_[i]; }

  Shape output_shape(Shape s) const {
    for (const auto& l : layers_) s = l->output_shape(s);
    return s;
  }

  void init(std::span<T> params, Rng& rng) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i]->init(params.subspan(offsets_[i], layers_[i]->param_count()), rng);
  }

  /// `params` covers this network only. Pass a trace to enable backward.
  Tensor<T> forward(const T* params, Tensor<T> in, Trace<T>* trace = nullptr) const {
    if (trace) {
      trace->acts.assign(1, std::move(in));
      trace->caches.assign(layers_.size(), {});
      for (std::size_t i = 0; i < layers_.size(); ++i) {
        Tensor<T> out;
        layers_[i]->forward(params + offsets_[i], trace->acts[i], out, trace->caches[i]);
        trace->acts.push_back(std::move(out));
      }
      return trace->acts.back();
    }
    LayerCache<T> scratch;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      Tensor<T> out;
      layers_[i]->forward(params + offsets_[i], in, out, scratch);
      in = std::move(out);
    }
    return in;
  }

  /// Backpropagates `dout` through a recorded trace; returns the input gradient.
  Tensor<T> backward(const T* params, const Trace<T>& trace, Tensor<T> dout, T* grad) const {
    for (std::size_t i = layers_.size(); i-- > 0;) {
      Tensor<T> din;
      layers_[i]->backward(params + offsets_[i], trace.acts[i], trace.acts[i + 1], dout, din, grad + offsets_[i],
                           trace.caches[i]);
      dout = std::move(din);
    }
    return dout;
  }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  std::vector<std::size_t> offsets_;
  std::size_t param_count_ = 0;
};

}  // namespace ctcbir::nn
