#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include <unsupported/Eigen/SpecialFunctions>

#include "m3l/nn/parameter.hpp"

// Layers follow one convention: forward() is const and optionally fills a Cache;
// backward() consumes that cache, accumulates parameter gradients and returns the
// gradient with respect to the layer input. Activations are row-major matrices with
// one row per token (or pixel) and one column per feature.

namespace m3l::nn {

template <typename S>
class Linear {
 public:
  struct Cache {
    Matrix<S> input;
  };

  Linear() = default;
  Linear(Index in, Index out) : weight_(in, out), bias_(1, out) {}

  void init(Rng& rng, double std = 0.02) {
    init_truncated_normal(weight_, rng, std);
    bias_.value.setZero();
  }
  void zero_init() {
    weight_.value.setZero();
    bias_.value.setZero();
  }

  Index in_features() const { return weight_.value.rows(); }
  Index out_features() const { return weight_.value.cols(); }

  Matrix<S> forward(const Matrix<S>& x, Cache* cache = nullptr) const {
    if (x.cols() != in_features()) {
      throw std::invalid_argument("linear: expected " + std::to_string(in_features()) +
                                  " input features, got " + std::to_string(x.cols()));
    }
    if (cache) cache->input = x;
    Matrix<S> y(x.rows(), out_features());
    y.noalias() = x * weight_.value;
    y.rowwise() += bias_.value.row(0);
    return y;
  }

  Matrix<S> backward(const Matrix<S>& dy, const Cache& cache) {
    weight_.grad.noalias() += cache.input.transpose() * dy;
    bias_.grad.row(0) += dy.colwise().sum();
    Matrix<S> dx(dy.rows(), in_features());
    dx.noalias() = dy * weight_.value.transpose();
    return dx;
  }

  template <typename V>
  void visit(V&& v, const std::string& prefix) {
    v(prefix + "weight", weight_);
    v(prefix + "bias", bias_);
  }

  Parameter<S>& weight() { return weight_; }
  Parameter<S>& bias() { return bias_; }
  const Parameter<S>& weight() const { return weight_; }

 private:
  Parameter<S> weight_;
  Parameter<S> bias_;
};

/// Row-wise layer normalisation with learned affine parameters.
template <typename S>
class LayerNorm {
 public:
  struct Cache {
    Matrix<S> normalized;
    Eigen::Matrix<S, Eigen::Dynamic, 1> rstd;
  };

  LayerNorm() = default;
  explicit LayerNorm(Index dim, double eps = 1e-6) : gamma_(1, dim), beta_(1, dim), eps_(eps) {
    gamma_.value.setOnes();
  }

  Matrix<S> forward(const Matrix<S>& x, Cache* cache = nullptr) const {
    const Index n = x.rows();
    const Index d = x.cols();
    Matrix<S> xhat(n, d);
    Eigen::Matrix<S, Eigen::Dynamic, 1> rstd(n);
    for (Index i = 0; i < n; ++i) {
      const S mean = x.row(i).mean();
      const auto centered = (x.row(i).array() - mean).matrix();
      const S var = centered.squaredNorm() / static_cast<S>(d);
      rstd(i) = S{1} / std::sqrt(var + static_cast<S>(eps_));
      xhat.row(i) = centered * rstd(i);
    }
    Matrix<S> y = (xhat.array().rowwise() * gamma_.value.row(0).array()).matrix();
    y.rowwise() += beta_.value.row(0);
    if (cache) {
      cache->normalized = std::move(xhat);
      cache->rstd = std::move(rstd);
    }
    return y;
  }

  Matrix<S> backward(const Matrix<S>& dy, const Cache& cache) {
    const Matrix<S>& xhat = cache.normalized;
    gamma_.grad.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    beta_.grad.row(0) += dy.colwise().sum();
    const Matrix<S> dxhat = (dy.array().rowwise() * gamma_.value.row(0).array()).matrix();
    Matrix<S> dx(dy.rows(), dy.cols());
    const S inv_d = S{1} / static_cast<S>(dy.cols());
    for (Index i = 0; i < dy.rows(); ++i) {
      const S mean_dxhat = dxhat.row(i).sum() * inv_d;
      const S mean_dxhat_xhat = dxhat.row(i).dot(xhat.row(i)) * inv_d;
      dx.row(i) = cache.rstd(i) *
                  (dxhat.row(i).array() - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat).matrix();
    }
    return dx;
  }

  template <typename V>
  void visit(V&& v, const std::string& prefix) {
    v(prefix + "gamma", gamma_);
    v(prefix + "beta", beta_);
  }

 private:
  Parameter<S> gamma_;
  Parameter<S> beta_;
  double eps_ = 1e-6;
};

/// Exact (erf-based) GELU.
template <typename S>
struct Gelu {
  struct Cache {
    Matrix<S> input;
  };

  static Matrix<S> forward(const Matrix<S>& x, Cache* cache = nullptr) {
    if (cache) cache->input = x;
    const S inv_sqrt2 = static_cast<S>(std::numbers::sqrt2 / 2);
    return (static_cast<S>(0.5) * x.array() * (S{1} + (x.array() * inv_sqrt2).erf())).matrix();
  }

  static Matrix<S> backward(const Matrix<S>& dy, const Cache& cache) {
    const S inv_sqrt2 = static_cast<S>(std::numbers::sqrt2 / 2);
    const S inv_sqrt2pi = static_cast<S>(std::numbers::inv_sqrtpi * std::numbers::sqrt2 / 2);
    const auto x = cache.input.array();
    return (dy.array() * (static_cast<S>(0.5) * (S{1} + (x * inv_sqrt2).erf()) +
                          x * inv_sqrt2pi * (static_cast<S>(-0.5) * x.square()).exp()))
        .matrix();
  }
};

/// Geometry of a batch of feature maps stored as (batch*height*width) x channels.
struct MapShape {
  Index batch = 0;
  Index height = 0;
  Index width = 0;
  Index rows() const { return batch * height * width; }
};

/// 2D convolution over channels-last feature maps, lowered to im2col + GEMM.
template <typename S>
class Conv2d {
 public:
  struct Cache {
    Matrix<S> columns;
    MapShape in_shape;
  };

  Conv2d() = default;
  Conv2d(Index in_channels, Index out_channels, Index kernel, Index stride, Index padding = 0)
      : weight_(kernel * kernel * in_channels, out_channels),
        bias_(1, out_channels),
        in_channels_(in_channels),
        kernel_(kernel),
        stride_(stride),
        padding_(padding) {}

  void init(Rng& rng, double std = 0.02) {
    init_truncated_normal(weight_, rng, std);
    bias_.value.setZero();
  }

  Index in_channels() const { return in_channels_; }
  Index out_channels() const { return weight_.value.cols(); }
  Index fan_in() const { return weight_.value.rows(); }

  MapShape output_shape(const MapShape& in) const {
    const Index span_h = in.height + 2 * padding_ - kernel_;
    const Index span_w = in.width + 2 * padding_ - kernel_;
    if (span_h < 0 || span_w < 0 || span_h % stride_ != 0 || span_w % stride_ != 0) {
      throw std::invalid_argument("conv: input " + std::to_string(in.height) + "x" +
                                  std::to_string(in.width) + " is not tiled by kernel " +
                                  std::to_string(kernel_) + " / stride " + std::to_string(stride_));
    }
    return {in.batch, span_h / stride_ + 1, span_w / stride_ + 1};
  }

  Matrix<S> forward(const Matrix<S>& x, const MapShape& in, Cache* cache = nullptr) const {
    if (x.rows() != in.rows() || x.cols() != in_channels_) {
      throw std::invalid_argument("conv: expected " + std::to_string(in.rows()) + "x" +
                                  std::to_string(in_channels_) + " input, got " +
                                  std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
    }
    const MapShape out = output_shape(in);
    Matrix<S> columns = im2col(x, in, out);
    Matrix<S> y(out.rows(), out_channels());
    y.noalias() = columns * weight_.value;
    y.rowwise() += bias_.value.row(0);
    if (cache) {
      cache->columns = std::move(columns);
      cache->in_shape = in;
    }
    return y;
  }

  /// Parameter gradients only, for a first layer whose input needs no gradient.
  void accumulate(const Matrix<S>& dy, const Cache& cache) {
    weight_.grad.noalias() += cache.columns.transpose() * dy;
    bias_.grad.row(0) += dy.colwise().sum();
  }

  Matrix<S> backward(const Matrix<S>& dy, const Cache& cache) {
    accumulate(dy, cache);
    Matrix<S> dcols(dy.rows(), weight_.value.rows());
    dcols.noalias() = dy * weight_.value.transpose();
    return col2im(dcols, cache.in_shape, output_shape(cache.in_shape));
  }

  template <typename V>
  void visit(V&& v, const std::string& prefix) {
    v(prefix + "weight", weight_);
    v(prefix + "bias", bias_);
  }

 private:
  template <typename F>
  void for_each_tap(const MapShape& in, const MapShape& out, F&& f) const {
    for (Index b = 0; b < out.batch; ++b) {
      for (Index oy = 0; oy < out.height; ++oy) {
        for (Index ox = 0; ox < out.width; ++ox) {
          const Index row = (b * out.height + oy) * out.width + ox;
          for (Index ky = 0; ky < kernel_; ++ky) {
            const Index iy = oy * stride_ - padding_ + ky;
            if (iy < 0 || iy >= in.height) continue;
            for (Index kx = 0; kx < kernel_; ++kx) {
              const Index ix = ox * stride_ - padding_ + kx;
              if (ix < 0 || ix >= in.width) continue;
              f(row, (ky * kernel_ + kx) * in_channels_, (b * in.height + iy) * in.width + ix);
            }
          }
        }
      }
    }
  }

  Matrix<S> im2col(const Matrix<S>& x, const MapShape& in, const MapShape& out) const {
    Matrix<S> cols = Matrix<S>::Zero(out.rows(), weight_.value.rows());
    for_each_tap(in, out, [&](Index row, Index col, Index src) {
      cols.row(row).segment(col, in_channels_) = x.row(src);
    });
    return cols;
  }

  Matrix<S> col2im(const Matrix<S>& dcols, const MapShape& in, const MapShape& out) const {
    Matrix<S> dx = Matrix<S>::Zero(in.rows(), in_channels_);
    for_each_tap(in, out, [&](Index row, Index col, Index dst) {
      dx.row(dst) += dcols.row(row).segment(col, in_channels_);
    });
    return dx;
  }

  Parameter<S> weight_;
  Parameter<S> bias_;
  Index in_channels_ = 0;
  Index kernel_ = 1;
  Index stride_ = 1;
  Index padding_ = 0;
};

}  // namespace m3l::nn
