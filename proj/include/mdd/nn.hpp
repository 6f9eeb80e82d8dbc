// Copyright (c) 2026 MDD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <vector>

#include "mdd/common.hpp"

namespace mdd {
namespace nn {

// Channel-major feature map: data(c, r * cols + w). rows/cols are the
// spatial extent, every channel row is one flattened image.
struct FeatureMap {
  int ch = 0, rows = 0, cols = 0;
  Mat data;

  FeatureMap() = default;
  FeatureMap(int ch_, int rows_, int cols_)
      : ch(ch_), rows(rows_), cols(cols_), data(Mat::Zero(ch_, rows_ * cols_)) {}

  int spatial() const { return rows * cols; }
};

struct ParamRef {
  double* value = nullptr;
  double* grad = nullptr;
  Eigen::Index size = 0;
};

namespace detail {

inline void add_param(std::vector<ParamRef>& out, Mat& w, Mat& g) {
  out.push_back({w.data(), g.data(), w.size()});
}
inline void add_param(std::vector<ParamRef>& out, Vec& w, Vec& g) {
  out.push_back({w.data(), g.data(), w.size()});
}

}  // namespace detail

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline Mat silu(const Mat& x) {
  return (x.array() / (1.0 + (-x.array()).exp())).matrix();
}

// d(silu)/dx given the pre-activation input
inline Mat silu_grad(const Mat& x, const Mat& dout) {
  Eigen::ArrayXXd s = 1.0 / (1.0 + (-x.array()).exp());
  return (dout.array() * (s + x.array() * s * (1.0 - s))).matrix();
}

// ---------------------------------------------------------------------------
// im2col / col2im for 2-D convolution over channel-major feature maps.

inline void im2col(const Mat& in, int ch, int rows, int cols, int kh, int kw,
                   int stride, int pad_h, int pad_w, Mat& col) {
  int orows = (rows + 2 * pad_h - kh) / stride + 1;
  int ocols = (cols + 2 * pad_w - kw) / stride + 1;
  col.setZero(ch * kh * kw, orows * ocols);
  for (int c = 0; c < ch; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        int srow = (c * kh + ki) * kw + kj;
        for (int r = 0; r < orows; ++r) {
          int ir = r * stride + ki - pad_h;
          if (ir < 0 || ir >= rows) continue;
          if (stride == 1) {
            int cc0 = std::max(0, pad_w - kj);
            int cc1 = std::min(ocols, cols + pad_w - kj);
            if (cc1 <= cc0) continue;
            col.block(srow, r * ocols + cc0, 1, cc1 - cc0) =
                in.block(c, ir * cols + cc0 + kj - pad_w, 1, cc1 - cc0);
          } else {
            for (int cc = 0; cc < ocols; ++cc) {
              int ic = cc * stride + kj - pad_w;
              if (ic < 0 || ic >= cols) continue;
              col(srow, r * ocols + cc) = in(c, ir * cols + ic);
            }
          }
        }
      }
}

inline void col2im(const Mat& col, int ch, int rows, int cols, int kh, int kw,
                   int stride, int pad_h, int pad_w, Mat& out) {
  int orows = (rows + 2 * pad_h - kh) / stride + 1;
  int ocols = (cols + 2 * pad_w - kw) / stride + 1;
  out.setZero(ch, rows * cols);
  for (int c = 0; c < ch; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        int srow = (c * kh + ki) * kw + kj;
        for (int r = 0; r < orows; ++r) {
          int ir = r * stride + ki - pad_h;
          if (ir < 0 || ir >= rows) continue;
          if (stride == 1) {
            int cc0 = std::max(0, pad_w - kj);
            int cc1 = std::min(ocols, cols + pad_w - kj);
            if (cc1 <= cc0) continue;
            out.block(c, ir * cols + cc0 + kj - pad_w, 1, cc1 - cc0) +=
                col.block(srow, r * ocols + cc0, 1, cc1 - cc0);
          } else {
            for (int cc = 0; cc < ocols; ++cc) {
              int ic = cc * stride + kj - pad_w;
              if (ic < 0 || ic >= cols) continue;
              out(c, ir * cols + ic) += col(srow, r * ocols + cc);
            }
          }
        }
      }
}

// Same-padded 2-D convolution (odd kernels), stride 1 or 2.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int kh, int kw, int stride = 1)
      : in_ch_(in_ch), out_ch_(out_ch), kh_(kh), kw_(kw), stride_(stride) {
    if (kh % 2 == 0 || kw % 2 == 0)
      throw ConfigError("Conv2d expects odd kernel sizes");
    w_ = Mat::Zero(out_ch, in_ch * kh * kw);
    b_ = Vec::Zero(out_ch);
    gw_ = Mat::Zero(out_ch, in_ch * kh * kw);
    gb_ = Vec::Zero(out_ch);
  }

  void init(Rng& rng, bool zero = false) {
    if (zero) {
      w_.setZero();
      b_.setZero();
      return;
    }
    double std_dev = std::sqrt(1.0 / (in_ch_ * kh_ * kw_));
    for (Eigen::Index i = 0; i < w_.rows(); ++i)
      for (Eigen::Index j = 0; j < w_.cols(); ++j)
        w_(i, j) = std_dev * rng.normal();
    b_.setZero();
  }

  FeatureMap forward(const FeatureMap& in) {
    if (in.ch != in_ch_) throw ShapeError("Conv2d: channel mismatch");
    in_rows_ = in.rows;
    in_cols_ = in.cols;
    im2col(in.data, in_ch_, in.rows, in.cols, kh_, kw_, stride_, kh_ / 2,
           kw_ / 2, col_);
    FeatureMap out(out_ch_, (in.rows + 2 * (kh_ / 2) - kh_) / stride_ + 1,
                   (in.cols + 2 * (kw_ / 2) - kw_) / stride_ + 1);
    out.data.noalias() = w_ * col_;
    out.data.colwise() += b_;
    return out;
  }

  FeatureMap backward(const FeatureMap& dout) {
    gw_.noalias() += dout.data * col_.transpose();
    gb_.noalias() += dout.data.rowwise().sum();
    Mat dcol = w_.transpose() * dout.data;
    FeatureMap din(in_ch_, in_rows_, in_cols_);
    col2im(dcol, in_ch_, in_rows_, in_cols_, kh_, kw_, stride_, kh_ / 2,
           kw_ / 2, din.data);
    return din;
  }

  void collect_params(std::vector<ParamRef>& out) {
    detail::add_param(out, w_, gw_);
    detail::add_param(out, b_, gb_);
  }
  void zero_grad() {
    gw_.setZero();
    gb_.setZero();
  }
  void discard_cache() { col_.resize(0, 0); }

  Mat& weights() { return w_; }
  Vec& bias() { return b_; }
  int out_channels() const { return out_ch_; }

 private:
  int in_ch_ = 0, out_ch_ = 0, kh_ = 1, kw_ = 1, stride_ = 1;
  int in_rows_ = 0, in_cols_ = 0;
  Mat w_, gw_;
  Vec b_, gb_;
  Mat col_;
};

class Dense {
 public:
  Dense() = default;
  Dense(int in_dim, int out_dim) : in_dim_(in_dim), out_dim_(out_dim) {
    w_ = Mat::Zero(out_dim, in_dim);
    b_ = Vec::Zero(out_dim);
    gw_ = Mat::Zero(out_dim, in_dim);
    gb_ = Vec::Zero(out_dim);
  }

  void init(Rng& rng, bool zero = false) {
    if (zero) {
      w_.setZero();
      b_.setZero();
      return;
    }
    double std_dev = std::sqrt(1.0 / in_dim_);
    for (Eigen::Index i = 0; i < w_.rows(); ++i)
      for (Eigen::Index j = 0; j < w_.cols(); ++j)
        w_(i, j) = std_dev * rng.normal();
    b_.setZero();
  }

  Vec forward(const Vec& x) {
    if (x.size() != in_dim_) throw ShapeError("Dense: input size mismatch");
    x_ = x;
    return w_ * x + b_;
  }

  Vec backward(const Vec& dout) {
    gw_.noalias() += dout * x_.transpose();
    gb_ += dout;
    return w_.transpose() * dout;
  }

  void collect_params(std::vector<ParamRef>& out) {
    detail::add_param(out, w_, gw_);
    detail::add_param(out, b_, gb_);
  }
  void zero_grad() {
    gw_.setZero();
    gb_.setZero();
  }

  Mat& weights() { return w_; }
  Vec& bias() { return b_; }

 private:
  int in_dim_ = 0, out_dim_ = 0;
  Mat w_, gw_;
  Vec b_, gb_;
  Vec x_;
};

// Nearest-neighbour 2x upsampling.
inline FeatureMap upsample2x(const FeatureMap& in) {
  FeatureMap out(in.ch, in.rows * 2, in.cols * 2);
  for (int c = 0; c < in.ch; ++c)
    for (int r = 0; r < out.rows; ++r)
      for (int w = 0; w < out.cols; ++w)
        out.data(c, r * out.cols + w) =
            in.data(c, (r / 2) * in.cols + (w / 2));
  return out;
}

inline FeatureMap upsample2x_backward(const FeatureMap& dout, int in_rows,
                                      int in_cols) {
  FeatureMap din(dout.ch, in_rows, in_cols);
  for (int c = 0; c < dout.ch; ++c)
    for (int r = 0; r < dout.rows; ++r)
      for (int w = 0; w < dout.cols; ++w)
        din.data(c, (r / 2) * in_cols + (w / 2)) +=
            dout.data(c, r * dout.cols + w);
  return din;
}

// softmax cross-entropy; returns the loss, writes dlogits.
inline double softmax_cross_entropy(const Vec& logits, int label,
                                    Vec& dlogits) {
  if (label < 0 || label >= logits.size())
    throw RangeError("cross entropy label out of range");
  double mx = logits.maxCoeff();
  Vec e = (logits.array() - mx).exp();
  double z = e.sum();
  dlogits = e / z;
  double loss = -std::log(dlogits[label] + 1e-300);
  dlogits[label] -= 1.0;
  return loss;
}

// Sinusoidal timestep embedding (half sine, half cosine).
inline Vec sinusoidal_embedding(double t, int dim) {
  int half = dim / 2;
  Vec e(dim);
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * i / half);
    e[i] = std::sin(t * freq);
    e[half + i] = std::cos(t * freq);
  }
  if (dim % 2) e[dim - 1] = 0.0;
  return e;
}

class Adam {
 public:
  explicit Adam(double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<ParamRef>& params) {
    if (m_.empty()) {
      size_t total = 0;
      for (const auto& p : params) total += p.size;
      m_.assign(total, 0.0);
      v_.assign(total, 0.0);
    }
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    size_t off = 0;
    for (const auto& p : params) {
      for (Eigen::Index i = 0; i < p.size; ++i) {
        double g = p.grad[i];
        m_[off + i] = beta1_ * m_[off + i] + (1 - beta1_) * g;
        v_[off + i] = beta2_ * v_[off + i] + (1 - beta2_) * g * g;
        double mhat = m_[off + i] / bc1;
        double vhat = v_[off + i] / bc2;
        p.value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
      off += p.size;
    }
  }

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  int64_t steps() const { return t_; }

  // optimizer state round-trips through checkpoints
  std::vector<double>& moment1() { return m_; }
  std::vector<double>& moment2() { return v_; }
  void set_steps(int64_t t) { t_ = t; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<double> m_, v_;
};

inline size_t param_count(const std::vector<ParamRef>& params) {
  size_t n = 0;
  for (const auto& p : params) n += p.size;
  return n;
}

inline std::vector<double> dump_params(const std::vector<ParamRef>& params) {
  std::vector<double> out;
  out.reserve(param_count(params));
  for (const auto& p : params)
    out.insert(out.end(), p.value, p.value + p.size);
  return out;
}

inline void load_params(const std::vector<ParamRef>& params,
                        const std::vector<double>& blob) {
  if (blob.size() != param_count(params))
    throw ConfigError("parameter blob size mismatch: expected " +
                      std::to_string(param_count(params)) + ", got " +
                      std::to_string(blob.size()));
  size_t off = 0;
  for (const auto& p : params) {
    std::copy(blob.begin() + off, blob.begin() + off + p.size, p.value);
    off += p.size;
  }
}

inline void zero_params_grad(const std::vector<ParamRef>& params) {
  for (const auto& p : params) std::fill(p.grad, p.grad + p.size, 0.0);
}

}  // namespace nn
}  // namespace mdd
