#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "psnet/common.hpp"
#include "psnet/rng.hpp"
#include "psnet/tensor.hpp"

namespace psnet {

enum class NetMode { train, infer };

template <class T>
using MatMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// Named view of one parameter tensor and its gradient buffer.
template <class T>
struct ParamRef {
  std::string name;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;
  bool trainable = true;
  bool l2 = false;  // subject to kernel l2 regularization
};

// ---------------------------------------------------------------------------
// Convolution geometry ('same' padding: out = ceil(in / stride), with the
// extra padding voxel on the high side when the total is odd)

struct ConvGeom {
  std::array<int, 3> in{0, 0, 0};
  std::array<int, 3> out{0, 0, 0};
  std::array<int, 3> kernel{0, 0, 0};
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> pad_lo{0, 0, 0};

  static ConvGeom same(const std::array<int, 3>& in,
                       const std::array<int, 3>& kernel,
                       const std::array<int, 3>& stride) {
    ConvGeom g;
    g.in = in;
    g.kernel = kernel;
    g.stride = stride;
    for (int d = 0; d < 3; ++d) {
      g.out[d] = (in[d] + stride[d] - 1) / stride[d];
      int pad_total =
          std::max((g.out[d] - 1) * stride[d] + kernel[d] - in[d], 0);
      g.pad_lo[d] = pad_total / 2;
    }
    return g;
  }

  size_t patches() const {
    return static_cast<size_t>(out[0]) * out[1] * out[2];
  }
  size_t kernel_size() const {
    return static_cast<size_t>(kernel[0]) * kernel[1] * kernel[2];
  }
};

namespace conv_detail {

/// Unfold one sample (C, X, Y, Z) into (C*K, P). Row (c*K + k) holds the
/// value under kernel offset k for every output position.
template <class T>
void im2col(const T* src, int channels, const ConvGeom& g, T* col) {
  const int K = static_cast<int>(g.kernel_size());
  const size_t P = g.patches();
  const size_t in_yz = static_cast<size_t>(g.in[1]) * g.in[2];
  const size_t in_z = g.in[2];
#pragma omp parallel for schedule(static) collapse(2)
  for (int c = 0; c < channels; ++c) {
    for (int k = 0; k < K; ++k) {
      const int dx = k / (g.kernel[1] * g.kernel[2]);
      const int dy = (k / g.kernel[2]) % g.kernel[1];
      const int dz = k % g.kernel[2];
      const T* chan = src + static_cast<size_t>(c) * g.in[0] * in_yz;
      T* row = col + (static_cast<size_t>(c) * K + k) * P;
      size_t p = 0;
      for (int ox = 0; ox < g.out[0]; ++ox) {
        const int x = ox * g.stride[0] - g.pad_lo[0] + dx;
        const bool x_ok = x >= 0 && x < g.in[0];
        for (int oy = 0; oy < g.out[1]; ++oy) {
          const int y = oy * g.stride[1] - g.pad_lo[1] + dy;
          const bool xy_ok = x_ok && y >= 0 && y < g.in[1];
          const T* base = chan + static_cast<size_t>(x) * in_yz +
                          static_cast<size_t>(y) * in_z;
          for (int oz = 0; oz < g.out[2]; ++oz, ++p) {
            const int z = oz * g.stride[2] - g.pad_lo[2] + dz;
            row[p] = (xy_ok && z >= 0 && z < g.in[2]) ? base[z] : T(0);
          }
        }
      }
    }
  }
}

/// Fold (C*K, P) back into (C, X, Y, Z), accumulating overlaps.
template <class T>
void col2im(const T* col, int channels, const ConvGeom& g, T* dst) {
  const int K = static_cast<int>(g.kernel_size());
  const size_t P = g.patches();
  const size_t in_yz = static_cast<size_t>(g.in[1]) * g.in[2];
  const size_t in_z = g.in[2];
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c) {
    T* chan = dst + static_cast<size_t>(c) * g.in[0] * in_yz;
    for (int k = 0; k < K; ++k) {
      const int dx = k / (g.kernel[1] * g.kernel[2]);
      const int dy = (k / g.kernel[2]) % g.kernel[1];
      const int dz = k % g.kernel[2];
      const T* row = col + (static_cast<size_t>(c) * K + k) * P;
      size_t p = 0;
      for (int ox = 0; ox < g.out[0]; ++ox) {
        const int x = ox * g.stride[0] - g.pad_lo[0] + dx;
        const bool x_ok = x >= 0 && x < g.in[0];
        for (int oy = 0; oy < g.out[1]; ++oy) {
          const int y = oy * g.stride[1] - g.pad_lo[1] + dy;
          const bool xy_ok = x_ok && y >= 0 && y < g.in[1];
          T* base = chan + static_cast<size_t>(x) * in_yz +
                    static_cast<size_t>(y) * in_z;
          for (int oz = 0; oz < g.out[2]; ++oz, ++p) {
            const int z = oz * g.stride[2] - g.pad_lo[2] + dz;
            if (xy_ok && z >= 0 && z < g.in[2]) base[z] += row[p];
          }
        }
      }
    }
  }
}

template <class T>
void he_normal_init(Tensor<T>& w, double fan_in, Rng& rng) {
  double std = std::sqrt(2.0 / fan_in);
  for (size_t i = 0; i < w.size(); ++i)
    w[i] = static_cast<T>(rng.normal(0.0, std));
}

template <class T>
void glorot_uniform_init(Tensor<T>& w, double fan_in, double fan_out,
                         Rng& rng) {
  double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (size_t i = 0; i < w.size(); ++i)
    w[i] = static_cast<T>(rng.uniform(-limit, limit));
}

}  // namespace conv_detail

// ---------------------------------------------------------------------------
// Conv3D

template <class T>
class Conv3D {
 public:
  Conv3D(std::string name, int in_ch, int out_ch, std::array<int, 3> kernel,
         std::array<int, 3> stride, bool l2)
      : name_(std::move(name)),
        in_ch_(in_ch),
        out_ch_(out_ch),
        kernel_(kernel),
        stride_(stride),
        l2_(l2) {
    int K = kernel[0] * kernel[1] * kernel[2];
    weight_.reshape({out_ch, in_ch * K});
    bias_.reshape({out_ch});
    weight_grad_.reshape({out_ch, in_ch * K});
    bias_grad_.reshape({out_ch});
  }

  void init(Rng& rng) {
    conv_detail::he_normal_init(weight_, in_ch_ * kernel_size(), rng);
    bias_.fill(T(0));
  }

  int kernel_size() const { return kernel_[0] * kernel_[1] * kernel_[2]; }
  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }
  const std::array<int, 3>& kernel() const { return kernel_; }
  const std::array<int, 3>& stride() const { return stride_; }

  size_t trainable_params() const { return weight_.size() + bias_.size(); }

  std::array<int, 3> output_shape(const std::array<int, 3>& in) const {
    return ConvGeom::same(in, kernel_, stride_).out;
  }

  /// x: (N, Cin, X, Y, Z) -> (N, Cout, ox, oy, oz)
  Tensor<T> forward(const Tensor<T>& x) {
    geom_ = ConvGeom::same({x.dim(2), x.dim(3), x.dim(4)}, kernel_, stride_);
    const int n = x.dim(0);
    const size_t P = geom_.patches();
    const int rows = in_ch_ * kernel_size();
    Tensor<T> out({n, out_ch_, geom_.out[0], geom_.out[1], geom_.out[2]});
    cols_.reshape({n, rows, static_cast<int>(P)});
    for (int s = 0; s < n; ++s) {
      T* col = cols_.data() + static_cast<size_t>(s) * rows * P;
      conv_detail::im2col(x.data() + static_cast<size_t>(s) * x.stride(0),
                          in_ch_, geom_, col);
      ConstMatMap<T> W(weight_.data(), out_ch_, rows);
      ConstMatMap<T> C(col, rows, static_cast<Eigen::Index>(P));
      MatMap<T> O(out.data() + static_cast<size_t>(s) * out.stride(0), out_ch_,
                  static_cast<Eigen::Index>(P));
      O.noalias() = W * C;
      for (int c = 0; c < out_ch_; ++c)
        O.row(c).array() += bias_[c];
    }
    return out;
  }

  /// grad_out: (N, Cout, ox, oy, oz) -> grad w.r.t. x; accumulates dW, db.
  Tensor<T> backward(const Tensor<T>& grad_out) {
    const int n = grad_out.dim(0);
    const size_t P = geom_.patches();
    const int rows = in_ch_ * kernel_size();
    Tensor<T> grad_in({n, in_ch_, geom_.in[0], geom_.in[1], geom_.in[2]});
    Tensor<T> dcol({rows, static_cast<int>(P)});
    for (int s = 0; s < n; ++s) {
      const T* col = cols_.data() + static_cast<size_t>(s) * rows * P;
      ConstMatMap<T> G(grad_out.data() + static_cast<size_t>(s) * grad_out.stride(0),
                       out_ch_, static_cast<Eigen::Index>(P));
      ConstMatMap<T> C(col, rows, static_cast<Eigen::Index>(P));
      MatMap<T> dW(weight_grad_.data(), out_ch_, rows);
      dW.noalias() += G * C.transpose();
      for (int c = 0; c < out_ch_; ++c)
        bias_grad_[c] += G.row(c).sum();
      ConstMatMap<T> W(weight_.data(), out_ch_, rows);
      MatMap<T> dC(dcol.data(), rows, static_cast<Eigen::Index>(P));
      dC.noalias() = W.transpose() * G;
      conv_detail::col2im(dcol.data(), in_ch_, geom_,
                          grad_in.data() + static_cast<size_t>(s) * grad_in.stride(0));
    }
    return grad_in;
  }

  void release_cache() { cols_ = Tensor<T>(); }

  std::vector<ParamRef<T>> params() {
    return {{name_ + ".weight", &weight_, &weight_grad_, true, l2_},
            {name_ + ".bias", &bias_, &bias_grad_, true, false}};
  }

  const std::string& name() const { return name_; }

 private:
  std::string name_;
  int in_ch_, out_ch_;
  std::array<int, 3> kernel_, stride_;
  bool l2_;
  Tensor<T> weight_, bias_, weight_grad_, bias_grad_;
  Tensor<T> cols_;
  ConvGeom geom_;
};

// ---------------------------------------------------------------------------
// ConvTranspose3D: exact adjoint of a 'same'-padded strided convolution from
// the target shape. Requires in_shape == ceil(target / stride), which the
// builder guarantees; output is exactly the target shape.

template <class T>
class ConvTranspose3D {
 public:
  ConvTranspose3D(std::string name, int in_ch, int out_ch,
                  std::array<int, 3> kernel, std::array<int, 3> stride,
                  bool l2)
      : name_(std::move(name)),
        in_ch_(in_ch),
        out_ch_(out_ch),
        kernel_(kernel),
        stride_(stride),
        l2_(l2) {
    int K = kernel[0] * kernel[1] * kernel[2];
    weight_.reshape({in_ch, out_ch * K});
    bias_.reshape({out_ch});
    weight_grad_.reshape({in_ch, out_ch * K});
    bias_grad_.reshape({out_ch});
  }

  void init(Rng& rng) {
    conv_detail::he_normal_init(weight_, in_ch_ * kernel_size(), rng);
    bias_.fill(T(0));
  }

  int kernel_size() const { return kernel_[0] * kernel_[1] * kernel_[2]; }
  size_t trainable_params() const { return weight_.size() + bias_.size(); }

  /// Validates that target is reachable from the input grid.
  void check_shapes(const std::array<int, 3>& in,
                    const std::array<int, 3>& target) const {
    for (int d = 0; d < 3; ++d) {
      int expect = (target[d] + stride_[d] - 1) / stride_[d];
      if (in[d] != expect)
        throw NumericError(name_ + ": dimension " + std::to_string(d) +
                           " cannot deconvolve " + std::to_string(in[d]) +
                           " to " + std::to_string(target[d]) + " at stride " +
                           std::to_string(stride_[d]));
    }
  }

  /// x: (N, Cin, ix, iy, iz) -> (N, Cout, tx, ty, tz)
  Tensor<T> forward(const Tensor<T>& x, const std::array<int, 3>& target) {
    check_shapes({x.dim(2), x.dim(3), x.dim(4)}, target);
    geom_ = ConvGeom::same(target, kernel_, stride_);
    const int n = x.dim(0);
    const size_t P = geom_.patches();
    const int rows = out_ch_ * kernel_size();
    Tensor<T> out({n, out_ch_, target[0], target[1], target[2]});
    in_cache_ = x;
    Tensor<T> colbuf({rows, static_cast<int>(P)});
    for (int s = 0; s < n; ++s) {
      ConstMatMap<T> W(weight_.data(), in_ch_, rows);
      ConstMatMap<T> X(x.data() + static_cast<size_t>(s) * x.stride(0), in_ch_,
                       static_cast<Eigen::Index>(P));
      MatMap<T> C(colbuf.data(), rows, static_cast<Eigen::Index>(P));
      C.noalias() = W.transpose() * X;
      T* dst = out.data() + static_cast<size_t>(s) * out.stride(0);
      conv_detail::col2im(colbuf.data(), out_ch_, geom_, dst);
      const size_t chan = static_cast<size_t>(target[0]) * target[1] * target[2];
      for (int c = 0; c < out_ch_; ++c) {
        T* d = dst + c * chan;
        for (size_t i = 0; i < chan; ++i) d[i] += bias_[c];
      }
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    const int n = grad_out.dim(0);
    const size_t P = geom_.patches();
    const int rows = out_ch_ * kernel_size();
    Tensor<T> grad_in(
        {n, in_ch_, in_cache_.dim(2), in_cache_.dim(3), in_cache_.dim(4)});
    Tensor<T> colbuf({rows, static_cast<int>(P)});
    const size_t chan =
        static_cast<size_t>(geom_.in[0]) * geom_.in[1] * geom_.in[2];
    for (int s = 0; s < n; ++s) {
      const T* g = grad_out.data() + static_cast<size_t>(s) * grad_out.stride(0);
      conv_detail::im2col(g, out_ch_, geom_, colbuf.data());
      ConstMatMap<T> Gcol(colbuf.data(), rows, static_cast<Eigen::Index>(P));
      ConstMatMap<T> X(in_cache_.data() + static_cast<size_t>(s) * in_cache_.stride(0),
                       in_ch_, static_cast<Eigen::Index>(P));
      MatMap<T> dW(weight_grad_.data(), in_ch_, rows);
      dW.noalias() += X * Gcol.transpose();
      ConstMatMap<T> W(weight_.data(), in_ch_, rows);
      MatMap<T> dX(grad_in.data() + static_cast<size_t>(s) * grad_in.stride(0),
                   in_ch_, static_cast<Eigen::Index>(P));
      dX.noalias() = W * Gcol;
      for (int c = 0; c < out_ch_; ++c) {
        const T* d = g + c * chan;
        T acc = T(0);
        for (size_t i = 0; i < chan; ++i) acc += d[i];
        bias_grad_[c] += acc;
      }
    }
    return grad_in;
  }

  void release_cache() { in_cache_ = Tensor<T>(); }

  std::vector<ParamRef<T>> params() {
    return {{name_ + ".weight", &weight_, &weight_grad_, true, l2_},
            {name_ + ".bias", &bias_, &bias_grad_, true, false}};
  }

  const std::string& name() const { return name_; }

 private:
  std::string name_;
  int in_ch_, out_ch_;
  std::array<int, 3> kernel_, stride_;
  bool l2_;
  Tensor<T> weight_, bias_, weight_grad_, bias_grad_;
  Tensor<T> in_cache_;
  ConvGeom geom_;
};

// ---------------------------------------------------------------------------
// BatchNorm3D (per-channel over batch and spatial dims)

template <class T>
class BatchNorm3D {
 public:
  BatchNorm3D(std::string name, int channels, double momentum = 0.99,
              double eps = 1e-3)
      : name_(std::move(name)),
        channels_(channels),
        momentum_(momentum),
        eps_(eps) {
    gamma_.reshape({channels});
    beta_.reshape({channels});
    gamma_grad_.reshape({channels});
    beta_grad_.reshape({channels});
    moving_mean_.reshape({channels});
    moving_var_.reshape({channels});
    gamma_.fill(T(1));
    moving_var_.fill(T(1));
  }

  size_t trainable_params() const { return 2 * channels_; }
  size_t non_trainable_params() const { return 2 * channels_; }

  Tensor<T> forward(const Tensor<T>& x, NetMode mode) {
    const int n = x.dim(0), c = x.dim(1);
    const size_t spatial = x.stride(1);
    const size_t m = static_cast<size_t>(n) * spatial;
    Tensor<T> out(x.dims());
    mode_ = mode;
    if (mode == NetMode::train) {
      mean_.assign(channels_, 0.0);
      var_.assign(channels_, 0.0);
      for (int ch = 0; ch < c; ++ch) {
        double sum = 0.0;
        for (int s = 0; s < n; ++s) {
          const T* p = x.data() + s * x.stride(0) + ch * spatial;
          for (size_t i = 0; i < spatial; ++i) sum += p[i];
        }
        mean_[ch] = sum / static_cast<double>(m);
        double ss = 0.0;
        for (int s = 0; s < n; ++s) {
          const T* p = x.data() + s * x.stride(0) + ch * spatial;
          for (size_t i = 0; i < spatial; ++i) {
            double d = p[i] - mean_[ch];
            ss += d * d;
          }
        }
        var_[ch] = ss / static_cast<double>(m);
        moving_mean_[ch] = static_cast<T>(momentum_ * moving_mean_[ch] +
                                          (1.0 - momentum_) * mean_[ch]);
        moving_var_[ch] = static_cast<T>(momentum_ * moving_var_[ch] +
                                         (1.0 - momentum_) * var_[ch]);
      }
      xhat_.reshape(x.dims());
      m_ = static_cast<double>(m);
      for (int ch = 0; ch < c; ++ch) {
        const double inv = 1.0 / std::sqrt(var_[ch] + eps_);
        for (int s = 0; s < n; ++s) {
          const T* p = x.data() + s * x.stride(0) + ch * spatial;
          T* xh = xhat_.data() + s * x.stride(0) + ch * spatial;
          T* o = out.data() + s * x.stride(0) + ch * spatial;
          for (size_t i = 0; i < spatial; ++i) {
            xh[i] = static_cast<T>((p[i] - mean_[ch]) * inv);
            o[i] = gamma_[ch] * xh[i] + beta_[ch];
          }
        }
      }
    } else {
      xhat_.reshape(x.dims());
      inv_infer_.assign(channels_, 0.0);
      for (int ch = 0; ch < c; ++ch) {
        const double inv =
            1.0 / std::sqrt(static_cast<double>(moving_var_[ch]) + eps_);
        const double mu = moving_mean_[ch];
        inv_infer_[ch] = inv;
        for (int s = 0; s < n; ++s) {
          const T* p = x.data() + s * x.stride(0) + ch * spatial;
          T* xh = xhat_.data() + s * x.stride(0) + ch * spatial;
          T* o = out.data() + s * x.stride(0) + ch * spatial;
          for (size_t i = 0; i < spatial; ++i) {
            xh[i] = static_cast<T>((p[i] - mu) * inv);
            o[i] = gamma_[ch] * xh[i] + beta_[ch];
          }
        }
      }
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    const int n = grad_out.dim(0), c = grad_out.dim(1);
    const size_t spatial = grad_out.stride(1);
    Tensor<T> grad_in(grad_out.dims());
    if (mode_ == NetMode::train) {
      for (int ch = 0; ch < c; ++ch) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int s = 0; s < n; ++s) {
          const T* g = grad_out.data() + s * grad_out.stride(0) + ch * spatial;
          const T* xh = xhat_.data() + s * grad_out.stride(0) + ch * spatial;
          for (size_t i = 0; i < spatial; ++i) {
            sum_dy += g[i];
            sum_dy_xhat += static_cast<double>(g[i]) * xh[i];
          }
        }
        beta_grad_[ch] += static_cast<T>(sum_dy);
        gamma_grad_[ch] += static_cast<T>(sum_dy_xhat);
        const double inv = 1.0 / std::sqrt(var_[ch] + eps_);
        const double scale = static_cast<double>(gamma_[ch]) * inv / m_;
        for (int s = 0; s < n; ++s) {
          const T* g = grad_out.data() + s * grad_out.stride(0) + ch * spatial;
          const T* xh = xhat_.data() + s * grad_out.stride(0) + ch * spatial;
          T* gi = grad_in.data() + s * grad_out.stride(0) + ch * spatial;
          for (size_t i = 0; i < spatial; ++i)
            gi[i] = static_cast<T>(scale * (m_ * g[i] - sum_dy -
                                            static_cast<double>(xh[i]) * sum_dy_xhat));
        }
      }
    } else {
      for (int ch = 0; ch < c; ++ch) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        const double k = static_cast<double>(gamma_[ch]) * inv_infer_[ch];
        for (int s = 0; s < n; ++s) {
          const T* g = grad_out.data() + s * grad_out.stride(0) + ch * spatial;
          const T* xh = xhat_.data() + s * grad_out.stride(0) + ch * spatial;
          T* gi = grad_in.data() + s * grad_out.stride(0) + ch * spatial;
          for (size_t i = 0; i < spatial; ++i) {
            sum_dy += g[i];
            sum_dy_xhat += static_cast<double>(g[i]) * xh[i];
            gi[i] = static_cast<T>(k * g[i]);
          }
        }
        beta_grad_[ch] += static_cast<T>(sum_dy);
        gamma_grad_[ch] += static_cast<T>(sum_dy_xhat);
      }
    }
    return grad_in;
  }

  void release_cache() { xhat_ = Tensor<T>(); }

  std::vector<ParamRef<T>> params() {
    return {{name_ + ".gamma", &gamma_, &gamma_grad_, true, false},
            {name_ + ".beta", &beta_, &beta_grad_, true, false},
            {name_ + ".moving_mean", &moving_mean_, nullptr, false, false},
            {name_ + ".moving_var", &moving_var_, nullptr, false, false}};
  }

  const std::string& name() const { return name_; }

 private:
  std::string name_;
  int channels_;
  double momentum_, eps_;
  Tensor<T> gamma_, beta_, gamma_grad_, beta_grad_;
  Tensor<T> moving_mean_, moving_var_;
  Tensor<T> xhat_;
  std::vector<double> mean_, var_, inv_infer_;
  double m_ = 1.0;
  NetMode mode_ = NetMode::infer;
};

// ---------------------------------------------------------------------------
// ReLU

template <class T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    mask_.assign(x.size(), 0);
    Tensor<T> out(x.dims());
    for (size_t i = 0; i < x.size(); ++i) {
      if (x[i] > T(0)) {
        out[i] = x[i];
        mask_[i] = 1;
      }
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Tensor<T> grad_in(grad_out.dims());
    for (size_t i = 0; i < grad_out.size(); ++i)
      grad_in[i] = mask_[i] ? grad_out[i] : T(0);
    return grad_in;
  }

  void release_cache() { mask_.clear(); }

 private:
  std::vector<uint8_t> mask_;
};

// ---------------------------------------------------------------------------
// Dropout (inverted; identity in inference mode)

template <class T>
class Dropout {
 public:
  explicit Dropout(double rate) : rate_(rate) {}

  Tensor<T> forward(const Tensor<T>& x, NetMode mode, Rng& rng) {
    if (mode == NetMode::infer || rate_ == 0.0) {
      active_ = false;
      return x;
    }
    active_ = true;
    keep_.assign(x.size(), 0);
    const T scale = static_cast<T>(1.0 / (1.0 - rate_));
    Tensor<T> out(x.dims());
    for (size_t i = 0; i < x.size(); ++i) {
      if (!rng.bernoulli(rate_)) {
        keep_[i] = 1;
        out[i] = x[i] * scale;
      }
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    if (!active_) return grad_out;
    const T scale = static_cast<T>(1.0 / (1.0 - rate_));
    Tensor<T> grad_in(grad_out.dims());
    for (size_t i = 0; i < grad_out.size(); ++i)
      grad_in[i] = keep_[i] ? grad_out[i] * scale : T(0);
    return grad_in;
  }

  void release_cache() { keep_.clear(); }

  double rate() const { return rate_; }

 private:
  double rate_;
  bool active_ = false;
  std::vector<uint8_t> keep_;
};

// ---------------------------------------------------------------------------
// MaxPool3D (kernel 2, stride 2, 'same' so out = ceil(in/2))

template <class T>
class MaxPool3D {
 public:
  std::array<int, 3> output_shape(const std::array<int, 3>& in) const {
    return {(in[0] + 1) / 2, (in[1] + 1) / 2, (in[2] + 1) / 2};
  }

  Tensor<T> forward(const Tensor<T>& x) {
    const int n = x.dim(0), c = x.dim(1);
    in_shape_ = {x.dim(2), x.dim(3), x.dim(4)};
    auto out_shape = output_shape(in_shape_);
    Tensor<T> out({n, c, out_shape[0], out_shape[1], out_shape[2]});
    argmax_.assign(out.size(), 0);
    size_t o = 0;
    for (int s = 0; s < n; ++s)
      for (int ch = 0; ch < c; ++ch) {
        const T* src = x.data() + s * x.stride(0) + ch * x.stride(1);
        for (int ox = 0; ox < out_shape[0]; ++ox)
          for (int oy = 0; oy < out_shape[1]; ++oy)
            for (int oz = 0; oz < out_shape[2]; ++oz, ++o) {
              T best{};
              size_t best_idx = 0;
              bool first = true;
              for (int dx = 0; dx < 2; ++dx)
                for (int dy = 0; dy < 2; ++dy)
                  for (int dz = 0; dz < 2; ++dz) {
                    int X = ox * 2 + dx, Y = oy * 2 + dy, Z = oz * 2 + dz;
                    if (X >= in_shape_[0] || Y >= in_shape_[1] ||
                        Z >= in_shape_[2])
                      continue;
                    size_t idx = (static_cast<size_t>(X) * in_shape_[1] + Y) *
                                     in_shape_[2] + Z;
                    T v = src[idx];
                    if (first || v > best) {
                      best = v;
                      best_idx = idx;
                      first = false;
                    }
                  }
              out[o] = best;
              argmax_[o] = (s * x.stride(0) + ch * x.stride(1)) + best_idx;
            }
      }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Tensor<T> grad_in({grad_out.dim(0), grad_out.dim(1), in_shape_[0],
                       in_shape_[1], in_shape_[2]});
    for (size_t o = 0; o < grad_out.size(); ++o)
      grad_in[argmax_[o]] += grad_out[o];
    return grad_in;
  }

  void release_cache() { argmax_.clear(); }

 private:
  std::array<int, 3> in_shape_{0, 0, 0};
  std::vector<size_t> argmax_;
};

// ---------------------------------------------------------------------------
// GlobalMaxPool: (N, C, X, Y, Z) -> (N, C); adds no trainable parameters.

template <class T>
class GlobalMaxPool {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    const int n = x.dim(0), c = x.dim(1);
    const size_t spatial = x.stride(1);
    in_dims_ = x.dims();
    Tensor<T> out({n, c});
    argmax_.assign(static_cast<size_t>(n) * c, 0);
    for (int s = 0; s < n; ++s)
      for (int ch = 0; ch < c; ++ch) {
        const T* p = x.data() + s * x.stride(0) + ch * spatial;
        size_t best = 0;
        for (size_t i = 1; i < spatial; ++i)
          if (p[i] > p[best]) best = i;
        out.at(s, ch) = p[best];
        argmax_[static_cast<size_t>(s) * c + ch] =
            s * x.stride(0) + ch * spatial + best;
      }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Tensor<T> grad_in(in_dims_);
    for (size_t i = 0; i < grad_out.size(); ++i)
      grad_in[argmax_[i]] += grad_out[i];
    return grad_in;
  }

  void release_cache() { argmax_.clear(); }

 private:
  std::vector<int> in_dims_;
  std::vector<size_t> argmax_;
};

// ---------------------------------------------------------------------------
// Dense

template <class T>
class Dense {
 public:
  Dense(std::string name, int in_features, int out_features)
      : name_(std::move(name)), in_(in_features), out_(out_features) {
    weight_.reshape({out_features, in_features});
    bias_.reshape({out_features});
    weight_grad_.reshape({out_features, in_features});
    bias_grad_.reshape({out_features});
  }

  void init(Rng& rng) {
    conv_detail::glorot_uniform_init(weight_, in_, out_, rng);
    bias_.fill(T(0));
  }

  size_t trainable_params() const { return weight_.size() + bias_.size(); }
  int in_features() const { return in_; }
  int out_features() const { return out_; }

  /// x: (N, F) -> (N, U)
  Tensor<T> forward(const Tensor<T>& x) {
    in_cache_ = x;
    const int n = x.dim(0);
    Tensor<T> out({n, out_});
    ConstMatMap<T> X(x.data(), n, in_);
    ConstMatMap<T> W(weight_.data(), out_, in_);
    MatMap<T> O(out.data(), n, out_);
    O.noalias() = X * W.transpose();
    for (int s = 0; s < n; ++s)
      for (int u = 0; u < out_; ++u) out.at(s, u) += bias_[u];
    return out;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    const int n = grad_out.dim(0);
    Tensor<T> grad_in({n, in_});
    ConstMatMap<T> G(grad_out.data(), n, out_);
    ConstMatMap<T> X(in_cache_.data(), n, in_);
    MatMap<T> dW(weight_grad_.data(), out_, in_);
    dW.noalias() += G.transpose() * X;
    for (int s = 0; s < n; ++s)
      for (int u = 0; u < out_; ++u) bias_grad_[u] += grad_out.at(s, u);
    ConstMatMap<T> W(weight_.data(), out_, in_);
    MatMap<T> dX(grad_in.data(), n, in_);
    dX.noalias() = G * W;
    return grad_in;
  }

  void release_cache() { in_cache_ = Tensor<T>(); }

  std::vector<ParamRef<T>> params() {
    return {{name_ + ".weight", &weight_, &weight_grad_, true, false},
            {name_ + ".bias", &bias_, &bias_grad_, true, false}};
  }

  const std::string& name() const { return name_; }

 private:
  std::string name_;
  int in_, out_;
  Tensor<T> weight_, bias_, weight_grad_, bias_grad_;
  Tensor<T> in_cache_;
};

// ---------------------------------------------------------------------------
// Softmax helpers. Softmax math always runs in double regardless of T, which
// is what keeps the output heads full-precision in reduced-precision mode.

/// Row softmax for (N, C) score matrices.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  const int n = logits.dim(0), c = logits.dim(1);
  Tensor<T> out({n, c});
  for (int s = 0; s < n; ++s) {
    double mx = logits.at(s, 0);
    for (int i = 1; i < c; ++i) mx = std::max(mx, static_cast<double>(logits.at(s, i)));
    double sum = 0.0;
    for (int i = 0; i < c; ++i)
      sum += std::exp(static_cast<double>(logits.at(s, i)) - mx);
    for (int i = 0; i < c; ++i)
      out.at(s, i) = static_cast<T>(
          std::exp(static_cast<double>(logits.at(s, i)) - mx) / sum);
  }
  return out;
}

/// d(loss)/d(logits) given probabilities and d(loss)/d(probabilities).
template <class T>
Tensor<T> softmax_rows_backward(const Tensor<T>& prob,
                                const Tensor<T>& grad_prob) {
  const int n = prob.dim(0), c = prob.dim(1);
  Tensor<T> out({n, c});
  for (int s = 0; s < n; ++s) {
    double dot = 0.0;
    for (int i = 0; i < c; ++i)
      dot += static_cast<double>(grad_prob.at(s, i)) * prob.at(s, i);
    for (int i = 0; i < c; ++i)
      out.at(s, i) = static_cast<T>(
          prob.at(s, i) * (static_cast<double>(grad_prob.at(s, i)) - dot));
  }
  return out;
}

/// Per-voxel softmax across the channel dim of (N, C, X, Y, Z).
template <class T>
Tensor<T> softmax_voxels(const Tensor<T>& logits) {
  const int n = logits.dim(0), c = logits.dim(1);
  const size_t spatial = logits.stride(1);
  Tensor<T> out(logits.dims());
  for (int s = 0; s < n; ++s) {
    const T* src = logits.data() + s * logits.stride(0);
    T* dst = out.data() + s * logits.stride(0);
    for (size_t v = 0; v < spatial; ++v) {
      double mx = src[v];
      for (int ch = 1; ch < c; ++ch)
        mx = std::max(mx, static_cast<double>(src[ch * spatial + v]));
      double sum = 0.0;
      for (int ch = 0; ch < c; ++ch)
        sum += std::exp(static_cast<double>(src[ch * spatial + v]) - mx);
      for (int ch = 0; ch < c; ++ch)
        dst[ch * spatial + v] = static_cast<T>(
            std::exp(static_cast<double>(src[ch * spatial + v]) - mx) / sum);
    }
  }
  return out;
}

template <class T>
Tensor<T> softmax_voxels_backward(const Tensor<T>& prob,
                                  const Tensor<T>& grad_prob) {
  const int n = prob.dim(0), c = prob.dim(1);
  const size_t spatial = prob.stride(1);
  Tensor<T> out(prob.dims());
  for (int s = 0; s < n; ++s) {
    const T* p = prob.data() + s * prob.stride(0);
    const T* g = grad_prob.data() + s * prob.stride(0);
    T* dst = out.data() + s * prob.stride(0);
    for (size_t v = 0; v < spatial; ++v) {
      double dot = 0.0;
      for (int ch = 0; ch < c; ++ch)
        dot += static_cast<double>(g[ch * spatial + v]) * p[ch * spatial + v];
      for (int ch = 0; ch < c; ++ch)
        dst[ch * spatial + v] = static_cast<T>(
            p[ch * spatial + v] *
            (static_cast<double>(g[ch * spatial + v]) - dot));
    }
  }
  return out;
}

}  // namespace psnet
