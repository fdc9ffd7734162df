#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <stdexcept>

#include "pcar/nn/layers.hpp"

namespace pcar::nn {

namespace {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::int64_t trailing_volume(const Shape& s) {
  std::int64_t v = 1;
  for (std::size_t i = 2; i < s.size(); ++i) v *= s[i];
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// BatchNorm3d

template <typename Real>
BatchNorm3d<Real>::BatchNorm3d(int channels, double momentum, double eps)
    : channels_(channels),
      momentum_(momentum),
      eps_(eps),
      gamma_({channels}, false),
      beta_({channels}, false),
      running_mean_({channels}),
      running_var_({channels}, Real(1)) {
  gamma_.value.fill(Real(1));
}

template <typename Real>
Tensor<Real> BatchNorm3d<Real>::forward(const Tensor<Real>& x, Phase phase) {
  if (x.rank() < 2 || x.dim(1) != channels_) {
    throw std::invalid_argument("BatchNorm3d: expected " + std::to_string(channels_) + " channels, got " +
                                shape_str(x.shape()));
  }
  const int n_batch = x.dim(0);
  const std::int64_t spatial = trailing_volume(x.shape());
  const std::int64_t count = n_batch * spatial;
  Tensor<Real> y(x.shape());

  if (phase == Phase::kEval) {
    for (int c = 0; c < channels_; ++c) {
      const Real inv = Real(1) / std::sqrt(running_var_[c] + static_cast<Real>(eps_));
      const Real scale = gamma_.value[c] * inv;
      const Real shift = beta_.value[c] - running_mean_[c] * scale;
      for (int n = 0; n < n_batch; ++n) {
        const std::int64_t off = (static_cast<std::int64_t>(n) * channels_ + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) y[off + i] = x[off + i] * scale + shift;
      }
    }
    return y;
  }

  xhat_ = Tensor<Real>(x.shape());
  inv_std_.assign(static_cast<std::size_t>(channels_), Real(0));
  for (int c = 0; c < channels_; ++c) {
    double sum = 0.0;
    for (int n = 0; n < n_batch; ++n) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * channels_ + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) sum += x[off + i];
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (int n = 0; n < n_batch; ++n) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * channels_ + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) {
        const double d = x[off + i] - mean;
        sq += d * d;
      }
    }
    const double var = sq / static_cast<double>(count);
    const Real inv = static_cast<Real>(1.0 / std::sqrt(var + eps_));
    inv_std_[c] = inv;
    const Real m = static_cast<Real>(mean);
    for (int n = 0; n < n_batch; ++n) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * channels_ + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) {
        const Real xh = (x[off + i] - m) * inv;
        xhat_[off + i] = xh;
        y[off + i] = gamma_.value[c] * xh + beta_.value[c];
      }
    }
    const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
    running_mean_[c] = static_cast<Real>(momentum_ * running_mean_[c] + (1.0 - momentum_) * mean);
    running_var_[c] = static_cast<Real>(momentum_ * running_var_[c] + (1.0 - momentum_) * unbiased);
  }
  return y;
}

template <typename Real>
Tensor<Real> BatchNorm3d<Real>::backward(const Tensor<Real>& grad_out) {
  if (xhat_.empty()) throw std::logic_error("BatchNorm3d::backward called without a training forward pass");
  if (grad_out.shape() != xhat_.shape()) throw std::invalid_argument("BatchNorm3d::backward: shape mismatch");
  const int n_batch = grad_out.dim(0);
  const std::int64_t spatial = trailing_volume(grad_out.shape());
  const Real count = static_cast<Real>(n_batch * spatial);
  Tensor<Real> dx(grad_out.shape());
  for (int c = 0; c < channels_; ++c) {
    Real sum_dy = 0;
    Real sum_dy_xhat = 0;
    for (int n = 0; n < n_batch; ++n) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * channels_ + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) {
        sum_dy += grad_out[off + i];
        sum_dy_xhat += grad_out[off + i] * xhat_[off + i];
      }
    }
    gamma_.grad[c] += sum_dy_xhat;
    beta_.grad[c] += sum_dy;
    const Real k = gamma_.value[c] * inv_std_[c] / count;
    for (int n = 0; n < n_batch; ++n) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * channels_ + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i) {
        dx[off + i] = k * (count * grad_out[off + i] - sum_dy - xhat_[off + i] * sum_dy_xhat);
      }
    }
  }
  return dx;
}

template <typename Real>
void BatchNorm3d<Real>::collect(StateDict<Real>& dict, const std::string& prefix) {
  dict.add(prefix + "gamma", gamma_);
  dict.add(prefix + "beta", beta_);
  dict.add_buffer(prefix + "running_mean", running_mean_);
  dict.add_buffer(prefix + "running_var", running_var_);
}

// ---------------------------------------------------------------------------
// ReLU

template <typename Real>
Tensor<Real> ReLU<Real>::forward(const Tensor<Real>& x, Phase phase) {
  Tensor<Real> y = x;
  for (auto& v : y.values()) v = v > Real(0) ? v : Real(0);
  if (phase == Phase::kTrain) output_ = y;
  return y;
}

template <typename Real>
Tensor<Real> ReLU<Real>::backward(const Tensor<Real>& grad_out) const {
  if (grad_out.shape() != output_.shape()) throw std::invalid_argument("ReLU::backward: shape mismatch");
  Tensor<Real> dx = grad_out;
  for (std::int64_t i = 0; i < dx.numel(); ++i) {
    if (!(output_[i] > Real(0))) dx[i] = Real(0);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// MaxPool3d

template <typename Real>
Shape MaxPool3d<Real>::output_shape(const Shape& s) const {
  if (s.size() != 5) throw std::invalid_argument("MaxPool3d: expected rank-5 input, got " + shape_str(s));
  auto out = [](int in, int k, int st, int p) { return (in + 2 * p - k) / st + 1; };
  return {s[0], s[1], out(s[2], kernel_.t, stride_.t, padding_.t), out(s[3], kernel_.h, stride_.h, padding_.h),
          out(s[4], kernel_.w, stride_.w, padding_.w)};
}

template <typename Real>
Tensor<Real> MaxPool3d<Real>::forward(const Tensor<Real>& x, Phase phase) {
  const Shape os = output_shape(x.shape());
  Tensor<Real> y(os);
  const int T = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::int64_t in_vol = static_cast<std::int64_t>(T) * H * W;
  const bool keep = phase == Phase::kTrain;
  if (keep) argmax_.assign(static_cast<std::size_t>(y.numel()), -1);
  std::int64_t o = 0;
  for (int nc = 0; nc < os[0] * os[1]; ++nc) {
    const Real* src = x.data() + nc * in_vol;
    for (int to = 0; to < os[2]; ++to) {
      for (int ho = 0; ho < os[3]; ++ho) {
        for (int wo = 0; wo < os[4]; ++wo, ++o) {
          Real best = -std::numeric_limits<Real>::infinity();
          std::int64_t best_idx = -1;
          for (int a = 0; a < kernel_.t; ++a) {
            const int ti = to * stride_.t - padding_.t + a;
            if (ti < 0 || ti >= T) continue;
            for (int b = 0; b < kernel_.h; ++b) {
              const int hi = ho * stride_.h - padding_.h + b;
              if (hi < 0 || hi >= H) continue;
              for (int d = 0; d < kernel_.w; ++d) {
                const int wi = wo * stride_.w - padding_.w + d;
                if (wi < 0 || wi >= W) continue;
                const std::int64_t idx = (static_cast<std::int64_t>(ti) * H + hi) * W + wi;
                if (src[idx] > best) {
                  best = src[idx];
                  best_idx = idx;
                }
              }
            }
          }
          y[o] = best;
          if (keep) argmax_[o] = nc * in_vol + best_idx;
        }
      }
    }
  }
  if (keep) input_shape_ = x.shape();
  return y;
}

template <typename Real>
Tensor<Real> MaxPool3d<Real>::backward(const Tensor<Real>& grad_out) const {
  if (static_cast<std::size_t>(grad_out.numel()) != argmax_.size()) {
    throw std::invalid_argument("MaxPool3d::backward: shape mismatch");
  }
  Tensor<Real> dx(input_shape_);
  for (std::int64_t i = 0; i < grad_out.numel(); ++i) {
    if (argmax_[i] >= 0) dx[argmax_[i]] += grad_out[i];
  }
  return dx;
}

// ---------------------------------------------------------------------------
// GlobalAvgPool

template <typename Real>
Tensor<Real> GlobalAvgPool<Real>::forward(const Tensor<Real>& x, Phase phase) {
  if (x.rank() < 3) throw std::invalid_argument("GlobalAvgPool: expected N x C x ... input");
  const int n_batch = x.dim(0), channels = x.dim(1);
  const std::int64_t vol = trailing_volume(x.shape());
  Tensor<Real> y({n_batch, channels});
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(n_batch) * channels; ++nc) {
    double s = 0.0;
    const Real* p = x.data() + nc * vol;
    for (std::int64_t i = 0; i < vol; ++i) s += p[i];
    y[nc] = static_cast<Real>(s / static_cast<double>(vol));
  }
  if (phase == Phase::kTrain) input_shape_ = x.shape();
  return y;
}

template <typename Real>
Tensor<Real> GlobalAvgPool<Real>::backward(const Tensor<Real>& grad_out) const {
  Tensor<Real> dx(input_shape_);
  const std::int64_t vol = trailing_volume(input_shape_);
  const Real inv = Real(1) / static_cast<Real>(vol);
  for (std::int64_t nc = 0; nc < grad_out.numel(); ++nc) {
    Real* p = dx.data() + nc * vol;
    const Real g = grad_out[nc] * inv;
    for (std::int64_t i = 0; i < vol; ++i) p[i] = g;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Linear

template <typename Real>
Linear<Real>::Linear(int in_features, int out_features)
    : in_(in_features), out_(out_features), weight_({out_features, in_features}, true), bias_({out_features}, false) {}

template <typename Real>
Tensor<Real> Linear<Real>::forward(const Tensor<Real>& x, Phase phase) {
  const int n_batch = x.dim(0);
  if (x.numel() != static_cast<std::int64_t>(n_batch) * in_) {
    throw std::invalid_argument("Linear: expected " + std::to_string(in_) + " features, got " + shape_str(x.shape()));
  }
  Tensor<Real> y({n_batch, out_});
  Eigen::Map<const RowMat<Real>> xm(x.data(), n_batch, in_);
  Eigen::Map<const RowMat<Real>> wm(weight_.value.data(), out_, in_);
  Eigen::Map<RowMat<Real>> ym(y.data(), n_batch, out_);
  ym.noalias() = xm * wm.transpose();
  for (int n = 0; n < n_batch; ++n) {
    for (int o = 0; o < out_; ++o) ym(n, o) += bias_.value[o];
  }
  if (phase == Phase::kTrain) input_ = x;
  return y;
}

template <typename Real>
Tensor<Real> Linear<Real>::backward(const Tensor<Real>& grad_out) {
  if (input_.empty()) throw std::logic_error("Linear::backward called without a training forward pass");
  const int n_batch = input_.dim(0);
  Eigen::Map<const RowMat<Real>> xm(input_.data(), n_batch, in_);
  Eigen::Map<const RowMat<Real>> wm(weight_.value.data(), out_, in_);
  Eigen::Map<const RowMat<Real>> dy(grad_out.data(), n_batch, out_);
  Eigen::Map<RowMat<Real>> dw(weight_.grad.data(), out_, in_);
  dw.noalias() += dy.transpose() * xm;
  for (int n = 0; n < n_batch; ++n) {
    for (int o = 0; o < out_; ++o) bias_.grad[o] += dy(n, o);
  }
  Tensor<Real> dx(input_.shape());
  Eigen::Map<RowMat<Real>> dxm(dx.data(), n_batch, in_);
  dxm.noalias() = dy * wm;
  return dx;
}

template <typename Real>
void Linear<Real>::init_normal(Rng& rng, double stddev) {
  for (auto& v : weight_.value.values()) v = static_cast<Real>(stddev * normal(rng));
  bias_.value.zero();
}

template <typename Real>
void Linear<Real>::collect(StateDict<Real>& dict, const std::string& prefix) {
  dict.add(prefix + "weight", weight_);
  dict.add(prefix + "bias", bias_);
}

// ---------------------------------------------------------------------------
// Dropout

template <typename Real>
Tensor<Real> Dropout<Real>::forward(const Tensor<Real>& x, Phase phase, Rng* rng) {
  if (phase != Phase::kTrain || ratio_ <= 0.0) {
    mask_.clear();
    return x;
  }
  if (rng == nullptr) throw std::invalid_argument("Dropout: training forward requires an rng");
  const Real keep_scale = static_cast<Real>(1.0 / (1.0 - ratio_));
  mask_.resize(static_cast<std::size_t>(x.numel()));
  Tensor<Real> y = x;
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    mask_[i] = uniform01(*rng) >= ratio_ ? keep_scale : Real(0);
    y[i] *= mask_[i];
  }
  return y;
}

template <typename Real>
Tensor<Real> Dropout<Real>::backward(const Tensor<Real>& grad_out) const {
  if (mask_.empty()) return grad_out;
  Tensor<Real> dx = grad_out;
  for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] *= mask_[i];
  return dx;
}

template class BatchNorm3d<float>;
template class BatchNorm3d<double>;
template class ReLU<float>;
template class ReLU<double>;
template class MaxPool3d<float>;
template class MaxPool3d<double>;
template class GlobalAvgPool<float>;
template class GlobalAvgPool<double>;
template class Linear<float>;
template class Linear<double>;
template class Dropout<float>;
template class Dropout<double>;

}  // namespace pcar::nn
