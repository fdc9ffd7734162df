#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "pcar/nn/layers.hpp"

namespace pcar::nn {

namespace {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstMatMap = Eigen::Map<const RowMat<Real>>;
template <typename Real>
using StridedMap = Eigen::Map<RowMat<Real>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename Real>
using ConstStridedMap = Eigen::Map<const RowMat<Real>, Eigen::Unaligned, Eigen::OuterStride<>>;

// Upper bound on im2col buffer elements; larger problems are split along
// output time.
constexpr std::int64_t kMaxColElements = std::int64_t{1} << 22;

int conv_out(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

void check_rank5(const Shape& s, int channels, const char* layer) {
  if (s.size() != 5) {
    throw std::invalid_argument(std::string(layer) + ": expected N x C x T x H x W input, got " + shape_str(s));
  }
  if (s[1] != channels) {
    throw std::invalid_argument(std::string(layer) + ": expected " + std::to_string(channels) +
                                " input channels, got " + shape_str(s));
  }
}

bool is_pointwise(const ConvSpec& s) {
  return s.kernel == Dims3{1, 1, 1} && s.stride == Dims3{1, 1, 1} && s.padding == Dims3{0, 0, 0};
}

}  // namespace

template <typename Real>
void im2col(const Real* src, const ConvGeometry& g, int t_begin, int t_end, Real* col) {
  const std::int64_t plane = g.plane();
  const std::int64_t cols = static_cast<std::int64_t>(t_end - t_begin) * plane;
  const std::int64_t frame = static_cast<std::int64_t>(g.h) * g.w;
  const std::int64_t volume = frame * g.t;
  Real* out = col;
  for (int c = 0; c < g.channels; ++c) {
    const Real* chan = src + c * volume;
    for (int a = 0; a < g.kernel.t; ++a) {
      for (int b = 0; b < g.kernel.h; ++b) {
        for (int d = 0; d < g.kernel.w; ++d) {
          Real* dst = out;
          for (int to = t_begin; to < t_end; ++to) {
            const int ti = to * g.stride.t - g.padding.t + a;
            if (ti < 0 || ti >= g.t) {
              std::fill(dst, dst + plane, Real(0));
              dst += plane;
              continue;
            }
            const Real* img = chan + ti * frame;
            for (int ho = 0; ho < g.oh; ++ho) {
              const int hi = ho * g.stride.h - g.padding.h + b;
              if (hi < 0 || hi >= g.h) {
                std::fill(dst, dst + g.ow, Real(0));
                dst += g.ow;
                continue;
              }
              const Real* line = img + static_cast<std::int64_t>(hi) * g.w;
              for (int wo = 0; wo < g.ow; ++wo) {
                const int wi = wo * g.stride.w - g.padding.w + d;
                *dst++ = (wi >= 0 && wi < g.w) ? line[wi] : Real(0);
              }
            }
          }
          out += cols;
        }
      }
    }
  }
}

template <typename Real>
void col2im(const Real* col, const ConvGeometry& g, int t_begin, int t_end, Real* dst) {
  const std::int64_t plane = g.plane();
  const std::int64_t cols = static_cast<std::int64_t>(t_end - t_begin) * plane;
  const std::int64_t frame = static_cast<std::int64_t>(g.h) * g.w;
  const std::int64_t volume = frame * g.t;
  const Real* in = col;
  for (int c = 0; c < g.channels; ++c) {
    Real* chan = dst + c * volume;
    for (int a = 0; a < g.kernel.t; ++a) {
      for (int b = 0; b < g.kernel.h; ++b) {
        for (int d = 0; d < g.kernel.w; ++d) {
          const Real* src = in;
          for (int to = t_begin; to < t_end; ++to) {
            const int ti = to * g.stride.t - g.padding.t + a;
            if (ti < 0 || ti >= g.t) {
              src += plane;
              continue;
            }
            Real* img = chan + ti * frame;
            for (int ho = 0; ho < g.oh; ++ho) {
              const int hi = ho * g.stride.h - g.padding.h + b;
              if (hi < 0 || hi >= g.h) {
                src += g.ow;
                continue;
              }
              Real* line = img + static_cast<std::int64_t>(hi) * g.w;
              for (int wo = 0; wo < g.ow; ++wo, ++src) {
                const int wi = wo * g.stride.w - g.padding.w + d;
                if (wi >= 0 && wi < g.w) line[wi] += *src;
              }
            }
          }
          in += cols;
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Conv3d

template <typename Real>
Conv3d<Real>::Conv3d(const ConvSpec& spec)
    : spec_(spec),
      weight_({spec.out_channels, spec.in_channels, spec.kernel.t, spec.kernel.h, spec.kernel.w}, true) {
  if (spec.in_channels <= 0 || spec.out_channels <= 0) throw std::invalid_argument("Conv3d: channels must be positive");
  if (spec.bias) bias_ = Parameter<Real>({spec.out_channels}, false);
}

template <typename Real>
ConvGeometry Conv3d<Real>::geometry(const Shape& s) const {
  ConvGeometry g;
  g.channels = spec_.in_channels;
  g.t = s[2];
  g.h = s[3];
  g.w = s[4];
  g.kernel = spec_.kernel;
  g.stride = spec_.stride;
  g.padding = spec_.padding;
  g.ot = conv_out(g.t, g.kernel.t, g.stride.t, g.padding.t);
  g.oh = conv_out(g.h, g.kernel.h, g.stride.h, g.padding.h);
  g.ow = conv_out(g.w, g.kernel.w, g.stride.w, g.padding.w);
  if (g.ot <= 0 || g.oh <= 0 || g.ow <= 0) {
    throw std::invalid_argument("Conv3d: input " + shape_str(s) + " smaller than kernel");
  }
  return g;
}

template <typename Real>
Shape Conv3d<Real>::output_shape(const Shape& input) const {
  check_rank5(input, spec_.in_channels, "Conv3d");
  const auto g = geometry(input);
  return {input[0], spec_.out_channels, g.ot, g.oh, g.ow};
}

template <typename Real>
Tensor<Real> Conv3d<Real>::forward(const Tensor<Real>& x, Phase phase) {
  check_rank5(x.shape(), spec_.in_channels, "Conv3d");
  const auto g = geometry(x.shape());
  const int n_batch = x.dim(0);
  const int cout = spec_.out_channels;
  Tensor<Real> y({n_batch, cout, g.ot, g.oh, g.ow});
  const std::int64_t rows = g.col_rows();
  const std::int64_t in_vol = static_cast<std::int64_t>(spec_.in_channels) * g.t * g.h * g.w;
  const std::int64_t out_vol = g.ot * g.plane();
  ConstMatMap<Real> w(weight_.value.data(), cout, rows);

  if (is_pointwise(spec_)) {
    for (int n = 0; n < n_batch; ++n) {
      ConstMatMap<Real> xin(x.data() + n * in_vol, spec_.in_channels, out_vol);
      MatMap<Real> yout(y.data() + n * cout * out_vol, cout, out_vol);
      yout.noalias() = w * xin;
    }
  } else {
    const int chunk = static_cast<int>(
        std::clamp<std::int64_t>(kMaxColElements / std::max<std::int64_t>(1, rows * g.plane()), 1, g.ot));
    std::vector<Real> col(static_cast<std::size_t>(rows * chunk * g.plane()));
    for (int n = 0; n < n_batch; ++n) {
      for (int t0 = 0; t0 < g.ot; t0 += chunk) {
        const int t1 = std::min(g.ot, t0 + chunk);
        const std::int64_t cols = (t1 - t0) * g.plane();
        im2col(x.data() + n * in_vol, g, t0, t1, col.data());
        ConstMatMap<Real> c(col.data(), rows, cols);
        StridedMap<Real> yout(y.data() + n * cout * out_vol + t0 * g.plane(), cout, cols,
                              Eigen::OuterStride<>(out_vol));
        yout.noalias() = w * c;
      }
    }
  }
  if (spec_.bias) {
    for (int n = 0; n < n_batch; ++n) {
      for (int c = 0; c < cout; ++c) {
        Real* p = y.data() + (static_cast<std::int64_t>(n) * cout + c) * out_vol;
        const Real b = bias_.value[c];
        for (std::int64_t i = 0; i < out_vol; ++i) p[i] += b;
      }
    }
  }
  if (phase == Phase::kTrain) input_ = x;
  return y;
}

template <typename Real>
Tensor<Real> Conv3d<Real>::backward(const Tensor<Real>& grad_out) {
  if (input_.empty()) throw std::logic_error("Conv3d::backward called without a training forward pass");
  const auto g = geometry(input_.shape());
  const int n_batch = input_.dim(0);
  const int cout = spec_.out_channels;
  const Shape expected{n_batch, cout, g.ot, g.oh, g.ow};
  if (grad_out.shape() != expected) {
    throw std::invalid_argument("Conv3d::backward: gradient shape " + shape_str(grad_out.shape()) +
                                " does not match output " + shape_str(expected));
  }
  const std::int64_t rows = g.col_rows();
  const std::int64_t in_vol = static_cast<std::int64_t>(spec_.in_channels) * g.t * g.h * g.w;
  const std::int64_t out_vol = g.ot * g.plane();
  ConstMatMap<Real> w(weight_.value.data(), cout, rows);
  MatMap<Real> dw(weight_.grad.data(), cout, rows);
  Tensor<Real> dx;
  if (input_grad_) dx = Tensor<Real>(input_.shape());

  if (is_pointwise(spec_)) {
    for (int n = 0; n < n_batch; ++n) {
      ConstMatMap<Real> xin(input_.data() + n * in_vol, spec_.in_channels, out_vol);
      ConstMatMap<Real> dy(grad_out.data() + n * cout * out_vol, cout, out_vol);
      dw.noalias() += dy * xin.transpose();
      if (input_grad_) {
        MatMap<Real> dxn(dx.data() + n * in_vol, spec_.in_channels, out_vol);
        dxn.noalias() = w.transpose() * dy;
      }
    }
  } else {
    const int chunk = static_cast<int>(
        std::clamp<std::int64_t>(kMaxColElements / std::max<std::int64_t>(1, rows * g.plane()), 1, g.ot));
    std::vector<Real> col(static_cast<std::size_t>(rows * chunk * g.plane()));
    std::vector<Real> dcol(input_grad_ ? col.size() : 0);
    for (int n = 0; n < n_batch; ++n) {
      for (int t0 = 0; t0 < g.ot; t0 += chunk) {
        const int t1 = std::min(g.ot, t0 + chunk);
        const std::int64_t cols = (t1 - t0) * g.plane();
        im2col(input_.data() + n * in_vol, g, t0, t1, col.data());
        ConstMatMap<Real> c(col.data(), rows, cols);
        ConstStridedMap<Real> dy(grad_out.data() + n * cout * out_vol + t0 * g.plane(), cout, cols,
                                 Eigen::OuterStride<>(out_vol));
        dw.noalias() += dy * c.transpose();
        if (input_grad_) {
          MatMap<Real> dc(dcol.data(), rows, cols);
          dc.noalias() = w.transpose() * dy;
          col2im(dcol.data(), g, t0, t1, dx.data() + n * in_vol);
        }
      }
    }
  }
  if (spec_.bias) {
    for (int n = 0; n < n_batch; ++n) {
      for (int c = 0; c < cout; ++c) {
        const Real* p = grad_out.data() + (static_cast<std::int64_t>(n) * cout + c) * out_vol;
        Real s = 0;
        for (std::int64_t i = 0; i < out_vol; ++i) s += p[i];
        bias_.grad[c] += s;
      }
    }
  }
  return dx;
}

template <typename Real>
void Conv3d<Real>::init_he(Rng& rng) {
  const double fan_in = static_cast<double>(spec_.in_channels) * spec_.kernel.t * spec_.kernel.h * spec_.kernel.w;
  init_normal(rng, std::sqrt(2.0 / fan_in));
}

template <typename Real>
void Conv3d<Real>::init_normal(Rng& rng, double stddev) {
  for (auto& v : weight_.value.values()) v = static_cast<Real>(stddev * normal(rng));
  if (spec_.bias) bias_.value.zero();
}

template <typename Real>
void Conv3d<Real>::collect(StateDict<Real>& dict, const std::string& prefix) {
  dict.add(prefix + "weight", weight_);
  if (spec_.bias) dict.add(prefix + "bias", bias_);
}

// ---------------------------------------------------------------------------
// ConvTranspose3d

template <typename Real>
ConvTranspose3d<Real>::ConvTranspose3d(const ConvSpec& spec)
    : spec_(spec),
      weight_({spec.in_channels, spec.out_channels, spec.kernel.t, spec.kernel.h, spec.kernel.w}, true) {
  if (spec.in_channels <= 0 || spec.out_channels <= 0) {
    throw std::invalid_argument("ConvTranspose3d: channels must be positive");
  }
  if (spec.bias) bias_ = Parameter<Real>({spec.out_channels}, false);
}

template <typename Real>
ConvGeometry ConvTranspose3d<Real>::geometry(const Shape& s) const {
  // The output volume plays the role of the im2col source; the input grid is
  // the sliding-window grid.
  ConvGeometry g;
  g.channels = spec_.out_channels;
  g.kernel = spec_.kernel;
  g.stride = spec_.stride;
  g.padding = spec_.padding;
  g.ot = s[2];
  g.oh = s[3];
  g.ow = s[4];
  g.t = (s[2] - 1) * g.stride.t - 2 * g.padding.t + g.kernel.t;
  g.h = (s[3] - 1) * g.stride.h - 2 * g.padding.h + g.kernel.h;
  g.w = (s[4] - 1) * g.stride.w - 2 * g.padding.w + g.kernel.w;
  if (g.t <= 0 || g.h <= 0 || g.w <= 0) {
    throw std::invalid_argument("ConvTranspose3d: invalid output extent for input " + shape_str(s));
  }
  return g;
}

template <typename Real>
Shape ConvTranspose3d<Real>::output_shape(const Shape& input) const {
  check_rank5(input, spec_.in_channels, "ConvTranspose3d");
  const auto g = geometry(input);
  return {input[0], spec_.out_channels, g.t, g.h, g.w};
}

template <typename Real>
Tensor<Real> ConvTranspose3d<Real>::forward(const Tensor<Real>& x, Phase phase) {
  check_rank5(x.shape(), spec_.in_channels, "ConvTranspose3d");
  const auto g = geometry(x.shape());
  const int n_batch = x.dim(0);
  const int cin = spec_.in_channels;
  const std::int64_t rows = g.col_rows();
  const std::int64_t in_vol = static_cast<std::int64_t>(g.ot) * g.plane();
  const std::int64_t out_vol = static_cast<std::int64_t>(g.t) * g.h * g.w;
  Tensor<Real> y({n_batch, spec_.out_channels, g.t, g.h, g.w});
  ConstMatMap<Real> w(weight_.value.data(), cin, rows);
  std::vector<Real> col(static_cast<std::size_t>(rows * in_vol));
  for (int n = 0; n < n_batch; ++n) {
    ConstMatMap<Real> xin(x.data() + n * cin * in_vol, cin, in_vol);
    MatMap<Real> c(col.data(), rows, in_vol);
    c.noalias() = w.transpose() * xin;
    col2im(col.data(), g, 0, g.ot, y.data() + n * spec_.out_channels * out_vol);
  }
  if (spec_.bias) {
    for (int n = 0; n < n_batch; ++n) {
      for (int c = 0; c < spec_.out_channels; ++c) {
        Real* p = y.data() + (static_cast<std::int64_t>(n) * spec_.out_channels + c) * out_vol;
        for (std::int64_t i = 0; i < out_vol; ++i) p[i] += bias_.value[c];
      }
    }
  }
  if (phase == Phase::kTrain) input_ = x;
  return y;
}

template <typename Real>
Tensor<Real> ConvTranspose3d<Real>::backward(const Tensor<Real>& grad_out) {
  if (input_.empty()) throw std::logic_error("ConvTranspose3d::backward called without a training forward pass");
  const auto g = geometry(input_.shape());
  const int n_batch = input_.dim(0);
  const int cin = spec_.in_channels;
  const std::int64_t rows = g.col_rows();
  const std::int64_t in_vol = static_cast<std::int64_t>(g.ot) * g.plane();
  const std::int64_t out_vol = static_cast<std::int64_t>(g.t) * g.h * g.w;
  const Shape expected{n_batch, spec_.out_channels, g.t, g.h, g.w};
  if (grad_out.shape() != expected) {
    throw std::invalid_argument("ConvTranspose3d::backward: gradient shape " + shape_str(grad_out.shape()) +
                                " does not match output " + shape_str(expected));
  }
  ConstMatMap<Real> w(weight_.value.data(), cin, rows);
  MatMap<Real> dw(weight_.grad.data(), cin, rows);
  Tensor<Real> dx(input_.shape());
  std::vector<Real> dcol(static_cast<std::size_t>(rows * in_vol));
  for (int n = 0; n < n_batch; ++n) {
    im2col(grad_out.data() + n * spec_.out_channels * out_vol, g, 0, g.ot, dcol.data());
    ConstMatMap<Real> dc(dcol.data(), rows, in_vol);
    ConstMatMap<Real> xin(input_.data() + n * cin * in_vol, cin, in_vol);
    dw.noalias() += xin * dc.transpose();
    MatMap<Real> dxn(dx.data() + n * cin * in_vol, cin, in_vol);
    dxn.noalias() = w * dc;
  }
  if (spec_.bias) {
    for (int n = 0; n < n_batch; ++n) {
      for (int c = 0; c < spec_.out_channels; ++c) {
        const Real* p = grad_out.data() + (static_cast<std::int64_t>(n) * spec_.out_channels + c) * out_vol;
        Real s = 0;
        for (std::int64_t i = 0; i < out_vol; ++i) s += p[i];
        bias_.grad[c] += s;
      }
    }
  }
  return dx;
}

template <typename Real>
void ConvTranspose3d<Real>::init_normal(Rng& rng, double stddev) {
  for (auto& v : weight_.value.values()) v = static_cast<Real>(stddev * normal(rng));
  if (spec_.bias) bias_.value.zero();
}

template <typename Real>
void ConvTranspose3d<Real>::collect(StateDict<Real>& dict, const std::string& prefix) {
  dict.add(prefix + "weight", weight_);
  if (spec_.bias) dict.add(prefix + "bias", bias_);
}

template void im2col<float>(const float*, const ConvGeometry&, int, int, float*);
template void im2col<double>(const double*, const ConvGeometry&, int, int, double*);
template void col2im<float>(const float*, const ConvGeometry&, int, int, float*);
template void col2im<double>(const double*, const ConvGeometry&, int, int, double*);
template class Conv3d<float>;
template class Conv3d<double>;
template class ConvTranspose3d<float>;
template class ConvTranspose3d<double>;

}  // namespace pcar::nn
