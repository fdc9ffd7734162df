#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pcar/nn/module.hpp"
#include "pcar/rng.hpp"
#include "pcar/tensor.hpp"

namespace pcar::nn {

/// Extents along (time, height, width).
struct Dims3 {
  int t = 1;
  int h = 1;
  int w = 1;
  bool operator==(const Dims3&) const = default;
};

struct ConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  Dims3 kernel{1, 1, 1};
  Dims3 stride{1, 1, 1};
  Dims3 padding{0, 0, 0};
  bool bias = false;
};

/// Geometry shared by im2col/col2im. `channels`/`t,h,w` describe the
/// (padded-before) source volume and `ot,oh,ow` the sliding-window grid.
struct ConvGeometry {
  int channels = 0;
  int t = 0, h = 0, w = 0;
  Dims3 kernel, stride, padding;
  int ot = 0, oh = 0, ow = 0;

  std::int64_t col_rows() const {
    return static_cast<std::int64_t>(channels) * kernel.t * kernel.h * kernel.w;
  }
  std::int64_t plane() const { return static_cast<std::int64_t>(oh) * ow; }
};

/// Unfolds windows for output time steps [t_begin, t_end) into a
/// col_rows() x ((t_end - t_begin) * oh * ow) row-major matrix.
template <typename Real>
void im2col(const Real* src, const ConvGeometry& g, int t_begin, int t_end, Real* col);

/// Adjoint of im2col: accumulates columns back into `dst`.
template <typename Real>
void col2im(const Real* col, const ConvGeometry& g, int t_begin, int t_end, Real* dst);

/// 3D convolution over N x C x T x H x W. Parameter gradients accumulate
/// across backward calls until zeroed.
template <typename Real>
class Conv3d {
 public:
  Conv3d() = default;
  explicit Conv3d(const ConvSpec& spec);

  const ConvSpec& spec() const { return spec_; }
  Shape output_shape(const Shape& input) const;

  Tensor<Real> forward(const Tensor<Real>& x, Phase phase);
  Tensor<Real> backward(const Tensor<Real>& grad_out);

  /// The first layer of a network has no use for dL/dx.
  void set_input_grad(bool enabled) { input_grad_ = enabled; }

  void init_he(Rng& rng);
  void init_normal(Rng& rng, double stddev);
  void collect(StateDict<Real>& dict, const std::string& prefix);

  Parameter<Real>& weight() { return weight_; }
  Parameter<Real>& bias() { return bias_; }

 private:
  ConvGeometry geometry(const Shape& input) const;

  ConvSpec spec_;
  Parameter<Real> weight_;
  Parameter<Real> bias_;
  Tensor<Real> input_;
  bool input_grad_ = true;
};

/// Transposed 3D convolution; weight layout Cin x Cout x kt x kh x kw.
/// Output extent per axis is (i - 1) * stride - 2 * pad + kernel.
template <typename Real>
class ConvTranspose3d {
 public:
  ConvTranspose3d() = default;
  explicit ConvTranspose3d(const ConvSpec& spec);

  const ConvSpec& spec() const { return spec_; }
  Shape output_shape(const Shape& input) const;

  Tensor<Real> forward(const Tensor<Real>& x, Phase phase);
  Tensor<Real> backward(const Tensor<Real>& grad_out);

  void init_normal(Rng& rng, double stddev);
  void collect(StateDict<Real>& dict, const std::string& prefix);

  Parameter<Real>& weight() { return weight_; }

 private:
  ConvGeometry geometry(const Shape& input) const;

  ConvSpec spec_;
  Parameter<Real> weight_;
  Parameter<Real> bias_;
  Tensor<Real> input_;
};

/// Per-channel batch normalization over N, T, H, W. Running statistics use
/// running = momentum * running + (1 - momentum) * batch.
template <typename Real>
class BatchNorm3d {
 public:
  BatchNorm3d() = default;
  explicit BatchNorm3d(int channels, double momentum = 0.9, double eps = 1e-5);

  Tensor<Real> forward(const Tensor<Real>& x, Phase phase);
  Tensor<Real> backward(const Tensor<Real>& grad_out);

  void collect(StateDict<Real>& dict, const std::string& prefix);

  Parameter<Real>& gamma() { return gamma_; }
  Parameter<Real>& beta() { return beta_; }
  Tensor<Real>& running_mean() { return running_mean_; }
  Tensor<Real>& running_var() { return running_var_; }

 private:
  int channels_ = 0;
  double momentum_ = 0.9;
  double eps_ = 1e-5;
  Parameter<Real> gamma_;
  Parameter<Real> beta_;
  Tensor<Real> running_mean_;
  Tensor<Real> running_var_;
  Tensor<Real> xhat_;
  std::vector<Real> inv_std_;
};

template <typename Real>
class ReLU {
 public:
  Tensor<Real> forward(const Tensor<Real>& x, Phase phase);
  Tensor<Real> backward(const Tensor<Real>& grad_out) const;

 private:
  Tensor<Real> output_;
};

template <typename Real>
class MaxPool3d {
 public:
  MaxPool3d() = default;
  MaxPool3d(Dims3 kernel, Dims3 stride, Dims3 padding)
      : kernel_(kernel), stride_(stride), padding_(padding) {}

  Shape output_shape(const Shape& input) const;
  Tensor<Real> forward(const Tensor<Real>& x, Phase phase);
  Tensor<Real> backward(const Tensor<Real>& grad_out) const;

 private:
  Dims3 kernel_, stride_, padding_;
  Shape input_shape_;
  std::vector<std::int64_t> argmax_;
};

/// N x C x ... -> N x C mean over every trailing axis.
template <typename Real>
class GlobalAvgPool {
 public:
  Tensor<Real> forward(const Tensor<Real>& x, Phase phase);
  Tensor<Real> backward(const Tensor<Real>& grad_out) const;

 private:
  Shape input_shape_;
};

/// Fully connected layer on N x in. Weight layout out x in.
template <typename Real>
class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features);

  Tensor<Real> forward(const Tensor<Real>& x, Phase phase);
  Tensor<Real> backward(const Tensor<Real>& grad_out);

  void init_normal(Rng& rng, double stddev);
  void collect(StateDict<Real>& dict, const std::string& prefix);

  Parameter<Real>& weight() { return weight_; }
  Parameter<Real>& bias() { return bias_; }
  const Parameter<Real>& weight() const { return weight_; }
  int in_features() const { return in_; }
  int out_features() const { return out_; }

 private:
  int in_ = 0;
  int out_ = 0;
  Parameter<Real> weight_;
  Parameter<Real> bias_;
  Tensor<Real> input_;
};

/// Inverted dropout: kept activations are scaled by 1 / (1 - ratio) during
/// training, identity at evaluation.
template <typename Real>
class Dropout {
 public:
  explicit Dropout(double ratio = 0.5) : ratio_(ratio) {}

  double ratio() const { return ratio_; }
  void set_ratio(double ratio) { ratio_ = ratio; }

  Tensor<Real> forward(const Tensor<Real>& x, Phase phase, Rng* rng);
  Tensor<Real> backward(const Tensor<Real>& grad_out) const;

 private:
  double ratio_;
  std::vector<Real> mask_;
};

}  // namespace pcar::nn
