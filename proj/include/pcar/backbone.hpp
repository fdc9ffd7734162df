#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pcar/classify.hpp"
#include "pcar/nn/layers.hpp"

namespace pcar {

/// Inflated ResNet-50 style video backbone. The default values reproduce the
/// full-size network; `width_divisor` and `stage_blocks` shrink it for
/// desk-scale experiments.
struct BackboneConfig {
  std::vector<int> stage_blocks{3, 4, 6, 3};
  int base_channels = 64;
  int conv1_temporal = 5;
  std::vector<int> block_temporal{3, 3, 3, 3};
  int clip_length = 8;
  int input_size = 224;
  int width_divisor = 1;

  int width() const { return base_channels / width_divisor; }
  /// Bottleneck expansion 4 on the widest stage (8 x base).
  int feature_channels() const { return width() * 32; }
  int feature_size() const { return input_size / 32; }

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

struct StageShape {
  std::string name;
  Shape shape;
};

template <typename Real>
class Bottleneck {
 public:
  Bottleneck(int in_channels, int mid_channels, int out_channels, int temporal_kernel, int spatial_stride);

  Tensor<Real> forward(const Tensor<Real>& x, nn::Phase phase);
  Tensor<Real> backward(const Tensor<Real>& grad_out);

  void init(Rng& rng);
  void collect(nn::StateDict<Real>& dict, const std::string& prefix);
  void temporal_extents(std::map<std::string, int>& out, const std::string& prefix) const;

 private:
  nn::Conv3d<Real> conv_a_, conv_b_, conv_c_;
  nn::BatchNorm3d<Real> bn_a_, bn_b_, bn_c_;
  nn::ReLU<Real> relu_a_, relu_b_, relu_out_;
  bool projection_ = false;
  nn::Conv3d<Real> shortcut_;
  nn::BatchNorm3d<Real> shortcut_bn_;
};

/// conv1 (t x 7 x 7, stride 1,2,2) -> 1 x 3 x 3 spatial max pool -> four
/// bottleneck stages. Temporal stride is 1 everywhere, so the output keeps the
/// clip length: C x T x H/32 x W/32.
template <typename Real>
class Backbone {
 public:
  explicit Backbone(const BackboneConfig& config);

  const BackboneConfig& config() const { return config_; }

  Tensor<Real> forward(const Tensor<Real>& clips, nn::Phase phase);
  /// Accumulates parameter gradients; the input gradient is not formed.
  void backward(const Tensor<Real>& grad_features);

  /// Output shape after conv1, pool1 and res2..res5 of the last forward.
  const std::vector<StageShape>& stage_shapes() const { return stage_shapes_; }

  void init(Rng& rng);
  void collect(nn::StateDict<Real>& dict, const std::string& prefix);

  /// Temporal kernel extent of every convolution weight, keyed by parameter
  /// name (prefix included). Drives 2D -> 3D inflation.
  std::map<std::string, int> temporal_extents(const std::string& prefix) const;

 private:
  BackboneConfig config_;
  nn::Conv3d<Real> conv1_;
  nn::BatchNorm3d<Real> bn1_;
  nn::ReLU<Real> relu1_;
  nn::MaxPool3d<Real> pool1_;
  std::vector<std::vector<Bottleneck<Real>>> stages_;
  std::vector<StageShape> stage_shapes_;
};

template <typename Real>
using NamedTensors = std::map<std::string, Tensor<Real>>;

/// Builds 3D kernels from 2D ones: each Cout x Cin x kh x kw kernel listed
/// in `temporal_extents` is replicated kt times along a new temporal axis and
/// divided by kt. Entries absent from `temporal_extents` are copied
/// unchanged. Throws std::invalid_argument naming the offending layer.
template <typename Real>
NamedTensors<Real> inflate_weights(const NamedTensors<Real>& weights_2d,
                                   const std::map<std::string, int>& temporal_extents);

/// Copies inflated tensors into matching parameters and buffers of `dict`.
/// Every name must exist with an identical shape.
template <typename Real>
void load_named(nn::StateDict<Real>& dict, const NamedTensors<Real>& tensors);

template <typename Real>
struct RgbOutput {
  Tensor<Real> logits;  // N x n
  Tensor<Real> pooled;  // N x C, global average of the feature map
};

/// Global average pool -> dropout -> fully connected layer.
template <typename Real>
class RgbClassifier {
 public:
  RgbClassifier(int feature_channels, int num_classes, double dropout);

  RgbOutput<Real> forward(const Tensor<Real>& features, nn::Phase phase, Rng* rng);
  Tensor<Real> backward(const Tensor<Real>& grad_logits);

  void init(Rng& rng);
  void collect(nn::StateDict<Real>& dict, const std::string& prefix);

  nn::Linear<Real>& fc() { return fc_; }
  nn::Dropout<Real>& dropout() { return dropout_; }

 private:
  nn::GlobalAvgPool<Real> pool_;
  nn::Dropout<Real> dropout_;
  nn::Linear<Real> fc_;
};

/// -log softmax(logits)[label], batch mean.
template <typename Real>
LossResult<Real> rgb_loss(const Tensor<Real>& logits, std::span<const int> labels);

}  // namespace pcar
