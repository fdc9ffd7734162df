#pragma once

#include <span>
#include <string>
#include <vector>

#include "pcar/backbone.hpp"
#include "pcar/posehead.hpp"

namespace pcar {

/// 3 x T x K pose sequence: normalized x, normalized y, confidence.
struct PoseTensor {
  int frames = 0;
  int joints = 0;
  std::vector<double> values;

  PoseTensor() = default;
  PoseTensor(int frames, int joints) : frames(frames), joints(joints), values(3 * static_cast<std::size_t>(frames) * joints) {}

  double& at(int channel, int t, int k) { return values[(static_cast<std::size_t>(channel) * frames + t) * joints + k]; }
  double at(int channel, int t, int k) const {
    return values[(static_cast<std::size_t>(channel) * frames + t) * joints + k];
  }
};

/// x -> 2x/crop_w - 1, y -> 2y/crop_h - 1; confidence copied unchanged.
PoseTensor build_pose_tensor(std::span<const DecodedPose> poses, double crop_w, double crop_h);

/// Pose tensor of the horizontally mirrored crop: x negated, left/right
/// joints swapped.
PoseTensor mirror_pose_tensor(const PoseTensor& pose);

/// Stacks pose tensors into the N x 3 x 1 x T x K layout of the pose CNN.
template <typename Real>
Tensor<Real> stack_pose_tensors(std::span<const PoseTensor> poses);

struct PoseCnnConfig {
  std::vector<int> blocks{2, 2, 2, 2};
  bool bottleneck = false;
  int base_channels = 64;
  int width_divisor = 1;
  int num_classes = 4;
  double dropout = 0.5;

  int width() const { return base_channels / width_divisor; }
  int feature_channels() const { return width() * 8 * (bottleneck ? 4 : 1); }
  void validate() const;
};

template <typename Real>
class BasicBlock {
 public:
  BasicBlock(int in_channels, int out_channels);

  Tensor<Real> forward(const Tensor<Real>& x, nn::Phase phase);
  Tensor<Real> backward(const Tensor<Real>& grad_out);

  void init(Rng& rng);
  void collect(nn::StateDict<Real>& dict, const std::string& prefix);

 private:
  nn::Conv3d<Real> conv_a_, conv_b_;
  nn::BatchNorm3d<Real> bn_a_, bn_b_;
  nn::ReLU<Real> relu_a_, relu_out_;
  bool projection_ = false;
  nn::Conv3d<Real> shortcut_;
  nn::BatchNorm3d<Real> shortcut_bn_;
};

template <typename Real>
struct PoseCnnOutput {
  Tensor<Real> logits;   // N x n
  Tensor<Real> feature;  // N x C after global pooling
};

/// Residual CNN over the T x K pose grid with every stride set to 1 and no
/// pooling before the global average: 3x3 stem, four residual stages,
/// global average pool, dropout, linear classifier.
template <typename Real>
class PoseCnn {
 public:
  explicit PoseCnn(const PoseCnnConfig& config);

  const PoseCnnConfig& config() const { return config_; }

  PoseCnnOutput<Real> forward(const Tensor<Real>& poses, nn::Phase phase, Rng* rng);
  /// Accumulates parameter gradients. The pose input is a constant, so no
  /// input gradient is produced.
  void backward(const Tensor<Real>& grad_logits);

  /// Spatial shape after the stem and each stage of the last forward.
  const std::vector<StageShape>& stage_shapes() const { return stage_shapes_; }

  void init(Rng& rng);
  void collect(nn::StateDict<Real>& dict, const std::string& prefix);

  nn::Linear<Real>& fc() { return fc_; }

 private:
  PoseCnnConfig config_;
  nn::Conv3d<Real> stem_;
  nn::BatchNorm3d<Real> stem_bn_;
  nn::ReLU<Real> stem_relu_;
  std::vector<std::vector<BasicBlock<Real>>> basic_;
  std::vector<std::vector<Bottleneck<Real>>> bottleneck_;
  nn::GlobalAvgPool<Real> pool_;
  nn::Dropout<Real> dropout_;
  nn::Linear<Real> fc_;
  std::vector<StageShape> stage_shapes_;
};

template <typename Real>
LossResult<Real> pose_action_loss(const Tensor<Real>& logits, std::span<const int> labels);

}  // namespace pcar
