#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pcar/classify.hpp"
#include "pcar/geometry.hpp"
#include "pcar/nn/layers.hpp"
#include "pcar/skeleton.hpp"

namespace pcar {

struct PoseHeadConfig {
  int in_channels = 2048;
  int deconv_channels = 256;
  int num_deconv = 2;
  int joints = kNumJoints;

  /// Crop pixels per heatmap cell: the backbone reduces by 32 and every
  /// deconvolution doubles resolution.
  double cell_stride() const { return 32.0 / static_cast<double>(1 << num_deconv); }
};

/// Per-frame pose head output. Channel layout per frame is
/// [K heatmaps | K x-offsets | K y-offsets]; offsets are in cell units.
template <typename Real>
struct HeatmapStack {
  Tensor<Real> maps;  // N x 3K x T x H x W
  int joints = kNumJoints;
  double cell_stride = 8.0;

  int batch() const { return maps.dim(0); }
  int frames() const { return maps.dim(2); }
  int height() const { return maps.dim(3); }
  int width() const { return maps.dim(4); }

  Real heat(int n, int t, int k, int y, int x) const { return maps.at(n, k, t, y, x); }
  Real dx(int n, int t, int k, int y, int x) const { return maps.at(n, joints + k, t, y, x); }
  Real dy(int n, int t, int k, int y, int x) const { return maps.at(n, 2 * joints + k, t, y, x); }
};

/// Deconvolutional pose head applied to every temporal slice with shared
/// weights: (4x4 stride-2 deconv -> BN -> ReLU) x num_deconv, then a 1x1
/// convolution to 3K channels.
template <typename Real>
class PoseHead {
 public:
  explicit PoseHead(const PoseHeadConfig& config);

  const PoseHeadConfig& config() const { return config_; }

  HeatmapStack<Real> forward(const Tensor<Real>& features, nn::Phase phase);
  Tensor<Real> backward(const Tensor<Real>& grad_maps);

  void init(Rng& rng);
  void collect(nn::StateDict<Real>& dict, const std::string& prefix);

 private:
  PoseHeadConfig config_;
  std::vector<nn::ConvTranspose3d<Real>> deconvs_;
  std::vector<nn::BatchNorm3d<Real>> bns_;
  std::vector<nn::ReLU<Real>> relus_;
  nn::Conv3d<Real> out_;
};

using PoseFrame = std::vector<Keypoint>;  // K joints, crop pixels
using PoseClip = std::vector<PoseFrame>;  // T frames

/// Disk-supervised heatmap and offset targets for a batch of clips.
struct PoseTargets {
  int batch = 0, joints = 0, frames = 0, height = 0, width = 0;
  double cell_stride = 8.0;
  double radius = 2.0;
  std::vector<double> heatmap;      // N x K x T x H x W in {0, 1}
  std::vector<double> offset;       // N x 2K x T x H x W, [dx | dy], cell units
  std::vector<std::uint8_t> disk;   // N x K x T x H x W
  std::vector<std::uint8_t> valid;  // N x T x K

  std::size_t map_index(int n, int k, int t, int y, int x) const {
    return ((((static_cast<std::size_t>(n) * joints + k) * frames + t) * height + y) * width) + x;
  }
  std::size_t offset_index(int n, int channel, int t, int y, int x) const {
    return ((((static_cast<std::size_t>(n) * 2 * joints + channel) * frames + t) * height + y) * width) + x;
  }
  bool is_valid(int n, int t, int k) const {
    return valid[(static_cast<std::size_t>(n) * frames + t) * joints + k] != 0;
  }
};

/// Keypoints are converted to cell coordinates (pixel / cell_stride, cell i
/// sitting at pixel i * cell_stride). Cells within `radius` cells of a
/// visible keypoint get heatmap 1 and offset (keypoint - cell); invisible
/// keypoints are masked out entirely.
PoseTargets encode_targets(std::span<const PoseClip> clips, int height, int width, double cell_stride,
                           double radius);

/// Smooth L1 with transition point 1.
double smooth_l1(double a, double b);
double smooth_l1_grad(double a, double b);

/// (1/K) sum_k sum_cells R(h, target) over valid keypoints, averaged over
/// frames and batch.
template <typename Real>
LossResult<Real> heatmap_loss(const HeatmapStack<Real>& pred, const PoseTargets& targets);

/// (1/K) sum_k sum_{cells in disk} R(dx) + R(dy), averaged like heatmap_loss.
template <typename Real>
LossResult<Real> offset_loss(const HeatmapStack<Real>& pred, const PoseTargets& targets);

struct PoseLossWeights {
  double heatmap = 0.5;
  double offset = 0.5;
};

template <typename Real>
struct PoseLoss {
  Real total{};
  Real heatmap{};
  Real offset{};
  Tensor<Real> grad;  // d total / d maps
};

template <typename Real>
PoseLoss<Real> pose_loss(const HeatmapStack<Real>& pred, const PoseTargets& targets,
                         const PoseLossWeights& weights = {});

struct DecodedKeypoint {
  double x = 0, y = 0;  // crop pixels
  double confidence = 0;
};
using DecodedPose = std::vector<DecodedKeypoint>;

/// Argmax cell (lowest row-major index on ties) plus its offset, scaled to
/// crop pixels; confidence is ReLU of the heatmap maximum. Result [N][T].
template <typename Real>
std::vector<std::vector<DecodedPose>> decode_keypoints(const HeatmapStack<Real>& pred);

/// Prediction that reproduces the targets exactly; used as the ideal input
/// when checking encode/decode consistency.
template <typename Real>
HeatmapStack<Real> targets_as_prediction(const PoseTargets& targets);

}  // namespace pcar
