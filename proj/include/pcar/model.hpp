#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "pcar/backbone.hpp"
#include "pcar/poseaction.hpp"
#include "pcar/posehead.hpp"

namespace pcar {

enum class Heads { kRgbOnly, kRgbPose, kRgbPoseCnn };

std::string heads_name(Heads heads);
/// Accepts rgb_only, rgb_pose, rgb_pose_cnn; throws std::invalid_argument otherwise.
Heads parse_heads(const std::string& name);

inline bool has_pose_head(Heads h) { return h != Heads::kRgbOnly; }
inline bool has_pose_cnn(Heads h) { return h == Heads::kRgbPoseCnn; }

struct ModelConfig {
  BackboneConfig backbone;
  PoseHeadConfig head;
  PoseCnnConfig pose_cnn;
  int num_classes = 4;
  double dropout = 0.5;
  Heads heads = Heads::kRgbPoseCnn;
  double disk_radius = 2.0;  // heatmap cells
  PoseLossWeights pose_loss;

  /// Fills the dependent fields (head input channels, pose CNN classes and
  /// dropout) and validates every part.
  void finalize();
};

/// Backbone with the RGB classifier and, depending on `heads`, the pose
/// head and the pose-sequence CNN.
template <typename Real>
class ActionModel {
 public:
  explicit ActionModel(ModelConfig config);
  ActionModel(const ActionModel&) = delete;
  ActionModel& operator=(const ActionModel&) = delete;

  const ModelConfig& config() const { return config_; }
  Backbone<Real>& backbone() { return backbone_; }
  RgbClassifier<Real>& rgb() { return rgb_; }
  PoseHead<Real>* pose_head() { return head_.get(); }
  PoseCnn<Real>* pose_cnn() { return cnn_.get(); }

  /// Parameters and buffers of every present part; names start with
  /// backbone., rgb_fc., pose_head. or pose_cnn.
  nn::StateDict<Real>& state() { return state_; }

  void init(Rng& rng);
  void zero_grad() { state_.zero_grad(); }

 private:
  ModelConfig config_;
  Backbone<Real> backbone_;
  RgbClassifier<Real> rgb_;
  std::unique_ptr<PoseHead<Real>> head_;
  std::unique_ptr<PoseCnn<Real>> cnn_;
  nn::StateDict<Real> state_;
};

/// Crops in network layout: N x 3 x T x S x S plus labels and the
/// keypoints carried into crop coordinates.
template <typename Real>
struct ModelBatch {
  Tensor<Real> clips;
  std::vector<int> labels;
  std::vector<PoseClip> keypoints;  // may be empty when no pose head is trained
};

/// Converts an 8-bit or float RGB crop to network input scaling, v/127.5 - 1,
/// written at clip position (n, :, t).
template <typename Real>
void write_frame(Tensor<Real>& clips, int n, int t, const cv::Mat& crop);

struct LossWeights {
  double rgb = 1.0;
  double pose = 1.0;
  double paction = 1.0;
};

/// Unweighted loss terms; absent heads leave their entry empty.
struct LossComponents {
  std::optional<double> rgb;
  std::optional<double> pose;
  std::optional<double> paction;
};

/// lambda_1 L_r + lambda_2 L_p + lambda_3 L_paction with absent terms as 0.
double multitask_loss(const LossComponents& components, const LossWeights& weights);

template <typename Real>
struct StepOutput {
  LossComponents components;
  double total = 0.0;
  Tensor<Real> rgb_logits;
  Tensor<Real> pose_logits;
  Tensor<Real> pose_input;  // N x 3 x 1 x T x K fed to the pose CNN
  HeatmapStack<Real> heatmaps;
};

struct StepOptions {
  nn::Phase phase = nn::Phase::kTrain;
  bool backward = true;
  /// Run the pose CNN only; backbone and pose head are evaluated in eval
  /// phase and receive no gradient.
  bool pose_cnn_only = false;
};

/// One forward pass through every present head and, when requested, the
/// backward pass of the weighted multi-task loss. The pose CNN reads poses
/// decoded from the current heatmaps as a constant input; `pose_input`
/// replaces them when given. Terms with zero weight are not back-propagated.
template <typename Real>
StepOutput<Real> forward_backward(ActionModel<Real>& model, const ModelBatch<Real>& batch, const LossWeights& weights,
                                  const StepOptions& options, Rng* dropout_rng,
                                  const Tensor<Real>* pose_input = nullptr);

/// Class probabilities of both streams for a batch of crops (eval phase).
template <typename Real>
struct Probabilities {
  Tensor<Real> rgb;   // N x n
  Tensor<Real> pose;  // N x n, empty without a pose CNN
  std::vector<std::vector<DecodedPose>> poses;  // [N][T], empty without a pose head
  Tensor<Real> features;
};

template <typename Real>
Probabilities<Real> predict(ActionModel<Real>& model, const Tensor<Real>& clips);

}  // namespace pcar
