#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pcar/trainer.hpp"

namespace pcar {

/// Boxes of the input's size centred at c - d, c, c + d with
/// d = (side/4, side/4), shifted back inside the frame when they overflow.
std::array<Box, 3> three_crop_boxes(const Box& box, double frame_w, double frame_h);

/// Square of side min(W, H) centred in the frame; the test-time region
/// of the random-crop baseline.
Box center_square_box(double frame_w, double frame_h);

struct VideoPrediction {
  std::vector<double> rgb;    // mean softmax over clips and crops
  std::vector<double> pose;   // empty without a pose CNN
  std::vector<double> fused;  // rgb + pose, not renormalized
  int predicted = 0;
  /// Centre-crop keypoints per evaluated clip, mapped back to frame pixels,
  /// with the frame index they belong to. Empty without a pose head.
  std::vector<std::vector<DecodedKeypoint>> frame_poses;
  std::vector<int> pose_frames;
};

/// p_rgb + p_pose elementwise (p_rgb when p_pose is empty).
std::vector<double> fuse(const std::vector<double>& rgb, const std::vector<double>& pose);

/// Evenly spaced clips x three crops, softmax per head per crop, averaged
/// per stream and fused by summation.
VideoPrediction evaluate_video(ActionModel<float>& model, const VideoRecord& video, const TrainConfig& config);

/// Fraction of argmax(prediction) == label. Throws on empty or mismatched input.
double top1_accuracy(std::span<const std::vector<double>> predictions, std::span<const int> labels);

/// Object keypoint similarity of one prediction against visible ground truth.
double oks(std::span<const DecodedKeypoint> pred, std::span<const Keypoint> gt, double area, double kappa = 0.08);

/// Mean over OKS thresholds 0.50:0.05:0.95 of 101-point interpolated AP,
/// one prediction per ground-truth instance, ranked by `scores`.
double oks_ap(std::span<const std::vector<DecodedKeypoint>> preds, std::span<const std::vector<Keypoint>> gts,
              std::span<const double> areas, std::span<const double> scores, double kappa = 0.08);

/// Mean keypoint confidence, the instance score used for ranking.
double pose_score(std::span<const DecodedKeypoint> pose);

/// Class activation maps for sample n: per frame, sum_c w[class, c] * f[c].
/// Raw values (T maps of H' x W', CV_64F).
std::vector<cv::Mat> compute_cam(const Tensor<float>& features, int n, const nn::Linear<float>& fc, int class_id);
/// Min-max scaling to [0, 1]; a constant map becomes all zeros.
cv::Mat normalize_cam(const cv::Mat& cam);

struct EvalReport {
  double top1_rgb = 0;
  std::optional<double> top1_pose;
  double top1_fused = 0;
  std::optional<double> oks_map;
  std::vector<double> per_class_accuracy;
  std::vector<VideoPrediction> predictions;
};

/// Evaluates every video of `split`. Throws std::runtime_error when the
/// split is empty.
EvalReport evaluate(ActionModel<float>& model, const Dataset& dataset, const std::string& split,
                    const TrainConfig& config);

/// {top1_rgb, top1_pose, top1_fused, oks_map, per_class_accuracy}; pose
/// fields are omitted for models without them.
std::string report_json(const EvalReport& report);

/// Writes one skeleton overlay PNG per frame (000000.png, ...) and returns
/// the number written.
int write_pose_overlays(ActionModel<float>& model, const VideoRecord& video, const TrainConfig& config,
                        const std::filesystem::path& out_dir);
/// Writes one CAM overlay PNG per frame for `class_id`.
int write_cam_overlays(ActionModel<float>& model, const VideoRecord& video, const TrainConfig& config, int class_id,
                       const std::filesystem::path& out_dir);

}  // namespace pcar
