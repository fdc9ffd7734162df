#include "pcar/model.hpp"

#include <stdexcept>

namespace pcar {

using nn::Phase;

std::string heads_name(Heads heads) {
  switch (heads) {
    case Heads::kRgbOnly: return "rgb_only";
    case Heads::kRgbPose: return "rgb_pose";
    case Heads::kRgbPoseCnn: return "rgb_pose_cnn";
  }
  return "?";
}

Heads parse_heads(const std::string& name) {
  if (name == "rgb_only") return Heads::kRgbOnly;
  if (name == "rgb_pose") return Heads::kRgbPose;
  if (name == "rgb_pose_cnn") return Heads::kRgbPoseCnn;
  throw std::invalid_argument("unknown heads '" + name + "' (expected rgb_only, rgb_pose or rgb_pose_cnn)");
}

void ModelConfig::finalize() {
  backbone.validate();
  if (num_classes < 2) throw std::invalid_argument("model: need at least two classes");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("model: dropout must be in [0, 1)");
  if (!(disk_radius >= 0.0)) throw std::invalid_argument("model: disk radius must be non-negative");
  head.in_channels = backbone.feature_channels();
  pose_cnn.num_classes = num_classes;
  pose_cnn.dropout = dropout;
  pose_cnn.validate();
}

namespace {

ModelConfig finalized(ModelConfig c) {
  c.finalize();
  return c;
}

}  // namespace

template <typename Real>
ActionModel<Real>::ActionModel(ModelConfig config)
    : config_(finalized(std::move(config))),
      backbone_(config_.backbone),
      rgb_(config_.backbone.feature_channels(), config_.num_classes, config_.dropout) {
  backbone_.collect(state_, "backbone.");
  rgb_.collect(state_, "rgb_fc.");
  if (has_pose_head(config_.heads)) {
    head_ = std::make_unique<PoseHead<Real>>(config_.head);
    head_->collect(state_, "pose_head.");
  }
  if (has_pose_cnn(config_.heads)) {
    cnn_ = std::make_unique<PoseCnn<Real>>(config_.pose_cnn);
    cnn_->collect(state_, "pose_cnn.");
  }
}

template <typename Real>
void ActionModel<Real>::init(Rng& rng) {
  backbone_.init(rng);
  rgb_.init(rng);
  if (head_) head_->init(rng);
  if (cnn_) cnn_->init(rng);
}

template <typename Real>
void write_frame(Tensor<Real>& clips, int n, int t, const cv::Mat& crop) {
  const int S_h = clips.dim(3);
  const int S_w = clips.dim(4);
  if (crop.rows != S_h || crop.cols != S_w || crop.channels() != 3) {
    throw std::invalid_argument("write_frame: crop size does not match the clip tensor");
  }
  cv::Mat f;
  if (crop.depth() == CV_32F) {
    f = crop;
  } else {
    crop.convertTo(f, CV_32FC3);
  }
  for (int y = 0; y < S_h; ++y) {
    const float* row = f.ptr<float>(y);
    for (int x = 0; x < S_w; ++x) {
      for (int c = 0; c < 3; ++c) {
        clips.at(n, c, t, y, x) = static_cast<Real>(row[3 * x + c] / 127.5f - 1.0f);
      }
    }
  }
}

double multitask_loss(const LossComponents& c, const LossWeights& w) {
  double total = 0.0;
  if (c.rgb) total += w.rgb * *c.rgb;
  if (c.pose) total += w.pose * *c.pose;
  if (c.paction) total += w.paction * *c.paction;
  return total;
}

namespace {

template <typename Real>
Tensor<Real> scaled(const Tensor<Real>& g, double s) {
  Tensor<Real> out = g;
  out *= static_cast<Real>(s);
  return out;
}

template <typename Real>
Tensor<Real> decoded_pose_input(const HeatmapStack<Real>& heatmaps, int crop_w, int crop_h) {
  const auto decoded = decode_keypoints(heatmaps);
  std::vector<PoseTensor> tensors;
  tensors.reserve(decoded.size());
  for (const auto& clip : decoded) tensors.push_back(build_pose_tensor(clip, crop_w, crop_h));
  return stack_pose_tensors<Real>(tensors);
}

}  // namespace

template <typename Real>
StepOutput<Real> forward_backward(ActionModel<Real>& model, const ModelBatch<Real>& batch, const LossWeights& weights,
                                  const StepOptions& options, Rng* dropout_rng, const Tensor<Real>* pose_input) {
  const ModelConfig& cfg = model.config();
  const bool train_trunk = !options.pose_cnn_only;
  const Phase trunk_phase = train_trunk ? options.phase : Phase::kEval;
  const bool backward = options.backward && options.phase == Phase::kTrain;

  StepOutput<Real> out;
  const Tensor<Real> features = model.backbone().forward(batch.clips, trunk_phase);
  const RgbOutput<Real> rgb = model.rgb().forward(features, trunk_phase, dropout_rng);
  out.rgb_logits = rgb.logits;
  const LossResult<Real> l_rgb = rgb_loss(rgb.logits, batch.labels);
  out.components.rgb = l_rgb.value;

  PoseLoss<Real> l_pose;
  if (PoseHead<Real>* head = model.pose_head()) {
    out.heatmaps = head->forward(features, trunk_phase);
    if (!batch.keypoints.empty()) {
      const PoseTargets targets = encode_targets(batch.keypoints, out.heatmaps.height(), out.heatmaps.width(),
                                                 out.heatmaps.cell_stride, cfg.disk_radius);
      l_pose = pose_loss(out.heatmaps, targets, cfg.pose_loss);
      out.components.pose = l_pose.total;
    }
  }

  LossResult<Real> l_paction;
  if (PoseCnn<Real>* cnn = model.pose_cnn()) {
    out.pose_input = pose_input ? *pose_input
                                : decoded_pose_input(out.heatmaps, batch.clips.dim(4), batch.clips.dim(3));
    out.pose_logits = cnn->forward(out.pose_input, options.phase, dropout_rng).logits;
    l_paction = pose_action_loss(out.pose_logits, batch.labels);
    out.components.paction = l_paction.value;
  }

  if (options.pose_cnn_only) {
    out.components.rgb.reset();
    out.components.pose.reset();
  }
  out.total = multitask_loss(out.components, weights);
  if (!backward) return out;

  if (train_trunk) {
    Tensor<Real> grad_features;
    if (weights.rgb != 0.0) grad_features = model.rgb().backward(scaled(l_rgb.grad, weights.rgb));
    if (out.components.pose && weights.pose != 0.0) {
      Tensor<Real> g = model.pose_head()->backward(scaled(l_pose.grad, weights.pose));
      if (grad_features.numel() == 0) {
        grad_features = std::move(g);
      } else {
        grad_features += g;
      }
    }
    if (grad_features.numel() != 0) model.backbone().backward(grad_features);
  }
  if (out.components.paction && weights.paction != 0.0) {
    model.pose_cnn()->backward(scaled(l_paction.grad, weights.paction));
  }
  return out;
}

template <typename Real>
Probabilities<Real> predict(ActionModel<Real>& model, const Tensor<Real>& clips) {
  Probabilities<Real> out;
  out.features = model.backbone().forward(clips, Phase::kEval);
  out.rgb = softmax(model.rgb().forward(out.features, Phase::kEval, nullptr).logits);
  if (PoseHead<Real>* head = model.pose_head()) {
    const HeatmapStack<Real> heatmaps = head->forward(out.features, Phase::kEval);
    out.poses = decode_keypoints(heatmaps);
    if (PoseCnn<Real>* cnn = model.pose_cnn()) {
      std::vector<PoseTensor> tensors;
      for (const auto& clip : out.poses) tensors.push_back(build_pose_tensor(clip, clips.dim(4), clips.dim(3)));
      out.pose = softmax(cnn->forward(stack_pose_tensors<Real>(tensors), Phase::kEval, nullptr).logits);
    }
  }
  return out;
}

template class ActionModel<float>;
template class ActionModel<double>;
template void write_frame<float>(Tensor<float>&, int, int, const cv::Mat&);
template void write_frame<double>(Tensor<double>&, int, int, const cv::Mat&);
template StepOutput<float> forward_backward<float>(ActionModel<float>&, const ModelBatch<float>&, const LossWeights&,
                                                   const StepOptions&, Rng*, const Tensor<float>*);
template StepOutput<double> forward_backward<double>(ActionModel<double>&, const ModelBatch<double>&,
                                                     const LossWeights&, const StepOptions&, Rng*,
                                                     const Tensor<double>*);
template Probabilities<float> predict<float>(ActionModel<float>&, const Tensor<float>&);
template Probabilities<double> predict<double>(ActionModel<double>&, const Tensor<double>&);

}  // namespace pcar
