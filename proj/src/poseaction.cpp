#include "pcar/poseaction.hpp"

#include <algorithm>
#include <stdexcept>

namespace pcar {

using nn::ConvSpec;
using nn::Phase;

PoseTensor build_pose_tensor(std::span<const DecodedPose> poses, double crop_w, double crop_h) {
  if (poses.empty()) throw std::invalid_argument("build_pose_tensor: no frames");
  if (!(crop_w > 0.0) || !(crop_h > 0.0)) throw std::invalid_argument("build_pose_tensor: crop size must be positive");
  const int T = static_cast<int>(poses.size());
  const int K = static_cast<int>(poses.front().size());
  PoseTensor out(T, K);
  for (int t = 0; t < T; ++t) {
    if (static_cast<int>(poses[t].size()) != K) throw std::invalid_argument("build_pose_tensor: ragged joint counts");
    for (int k = 0; k < K; ++k) {
      const DecodedKeypoint& kp = poses[t][k];
      out.at(0, t, k) = 2.0 * kp.x / crop_w - 1.0;
      out.at(1, t, k) = 2.0 * kp.y / crop_h - 1.0;
      out.at(2, t, k) = kp.confidence;
    }
  }
  return out;
}

PoseTensor mirror_pose_tensor(const PoseTensor& pose) {
  if (pose.joints != kNumJoints) throw std::invalid_argument("mirror_pose_tensor: expected the 17-joint skeleton");
  PoseTensor out(pose.frames, pose.joints);
  for (int t = 0; t < pose.frames; ++t) {
    for (int k = 0; k < pose.joints; ++k) {
      const int src = kFlipIndex[k];
      out.at(0, t, k) = -pose.at(0, t, src);
      out.at(1, t, k) = pose.at(1, t, src);
      out.at(2, t, k) = pose.at(2, t, src);
    }
  }
  return out;
}

template <typename Real>
Tensor<Real> stack_pose_tensors(std::span<const PoseTensor> poses) {
  if (poses.empty()) throw std::invalid_argument("stack_pose_tensors: empty batch");
  const int T = poses.front().frames;
  const int K = poses.front().joints;
  Tensor<Real> out({static_cast<int>(poses.size()), 3, 1, T, K});
  Real* dst = out.data();
  for (const PoseTensor& p : poses) {
    if (p.frames != T || p.joints != K) throw std::invalid_argument("stack_pose_tensors: mismatched pose tensor sizes");
    for (double v : p.values) *dst++ = static_cast<Real>(v);
  }
  return out;
}

void PoseCnnConfig::validate() const {
  if (blocks.size() != 4) throw std::invalid_argument("pose cnn: blocks needs 4 entries");
  for (int b : blocks) {
    if (b < 1) throw std::invalid_argument("pose cnn: every stage needs at least one block");
  }
  if (width_divisor < 1 || base_channels % width_divisor != 0) {
    throw std::invalid_argument("pose cnn: width_divisor must divide base_channels");
  }
  if (num_classes < 2) throw std::invalid_argument("pose cnn: need at least two classes");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("pose cnn: dropout must be in [0, 1)");
}

// ---------------------------------------------------------------------------
// BasicBlock

template <typename Real>
BasicBlock<Real>::BasicBlock(int in_channels, int out_channels)
    : conv_a_(ConvSpec{in_channels, out_channels, {1, 3, 3}, {1, 1, 1}, {0, 1, 1}}),
      conv_b_(ConvSpec{out_channels, out_channels, {1, 3, 3}, {1, 1, 1}, {0, 1, 1}}),
      bn_a_(out_channels),
      bn_b_(out_channels),
      projection_(in_channels != out_channels) {
  if (projection_) {
    shortcut_ = nn::Conv3d<Real>(ConvSpec{in_channels, out_channels, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}});
    shortcut_bn_ = nn::BatchNorm3d<Real>(out_channels);
  }
}

template <typename Real>
Tensor<Real> BasicBlock<Real>::forward(const Tensor<Real>& x, Phase phase) {
  Tensor<Real> h = relu_a_.forward(bn_a_.forward(conv_a_.forward(x, phase), phase), phase);
  h = bn_b_.forward(conv_b_.forward(h, phase), phase);
  if (projection_) {
    h += shortcut_bn_.forward(shortcut_.forward(x, phase), phase);
  } else {
    h += x;
  }
  return relu_out_.forward(h, phase);
}

template <typename Real>
Tensor<Real> BasicBlock<Real>::backward(const Tensor<Real>& grad_out) {
  const Tensor<Real> g = relu_out_.backward(grad_out);
  Tensor<Real> dx = conv_a_.backward(bn_a_.backward(relu_a_.backward(conv_b_.backward(bn_b_.backward(g)))));
  if (projection_) {
    dx += shortcut_.backward(shortcut_bn_.backward(g));
  } else {
    dx += g;
  }
  return dx;
}

template <typename Real>
void BasicBlock<Real>::init(Rng& rng) {
  conv_a_.init_he(rng);
  conv_b_.init_he(rng);
  if (projection_) shortcut_.init_he(rng);
}

template <typename Real>
void BasicBlock<Real>::collect(nn::StateDict<Real>& dict, const std::string& prefix) {
  conv_a_.collect(dict, prefix + "conv_a.");
  bn_a_.collect(dict, prefix + "bn_a.");
  conv_b_.collect(dict, prefix + "conv_b.");
  bn_b_.collect(dict, prefix + "bn_b.");
  if (projection_) {
    shortcut_.collect(dict, prefix + "shortcut.");
    shortcut_bn_.collect(dict, prefix + "shortcut_bn.");
  }
}

// ---------------------------------------------------------------------------
// PoseCnn

template <typename Real>
PoseCnn<Real>::PoseCnn(const PoseCnnConfig& config) : config_(config), dropout_(config.dropout) {
  config_.validate();
  const int width = config_.width();
  stem_ = nn::Conv3d<Real>(ConvSpec{3, width, {1, 3, 3}, {1, 1, 1}, {0, 1, 1}});
  stem_.set_input_grad(false);
  stem_bn_ = nn::BatchNorm3d<Real>(width);
  int in = width;
  for (int s = 0; s < 4; ++s) {
    const int planes = width << s;
    if (config_.bottleneck) {
      bottleneck_.emplace_back();
      for (int b = 0; b < config_.blocks[s]; ++b) {
        bottleneck_.back().emplace_back(in, planes, planes * 4, 1, 1);
        in = planes * 4;
      }
    } else {
      basic_.emplace_back();
      for (int b = 0; b < config_.blocks[s]; ++b) {
        basic_.back().emplace_back(in, planes);
        in = planes;
      }
    }
  }
  fc_ = nn::Linear<Real>(in, config_.num_classes);
}

template <typename Real>
PoseCnnOutput<Real> PoseCnn<Real>::forward(const Tensor<Real>& poses, Phase phase, Rng* rng) {
  if (poses.rank() != 5 || poses.dim(1) != 3 || poses.dim(2) != 1) {
    throw std::invalid_argument("pose cnn: expected N x 3 x 1 x T x K input, got " + shape_str(poses.shape()));
  }
  if (poses.dim(3) < 3 || poses.dim(4) < 3) {
    throw std::invalid_argument("pose cnn: T and K must be at least 3 for the 3x3 kernels, got " +
                                shape_str(poses.shape()));
  }
  stage_shapes_.clear();
  Tensor<Real> h = stem_relu_.forward(stem_bn_.forward(stem_.forward(poses, phase), phase), phase);
  stage_shapes_.push_back({"stem", h.shape()});
  for (int s = 0; s < 4; ++s) {
    if (config_.bottleneck) {
      for (auto& block : bottleneck_[s]) h = block.forward(h, phase);
    } else {
      for (auto& block : basic_[s]) h = block.forward(h, phase);
    }
    stage_shapes_.push_back({"stage" + std::to_string(s + 1), h.shape()});
  }
  PoseCnnOutput<Real> out;
  out.feature = pool_.forward(h, phase);
  out.logits = fc_.forward(dropout_.forward(out.feature, phase, rng), phase);
  return out;
}

template <typename Real>
void PoseCnn<Real>::backward(const Tensor<Real>& grad_logits) {
  Tensor<Real> g = pool_.backward(dropout_.backward(fc_.backward(grad_logits)));
  for (int s = 3; s >= 0; --s) {
    if (config_.bottleneck) {
      for (auto it = bottleneck_[s].rbegin(); it != bottleneck_[s].rend(); ++it) g = it->backward(g);
    } else {
      for (auto it = basic_[s].rbegin(); it != basic_[s].rend(); ++it) g = it->backward(g);
    }
  }
  stem_.backward(stem_bn_.backward(stem_relu_.backward(g)));
}

template <typename Real>
void PoseCnn<Real>::init(Rng& rng) {
  stem_.init_he(rng);
  for (auto& stage : basic_) {
    for (auto& block : stage) block.init(rng);
  }
  for (auto& stage : bottleneck_) {
    for (auto& block : stage) block.init(rng);
  }
  fc_.init_normal(rng, 0.01);
}

template <typename Real>
void PoseCnn<Real>::collect(nn::StateDict<Real>& dict, const std::string& prefix) {
  stem_.collect(dict, prefix + "stem.");
  stem_bn_.collect(dict, prefix + "stem_bn.");
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string stage = prefix + "stage" + std::to_string(s + 1) + ".";
    if (config_.bottleneck) {
      for (std::size_t b = 0; b < bottleneck_[s].size(); ++b) bottleneck_[s][b].collect(dict, stage + std::to_string(b) + ".");
    } else {
      for (std::size_t b = 0; b < basic_[s].size(); ++b) basic_[s][b].collect(dict, stage + std::to_string(b) + ".");
    }
  }
  fc_.collect(dict, prefix + "fc.");
}

template <typename Real>
LossResult<Real> pose_action_loss(const Tensor<Real>& logits, std::span<const int> labels) {
  return softmax_cross_entropy(logits, labels);
}

template Tensor<float> stack_pose_tensors<float>(std::span<const PoseTensor>);
template Tensor<double> stack_pose_tensors<double>(std::span<const PoseTensor>);
template class BasicBlock<float>;
template class BasicBlock<double>;
template class PoseCnn<float>;
template class PoseCnn<double>;
template LossResult<float> pose_action_loss<float>(const Tensor<float>&, std::span<const int>);
template LossResult<double> pose_action_loss<double>(const Tensor<double>&, std::span<const int>);

}  // namespace pcar
