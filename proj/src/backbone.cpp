#include "pcar/backbone.hpp"

#include <stdexcept>

namespace pcar {

using nn::ConvSpec;
using nn::Dims3;
using nn::Phase;

void BackboneConfig::validate() const {
  if (stage_blocks.size() != 4) throw std::invalid_argument("backbone: stage_blocks needs 4 entries");
  if (block_temporal.size() != 4) throw std::invalid_argument("backbone: block_temporal needs 4 entries");
  for (int b : stage_blocks) {
    if (b < 1) throw std::invalid_argument("backbone: every stage needs at least one block");
  }
  for (int k : block_temporal) {
    if (k < 1 || k % 2 == 0) throw std::invalid_argument("backbone: block temporal kernels must be odd and >= 1");
  }
  if (conv1_temporal < 1 || conv1_temporal % 2 == 0) {
    throw std::invalid_argument("backbone: conv1 temporal kernel must be odd and >= 1");
  }
  if (width_divisor < 1 || base_channels % width_divisor != 0) {
    throw std::invalid_argument("backbone: width_divisor must divide base_channels");
  }
  if (clip_length < 1) throw std::invalid_argument("backbone: clip_length must be >= 1");
  if (input_size < 32 || input_size % 32 != 0) throw std::invalid_argument("backbone: input size must be a multiple of 32");
}

// ---------------------------------------------------------------------------
// Bottleneck

template <typename Real>
Bottleneck<Real>::Bottleneck(int in_channels, int mid_channels, int out_channels, int temporal_kernel,
                             int spatial_stride)
    : conv_a_(ConvSpec{in_channels, mid_channels, {temporal_kernel, 1, 1}, {1, 1, 1}, {(temporal_kernel - 1) / 2, 0, 0}}),
      conv_b_(ConvSpec{mid_channels, mid_channels, {1, 3, 3}, {1, spatial_stride, spatial_stride}, {0, 1, 1}}),
      conv_c_(ConvSpec{mid_channels, out_channels, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}}),
      bn_a_(mid_channels),
      bn_b_(mid_channels),
      bn_c_(out_channels),
      projection_(in_channels != out_channels || spatial_stride != 1) {
  if (projection_) {
    shortcut_ = nn::Conv3d<Real>(ConvSpec{in_channels, out_channels, {1, 1, 1}, {1, spatial_stride, spatial_stride}, {0, 0, 0}});
    shortcut_bn_ = nn::BatchNorm3d<Real>(out_channels);
  }
}

template <typename Real>
Tensor<Real> Bottleneck<Real>::forward(const Tensor<Real>& x, Phase phase) {
  Tensor<Real> h = relu_a_.forward(bn_a_.forward(conv_a_.forward(x, phase), phase), phase);
  h = relu_b_.forward(bn_b_.forward(conv_b_.forward(h, phase), phase), phase);
  h = bn_c_.forward(conv_c_.forward(h, phase), phase);
  if (projection_) {
    h += shortcut_bn_.forward(shortcut_.forward(x, phase), phase);
  } else {
    h += x;
  }
  return relu_out_.forward(h, phase);
}

template <typename Real>
Tensor<Real> Bottleneck<Real>::backward(const Tensor<Real>& grad_out) {
  const Tensor<Real> g = relu_out_.backward(grad_out);
  Tensor<Real> dx = conv_a_.backward(bn_a_.backward(relu_a_.backward(
      conv_b_.backward(bn_b_.backward(relu_b_.backward(conv_c_.backward(bn_c_.backward(g))))))));
  if (projection_) {
    dx += shortcut_.backward(shortcut_bn_.backward(g));
  } else {
    dx += g;
  }
  return dx;
}

template <typename Real>
void Bottleneck<Real>::init(Rng& rng) {
  conv_a_.init_he(rng);
  conv_b_.init_he(rng);
  conv_c_.init_he(rng);
  if (projection_) shortcut_.init_he(rng);
}

template <typename Real>
void Bottleneck<Real>::collect(nn::StateDict<Real>& dict, const std::string& prefix) {
  conv_a_.collect(dict, prefix + "conv_a.");
  bn_a_.collect(dict, prefix + "bn_a.");
  conv_b_.collect(dict, prefix + "conv_b.");
  bn_b_.collect(dict, prefix + "bn_b.");
  conv_c_.collect(dict, prefix + "conv_c.");
  bn_c_.collect(dict, prefix + "bn_c.");
  if (projection_) {
    shortcut_.collect(dict, prefix + "shortcut.");
    shortcut_bn_.collect(dict, prefix + "shortcut_bn.");
  }
}

template <typename Real>
void Bottleneck<Real>::temporal_extents(std::map<std::string, int>& out, const std::string& prefix) const {
  out[prefix + "conv_a.weight"] = conv_a_.spec().kernel.t;
  out[prefix + "conv_b.weight"] = 1;
  out[prefix + "conv_c.weight"] = 1;
  if (projection_) out[prefix + "shortcut.weight"] = 1;
}

// ---------------------------------------------------------------------------
// Backbone

template <typename Real>
Backbone<Real>::Backbone(const BackboneConfig& config) : config_(config) {
  config_.validate();
  const int width = config_.width();
  const int kt = config_.conv1_temporal;
  conv1_ = nn::Conv3d<Real>(ConvSpec{3, width, {kt, 7, 7}, {1, 2, 2}, {(kt - 1) / 2, 3, 3}});
  conv1_.set_input_grad(false);
  bn1_ = nn::BatchNorm3d<Real>(width);
  pool1_ = nn::MaxPool3d<Real>(Dims3{1, 3, 3}, Dims3{1, 2, 2}, Dims3{0, 1, 1});

  int in_channels = width;
  for (int s = 0; s < 4; ++s) {
    const int mid = width << s;
    const int out = mid * 4;
    std::vector<Bottleneck<Real>> blocks;
    for (int b = 0; b < config_.stage_blocks[s]; ++b) {
      const int stride = (b == 0 && s > 0) ? 2 : 1;
      blocks.emplace_back(in_channels, mid, out, config_.block_temporal[s], stride);
      in_channels = out;
    }
    stages_.push_back(std::move(blocks));
  }
}

template <typename Real>
Tensor<Real> Backbone<Real>::forward(const Tensor<Real>& clips, Phase phase) {
  if (clips.rank() != 5 || clips.dim(1) != 3) {
    throw std::invalid_argument("backbone: expected N x 3 x T x H x W clips, got " + shape_str(clips.shape()));
  }
  stage_shapes_.clear();
  Tensor<Real> h = relu1_.forward(bn1_.forward(conv1_.forward(clips, phase), phase), phase);
  stage_shapes_.push_back({"conv1", h.shape()});
  h = pool1_.forward(h, phase);
  stage_shapes_.push_back({"pool1", h.shape()});
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (auto& block : stages_[s]) h = block.forward(h, phase);
    stage_shapes_.push_back({"res" + std::to_string(s + 2), h.shape()});
  }
  return h;
}

template <typename Real>
void Backbone<Real>::backward(const Tensor<Real>& grad_features) {
  Tensor<Real> g = grad_features;
  for (auto s = stages_.rbegin(); s != stages_.rend(); ++s) {
    for (auto b = s->rbegin(); b != s->rend(); ++b) g = b->backward(g);
  }
  g = pool1_.backward(g);
  conv1_.backward(bn1_.backward(relu1_.backward(g)));
}

template <typename Real>
void Backbone<Real>::init(Rng& rng) {
  conv1_.init_he(rng);
  for (auto& stage : stages_) {
    for (auto& block : stage) block.init(rng);
  }
}

template <typename Real>
void Backbone<Real>::collect(nn::StateDict<Real>& dict, const std::string& prefix) {
  conv1_.collect(dict, prefix + "conv1.");
  bn1_.collect(dict, prefix + "bn1.");
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      stages_[s][b].collect(dict, prefix + "res" + std::to_string(s + 2) + "." + std::to_string(b) + ".");
    }
  }
}

template <typename Real>
std::map<std::string, int> Backbone<Real>::temporal_extents(const std::string& prefix) const {
  std::map<std::string, int> out;
  out[prefix + "conv1.weight"] = config_.conv1_temporal;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      stages_[s][b].temporal_extents(out, prefix + "res" + std::to_string(s + 2) + "." + std::to_string(b) + ".");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Inflation

template <typename Real>
NamedTensors<Real> inflate_weights(const NamedTensors<Real>& weights_2d,
                                   const std::map<std::string, int>& temporal_extents) {
  NamedTensors<Real> out;
  for (const auto& [name, kt] : temporal_extents) {
    if (!weights_2d.contains(name)) throw std::invalid_argument("inflate_weights: missing 2D weight for layer " + name);
  }
  for (const auto& [name, tensor] : weights_2d) {
    const auto it = temporal_extents.find(name);
    if (it == temporal_extents.end()) {
      out.emplace(name, tensor);
      continue;
    }
    const int kt = it->second;
    if (tensor.rank() != 4) {
      throw std::invalid_argument("inflate_weights: layer " + name + " expects a Cout x Cin x kh x kw kernel, got " +
                                  shape_str(tensor.shape()));
    }
    if (kt < 1) throw std::invalid_argument("inflate_weights: layer " + name + " has temporal extent < 1");
    const int cout = tensor.dim(0), cin = tensor.dim(1), kh = tensor.dim(2), kw = tensor.dim(3);
    Tensor<Real> inflated({cout, cin, kt, kh, kw});
    const std::int64_t plane = static_cast<std::int64_t>(kh) * kw;
    const Real scale = Real(1) / static_cast<Real>(kt);
    for (std::int64_t oc = 0; oc < static_cast<std::int64_t>(cout) * cin; ++oc) {
      const Real* src = tensor.data() + oc * plane;
      Real* dst = inflated.data() + oc * kt * plane;
      for (int t = 0; t < kt; ++t) {
        for (std::int64_t i = 0; i < plane; ++i) dst[t * plane + i] = kt == 1 ? src[i] : src[i] * scale;
      }
    }
    out.emplace(name, std::move(inflated));
  }
  return out;
}

template <typename Real>
void load_named(nn::StateDict<Real>& dict, const NamedTensors<Real>& tensors) {
  for (const auto& [name, tensor] : tensors) {
    Tensor<Real>* target = nullptr;
    if (auto* p = dict.find(name)) target = &p->value;
    for (auto& b : dict.buffers) {
      if (b.name == name) target = b.tensor;
    }
    if (target == nullptr) throw std::invalid_argument("load: no parameter named " + name);
    if (target->shape() != tensor.shape()) {
      throw std::invalid_argument("load: layer " + name + " expects " + shape_str(target->shape()) + ", got " +
                                  shape_str(tensor.shape()));
    }
    *target = tensor;
  }
}

// ---------------------------------------------------------------------------
// RGB classification head

template <typename Real>
RgbClassifier<Real>::RgbClassifier(int feature_channels, int num_classes, double dropout)
    : dropout_(dropout), fc_(feature_channels, num_classes) {
  if (num_classes < 2) throw std::invalid_argument("rgb head: need at least two classes");
}

template <typename Real>
RgbOutput<Real> RgbClassifier<Real>::forward(const Tensor<Real>& features, Phase phase, Rng* rng) {
  RgbOutput<Real> out;
  out.pooled = pool_.forward(features, phase);
  out.logits = fc_.forward(dropout_.forward(out.pooled, phase, rng), phase);
  return out;
}

template <typename Real>
Tensor<Real> RgbClassifier<Real>::backward(const Tensor<Real>& grad_logits) {
  return pool_.backward(dropout_.backward(fc_.backward(grad_logits)));
}

template <typename Real>
void RgbClassifier<Real>::init(Rng& rng) {
  fc_.init_normal(rng, 0.01);
}

template <typename Real>
void RgbClassifier<Real>::collect(nn::StateDict<Real>& dict, const std::string& prefix) {
  fc_.collect(dict, prefix);
}

template <typename Real>
LossResult<Real> rgb_loss(const Tensor<Real>& logits, std::span<const int> labels) {
  return softmax_cross_entropy(logits, labels);
}

template class Bottleneck<float>;
template class Bottleneck<double>;
template class Backbone<float>;
template class Backbone<double>;
template class RgbClassifier<float>;
template class RgbClassifier<double>;
template NamedTensors<float> inflate_weights<float>(const NamedTensors<float>&, const std::map<std::string, int>&);
template NamedTensors<double> inflate_weights<double>(const NamedTensors<double>&, const std::map<std::string, int>&);
template void load_named<float>(nn::StateDict<float>&, const NamedTensors<float>&);
template void load_named<double>(nn::StateDict<double>&, const NamedTensors<double>&);
template LossResult<float> rgb_loss<float>(const Tensor<float>&, std::span<const int>);
template LossResult<double> rgb_loss<double>(const Tensor<double>&, std::span<const int>);

}  // namespace pcar
