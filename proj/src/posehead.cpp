#include "pcar/posehead.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pcar {

using nn::ConvSpec;
using nn::Phase;

template <typename Real>
PoseHead<Real>::PoseHead(const PoseHeadConfig& config) : config_(config) {
  if (config.num_deconv < 1) throw std::invalid_argument("pose head: need at least one deconvolution");
  if (config.joints < 1) throw std::invalid_argument("pose head: need at least one joint");
  int in = config.in_channels;
  for (int i = 0; i < config.num_deconv; ++i) {
    deconvs_.emplace_back(ConvSpec{in, config.deconv_channels, {1, 4, 4}, {1, 2, 2}, {0, 1, 1}});
    bns_.emplace_back(config.deconv_channels);
    relus_.emplace_back();
    in = config.deconv_channels;
  }
  out_ = nn::Conv3d<Real>(ConvSpec{in, 3 * config.joints, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}, true});
}

template <typename Real>
HeatmapStack<Real> PoseHead<Real>::forward(const Tensor<Real>& features, Phase phase) {
  Tensor<Real> h = features;
  for (std::size_t i = 0; i < deconvs_.size(); ++i) {
    h = relus_[i].forward(bns_[i].forward(deconvs_[i].forward(h, phase), phase), phase);
  }
  HeatmapStack<Real> out;
  out.maps = out_.forward(h, phase);
  out.joints = config_.joints;
  out.cell_stride = config_.cell_stride();
  return out;
}

template <typename Real>
Tensor<Real> PoseHead<Real>::backward(const Tensor<Real>& grad_maps) {
  Tensor<Real> g = out_.backward(grad_maps);
  for (std::size_t i = deconvs_.size(); i-- > 0;) {
    g = deconvs_[i].backward(bns_[i].backward(relus_[i].backward(g)));
  }
  return g;
}

template <typename Real>
void PoseHead<Real>::init(Rng& rng) {
  for (auto& d : deconvs_) d.init_normal(rng, 0.001);
  out_.init_normal(rng, 0.001);
}

template <typename Real>
void PoseHead<Real>::collect(nn::StateDict<Real>& dict, const std::string& prefix) {
  for (std::size_t i = 0; i < deconvs_.size(); ++i) {
    deconvs_[i].collect(dict, prefix + "deconv" + std::to_string(i + 1) + ".");
    bns_[i].collect(dict, prefix + "bn" + std::to_string(i + 1) + ".");
  }
  out_.collect(dict, prefix + "out.");
}

// ---------------------------------------------------------------------------
// Targets

PoseTargets encode_targets(std::span<const PoseClip> clips, int height, int width, double cell_stride,
                           double radius) {
  if (clips.empty()) throw std::invalid_argument("encode_targets: empty batch");
  if (height < 1 || width < 1 || !(cell_stride > 0.0) || !(radius >= 0.0)) {
    throw std::invalid_argument("encode_targets: invalid grid");
  }
  PoseTargets t;
  t.batch = static_cast<int>(clips.size());
  t.frames = static_cast<int>(clips.front().size());
  t.joints = t.frames > 0 ? static_cast<int>(clips.front().front().size()) : 0;
  t.height = height;
  t.width = width;
  t.cell_stride = cell_stride;
  t.radius = radius;
  const std::size_t maps = static_cast<std::size_t>(t.batch) * t.joints * t.frames * height * width;
  t.heatmap.assign(maps, 0.0);
  t.disk.assign(maps, 0);
  t.offset.assign(2 * maps, 0.0);
  t.valid.assign(static_cast<std::size_t>(t.batch) * t.frames * t.joints, 0);
  const double r2 = radius * radius;

  for (int n = 0; n < t.batch; ++n) {
    if (static_cast<int>(clips[n].size()) != t.frames) throw std::invalid_argument("encode_targets: ragged clip lengths");
    for (int f = 0; f < t.frames; ++f) {
      const auto& frame = clips[n][f];
      if (static_cast<int>(frame.size()) != t.joints) throw std::invalid_argument("encode_targets: ragged joint counts");
      for (int k = 0; k < t.joints; ++k) {
        const Keypoint& kp = frame[k];
        if (!kp.visible || !std::isfinite(kp.x) || !std::isfinite(kp.y)) continue;
        t.valid[(static_cast<std::size_t>(n) * t.frames + f) * t.joints + k] = 1;
        const double u = kp.x / cell_stride;
        const double v = kp.y / cell_stride;
        const int y_lo = std::max(0, static_cast<int>(std::ceil(v - radius)));
        const int y_hi = std::min(height - 1, static_cast<int>(std::floor(v + radius)));
        const int x_lo = std::max(0, static_cast<int>(std::ceil(u - radius)));
        const int x_hi = std::min(width - 1, static_cast<int>(std::floor(u + radius)));
        for (int y = y_lo; y <= y_hi; ++y) {
          for (int x = x_lo; x <= x_hi; ++x) {
            const double du = u - x;
            const double dv = v - y;
            if (du * du + dv * dv > r2) continue;
            const std::size_t i = t.map_index(n, k, f, y, x);
            t.heatmap[i] = 1.0;
            t.disk[i] = 1;
            t.offset[t.offset_index(n, k, f, y, x)] = du;
            t.offset[t.offset_index(n, t.joints + k, f, y, x)] = dv;
          }
        }
      }
    }
  }
  return t;
}

double smooth_l1(double a, double b) {
  const double d = std::abs(a - b);
  return d < 1.0 ? 0.5 * d * d : d - 0.5;
}

double smooth_l1_grad(double a, double b) {
  const double d = a - b;
  if (d >= 1.0) return 1.0;
  if (d <= -1.0) return -1.0;
  return d;
}

namespace {

template <typename Real>
void check_match(const HeatmapStack<Real>& pred, const PoseTargets& t) {
  const Shape expected{t.batch, 3 * t.joints, t.frames, t.height, t.width};
  if (pred.maps.shape() != expected || pred.joints != t.joints) {
    throw std::invalid_argument("pose loss: prediction " + shape_str(pred.maps.shape()) + " does not match targets " +
                                shape_str(expected));
  }
}

}  // namespace

template <typename Real>
LossResult<Real> heatmap_loss(const HeatmapStack<Real>& pred, const PoseTargets& t) {
  check_match(pred, t);
  LossResult<Real> out;
  out.grad = Tensor<Real>(pred.maps.shape());
  const double norm = static_cast<double>(t.joints) * t.frames * t.batch;
  double total = 0.0;
  for (int n = 0; n < t.batch; ++n) {
    for (int f = 0; f < t.frames; ++f) {
      for (int k = 0; k < t.joints; ++k) {
        if (!t.is_valid(n, f, k)) continue;
        for (int y = 0; y < t.height; ++y) {
          for (int x = 0; x < t.width; ++x) {
            const double h = pred.maps.at(n, k, f, y, x);
            const double target = t.heatmap[t.map_index(n, k, f, y, x)];
            total += smooth_l1(h, target);
            out.grad.at(n, k, f, y, x) = static_cast<Real>(smooth_l1_grad(h, target) / norm);
          }
        }
      }
    }
  }
  out.value = static_cast<Real>(total / norm);
  return out;
}

template <typename Real>
LossResult<Real> offset_loss(const HeatmapStack<Real>& pred, const PoseTargets& t) {
  check_match(pred, t);
  LossResult<Real> out;
  out.grad = Tensor<Real>(pred.maps.shape());
  const double norm = static_cast<double>(t.joints) * t.frames * t.batch;
  const int K = t.joints;
  double total = 0.0;
  for (int n = 0; n < t.batch; ++n) {
    for (int k = 0; k < K; ++k) {
      for (int f = 0; f < t.frames; ++f) {
        for (int y = 0; y < t.height; ++y) {
          for (int x = 0; x < t.width; ++x) {
            if (!t.disk[t.map_index(n, k, f, y, x)]) continue;
            for (int axis = 0; axis < 2; ++axis) {
              const int channel = K + axis * K + k;
              const double p = pred.maps.at(n, channel, f, y, x);
              const double target = t.offset[t.offset_index(n, axis * K + k, f, y, x)];
              total += smooth_l1(p, target);
              out.grad.at(n, channel, f, y, x) = static_cast<Real>(smooth_l1_grad(p, target) / norm);
            }
          }
        }
      }
    }
  }
  out.value = static_cast<Real>(total / norm);
  return out;
}

template <typename Real>
PoseLoss<Real> pose_loss(const HeatmapStack<Real>& pred, const PoseTargets& targets, const PoseLossWeights& w) {
  auto lh = heatmap_loss(pred, targets);
  auto lo = offset_loss(pred, targets);
  PoseLoss<Real> out;
  out.heatmap = lh.value;
  out.offset = lo.value;
  out.total = static_cast<Real>(w.heatmap * lh.value + w.offset * lo.value);
  out.grad = Tensor<Real>(pred.maps.shape());
  const Real wh = static_cast<Real>(w.heatmap);
  const Real wo = static_cast<Real>(w.offset);
  for (std::int64_t i = 0; i < out.grad.numel(); ++i) out.grad[i] = wh * lh.grad[i] + wo * lo.grad[i];
  return out;
}

template <typename Real>
std::vector<std::vector<DecodedPose>> decode_keypoints(const HeatmapStack<Real>& pred) {
  const int N = pred.batch(), T = pred.frames(), H = pred.height(), W = pred.width(), K = pred.joints;
  if (pred.maps.dim(1) != 3 * K) throw std::invalid_argument("decode_keypoints: expected 3K channels");
  std::vector<std::vector<DecodedPose>> out(static_cast<std::size_t>(N), std::vector<DecodedPose>(T, DecodedPose(K)));
  for (int n = 0; n < N; ++n) {
    for (int t = 0; t < T; ++t) {
      for (int k = 0; k < K; ++k) {
        const Real* plane = &pred.maps.at(n, k, t, 0, 0);
        int best = 0;
        for (int i = 1; i < H * W; ++i) {
          if (plane[i] > plane[best]) best = i;
        }
        const int y = best / W;
        const int x = best % W;
        DecodedKeypoint& kp = out[n][t][k];
        kp.x = (x + static_cast<double>(pred.dx(n, t, k, y, x))) * pred.cell_stride;
        kp.y = (y + static_cast<double>(pred.dy(n, t, k, y, x))) * pred.cell_stride;
        kp.confidence = std::max(0.0, static_cast<double>(plane[best]));
      }
    }
  }
  return out;
}

template <typename Real>
HeatmapStack<Real> targets_as_prediction(const PoseTargets& t) {
  HeatmapStack<Real> pred;
  pred.joints = t.joints;
  pred.cell_stride = t.cell_stride;
  pred.maps = Tensor<Real>({t.batch, 3 * t.joints, t.frames, t.height, t.width});
  for (int n = 0; n < t.batch; ++n) {
    for (int k = 0; k < t.joints; ++k) {
      for (int f = 0; f < t.frames; ++f) {
        for (int y = 0; y < t.height; ++y) {
          for (int x = 0; x < t.width; ++x) {
            pred.maps.at(n, k, f, y, x) = static_cast<Real>(t.heatmap[t.map_index(n, k, f, y, x)]);
            pred.maps.at(n, t.joints + k, f, y, x) = static_cast<Real>(t.offset[t.offset_index(n, k, f, y, x)]);
            pred.maps.at(n, 2 * t.joints + k, f, y, x) =
                static_cast<Real>(t.offset[t.offset_index(n, t.joints + k, f, y, x)]);
          }
        }
      }
    }
  }
  return pred;
}

template class PoseHead<float>;
template class PoseHead<double>;
template LossResult<float> heatmap_loss<float>(const HeatmapStack<float>&, const PoseTargets&);
template LossResult<double> heatmap_loss<double>(const HeatmapStack<double>&, const PoseTargets&);
template LossResult<float> offset_loss<float>(const HeatmapStack<float>&, const PoseTargets&);
template LossResult<double> offset_loss<double>(const HeatmapStack<double>&, const PoseTargets&);
template PoseLoss<float> pose_loss<float>(const HeatmapStack<float>&, const PoseTargets&, const PoseLossWeights&);
template PoseLoss<double> pose_loss<double>(const HeatmapStack<double>&, const PoseTargets&, const PoseLossWeights&);
template std::vector<std::vector<DecodedPose>> decode_keypoints<float>(const HeatmapStack<float>&);
template std::vector<std::vector<DecodedPose>> decode_keypoints<double>(const HeatmapStack<double>&);
template HeatmapStack<float> targets_as_prediction<float>(const PoseTargets&);
template HeatmapStack<double> targets_as_prediction<double>(const PoseTargets&);

}  // namespace pcar
