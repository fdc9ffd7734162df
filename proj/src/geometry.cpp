#include "pcar/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "pcar/skeleton.hpp"

namespace pcar {

bool Box::finite() const {
  return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1);
}

Box clamp_box(const Box& box, double frame_w, double frame_h) {
  return {std::clamp(box.x0, 0.0, frame_w), std::clamp(box.y0, 0.0, frame_h), std::clamp(box.x1, 0.0, frame_w),
          std::clamp(box.y1, 0.0, frame_h)};
}

std::vector<Box> filter_detections(std::span<const DetectedBox> detections, double threshold) {
  std::vector<Box> kept;
  for (const auto& d : detections) {
    if (d.confidence >= threshold) kept.push_back(d.box);
  }
  return kept;
}

Box merge_boxes(std::span<const Box> boxes, double frame_w, double frame_h) {
  if (boxes.empty()) return {0.0, 0.0, frame_w, frame_h};
  Box out = boxes.front();
  for (const auto& b : boxes) {
    if (!b.finite()) throw std::invalid_argument("merge_boxes: non-finite box coordinate");
    out.x0 = std::min(out.x0, b.x0);
    out.y0 = std::min(out.y0, b.y0);
    out.x1 = std::max(out.x1, b.x1);
    out.y1 = std::max(out.y1, b.y1);
  }
  return clamp_box(out, frame_w, frame_h);
}

Box expand_to_square(const Box& box) {
  const double w = box.width();
  const double h = box.height();
  Box out = box;
  if (w < h) {
    const double cx = box.center_x();
    out.x0 = cx - 0.5 * h;
    out.x1 = cx + 0.5 * h;
  } else if (h < w) {
    const double cy = box.center_y();
    out.y0 = cy - 0.5 * w;
    out.y1 = cy + 0.5 * w;
  }
  return out;
}

Box expand_to_aspect(const Box& box, double frame_w, double frame_h) {
  return clamp_box(expand_to_square(box), frame_w, frame_h);
}

Box jitter_box(const Box& box, Rng& rng, double max_center_frac, double max_scale_frac, double frame_w,
               double frame_h) {
  const double fx = 2.0 * uniform01(rng) - 1.0;
  const double fy = 2.0 * uniform01(rng) - 1.0;
  const double fw = 2.0 * uniform01(rng) - 1.0;
  const double fh = 2.0 * uniform01(rng) - 1.0;
  const double w = box.width();
  const double h = box.height();
  const double dx = fx * max_center_frac * w;
  const double dy = fy * max_center_frac * h;
  const double grow_w = w * fw * max_scale_frac;
  const double grow_h = h * fh * max_scale_frac;
  Box out{box.x0 + dx - 0.5 * grow_w, box.y0 + dy - 0.5 * grow_h, box.x1 + dx + 0.5 * grow_w,
          box.y1 + dy + 0.5 * grow_h};
  return clamp_box(out, frame_w, frame_h);
}

Box random_square_box(double frame_w, double frame_h, double min_scale, Rng& rng) {
  const double short_side = std::min(frame_w, frame_h);
  const double side = short_side * uniform(rng, min_scale, 1.0);
  const double x0 = uniform(rng, 0.0, frame_w - side);
  const double y0 = uniform(rng, 0.0, frame_h - side);
  return {x0, y0, x0 + side, y0 + side};
}

Keypoint CropTransform::apply(const Keypoint& kp) const {
  return {(kp.x - origin_x) * scale_x, (kp.y - origin_y) * scale_y, kp.visible};
}

Keypoint CropTransform::invert(const Keypoint& kp) const {
  return {kp.x / scale_x + origin_x, kp.y / scale_y + origin_y, kp.visible};
}

CropTransform crop_transform(const Box& box, int out_w, int out_h) {
  if (!(box.width() > 0.0) || !(box.height() > 0.0)) {
    throw std::invalid_argument("crop_resize: degenerate box");
  }
  return {box.x0, box.y0, out_w / box.width(), out_h / box.height()};
}

namespace {

template <typename Pixel>
void resample(const cv::Mat& src, const CropTransform& tf, cv::Mat& dst) {
  const int w = src.cols;
  const int h = src.rows;
  const double inv_sx = 1.0 / tf.scale_x;
  const double inv_sy = 1.0 / tf.scale_y;
  std::vector<int> xa(dst.cols), xb(dst.cols);
  std::vector<float> xf(dst.cols);
  for (int u = 0; u < dst.cols; ++u) {
    const double sx = std::clamp(tf.origin_x + (u + 0.5) * inv_sx - 0.5, 0.0, static_cast<double>(w - 1));
    xa[u] = static_cast<int>(std::floor(sx));
    xb[u] = std::min(xa[u] + 1, w - 1);
    xf[u] = static_cast<float>(sx - xa[u]);
  }
  for (int v = 0; v < dst.rows; ++v) {
    const double sy = std::clamp(tf.origin_y + (v + 0.5) * inv_sy - 0.5, 0.0, static_cast<double>(h - 1));
    const int ya = static_cast<int>(std::floor(sy));
    const int yb = std::min(ya + 1, h - 1);
    const float fy = static_cast<float>(sy - ya);
    const Pixel* ra = src.ptr<Pixel>(ya);
    const Pixel* rb = src.ptr<Pixel>(yb);
    auto* out = dst.ptr<cv::Vec3f>(v);
    for (int u = 0; u < dst.cols; ++u) {
      const float fx = xf[u];
      for (int c = 0; c < 3; ++c) {
        const float top = static_cast<float>(ra[xa[u]][c]) * (1.0f - fx) + static_cast<float>(ra[xb[u]][c]) * fx;
        const float bot = static_cast<float>(rb[xa[u]][c]) * (1.0f - fx) + static_cast<float>(rb[xb[u]][c]) * fx;
        out[u][c] = top * (1.0f - fy) + bot * fy;
      }
    }
  }
}

}  // namespace

CropResult crop_resize(const cv::Mat& frame, const Box& box, int out_w, int out_h,
                       std::span<const Keypoint> keypoints) {
  if (out_w <= 0 || out_h <= 0) throw std::invalid_argument("crop_resize: output size must be positive");
  if (frame.empty()) throw std::invalid_argument("crop_resize: empty frame");
  const CropTransform tf = crop_transform(box, out_w, out_h);
  CropResult result;
  result.image = cv::Mat(out_h, out_w, CV_32FC3);
  if (frame.type() == CV_8UC3) {
    resample<cv::Vec3b>(frame, tf, result.image);
  } else if (frame.type() == CV_32FC3) {
    resample<cv::Vec3f>(frame, tf, result.image);
  } else {
    throw std::invalid_argument("crop_resize: expected a 3-channel 8-bit or float frame");
  }
  result.keypoints.reserve(keypoints.size());
  for (const auto& kp : keypoints) {
    Keypoint out = tf.apply(kp);
    const bool inside = out.x >= 0.0 && out.x <= out_w && out.y >= 0.0 && out.y <= out_h;
    out.visible = kp.visible && inside;
    result.keypoints.push_back(out);
  }
  return result;
}

cv::Mat mirror_image(const cv::Mat& image) {
  cv::Mat out;
  cv::flip(image, out, 1);
  return out;
}

std::vector<Keypoint> mirror_keypoints(std::span<const Keypoint> keypoints, double width) {
  std::vector<Keypoint> out(keypoints.size());
  const bool coco = keypoints.size() == static_cast<std::size_t>(kNumJoints);
  for (std::size_t k = 0; k < keypoints.size(); ++k) {
    const std::size_t dst = coco ? static_cast<std::size_t>(kFlipIndex[k]) : k;
    out[dst] = {width - keypoints[k].x, keypoints[k].y, keypoints[k].visible};
  }
  return out;
}

std::vector<int> sample_clip(int num_frames, const ClipSpec& spec) {
  if (num_frames < 1) throw std::invalid_argument("sample_clip: video has no frames");
  if (spec.length < 1 || spec.stride < 1 || spec.start < 0) throw std::invalid_argument("sample_clip: invalid clip spec");
  std::vector<int> idx(static_cast<std::size_t>(spec.length));
  for (int i = 0; i < spec.length; ++i) idx[i] = std::min(spec.start + i * spec.stride, num_frames - 1);
  return idx;
}

int random_clip_start(int num_frames, int length, int stride, Rng& rng) {
  const int span = (length - 1) * stride + 1;
  const int last = std::max(0, num_frames - span);
  return uniform_int(rng, 0, last);
}

std::vector<int> test_clip_starts(int num_frames, int length, int stride, int count) {
  if (count < 1) throw std::invalid_argument("test_clip_starts: count must be positive");
  const int span = (length - 1) * stride + 1;
  const int slack = std::max(0, num_frames - span);
  std::vector<int> starts(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    starts[i] = count == 1 ? slack / 2 : static_cast<int>((static_cast<std::int64_t>(i) * slack) / (count - 1));
  }
  return starts;
}

}  // namespace pcar
