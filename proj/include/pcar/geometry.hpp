#pragma once

#include <opencv2/core.hpp>

#include <span>
#include <vector>

#include "pcar/rng.hpp"

namespace pcar {

/// Axis-aligned region in continuous frame pixel coordinates. Pixel (u, v)
/// covers [u, u+1) x [v, v+1), so its center sits at (u + 0.5, v + 0.5).
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x0 + x1); }
  double center_y() const { return 0.5 * (y0 + y1); }
  bool valid() const { return x0 < x1 && y0 < y1; }
  bool finite() const;

  bool operator==(const Box&) const = default;
};

struct DetectedBox {
  Box box;
  double confidence = 1.0;
};

struct Keypoint {
  double x = 0, y = 0;
  bool visible = false;

  bool operator==(const Keypoint&) const = default;
};

struct ClipSpec {
  int length = 8;
  int stride = 1;
  int start = 0;

  int span() const { return (length - 1) * stride + 1; }
};

/// Intersects `box` with [0, frame_w] x [0, frame_h].
Box clamp_box(const Box& box, double frame_w, double frame_h);

/// Detections at or above `threshold` confidence.
std::vector<Box> filter_detections(std::span<const DetectedBox> detections, double threshold);

/// Smallest box enclosing every input box, clamped to the frame. An empty
/// list yields the full frame. Throws std::invalid_argument on non-finite
/// coordinates.
Box merge_boxes(std::span<const Box> boxes, double frame_w, double frame_h);

/// Symmetrically extends the shorter side about the center until the box is
/// square. No clamping.
Box expand_to_square(const Box& box);

/// expand_to_square followed by clamp_box; squareness can be lost at frame
/// edges.
Box expand_to_aspect(const Box& box, double frame_w, double frame_h);

/// Random center shift and independent width/height rescaling.
///
/// Consumes exactly four uniform01 draws, in order: center-x shift, center-y
/// shift, width scale, height scale. Each draw u maps to the symmetric
/// factor (2u - 1); the center moves by factor * max_center_frac * side and
/// the side is multiplied by 1 + factor * max_scale_frac. The result is
/// clamped to the frame.
Box jitter_box(const Box& box, Rng& rng, double max_center_frac, double max_scale_frac, double frame_w,
               double frame_h);

/// Uniformly placed square of side min_scale..1 times the short frame side.
Box random_square_box(double frame_w, double frame_h, double min_scale, Rng& rng);

/// Affine map from frame coordinates to crop coordinates:
/// crop = (frame - origin) * scale.
struct CropTransform {
  double origin_x = 0, origin_y = 0;
  double scale_x = 1, scale_y = 1;

  Keypoint apply(const Keypoint& kp) const;
  Keypoint invert(const Keypoint& kp) const;
};

CropTransform crop_transform(const Box& box, int out_w, int out_h);

struct CropResult {
  cv::Mat image;  // CV_32FC3, out_h x out_w
  std::vector<Keypoint> keypoints;
};

/// Bilinear resample of `box` from an 8-bit or float 3-channel frame to
/// out_w x out_h. Keypoints follow the same affine map; ones landing outside
/// [0, out_w] x [0, out_h] become invisible. Throws on a zero-area box.
CropResult crop_resize(const cv::Mat& frame, const Box& box, int out_w, int out_h,
                       std::span<const Keypoint> keypoints = {});

/// Horizontal mirror of an image of width `width`, with keypoints mapped to
/// x -> width - x and left/right joints exchanged.
cv::Mat mirror_image(const cv::Mat& image);
std::vector<Keypoint> mirror_keypoints(std::span<const Keypoint> keypoints, double width);

/// Frame indices start + i * stride for i < length, clamped to the last
/// frame so short videos repeat their final frame.
std::vector<int> sample_clip(int num_frames, const ClipSpec& spec);

/// Uniformly random start in [0, max(0, num_frames - span)].
int random_clip_start(int num_frames, int length, int stride, Rng& rng);

/// Evenly spaced test starts: floor(i * (num_frames - span) / (count - 1)),
/// or all zero when the video is shorter than one span.
std::vector<int> test_clip_starts(int num_frames, int length, int stride, int count = 10);

}  // namespace pcar
