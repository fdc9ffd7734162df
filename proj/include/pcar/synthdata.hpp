#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "pcar/geometry.hpp"

namespace pcar {

enum class BiasMode { kNone, kScene, kSceneSwapped };

std::string bias_name(BiasMode mode);
BiasMode parse_bias(const std::string& name);

struct SynthConfig {
  int num_videos = 40;
  int num_classes = 4;
  int frames = 32;
  int frame_w = 320;
  int frame_h = 240;
  BiasMode bias = BiasMode::kNone;
  std::string split = "train";
  std::uint64_t seed = 0;

  void validate() const;
};

inline constexpr int kNumMotions = 4;
inline constexpr const char* kMotionNames[kNumMotions] = {"raise_arms", "wave", "squat", "walk"};

struct VideoRecord {
  std::filesystem::path dir;
  std::string split;
  int label = 0;
  std::vector<std::filesystem::path> frames;
  std::vector<DetectedBox> boxes;
  std::vector<std::vector<Keypoint>> keypoints;  // frame pixels

  int num_frames() const { return static_cast<int>(frames.size()); }
};

struct Dataset {
  std::filesystem::path root;
  std::vector<VideoRecord> videos;

  std::vector<const VideoRecord*> split(const std::string& name) const;
};

/// Body placement and motion parameters of one generated video.
struct FigureParams {
  int motion = 0;
  double center_x = 0, hip_y = 0;  // frame pixels
  double unit = 80;                // pixels per body unit (hip to ankle ~ 0.52)
  double period = 16;              // frames
  double phase = 0;                // radians
  double amplitude = 1;
};

/// 17 COCO joints of the stick figure at frame t, all visible.
std::vector<Keypoint> figure_pose(const FigureParams& params, int t);

/// Renders labeled stick-figure videos into `out_dir` (frames/*.png,
/// annot.json per video, manifest.json at the root). Video i has label
/// i % num_classes, which selects the motion. annot.json also records the
/// class of the background object (null without one). Deterministic given
/// the config.
Dataset generate_dataset(const SynthConfig& config, const std::filesystem::path& out_dir);

/// Reads `root/manifest.json` (or a manifest path) and validates every
/// record: frame files present, per-frame boxes and 17 keypoints, keypoints
/// inside the frame. Throws std::runtime_error naming the offending file.
Dataset load_manifest(const std::filesystem::path& path);

/// Loads and validates one video directory (annot.json + frames/).
VideoRecord load_video(const std::filesystem::path& dir);

/// 8-bit 3-channel frame; throws if the file cannot be decoded.
cv::Mat read_frame(const VideoRecord& video, int index);

}  // namespace pcar
