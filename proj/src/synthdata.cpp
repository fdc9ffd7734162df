#include "pcar/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "json.hpp"
#include "pcar/rng.hpp"
#include "pcar/skeleton.hpp"

namespace pcar {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string bias_name(BiasMode mode) {
  switch (mode) {
    case BiasMode::kNone: return "none";
    case BiasMode::kScene: return "scene";
    case BiasMode::kSceneSwapped: return "scene_swapped";
  }
  return "?";
}

BiasMode parse_bias(const std::string& name) {
  if (name == "none") return BiasMode::kNone;
  if (name == "scene") return BiasMode::kScene;
  if (name == "scene_swapped") return BiasMode::kSceneSwapped;
  throw std::invalid_argument("unknown bias mode '" + name + "' (expected none, scene or scene_swapped)");
}

void SynthConfig::validate() const {
  if (num_videos < 0) throw std::invalid_argument("synth: num_videos must be >= 0");
  if (num_classes < 2 || num_classes > kNumMotions) {
    throw std::invalid_argument("synth: num_classes must be between 2 and " + std::to_string(kNumMotions));
  }
  if (frames < 1) throw std::invalid_argument("synth: frames must be >= 1");
  if (frame_w < 240 || frame_h < 180) throw std::invalid_argument("synth: frames must be at least 240x180");
  if (split.empty()) throw std::invalid_argument("synth: split name is empty");
}

std::vector<const VideoRecord*> Dataset::split(const std::string& name) const {
  std::vector<const VideoRecord*> out;
  for (const auto& v : videos) {
    if (v.split == name) out.push_back(&v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Figure

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;
constexpr double kUpperArm = 0.26, kForearm = 0.24, kThigh = 0.27, kShin = 0.27;

struct Pt {
  double x, y;
};

// Direction at `angle` from straight down, positive angles towards +x.
Pt along(Pt from, double length, double angle) {
  return {from.x + length * std::sin(angle), from.y + length * std::cos(angle)};
}

// Knee of a two-link leg, bent outwards (towards `side`).
Pt knee_between(Pt hip, Pt ankle, double side) {
  const double dx = ankle.x - hip.x, dy = ankle.y - hip.y;
  const double d = std::hypot(dx, dy);
  const double half = std::min(d / 2.0, kThigh);
  const double h = std::sqrt(std::max(0.0, kThigh * kThigh - half * half));
  const Pt mid{hip.x + dx / 2.0, hip.y + dy / 2.0};
  Pt normal{-dy / d, dx / d};
  if (normal.x * side < 0) normal = {-normal.x, -normal.y};
  return {mid.x + h * normal.x, mid.y + h * normal.y};
}

}  // namespace

std::vector<Keypoint> figure_pose(const FigureParams& p, int t) {
  const double theta = 2.0 * std::numbers::pi * t / p.period + p.phase;
  const double s = 0.5 - 0.5 * std::cos(theta);  // 0..1
  const double c = std::sin(theta);              // -1..1
  const double a = p.amplitude;

  double drop = 0.0;
  if (p.motion == 2) drop = 0.22 * a * s;
  if (p.motion == 3) drop = 0.02 * std::abs(c);

  // Body units; +x is the figure's left (image right), y points down.
  std::vector<Pt> j(kNumJoints);
  j[kNose] = {0.0, -0.72 + drop};
  j[kLeftEye] = {0.035, -0.76 + drop};
  j[kRightEye] = {-0.035, -0.76 + drop};
  j[kLeftEar] = {0.07, -0.74 + drop};
  j[kRightEar] = {-0.07, -0.74 + drop};
  j[kLeftShoulder] = {0.16, -0.55 + drop};
  j[kRightShoulder] = {-0.16, -0.55 + drop};
  j[kLeftHip] = {0.09, drop};
  j[kRightHip] = {-0.09, drop};

  // Arm angles measured from straight down; `out` angles open away from the body.
  auto arm = [&](Joint shoulder, Joint elbow, Joint wrist, double side, double upper_out, double fore_out) {
    j[elbow] = along(j[shoulder], kUpperArm, side * upper_out);
    j[wrist] = along(j[elbow], kForearm, side * fore_out);
  };
  auto straight_leg = [&](Joint hip, Joint knee, Joint ankle, double thigh_angle, double shin_angle) {
    j[knee] = along(j[hip], kThigh, thigh_angle);
    j[ankle] = along(j[knee], kShin, shin_angle);
  };

  switch (p.motion) {
    case 0: {  // raise both arms sideways
      const double up = (15.0 + 150.0 * a * s) * kDeg;
      arm(kLeftShoulder, kLeftElbow, kLeftWrist, 1.0, up, up);
      arm(kRightShoulder, kRightElbow, kRightWrist, -1.0, up, up);
      straight_leg(kLeftHip, kLeftKnee, kLeftAnkle, 5 * kDeg, 5 * kDeg);
      straight_leg(kRightHip, kRightKnee, kRightAnkle, -5 * kDeg, -5 * kDeg);
      break;
    }
    case 1: {  // wave the right forearm overhead
      arm(kLeftShoulder, kLeftElbow, kLeftWrist, 1.0, 12 * kDeg, 12 * kDeg);
      arm(kRightShoulder, kRightElbow, kRightWrist, -1.0, 125 * kDeg, (150.0 + 45.0 * a * c) * kDeg);
      straight_leg(kLeftHip, kLeftKnee, kLeftAnkle, 5 * kDeg, 5 * kDeg);
      straight_leg(kRightHip, kRightKnee, kRightAnkle, -5 * kDeg, -5 * kDeg);
      break;
    }
    case 2: {  // squat with arms reaching forward
      const double reach = (20.0 + 60.0 * s) * kDeg;
      arm(kLeftShoulder, kLeftElbow, kLeftWrist, 1.0, reach, reach);
      arm(kRightShoulder, kRightElbow, kRightWrist, -1.0, reach, reach);
      j[kLeftAnkle] = {0.12, 0.53};
      j[kRightAnkle] = {-0.12, 0.53};
      j[kLeftKnee] = knee_between(j[kLeftHip], j[kLeftAnkle], 1.0);
      j[kRightKnee] = knee_between(j[kRightHip], j[kRightAnkle], -1.0);
      break;
    }
    default: {  // walk in place: legs and arms swing in opposition
      const double swing = 25.0 * a * c * kDeg;
      j[kLeftElbow] = along(j[kLeftShoulder], kUpperArm, -swing + 8 * kDeg);
      j[kLeftWrist] = along(j[kLeftElbow], kForearm, -1.4 * swing + 8 * kDeg);
      j[kRightElbow] = along(j[kRightShoulder], kUpperArm, swing - 8 * kDeg);
      j[kRightWrist] = along(j[kRightElbow], kForearm, 1.4 * swing - 8 * kDeg);
      straight_leg(kLeftHip, kLeftKnee, kLeftAnkle, swing, 0.4 * swing);
      straight_leg(kRightHip, kRightKnee, kRightAnkle, -swing, -0.4 * swing);
      break;
    }
  }

  std::vector<Keypoint> out(kNumJoints);
  for (int k = 0; k < kNumJoints; ++k) {
    out[k] = {p.center_x + p.unit * j[k].x, p.hip_y + p.unit * j[k].y, true};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

struct Scene {
  cv::Scalar background_top, background_bottom, figure_color;
  double object_x = 0, object_y = 0, object_radius = 0;
};

cv::Scalar class_color(int label, int num_classes) {
  cv::Mat hsv(1, 1, CV_8UC3, cv::Scalar(label * 180 / num_classes, 230, 230));
  cv::Mat bgr;
  cv::cvtColor(hsv, bgr, cv::COLOR_HSV2BGR);
  const cv::Vec3b v = bgr.at<cv::Vec3b>(0, 0);
  return cv::Scalar(v[0], v[1], v[2]);
}

// Fixed-point coordinates keep anti-aliased drawing at sub-pixel accuracy.
constexpr int kShift = 4;
cv::Point fixed(double x, double y) {
  return {static_cast<int>(std::lround(x * (1 << kShift))), static_cast<int>(std::lround(y * (1 << kShift)))};
}

void draw_object(cv::Mat& img, int kind, const Scene& s, const cv::Scalar& color) {
  const double r = s.object_radius;
  const double x = s.object_x, y = s.object_y;
  switch (kind % kNumMotions) {
    case 0:
      cv::circle(img, fixed(x, y), static_cast<int>(std::lround(r * (1 << kShift))), color, cv::FILLED, cv::LINE_AA,
                 kShift);
      break;
    case 1: {
      const std::vector<cv::Point> sq{fixed(x - r, y - r), fixed(x + r, y - r), fixed(x + r, y + r), fixed(x - r, y + r)};
      cv::fillConvexPoly(img, sq, color, cv::LINE_AA, kShift);
      break;
    }
    case 2: {
      const std::vector<cv::Point> tri{fixed(x, y - r), fixed(x + r, y + r), fixed(x - r, y + r)};
      cv::fillConvexPoly(img, tri, color, cv::LINE_AA, kShift);
      break;
    }
    default: {
      const std::vector<cv::Point> dia{fixed(x, y - r), fixed(x + r, y), fixed(x, y + r), fixed(x - r, y)};
      cv::fillConvexPoly(img, dia, color, cv::LINE_AA, kShift);
      break;
    }
  }
}

void draw_figure(cv::Mat& img, const std::vector<Keypoint>& kps, double unit, const cv::Scalar& color) {
  const int thickness = std::max(2, static_cast<int>(std::lround(0.06 * unit)));
  for (const auto& [a, b] : kLimbs) {
    if (a <= kRightEar && b <= kRightEar) continue;  // face drawn as a disc
    cv::line(img, fixed(kps[a].x, kps[a].y), fixed(kps[b].x, kps[b].y), color, thickness, cv::LINE_AA, kShift);
  }
  const Keypoint& ls = kps[kLeftShoulder];
  const Keypoint& rs = kps[kRightShoulder];
  const Keypoint& lh = kps[kLeftHip];
  const Keypoint& rh = kps[kRightHip];
  cv::line(img, fixed(0.5 * (ls.x + rs.x), 0.5 * (ls.y + rs.y)), fixed(0.5 * (lh.x + rh.x), 0.5 * (lh.y + rh.y)), color,
           thickness, cv::LINE_AA, kShift);
  const Keypoint& nose = kps[kNose];
  cv::circle(img, fixed(nose.x, nose.y - 0.02 * unit), static_cast<int>(std::lround(0.1 * unit * (1 << kShift))), color,
             cv::FILLED, cv::LINE_AA, kShift);
}

cv::Mat render_background(int w, int h, const Scene& s) {
  cv::Mat img(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    const double f = static_cast<double>(y) / (h - 1);
    const cv::Scalar c = s.background_top * (1.0 - f) + s.background_bottom * f;
    img.row(y).setTo(c);
  }
  return img;
}

Box envelope(const std::vector<Keypoint>& kps) {
  Box b{kps[0].x, kps[0].y, kps[0].x, kps[0].y};
  for (const auto& k : kps) {
    b.x0 = std::min(b.x0, k.x);
    b.y0 = std::min(b.y0, k.y);
    b.x1 = std::max(b.x1, k.x);
    b.y1 = std::max(b.y1, k.y);
  }
  return b;
}

std::string frame_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d.png", index);
  return buf;
}

}  // namespace

Dataset generate_dataset(const SynthConfig& config, const fs::path& out_dir) {
  config.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());

  Dataset dataset;
  dataset.root = out_dir;
  json manifest = json::array();
  const double W = config.frame_w, H = config.frame_h;
  const double scale = H / 240.0;

  for (int i = 0; i < config.num_videos; ++i) {
    const int label = i % config.num_classes;
    Rng figure_rng = make_rng(config.seed, {static_cast<std::uint64_t>(i), 0});
    Rng scene_rng = make_rng(config.seed, {static_cast<std::uint64_t>(i), 1});

    FigureParams fp;
    fp.motion = label;
    fp.unit = uniform(figure_rng, 70.0, 85.0) * scale;
    const bool on_left = uniform01(figure_rng) < 0.5;
    const double offset = uniform(figure_rng, 70.0, 95.0) * scale;
    fp.center_x = on_left ? offset : W - offset;
    fp.hip_y = H / 2.0 + uniform(figure_rng, 5.0, 30.0) * scale;
    fp.period = uniform(figure_rng, 14.0, 18.0);
    fp.phase = uniform(figure_rng, 0.0, 2.0 * std::numbers::pi);
    fp.amplitude = uniform(figure_rng, 0.8, 1.0);

    Scene scene;
    const double g = uniform(scene_rng, 150.0, 220.0);
    scene.background_top = cv::Scalar(g + uniform(scene_rng, -20, 20), g + uniform(scene_rng, -20, 20),
                                      g + uniform(scene_rng, -20, 20));
    scene.background_bottom = scene.background_top * uniform(scene_rng, 0.75, 0.95);
    const double ink = uniform(scene_rng, 20.0, 80.0);
    scene.figure_color = cv::Scalar(ink, ink + uniform(scene_rng, -15, 15), ink + uniform(scene_rng, -15, 15));
    scene.object_radius = uniform(scene_rng, 18.0, 25.0) * scale;
    const double object_offset = uniform(scene_rng, 215.0, 290.0) * scale;
    scene.object_x = on_left ? std::min(object_offset, W - scene.object_radius - 2)
                             : std::max(W - object_offset, scene.object_radius + 2);
    scene.object_y = uniform(scene_rng, 0.2 * H, 0.8 * H);

    int object_class = -1;
    if (config.bias == BiasMode::kScene) object_class = label;
    if (config.bias == BiasMode::kSceneSwapped) object_class = (label + 1) % config.num_classes;

    char dir_name[32];
    std::snprintf(dir_name, sizeof(dir_name), "%06d", i);
    const fs::path rel = fs::path("videos") / dir_name;
    const fs::path video_dir = out_dir / rel;
    fs::create_directories(video_dir / "frames", ec);
    if (ec) throw std::runtime_error("cannot create " + (video_dir / "frames").string() + ": " + ec.message());

    VideoRecord record;
    record.dir = video_dir;
    record.split = config.split;
    record.label = label;

    cv::Mat background = render_background(config.frame_w, config.frame_h, scene);
    if (object_class >= 0) draw_object(background, object_class, scene, class_color(object_class, config.num_classes));

    json boxes = json::array();
    json keypoints = json::array();
    for (int t = 0; t < config.frames; ++t) {
      const std::vector<Keypoint> kps = figure_pose(fp, t);
      cv::Mat frame = background.clone();
      draw_figure(frame, kps, fp.unit, scene.figure_color);
      const fs::path frame_path = video_dir / "frames" / frame_name(t);
      if (!cv::imwrite(frame_path.string(), frame)) throw std::runtime_error("cannot write " + frame_path.string());

      const Box env = envelope(kps);
      const double margin = 0.1 * fp.unit;
      const Box box = clamp_box({env.x0 - margin, env.y0 - margin, env.x1 + margin, env.y1 + margin}, W, H);
      boxes.push_back({box.x0, box.y0, box.x1, box.y1, 1.0});
      json frame_kps = json::array();
      for (const auto& k : kps) frame_kps.push_back({k.x, k.y, k.visible ? 1 : 0});
      keypoints.push_back(std::move(frame_kps));

      record.frames.push_back(frame_path);
      record.boxes.push_back({box, 1.0});
      record.keypoints.push_back(kps);
    }

    const json annot{{"label", label},
                     {"background_class", object_class >= 0 ? json(object_class) : json(nullptr)},
                     {"boxes", std::move(boxes)},
                     {"keypoints", std::move(keypoints)}};
    const fs::path annot_path = video_dir / "annot.json";
    std::ofstream out(annot_path);
    out << annot.dump() << '\n';
    if (!out) throw std::runtime_error("cannot write " + annot_path.string());

    manifest.push_back({{"video_dir", rel.generic_string()}, {"label", label}, {"split", config.split}});
    dataset.videos.push_back(std::move(record));
  }

  const fs::path manifest_path = out_dir / "manifest.json";
  std::ofstream out(manifest_path);
  out << manifest.dump(1) << '\n';
  if (!out) throw std::runtime_error("cannot write " + manifest_path.string());
  return dataset;
}

// ---------------------------------------------------------------------------
// Loading

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": malformed JSON: " + e.what());
  }
}

VideoRecord read_video(const fs::path& dir) {
  VideoRecord r;
  r.dir = dir;
  const fs::path annot_path = r.dir / "annot.json";
  const json annot = read_json(annot_path);
  auto fail = [&](const std::string& what) { throw std::runtime_error(annot_path.string() + ": " + what); };

  try {
    r.label = annot.at("label").get<int>();
    if (r.label < 0) fail("negative label");
    const json& boxes = annot.at("boxes");
    const json& kps = annot.at("keypoints");
    if (!boxes.is_array() || !kps.is_array() || boxes.size() != kps.size() || boxes.empty()) {
      fail("boxes and keypoints must be non-empty arrays with one entry per frame");
    }
    for (std::size_t t = 0; t < boxes.size(); ++t) {
      const json& b = boxes[t];
      if (!b.is_array() || b.size() != 5) fail("box " + std::to_string(t) + " must be [x0, y0, x1, y1, conf]");
      DetectedBox db{{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()},
                     b[4].get<double>()};
      if (!db.box.finite() || !db.box.valid()) fail("box " + std::to_string(t) + " is degenerate");
      r.boxes.push_back(db);

      const json& frame = kps[t];
      if (!frame.is_array() || frame.size() != static_cast<std::size_t>(kNumJoints)) {
        fail("frame " + std::to_string(t) + " needs " + std::to_string(kNumJoints) + " keypoints");
      }
      std::vector<Keypoint> pose;
      for (const json& k : frame) {
        if (!k.is_array() || k.size() != 3) fail("keypoints must be [x, y, visible]");
        pose.push_back({k[0].get<double>(), k[1].get<double>(), k[2].get<double>() != 0.0});
      }
      r.keypoints.push_back(std::move(pose));
    }
  } catch (const json::exception& e) {
    fail(std::string("malformed annotation: ") + e.what());
  }

  for (std::size_t t = 0; t < r.boxes.size(); ++t) {
    const fs::path frame_path = r.dir / "frames" / frame_name(static_cast<int>(t));
    if (!fs::exists(frame_path)) throw std::runtime_error("missing frame " + frame_path.string());
    r.frames.push_back(frame_path);
  }
  const cv::Mat first = cv::imread(r.frames.front().string(), cv::IMREAD_COLOR);
  if (first.empty()) throw std::runtime_error("cannot decode " + r.frames.front().string());
  for (std::size_t t = 0; t < r.keypoints.size(); ++t) {
    for (const auto& k : r.keypoints[t]) {
      if (k.visible && !(k.x >= 0 && k.y >= 0 && k.x <= first.cols && k.y <= first.rows)) {
        fail("frame " + std::to_string(t) + " has a keypoint outside the " + std::to_string(first.cols) + "x" +
             std::to_string(first.rows) + " frame");
      }
    }
  }
  return r;
}

VideoRecord load_record(const fs::path& root, const json& entry, const fs::path& manifest_path) {
  if (!entry.is_object() || !entry.contains("video_dir") || !entry.contains("label") || !entry.contains("split")) {
    throw std::runtime_error(manifest_path.string() + ": entries need video_dir, label and split");
  }
  VideoRecord r = read_video(root / entry["video_dir"].get<std::string>());
  r.split = entry["split"].get<std::string>();
  if (entry["label"].get<int>() != r.label) {
    throw std::runtime_error((r.dir / "annot.json").string() + ": label disagrees with " + manifest_path.string());
  }
  return r;
}

}  // namespace

VideoRecord load_video(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("video directory " + dir.string() + " does not exist");
  return read_video(dir);
}

Dataset load_manifest(const fs::path& path) {
  const fs::path manifest_path = fs::is_directory(path) ? path / "manifest.json" : path;
  Dataset dataset;
  dataset.root = manifest_path.parent_path();
  const json manifest = read_json(manifest_path);
  if (!manifest.is_array()) throw std::runtime_error(manifest_path.string() + ": expected a list of videos");
  for (const json& entry : manifest) dataset.videos.push_back(load_record(dataset.root, entry, manifest_path));
  return dataset;
}

cv::Mat read_frame(const VideoRecord& video, int index) {
  const fs::path& p = video.frames.at(static_cast<std::size_t>(index));
  cv::Mat img = cv::imread(p.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw std::runtime_error("cannot decode " + p.string());
  return img;
}

}  // namespace pcar
