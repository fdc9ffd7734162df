#include "pcar/inference.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "json.hpp"

namespace pcar {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Translate a box back inside [0, limit] along one axis; boxes longer than
// the frame are intersected instead.
void fit_axis(double& lo, double& hi, double limit) {
  if (hi - lo >= limit) {
    lo = 0;
    hi = limit;
    return;
  }
  if (lo < 0) {
    hi -= lo;
    lo = 0;
  }
  if (hi > limit) {
    lo -= hi - limit;
    hi = limit;
  }
}

}  // namespace

std::array<Box, 3> three_crop_boxes(const Box& box, double frame_w, double frame_h) {
  const double dx = box.width() / 4.0;
  const double dy = box.height() / 4.0;
  std::array<Box, 3> out;
  for (int i = 0; i < 3; ++i) {
    const double s = i - 1;
    Box b{box.x0 + s * dx, box.y0 + s * dy, box.x1 + s * dx, box.y1 + s * dy};
    fit_axis(b.x0, b.x1, frame_w);
    fit_axis(b.y0, b.y1, frame_h);
    out[i] = b;
  }
  return out;
}

Box center_square_box(double frame_w, double frame_h) {
  const double side = std::min(frame_w, frame_h);
  const double x0 = (frame_w - side) / 2.0;
  const double y0 = (frame_h - side) / 2.0;
  return {x0, y0, x0 + side, y0 + side};
}

std::vector<double> fuse(const std::vector<double>& rgb, const std::vector<double>& pose) {
  std::vector<double> out = rgb;
  if (pose.empty()) return out;
  if (pose.size() != rgb.size()) throw std::invalid_argument("fuse: stream sizes differ");
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pose[i];
  return out;
}

namespace {

class FrameCache {
 public:
  explicit FrameCache(const VideoRecord& video) : video_(video) {}
  const cv::Mat& get(int index) {
    auto it = frames_.find(index);
    if (it == frames_.end()) it = frames_.emplace(index, read_frame(video_, index)).first;
    return it->second;
  }

 private:
  const VideoRecord& video_;
  std::map<int, cv::Mat> frames_;
};

Box test_box(const VideoRecord& video, const TrainConfig& config, double W, double H) {
  return config.crop_mode == CropMode::kPerson ? video_person_box(video, config.detection_threshold, W, H)
                                               : center_square_box(W, H);
}

}  // namespace

VideoPrediction evaluate_video(ActionModel<float>& model, const VideoRecord& video, const TrainConfig& config) {
  if (video.num_frames() < 1) throw std::runtime_error(video.dir.string() + ": video has no frames");
  const int T = config.clip_length();
  const int S = config.input_size();
  const int n = config.model.num_classes;
  FrameCache cache(video);
  const cv::Mat& first = cache.get(0);
  const double W = first.cols, H = first.rows;
  const Box base = test_box(video, config, W, H);
  std::vector<Box> crops;
  if (config.test_crops == 3) {
    const auto three = three_crop_boxes(base, W, H);
    crops.assign(three.begin(), three.end());
  } else {
    crops.push_back(base);
  }
  const std::size_t center = crops.size() / 2;

  VideoPrediction out;
  out.rgb.assign(static_cast<std::size_t>(n), 0.0);
  const bool pose_stream = model.pose_cnn() != nullptr;
  if (pose_stream) out.pose.assign(static_cast<std::size_t>(n), 0.0);
  int count = 0;

  for (int start : test_clip_starts(video.num_frames(), T, config.clip_stride, config.test_clips)) {
    const std::vector<int> indices = sample_clip(video.num_frames(), ClipSpec{T, config.clip_stride, start});
    Tensor<float> clips({static_cast<int>(crops.size()), 3, T, S, S});
    for (std::size_t c = 0; c < crops.size(); ++c) {
      for (int t = 0; t < T; ++t) {
        write_frame(clips, static_cast<int>(c), t, crop_resize(cache.get(indices[t]), crops[c], S, S).image);
      }
    }
    const Probabilities<float> p = predict(model, clips);
    for (std::size_t c = 0; c < crops.size(); ++c) {
      for (int k = 0; k < n; ++k) {
        out.rgb[k] += p.rgb[static_cast<std::int64_t>(c) * n + k];
        if (pose_stream) out.pose[k] += p.pose[static_cast<std::int64_t>(c) * n + k];
      }
      ++count;
    }
    if (!p.poses.empty()) {
      const CropTransform tf = crop_transform(crops[center], S, S);
      for (int t = 0; t < T; ++t) {
        std::vector<DecodedKeypoint> frame_pose;
        for (const DecodedKeypoint& kp : p.poses[center][t]) {
          const Keypoint f = tf.invert({kp.x, kp.y, true});
          frame_pose.push_back({f.x, f.y, kp.confidence});
        }
        out.frame_poses.push_back(std::move(frame_pose));
        out.pose_frames.push_back(indices[t]);
      }
    }
  }
  for (double& v : out.rgb) v /= count;
  for (double& v : out.pose) v /= count;
  out.fused = fuse(out.rgb, out.pose);
  out.predicted = argmax(out.fused);
  return out;
}

double top1_accuracy(std::span<const std::vector<double>> predictions, std::span<const int> labels) {
  if (predictions.empty()) throw std::invalid_argument("top1_accuracy: no predictions");
  if (predictions.size() != labels.size()) throw std::invalid_argument("top1_accuracy: predictions and labels differ in length");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (argmax(predictions[i]) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

double oks(std::span<const DecodedKeypoint> pred, std::span<const Keypoint> gt, double area, double kappa) {
  if (pred.size() != gt.size()) throw std::invalid_argument("oks: keypoint counts differ");
  if (!(area > 0)) throw std::invalid_argument("oks: area must be positive");
  double sum = 0;
  int visible = 0;
  for (std::size_t k = 0; k < gt.size(); ++k) {
    if (!gt[k].visible) continue;
    const double dx = pred[k].x - gt[k].x;
    const double dy = pred[k].y - gt[k].y;
    sum += std::exp(-(dx * dx + dy * dy) / (2.0 * area * kappa * kappa));
    ++visible;
  }
  return visible > 0 ? sum / visible : 0.0;
}

double pose_score(std::span<const DecodedKeypoint> pose) {
  if (pose.empty()) return 0.0;
  double s = 0;
  for (const auto& kp : pose) s += kp.confidence;
  return s / static_cast<double>(pose.size());
}

double oks_ap(std::span<const std::vector<DecodedKeypoint>> preds, std::span<const std::vector<Keypoint>> gts,
              std::span<const double> areas, std::span<const double> scores, double kappa) {
  const std::size_t N = gts.size();
  if (preds.size() != N || areas.size() != N || scores.size() != N) {
    throw std::invalid_argument("oks_ap: predictions, ground truth, areas and scores must have equal counts");
  }
  if (N == 0) throw std::invalid_argument("oks_ap: no instances");
  std::vector<double> sim(N);
  for (std::size_t i = 0; i < N; ++i) sim[i] = oks(preds[i], gts[i], areas[i], kappa);
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double total = 0;
  for (int ti = 0; ti < 10; ++ti) {
    const double threshold = 0.5 + 0.05 * ti;
    std::vector<double> precision(N), recall(N);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < N; ++i) {
      if (sim[order[i]] >= threshold) ++tp;
      precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
      recall[i] = static_cast<double>(tp) / static_cast<double>(N);
    }
    for (std::size_t i = N - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0;
    for (int r = 0; r <= 100; ++r) {
      const double level = r / 100.0;
      const auto it = std::lower_bound(recall.begin(), recall.end(), level);
      ap += it == recall.end() ? 0.0 : precision[static_cast<std::size_t>(it - recall.begin())];
    }
    total += ap / 101.0;
  }
  return total / 10.0;
}

std::vector<cv::Mat> compute_cam(const Tensor<float>& features, int n, const nn::Linear<float>& fc, int class_id) {
  if (features.rank() != 5) throw std::invalid_argument("compute_cam: expected N x C x T x H x W features");
  const int C = features.dim(1), T = features.dim(2), H = features.dim(3), W = features.dim(4);
  if (class_id < 0 || class_id >= fc.out_features()) {
    throw std::invalid_argument("compute_cam: class " + std::to_string(class_id) + " outside [0, " +
                                std::to_string(fc.out_features() - 1) + "]");
  }
  if (fc.in_features() != C) throw std::invalid_argument("compute_cam: classifier width does not match features");
  const float* w = fc.weight().value.data() + static_cast<std::int64_t>(class_id) * C;
  std::vector<cv::Mat> maps;
  for (int t = 0; t < T; ++t) {
    cv::Mat m(H, W, CV_64F, cv::Scalar(0));
    for (int c = 0; c < C; ++c) {
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) m.at<double>(y, x) += static_cast<double>(w[c]) * features.at(n, c, t, y, x);
      }
    }
    maps.push_back(m);
  }
  return maps;
}

cv::Mat normalize_cam(const cv::Mat& cam) {
  double lo = 0, hi = 0;
  cv::minMaxLoc(cam, &lo, &hi);
  cv::Mat out(cam.size(), CV_64F, cv::Scalar(0));
  if (hi > lo) out = (cam - lo) / (hi - lo);
  return out;
}

EvalReport evaluate(ActionModel<float>& model, const Dataset& dataset, const std::string& split,
                    const TrainConfig& config) {
  const auto videos = dataset.split(split);
  if (videos.empty()) throw std::runtime_error("split '" + split + "' of " + dataset.root.string() + " is empty");
  EvalReport report;
  std::vector<std::vector<double>> rgb, pose, fused;
  std::vector<int> labels;
  std::vector<std::vector<DecodedKeypoint>> pred_poses;
  std::vector<std::vector<Keypoint>> gt_poses;
  std::vector<double> areas, scores;
  for (const VideoRecord* v : videos) {
    VideoPrediction p = evaluate_video(model, *v, config);
    rgb.push_back(p.rgb);
    if (!p.pose.empty()) pose.push_back(p.pose);
    fused.push_back(p.fused);
    labels.push_back(v->label);
    for (std::size_t i = 0; i < p.frame_poses.size(); ++i) {
      const int f = p.pose_frames[i];
      pred_poses.push_back(p.frame_poses[i]);
      gt_poses.push_back(v->keypoints[f]);
      areas.push_back(v->boxes[f].box.area());
      scores.push_back(pose_score(p.frame_poses[i]));
    }
    report.predictions.push_back(std::move(p));
  }
  report.top1_rgb = top1_accuracy(rgb, labels);
  if (!pose.empty()) report.top1_pose = top1_accuracy(pose, labels);
  report.top1_fused = top1_accuracy(fused, labels);
  if (!pred_poses.empty()) report.oks_map = oks_ap(pred_poses, gt_poses, areas, scores);

  const int n = config.model.num_classes;
  std::vector<int> hits(n, 0), totals(n, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++totals[labels[i]];
    if (argmax(fused[i]) == labels[i]) ++hits[labels[i]];
  }
  for (int c = 0; c < n; ++c) {
    report.per_class_accuracy.push_back(totals[c] ? static_cast<double>(hits[c]) / totals[c] : 0.0);
  }
  return report;
}

std::string report_json(const EvalReport& report) {
  json j;
  j["top1_rgb"] = report.top1_rgb;
  if (report.top1_pose) j["top1_pose"] = *report.top1_pose;
  j["top1_fused"] = report.top1_fused;
  if (report.oks_map) j["oks_map"] = *report.oks_map;
  j["per_class_accuracy"] = report.per_class_accuracy;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Overlays

namespace {

constexpr int kDisplaySize = 256;

std::string png_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d.png", index);
  return buf;
}

cv::Mat to_8u(const cv::Mat& image) {
  cv::Mat out;
  image.convertTo(out, CV_8UC3);
  return out;
}

// Runs the model over consecutive T-frame chunks of the video and hands
// each real frame's crop, probabilities and features to `visit`.
template <typename Visit>
int for_each_frame(ActionModel<float>& model, const VideoRecord& video, const TrainConfig& config, Visit visit) {
  const int T = config.clip_length();
  const int S = config.input_size();
  FrameCache cache(video);
  const cv::Mat& first = cache.get(0);
  const Box box = test_box(video, config, first.cols, first.rows);
  int written = 0;
  for (int start = 0; start < video.num_frames(); start += T) {
    const std::vector<int> indices = sample_clip(video.num_frames(), ClipSpec{T, 1, start});
    Tensor<float> clips({1, 3, T, S, S});
    for (int t = 0; t < T; ++t) write_frame(clips, 0, t, crop_resize(cache.get(indices[t]), box, S, S).image);
    const Probabilities<float> p = predict(model, clips);
    for (int t = 0; t < T && start + t < video.num_frames(); ++t) {
      const cv::Mat display = to_8u(crop_resize(cache.get(start + t), box, kDisplaySize, kDisplaySize).image);
      visit(start + t, t, display, p);
      ++written;
    }
  }
  return written;
}

}  // namespace

int write_pose_overlays(ActionModel<float>& model, const VideoRecord& video, const TrainConfig& config,
                        const fs::path& out_dir) {
  if (!model.pose_head()) throw std::runtime_error("checkpoint has no pose head");
  fs::create_directories(out_dir);
  const double scale = static_cast<double>(kDisplaySize) / config.input_size();
  return for_each_frame(model, video, config, [&](int frame, int t, cv::Mat display, const Probabilities<float>& p) {
    const DecodedPose& pose = p.poses[0][t];
    auto pt = [&](int k) { return cv::Point2d(pose[k].x * scale, pose[k].y * scale); };
    for (const auto& [a, b] : kLimbs) cv::line(display, pt(a), pt(b), cv::Scalar(0, 200, 255), 2, cv::LINE_AA);
    for (int k = 0; k < static_cast<int>(pose.size()); ++k) {
      cv::circle(display, pt(k), 3, cv::Scalar(0, 0, 255), cv::FILLED, cv::LINE_AA);
    }
    const fs::path path = out_dir / png_name(frame);
    if (!cv::imwrite(path.string(), display)) throw std::runtime_error("cannot write " + path.string());
  });
}

int write_cam_overlays(ActionModel<float>& model, const VideoRecord& video, const TrainConfig& config, int class_id,
                       const fs::path& out_dir) {
  const int n = config.model.num_classes;
  if (class_id < 0 || class_id >= n) {
    throw std::invalid_argument("class " + std::to_string(class_id) + " out of range, valid classes are 0.." +
                                std::to_string(n - 1));
  }
  fs::create_directories(out_dir);
  std::vector<cv::Mat> cams;
  return for_each_frame(model, video, config, [&](int frame, int t, const cv::Mat& display, const Probabilities<float>& p) {
    if (t == 0) cams = compute_cam(p.features, 0, model.rgb().fc(), class_id);
    cv::Mat heat;
    normalize_cam(cams[t]).convertTo(heat, CV_8U, 255.0);
    cv::resize(heat, heat, display.size(), 0, 0, cv::INTER_LINEAR);
    cv::applyColorMap(heat, heat, cv::COLORMAP_JET);
    cv::Mat blended;
    cv::addWeighted(display, 0.5, heat, 0.5, 0.0, blended);
    const fs::path path = out_dir / png_name(frame);
    if (!cv::imwrite(path.string(), blended)) throw std::runtime_error("cannot write " + path.string());
  });
}

}  // namespace pcar
