#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "doctest.h"
#include "oracles.hpp"
#include "pcar/inference.hpp"
#include "support.hpp"

using namespace pcar;
using pcar::testing::TempDir;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_eval_config(Heads heads = Heads::kRgbPoseCnn) {
  std::istringstream in(
      "input_size = 32\n"
      "clip_length = 4\n"
      "clip_stride = 2\n"
      "width_divisor = 16\n"
      "stage_blocks = 1,1,1,1\n"
      "conv1_temporal = 3\n"
      "deconv_channels = 8\n"
      "pose_cnn_blocks = 1,1,1,1\n"
      "pose_cnn_width_divisor = 16\n"
      "num_classes = 4\n"
      "test_clips = 3\n");
  TrainConfig c = parse_config(in, "tiny");
  c.model.heads = heads;
  c.model.finalize();
  return c;
}

std::vector<Keypoint> random_pose(Rng& rng) {
  std::vector<Keypoint> p(kNumJoints);
  for (auto& kp : p) kp = {uniform(rng, 20, 120), uniform(rng, 20, 120), uniform01(rng) < 0.9};
  p[0].visible = true;
  return p;
}

std::vector<DecodedKeypoint> jittered(const std::vector<Keypoint>& gt, double sigma, Rng& rng) {
  std::vector<DecodedKeypoint> out(gt.size());
  for (std::size_t k = 0; k < gt.size(); ++k) {
    out[k] = {gt[k].x + sigma * normal(rng), gt[k].y + sigma * normal(rng), 1.0};
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("three_crop_boxes") {
  SUBCASE("centres along the diagonal") {
    const auto b = three_crop_boxes({100, 100, 200, 200}, 1000, 1000);
    CHECK(b[0].center_x() == doctest::Approx(125));
    CHECK(b[0].center_y() == doctest::Approx(125));
    CHECK(b[1].center_x() == doctest::Approx(150));
    CHECK(b[2].center_x() == doctest::Approx(175));
    CHECK(b[2].center_y() == doctest::Approx(175));
    for (const auto& x : b) {
      CHECK(x.width() == doctest::Approx(100));
      CHECK(x.height() == doctest::Approx(100));
    }
  }
  SUBCASE("boxes at a frame corner stay inside the frame with their size") {
    const auto b = three_crop_boxes({0, 0, 100, 100}, 100, 100);
    for (const auto& x : b) {
      CHECK(x.x0 >= 0);
      CHECK(x.y0 >= 0);
      CHECK(x.x1 <= 100);
      CHECK(x.y1 <= 100);
      CHECK(x.width() == doctest::Approx(100));
    }
    const auto c = three_crop_boxes({200, 120, 320, 240}, 320, 240);
    CHECK(c[2] == Box{200, 120, 320, 240});
    CHECK(c[0].x0 == doctest::Approx(170));
  }
  SUBCASE("centre square") { CHECK(center_square_box(320, 240) == Box{40, 0, 280, 240}); }
}

TEST_CASE("sum fusion") {
  const auto f = fuse({0.7, 0.3}, {0.2, 0.8});
  CHECK(f[0] == doctest::Approx(0.9));
  CHECK(f[1] == doctest::Approx(1.1));
  CHECK(argmax(f) == 1);
  CHECK(fuse({0.4, 0.6}, {}) == std::vector<double>{0.4, 0.6});
  CHECK_THROWS(fuse({0.5, 0.5}, {1.0}));

  // Scaling both streams by the same positive constant keeps the argmax.
  Rng rng = make_rng(3);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> a(4), b(4), as(4), bs(4);
    const double s = uniform(rng, 0.1, 10);
    for (int j = 0; j < 4; ++j) {
      a[j] = uniform01(rng);
      b[j] = uniform01(rng);
      as[j] = s * a[j];
      bs[j] = s * b[j];
    }
    CHECK(argmax(fuse(a, b)) == argmax(fuse(as, bs)));
  }
}

TEST_CASE("top1_accuracy") {
  const std::vector<std::vector<double>> p{{0.9, 0.1}, {0.2, 0.8}, {0.6, 0.4}, {0.3, 0.7}};
  const std::vector<int> right{0, 1, 0, 1}, half{0, 1, 1, 0};
  CHECK(top1_accuracy(p, right) == 1.0);
  CHECK(top1_accuracy(p, half) == 0.5);
  CHECK_THROWS(top1_accuracy({}, {}));
  CHECK_THROWS(top1_accuracy(p, std::vector<int>{0}));

  Rng rng = make_rng(4);
  std::vector<std::vector<double>> preds(100, std::vector<double>(5));
  std::vector<int> labels(100);
  int correct = 0;
  for (int i = 0; i < 100; ++i) {
    for (auto& v : preds[i]) v = uniform01(rng);
    labels[i] = uniform_int(rng, 0, 4);
    int best = 0;
    for (int j = 1; j < 5; ++j) best = preds[i][j] > preds[i][best] ? j : best;
    correct += best == labels[i];
  }
  CHECK(top1_accuracy(preds, labels) == doctest::Approx(correct / 100.0));
}

TEST_CASE("OKS") {
  Rng rng = make_rng(5);
  const auto gt = random_pose(rng);
  std::vector<DecodedKeypoint> exact(gt.size());
  for (std::size_t k = 0; k < gt.size(); ++k) exact[k] = {gt[k].x, gt[k].y, 1.0};
  CHECK(oks(exact, gt, 5000) == doctest::Approx(1.0));
  const auto noisy = jittered(gt, 4.0, rng);
  CHECK(oks(noisy, gt, 5000) == doctest::Approx(oracle::oks(noisy, gt, 5000)).epsilon(1e-14));
  CHECK_THROWS(oks(exact, gt, 0.0));
}

TEST_CASE("OKS mean AP") {
  Rng rng = make_rng(6);
  const int n = 50;
  std::vector<std::vector<Keypoint>> gts;
  std::vector<double> areas, scores;
  for (int i = 0; i < n; ++i) {
    gts.push_back(random_pose(rng));
    areas.push_back(uniform(rng, 3000, 9000));
    scores.push_back(uniform01(rng));
  }
  auto preds_with = [&](double sigma, Rng& r) {
    std::vector<std::vector<DecodedKeypoint>> p;
    for (const auto& g : gts) p.push_back(jittered(g, sigma, r));
    return p;
  };

  SUBCASE("exact predictions score 1") {
    Rng r = make_rng(1);
    CHECK(oks_ap(preds_with(0, r), gts, areas, scores) == 1.0);
  }
  SUBCASE("far predictions score 0") {
    auto p = preds_with(0, rng);
    for (auto& pose : p)
      for (auto& kp : pose) kp.x += 500;
    CHECK(oks_ap(p, gts, areas, scores) == 0.0);
  }
  SUBCASE("equals the enumeration oracle exactly") {
    for (double sigma : {3.0, 6.0, 10.0}) {
      Rng r = make_rng(static_cast<std::uint64_t>(sigma));
      const auto p = preds_with(sigma, r);
      CHECK(oks_ap(p, gts, areas, scores) == oracle::oks_ap(p, gts, areas, scores));
    }
  }
  SUBCASE("does not increase with growing jitter") {
    double prev = 2.0;
    for (double sigma : {0.0, 2.0, 8.0}) {
      Rng r = make_rng(77);
      const double ap = oks_ap(preds_with(sigma, r), gts, areas, scores);
      CHECK(ap <= prev);
      prev = ap;
    }
  }
  SUBCASE("mismatched counts throw") {
    Rng r = make_rng(1);
    auto p = preds_with(0, r);
    p.pop_back();
    CHECK_THROWS(oks_ap(p, gts, areas, scores));
  }
}

TEST_CASE("class activation maps") {
  nn::Linear<float> fc(3, 2);
  fc.weight().value.zero();
  Tensor<float> f({1, 3, 2, 2, 2});
  Rng rng = make_rng(7);
  for (auto& v : f.values()) v = static_cast<float>(normal(rng));

  SUBCASE("zero weights give a zero map") {
    for (const auto& m : compute_cam(f, 0, fc, 1)) CHECK(cv::norm(m, cv::NORM_INF) == 0.0);
  }
  SUBCASE("a single unit weight selects that channel") {
    fc.weight().value[1 * 3 + 2] = 1.0f;
    const auto maps = compute_cam(f, 0, fc, 1);
    REQUIRE(maps.size() == 2);
    for (int t = 0; t < 2; ++t)
      for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) CHECK(maps[t].at<double>(y, x) == doctest::Approx(f.at(0, 2, t, y, x)));
  }
  SUBCASE("linear in the class weights") {
    for (auto& v : fc.weight().value.values()) v = static_cast<float>(normal(rng));
    const auto base = compute_cam(f, 0, fc, 0);
    for (auto& v : fc.weight().value.values()) v *= 2.5f;
    const auto scaled = compute_cam(f, 0, fc, 0);
    for (int t = 0; t < 2; ++t) CHECK(cv::norm(scaled[t], 2.5 * base[t], cv::NORM_INF) < 1e-5);
  }
  SUBCASE("normalization") {
    cv::Mat m = (cv::Mat_<double>(1, 3) << -2, 0, 2);
    const cv::Mat n = normalize_cam(m);
    CHECK(n.at<double>(0, 0) == 0.0);
    CHECK(n.at<double>(0, 1) == doctest::Approx(0.5));
    CHECK(n.at<double>(0, 2) == 1.0);
    CHECK(cv::norm(normalize_cam(cv::Mat(2, 2, CV_64F, cv::Scalar(3))), cv::NORM_INF) == 0.0);
  }
  SUBCASE("class out of range") { CHECK_THROWS(compute_cam(f, 0, fc, 2)); }
}

TEST_CASE("evaluation on a small dataset") {
  TempDir tmp("eval");
  SynthConfig s;
  s.num_videos = 4;
  s.frames = 12;
  s.split = "test";
  Dataset d = generate_dataset(s, tmp.path() / "data");
  TrainConfig c = tiny_eval_config();
  ActionModel<float> model(c.model);
  Rng rng = make_rng(1);
  model.init(rng);

  SUBCASE("report fields and probability sums") {
    const EvalReport r = evaluate(model, d, "test", c);
    CHECK(r.top1_pose.has_value());
    CHECK(r.oks_map.has_value());
    CHECK(r.per_class_accuracy.size() == 4);
    for (const auto& p : r.predictions) {
      double a = 0, b = 0, f = 0;
      for (std::size_t j = 0; j < 4; ++j) {
        a += p.rgb[j];
        b += p.pose[j];
        f += p.fused[j];
      }
      CHECK(a == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(b == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(f == doctest::Approx(2.0).epsilon(1e-6));
      CHECK(p.predicted == argmax(p.fused));
      CHECK(p.frame_poses.size() == static_cast<std::size_t>(c.test_clips * c.clip_length()));
      CHECK(p.pose_frames.size() == p.frame_poses.size());
    }
    const auto j = nlohmann::json::parse(report_json(r));
    for (const char* key : {"top1_rgb", "top1_pose", "top1_fused", "oks_map", "per_class_accuracy"}) {
      CHECK(j.contains(key));
    }
    CHECK_THROWS_AS(evaluate(model, d, "train", c), std::runtime_error);
  }
  SUBCASE("rgb-only report omits pose fields") {
    TrainConfig rc = tiny_eval_config(Heads::kRgbOnly);
    ActionModel<float> rgb(rc.model);
    rgb.init(rng);
    const auto j = nlohmann::json::parse(report_json(evaluate(rgb, d, "test", rc)));
    CHECK_FALSE(j.contains("top1_pose"));
    CHECK_FALSE(j.contains("oks_map"));
    CHECK(j.contains("top1_fused"));
  }
  SUBCASE("a temporally constant video gives the same scores for every clip") {
    VideoRecord v = d.videos[0];
    for (std::size_t i = 1; i < v.frames.size(); ++i) fs::copy_file(v.frames[0], v.frames[i], fs::copy_options::overwrite_existing);
    const VideoPrediction many = evaluate_video(model, v, c);
    TrainConfig one = c;
    one.test_clips = 1;
    const VideoPrediction single = evaluate_video(model, v, one);
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(many.rgb[j] == doctest::Approx(single.rgb[j]).epsilon(1e-6));
      CHECK(many.pose[j] == doctest::Approx(single.pose[j]).epsilon(1e-6));
    }
  }
  SUBCASE("overlays: one file per frame, deterministic") {
    const VideoRecord& v = d.videos[1];
    CHECK(write_pose_overlays(model, v, c, tmp.path() / "pose_a") == 12);
    CHECK(write_pose_overlays(model, v, c, tmp.path() / "pose_b") == 12);
    CHECK(fs::exists(tmp.path() / "pose_a" / "000011.png"));
    CHECK(slurp(tmp.path() / "pose_a" / "000005.png") == slurp(tmp.path() / "pose_b" / "000005.png"));
    CHECK(write_cam_overlays(model, v, c, 2, tmp.path() / "cam") == 12);
    CHECK_THROWS(write_cam_overlays(model, v, c, 4, tmp.path() / "cam_bad"));
  }
}
