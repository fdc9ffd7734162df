#include <cmath>
#include <vector>

#include <opencv2/core.hpp>

#include "doctest.h"
#include "pcar/geometry.hpp"
#include "pcar/skeleton.hpp"

using namespace pcar;

namespace {

void check_box(const Box& got, const Box& want, double tol = 1e-12) {
  CHECK(got.x0 == doctest::Approx(want.x0).epsilon(tol));
  CHECK(got.y0 == doctest::Approx(want.y0).epsilon(tol));
  CHECK(got.x1 == doctest::Approx(want.x1).epsilon(tol));
  CHECK(got.y1 == doctest::Approx(want.y1).epsilon(tol));
}

}  // namespace

TEST_CASE("merge_boxes encloses every box") {
  const std::vector<Box> one{{10, 10, 50, 50}};
  CHECK(merge_boxes(one, 320, 240) == Box{10, 10, 50, 50});

  const std::vector<Box> two{{10, 10, 50, 50}, {40, 20, 90, 80}};
  CHECK(merge_boxes(two, 320, 240) == Box{10, 10, 90, 80});

  CHECK(merge_boxes({}, 320, 240) == Box{0, 0, 320, 240});

  const std::vector<Box> bad{{0, 0, NAN, 10}};
  CHECK_THROWS_AS(merge_boxes(bad, 320, 240), std::invalid_argument);
}

TEST_CASE("merge_boxes matches a componentwise min/max oracle") {
  Rng rng = make_rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Box> boxes;
    double x0 = 1e9, y0 = 1e9, x1 = -1e9, y1 = -1e9;
    const int n = uniform_int(rng, 1, 6);
    for (int i = 0; i < n; ++i) {
      const double a = uniform(rng, 0, 300), b = uniform(rng, 0, 200);
      Box box{a, b, a + uniform(rng, 1, 20), b + uniform(rng, 1, 40)};
      boxes.push_back(box);
      x0 = std::min(x0, box.x0);
      y0 = std::min(y0, box.y0);
      x1 = std::max(x1, box.x1);
      y1 = std::max(y1, box.y1);
    }
    const Box m = merge_boxes(boxes, 320, 240);
    check_box(m, {x0, y0, std::min(x1, 320.0), std::min(y1, 240.0)});
  }
}

TEST_CASE("filter_detections keeps confident boxes") {
  const std::vector<DetectedBox> dets{{{0, 0, 1, 1}, 0.5}, {{1, 1, 2, 2}, 0.99}, {{2, 2, 3, 3}, 1.0}};
  const auto kept = filter_detections(dets, 0.99);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0] == Box{1, 1, 2, 2});
}

TEST_CASE("expand_to_aspect squares about the centre then clamps") {
  CHECK(expand_to_aspect({0, 0, 100, 100}, 100, 100) == Box{0, 0, 100, 100});
  CHECK(expand_to_square({50, 0, 150, 50}) == Box{50, -25, 150, 75});
  CHECK(expand_to_aspect({50, 0, 150, 50}, 200, 200) == Box{50, 0, 150, 75});
  CHECK(expand_to_square({0, 0, 50, 100}) == Box{-25, 0, 75, 100});
  CHECK(expand_to_aspect({0, 0, 50, 100}, 100, 100) == Box{0, 0, 75, 100});
}

TEST_CASE("jitter_box") {
  const Box box{0, 0, 100, 100};
  SUBCASE("zero fractions leave the box unchanged") {
    Rng rng = make_rng(3);
    CHECK(jitter_box(box, rng, 0, 0, 1000, 1000) == box);
  }
  SUBCASE("replays four uniform draws") {
    Rng replay = make_rng(0);
    const double ux = uniform01(replay), uy = uniform01(replay), uw = uniform01(replay), uh = uniform01(replay);
    const double cx = 250 + (2 * ux - 1) * 0.1 * 100;
    const double cy = 250 + (2 * uy - 1) * 0.1 * 100;
    const double w = 100 * (1 + (2 * uw - 1) * 0.1);
    const double h = 100 * (1 + (2 * uh - 1) * 0.1);
    Rng rng = make_rng(0);
    const Box got = jitter_box({200, 200, 300, 300}, rng, 0.1, 0.1, 1000, 1000);
    check_box(got, {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, 1e-12);
    CHECK(rng() == replay());
  }
  SUBCASE("same seed gives the same box and results stay in the frame") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      Rng a = make_rng(seed), b = make_rng(seed);
      const Box ja = jitter_box({250, 150, 330, 250}, a, 0.3, 0.3, 320, 240);
      CHECK(ja == jitter_box({250, 150, 330, 250}, b, 0.3, 0.3, 320, 240));
      CHECK(ja.x0 >= 0);
      CHECK(ja.y0 >= 0);
      CHECK(ja.x1 <= 320);
      CHECK(ja.y1 <= 240);
    }
  }
}

TEST_CASE("random_square_box is a square inside the frame") {
  Rng rng = make_rng(11);
  for (int i = 0; i < 100; ++i) {
    const Box b = random_square_box(320, 240, 0.8, rng);
    CHECK(b.width() == doctest::Approx(b.height()));
    CHECK(b.width() >= 0.8 * 240 - 1e-9);
    CHECK(b.width() <= 240 + 1e-9);
    CHECK(b.x0 >= 0);
    CHECK(b.y0 >= 0);
    CHECK(b.x1 <= 320 + 1e-9);
    CHECK(b.y1 <= 240 + 1e-9);
  }
}

TEST_CASE("crop_resize") {
  cv::Mat frame(60, 80, CV_8UC3);
  cv::randu(frame, 0, 255);

  SUBCASE("full-frame identity") {
    const std::vector<Keypoint> kps{{10.5, 20.25, true}};
    const CropResult r = crop_resize(frame, {0, 0, 80, 60}, 80, 60, kps);
    cv::Mat f32;
    frame.convertTo(f32, CV_32FC3);
    CHECK(cv::norm(r.image, f32, cv::NORM_INF) < 1e-4);
    CHECK(r.keypoints[0] == kps[0]);
  }
  SUBCASE("2x scale maps keypoints accordingly") {
    cv::Mat big(240, 240, CV_8UC3, cv::Scalar(1, 2, 3));
    const std::vector<Keypoint> kps{{56, 56, true}, {150, 10, true}};
    const CropResult r = crop_resize(big, {0, 0, 112, 112}, 224, 224, kps);
    CHECK(r.image.rows == 224);
    CHECK(r.image.cols == 224);
    CHECK(r.keypoints[0].x == doctest::Approx(112));
    CHECK(r.keypoints[0].y == doctest::Approx(112));
    CHECK(r.keypoints[0].visible);
    CHECK_FALSE(r.keypoints[1].visible);
  }
  SUBCASE("bilinear sample matches a direct interpolation oracle") {
    cv::Mat f(10, 10, CV_32FC3);
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 10; ++x) f.at<cv::Vec3f>(y, x) = cv::Vec3f(float(x), float(y), float(x + 2 * y));
    // Linear images are reproduced exactly away from the border.
    const CropResult r = crop_resize(f, {2, 2, 6, 6}, 8, 8);
    for (int v = 0; v < 8; ++v) {
      for (int u = 0; u < 8; ++u) {
        const double sx = 2 + (u + 0.5) * 0.5 - 0.5;
        const double sy = 2 + (v + 0.5) * 0.5 - 0.5;
        const cv::Vec3f p = r.image.at<cv::Vec3f>(v, u);
        CHECK(p[0] == doctest::Approx(sx).epsilon(1e-5));
        CHECK(p[1] == doctest::Approx(sy).epsilon(1e-5));
        CHECK(p[2] == doctest::Approx(sx + 2 * sy).epsilon(1e-5));
      }
    }
  }
  SUBCASE("degenerate box throws") { CHECK_THROWS_AS(crop_resize(frame, {5, 5, 5, 9}, 8, 8), std::invalid_argument); }
}

TEST_CASE("crop transform inverts") {
  const CropTransform tf = crop_transform({10, 20, 110, 70}, 64, 32);
  const Keypoint kp{37.5, 44.0, true};
  const Keypoint back = tf.invert(tf.apply(kp));
  CHECK(back.x == doctest::Approx(kp.x));
  CHECK(back.y == doctest::Approx(kp.y));
}

TEST_CASE("mirroring swaps left and right joints") {
  std::vector<Keypoint> kps(kNumJoints);
  for (int k = 0; k < kNumJoints; ++k) kps[k] = {double(k), double(100 + k), true};
  const auto m = mirror_keypoints(kps, 64);
  CHECK(m[kLeftWrist].x == doctest::Approx(64 - kRightWrist));
  CHECK(m[kLeftWrist].y == doctest::Approx(100 + kRightWrist));
  CHECK(m[kNose].x == doctest::Approx(64));
  CHECK(mirror_keypoints(m, 64) == kps);

  cv::Mat img(2, 3, CV_32FC3, cv::Scalar(0, 0, 0));
  img.at<cv::Vec3f>(0, 0) = cv::Vec3f(1, 2, 3);
  CHECK(mirror_image(img).at<cv::Vec3f>(0, 2) == cv::Vec3f(1, 2, 3));
}

TEST_CASE("sample_clip") {
  CHECK(sample_clip(100, {8, 8, 0}) == std::vector<int>{0, 8, 16, 24, 32, 40, 48, 56});
  CHECK(sample_clip(5, {8, 1, 0}) == std::vector<int>{0, 1, 2, 3, 4, 4, 4, 4});
  CHECK_THROWS(sample_clip(0, {8, 1, 0}));
}

TEST_CASE("test_clip_starts follows the even-spacing formula") {
  const auto starts = test_clip_starts(100, 8, 8, 10);
  REQUIRE(starts.size() == 10);
  for (int i = 0; i < 10; ++i) CHECK(starts[i] == (i * 43) / 9);
  CHECK(starts.front() == 0);
  CHECK(starts.back() == 43);
  CHECK(test_clip_starts(5, 8, 1, 10) == std::vector<int>(10, 0));
}

TEST_CASE("random_clip_start stays within the valid range") {
  Rng rng = make_rng(5);
  for (int i = 0; i < 200; ++i) {
    const int s = random_clip_start(32, 8, 2, rng);
    CHECK(s >= 0);
    CHECK(s <= 32 - 15);
  }
  CHECK(random_clip_start(4, 8, 1, rng) == 0);
}
