#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "doctest.h"
#include "pcar/skeleton.hpp"
#include "pcar/synthdata.hpp"
#include "support.hpp"

using namespace pcar;
using pcar::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SynthConfig small_config(BiasMode bias = BiasMode::kNone, std::uint64_t seed = 5) {
  SynthConfig c;
  c.num_videos = 8;
  c.frames = 10;
  c.bias = bias;
  c.seed = seed;
  return c;
}

nlohmann::json annot(const VideoRecord& v) { return nlohmann::json::parse(slurp(v.dir / "annot.json")); }

}  // namespace

TEST_CASE("bias names") {
  for (BiasMode b : {BiasMode::kNone, BiasMode::kScene, BiasMode::kSceneSwapped}) CHECK(parse_bias(bias_name(b)) == b);
  CHECK_THROWS(parse_bias("garden"));
}

TEST_CASE("config validation") {
  SynthConfig c;
  c.num_classes = 5;
  CHECK_THROWS(c.validate());
  c = SynthConfig{};
  c.num_videos = -1;
  CHECK_THROWS(c.validate());
}

TEST_CASE("figure poses move smoothly and differ between motions") {
  for (int motion = 0; motion < kNumMotions; ++motion) {
    FigureParams p;
    p.motion = motion;
    p.center_x = 100;
    p.hip_y = 140;
    const auto a = figure_pose(p, 0);
    REQUIRE(a.size() == static_cast<std::size_t>(kNumJoints));
    for (int t = 1; t < 20; ++t) {
      const auto prev = figure_pose(p, t - 1);
      const auto cur = figure_pose(p, t);
      for (int k = 0; k < kNumJoints; ++k) {
        CHECK(cur[k].visible);
        CHECK(std::hypot(cur[k].x - prev[k].x, cur[k].y - prev[k].y) < 0.35 * p.unit);
      }
    }
  }
  FigureParams raise, squat;
  raise.motion = 0;
  squat.motion = 2;
  double diff = 0;
  for (int t = 0; t < 16; ++t) {
    const auto a = figure_pose(raise, t), b = figure_pose(squat, t);
    for (int k = 0; k < kNumJoints; ++k) diff += std::hypot(a[k].x - b[k].x, a[k].y - b[k].y);
  }
  CHECK(diff > 10.0);
}

TEST_CASE("generated dataset") {
  TempDir tmp("synth");
  const Dataset d = generate_dataset(small_config(), tmp.path() / "a");

  SUBCASE("balanced labels, files on disk") {
    REQUIRE(d.videos.size() == 8);
    std::map<int, int> counts;
    for (const auto& v : d.videos) {
      ++counts[v.label];
      CHECK(v.num_frames() == 10);
      CHECK(v.split == "train");
      for (const auto& f : v.frames) CHECK(fs::exists(f));
      const cv::Mat img = read_frame(v, 3);
      CHECK(img.cols == 320);
      CHECK(img.rows == 240);
      CHECK(img.type() == CV_8UC3);
    }
    for (int c = 0; c < 4; ++c) CHECK(counts[c] == 2);
    for (std::size_t i = 0; i < d.videos.size(); ++i) CHECK(d.videos[i].label == static_cast<int>(i % 4));
  }
  SUBCASE("keypoints lie inside the stored box and the frame") {
    for (const auto& v : d.videos) {
      for (int f = 0; f < v.num_frames(); ++f) {
        const Box& b = v.boxes[f].box;
        CHECK(v.boxes[f].confidence == 1.0);
        for (const auto& kp : v.keypoints[f]) {
          CHECK(kp.visible);
          CHECK(kp.x >= b.x0);
          CHECK(kp.x <= b.x1);
          CHECK(kp.y >= b.y0);
          CHECK(kp.y <= b.y1);
          CHECK(kp.x >= 0);
          CHECK(kp.x < 320);
          CHECK(kp.y >= 0);
          CHECK(kp.y < 240);
        }
      }
    }
  }
  SUBCASE("same seed gives byte-identical annotations and frames") {
    const Dataset again = generate_dataset(small_config(), tmp.path() / "b");
    CHECK(slurp(tmp.path() / "a" / "manifest.json") == slurp(tmp.path() / "b" / "manifest.json"));
    for (std::size_t i = 0; i < d.videos.size(); ++i) {
      CHECK(slurp(d.videos[i].dir / "annot.json") == slurp(again.videos[i].dir / "annot.json"));
      CHECK(slurp(d.videos[i].frames[4]) == slurp(again.videos[i].frames[4]));
    }
    const Dataset other = generate_dataset(small_config(BiasMode::kNone, 6), tmp.path() / "c");
    CHECK(slurp(d.videos[0].dir / "annot.json") != slurp(other.videos[0].dir / "annot.json"));
  }
  SUBCASE("scene and swapped scene share trajectories, not objects") {
    const Dataset scene = generate_dataset(small_config(BiasMode::kScene), tmp.path() / "s");
    const Dataset swapped = generate_dataset(small_config(BiasMode::kSceneSwapped), tmp.path() / "w");
    for (std::size_t i = 0; i < scene.videos.size(); ++i) {
      CHECK(scene.videos[i].keypoints == swapped.videos[i].keypoints);
      CHECK(scene.videos[i].keypoints == d.videos[i].keypoints);
      const int label = scene.videos[i].label;
      CHECK(annot(scene.videos[i])["background_class"] == label);
      CHECK(annot(swapped.videos[i])["background_class"] == (label + 1) % 4);
      CHECK(annot(d.videos[i])["background_class"].is_null());
      const cv::Mat a = read_frame(scene.videos[i], 0), b = read_frame(swapped.videos[i], 0);
      CHECK(cv::norm(a, b, cv::NORM_L1) > 0);
    }
  }
}

TEST_CASE("manifest loading") {
  TempDir tmp("manifest");
  const Dataset d = generate_dataset(small_config(), tmp.path() / "d");

  SUBCASE("round trip") {
    const Dataset back = load_manifest(tmp.path() / "d");
    REQUIRE(back.videos.size() == d.videos.size());
    for (std::size_t i = 0; i < d.videos.size(); ++i) {
      CHECK(back.videos[i].label == d.videos[i].label);
      CHECK(back.videos[i].keypoints == d.videos[i].keypoints);
      CHECK(back.videos[i].frames == d.videos[i].frames);
    }
    CHECK(load_manifest(tmp.path() / "d" / "manifest.json").videos.size() == 8);
    CHECK(back.split("train").size() == 8);
    CHECK(back.split("test").empty());
    const VideoRecord v = load_video(d.videos[2].dir);
    CHECK(v.label == d.videos[2].label);
  }
  SUBCASE("deleted frame is named in the error") {
    const fs::path victim = d.videos[1].frames[6];
    fs::remove(victim);
    CHECK_THROWS_WITH(load_manifest(tmp.path() / "d"), doctest::Contains(victim.filename().string().c_str()));
  }
  SUBCASE("empty manifest gives an empty dataset") {
    fs::create_directories(tmp.path() / "empty");
    std::ofstream(tmp.path() / "empty" / "manifest.json") << "[]\n";
    CHECK(load_manifest(tmp.path() / "empty").videos.empty());
  }
  SUBCASE("missing manifest throws") { CHECK_THROWS(load_manifest(tmp.path() / "nowhere")); }
}
