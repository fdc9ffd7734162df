#include <cmath>

#include "doctest.h"
#include "pcar/poseaction.hpp"

using namespace pcar;

TEST_CASE("pose tensor normalization") {
  std::vector<DecodedPose> poses(2, DecodedPose(kNumJoints));
  poses[0][0] = {48, 48, 0.7};
  poses[0][1] = {96, 96, 0.2};
  poses[0][2] = {0, 24, 1.0};
  for (auto& kp : poses[1]) kp = {12, 72, 0.0};
  const PoseTensor p = build_pose_tensor(poses, 96, 96);
  CHECK(p.frames == 2);
  CHECK(p.joints == kNumJoints);
  CHECK(p.at(0, 0, 0) == doctest::Approx(0.0));
  CHECK(p.at(1, 0, 0) == doctest::Approx(0.0));
  CHECK(p.at(2, 0, 0) == doctest::Approx(0.7));
  CHECK(p.at(0, 0, 1) == doctest::Approx(1.0));
  CHECK(p.at(1, 0, 1) == doctest::Approx(1.0));
  CHECK(p.at(0, 0, 2) == doctest::Approx(-1.0));
  CHECK(p.at(1, 0, 2) == doctest::Approx(-0.5));
  for (int k = 0; k < kNumJoints; ++k) {
    CHECK(p.at(2, 1, k) == 0.0);
    CHECK(p.at(0, 1, k) == doctest::Approx(-0.75));
    CHECK(p.at(1, 1, k) == doctest::Approx(0.5));
  }
  CHECK_THROWS(build_pose_tensor({}, 96, 96));
}

TEST_CASE("mirrored pose tensor negates x and swaps sides") {
  std::vector<DecodedPose> poses(1, DecodedPose(kNumJoints));
  for (int k = 0; k < kNumJoints; ++k) poses[0][k] = {3.0 * k, 2.0 * k, 0.05 * k};
  const PoseTensor p = build_pose_tensor(poses, 64, 64);
  const PoseTensor m = mirror_pose_tensor(p);
  CHECK(m.at(0, 0, kLeftKnee) == doctest::Approx(-p.at(0, 0, kRightKnee)));
  CHECK(m.at(1, 0, kLeftKnee) == doctest::Approx(p.at(1, 0, kRightKnee)));
  CHECK(m.at(2, 0, kLeftKnee) == doctest::Approx(p.at(2, 0, kRightKnee)));
  const PoseTensor back = mirror_pose_tensor(m);
  for (std::size_t i = 0; i < p.values.size(); ++i) CHECK(back.values[i] == doctest::Approx(p.values[i]));
}

TEST_CASE("stack_pose_tensors lays out N x 3 x 1 x T x K") {
  PoseTensor a(4, 5), b(4, 5);
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    a.values[i] = static_cast<double>(i);
    b.values[i] = -static_cast<double>(i);
  }
  const std::vector<PoseTensor> both{a, b};
  const Tensor<double> s = stack_pose_tensors<double>(both);
  CHECK(s.shape() == Shape{2, 3, 1, 4, 5});
  CHECK(s.at(0, 2, 0, 3, 4) == a.at(2, 3, 4));
  CHECK(s.at(1, 1, 0, 2, 1) == b.at(1, 2, 1));
  const std::vector<PoseTensor> mixed{a, PoseTensor(3, 5)};
  CHECK_THROWS(stack_pose_tensors<double>(mixed));
}

TEST_CASE("full-width pose CNN keeps the T x K grid and yields a 512-d feature") {
  PoseCnnConfig c;
  PoseCnn<float> net(c);
  Rng rng = make_rng(0);
  net.init(rng);
  Tensor<float> x({1, 3, 1, 8, 17});
  for (auto& v : x.values()) v = static_cast<float>(normal(rng));
  const auto out = net.forward(x, nn::Phase::kEval, nullptr);
  CHECK(c.feature_channels() == 512);
  CHECK(out.feature.shape() == Shape{1, 512});
  CHECK(out.logits.shape() == Shape{1, 4});
  REQUIRE(net.stage_shapes().size() == 5);
  const int widths[] = {64, 64, 128, 256, 512};
  for (std::size_t i = 0; i < 5; ++i) CHECK(net.stage_shapes()[i].shape == Shape{1, widths[i], 1, 8, 17});
}

TEST_CASE("bottleneck pose CNN variant") {
  PoseCnnConfig c;
  c.bottleneck = true;
  c.width_divisor = 8;
  c.blocks = {1, 1, 1, 1};
  PoseCnn<float> net(c);
  Rng rng = make_rng(1);
  net.init(rng);
  const auto out = net.forward(Tensor<float>({2, 3, 1, 4, 17}, 0.1f), nn::Phase::kEval, nullptr);
  CHECK(out.feature.shape() == Shape{2, 8 * 8 * 4});
}

TEST_CASE("pose CNN behaviour in eval mode") {
  PoseCnnConfig c;
  c.width_divisor = 8;
  c.blocks = {1, 1, 1, 1};
  PoseCnn<double> net(c);
  Rng rng = make_rng(2);
  net.init(rng);

  SUBCASE("zero input with a zeroed classifier is uniform") {
    net.fc().weight().value.zero();
    net.fc().bias().value.zero();
    const auto out = net.forward(Tensor<double>({1, 3, 1, 8, 17}), nn::Phase::kEval, nullptr);
    const Tensor<double> p = softmax(out.logits);
    for (double v : p.values()) CHECK(v == doctest::Approx(0.25));
  }
  SUBCASE("identical batch entries give identical logits") {
    Tensor<double> x({2, 3, 1, 8, 17});
    for (int i = 0; i < 3 * 8 * 17; ++i) x[i] = x[i + 3 * 8 * 17] = normal(rng);
    const auto out = net.forward(x, nn::Phase::kEval, nullptr);
    for (int j = 0; j < 4; ++j) CHECK(out.logits[j] == out.logits[4 + j]);
  }
  SUBCASE("grids smaller than 3 x 3 are rejected") {
    CHECK_THROWS(net.forward(Tensor<double>({1, 3, 1, 2, 17}), nn::Phase::kEval, nullptr));
  }
}

TEST_CASE("pose_action_loss") {
  const std::vector<int> labels{0};
  CHECK(pose_action_loss(Tensor<double>({1, 4}, 0.0), std::span<const int>(labels)).value ==
        doctest::Approx(std::log(4.0)));
  Tensor<double> confident({1, 4}, std::vector<double>{10, 0, 0, 0});
  CHECK(pose_action_loss(confident, std::span<const int>(labels)).value < 1e-3);
}
