#include <cmath>
#include <functional>

#include "doctest.h"
#include "pcar/classify.hpp"
#include "pcar/nn/layers.hpp"

using namespace pcar;
using namespace pcar::nn;

namespace {

Tensor<double> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = scale * normal(rng);
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double s = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

// Direct nested-loop convolution, the reference for the im2col path.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* bias,
                           const ConvSpec& s) {
  const int n = x.dim(0), ci = x.dim(1), t = x.dim(2), h = x.dim(3), wd = x.dim(4);
  const int co = s.out_channels;
  const int ot = (t + 2 * s.padding.t - s.kernel.t) / s.stride.t + 1;
  const int oh = (h + 2 * s.padding.h - s.kernel.h) / s.stride.h + 1;
  const int ow = (wd + 2 * s.padding.w - s.kernel.w) / s.stride.w + 1;
  Tensor<double> y({n, co, ot, oh, ow});
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < co; ++o)
      for (int a = 0; a < ot; ++a)
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) {
            double acc = bias ? (*bias)[o] : 0.0;
            for (int c = 0; c < ci; ++c)
              for (int kt = 0; kt < s.kernel.t; ++kt)
                for (int kh = 0; kh < s.kernel.h; ++kh)
                  for (int kw = 0; kw < s.kernel.w; ++kw) {
                    const int tt = a * s.stride.t - s.padding.t + kt;
                    const int yy = i * s.stride.h - s.padding.h + kh;
                    const int xx = j * s.stride.w - s.padding.w + kw;
                    if (tt < 0 || tt >= t || yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
                    const std::int64_t wi =
                        (((static_cast<std::int64_t>(o) * ci + c) * s.kernel.t + kt) * s.kernel.h + kh) * s.kernel.w + kw;
                    acc += w[wi] * x.at(b, c, tt, yy, xx);
                  }
            y.at(b, o, a, i, j) = acc;
          }
  return y;
}

// Scatter form of the transposed convolution.
Tensor<double> deconv_oracle(const Tensor<double>& x, const Tensor<double>& w, const ConvSpec& s) {
  const int n = x.dim(0), ci = x.dim(1), t = x.dim(2), h = x.dim(3), wd = x.dim(4);
  const int co = s.out_channels;
  const int ot = (t - 1) * s.stride.t - 2 * s.padding.t + s.kernel.t;
  const int oh = (h - 1) * s.stride.h - 2 * s.padding.h + s.kernel.h;
  const int ow = (wd - 1) * s.stride.w - 2 * s.padding.w + s.kernel.w;
  Tensor<double> y({n, co, ot, oh, ow});
  for (int b = 0; b < n; ++b)
    for (int c = 0; c < ci; ++c)
      for (int a = 0; a < t; ++a)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < wd; ++j)
            for (int o = 0; o < co; ++o)
              for (int kt = 0; kt < s.kernel.t; ++kt)
                for (int kh = 0; kh < s.kernel.h; ++kh)
                  for (int kw = 0; kw < s.kernel.w; ++kw) {
                    const int tt = a * s.stride.t - s.padding.t + kt;
                    const int yy = i * s.stride.h - s.padding.h + kh;
                    const int xx = j * s.stride.w - s.padding.w + kw;
                    if (tt < 0 || tt >= ot || yy < 0 || yy >= oh || xx < 0 || xx >= ow) continue;
                    const std::int64_t wi =
                        (((static_cast<std::int64_t>(c) * co + o) * s.kernel.t + kt) * s.kernel.h + kh) * s.kernel.w + kw;
                    y.at(b, o, tt, yy, xx) += w[wi] * x.at(b, c, a, i, j);
                  }
  return y;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)}); }

// Checks backward() of a layer against central differences of <w, f(x)>.
void check_gradients(const std::function<Tensor<double>(const Tensor<double>&)>& fwd,
                     const std::function<Tensor<double>(const Tensor<double>&)>& bwd, Tensor<double> x,
                     std::vector<Parameter<double>*> params, Rng& rng, double eps = 1e-6) {
  for (auto* p : params) p->zero_grad();
  const Tensor<double> y = fwd(x);
  const Tensor<double> w = random_tensor(y.shape(), rng);
  const Tensor<double> dx = bwd(w);
  auto loss = [&](const Tensor<double>& in) { return dot(w, fwd(in)); };
  for (int s = 0; s < 12; ++s) {
    const auto i = static_cast<std::int64_t>(uniform_int(rng, 0, static_cast<int>(x.numel() - 1)));
    const double keep = x[i];
    x[i] = keep + eps;
    const double lp = loss(x);
    x[i] = keep - eps;
    const double lm = loss(x);
    x[i] = keep;
    CHECK(rel_err(dx[i], (lp - lm) / (2 * eps)) < 1e-6);
  }
  for (auto* p : params) {
    for (int s = 0; s < 8; ++s) {
      const auto i = static_cast<std::int64_t>(uniform_int(rng, 0, static_cast<int>(p->value.numel() - 1)));
      const double keep = p->value[i];
      p->value[i] = keep + eps;
      const double lp = loss(x);
      p->value[i] = keep - eps;
      const double lm = loss(x);
      p->value[i] = keep;
      CHECK(rel_err(p->grad[i], (lp - lm) / (2 * eps)) < 1e-6);
    }
  }
}

}  // namespace

TEST_CASE("Conv3d forward matches the direct convolution") {
  Rng rng = make_rng(1);
  const ConvSpec spec{3, 4, {3, 3, 2}, {1, 2, 1}, {1, 1, 0}, true};
  Conv3d<double> conv(spec);
  conv.init_he(rng);
  for (auto& v : conv.bias().value.values()) v = normal(rng);
  const Tensor<double> x = random_tensor({2, 3, 4, 7, 6}, rng);
  const Tensor<double> y = conv.forward(x, Phase::kEval);
  const Tensor<double> ref = conv_oracle(x, conv.weight().value, &conv.bias().value, spec);
  REQUIRE(y.shape() == ref.shape());
  CHECK(y.shape() == conv.output_shape(x.shape()));
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-10));
}

TEST_CASE("ConvTranspose3d forward matches the scatter oracle") {
  Rng rng = make_rng(2);
  const ConvSpec spec{3, 2, {1, 4, 4}, {1, 2, 2}, {0, 1, 1}, false};
  ConvTranspose3d<double> deconv(spec);
  deconv.init_normal(rng, 1.0);
  const Tensor<double> x = random_tensor({2, 3, 2, 3, 3}, rng);
  const Tensor<double> y = deconv.forward(x, Phase::kEval);
  CHECK(y.shape() == Shape{2, 2, 2, 6, 6});
  const Tensor<double> ref = deconv_oracle(x, deconv.weight().value, spec);
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-10));
}

TEST_CASE("layer gradients match central differences") {
  Rng rng = make_rng(3);
  SUBCASE("Conv3d") {
    Conv3d<double> conv({2, 3, {3, 3, 3}, {1, 2, 2}, {1, 1, 1}, true});
    conv.init_he(rng);
    check_gradients([&](const Tensor<double>& x) { return conv.forward(x, Phase::kTrain); },
                    [&](const Tensor<double>& g) { return conv.backward(g); }, random_tensor({2, 2, 3, 5, 5}, rng),
                    {&conv.weight(), &conv.bias()}, rng);
  }
  SUBCASE("ConvTranspose3d") {
    ConvTranspose3d<double> deconv({3, 2, {1, 4, 4}, {1, 2, 2}, {0, 1, 1}, false});
    deconv.init_normal(rng, 0.5);
    check_gradients([&](const Tensor<double>& x) { return deconv.forward(x, Phase::kTrain); },
                    [&](const Tensor<double>& g) { return deconv.backward(g); }, random_tensor({1, 3, 2, 3, 3}, rng),
                    {&deconv.weight()}, rng);
  }
  SUBCASE("BatchNorm3d in training mode") {
    BatchNorm3d<double> bn(3);
    for (auto& v : bn.gamma().value.values()) v = 1 + 0.3 * normal(rng);
    for (auto& v : bn.beta().value.values()) v = 0.3 * normal(rng);
    check_gradients([&](const Tensor<double>& x) { return bn.forward(x, Phase::kTrain); },
                    [&](const Tensor<double>& g) { return bn.backward(g); }, random_tensor({2, 3, 2, 3, 3}, rng),
                    {&bn.gamma(), &bn.beta()}, rng);
  }
  SUBCASE("ReLU") {
    ReLU<double> relu;
    check_gradients([&](const Tensor<double>& x) { return relu.forward(x, Phase::kTrain); },
                    [&](const Tensor<double>& g) { return relu.backward(g); }, random_tensor({1, 2, 2, 3, 3}, rng), {},
                    rng);
  }
  SUBCASE("MaxPool3d") {
    MaxPool3d<double> pool({1, 3, 3}, {1, 2, 2}, {0, 1, 1});
    check_gradients([&](const Tensor<double>& x) { return pool.forward(x, Phase::kTrain); },
                    [&](const Tensor<double>& g) { return pool.backward(g); }, random_tensor({1, 2, 2, 6, 6}, rng), {},
                    rng);
  }
  SUBCASE("GlobalAvgPool and Linear") {
    GlobalAvgPool<double> gap;
    Linear<double> fc(3, 4);
    fc.init_normal(rng, 1.0);
    check_gradients([&](const Tensor<double>& x) { return fc.forward(gap.forward(x, Phase::kTrain), Phase::kTrain); },
                    [&](const Tensor<double>& g) { return gap.backward(fc.backward(g)); },
                    random_tensor({2, 3, 2, 2, 2}, rng), {&fc.weight(), &fc.bias()}, rng);
  }
}

TEST_CASE("BatchNorm3d running statistics and eval normalization") {
  BatchNorm3d<double> bn(1, 0.9, 0.0);
  Tensor<double> x({1, 1, 1, 1, 4}, std::vector<double>{1, 2, 3, 4});
  bn.forward(x, Phase::kTrain);
  CHECK(bn.running_mean()[0] == doctest::Approx(0.1 * 2.5));
  bn.running_mean()[0] = 2.5;
  bn.running_var()[0] = 4.0;
  const Tensor<double> y = bn.forward(x, Phase::kEval);
  CHECK(y[0] == doctest::Approx(-0.75));
  CHECK(y[3] == doctest::Approx(0.75));
}

TEST_CASE("Dropout") {
  Rng rng = make_rng(4);
  Dropout<double> drop(0.5);
  Tensor<double> x({1, 1000}, 1.0);
  CHECK(drop.forward(x, Phase::kEval, nullptr) == x);
  const Tensor<double> y = drop.forward(x, Phase::kTrain, &rng);
  int kept = 0;
  for (auto v : y.values()) {
    CHECK((v == 0.0 || v == 2.0));
    kept += v != 0.0;
  }
  CHECK(kept > 400);
  CHECK(kept < 600);
  const Tensor<double> g = drop.backward(x);
  CHECK(g == y);
}

TEST_CASE("im2col and col2im are adjoint") {
  Rng rng = make_rng(5);
  ConvGeometry g;
  g.channels = 2;
  g.t = 3;
  g.h = 5;
  g.w = 4;
  g.kernel = {3, 3, 2};
  g.stride = {1, 2, 1};
  g.padding = {1, 1, 0};
  g.ot = 3;
  g.oh = 3;
  g.ow = 3;
  const Tensor<double> x = random_tensor({2, 3, 5, 4}, rng);
  const std::int64_t cols = g.col_rows() * g.ot * g.plane();
  Tensor<double> col({static_cast<int>(cols)});
  im2col(x.data(), g, 0, g.ot, col.data());
  const Tensor<double> c2 = random_tensor({static_cast<int>(cols)}, rng);
  Tensor<double> back({2, 3, 5, 4});
  col2im(c2.data(), g, 0, g.ot, back.data());
  CHECK(dot(col, c2) == doctest::Approx(dot(x, back)).epsilon(1e-12));
}

TEST_CASE("softmax cross entropy") {
  Tensor<double> uniform({1, 4}, 0.0);
  const std::vector<int> label{2};
  CHECK(softmax_cross_entropy(uniform, std::span<const int>(label)).value == doctest::Approx(std::log(4.0)));

  Tensor<double> peaked({1, 4}, std::vector<double>{0, 0, 10, 0});
  const double oracle = -std::log(std::exp(10.0) / (std::exp(10.0) + 3.0));
  const auto r = softmax_cross_entropy(peaked, std::span<const int>(label));
  CHECK(r.value < 1e-3);
  CHECK(r.value == doctest::Approx(oracle).epsilon(1e-12));

  Tensor<double> a({1, 4}, std::vector<double>{0.3, -1.2, 0.7, 2.0});
  Tensor<double> b({1, 4}, std::vector<double>{2.0, 0.3, 0.7, -1.2});
  CHECK(softmax_cross_entropy(a, std::span<const int>(label)).value ==
        doctest::Approx(softmax_cross_entropy(b, std::span<const int>(label)).value).epsilon(1e-14));

  const Tensor<double> p = softmax(a);
  double sum = 0;
  for (int j = 0; j < 4; ++j) sum += p[j];
  CHECK(sum == doctest::Approx(1.0));
  const auto ra = softmax_cross_entropy(a, std::span<const int>(label));
  for (int j = 0; j < 4; ++j) CHECK(ra.grad[j] == doctest::Approx(p[j] - (j == 2 ? 1.0 : 0.0)));
}

TEST_CASE("argmax breaks ties toward the lowest index") {
  const std::vector<double> v{0.2, 0.5, 0.5, 0.1};
  CHECK(argmax(v) == 1);
  const std::vector<double> z(4, 0.0);
  CHECK(argmax(z) == 0);
}
