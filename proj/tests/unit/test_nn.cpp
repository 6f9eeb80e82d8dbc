// Copyright (c) 2026 MDD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <catch_amalgamated.hpp>

#include "helpers.hpp"
#include "mdd/nn.hpp"

using namespace mdd;
using namespace mdd::nn;
using mdd_test::rel_err;

TEST_CASE("conv2d gradients match finite differences", "[nn][grad]") {
  for (int stride : {1, 2}) {
    Conv2d conv(2, 3, 3, 3, stride);
    Rng rng(20 + stride);
    conv.init(rng);
    FeatureMap x(2, 6, 8);
    for (Eigen::Index i = 0; i < x.data.size(); ++i)
      x.data.data()[i] = rng.normal();

    Mat target;
    auto forward = [&] { return conv.forward(x).data; };
    target = forward();
    Rng trng(99);
    for (Eigen::Index i = 0; i < target.size(); ++i)
      target.data()[i] = trng.normal();

    auto loss = [&] { return 0.5 * (forward() - target).squaredNorm(); };

    conv.zero_grad();
    FeatureMap out = conv.forward(x);
    FeatureMap dout = out;
    dout.data = out.data - target;
    FeatureMap dx = conv.backward(dout);

    std::vector<ParamRef> params;
    conv.collect_params(params);
    Rng pick(7);
    const double h = 1e-6;
    for (int k = 0; k < 8; ++k) {
      auto& p = params[pick.uniform_int(0, 1)];
      size_t idx = static_cast<size_t>(pick.uniform_int(0, p.size - 1));
      double keep = p.value[idx];
      p.value[idx] = keep + h;
      double lp = loss();
      p.value[idx] = keep - h;
      double lm = loss();
      p.value[idx] = keep;
      REQUIRE(rel_err(p.grad[idx], (lp - lm) / (2 * h)) < 1e-5);
    }
    // input gradient
    for (int k = 0; k < 8; ++k) {
      Eigen::Index idx = pick.uniform_int(0, x.data.size() - 1);
      double keep = x.data.data()[idx];
      x.data.data()[idx] = keep + h;
      double lp = loss();
      x.data.data()[idx] = keep - h;
      double lm = loss();
      x.data.data()[idx] = keep;
      REQUIRE(rel_err(dx.data.data()[idx], (lp - lm) / (2 * h)) < 1e-5);
    }
  }
}

TEST_CASE("dense gradients match finite differences", "[nn][grad]") {
  Dense dense(5, 4);
  Rng rng(21);
  dense.init(rng);
  Vec x(5), target(4);
  for (int i = 0; i < 5; ++i) x[i] = rng.normal();
  for (int i = 0; i < 4; ++i) target[i] = rng.normal();

  auto loss = [&] { return 0.5 * (dense.forward(x) - target).squaredNorm(); };
  dense.zero_grad();
  Vec out = dense.forward(x);
  Vec dx = dense.backward(out - target);

  std::vector<ParamRef> params;
  dense.collect_params(params);
  const double h = 1e-6;
  Rng pick(8);
  for (int k = 0; k < 6; ++k) {
    auto& p = params[pick.uniform_int(0, 1)];
    size_t idx = static_cast<size_t>(pick.uniform_int(0, p.size - 1));
    double keep = p.value[idx];
    p.value[idx] = keep + h;
    double lp = loss();
    p.value[idx] = keep - h;
    double lm = loss();
    p.value[idx] = keep;
    REQUIRE(rel_err(p.grad[idx], (lp - lm) / (2 * h)) < 1e-6);
  }
  for (int i = 0; i < 5; ++i) {
    double keep = x[i];
    x[i] = keep + h;
    double lp = loss();
    x[i] = keep - h;
    double lm = loss();
    x[i] = keep;
    REQUIRE(rel_err(dx[i], (lp - lm) / (2 * h)) < 1e-6);
  }
}

TEST_CASE("silu derivative matches finite differences", "[nn][grad]") {
  Rng rng(22);
  Mat x = rng.normal_matrix(3, 4);
  Mat ones = Mat::Ones(3, 4);
  Mat g = silu_grad(x, ones);
  const double h = 1e-7;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      Mat xp = x, xm = x;
      xp(i, j) += h;
      xm(i, j) -= h;
      double fd = (silu(xp).sum() - silu(xm).sum()) / (2 * h);
      REQUIRE(rel_err(g(i, j), fd) < 1e-6);
    }
}

TEST_CASE("nearest upsample and its adjoint are consistent", "[nn]") {
  Rng rng(23);
  FeatureMap x(2, 3, 4);
  for (Eigen::Index i = 0; i < x.data.size(); ++i)
    x.data.data()[i] = rng.normal();
  FeatureMap up = upsample2x(x);
  REQUIRE(up.rows == 6);
  REQUIRE(up.cols == 8);
  REQUIRE(up.data(0, 0) == x.data(0, 0));
  REQUIRE(up.data(0, 1) == x.data(0, 0));
  REQUIRE(up.data(0, 8) == x.data(0, 0));

  // adjoint identity <up(x), y> == <x, up^T(y)>
  FeatureMap y(2, 6, 8);
  for (Eigen::Index i = 0; i < y.data.size(); ++i)
    y.data.data()[i] = rng.normal();
  FeatureMap yt = upsample2x_backward(y, 3, 4);
  double lhs = (up.data.array() * y.data.array()).sum();
  double rhs = (x.data.array() * yt.data.array()).sum();
  REQUIRE(rel_err(lhs, rhs) < 1e-12);
}

TEST_CASE("softmax cross entropy gradient and value", "[nn][grad]") {
  Vec logits(4);
  logits << 0.2, -1.0, 2.0, 0.5;
  Vec dlogits;
  double loss = softmax_cross_entropy(logits, 2, dlogits);
  // direct evaluation
  Vec e = (logits.array() - logits.maxCoeff()).exp();
  double p2 = e[2] / e.sum();
  REQUIRE(loss == Catch::Approx(-std::log(p2)));
  const double h = 1e-7;
  for (int i = 0; i < 4; ++i) {
    Vec lp = logits, lm = logits, dummy;
    lp[i] += h;
    lm[i] -= h;
    double fd = (softmax_cross_entropy(lp, 2, dummy) -
                 softmax_cross_entropy(lm, 2, dummy)) /
                (2 * h);
    REQUIRE(rel_err(dlogits[i], fd) < 1e-5);
  }
  REQUIRE_THROWS_AS(softmax_cross_entropy(logits, 7, dlogits), RangeError);
}

TEST_CASE("adam minimizes a quadratic", "[nn]") {
  Mat w(1, 3), g(1, 3);
  w << 3.0, -2.0, 1.0;
  std::vector<ParamRef> params;
  detail::add_param(params, w, g);
  Adam adam(0.05);
  for (int it = 0; it < 800; ++it) {
    g = 2.0 * w;  // d/dw ||w||^2
    adam.step(params);
  }
  REQUIRE(w.norm() < 1e-3);
}

TEST_CASE("sinusoidal embedding is bounded and t-sensitive", "[nn]") {
  Vec a = sinusoidal_embedding(1.0, 64);
  Vec b = sinusoidal_embedding(999.0, 64);
  REQUIRE(a.size() == 64);
  REQUIRE(a.lpNorm<Eigen::Infinity>() <= 1.0 + 1e-12);
  REQUIRE((a - b).norm() > 0.1);
}

TEST_CASE("parameter blobs round trip", "[nn]") {
  Dense d1(3, 2), d2(3, 2);
  Rng rng(24);
  d1.init(rng);
  d2.init(rng);
  std::vector<ParamRef> p1, p2;
  d1.collect_params(p1);
  d2.collect_params(p2);
  std::vector<double> blob = dump_params(p1);
  blob[0] = 42.0;
  load_params(p2, blob);
  std::vector<double> blob2 = dump_params(p2);
  REQUIRE(blob == blob2);
  blob.pop_back();
  REQUIRE_THROWS_AS(load_params(p2, blob), ConfigError);
}
