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
#include "mdd/diffusion.hpp"

using namespace mdd;
using mdd_test::TempDir;
using mdd_test::rel_err;

namespace {

// Test-only oracle: predicts the composite target consistent with the
// observed x_t given full knowledge of x_0 (unit space).
struct OracleDenoiser {
  NoiseSchedule sched;
  Normalizer norm{-1.0, 1.0};
  DenoiserConfig cfg;
  Mat x0_unit;

  Mat predict(const Mat& x_t, int t, const ConditionEmbedding&) {
    double abar = sched.alpha_bar_at(t);
    Mat x0 = x0_unit.leftCols(x_t.cols());
    return (x_t - std::sqrt(abar) * x0) / std::sqrt(1.0 - abar);
  }
  const NoiseSchedule& schedule() const { return sched; }
  const Normalizer& normalizer() const { return norm; }
  const DenoiserConfig& config() const { return cfg; }
};

ConditionEmbedding no_condition() { return embed_text(""); }

}  // namespace

TEST_CASE("schedule construction matches an independent cumulative product",
          "[diffusion]") {
  NoiseSchedule one = make_schedule(1, 0.3, 0.3);
  REQUIRE(one.alpha_bar_at(1) == Catch::Approx(0.7).epsilon(1e-15));

  NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  // independent recomputation
  double cum = 1.0;
  for (int t = 1; t <= 1000; ++t) {
    double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0;
    REQUIRE(s.beta_at(t) == Catch::Approx(beta).epsilon(1e-14));
    cum *= 1.0 - beta;
    REQUIRE(s.alpha_bar_at(t) == Catch::Approx(cum).epsilon(1e-12));
  }
  REQUIRE(s.alpha_bar_at(1000) < 1e-4);
  for (int t = 2; t <= 1000; ++t) {
    REQUIRE(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
    REQUIRE(s.beta_at(t) >= s.beta_at(t - 1));
    REQUIRE(s.alpha_bar_at(t) ==
            Catch::Approx(s.alpha_bar_at(t - 1) * s.alpha_at(t))
                .epsilon(1e-15));
  }
  REQUIRE(s.alpha_bar_at(1) < 1.0);
  REQUIRE(s.alpha_bar_at(1) > 0.0);

  REQUIRE_THROWS_AS(make_schedule(1000, 0.02, 1e-4), ConfigError);
  REQUIRE_THROWS_AS(make_schedule(0, 1e-4, 0.02), ConfigError);
  REQUIRE_THROWS_AS(make_schedule(10, 0.0, 0.02), ConfigError);
  REQUIRE_THROWS_AS(make_schedule(10, 0.5, 1.0), ConfigError);
}

TEST_CASE("composite target reduces to the masked input when sigma is zero",
          "[diffusion]") {
  Rng rng(40);
  Mat x0 = rng.normal_matrix(32, 32);

  MaskPattern none = sample_mask(32, 32, 0.0, 1);
  CompositeNoiseTarget a = composite_target(x0, none, 0.0, 9);
  REQUIRE((a.values - x0).norm() == 0.0);

  MaskPattern full = sample_mask(32, 32, 1.0, 1);
  CompositeNoiseTarget b = composite_target(x0, full, 0.0, 9, 0.0);
  REQUIRE(b.values.norm() == 0.0);
}

TEST_CASE("composite target adds the documented seeded gaussian draw",
          "[diffusion]") {
  Rng rng(41);
  Mat x0 = rng.normal_matrix(2, 2);
  MaskPattern none = sample_mask(2, 2, 0.0, 1);
  uint64_t seed = 3;
  CompositeNoiseTarget n = composite_target(x0, none, 0.1, seed);

  // oracle: regenerate the draw from the documented stream and add by hand
  Rng eps(mix64(seed, 0x65707331ull));
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      double expected = x0(r, c) + 0.1 * eps.normal();
      REQUIRE(n.values(r, c) == Catch::Approx(expected).epsilon(1e-15));
    }
  REQUIRE_THROWS_AS(composite_target(x0, sample_mask(3, 2, 0.0, 1), 0.1, 3),
                    ShapeError);
  REQUIRE_THROWS_AS(composite_target(x0, none, -0.1, 3), RangeError);
}

TEST_CASE("forward sample obeys its limit cases and the hand-computed case",
          "[diffusion]") {
  Mat x0(2, 2);
  x0 << 1, 0, 0, 1;
  CompositeNoiseTarget n;
  n.values = x0;

  // synthetic schedules pin the alpha_bar limits exactly
  NoiseSchedule limit;
  limit.T = 1;
  limit.beta = Vec::Constant(1, 0.5);
  limit.alpha = Vec::Constant(1, 0.5);
  limit.alpha_bar = Vec::Constant(1, 1.0);
  REQUIRE((forward_sample(x0, n, 1, limit) - x0).norm() == 0.0);

  limit.alpha_bar[0] = 0.0;
  Rng rng(42);
  CompositeNoiseTarget other;
  other.values = rng.normal_matrix(2, 2);
  REQUIRE((forward_sample(x0, other, 1, limit) - other.values).norm() == 0.0);

  limit.alpha_bar[0] = 0.25;
  Mat xt = forward_sample(x0, n, 1, limit);
  REQUIRE(rel_err(xt, (0.5 + std::sqrt(0.75)) * x0) < 1e-15);

  NoiseSchedule s = make_schedule(10, 1e-2, 2e-1);
  REQUIRE_THROWS_AS(forward_sample(x0, n, 0, s), RangeError);
  REQUIRE_THROWS_AS(forward_sample(x0, n, 11, s), RangeError);
}

TEST_CASE("forward sample is linear in (x0, n_target)", "[diffusion]") {
  NoiseSchedule s = make_schedule(100, 1e-3, 5e-2);
  Rng rng(43);
  for (int trial = 0; trial < 20; ++trial) {
    Mat x = rng.normal_matrix(5, 7), y = rng.normal_matrix(5, 7);
    CompositeNoiseTarget n1, n2, nmix;
    n1.values = rng.normal_matrix(5, 7);
    n2.values = rng.normal_matrix(5, 7);
    double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
    nmix.values = a * n1.values + b * n2.values;
    int t = static_cast<int>(rng.uniform_int(1, 100));
    Mat lhs = forward_sample(a * x + b * y, nmix, t, s);
    Mat rhs = a * forward_sample(x, n1, t, s) + b * forward_sample(y, n2, t, s);
    REQUIRE(rel_err(lhs, rhs) < 1e-12);
  }
}

TEST_CASE("unmasked cells pass through scaled by the schedule when sigma is 0",
          "[diffusion]") {
  NoiseSchedule s = make_schedule(50, 1e-3, 5e-2);
  Rng rng(44);
  Mat x0 = rng.normal_matrix(48, 48);
  MaskPattern mask = sample_mask(48, 48, 0.4, 7);
  CompositeNoiseTarget n = composite_target(x0, mask, 0.0, 1);
  int t = 17;
  Mat xt = forward_sample(x0, n, t, s);
  double abar = s.alpha_bar_at(t);
  double coeff = std::sqrt(abar) + std::sqrt(1 - abar);
  for (int r = 0; r < 48; ++r)
    for (int c = 0; c < 48; ++c)
      if (!mask.mask(r, c))
        REQUIRE(xt(r, c) == Catch::Approx(coeff * x0(r, c)).epsilon(1e-14));
}

TEST_CASE("recover_x0 inverts the forward relation", "[diffusion]") {
  NoiseSchedule s = make_schedule(100, 1e-3, 2e-2);
  Rng rng(45);
  for (int trial = 0; trial < 25; ++trial) {
    Mat x0 = rng.normal_matrix(4, 4);
    MaskPattern mask = sample_mask(4, 4, rng.uniform(), trial);
    CompositeNoiseTarget n = composite_target(x0, mask, 0.1, trial + 100);
    int t = static_cast<int>(rng.uniform_int(1, 100));
    Mat xt = forward_sample(x0, n, t, s);
    Mat rec = recover_x0(xt, n.values, t, s);
    REQUIRE(rel_err(rec, x0) < 1e-9);

    // independent hand evaluation of the inversion formula
    double abar = s.alpha_bar_at(t);
    Mat by_hand = (xt - std::sqrt(1 - abar) * n.values) / std::sqrt(abar);
    REQUIRE(rel_err(rec, by_hand) < 1e-15);
  }

  // alpha_bar = 1 limit: x0_hat equals x_t
  NoiseSchedule limit;
  limit.T = 1;
  limit.beta = Vec::Constant(1, 0.1);
  limit.alpha = Vec::Constant(1, 0.9);
  limit.alpha_bar = Vec::Constant(1, 1.0);
  Mat xt = rng.normal_matrix(3, 3);
  REQUIRE((recover_x0(xt, xt, 1, limit) - xt).norm() == 0.0);

  // conditioning guard
  limit.alpha_bar[0] = 1e-7;
  REQUIRE_THROWS_AS(recover_x0(xt, xt, 1, limit), IllConditionedError);
}

TEST_CASE("reverse step matches the hand-derived deterministic form",
          "[diffusion]") {
  NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  Rng rng(46);
  Mat x0 = rng.normal_matrix(2, 2);

  OracleDenoiser oracle{s, Normalizer(-1, 1), DenoiserConfig{}, x0};
  ConditionEmbedding c = no_condition();

  for (int t : {2, 5, 17, 200, 999, 1000}) {
    CompositeNoiseTarget n;
    n.values = x0;  // sigma = 0, ratio = 0
    Mat xt = forward_sample(x0, n, t, s);
    Mat got = reverse_step(oracle, xt, t, c, s, /*seed=*/1, /*noise_scale=*/0);

    // both sides hand-evaluated: starting on-manifold the step lands at
    // sqrt(abar_{t-1}) x0 + sqrt(alpha_t) (1-abar_{t-1})/sqrt(1-abar_t) x0
    double abar_t = s.alpha_bar_at(t);
    double abar_p = t > 1 ? s.alpha_bar_at(t - 1) : 1.0;
    double coeff = std::sqrt(abar_p) + std::sqrt(s.alpha_at(t)) *
                                           (1.0 - abar_p) /
                                           std::sqrt(1.0 - abar_t);
    REQUIRE(rel_err(got, coeff * x0) < 1e-12);

    // at small t the deterministic part moves toward the previous level
    if (t <= 5) {
      Mat target = forward_sample(x0, n, t - 1 > 0 ? t - 1 : 1, s);
      if (t > 1) {
        REQUIRE((got - target).norm() < (xt - target).norm());
      }
    }
  }
}

TEST_CASE("reverse step adds the seeded noise term except at t=1",
          "[diffusion]") {
  NoiseSchedule s = make_schedule(100, 1e-3, 2e-2);
  struct ZeroModel {
    Mat predict(const Mat& x_t, int, const ConditionEmbedding&) {
      return Mat::Zero(x_t.rows(), x_t.cols());
    }
  } zero_model;
  ConditionEmbedding c = no_condition();
  Mat x = Mat::Zero(3, 3);

  // t = 1: no stochastic term
  Mat out1 = reverse_step(zero_model, x, 1, c, s, 5);
  REQUIRE(out1.norm() == 0.0);

  // t > 1: output is sqrt(beta_t) z with z from the documented stream
  int t = 40;
  Mat out = reverse_step(zero_model, x, t, c, s, 5);
  Rng z(mix64(5, 0x7a6eull + static_cast<uint64_t>(t)));
  Mat expected = std::sqrt(s.beta_at(t)) * z.normal_matrix(3, 3);
  REQUIRE(rel_err(out, expected) < 1e-15);

  // the noise scale multiplies the stochastic term
  Mat half = reverse_step(zero_model, x, t, c, s, 5, 0.5);
  REQUIRE(rel_err(half, 0.5 * expected) < 1e-15);
}

TEST_CASE("training loss is zero for the exact oracle and delta^2 for offsets",
          "[diffusion]") {
  NoiseSchedule s = make_schedule(100, 1e-3, 2e-2);
  Rng rng(47);
  Mat x0 = rng.normal_matrix(32, 32);
  uint64_t seed = 11;
  double ratio = 0.25, sigma = 0.1;

  // regenerate N_target through the documented seed derivation
  MaskPattern mask = sample_mask(32, 32, ratio, mix64(seed, 0x6d6bull));
  CompositeNoiseTarget n =
      composite_target(x0, mask, sigma, mix64(seed, 0x6570ull));

  struct FixedModel {
    Mat out;
    Mat predict(const Mat&, int, const ConditionEmbedding&) { return out; }
    NoiseSchedule sched;
    const NoiseSchedule& schedule() const { return sched; }
  };
  FixedModel exact{n.values, s};
  double loss = training_loss(exact, x0, no_condition(), 30, ratio, sigma,
                              seed);
  REQUIRE(loss < 1e-28);

  double delta = 0.37;
  FixedModel offset{n.values.array() + delta, s};
  double loss2 = training_loss(offset, x0, no_condition(), 30, ratio, sigma,
                               seed);
  REQUIRE(loss2 == Catch::Approx(delta * delta).epsilon(1e-12));

  // a model ignoring c produces c-invariant losses
  double l_a = training_loss(offset, x0, embed_text("one text"), 30, ratio,
                             sigma, seed);
  double l_b = training_loss(offset, x0, embed_text("another"), 30, ratio,
                             sigma, seed);
  REQUIRE(l_a == l_b);
}

TEST_CASE("denoiser parameter gradients match finite differences on a "
          "micro-model",
          "[diffusion][grad]") {
  DenoiserConfig cfg;
  cfg.n_mels = 8;
  cfg.base_channels = 2;
  cfg.time_dim = 8;
  cfg.cond_hidden = 4;
  cfg.frames = 8;
  NoiseSchedule s = make_schedule(20, 1e-3, 2e-2);
  DenoiserModel model(cfg, s, Normalizer(-1, 1), /*init_seed=*/3);

  Rng rng(48);
  Mat x0 = rng.normal_matrix(8, 8);
  ConditionEmbedding c = embed_text("check");
  uint64_t seed = 21;
  int t = 7;
  double ratio = 0.5, sigma = 0.1;

  // analytic gradient
  Mat n_target, pred;
  training_loss(model, x0, c, t, ratio, sigma, seed, &n_target, &pred);
  model.net().zero_grad();
  Mat dpred = 2.0 * (pred - n_target) / pred.size();
  model.net().backward(dpred);

  auto params = model.params();
  Rng pick(9);
  const double h = 1e-5;
  size_t total = nn::param_count(params);
  int checked = 0;
  while (checked < 10) {
    size_t flat = static_cast<size_t>(pick.uniform_int(0, total - 1));
    size_t off = 0;
    nn::ParamRef* ref = nullptr;
    for (auto& p : params) {
      if (flat < off + p.size) {
        ref = &p;
        break;
      }
      off += p.size;
    }
    size_t idx = flat - off;
    double keep = ref->value[idx];
    ref->value[idx] = keep + h;
    double lp = training_loss(model, x0, c, t, ratio, sigma, seed);
    ref->value[idx] = keep - h;
    double lm = training_loss(model, x0, c, t, ratio, sigma, seed);
    ref->value[idx] = keep;
    double fd = (lp - lm) / (2 * h);
    if (std::abs(fd) < 1e-10) continue;  // off the data path (zero-init conv)
    REQUIRE(rel_err(ref->grad[idx], fd) < 1e-3);
    ++checked;
  }
}

TEST_CASE("training is a no-op at zero iterations and deterministic under "
          "seed",
          "[diffusion][slow]") {
  DenoiserConfig cfg;
  cfg.n_mels = 16;
  cfg.base_channels = 4;
  cfg.time_dim = 16;
  cfg.cond_hidden = 8;
  cfg.frames = 16;
  NoiseSchedule s = make_schedule(50, 1e-3, 2e-2);

  Rng rng(49);
  std::vector<Mat> feats;
  std::vector<ConditionEmbedding> conds;
  for (int i = 0; i < 4; ++i) {
    feats.push_back(rng.normal_matrix(16, 16));
    conds.push_back(embed_text("utt " + std::to_string(i)));
  }

  DiffusionTrainConfig tc;
  tc.iterations = 0;
  tc.seed = 5;
  DenoiserModel model(cfg, s, Normalizer(-1, 1), 7);
  std::vector<double> before = nn::dump_params(model.params());
  auto log0 = train(model, feats, conds, tc);
  REQUIRE(log0.empty());
  REQUIRE(nn::dump_params(model.params()) == before);
  REQUIRE_FALSE(model.trained());

  tc.iterations = 30;
  tc.num_threads = 2;
  tc.batch_size = 4;
  DenoiserModel m1(cfg, s, Normalizer(-1, 1), 7);
  DenoiserModel m2(cfg, s, Normalizer(-1, 1), 7);
  auto log1 = train(m1, feats, conds, tc);
  auto log2 = train(m2, feats, conds, tc);
  REQUIRE(log1.size() == 30);
  for (size_t i = 0; i < log1.size(); ++i)
    REQUIRE(log1[i].loss == log2[i].loss);
  REQUIRE(nn::dump_params(m1.params()) == nn::dump_params(m2.params()));
  REQUIRE(m1.trained());

  // a single-thread run reproduces the two-thread trace bit for bit
  tc.num_threads = 1;
  DenoiserModel m3(cfg, s, Normalizer(-1, 1), 7);
  auto log3 = train(m3, feats, conds, tc);
  for (size_t i = 0; i < log1.size(); ++i)
    REQUIRE(log1[i].loss == log3[i].loss);
  REQUIRE(nn::dump_params(m1.params()) == nn::dump_params(m3.params()));
}

TEST_CASE("training loss decreases on a tiny constant-patterned corpus",
          "[diffusion][slow]") {
  DenoiserConfig cfg;
  cfg.n_mels = 16;
  cfg.base_channels = 8;
  cfg.time_dim = 32;
  cfg.cond_hidden = 16;
  cfg.frames = 32;
  NoiseSchedule s = make_schedule(100, 1e-4, 0.02);

  // 20 constant-patterned spectrograms (striped by utterance index)
  std::vector<Mat> feats;
  std::vector<ConditionEmbedding> conds;
  for (int i = 0; i < 20; ++i) {
    Mat f(16, 32);
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 32; ++c)
        f(r, c) = 0.8 * std::sin(0.3 * (i + 1) * r) *
                  std::cos(0.2 * (i + 1) * c);
    feats.push_back(f);
    conds.push_back(embed_text("pattern " + std::to_string(i)));
  }

  DiffusionTrainConfig tc;
  tc.iterations = 2000;
  tc.batch_size = 4;
  tc.mask_ratio = 0.25;
  tc.sigma = 0.1;
  tc.learning_rate = 3e-4;
  tc.seed = 13;
  tc.num_threads = 2;
  DenoiserModel model(cfg, s, Normalizer(-1, 1), 11);
  auto log = train(model, feats, conds, tc);
  REQUIRE(log.size() == 2000);

  double first = 0, last = 0;
  for (int i = 0; i < 100; ++i) {
    first += log[i].loss;
    last += log[log.size() - 100 + i].loss;
  }
  REQUIRE(last / 100.0 < first / 100.0);
}

TEST_CASE("training aborts with a diagnostic when the loss diverges",
          "[diffusion]") {
  DenoiserConfig cfg;
  cfg.n_mels = 8;
  cfg.base_channels = 2;
  cfg.time_dim = 8;
  cfg.cond_hidden = 4;
  cfg.frames = 8;
  NoiseSchedule s = make_schedule(10, 1e-3, 2e-2);
  std::vector<Mat> feats = {Mat::Ones(8, 8)};
  std::vector<ConditionEmbedding> conds = {embed_text("x")};
  DiffusionTrainConfig tc;
  tc.iterations = 50;
  tc.batch_size = 1;
  tc.learning_rate = 1e18;  // guaranteed blow-up
  DenoiserModel model(cfg, s, Normalizer(-1, 1), 1);
  REQUIRE_THROWS_AS(train(model, feats, conds, tc), TrainingError);
}

TEST_CASE("purify reconstructs the input exactly under the identity oracle",
          "[diffusion]") {
  NoiseSchedule s = make_schedule(50, 1e-4, 0.02);
  Rng rng(50);
  Normalizer norm(-4.0, 4.0);

  MelSpectrogram x_in;
  x_in.config = FeatureConfig{};
  x_in.values = rng.normal_matrix(16, 24);
  x_in.utterance_id = "u0";

  DenoiserConfig cfg;
  cfg.n_mels = 16;
  cfg.frames = 24;
  OracleDenoiser oracle{s, norm, cfg, norm.to_unit(x_in.values)};

  for (int t_start : {1, 10, 50}) {
    PurifierConfig pc;
    pc.t_start = t_start;
    pc.mask_ratio = 0.0;
    pc.sigma = 0.0;
    pc.seed = 3;
    MelSpectrogram out = purify(oracle, x_in, no_condition(), pc);
    REQUIRE(rel_err(out.values, x_in.values) < 1e-6);
  }

  // determinism under the config seed
  PurifierConfig pc;
  pc.t_start = 25;
  pc.mask_ratio = 0.3;
  pc.sigma = 0.1;
  pc.seed = 17;
  MelSpectrogram a = purify(oracle, x_in, no_condition(), pc);
  MelSpectrogram b = purify(oracle, x_in, no_condition(), pc);
  REQUIRE((a.values - b.values).norm() == 0.0);
  pc.seed = 18;
  MelSpectrogram c2 = purify(oracle, x_in, no_condition(), pc);
  REQUIRE((a.values - c2.values).norm() > 0.0);
}

TEST_CASE("purify inpaints a fully masked constant field with the oracle",
          "[diffusion]") {
  NoiseSchedule s = make_schedule(50, 1e-4, 0.02);
  Normalizer norm(-4.0, 4.0);
  MelSpectrogram x_in;
  x_in.config = FeatureConfig{};
  x_in.values = Mat::Constant(16, 24, 1.25);
  DenoiserConfig cfg;
  cfg.n_mels = 16;
  cfg.frames = 24;
  OracleDenoiser oracle{s, norm, cfg, norm.to_unit(x_in.values)};

  PurifierConfig pc;
  pc.t_start = 50;
  pc.mask_ratio = 1.0;
  pc.sigma = 0.0;
  pc.seed = 5;
  MelSpectrogram out = purify(oracle, x_in, no_condition(), pc);
  REQUIRE((out.values - x_in.values).cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("purify stitches long inputs window by window", "[diffusion]") {
  NoiseSchedule s = make_schedule(30, 1e-4, 0.02);
  Normalizer norm(-2.0, 2.0);
  // column-constant input so every window shares the same unit-space slice
  Rng rng(51);
  Vec col = rng.normal_matrix(16, 1).col(0) * 0.5;
  MelSpectrogram x_in;
  x_in.config = FeatureConfig{};
  x_in.values = col.replicate(1, 100);

  DenoiserConfig cfg;
  cfg.n_mels = 16;
  cfg.frames = 32;  // forces 100 -> windows of 32 with overlap-discard
  OracleDenoiser oracle{s, norm, cfg, norm.to_unit(x_in.values)};

  PurifierConfig pc;
  pc.t_start = 30;
  pc.mask_ratio = 0.2;
  pc.sigma = 0.0;
  pc.seed = 7;
  MelSpectrogram out = purify(oracle, x_in, no_condition(), pc);
  REQUIRE(out.values.rows() == 16);
  REQUIRE(out.values.cols() == 100);
  REQUIRE(rel_err(out.values, x_in.values) < 1e-6);
}

TEST_CASE("purify validates its configuration", "[diffusion]") {
  NoiseSchedule s = make_schedule(30, 1e-4, 0.02);
  Normalizer norm(-2.0, 2.0);
  DenoiserConfig cfg;
  cfg.n_mels = 8;
  cfg.frames = 16;
  MelSpectrogram x;
  x.values = Mat::Zero(8, 16);
  OracleDenoiser oracle{s, norm, cfg, norm.to_unit(x.values)};

  PurifierConfig pc;
  pc.t_start = 31;
  REQUIRE_THROWS_AS(purify(oracle, x, no_condition(), pc), RangeError);
  pc.t_start = 10;
  pc.mask_ratio = 1.5;
  REQUIRE_THROWS_AS(purify(oracle, x, no_condition(), pc), RangeError);
  pc.mask_ratio = 0.1;
  pc.sampler = "ddim";
  REQUIRE_THROWS_AS(purify(oracle, x, no_condition(), pc), ConfigError);
}

TEST_CASE("denoiser checkpoints round trip and validate their descriptor",
          "[diffusion]") {
  TempDir tmp("ckpt");
  DenoiserConfig cfg;
  cfg.n_mels = 16;
  cfg.base_channels = 4;
  cfg.time_dim = 16;
  cfg.cond_hidden = 8;
  cfg.frames = 16;
  NoiseSchedule s = make_schedule(25, 1e-4, 0.02);
  DenoiserModel model(cfg, s, Normalizer(-3, 3), 9);
  DiffusionTrainConfig tc;
  tc.mask_ratio = 0.1;
  tc.sigma = 0.1;
  model.mark_trained(tc, 123);

  std::string path = tmp.file("model.ckpt");
  save_denoiser_checkpoint(path, model);
  DenoiserModel loaded = load_denoiser_checkpoint(path);
  REQUIRE(loaded.config() == cfg);
  REQUIRE(loaded.schedule().T == 25);
  REQUIRE(loaded.normalizer().lo == -3);
  REQUIRE(loaded.trained());
  REQUIRE(loaded.steps_done() == 123);
  REQUIRE(loaded.train_mask_ratio() == 0.1);
  REQUIRE(nn::dump_params(loaded.params()) ==
          nn::dump_params(model.params()));

  Rng rng(52);
  Mat x = rng.normal_matrix(16, 16);
  ConditionEmbedding c = embed_text("same");
  REQUIRE((model.predict(x, 5, c) - loaded.predict(x, 5, c)).norm() == 0.0);

  write_text_file(tmp.file("junk.ckpt"), "not a checkpoint at all");
  REQUIRE_THROWS_AS(load_denoiser_checkpoint(tmp.file("junk.ckpt")), IoError);
}
