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
#include "mdd/features.hpp"

using namespace mdd;
using mdd_test::rel_err;

namespace {

Waveform sinusoid(double freq, size_t n, double amp = 0.5) {
  Waveform w;
  w.sample_rate = 16000;
  w.samples.resize(n);
  for (size_t i = 0; i < n; ++i)
    w.samples[i] = amp * std::sin(2 * M_PI * freq * i / 16000.0);
  return w;
}

Waveform noise(size_t n, uint64_t seed) {
  Waveform w;
  w.sample_rate = 16000;
  w.samples.resize(n);
  Rng rng(seed);
  for (auto& s : w.samples) s = 0.3 * rng.normal();
  return w;
}

}  // namespace

TEST_CASE("frame count follows 1 + floor((len - win)/hop)", "[features]") {
  FeatureConfig cfg;
  FeatureExtractor fe(cfg);
  // 16000 samples at 25 ms / 10 ms: 1 + (16000 - 400)/160 = 98
  MelSpectrogram mel = fe.extract(noise(16000, 1));
  REQUIRE(mel.values.rows() == 80);
  REQUIRE(mel.values.cols() == 98);
  REQUIRE(fe.num_frames(400) == 1);
  REQUIRE(fe.num_frames(559) == 1);
  REQUIRE(fe.num_frames(560) == 2);
}

TEST_CASE("silence maps every cell to the log floor", "[features]") {
  FeatureConfig cfg;
  FeatureExtractor fe(cfg);
  Waveform w;
  w.sample_rate = 16000;
  w.samples.assign(1600, 0.0);
  MelSpectrogram mel = fe.extract(w);
  double floor_log = std::log(cfg.log_floor);
  REQUIRE((mel.values.array() == floor_log).all());
}

TEST_CASE("a pure tone peaks in the filter nearest its frequency",
          "[features]") {
  FeatureConfig cfg;
  FeatureExtractor fe(cfg);
  MelSpectrogram mel = fe.extract(sinusoid(1000.0, 8000));

  // independent oracle: recompute the Mel centers, find the one nearest 1 kHz
  auto centers = mel_center_frequencies(cfg);
  int expected = 0;
  double best = 1e18;
  for (int i = 0; i < cfg.n_mels; ++i) {
    double dist = std::abs(centers[i + 1] - 1000.0);
    if (dist < best) {
      best = dist;
      expected = i;
    }
  }
  for (int f = 0; f < mel.values.cols(); ++f) {
    Eigen::Index argmax;
    mel.values.col(f).maxCoeff(&argmax);
    REQUIRE(static_cast<int>(argmax) == expected);
  }
}

TEST_CASE("mel filterbank shape and nonnegativity", "[features]") {
  FeatureConfig cfg;
  cfg.fft_size = 512;
  Mat fb = mel_filterbank(cfg);
  REQUIRE(fb.rows() == 80);
  REQUIRE(fb.cols() == 257);
  REQUIRE((fb.array() >= 0.0).all());
  for (int i = 0; i < fb.rows(); ++i) REQUIRE(fb.row(i).maxCoeff() > 0.0);
}

TEST_CASE("filter centers strictly increase against an independent oracle",
          "[features]") {
  FeatureConfig cfg;
  auto centers = mel_center_frequencies(cfg);
  // oracle: recompute centers directly from the Mel-scale definition
  double m_lo = 2595.0 * std::log10(1.0 + cfg.fmin / 700.0);
  double m_hi = 2595.0 * std::log10(1.0 + cfg.fmax / 700.0);
  for (int i = 0; i < cfg.n_mels; ++i) {
    double mel_pt = m_lo + (m_hi - m_lo) * (i + 1) / (cfg.n_mels + 1);
    double hz = 700.0 * (std::pow(10.0, mel_pt / 2595.0) - 1.0);
    REQUIRE(centers[i + 1] == Catch::Approx(hz).epsilon(1e-12));
    if (i > 0) REQUIRE(centers[i + 1] > centers[i]);
  }
}

TEST_CASE("filter rows have strictly increasing argmax at the default config",
          "[features]") {
  Mat fb = mel_filterbank(FeatureConfig{});
  Eigen::Index prev = -1;
  for (int i = 0; i < fb.rows(); ++i) {
    Eigen::Index argmax;
    fb.row(i).maxCoeff(&argmax);
    REQUIRE(argmax > prev);
    prev = argmax;
  }
}

TEST_CASE("filterbank rejects inverted frequency ranges", "[features]") {
  FeatureConfig cfg;
  cfg.fmin = 5000;
  cfg.fmax = 4000;
  REQUIRE_THROWS_AS(mel_filterbank(cfg), ConfigError);
}

TEST_CASE("extract is deterministic and shape-correct over random lengths",
          "[features]") {
  FeatureConfig cfg;
  FeatureExtractor fe(cfg);
  Rng rng(71);
  for (int trial = 0; trial < 12; ++trial) {
    size_t n = 400 + static_cast<size_t>(rng.uniform_int(0, 12000));
    Waveform w = noise(n, 100 + trial);
    MelSpectrogram a = fe.extract(w);
    MelSpectrogram b = fe.extract(w);
    REQUIRE(a.values.rows() == 80);
    REQUIRE(a.values.cols() == 1 + static_cast<int>((n - 400) / 160));
    REQUIRE((a.values - b.values).norm() == 0.0);
    REQUIRE(all_finite(a.values));
    REQUIRE((a.values.array() >= std::log(cfg.log_floor) - 1e-12).all());
  }
}

TEST_CASE("extract rejects short inputs and rate mismatches", "[features]") {
  FeatureConfig cfg;
  FeatureExtractor fe(cfg);
  REQUIRE_THROWS_AS(fe.extract(noise(399, 1)), ValueError);
  Waveform wrong_rate = noise(1000, 1);
  wrong_rate.sample_rate = 8000;
  REQUIRE_THROWS_AS(fe.extract(wrong_rate), ConfigError);
}

TEST_CASE("extraction gradient matches central finite differences",
          "[features][grad]") {
  FeatureConfig cfg;
  FeatureExtractor fe(cfg);
  Waveform w = noise(960, 7);  // 4 frames, all energies well above the floor

  ExtractCache cache;
  MelSpectrogram mel = fe.extract_with_cache(w, cache);
  Mat dmel = Mat::Ones(mel.values.rows(), mel.values.cols());
  Vec g = fe.grad_wrt_waveform(cache, dmel);
  REQUIRE(g.size() == static_cast<Eigen::Index>(w.samples.size()));

  auto scalar = [&](const Waveform& x) { return fe.extract(x).values.sum(); };
  Rng rng(8);
  const double h = 1e-6;
  for (int k = 0; k < 10; ++k) {
    size_t i = static_cast<size_t>(
        rng.uniform_int(0, static_cast<int64_t>(w.samples.size()) - 1));
    Waveform plus = w, minus = w;
    plus.samples[i] += h;
    minus.samples[i] -= h;
    double fd = (scalar(plus) - scalar(minus)) / (2 * h);
    REQUIRE(rel_err(g[i], fd) < 1e-3);
  }
}

TEST_CASE("inverting silence produces a near-silent waveform", "[features]") {
  FeatureConfig cfg;
  MelSpectrogram sil;
  sil.config = cfg;
  sil.values = Mat::Constant(80, 60, std::log(cfg.log_floor));
  Waveform w = invert(sil, 8);
  REQUIRE(w.rms() < 1e-3);
  REQUIRE(w.sample_rate == cfg.sample_rate);
}

TEST_CASE("sinusoid round trip meets the frozen tolerances",
          "[features][slow]") {
  FeatureConfig cfg;
  FeatureExtractor fe(cfg);
  MelSpectrogram mel = fe.extract(sinusoid(1000.0, 16000));

  auto roundtrip_errors = [&](int iterations) {
    Waveform r = invert(mel, iterations);
    MelSpectrogram m2 = fe.extract(r);
    int F = std::min(m2.values.cols(), mel.values.cols());
    Mat a = mel.values.leftCols(F), b = m2.values.leftCols(F);
    double log_rel = (b - a).norm() / a.norm();
    Mat ea = a.array().exp().matrix(), eb = b.array().exp().matrix();
    return std::pair<double, double>{log_rel, (eb - ea).norm() / ea.norm()};
  };

  // frozen from the oracle run: log 0.266/0.268, energy 0.886/0.112
  auto [log1, energy1] = roundtrip_errors(1);
  auto [log64, energy64] = roundtrip_errors(64);
  REQUIRE(log64 < 0.35);
  REQUIRE(energy64 < 0.15);
  REQUIRE(energy64 <= energy1);  // more iterations cannot hurt
}

TEST_CASE("invert validates its inputs", "[features]") {
  FeatureConfig cfg;
  MelSpectrogram mel;
  mel.config = cfg;
  mel.values = Mat::Constant(80, 10, -1.0);
  REQUIRE_THROWS_AS(invert(mel, 0), RangeError);
  mel.values(3, 3) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(invert(mel, 4), ValueError);
}

TEST_CASE("invert is deterministic under the phase seed", "[features]") {
  FeatureConfig cfg;
  FeatureExtractor fe(cfg);
  MelSpectrogram mel = fe.extract(noise(3200, 9));
  Waveform a = invert(mel, 4, 5);
  Waveform b = invert(mel, 4, 5);
  REQUIRE(a.samples == b.samples);
  Waveform c = invert(mel, 4, 6);
  REQUIRE(a.samples != c.samples);
}

TEST_CASE("normalizer maps the corpus range onto [-1, 1] and back",
          "[features]") {
  std::vector<Mat> feats;
  Rng rng(10);
  feats.push_back(rng.normal_matrix(4, 6));
  feats.push_back(rng.normal_matrix(4, 9));
  FeatureNormStats stats = compute_norm_stats(feats);
  Normalizer n(stats);
  for (const auto& f : feats) {
    Mat u = n.to_unit(f);
    REQUIRE(u.maxCoeff() <= 1.0 + 1e-12);
    REQUIRE(u.minCoeff() >= -1.0 - 1e-12);
    REQUIRE(rel_err(n.from_unit(u), f) < 1e-12);
  }
  REQUIRE_THROWS_AS(Normalizer(2.0, 2.0), ConfigError);
  REQUIRE_THROWS_AS(compute_norm_stats({}), ValueError);
}
