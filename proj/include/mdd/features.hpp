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

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mdd/common.hpp"
#include "mdd/corpus.hpp"
#include "mdd/wave.hpp"

namespace mdd {

struct FeatureConfig {
  int sample_rate = 16000;
  double window_ms = 25.0;
  double hop_ms = 10.0;
  int fft_size = 1024;  // power of two >= window length
  int n_mels = 80;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-10;

  int win_length() const {
    return static_cast<int>(std::lround(sample_rate * window_ms / 1000.0));
  }
  int hop_length() const {
    return static_cast<int>(std::lround(sample_rate * hop_ms / 1000.0));
  }
  int n_bins() const { return fft_size / 2 + 1; }

  void validate() const {
    if (sample_rate <= 0) throw ConfigError("sample_rate must be > 0");
    if (n_mels < 1) throw ConfigError("n_mels must be >= 1");
    if (!(fmin >= 0 && fmin < fmax && fmax <= sample_rate / 2.0))
      throw ConfigError("need 0 <= fmin < fmax <= sample_rate/2");
    if (fft_size < win_length())
      throw ConfigError("fft_size must be >= window length (" +
                        std::to_string(win_length()) + " samples)");
    if ((fft_size & (fft_size - 1)) != 0)
      throw ConfigError("fft_size must be a power of two");
    if (log_floor <= 0) throw ConfigError("log_floor must be > 0");
    if (win_length() < 1 || hop_length() < 1)
      throw ConfigError("window/hop too short for sample rate");
  }

  bool operator==(const FeatureConfig&) const = default;
};

struct MelSpectrogram {
  Mat values;  // n_mels x n_frames, log energies >= log(log_floor)
  FeatureConfig config;
  std::string utterance_id;

  int n_mels() const { return static_cast<int>(values.rows()); }
  int n_frames() const { return static_cast<int>(values.cols()); }
};

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

inline std::vector<double> mel_center_frequencies(const FeatureConfig& cfg) {
  // n_mels + 2 mel-spaced edge points; centers are the interior ones
  std::vector<double> centers(cfg.n_mels + 2);
  double m_lo = hz_to_mel(cfg.fmin), m_hi = hz_to_mel(cfg.fmax);
  for (int i = 0; i < cfg.n_mels + 2; ++i)
    centers[i] = mel_to_hz(m_lo + (m_hi - m_lo) * i / (cfg.n_mels + 1));
  return centers;
}

// Triangular filters with Mel-spaced centers, peak weight 1.
inline Mat mel_filterbank(const FeatureConfig& cfg) {
  cfg.validate();
  auto pts = mel_center_frequencies(cfg);
  int bins = cfg.n_bins();
  Mat fb = Mat::Zero(cfg.n_mels, bins);
  double bin_hz = static_cast<double>(cfg.sample_rate) / cfg.fft_size;
  for (int i = 0; i < cfg.n_mels; ++i) {
    double left = pts[i], center = pts[i + 1], right = pts[i + 2];
    for (int k = 0; k < bins; ++k) {
      double f = k * bin_hz;
      double w = 0.0;
      if (f > left && f < right)
        w = f <= center ? (f - left) / (center - left)
                        : (right - f) / (right - center);
      fb(i, k) = std::max(0.0, w);
    }
    // Guard for very sharp filters: keep the bin nearest the center alive so
    // no row is identically zero.
    if (fb.row(i).maxCoeff() <= 0.0) {
      int k = static_cast<int>(std::lround(center / bin_hz));
      k = std::clamp(k, 0, bins - 1);
      fb(i, k) = 1.0;
    }
  }
  return fb;
}

struct ExtractCache {
  Mat frames;  // win x n_frames, windowed
  Mat re, im;  // n_bins x n_frames
  Mat power;   // n_bins x n_frames
  Mat energy;  // n_mels x n_frames
  size_t n_samples = 0;
};

// LogFBank frontend. The DFT is evaluated as two dense matrix products,
// which makes the exact gradient with respect to the input samples a pair of
// transposed products (needed by the attack module).
class FeatureExtractor {
 public:
  explicit FeatureExtractor(const FeatureConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    int win = cfg.win_length();
    int bins = cfg.n_bins();
    window_.resize(win);
    for (int n = 0; n < win; ++n)
      window_[n] = 0.54 - 0.46 * std::cos(2.0 * M_PI * n / (win - 1));
    dft_cos_.resize(bins, win);
    dft_sin_.resize(bins, win);
    for (int k = 0; k < bins; ++k)
      for (int n = 0; n < win; ++n) {
        double ang = 2.0 * M_PI * k * n / cfg.fft_size;
        dft_cos_(k, n) = std::cos(ang);
        dft_sin_(k, n) = -std::sin(ang);
      }
    melfb_ = mel_filterbank(cfg);
  }

  const FeatureConfig& config() const { return cfg_; }
  const Mat& filterbank() const { return melfb_; }
  const Vec& window() const { return window_; }
  const Mat& dft_cos() const { return dft_cos_; }
  const Mat& dft_sin() const { return dft_sin_; }

  int num_frames(size_t n_samples) const {
    int win = cfg_.win_length(), hop = cfg_.hop_length();
    if (n_samples < static_cast<size_t>(win)) return 0;
    return 1 + static_cast<int>((n_samples - win) / hop);
  }

  MelSpectrogram extract(const Waveform& w,
                         const std::string& utterance_id = "") const {
    ExtractCache cache;
    return extract_with_cache(w, cache, utterance_id);
  }

  MelSpectrogram extract_with_cache(const Waveform& w, ExtractCache& cache,
                                    const std::string& utterance_id = "") const {
    if (w.sample_rate != cfg_.sample_rate)
      throw ConfigError("waveform rate " + std::to_string(w.sample_rate) +
                        " does not match feature config rate " +
                        std::to_string(cfg_.sample_rate));
    int win = cfg_.win_length(), hop = cfg_.hop_length();
    int n_frames = num_frames(w.samples.size());
    if (n_frames < 1)
      throw ValueError("waveform shorter than one window (" +
                       std::to_string(w.samples.size()) + " < " +
                       std::to_string(win) + " samples)");
    cache.n_samples = w.samples.size();
    cache.frames.resize(win, n_frames);
    for (int f = 0; f < n_frames; ++f)
      for (int n = 0; n < win; ++n)
        cache.frames(n, f) = window_[n] * w.samples[f * hop + n];
    cache.re.noalias() = dft_cos_ * cache.frames;
    cache.im.noalias() = dft_sin_ * cache.frames;
    cache.power = cache.re.array().square() + cache.im.array().square();
    cache.energy.noalias() = melfb_ * cache.power;

    MelSpectrogram mel;
    mel.config = cfg_;
    mel.utterance_id = utterance_id;
    mel.values = cache.energy.array().max(cfg_.log_floor).log().matrix();
    return mel;
  }

  // Vector-Jacobian product: dL/dwaveform given dL/dlogmel.
  Vec grad_wrt_waveform(const ExtractCache& cache, const Mat& dmel) const {
    if (dmel.rows() != melfb_.rows() || dmel.cols() != cache.energy.cols())
      throw ShapeError("gradient shape does not match extraction cache");
    Mat denergy =
        (cache.energy.array() > cfg_.log_floor)
            .select(dmel.array() / cache.energy.array(), Mat::Zero(
                        dmel.rows(), dmel.cols()).array());
    Mat dpower = melfb_.transpose() * denergy;
    Mat dre = 2.0 * cache.re.cwiseProduct(dpower);
    Mat dim = 2.0 * cache.im.cwiseProduct(dpower);
    Mat dframes = dft_cos_.transpose() * dre + dft_sin_.transpose() * dim;
    int win = cfg_.win_length(), hop = cfg_.hop_length();
    Vec dw = Vec::Zero(cache.n_samples);
    for (int f = 0; f < dframes.cols(); ++f)
      for (int n = 0; n < win; ++n)
        dw[f * hop + n] += window_[n] * dframes(n, f);
    return dw;
  }

 private:
  FeatureConfig cfg_;
  Vec window_;
  Mat dft_cos_, dft_sin_;  // n_bins x win
  Mat melfb_;
};

// ---------------------------------------------------------------------------
// Iterative phase-reconstruction vocoder stand-in (Griffin-Lim on a
// nonnegative least-squares inversion of the Mel filterbank).

namespace detail {

struct InverseDft {
  Mat icos, isin;  // fft x n_bins
  explicit InverseDft(const FeatureConfig& cfg) {
    int bins = cfg.n_bins(), fft = cfg.fft_size;
    icos.resize(fft, bins);
    isin.resize(fft, bins);
    for (int n = 0; n < fft; ++n)
      for (int k = 0; k < bins; ++k) {
        double c = (k == 0 || k == fft / 2) ? 1.0 : 2.0;
        double ang = 2.0 * M_PI * k * n / fft;
        icos(n, k) = c * std::cos(ang) / fft;
        isin(n, k) = -c * std::sin(ang) / fft;
      }
  }
};

// Weighted overlap-add of spectral frames (real part of the inverse DFT),
// normalized by the accumulated squared window.
inline Waveform overlap_add(const Mat& re, const Mat& im,
                            const FeatureConfig& cfg, const Vec& window,
                            const InverseDft& idft) {
  int win = cfg.win_length(), hop = cfg.hop_length();
  int n_frames = static_cast<int>(re.cols());
  size_t n_samples = static_cast<size_t>(n_frames - 1) * hop + win;
  Vec acc = Vec::Zero(n_samples), norm = Vec::Zero(n_samples);
  Mat frames = idft.icos * re + idft.isin * im;  // fft x n_frames
  for (int f = 0; f < n_frames; ++f)
    for (int n = 0; n < win; ++n) {
      acc[f * hop + n] += window[n] * frames(n, f);
      norm[f * hop + n] += window[n] * window[n];
    }
  Waveform w;
  w.sample_rate = cfg.sample_rate;
  w.samples.resize(n_samples);
  for (size_t i = 0; i < n_samples; ++i)
    w.samples[i] = norm[i] > 1e-12 ? acc[i] / norm[i] : 0.0;
  return w;
}

}  // namespace detail

// Mel energies -> linear power spectrum via multiplicative nonnegative
// least-squares updates.
inline Mat mel_to_linear_power(const Mat& energy, const Mat& fb,
                               int nnls_iters = 200) {
  Mat mtm = fb.transpose() * fb;           // bins x bins
  Mat mte = fb.transpose() * energy;       // bins x n_frames
  Mat p = mte.cwiseMax(0.0);
  for (int it = 0; it < nnls_iters; ++it) {
    Mat denom = mtm * p;
    p = p.array() * (mte.array() / (denom.array() + 1e-30));
  }
  return p;
}

inline Waveform invert(const MelSpectrogram& mel, int iterations,
                       uint64_t phase_seed = 0) {
  if (iterations < 1) throw RangeError("invert: iterations must be >= 1");
  if (!all_finite(mel.values))
    throw ValueError("invert: non-finite mel input");
  const FeatureConfig& cfg = mel.config;
  cfg.validate();

  FeatureExtractor fe(cfg);
  Mat energy = mel.values.array().exp().matrix();
  Mat power = mel_to_linear_power(energy, fe.filterbank());
  Mat mag = power.cwiseMax(0.0).cwiseSqrt();

  detail::InverseDft idft(cfg);
  int bins = cfg.n_bins();
  int n_frames = static_cast<int>(mag.cols());

  Rng rng(mix64(phase_seed, 0x70686173ull));
  Mat re(bins, n_frames), im(bins, n_frames);
  for (int k = 0; k < bins; ++k)
    for (int f = 0; f < n_frames; ++f) {
      double phi = 2.0 * M_PI * rng.uniform();
      re(k, f) = mag(k, f) * std::cos(phi);
      im(k, f) = mag(k, f) * std::sin(phi);
    }

  Waveform w;
  for (int it = 0; it < iterations; ++it) {
    w = detail::overlap_add(re, im, cfg, fe.window(), idft);
    if (it + 1 == iterations) break;
    ExtractCache cache;
    // re-analyze, keep the phase, restore the target magnitude
    int win = cfg.win_length(), hop = cfg.hop_length();
    cache.frames.resize(win, n_frames);
    for (int f = 0; f < n_frames; ++f)
      for (int n = 0; n < win; ++n) {
        size_t idx = static_cast<size_t>(f) * hop + n;
        cache.frames(n, f) =
            fe.window()[n] * (idx < w.samples.size() ? w.samples[idx] : 0.0);
      }
    Mat re2 = fe.dft_cos() * cache.frames;
    Mat im2 = fe.dft_sin() * cache.frames;
    Mat norm = (re2.array().square() + im2.array().square()).sqrt() + 1e-30;
    re = mag.array() * re2.array() / norm.array();
    im = mag.array() * im2.array() / norm.array();
  }
  for (double& s : w.samples) s = std::clamp(s, -1.0, 1.0);
  return w;
}

// Affine map between log-energy features and the [-1, 1] range the diffusion
// model trains on.
struct Normalizer {
  double lo = 0.0, hi = 1.0;

  Normalizer() = default;
  Normalizer(double lo_, double hi_) : lo(lo_), hi(hi_) {
    if (!(hi > lo)) throw ConfigError("normalizer needs hi > lo");
  }
  explicit Normalizer(const FeatureNormStats& s) : Normalizer(s.min, s.max) {}

  Mat to_unit(const Mat& x) const {
    return (2.0 * (x.array() - lo) / (hi - lo) - 1.0).matrix();
  }
  Mat from_unit(const Mat& u) const {
    return ((u.array() + 1.0) * 0.5 * (hi - lo) + lo).matrix();
  }
  FeatureNormStats stats() const { return {lo, hi}; }
};

inline FeatureNormStats compute_norm_stats(const std::vector<Mat>& features) {
  if (features.empty())
    throw ValueError("cannot compute normalization stats on empty set");
  double lo = features[0].minCoeff(), hi = features[0].maxCoeff();
  for (const auto& f : features) {
    lo = std::min(lo, f.minCoeff());
    hi = std::max(hi, f.maxCoeff());
  }
  if (!(hi > lo)) hi = lo + 1.0;  // constant corpus; degenerate but usable
  return {lo, hi};
}

}  // namespace mdd
