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

#include <chrono>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdd/common.hpp"
#include "mdd/conditioning.hpp"
#include "mdd/features.hpp"
#include "mdd/masking.hpp"
#include "mdd/nn.hpp"

namespace mdd {

// ---------------------------------------------------------------------------
// Noise schedule

struct NoiseSchedule {
  int T = 0;
  double beta_start = 0.0, beta_end = 0.0;
  Vec beta;       // beta_1..beta_T
  Vec alpha;      // 1 - beta_t
  Vec alpha_bar;  // cumulative product of alpha

  double beta_at(int t) const { return beta[check(t) - 1]; }
  double alpha_at(int t) const { return alpha[t - 1]; }
  double alpha_bar_at(int t) const { return alpha_bar[check(t) - 1]; }

  int check(int t) const {
    if (t < 1 || t > T)
      throw RangeError("timestep " + std::to_string(t) + " outside [1, " +
                       std::to_string(T) + "]");
    return t;
  }
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double cum = 1.0;
  for (int t = 0; t < T; ++t) {
    s.beta[t] = T == 1 ? beta_start
                       : beta_start + (beta_end - beta_start) * t / (T - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    cum *= s.alpha[t];
    s.alpha_bar[t] = cum;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Composite noise target and the modified forward process

struct CompositeNoiseTarget {
  Mat values;  // x_m + sigma * eps
  double sigma = 0.0;
  uint64_t epsilon_seed = 0;
};

inline CompositeNoiseTarget composite_target(const Mat& x0,
                                             const MaskPattern& mask,
                                             double sigma, uint64_t seed,
                                             double fill = 0.0) {
  if (sigma < 0) throw RangeError("sigma must be >= 0");
  if (x0.rows() != mask.mask.rows() || x0.cols() != mask.mask.cols())
    throw ShapeError("composite_target: mask shape does not match input");
  CompositeNoiseTarget n;
  n.sigma = sigma;
  n.epsilon_seed = seed;
  n.values = apply_mask(x0, mask, fill);
  if (sigma > 0) {
    Rng rng(mix64(seed, 0x65707331ull));
    n.values += sigma * rng.normal_matrix(x0.rows(), x0.cols());
  }
  return n;
}

// x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) N_target
inline Mat forward_sample(const Mat& x0, const CompositeNoiseTarget& n_target,
                          int t, const NoiseSchedule& schedule) {
  if (x0.rows() != n_target.values.rows() ||
      x0.cols() != n_target.values.cols())
    throw ShapeError("forward_sample: shape mismatch");
  double abar = schedule.alpha_bar_at(t);
  return std::sqrt(abar) * x0 + std::sqrt(1.0 - abar) * n_target.values;
}

// Algebraic inversion of the forward relation.
inline Mat recover_x0(const Mat& x_t, const Mat& n_hat, int t,
                      const NoiseSchedule& schedule) {
  if (x_t.rows() != n_hat.rows() || x_t.cols() != n_hat.cols())
    throw ShapeError("recover_x0: shape mismatch");
  double abar = schedule.alpha_bar_at(t);
  if (abar < 1e-6)
    throw IllConditionedError("recover_x0: alpha_bar(" + std::to_string(t) +
                              ") = " + std::to_string(abar) + " below 1e-6");
  return (x_t - std::sqrt(1.0 - abar) * n_hat) / std::sqrt(abar);
}

// ---------------------------------------------------------------------------
// Conditional U-shaped denoiser

struct DenoiserConfig {
  int n_mels = 80;
  int base_channels = 16;
  int time_dim = 64;
  int cond_hidden = 64;
  int cond_dim = kConditionDim;
  int frames = 256;  // training crop width, multiple of 16

  bool operator==(const DenoiserConfig&) const = default;
};

namespace detail {

// conv -> +time bias -> FiLM(condition) -> conv, with residual skip
struct ResBlock {
  nn::Conv2d conv1, conv2;
  nn::Dense time_proj, film;
  int ch = 0;

  // caches
  Mat x_pre_, h_pre_film_, h_post_film_;
  Vec gamma_, beta_;
  Vec dtemb_, dcemb_;

  ResBlock() = default;
  ResBlock(int ch_, int time_dim, int cond_hidden)
      : conv1(ch_, ch_, 3, 3),
        conv2(ch_, ch_, 3, 3),
        time_proj(time_dim, ch_),
        film(cond_hidden, 2 * ch_),
        ch(ch_) {}

  void init(Rng& rng) {
    conv1.init(rng);
    conv2.init(rng, /*zero=*/true);
    time_proj.init(rng);
    film.init(rng, /*zero=*/true);
  }

  nn::FeatureMap forward(const nn::FeatureMap& x, const Vec& temb,
                         const Vec& cemb) {
    x_pre_ = x.data;
    nn::FeatureMap s1 = x;
    s1.data = nn::silu(x.data);
    nn::FeatureMap h = conv1.forward(s1);
    Vec tb = time_proj.forward(temb);
    h.data.colwise() += tb;
    Vec gb = film.forward(cemb);
    gamma_ = gb.head(ch);
    beta_ = gb.tail(ch);
    h_pre_film_ = h.data;
    for (int c = 0; c < ch; ++c)
      h.data.row(c) = h.data.row(c) * (1.0 + gamma_[c]) +
                      Eigen::RowVectorXd::Constant(h.data.cols(), beta_[c]);
    h_post_film_ = h.data;
    nn::FeatureMap s2 = h;
    s2.data = nn::silu(h.data);
    nn::FeatureMap out = conv2.forward(s2);
    out.data += x.data;
    return out;
  }

  nn::FeatureMap backward(const nn::FeatureMap& dout) {
    nn::FeatureMap ds2 = conv2.backward(dout);
    Mat dh = nn::silu_grad(h_post_film_, ds2.data);
    Vec dgb(2 * ch);
    for (int c = 0; c < ch; ++c) {
      dgb[c] = dh.row(c).dot(h_pre_film_.row(c));        // d gamma
      dgb[ch + c] = dh.row(c).sum();                     // d beta
      dh.row(c) *= (1.0 + gamma_[c]);
    }
    dcemb_ = film.backward(dgb);
    Vec dtb = dh.rowwise().sum();
    dtemb_ = time_proj.backward(dtb);
    nn::FeatureMap dhfm = dout;  // reuse shape
    dhfm.data = dh;
    nn::FeatureMap ds1 = conv1.backward(dhfm);
    nn::FeatureMap din = dout;
    din.data = dout.data + nn::silu_grad(x_pre_, ds1.data);
    return din;
  }

  void collect_params(std::vector<nn::ParamRef>& out) {
    conv1.collect_params(out);
    conv2.collect_params(out);
    time_proj.collect_params(out);
    film.collect_params(out);
  }
  void zero_grad() {
    conv1.zero_grad();
    conv2.zero_grad();
    time_proj.zero_grad();
    film.zero_grad();
  }
};

}  // namespace detail

class UNetDenoiser {
 public:
  UNetDenoiser() = default;
  explicit UNetDenoiser(const DenoiserConfig& cfg)
      : cfg_(cfg),
        t_mlp1_(cfg.time_dim, cfg.time_dim),
        t_mlp2_(cfg.time_dim, cfg.time_dim),
        c_mlp_(cfg.cond_dim, cfg.cond_hidden),
        conv_in_(1, cfg.base_channels, 3, 3),
        enc_(cfg.base_channels, cfg.time_dim, cfg.cond_hidden),
        down_(cfg.base_channels, 2 * cfg.base_channels, 3, 3, /*stride=*/2),
        mid_(2 * cfg.base_channels, cfg.time_dim, cfg.cond_hidden),
        up_conv_(2 * cfg.base_channels, cfg.base_channels, 3, 3),
        fuse_(2 * cfg.base_channels, cfg.base_channels, 3, 3),
        dec_(cfg.base_channels, cfg.time_dim, cfg.cond_hidden),
        conv_out_(cfg.base_channels, 1, 3, 3) {}

  const DenoiserConfig& config() const { return cfg_; }

  void init(uint64_t seed) {
    Rng rng(mix64(seed, 0x756e6574ull));
    t_mlp1_.init(rng);
    t_mlp2_.init(rng);
    c_mlp_.init(rng);
    conv_in_.init(rng);
    enc_.init(rng);
    down_.init(rng);
    mid_.init(rng);
    up_conv_.init(rng);
    fuse_.init(rng);
    dec_.init(rng);
    conv_out_.init(rng, /*zero=*/true);
  }

  // x: n_mels x frames (frames even), returns a matrix of the same shape
  Mat forward(const Mat& x, int t, const Vec& cond) {
    if (x.rows() != cfg_.n_mels)
      throw ShapeError("denoiser expects " + std::to_string(cfg_.n_mels) +
                       " mel rows, got " + std::to_string(x.rows()));
    if (x.cols() % 2 != 0)
      throw ShapeError("denoiser needs an even frame count, got " +
                       std::to_string(x.cols()));
    if (cond.size() != cfg_.cond_dim)
      throw ShapeError("condition dimension mismatch");

    // time + condition pathways
    temb_in_ = nn::sinusoidal_embedding(static_cast<double>(t), cfg_.time_dim);
    t1_pre_ = t_mlp1_.forward(temb_in_);
    Vec t1 = nn::silu(t1_pre_);
    temb_ = t_mlp2_.forward(t1);
    c_pre_ = c_mlp_.forward(cond);
    cemb_ = nn::silu(c_pre_);

    // Eigen is column-major; flatten explicitly into the row-major map layout
    int rows = cfg_.n_mels, cols = static_cast<int>(x.cols());
    nn::FeatureMap in(1, rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) in.data(0, r * cols + c) = x(r, c);

    h0_ = conv_in_.forward(in);
    h1_ = enc_.forward(h0_, temb_, cemb_);
    h1s_ = h1_;
    h1s_.data = nn::silu(h1_.data);
    h2_ = down_.forward(h1s_);
    h3_ = mid_.forward(h2_, temb_, cemb_);
    h4_ = nn::upsample2x(h3_);
    h4s_ = h4_;
    h4s_.data = nn::silu(h4_.data);
    h5_ = up_conv_.forward(h4s_);
    // concat skip connection
    cat_ = nn::FeatureMap(2 * cfg_.base_channels, rows, cols);
    cat_.data.topRows(cfg_.base_channels) = h5_.data;
    cat_.data.bottomRows(cfg_.base_channels) = h1_.data;
    cats_ = cat_;
    cats_.data = nn::silu(cat_.data);
    h6_ = fuse_.forward(cats_);
    h7_ = dec_.forward(h6_, temb_, cemb_);
    h7s_ = h7_;
    h7s_.data = nn::silu(h7_.data);
    nn::FeatureMap out = conv_out_.forward(h7s_);

    Mat y(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) y(r, c) = out.data(0, r * cols + c);
    if (!all_finite(y))
      throw TrainingError("denoiser produced non-finite output at t=" +
                          std::to_string(t));
    return y;
  }

  // Accumulates parameter gradients; returns nothing (input gradient unused).
  void backward(const Mat& dy) {
    int rows = cfg_.n_mels, cols = static_cast<int>(dy.cols());
    nn::FeatureMap dout(1, rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) dout.data(0, r * cols + c) = dy(r, c);

    Vec dtemb = Vec::Zero(cfg_.time_dim);
    Vec dcemb = Vec::Zero(cfg_.cond_hidden);

    nn::FeatureMap dh7s = conv_out_.backward(dout);
    nn::FeatureMap dh7 = dh7s;
    dh7.data = nn::silu_grad(h7_.data, dh7s.data);
    nn::FeatureMap dh6 = dec_.backward(dh7);
    dtemb += dec_.dtemb_;
    dcemb += dec_.dcemb_;
    nn::FeatureMap dcats = fuse_.backward(dh6);
    nn::FeatureMap dcat = dcats;
    dcat.data = nn::silu_grad(cat_.data, dcats.data);
    nn::FeatureMap dh5(cfg_.base_channels, dcat.rows, dcat.cols);
    dh5.data = dcat.data.topRows(cfg_.base_channels);
    nn::FeatureMap dh1_skip(cfg_.base_channels, dcat.rows, dcat.cols);
    dh1_skip.data = dcat.data.bottomRows(cfg_.base_channels);

    nn::FeatureMap dh4s = up_conv_.backward(dh5);
    nn::FeatureMap dh4 = dh4s;
    dh4.data = nn::silu_grad(h4_.data, dh4s.data);
    nn::FeatureMap dh3 = nn::upsample2x_backward(dh4, h3_.rows, h3_.cols);
    nn::FeatureMap dh2 = mid_.backward(dh3);
    dtemb += mid_.dtemb_;
    dcemb += mid_.dcemb_;
    nn::FeatureMap dh1s = down_.backward(dh2);
    nn::FeatureMap dh1 = dh1s;
    dh1.data = nn::silu_grad(h1_.data, dh1s.data) + dh1_skip.data;
    nn::FeatureMap dh0 = enc_.backward(dh1);
    dtemb += enc_.dtemb_;
    dcemb += enc_.dcemb_;
    conv_in_.backward(dh0);

    Vec dt1 = t_mlp2_.backward(dtemb);
    t_mlp1_.backward(nn::silu_grad(t1_pre_, dt1));
    c_mlp_.backward(nn::silu_grad(c_pre_, dcemb));
  }

  void collect_params(std::vector<nn::ParamRef>& out) {
    t_mlp1_.collect_params(out);
    t_mlp2_.collect_params(out);
    c_mlp_.collect_params(out);
    conv_in_.collect_params(out);
    enc_.collect_params(out);
    down_.collect_params(out);
    mid_.collect_params(out);
    up_conv_.collect_params(out);
    fuse_.collect_params(out);
    dec_.collect_params(out);
    conv_out_.collect_params(out);
  }

  void zero_grad() {
    t_mlp1_.zero_grad();
    t_mlp2_.zero_grad();
    c_mlp_.zero_grad();
    conv_in_.zero_grad();
    enc_.zero_grad();
    down_.zero_grad();
    mid_.zero_grad();
    up_conv_.zero_grad();
    fuse_.zero_grad();
    dec_.zero_grad();
    conv_out_.zero_grad();
  }

 private:
  DenoiserConfig cfg_;
  nn::Dense t_mlp1_, t_mlp2_, c_mlp_;
  nn::Conv2d conv_in_;
  detail::ResBlock enc_;
  nn::Conv2d down_;
  detail::ResBlock mid_;
  nn::Conv2d up_conv_, fuse_;
  detail::ResBlock dec_;
  nn::Conv2d conv_out_;

  // forward caches
  Vec temb_in_, t1_pre_, temb_, c_pre_, cemb_;
  nn::FeatureMap h0_, h1_, h1s_, h2_, h3_, h4_, h4s_, h5_, cat_, cats_, h6_,
      h7_, h7s_;
};

// ---------------------------------------------------------------------------
// Model wrapper: network + schedule + feature normalization + training state

struct DiffusionTrainConfig {
  double mask_ratio = 0.1;
  double sigma = 0.1;
  int iterations = 10000;
  int batch_size = 4;
  double learning_rate = 1e-4;
  uint64_t seed = 1;
  int num_threads = 1;
};

class DenoiserModel {
 public:
  DenoiserModel() = default;
  DenoiserModel(const DenoiserConfig& cfg, const NoiseSchedule& schedule,
                const Normalizer& norm, uint64_t init_seed)
      : cfg_(cfg), schedule_(schedule), norm_(norm), net_(cfg) {
    net_.init(init_seed);
  }

  const DenoiserConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const Normalizer& normalizer() const { return norm_; }
  UNetDenoiser& net() { return net_; }
  const UNetDenoiser& net() const { return net_; }
  int64_t steps_done() const { return steps_done_; }
  bool trained() const { return trained_; }
  double train_mask_ratio() const { return train_cfg_.mask_ratio; }
  double train_sigma() const { return train_cfg_.sigma; }
  const DiffusionTrainConfig& train_config() const { return train_cfg_; }

  // unit-space prediction of the composite noise target
  Mat predict(const Mat& x_t, int t, const ConditionEmbedding& c) {
    schedule_.check(t);
    return net_.forward(x_t, t, c.vector);
  }

  void mark_trained(const DiffusionTrainConfig& tc, int64_t steps) {
    train_cfg_ = tc;
    steps_done_ = steps;
    trained_ = steps > 0;
  }

  std::vector<nn::ParamRef> params() {
    std::vector<nn::ParamRef> p;
    net_.collect_params(p);
    return p;
  }

 private:
  DenoiserConfig cfg_;
  NoiseSchedule schedule_;
  Normalizer norm_;
  UNetDenoiser net_;
  DiffusionTrainConfig train_cfg_;
  int64_t steps_done_ = 0;
  bool trained_ = false;
};

// ---------------------------------------------------------------------------
// Training objective

// Mean squared error between the model prediction at x_t and N_target.
// x0 is expected in unit (normalized) space.
template <class ModelT>
double training_loss(ModelT& model, const Mat& x0,
                     const ConditionEmbedding& c, int t, double mask_ratio,
                     double sigma, uint64_t seed, Mat* n_target_out = nullptr,
                     Mat* pred_out = nullptr) {
  MaskPattern mask = sample_mask(static_cast<int>(x0.rows()),
                                 static_cast<int>(x0.cols()), mask_ratio,
                                 mix64(seed, 0x6d6bull));
  CompositeNoiseTarget n =
      composite_target(x0, mask, sigma, mix64(seed, 0x6570ull));
  Mat x_t = forward_sample(x0, n, t, model.schedule());
  Mat pred = model.predict(x_t, t, c);
  if (!all_finite(pred))
    throw TrainingError("non-finite model output at t=" + std::to_string(t));
  double loss = (pred - n.values).squaredNorm() / pred.size();
  if (n_target_out) *n_target_out = n.values;
  if (pred_out) *pred_out = std::move(pred);
  return loss;
}

struct TrainRecord {
  int64_t step;
  double loss;
  double wall_time_s;
};

// Trains in place; every random decision is drawn on the coordinating thread
// so the loss trace is identical for any worker count.
inline std::vector<TrainRecord> train(
    DenoiserModel& model, const std::vector<Mat>& features_unit,
    const std::vector<ConditionEmbedding>& conditions,
    const DiffusionTrainConfig& tc) {
  if (features_unit.empty())
    throw ValueError("diffusion training needs a nonempty feature set");
  if (conditions.size() != features_unit.size())
    throw ShapeError("conditions and features must align");
  if (tc.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (tc.iterations < 0) throw ConfigError("iterations must be >= 0");

  std::vector<TrainRecord> log;
  if (tc.iterations == 0) {
    model.mark_trained(tc, 0);
    return log;
  }

  const int frames = model.config().frames;
  const int T = model.schedule().T;
  Rng rng(mix64(tc.seed, 0x74726e64ull));
  nn::Adam adam(tc.learning_rate);
  auto master_params = model.params();

  // one net clone per batch slot: gradients are summed in slot order, so the
  // result is bit-identical for any worker count
  int workers = std::max(1, std::min(tc.num_threads, tc.batch_size));
  std::vector<UNetDenoiser> slot_nets(tc.batch_size, model.net());
  std::vector<std::vector<nn::ParamRef>> slot_params(tc.batch_size);
  for (int b = 0; b < tc.batch_size; ++b)
    slot_nets[b].collect_params(slot_params[b]);

  auto t_begin = std::chrono::steady_clock::now();
  struct Draw {
    int example;
    int t;
    int crop;
    uint64_t seed;
  };
  std::vector<Draw> draws(tc.batch_size);
  std::vector<double> losses(tc.batch_size);

  for (int64_t step = 0; step < tc.iterations; ++step) {
    for (int b = 0; b < tc.batch_size; ++b) {
      Draw& d = draws[b];
      d.example = static_cast<int>(
          rng.uniform_int(0, static_cast<int64_t>(features_unit.size()) - 1));
      d.t = static_cast<int>(rng.uniform_int(1, T));
      int avail = static_cast<int>(features_unit[d.example].cols()) - frames;
      d.crop = avail > 0 ? static_cast<int>(rng.uniform_int(0, avail)) : 0;
      d.seed = mix64(tc.seed, 0x647261ull + static_cast<uint64_t>(step) *
                                      tc.batch_size + b);
    }

    for (int b = 0; b < tc.batch_size; ++b) {
      slot_nets[b] = model.net();  // sync weights
      nn::zero_params_grad(slot_params[b]);
    }

    parallel_for_workers(tc.batch_size, workers, [&](size_t b, int) {
      const Draw& d = draws[b];
      const Mat& full = features_unit[d.example];
      Mat x0;
      if (full.cols() >= frames) {
        x0 = full.middleCols(d.crop, frames);
      } else {  // tile short features up to the crop width
        x0.resize(full.rows(), frames);
        for (int c = 0; c < frames; ++c)
          x0.col(c) = full.col(c % full.cols());
      }
      MaskPattern mask =
          sample_mask(static_cast<int>(x0.rows()),
                      static_cast<int>(x0.cols()), tc.mask_ratio,
                      mix64(d.seed, 0x6d6bull));
      CompositeNoiseTarget n =
          composite_target(x0, mask, tc.sigma, mix64(d.seed, 0x6570ull));
      Mat x_t = forward_sample(x0, n, d.t, model.schedule());
      Mat pred = slot_nets[b].forward(x_t, d.t, conditions[d.example].vector);
      losses[b] = (pred - n.values).squaredNorm() / pred.size();
      Mat dloss = 2.0 * (pred - n.values) / pred.size() / tc.batch_size;
      slot_nets[b].backward(dloss);
    });

    double mean_loss = 0.0;
    for (double l : losses) mean_loss += l;
    mean_loss /= tc.batch_size;
    if (!std::isfinite(mean_loss))
      throw TrainingError("training diverged (non-finite loss) at step " +
                          std::to_string(step));

    // deterministic reduction: sum slot grads into the master in slot order
    nn::zero_params_grad(master_params);
    for (int b = 0; b < tc.batch_size; ++b)
      for (size_t p = 0; p < master_params.size(); ++p)
        for (Eigen::Index i = 0; i < master_params[p].size; ++i)
          master_params[p].grad[i] += slot_params[b][p].grad[i];
    adam.step(master_params);

    double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                      t_begin)
            .count();
    log.push_back({step, mean_loss, wall});
  }
  model.mark_trained(tc, tc.iterations);
  return log;
}

// ---------------------------------------------------------------------------
// Reverse process

// Standard DDPM ancestral step with the composite-target prediction in place
// of the noise estimate. noise_scale scales the stochastic term (the purifier
// passes sigma so the reverse chain stays on the forward marginals).
inline Mat reverse_step_from_prediction(const Mat& x_t, const Mat& n_hat,
                                        int t, const NoiseSchedule& schedule,
                                        Rng& rng, double noise_scale = 1.0) {
  schedule.check(t);
  double beta = schedule.beta_at(t);
  double alpha = schedule.alpha_at(t);
  double abar = schedule.alpha_bar_at(t);
  Mat mean = (x_t - (beta / std::sqrt(1.0 - abar)) * n_hat) / std::sqrt(alpha);
  if (t > 1 && noise_scale != 0.0)
    mean += noise_scale * std::sqrt(beta) *
            rng.normal_matrix(x_t.rows(), x_t.cols());
  if (!all_finite(mean))
    throw SamplerError("non-finite reverse step at t=" + std::to_string(t));
  return mean;
}

template <class ModelT>
Mat reverse_step(ModelT& model, const Mat& x_t, int t,
                 const ConditionEmbedding& c, const NoiseSchedule& schedule,
                 uint64_t seed, double noise_scale = 1.0) {
  Mat n_hat = model.predict(x_t, t, c);
  Rng rng(mix64(seed, 0x7a6eull + static_cast<uint64_t>(t)));
  return reverse_step_from_prediction(x_t, n_hat, t, schedule, rng,
                                      noise_scale);
}

// ---------------------------------------------------------------------------
// Purification

struct PurifierConfig {
  int t_start = 0;  // 0 means "use the full schedule depth"
  double mask_ratio = 0.1;
  double sigma = 0.1;
  std::string sampler = "ancestral";
  uint64_t seed = 1;
};

namespace detail {

template <class ModelT>
Mat purify_window(ModelT& model, const Mat& xn_win, const Mat& n_win,
                  int t_start, const ConditionEmbedding& c, Rng& rng,
                  double noise_scale) {
  const NoiseSchedule& sched = model.schedule();
  CompositeNoiseTarget n;
  n.values = n_win;
  Mat x = forward_sample(xn_win, n, t_start, sched);
  for (int t = t_start; t >= 1; --t) {
    Mat n_hat = model.predict(x, t, c);
    x = reverse_step_from_prediction(x, n_hat, t, sched, rng, noise_scale);
  }
  return x;
}

}  // namespace detail

// Full ancestral reconstruction of x_in from its masked/noised state.
// Long inputs are processed in fixed windows of the trained width with
// overlap-discard stitching.
template <class ModelT>
MelSpectrogram purify(ModelT& model, const MelSpectrogram& x_in,
                      const ConditionEmbedding& c,
                      const PurifierConfig& config) {
  const NoiseSchedule& sched = model.schedule();
  int t_start = config.t_start == 0 ? sched.T : config.t_start;
  sched.check(t_start);
  if (!(config.mask_ratio >= 0 && config.mask_ratio <= 1))
    throw RangeError("mask_ratio must lie in [0, 1]");
  if (config.sampler != "ancestral")
    throw ConfigError("unknown sampler: " + config.sampler);
  if (!all_finite(x_in.values)) throw ValueError("purify: non-finite input");

  Mat xn = model.normalizer().to_unit(x_in.values);
  int rows = static_cast<int>(xn.rows());
  int total = static_cast<int>(xn.cols());

  MaskPattern mask =
      sample_mask(rows, total, config.mask_ratio, mix64(config.seed, 0x6d6bull));
  CompositeNoiseTarget n_full = composite_target(
      xn, mask, config.sigma, mix64(config.seed, 0x6570ull));

  const int W = model.config().frames;
  Mat out(rows, total);

  if (total <= W) {
    int padded = total % 2 == 0 ? total : total + 1;
    Mat xw(rows, padded), nw(rows, padded);
    xw.leftCols(total) = xn;
    nw.leftCols(total) = n_full.values;
    if (padded != total) {
      xw.col(total) = xn.col(total - 1);
      nw.col(total) = n_full.values.col(total - 1);
    }
    Rng rng(mix64(config.seed, 0x77696e00ull));
    Mat res = detail::purify_window(model, xw, nw, t_start, c, rng,
                                    config.sigma);
    out = res.leftCols(total);
  } else {
    int hop = W / 2, quarter = W / 4;
    std::vector<int> starts;
    for (int s = 0; s + W < total; s += hop) starts.push_back(s);
    starts.push_back(total - W);
    int covered = 0;
    for (size_t k = 0; k < starts.size(); ++k) {
      int s = starts[k];
      bool first = k == 0, last = k + 1 == starts.size();
      Rng rng(mix64(config.seed, 0x77696e00ull + k));
      Mat res = detail::purify_window(model, xn.middleCols(s, W),
                                      n_full.values.middleCols(s, W), t_start,
                                      c, rng, config.sigma);
      int lo = first ? 0 : std::max(covered, s + quarter);
      int hi = last ? total : s + W - quarter;
      out.middleCols(lo, hi - lo) = res.middleCols(lo - s, hi - lo);
      covered = hi;
    }
  }

  MelSpectrogram result = x_in;
  result.values = model.normalizer().from_unit(out);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic, JSON descriptor, raw parameter blob.

inline void save_denoiser_checkpoint(const std::string& path,
                                     DenoiserModel& model) {
  nlohmann::json h;
  h["kind"] = "denoiser";
  h["version"] = 1;
  const DenoiserConfig& c = model.config();
  h["arch"] = {{"n_mels", c.n_mels},
               {"base_channels", c.base_channels},
               {"time_dim", c.time_dim},
               {"cond_hidden", c.cond_hidden},
               {"cond_dim", c.cond_dim},
               {"frames", c.frames}};
  h["schedule"] = {{"T", model.schedule().T},
                   {"beta_start", model.schedule().beta_start},
                   {"beta_end", model.schedule().beta_end}};
  h["norm"] = {{"min", model.normalizer().lo}, {"max", model.normalizer().hi}};
  h["training"] = {{"steps_done", model.steps_done()},
                   {"trained", model.trained()},
                   {"mask_ratio", model.train_mask_ratio()},
                   {"sigma", model.train_sigma()},
                   {"learning_rate", model.train_config().learning_rate},
                   {"seed", model.train_config().seed}};
  std::string header = h.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint: " + path);
  f.write("MDDCKPT1", 8);
  uint64_t hlen = header.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(header.data(), header.size());
  std::vector<double> blob = nn::dump_params(model.params());
  uint64_t n = blob.size();
  f.write(reinterpret_cast<const char*>(&n), 8);
  f.write(reinterpret_cast<const char*>(blob.data()), n * sizeof(double));
  if (!f) throw IoError("short checkpoint write: " + path);
}

inline nlohmann::json read_checkpoint_header(std::ifstream& f,
                                             const std::string& path,
                                             std::vector<double>& blob) {
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "MDDCKPT1", 8) != 0)
    throw IoError("bad checkpoint magic: " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || hlen > (1ull << 24)) throw IoError("bad checkpoint header: " + path);
  std::string header(hlen, '\0');
  f.read(header.data(), hlen);
  uint64_t n = 0;
  f.read(reinterpret_cast<char*>(&n), 8);
  if (!f || n > (1ull << 32)) throw IoError("bad checkpoint blob: " + path);
  blob.resize(n);
  f.read(reinterpret_cast<char*>(blob.data()), n * sizeof(double));
  if (!f) throw IoError("truncated checkpoint: " + path);
  return nlohmann::json::parse(header);
}

inline DenoiserModel load_denoiser_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::vector<double> blob;
  nlohmann::json h = read_checkpoint_header(f, path, blob);
  if (h.value("kind", "") != "denoiser")
    throw ConfigError("checkpoint is not a denoiser: " + path);
  if (h.value("version", 0) != 1)
    throw ConfigError("unsupported checkpoint version in " + path);

  DenoiserConfig cfg;
  cfg.n_mels = h["arch"].at("n_mels").get<int>();
  cfg.base_channels = h["arch"].at("base_channels").get<int>();
  cfg.time_dim = h["arch"].at("time_dim").get<int>();
  cfg.cond_hidden = h["arch"].at("cond_hidden").get<int>();
  cfg.cond_dim = h["arch"].at("cond_dim").get<int>();
  cfg.frames = h["arch"].at("frames").get<int>();
  NoiseSchedule sched = make_schedule(h["schedule"].at("T").get<int>(),
                                      h["schedule"].at("beta_start").get<double>(),
                                      h["schedule"].at("beta_end").get<double>());
  Normalizer norm(h["norm"].at("min").get<double>(),
                  h["norm"].at("max").get<double>());

  DenoiserModel model(cfg, sched, norm, /*init_seed=*/0);
  nn::load_params(model.params(), blob);
  DiffusionTrainConfig tc;
  tc.mask_ratio = h["training"].value("mask_ratio", 0.0);
  tc.sigma = h["training"].value("sigma", 0.0);
  tc.learning_rate = h["training"].value("learning_rate", 1e-4);
  tc.seed = h["training"].value("seed", 0ull);
  model.mark_trained(tc, h["training"].value("steps_done", int64_t(0)));
  return model;
}

}  // namespace mdd
