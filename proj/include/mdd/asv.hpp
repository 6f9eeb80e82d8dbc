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

#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdd/common.hpp"
#include "mdd/corpus.hpp"
#include "mdd/diffusion.hpp"
#include "mdd/features.hpp"
#include "mdd/nn.hpp"

namespace mdd {

constexpr int kSpeakerEmbeddingDim = 128;

struct SpeakerEmbedding {
  Vec vector;  // dimension kSpeakerEmbeddingDim
  std::string utterance_id;
};

// cosine similarity of unit-normalized embeddings
inline double score(const SpeakerEmbedding& e1, const SpeakerEmbedding& e2) {
  double n1 = e1.vector.norm(), n2 = e2.vector.norm();
  if (n1 == 0.0 || n2 == 0.0)
    throw ValueError("cannot score a zero speaker embedding");
  return e1.vector.dot(e2.vector) / (n1 * n2);
}

struct AsvConfig {
  int n_mels = 80;
  int channels = 64;
  int embedding_dim = kSpeakerEmbeddingDim;
  int kernel = 5;
  int frames = 128;  // training crop width
  int epochs = 20;
  int batch_size = 16;
  double learning_rate = 1e-3;
  uint64_t seed = 1;
  int num_threads = 1;

  bool operator==(const AsvConfig&) const = default;
};

// Temporal convolution stack -> mean pooling -> affine projection, with a
// softmax head over training speakers.
class AsvModel {
 public:
  AsvModel() = default;
  AsvModel(const AsvConfig& cfg, const std::vector<std::string>& speakers,
           const Normalizer& input_norm, uint64_t init_seed)
      : cfg_(cfg),
        speakers_(speakers),
        norm_(input_norm),
        conv1_(cfg.n_mels, cfg.channels, 1, cfg.kernel),
        conv2_(cfg.channels, cfg.channels, 1, cfg.kernel),
        conv3_(cfg.channels, cfg.channels, 1, cfg.kernel),
        proj_(cfg.channels, cfg.embedding_dim),
        head_(cfg.embedding_dim, static_cast<int>(speakers.size())) {
    Rng rng(mix64(init_seed, 0x617376ull));
    conv1_.init(rng);
    conv2_.init(rng);
    conv3_.init(rng);
    proj_.init(rng);
    head_.init(rng);
  }

  const AsvConfig& config() const { return cfg_; }
  const std::vector<std::string>& speakers() const { return speakers_; }
  const Normalizer& input_norm() const { return norm_; }
  bool trained() const { return trained_; }
  void mark_trained(bool t) { trained_ = t; }

  int speaker_index(const std::string& id) const {
    for (size_t i = 0; i < speakers_.size(); ++i)
      if (speakers_[i] == id) return static_cast<int>(i);
    throw ResolutionError("speaker not in model label table: " + id);
  }

  // forward to the embedding; caches stay inside the layers for backward
  Vec embed_values(const Mat& mel_values) {
    if (mel_values.cols() < 1)
      throw ValueError("cannot embed a zero-frame spectrogram");
    if (!all_finite(mel_values))
      throw ValueError("cannot embed non-finite features");
    int rows = static_cast<int>(mel_values.rows());
    if (rows != cfg_.n_mels)
      throw ShapeError("expected " + std::to_string(cfg_.n_mels) +
                       " mel rows, got " + std::to_string(rows));
    int T = static_cast<int>(mel_values.cols());
    nn::FeatureMap x(cfg_.n_mels, 1, T);
    Mat unit = norm_.to_unit(mel_values);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < T; ++c) x.data(r, c) = unit(r, c);

    a1_ = conv1_.forward(x);
    s1_ = a1_;
    s1_.data = nn::silu(a1_.data);
    a2_ = conv2_.forward(s1_);
    s2_ = a2_;
    s2_.data = nn::silu(a2_.data);
    a3_ = conv3_.forward(s2_);
    s3_ = a3_;
    s3_.data = nn::silu(a3_.data);
    pooled_ = s3_.data.rowwise().mean();
    frames_seen_ = T;
    return proj_.forward(pooled_);
  }

  // backward from d(embedding) to d(mel values); parameter grads accumulate
  Mat embed_backward(const Vec& demb) {
    Vec dpool = proj_.backward(demb);
    nn::FeatureMap ds3 = s3_;
    ds3.data = (dpool / frames_seen_).replicate(1, frames_seen_);
    nn::FeatureMap da3 = ds3;
    da3.data = nn::silu_grad(a3_.data, ds3.data);
    nn::FeatureMap ds2 = conv3_.backward(da3);
    nn::FeatureMap da2 = ds2;
    da2.data = nn::silu_grad(a2_.data, ds2.data);
    nn::FeatureMap ds1 = conv2_.backward(da2);
    nn::FeatureMap da1 = ds1;
    da1.data = nn::silu_grad(a1_.data, ds1.data);
    nn::FeatureMap dx = conv1_.backward(da1);
    // undo the input normalization affine
    Mat dmel(cfg_.n_mels, frames_seen_);
    double scale = 2.0 / (norm_.hi - norm_.lo);
    for (int r = 0; r < cfg_.n_mels; ++r)
      for (int c = 0; c < frames_seen_; ++c)
        dmel(r, c) = scale * dx.data(r, c);
    return dmel;
  }

  Vec head_logits(const Vec& emb) { return head_.forward(emb); }
  Vec head_backward(const Vec& dlogits) { return head_.backward(dlogits); }

  std::vector<nn::ParamRef> params() {
    std::vector<nn::ParamRef> p;
    conv1_.collect_params(p);
    conv2_.collect_params(p);
    conv3_.collect_params(p);
    proj_.collect_params(p);
    head_.collect_params(p);
    return p;
  }
  void zero_grad() {
    conv1_.zero_grad();
    conv2_.zero_grad();
    conv3_.zero_grad();
    proj_.zero_grad();
    head_.zero_grad();
  }

 private:
  AsvConfig cfg_;
  std::vector<std::string> speakers_;
  Normalizer norm_;
  nn::Conv2d conv1_, conv2_, conv3_;
  nn::Dense proj_, head_;
  bool trained_ = false;

  nn::FeatureMap a1_, s1_, a2_, s2_, a3_, s3_;
  Vec pooled_;
  int frames_seen_ = 0;
};

inline SpeakerEmbedding embed(AsvModel& model, const MelSpectrogram& mel) {
  SpeakerEmbedding e;
  e.utterance_id = mel.utterance_id;
  e.vector = model.embed_values(mel.values);
  return e;
}

inline uint64_t param_checksum(AsvModel& model) {
  std::vector<double> blob = nn::dump_params(model.params());
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(blob.data()),
                                  blob.size() * sizeof(double)));
}

// ---------------------------------------------------------------------------
// Training

struct AsvTrainRecord {
  int epoch;
  double mean_loss;
  double accuracy;
};

struct AsvTrainResult {
  double final_accuracy = 0.0;
  std::vector<AsvTrainRecord> log;
};

inline Mat crop_or_tile(const Mat& full, int frames, int crop_start) {
  if (full.cols() >= frames) return full.middleCols(crop_start, frames);
  Mat x(full.rows(), frames);
  for (int c = 0; c < frames; ++c) x.col(c) = full.col(c % full.cols());
  return x;
}

// Softmax cross-entropy over speaker labels. Deterministic under seed for
// any worker count (all draws happen on the coordinating thread).
inline AsvTrainResult train_asv(AsvModel& model, const Manifest& manifest,
                                const std::vector<Mat>& features,
                                int epochs, uint64_t seed) {
  const AsvConfig& cfg = model.config();
  if (manifest.utterances.size() != features.size())
    throw ShapeError("features must align with manifest utterances");
  std::map<std::string, int> per_speaker;
  for (const auto& u : manifest.utterances) per_speaker[u.speaker_id]++;
  if (per_speaker.size() < 2)
    throw CapacityError("ASV training needs at least 2 speakers, got " +
                        std::to_string(per_speaker.size()));
  for (const auto& [sid, n] : per_speaker)
    if (n < 2)
      throw CapacityError("speaker " + sid + " has " + std::to_string(n) +
                          " utterance(s); need at least 2");

  AsvTrainResult result;
  if (epochs <= 0) {
    model.mark_trained(false);
    return result;
  }

  std::vector<int> labels(manifest.utterances.size());
  for (size_t i = 0; i < manifest.utterances.size(); ++i)
    labels[i] = model.speaker_index(manifest.utterances[i].speaker_id);

  Rng rng(mix64(seed, 0x617376747200ull));
  nn::Adam adam(cfg.learning_rate);
  auto master_params = model.params();

  // one model clone per batch slot so gradient reduction order (and thus the
  // result) is independent of the worker count
  int workers = std::max(1, std::min(cfg.num_threads, cfg.batch_size));
  std::vector<AsvModel> slot_models(cfg.batch_size, model);
  std::vector<std::vector<nn::ParamRef>> slot_params(cfg.batch_size);
  for (int b = 0; b < cfg.batch_size; ++b)
    slot_params[b] = slot_models[b].params();

  size_t n = features.size();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (size_t i = 0; i + 1 < n; ++i) {
      int64_t j = rng.uniform_int(static_cast<int64_t>(i),
                                  static_cast<int64_t>(n) - 1);
      std::swap(order[i], order[j]);
    }
    double epoch_loss = 0.0;
    int correct = 0;
    for (size_t start = 0; start < n; start += cfg.batch_size) {
      size_t bsz = std::min<size_t>(cfg.batch_size, n - start);
      struct Draw {
        int example;
        int crop;
      };
      std::vector<Draw> draws(bsz);
      for (size_t b = 0; b < bsz; ++b) {
        int ex = order[start + b];
        int avail = static_cast<int>(features[ex].cols()) - cfg.frames;
        draws[b] = {ex, avail > 0 ? static_cast<int>(rng.uniform_int(0, avail))
                                  : 0};
      }
      for (size_t b = 0; b < bsz; ++b) {
        slot_models[b] = model;
        nn::zero_params_grad(slot_params[b]);
      }
      std::vector<double> losses(bsz);
      std::vector<int> hits(bsz);
      parallel_for_workers(bsz, workers, [&](size_t b, int) {
        const Draw& d = draws[b];
        Mat x = crop_or_tile(features[d.example], cfg.frames, d.crop);
        Vec emb = slot_models[b].embed_values(x);
        Vec logits = slot_models[b].head_logits(emb);
        Vec dlogits;
        losses[b] = nn::softmax_cross_entropy(logits, labels[d.example],
                                              dlogits) / bsz;
        Eigen::Index argmax;
        logits.maxCoeff(&argmax);
        hits[b] = argmax == labels[d.example] ? 1 : 0;
        Vec demb = slot_models[b].head_backward(dlogits / bsz);
        slot_models[b].embed_backward(demb);
      });
      double batch_loss = 0.0;
      for (size_t b = 0; b < bsz; ++b) {
        batch_loss += losses[b];
        correct += hits[b];
      }
      if (!std::isfinite(batch_loss))
        throw TrainingError("ASV training diverged at epoch " +
                            std::to_string(epoch));
      nn::zero_params_grad(master_params);
      for (size_t b = 0; b < bsz; ++b)
        for (size_t p = 0; p < master_params.size(); ++p)
          for (Eigen::Index k = 0; k < master_params[p].size; ++k)
            master_params[p].grad[k] += slot_params[b][p].grad[k];
      adam.step(master_params);
      epoch_loss += batch_loss;
    }
    double acc = static_cast<double>(correct) / n;
    result.log.push_back(
        {epoch, epoch_loss / std::max<size_t>(1, (n + cfg.batch_size - 1) /
                                                     cfg.batch_size),
         acc});
  }

  // final training accuracy with frozen weights, deterministic center crops
  int correct = 0;
  for (size_t i = 0; i < n; ++i) {
    int avail = static_cast<int>(features[i].cols()) - cfg.frames;
    Mat x = crop_or_tile(features[i], cfg.frames, std::max(0, avail / 2));
    Vec logits = model.head_logits(model.embed_values(x));
    Eigen::Index argmax;
    logits.maxCoeff(&argmax);
    if (argmax == labels[i]) ++correct;
  }
  result.final_accuracy = static_cast<double>(correct) / n;
  model.mark_trained(true);
  return result;
}

// ---------------------------------------------------------------------------
// Differentiable scoring interface (consumed by the attack module)

class DifferentiableScorer {
 public:
  virtual ~DifferentiableScorer() = default;
  virtual double score_waveform(const Waveform& x) = 0;
  // returns the score and its exact gradient w.r.t. every input sample
  virtual std::pair<double, Vec> score_with_gradient(const Waveform& x) = 0;
};

// score(enroll, embed(extract(x))) with the full backward chain.
class AsvScorer : public DifferentiableScorer {
 public:
  AsvScorer(const AsvModel& model, const Vec& enroll_embedding,
            const FeatureConfig& feat_cfg)
      : model_(model), fe_(feat_cfg), enroll_(enroll_embedding) {
    double n = enroll_.norm();
    if (n == 0.0) throw ValueError("zero enrollment embedding");
    enroll_ /= n;
  }

  double score_waveform(const Waveform& x) override {
    ExtractCache cache;
    MelSpectrogram mel = fe_.extract_with_cache(x, cache);
    Vec emb = model_.embed_values(mel.values);
    double n = emb.norm();
    if (n == 0.0) throw ValueError("zero test embedding");
    return enroll_.dot(emb) / n;
  }

  std::pair<double, Vec> score_with_gradient(const Waveform& x) override {
    ExtractCache cache;
    MelSpectrogram mel = fe_.extract_with_cache(x, cache);
    Vec emb = model_.embed_values(mel.values);
    double n = emb.norm();
    if (n == 0.0) throw ValueError("zero test embedding");
    Vec v = emb / n;
    double s = enroll_.dot(v);
    // d s / d emb for s = u . (emb/|emb|)
    Vec demb = (enroll_ - s * v) / n;
    model_.zero_grad();
    Mat dmel = model_.embed_backward(demb);
    Vec dx = fe_.grad_wrt_waveform(cache, dmel);
    return {s, std::move(dx)};
  }

 private:
  AsvModel model_;  // private copy; forward caches are instance state
  FeatureExtractor fe_;
  Vec enroll_;
};

// ---------------------------------------------------------------------------
// Trial scoring

struct ScoreRecord {
  Trial trial;
  double s = 0.0;        // raw input
  double s_prime = 0.0;  // purified input
  double d = 0.0;        // |s - s'|
};

using MelSource = std::function<MelSpectrogram(const Utterance&)>;
using Purifier =
    std::function<MelSpectrogram(const MelSpectrogram&, const Utterance&)>;

// One record per trial; s comes from the raw test features, s' from the
// purified ones (s' = s when no purifier is supplied). Embeddings are cached
// per utterance; workers use private model clones.
inline std::vector<ScoreRecord> score_trials(
    const AsvModel& model, const Manifest& manifest,
    const std::vector<Trial>& trials, const MelSource& mels,
    const Purifier& purifier = nullptr, int num_threads = 1) {
  std::vector<std::string> enroll_ids, test_ids;
  for (const auto& t : trials) {
    enroll_ids.push_back(t.enroll_id);
    test_ids.push_back(t.test_id);
  }
  auto uniq = [](std::vector<std::string>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  };
  uniq(enroll_ids);
  uniq(test_ids);

  std::map<std::string, Vec> enroll_emb, test_emb, test_emb_purified;
  auto embed_all = [&](const std::vector<std::string>& ids, bool purify_them,
                       std::map<std::string, Vec>& out) {
    std::vector<Vec> results(ids.size());
    int workers = std::max(1, num_threads);
    std::vector<AsvModel> clones(workers, model);
    parallel_for_workers(ids.size(), workers, [&](size_t i, int w) {
      AsvModel& m = clones[w];
      const Utterance& u = manifest.find(ids[i]);
      MelSpectrogram mel = mels(u);
      if (purify_them) mel = purifier(mel, u);
      results[i] = m.embed_values(mel.values);
    });
    for (size_t i = 0; i < ids.size(); ++i) out[ids[i]] = results[i];
  };
  embed_all(enroll_ids, false, enroll_emb);
  embed_all(test_ids, false, test_emb);
  if (purifier) embed_all(test_ids, true, test_emb_purified);

  auto cosine = [](const Vec& a, const Vec& b) {
    double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0)
      throw ValueError("zero embedding in trial scoring");
    return a.dot(b) / (na * nb);
  };

  std::vector<ScoreRecord> records;
  records.reserve(trials.size());
  for (const auto& t : trials) {
    ScoreRecord r;
    r.trial = t;
    const Vec& e = enroll_emb.at(t.enroll_id);
    r.s = cosine(e, test_emb.at(t.test_id));
    r.s_prime = purifier ? cosine(e, test_emb_purified.at(t.test_id)) : r.s;
    r.d = std::abs(r.s - r.s_prime);
    records.push_back(r);
  }
  return records;
}

// ---------------------------------------------------------------------------
// Checkpointing

inline void save_asv_checkpoint(const std::string& path, AsvModel& model) {
  nlohmann::json h;
  h["kind"] = "asv";
  h["version"] = 1;
  const AsvConfig& c = model.config();
  h["arch"] = {{"n_mels", c.n_mels},
               {"channels", c.channels},
               {"embedding_dim", c.embedding_dim},
               {"kernel", c.kernel},
               {"frames", c.frames}};
  h["norm"] = {{"min", model.input_norm().lo}, {"max", model.input_norm().hi}};
  h["speakers"] = model.speakers();
  h["trained"] = model.trained();
  std::string header = h.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint: " + path);
  f.write("MDDCKPT1", 8);
  uint64_t hlen = header.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(header.data(), header.size());
  std::vector<double> blob = nn::dump_params(model.params());
  uint64_t nblob = blob.size();
  f.write(reinterpret_cast<const char*>(&nblob), 8);
  f.write(reinterpret_cast<const char*>(blob.data()),
          nblob * sizeof(double));
  if (!f) throw IoError("short checkpoint write: " + path);
}

inline AsvModel load_asv_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::vector<double> blob;
  nlohmann::json h = read_checkpoint_header(f, path, blob);
  if (h.value("kind", "") != "asv")
    throw ConfigError("checkpoint is not an ASV model: " + path);
  if (h.value("version", 0) != 1)
    throw ConfigError("unsupported checkpoint version in " + path);
  AsvConfig cfg;
  cfg.n_mels = h["arch"].at("n_mels").get<int>();
  cfg.channels = h["arch"].at("channels").get<int>();
  cfg.embedding_dim = h["arch"].at("embedding_dim").get<int>();
  cfg.kernel = h["arch"].at("kernel").get<int>();
  cfg.frames = h["arch"].at("frames").get<int>();
  Normalizer norm(h["norm"].at("min").get<double>(),
                  h["norm"].at("max").get<double>());
  std::vector<std::string> speakers =
      h.at("speakers").get<std::vector<std::string>>();
  AsvModel model(cfg, speakers, norm, /*init_seed=*/0);
  nn::load_params(model.params(), blob);
  model.mark_trained(h.value("trained", false));
  return model;
}

}  // namespace mdd
