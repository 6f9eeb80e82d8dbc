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
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdd/asv.hpp"
#include "mdd/attacks.hpp"
#include "mdd/conditioning.hpp"
#include "mdd/corpus.hpp"
#include "mdd/detector.hpp"
#include "mdd/diffusion.hpp"
#include "mdd/features.hpp"
#include "mdd/io.hpp"
#include "mdd/svg.hpp"
#include "mdd/wave.hpp"

namespace mdd {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Experiment configuration (single JSON file, versioned schema; the work dir
// may be overridden through MDD_WORK_DIR, nothing else).

struct SyntheticConfig {
  bool enabled = false;
  int n_speakers = 12;
  int n_utterances = 12;
  double duration_s = 1.295;
  double noise_level = 5e-3;
};

struct TrialsConfig {
  int n_calibration_target = 30;
  int n_calibration_nontarget = 30;
  int n_eval_target = 30;
  int n_eval_nontarget = 30;
};

struct DiffusionStageConfig {
  int timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double sigma = 0.1;
  std::vector<double> mask_ratios = {0.1};
  int iterations = 10000;
  int batch_size = 4;
  double learning_rate = 1e-4;
  int frames = 256;
  int base_channels = 16;
  int t_start = 0;  // 0 = full schedule depth
};

struct AttackStageConfig {
  std::string method = "pgd";
  std::string norm = "l2";
  double epsilon_rel = 0.02;
  int iterations = 50;
  double step_factor = 2.5;
  bool random_start = false;
};

struct DetectorStageConfig {
  std::vector<double> fpr_targets = {0.1, 0.05};
  int histogram_bins = 24;
};

struct ExperimentConfig {
  static constexpr int kSchemaVersion = 1;
  std::string corpus_dir;
  std::string work_dir;
  SyntheticConfig synthetic;
  FeatureConfig features;
  DiffusionStageConfig diffusion;
  AsvConfig asv;
  AttackStageConfig attack;
  DetectorStageConfig detector;
  TrialsConfig trials;
  uint64_t master_seed = 1;
  std::string scoring_path = "feature";  // or "waveform"
  int gl_iterations = 32;
  int num_threads = 2;
  uint64_t config_hash = 0;

  void validate() const {
    if (corpus_dir.empty() || work_dir.empty())
      throw ConfigError("config needs paths.corpus and paths.work_dir");
    if (!synthetic.enabled && !fs::is_directory(corpus_dir))
      throw ConfigError("corpus directory does not exist: " + corpus_dir);
    features.validate();
    for (double r : diffusion.mask_ratios)
      if (!(r >= 0 && r <= 1))
        throw ConfigError("mask ratios must lie in [0, 1]");
    if (diffusion.mask_ratios.empty())
      throw ConfigError("need at least one mask ratio");
    if (diffusion.t_start < 0 || diffusion.t_start > diffusion.timesteps)
      throw ConfigError("t_start must lie in [0, timesteps]");
    for (double f : detector.fpr_targets)
      if (!(f > 0 && f < 1))
        throw ConfigError("fpr targets must lie in (0, 1)");
    if (scoring_path != "feature" && scoring_path != "waveform")
      throw ConfigError("scoring_path must be 'feature' or 'waveform'");
    attack_method_from_string(attack.method);
    attack_norm_from_string(attack.norm);
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["schema_version"] = ExperimentConfig::kSchemaVersion;
  j["paths"] = {{"corpus", c.corpus_dir}, {"work_dir", c.work_dir}};
  j["synthetic"] = {{"enabled", c.synthetic.enabled},
                    {"n_speakers", c.synthetic.n_speakers},
                    {"n_utterances", c.synthetic.n_utterances},
                    {"duration_s", c.synthetic.duration_s},
                    {"noise_level", c.synthetic.noise_level}};
  j["features"] = {{"sample_rate", c.features.sample_rate},
                   {"window_ms", c.features.window_ms},
                   {"hop_ms", c.features.hop_ms},
                   {"fft_size", c.features.fft_size},
                   {"n_mels", c.features.n_mels},
                   {"fmin", c.features.fmin},
                   {"fmax", c.features.fmax},
                   {"log_floor", c.features.log_floor}};
  j["diffusion"] = {{"timesteps", c.diffusion.timesteps},
                    {"beta_start", c.diffusion.beta_start},
                    {"beta_end", c.diffusion.beta_end},
                    {"sigma", c.diffusion.sigma},
                    {"mask_ratios", c.diffusion.mask_ratios},
                    {"iterations", c.diffusion.iterations},
                    {"batch_size", c.diffusion.batch_size},
                    {"learning_rate", c.diffusion.learning_rate},
                    {"frames", c.diffusion.frames},
                    {"base_channels", c.diffusion.base_channels},
                    {"t_start", c.diffusion.t_start}};
  j["asv"] = {{"epochs", c.asv.epochs},
              {"channels", c.asv.channels},
              {"embedding_dim", c.asv.embedding_dim},
              {"kernel", c.asv.kernel},
              {"frames", c.asv.frames},
              {"batch_size", c.asv.batch_size},
              {"learning_rate", c.asv.learning_rate}};
  j["attack"] = {{"method", c.attack.method},
                 {"norm", c.attack.norm},
                 {"epsilon_rel", c.attack.epsilon_rel},
                 {"iterations", c.attack.iterations},
                 {"step_factor", c.attack.step_factor},
                 {"random_start", c.attack.random_start}};
  j["detector"] = {{"fpr_targets", c.detector.fpr_targets},
                   {"histogram_bins", c.detector.histogram_bins}};
  j["trials"] = {{"n_calibration_target", c.trials.n_calibration_target},
                 {"n_calibration_nontarget", c.trials.n_calibration_nontarget},
                 {"n_eval_target", c.trials.n_eval_target},
                 {"n_eval_nontarget", c.trials.n_eval_nontarget}};
  j["seeds"] = {{"master", c.master_seed}};
  j["scoring_path"] = c.scoring_path;
  j["gl_iterations"] = c.gl_iterations;
  j["num_threads"] = c.num_threads;
  return j;
}

inline ExperimentConfig experiment_config_from_json(nlohmann::json j) {
  if (j.value("schema_version", -1) != ExperimentConfig::kSchemaVersion)
    throw ConfigError("config schema_version must be " +
                      std::to_string(ExperimentConfig::kSchemaVersion));
  ExperimentConfig c;
  c.corpus_dir = j.at("paths").at("corpus").get<std::string>();
  c.work_dir = j.at("paths").at("work_dir").get<std::string>();
  if (j.contains("synthetic")) {
    auto& s = j["synthetic"];
    c.synthetic.enabled = s.value("enabled", false);
    c.synthetic.n_speakers = s.value("n_speakers", 12);
    c.synthetic.n_utterances = s.value("n_utterances", 12);
    c.synthetic.duration_s = s.value("duration_s", 1.295);
    c.synthetic.noise_level = s.value("noise_level", 5e-3);
  }
  if (j.contains("features")) {
    auto& f = j["features"];
    c.features.sample_rate = f.value("sample_rate", 16000);
    c.features.window_ms = f.value("window_ms", 25.0);
    c.features.hop_ms = f.value("hop_ms", 10.0);
    c.features.fft_size = f.value("fft_size", 1024);
    c.features.n_mels = f.value("n_mels", 80);
    c.features.fmin = f.value("fmin", 0.0);
    c.features.fmax = f.value("fmax", 8000.0);
    c.features.log_floor = f.value("log_floor", 1e-10);
  }
  if (j.contains("diffusion")) {
    auto& d = j["diffusion"];
    c.diffusion.timesteps = d.value("timesteps", 1000);
    c.diffusion.beta_start = d.value("beta_start", 1e-4);
    c.diffusion.beta_end = d.value("beta_end", 0.02);
    c.diffusion.sigma = d.value("sigma", 0.1);
    if (d.contains("mask_ratios"))
      c.diffusion.mask_ratios = d["mask_ratios"].get<std::vector<double>>();
    c.diffusion.iterations = d.value("iterations", 10000);
    c.diffusion.batch_size = d.value("batch_size", 4);
    c.diffusion.learning_rate = d.value("learning_rate", 1e-4);
    c.diffusion.frames = d.value("frames", 256);
    c.diffusion.base_channels = d.value("base_channels", 16);
    c.diffusion.t_start = d.value("t_start", 0);
  }
  if (j.contains("asv")) {
    auto& a = j["asv"];
    c.asv.epochs = a.value("epochs", 20);
    c.asv.channels = a.value("channels", 64);
    c.asv.embedding_dim = a.value("embedding_dim", 128);
    c.asv.kernel = a.value("kernel", 5);
    c.asv.frames = a.value("frames", 128);
    c.asv.batch_size = a.value("batch_size", 16);
    c.asv.learning_rate = a.value("learning_rate", 1e-3);
  }
  if (j.contains("attack")) {
    auto& a = j["attack"];
    c.attack.method = a.value("method", "pgd");
    c.attack.norm = a.value("norm", "l2");
    c.attack.epsilon_rel = a.value("epsilon_rel", 0.02);
    c.attack.iterations = a.value("iterations", 50);
    c.attack.step_factor = a.value("step_factor", 2.5);
    c.attack.random_start = a.value("random_start", false);
  }
  if (j.contains("detector")) {
    auto& d = j["detector"];
    if (d.contains("fpr_targets"))
      c.detector.fpr_targets = d["fpr_targets"].get<std::vector<double>>();
    c.detector.histogram_bins = d.value("histogram_bins", 24);
  }
  if (j.contains("trials")) {
    auto& t = j["trials"];
    c.trials.n_calibration_target = t.value("n_calibration_target", 30);
    c.trials.n_calibration_nontarget = t.value("n_calibration_nontarget", 30);
    c.trials.n_eval_target = t.value("n_eval_target", 30);
    c.trials.n_eval_nontarget = t.value("n_eval_nontarget", 30);
  }
  if (j.contains("seeds")) c.master_seed = j["seeds"].value("master", 1ull);
  c.scoring_path = j.value("scoring_path", "feature");
  c.gl_iterations = j.value("gl_iterations", 32);
  c.num_threads = j.value("num_threads", 2);

  const char* env = std::getenv("MDD_WORK_DIR");
  if (env && *env) c.work_dir = env;

  // hash the canonical dump (work dir excluded so an env override does not
  // change the experiment identity)
  nlohmann::json canon = to_json(c);
  canon["paths"].erase("work_dir");
  c.config_hash = fnv1a64(canon.dump());
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  return experiment_config_from_json(
      nlohmann::json::parse(read_text_file(path)));
}

// ---------------------------------------------------------------------------

struct SplitInfo {
  std::vector<std::string> calibration_test_ids;
  std::vector<std::string> eval_test_ids;
};

inline std::string mask_tag(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "mask_%g", ratio * 100.0);
  return buf;
}

class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
  }

  const ExperimentConfig& config() const { return cfg_; }

  // --- path layout -----------------------------------------------------
  fs::path work() const { return cfg_.work_dir; }
  fs::path manifest_path() const { return work() / "manifest.json"; }
  fs::path splits_path() const { return work() / "splits.json"; }
  fs::path features_dir() const { return work() / "features"; }
  fs::path asv_dir() const { return work() / "asv"; }
  fs::path asv_ckpt() const { return asv_dir() / "model.ckpt"; }
  fs::path diffusion_dir(double ratio) const {
    return work() / "diffusion" / mask_tag(ratio);
  }
  fs::path diffusion_ckpt(double ratio) const {
    return diffusion_dir(ratio) / "model.ckpt";
  }
  fs::path attacks_dir() const { return work() / "attacks"; }
  fs::path calibration_dir(double ratio) const {
    return work() / "calibration" / mask_tag(ratio);
  }
  fs::path eval_dir(double ratio) const {
    return work() / "eval" / mask_tag(ratio);
  }

  // --- prepare ----------------------------------------------------------
  Manifest prepare() {
    fs::create_directories(work());
    if (cfg_.synthetic.enabled && !fs::exists(fs::path(cfg_.corpus_dir) /
                                              "transcripts.tsv")) {
      SyntheticCorpusOptions opt;
      opt.n_speakers = cfg_.synthetic.n_speakers;
      opt.n_utterances = cfg_.synthetic.n_utterances;
      opt.duration_s = cfg_.synthetic.duration_s;
      opt.sample_rate = cfg_.features.sample_rate;
      opt.noise_level = cfg_.synthetic.noise_level;
      opt.seed = mix64(cfg_.master_seed, 0x73796eull);
      generate_synthetic_corpus(cfg_.corpus_dir, opt);
    }

    if (fs::exists(manifest_path()) && fs::exists(splits_path())) {
      Manifest m = load_manifest(manifest_path().string());
      if (features_complete(m)) return m;  // reuse the cache
    }

    std::string tsv = (fs::path(cfg_.corpus_dir) / "transcripts.tsv").string();
    if (!fs::exists(tsv)) tsv = "";
    std::string spk = (fs::path(cfg_.corpus_dir) / "speakers.tsv").string();
    if (!fs::exists(spk)) spk = "";
    Manifest m = load_corpus(cfg_.corpus_dir, tsv, spk,
                             cfg_.features.sample_rate, cfg_.num_threads);
    m.seed = static_cast<int64_t>(cfg_.master_seed);
    m.created_at = timestamp();

    SplitInfo split = make_splits(m);
    Manifest calib_m = submanifest(m, split.calibration_test_ids);
    Manifest eval_m = submanifest(m, split.eval_test_ids);
    auto calib_trials =
        build_trials(calib_m, cfg_.trials.n_calibration_target,
                     cfg_.trials.n_calibration_nontarget,
                     mix64(cfg_.master_seed, 0x63616cull));
    auto eval_trials =
        build_trials(eval_m, cfg_.trials.n_eval_target,
                     cfg_.trials.n_eval_nontarget,
                     mix64(cfg_.master_seed, 0x65766cull));
    m.trials = calib_trials;
    m.trials.insert(m.trials.end(), eval_trials.begin(), eval_trials.end());
    m.validate();

    // feature cache + corpus-level normalization stats
    fs::create_directories(features_dir());
    FeatureExtractor fe(cfg_.features);
    std::vector<Mat> mels(m.utterances.size());
    parallel_for(m.utterances.size(), cfg_.num_threads, [&](size_t i) {
      const Utterance& u = m.utterances[i];
      Waveform w = read_wav(u.path, cfg_.features.sample_rate);
      mels[i] = fe.extract(w, u.id).values;
      save_matrix(feature_path(u.id).string(), mels[i]);
    });
    m.feature_norm = compute_norm_stats(mels);

    save_manifest(manifest_path().string(), m);
    nlohmann::json js;
    js["calibration_test_ids"] = split.calibration_test_ids;
    js["eval_test_ids"] = split.eval_test_ids;
    write_text_file(splits_path().string(), js.dump(2) + "\n");
    return m;
  }

  Manifest require_manifest() const {
    if (!fs::exists(manifest_path()))
      throw DependencyError("manifest missing; run the prepare stage first");
    return load_manifest(manifest_path().string());
  }

  SplitInfo require_splits() const {
    if (!fs::exists(splits_path()))
      throw DependencyError("splits missing; run the prepare stage first");
    nlohmann::json j = nlohmann::json::parse(
        read_text_file(splits_path().string()));
    SplitInfo s;
    s.calibration_test_ids =
        j.at("calibration_test_ids").get<std::vector<std::string>>();
    s.eval_test_ids = j.at("eval_test_ids").get<std::vector<std::string>>();
    return s;
  }

  fs::path feature_path(const std::string& id) const {
    return features_dir() / (id + ".fbin");
  }

  MelSpectrogram load_features(const std::string& id) const {
    MelSpectrogram mel;
    mel.values = load_matrix(feature_path(id).string());
    mel.config = cfg_.features;
    mel.utterance_id = id;
    return mel;
  }

  // --- train-asv ---------------------------------------------------------
  std::string train_asv_stage() {
    Manifest m = require_manifest();
    fs::create_directories(asv_dir());
    std::vector<Mat> features(m.utterances.size());
    for (size_t i = 0; i < m.utterances.size(); ++i)
      features[i] = load_matrix(feature_path(m.utterances[i].id).string());

    AsvConfig ac = cfg_.asv;
    ac.n_mels = cfg_.features.n_mels;
    ac.num_threads = cfg_.num_threads;
    ac.seed = mix64(cfg_.master_seed, 0x617376ull);
    AsvModel model(ac, m.speaker_ids(), Normalizer(*m.feature_norm), ac.seed);
    AsvTrainResult r = train_asv(model, m, features, ac.epochs, ac.seed);

    CsvWriter log((asv_dir() / "training_log.csv").string());
    log.row({"epoch", "mean_loss", "train_accuracy"});
    for (const auto& rec : r.log)
      log.row({std::to_string(rec.epoch), format_double(rec.mean_loss),
               format_double(rec.accuracy)});
    log.close();
    nlohmann::json js;
    js["final_train_accuracy"] = r.final_accuracy;
    js["epochs"] = ac.epochs;
    write_text_file((asv_dir() / "train_result.json").string(),
                    js.dump(2) + "\n");
    save_asv_checkpoint(asv_ckpt().string(), model);
    return asv_ckpt().string();
  }

  // --- train-diffusion ----------------------------------------------------
  std::string train_diffusion_stage(double mask_ratio) {
    Manifest m = require_manifest();
    fs::create_directories(diffusion_dir(mask_ratio));
    Normalizer norm(*m.feature_norm);

    std::vector<Mat> unit_features(m.utterances.size());
    std::vector<ConditionEmbedding> conds(m.utterances.size());
    for (size_t i = 0; i < m.utterances.size(); ++i) {
      unit_features[i] =
          norm.to_unit(load_matrix(feature_path(m.utterances[i].id).string()));
      conds[i] = conditioner_.embed_text(m.utterances[i].transcript);
    }

    DenoiserConfig dc;
    dc.n_mels = cfg_.features.n_mels;
    dc.base_channels = cfg_.diffusion.base_channels;
    dc.frames = cfg_.diffusion.frames;
    NoiseSchedule sched =
        make_schedule(cfg_.diffusion.timesteps, cfg_.diffusion.beta_start,
                      cfg_.diffusion.beta_end);
    uint64_t seed = mix64(cfg_.master_seed,
                          0x646966ull + static_cast<uint64_t>(
                                            std::llround(mask_ratio * 1e6)));
    DenoiserModel model(dc, sched, norm, seed);

    DiffusionTrainConfig tc;
    tc.mask_ratio = mask_ratio;
    tc.sigma = cfg_.diffusion.sigma;
    tc.iterations = cfg_.diffusion.iterations;
    tc.batch_size = cfg_.diffusion.batch_size;
    tc.learning_rate = cfg_.diffusion.learning_rate;
    tc.seed = seed;
    tc.num_threads = cfg_.num_threads;
    std::vector<TrainRecord> log;
    try {
      log = train(model, unit_features, conds, tc);
    } catch (const TrainingError&) {
      // keep the last state on divergence, then rethrow
      save_denoiser_checkpoint(diffusion_ckpt(mask_ratio).string(), model);
      throw;
    }

    CsvWriter csv((diffusion_dir(mask_ratio) / "training_log.csv").string());
    csv.row({"step", "loss", "wall_time"});
    for (const auto& rec : log)
      csv.row({std::to_string(rec.step), format_double(rec.loss),
               format_double(rec.wall_time_s)});
    csv.close();
    save_denoiser_checkpoint(diffusion_ckpt(mask_ratio).string(), model);
    return diffusion_ckpt(mask_ratio).string();
  }

  // --- attack --------------------------------------------------------------
  std::string attack_stage() {
    Manifest m = require_manifest();
    if (!fs::exists(asv_ckpt()))
      throw DependencyError(
          "ASV checkpoint missing; run the train-asv stage first");
    SplitInfo split = require_splits();
    AsvModel model = load_asv_checkpoint(asv_ckpt().string());
    if (!model.trained())
      throw DependencyError("ASV model is flagged untrained");

    std::vector<Trial> adv_targets = eval_nontarget_trials(m, split);
    TrialAttackConfig tac;
    tac.attack.method = attack_method_from_string(cfg_.attack.method);
    tac.attack.norm = attack_norm_from_string(cfg_.attack.norm);
    tac.attack.iterations = cfg_.attack.iterations;
    tac.attack.random_start = cfg_.attack.random_start;
    tac.attack.seed = mix64(cfg_.master_seed, 0x61747461ull);
    tac.epsilon_rel = cfg_.attack.epsilon_rel;
    tac.step_factor = cfg_.attack.step_factor;

    AttackRunResult run = attack_trials(model, cfg_.features, m, adv_targets,
                                        tac, cfg_.num_threads);
    if (!run.failures.empty()) {
      std::string msg = "attack failures:";
      for (const auto& f : run.failures)
        msg += " [trial " + std::to_string(f.trial_index) + "] " + f.message;
      throw Error(msg);
    }

    fs::create_directories(attacks_dir());
    CsvWriter csv((attacks_dir() / "attacks.csv").string());
    csv.row({"base_id", "enroll_id", "epsilon", "norm", "iterations",
             "achieved_score", "perturbation_norm", "wav"});
    for (size_t i = 0; i < adv_targets.size(); ++i) {
      const AdversarialExample& a = run.examples[i];
      std::string name = "adv_" + std::to_string(i) + "_" + a.base_id + ".wav";
      write_wav_float32((attacks_dir() / name).string(), a.x_adv);
      csv.row({a.base_id, adv_targets[i].enroll_id,
               format_double(a.config.epsilon), to_string(a.config.norm),
               std::to_string(a.config.iterations),
               format_double(a.achieved_score),
               format_double(a.perturbation_norm), name});
    }
    csv.close();
    return attacks_dir().string();
  }

  // --- purification helpers -------------------------------------------------
  using PurifiedCache = std::map<std::string, MelSpectrogram>;

  // Purifies the given (id, mel, transcript) set in parallel with per-worker
  // denoiser clones; per-utterance seeds keep results order-independent.
  PurifiedCache purify_set(
      const DenoiserModel& model,
      const std::vector<std::tuple<std::string, MelSpectrogram, std::string>>&
          inputs) const {
    int workers = std::max(1, cfg_.num_threads);
    std::vector<DenoiserModel> clones(workers, model);
    std::vector<MelSpectrogram> purified(inputs.size());
    FeatureExtractor fe(cfg_.features);
    parallel_for_workers(inputs.size(), workers, [&](size_t i, int w) {
      DenoiserModel& dm = clones[w];
      const auto& [id, mel, transcript] = inputs[i];
      PurifierConfig pc;
      pc.t_start = cfg_.diffusion.t_start;
      pc.mask_ratio = dm.train_mask_ratio();
      pc.sigma = cfg_.diffusion.sigma;
      pc.seed = mix64(cfg_.master_seed, fnv1a64(id));
      ConditionEmbedding c = conditioner_.embed_text(transcript);
      MelSpectrogram out = purify(dm, mel, c, pc);
      if (cfg_.scoring_path == "waveform") {
        Waveform w = invert(out, cfg_.gl_iterations,
                            mix64(cfg_.master_seed, fnv1a64(id + "#phase")));
        out = fe.extract(w, mel.utterance_id);
      }
      purified[i] = std::move(out);
    });
    PurifiedCache cache;
    for (size_t i = 0; i < inputs.size(); ++i)
      cache[std::get<0>(inputs[i])] = std::move(purified[i]);
    return cache;
  }

  // --- calibrate -------------------------------------------------------------
  std::string calibrate_stage(double mask_ratio) {
    Manifest m = require_manifest();
    SplitInfo split = require_splits();
    require_stage(asv_ckpt(), "train-asv");
    require_stage(diffusion_ckpt(mask_ratio), "train-diffusion");

    AsvModel asv = load_asv_checkpoint(asv_ckpt().string());
    DenoiserModel dm = load_denoiser_checkpoint(
        diffusion_ckpt(mask_ratio).string());

    std::vector<Trial> trials = calibration_trials(m, split);
    std::vector<ScoreRecord> records =
        score_clean_trials(asv, dm, m, trials);

    fs::create_directories(calibration_dir(mask_ratio));
    write_scores_csv(
        (calibration_dir(mask_ratio) / "scores_calibration.csv").string(),
        records);
    std::vector<double> d_values;
    for (const auto& r : records) d_values.push_back(r.d);

    nlohmann::json js;
    js["mask_ratio"] = mask_ratio;
    js["n_calibration"] = d_values.size();
    js["thresholds"] = nlohmann::json::array();
    for (double f : cfg_.detector.fpr_targets) {
      DetectionThreshold th = calibrate_threshold(d_values, f);
      js["thresholds"].push_back({{"fpr_target", th.fpr_target},
                                  {"tau_det", th.tau_det},
                                  {"realized_fpr", th.realized_fpr},
                                  {"calibration_size", th.calibration_size}});
    }
    write_text_file((calibration_dir(mask_ratio) / "thresholds.json").string(),
                    js.dump(2) + "\n");
    return (calibration_dir(mask_ratio) / "thresholds.json").string();
  }

  // --- evaluate ---------------------------------------------------------------
  MetricsReport evaluate_stage(double mask_ratio) {
    Manifest m = require_manifest();
    SplitInfo split = require_splits();
    require_stage(asv_ckpt(), "train-asv");
    require_stage(diffusion_ckpt(mask_ratio), "train-diffusion");
    require_stage(calibration_dir(mask_ratio) / "thresholds.json",
                  "calibrate");
    require_stage(attacks_dir() / "attacks.csv", "attack");

    AsvModel asv = load_asv_checkpoint(asv_ckpt().string());
    DenoiserModel dm =
        load_denoiser_checkpoint(diffusion_ckpt(mask_ratio).string());

    // clean evaluation trials
    std::vector<Trial> eval_trials = evaluation_trials(m, split);
    std::vector<ScoreRecord> clean_records =
        score_clean_trials(asv, dm, m, eval_trials);

    // adversarial trials: mels extracted from the attacked waveforms
    std::vector<Trial> adv_trials = eval_nontarget_trials(m, split);
    std::vector<ScoreRecord> adv_records =
        score_adversarial_trials(asv, dm, m, adv_trials);

    // thresholds from the calibration stage
    nlohmann::json th_js = nlohmann::json::parse(read_text_file(
        (calibration_dir(mask_ratio) / "thresholds.json").string()));

    std::vector<double> d_clean, d_adv;
    for (const auto& r : clean_records) d_clean.push_back(r.d);
    for (const auto& r : adv_records) d_adv.push_back(r.d);

    MetricsReport report;
    report.scoring_path = cfg_.scoring_path;
    for (const auto& jt : th_js.at("thresholds")) {
      DetectionThreshold th;
      th.fpr_target = jt.at("fpr_target").get<double>();
      th.tau_det = jt.at("tau_det").get<double>();
      th.realized_fpr = jt.at("realized_fpr").get<double>();
      th.calibration_size = jt.at("calibration_size").get<size_t>();
      report.dr_at_fpr[th.fpr_target] = detection_rate(d_adv, th);
      report.realized_fpr_calibration[th.fpr_target] = th.realized_fpr;
      size_t above = 0;
      for (double d : d_clean)
        if (d > th.tau_det) ++above;
      report.realized_fpr_eval[th.fpr_target] =
          static_cast<double>(above) / d_clean.size();
    }

    std::vector<double> tar_s, non_s, adv_s, tar_sp, non_sp, adv_sp;
    for (const auto& r : clean_records) {
      if (r.trial.label == TrialLabel::target) {
        tar_s.push_back(r.s);
        tar_sp.push_back(r.s_prime);
      } else {
        non_s.push_back(r.s);
        non_sp.push_back(r.s_prime);
      }
    }
    for (const auto& r : adv_records) {
      adv_s.push_back(r.s);
      adv_sp.push_back(r.s_prime);
    }
    report.eer_clean = eer(tar_s, non_s);
    report.eer_attacked = eer(tar_s, adv_s);
    report.eer_clean_purified = eer(tar_sp, non_sp);
    report.eer_attacked_purified = eer(tar_sp, adv_sp);
    report.n_target = tar_s.size();
    report.n_nontarget = non_s.size();
    report.n_adversarial = adv_s.size();

    write_eval_outputs(mask_ratio, clean_records, adv_records, d_clean, d_adv,
                       tar_s, non_s, adv_s, report);
    return report;
  }

  // --- plot ---------------------------------------------------------------
  void plot_stage(double mask_ratio) {
    fs::path dir = eval_dir(mask_ratio);
    require_stage(dir / "d_values.csv", "evaluate");
    std::vector<double> d_clean, d_adv;
    for (const auto& row : read_csv_rows((dir / "d_values.csv").string())) {
      if (row[0] == "clean")
        d_clean.push_back(std::stod(row[1]));
      else if (row[0] == "adversarial")
        d_adv.push_back(std::stod(row[1]));
    }
    svg_histograms((dir / "score_difference_hist.svg").string(),
                   {{"bona fide", d_clean}, {"adversarial", d_adv}},
                   cfg_.detector.histogram_bins,
                   "Score difference distributions (" + mask_tag(mask_ratio) +
                       ")");

    std::vector<SvgSeries> curves;
    static const char* palette[] = {"#1f77b4", "#d62728"};
    int ci = 0;
    for (const std::string name : {"det_clean", "det_attacked"}) {
      fs::path p = dir / (name + ".csv");
      if (!fs::exists(p)) continue;
      SvgSeries s;
      s.label = name == "det_clean" ? "tar vs nontar" : "tar vs adv";
      s.color = palette[ci++ % 2];
      for (const auto& row : read_csv_rows(p.string())) {
        if (row[0] == "far") continue;  // header
        s.points.emplace_back(std::stod(row[0]), std::stod(row[1]));
      }
      curves.push_back(std::move(s));
    }
    svg_det_curves((dir / "det_curves.svg").string(), curves,
                   "DET (" + mask_tag(mask_ratio) + ")");
  }

  // --- sweep -----------------------------------------------------------------
  void sweep_stage() {
    prepare();
    if (!fs::exists(asv_ckpt())) train_asv_stage();
    if (!fs::exists(attacks_dir() / "attacks.csv")) attack_stage();
    std::vector<MetricsReport> reports;
    for (double r : cfg_.diffusion.mask_ratios) {
      if (!fs::exists(diffusion_ckpt(r))) train_diffusion_stage(r);
      calibrate_stage(r);
      reports.push_back(evaluate_stage(r));
      plot_stage(r);
    }
    fs::path dir = work() / "eval" / "summary";
    fs::create_directories(dir);
    CsvWriter dr((dir / "dr_table.csv").string());
    std::vector<std::string> head = {"mask_ratio"};
    for (double f : cfg_.detector.fpr_targets)
      head.push_back("dr_at_fpr_" + format_double(f));
    dr.row(head);
    for (size_t i = 0; i < cfg_.diffusion.mask_ratios.size(); ++i) {
      std::vector<std::string> row = {
          format_double(cfg_.diffusion.mask_ratios[i])};
      for (double f : cfg_.detector.fpr_targets)
        row.push_back(format_double(reports[i].dr_at_fpr.at(f)));
      dr.row(row);
    }
    dr.close();

    CsvWriter ee((dir / "eer_table.csv").string());
    ee.row({"purification", "bona_fide_eer", "attacked_eer"});
    ee.row({"none", format_double(reports[0].eer_clean),
            format_double(reports[0].eer_attacked)});
    for (size_t i = 0; i < cfg_.diffusion.mask_ratios.size(); ++i)
      ee.row({mask_tag(cfg_.diffusion.mask_ratios[i]),
              format_double(reports[i].eer_clean_purified),
              format_double(reports[i].eer_attacked_purified)});
    ee.close();
  }

  // Trial subsets -----------------------------------------------------------
  std::vector<Trial> calibration_trials(const Manifest& m,
                                        const SplitInfo& s) const {
    return trials_with_test_in(m, s.calibration_test_ids);
  }
  std::vector<Trial> evaluation_trials(const Manifest& m,
                                       const SplitInfo& s) const {
    return trials_with_test_in(m, s.eval_test_ids);
  }
  std::vector<Trial> eval_nontarget_trials(const Manifest& m,
                                           const SplitInfo& s) const {
    std::vector<Trial> out;
    for (const auto& t : evaluation_trials(m, s))
      if (t.label == TrialLabel::nontarget) out.push_back(t);
    return out;
  }

 private:
  static std::string timestamp() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
  }

  bool features_complete(const Manifest& m) const {
    if (!m.feature_norm) return false;
    for (const auto& u : m.utterances)
      if (!fs::exists(feature_path(u.id))) return false;
    return true;
  }

  static void require_stage(const fs::path& artifact,
                            const std::string& stage) {
    if (!fs::exists(artifact))
      throw DependencyError("missing artifact " + artifact.string() +
                            "; run the " + stage + " stage first");
  }

  // Stratified per-speaker split of utterances into calibration/eval pools.
  SplitInfo make_splits(const Manifest& m) const {
    std::map<std::string, std::vector<std::string>> by_speaker;
    for (const auto& u : m.utterances) by_speaker[u.speaker_id].push_back(u.id);
    SplitInfo s;
    Rng rng(mix64(cfg_.master_seed, 0x73706c69ull));
    for (auto& [sid, ids] : by_speaker) {
      for (size_t i = 0; i + 1 < ids.size(); ++i) {
        int64_t j = rng.uniform_int(static_cast<int64_t>(i),
                                    static_cast<int64_t>(ids.size()) - 1);
        std::swap(ids[i], ids[j]);
      }
      size_t half = ids.size() / 2;
      for (size_t i = 0; i < ids.size(); ++i)
        (i < half ? s.calibration_test_ids : s.eval_test_ids).push_back(ids[i]);
    }
    std::sort(s.calibration_test_ids.begin(), s.calibration_test_ids.end());
    std::sort(s.eval_test_ids.begin(), s.eval_test_ids.end());
    return s;
  }

  static Manifest submanifest(const Manifest& m,
                              const std::vector<std::string>& ids) {
    std::set<std::string> keep(ids.begin(), ids.end());
    Manifest out;
    out.seed = m.seed;
    out.created_at = m.created_at;
    for (const auto& u : m.utterances)
      if (keep.count(u.id)) out.utterances.push_back(u);
    return out;
  }

  std::vector<Trial> trials_with_test_in(
      const Manifest& m, const std::vector<std::string>& ids) const {
    std::set<std::string> keep(ids.begin(), ids.end());
    std::vector<Trial> out;
    for (const auto& t : m.trials)
      if (keep.count(t.test_id)) out.push_back(t);
    return out;
  }

  std::vector<ScoreRecord> score_clean_trials(const AsvModel& asv,
                                              const DenoiserModel& dm,
                                              const Manifest& m,
                                              const std::vector<Trial>& trials) {
    std::set<std::string> test_ids;
    for (const auto& t : trials) test_ids.insert(t.test_id);
    std::vector<std::tuple<std::string, MelSpectrogram, std::string>> inputs;
    for (const auto& id : test_ids)
      inputs.emplace_back(id, load_features(id), m.find(id).transcript);
    PurifiedCache cache = purify_set(dm, inputs);

    MelSource mels = [this](const Utterance& u) { return load_features(u.id); };
    Purifier purifier = [&cache](const MelSpectrogram& mel,
                                 const Utterance& u) {
      return cache.at(u.id);
    };
    return score_trials(asv, m, trials, mels, purifier, cfg_.num_threads);
  }

  std::vector<ScoreRecord> score_adversarial_trials(
      const AsvModel& asv, const DenoiserModel& dm, const Manifest& m,
      const std::vector<Trial>& trials) {
    // adversarial wavs indexed by trial order in the attacks manifest
    std::map<std::string, std::string> wav_of;  // "enroll|test" -> wav path
    auto rows = read_csv_rows((attacks_dir() / "attacks.csv").string());
    for (const auto& row : rows) {
      if (row[0] == "base_id") continue;
      wav_of[row[1] + "|" + row[0]] = (attacks_dir() / row.back()).string();
    }

    FeatureExtractor fe(cfg_.features);
    std::vector<std::tuple<std::string, MelSpectrogram, std::string>> inputs;
    std::map<std::string, MelSpectrogram> adv_mels;
    for (const auto& t : trials) {
      std::string key = t.enroll_id + "|" + t.test_id;
      auto it = wav_of.find(key);
      if (it == wav_of.end())
        throw DependencyError("no adversarial audio for trial " + key +
                              "; re-run the attack stage");
      Waveform w = read_wav(it->second, cfg_.features.sample_rate);
      std::string adv_id = "adv#" + key;
      adv_mels[adv_id] = fe.extract(w, t.test_id);
      inputs.emplace_back(adv_id, adv_mels[adv_id],
                          m.find(t.test_id).transcript);
    }
    PurifiedCache cache = purify_set(dm, inputs);

    // score manually (the test features come from the attack outputs)
    AsvModel clone = asv;
    std::map<std::string, Vec> enroll_emb;
    std::vector<ScoreRecord> records;
    for (const auto& t : trials) {
      std::string adv_id = "adv#" + t.enroll_id + "|" + t.test_id;
      if (!enroll_emb.count(t.enroll_id))
        enroll_emb[t.enroll_id] =
            clone.embed_values(load_features(t.enroll_id).values);
      Vec e = enroll_emb[t.enroll_id];
      Vec raw = clone.embed_values(adv_mels.at(adv_id).values);
      Vec pur = clone.embed_values(cache.at(adv_id).values);
      ScoreRecord r;
      r.trial = t;
      r.trial.label = TrialLabel::adversarial_nontarget;
      r.s = e.dot(raw) / (e.norm() * raw.norm());
      r.s_prime = e.dot(pur) / (e.norm() * pur.norm());
      r.d = std::abs(r.s - r.s_prime);
      records.push_back(r);
    }
    return records;
  }

  static std::vector<std::vector<std::string>> read_csv_rows(
      const std::string& path) {
    std::vector<std::vector<std::string>> rows;
    std::ifstream f(path);
    if (!f) throw IoError("cannot open csv: " + path);
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells;
      size_t start = 0;
      while (true) {
        size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
          cells.push_back(line.substr(start));
          break;
        }
        cells.push_back(line.substr(start, comma - start));
        start = comma + 1;
      }
      rows.push_back(std::move(cells));
    }
    return rows;
  }

  static void write_scores_csv(const std::string& path,
                               const std::vector<ScoreRecord>& records) {
    CsvWriter csv(path);
    csv.row({"enroll_id", "test_id", "label", "s", "s_prime", "d"});
    for (const auto& r : records)
      csv.row({r.trial.enroll_id, r.trial.test_id, to_string(r.trial.label),
               format_double(r.s), format_double(r.s_prime),
               format_double(r.d)});
    csv.close();
  }

  void write_eval_outputs(double mask_ratio,
                          const std::vector<ScoreRecord>& clean_records,
                          const std::vector<ScoreRecord>& adv_records,
                          const std::vector<double>& d_clean,
                          const std::vector<double>& d_adv,
                          const std::vector<double>& tar_s,
                          const std::vector<double>& non_s,
                          const std::vector<double>& adv_s,
                          const MetricsReport& report) {
    fs::path dir = eval_dir(mask_ratio);
    fs::create_directories(dir);
    write_scores_csv((dir / "scores_clean.csv").string(), clean_records);
    write_scores_csv((dir / "scores_adv.csv").string(), adv_records);

    CsvWriter dv((dir / "d_values.csv").string());
    dv.row({"class", "d"});
    for (double d : d_clean) dv.row({"clean", format_double(d)});
    for (double d : d_adv) dv.row({"adversarial", format_double(d)});
    dv.close();

    CsvWriter dr((dir / "dr_table.csv").string());
    dr.row({"mask_ratio", "fpr_target", "detection_rate",
            "realized_fpr_calibration", "realized_fpr_eval"});
    for (const auto& [f, rate] : report.dr_at_fpr)
      dr.row({format_double(mask_ratio), format_double(f),
              format_double(rate),
              format_double(report.realized_fpr_calibration.at(f)),
              format_double(report.realized_fpr_eval.at(f))});
    dr.close();

    CsvWriter ee((dir / "eer_table.csv").string());
    ee.row({"purification", "bona_fide_eer", "attacked_eer"});
    ee.row({"none", format_double(report.eer_clean),
            format_double(report.eer_attacked)});
    ee.row({mask_tag(mask_ratio), format_double(report.eer_clean_purified),
            format_double(report.eer_attacked_purified)});
    ee.close();

    // histograms + DET curves as CSV, rendered to SVG by the plot stage
    auto write_hist = [&](const std::string& name,
                          const std::vector<double>& vals) {
      Histogram h = score_histogram(vals, cfg_.detector.histogram_bins);
      CsvWriter hw((dir / name).string());
      hw.row({"bin_lo", "bin_hi", "count"});
      double width = h.counts.size() > 1 && h.hi > h.lo
                         ? (h.hi - h.lo) / static_cast<double>(h.counts.size())
                         : 1.0;
      for (size_t b = 0; b < h.counts.size(); ++b)
        hw.row({format_double(h.lo + b * width),
                format_double(h.lo + (b + 1) * width),
                std::to_string(h.counts[b])});
      hw.close();
    };
    write_hist("hist_d_clean.csv", d_clean);
    write_hist("hist_d_adv.csv", d_adv);

    auto write_det = [&](const std::string& name,
                         const std::vector<double>& target,
                         const std::vector<double>& impostor) {
      auto curve = det_curve(target, impostor);
      CsvWriter w((dir / name).string());
      w.row({"far", "frr"});
      for (const auto& [far, frr] : curve)
        w.row({format_double(far), format_double(frr)});
      w.close();
    };
    write_det("det_clean.csv", tar_s, non_s);
    write_det("det_attacked.csv", tar_s, adv_s);

    nlohmann::json js;
    js["config_hash"] = cfg_.config_hash;
    js["master_seed"] = cfg_.master_seed;
    js["mask_ratio"] = mask_ratio;
    js["t_start"] = cfg_.diffusion.t_start == 0 ? cfg_.diffusion.timesteps
                                                : cfg_.diffusion.t_start;
    js["diffusion_iterations"] = cfg_.diffusion.iterations;
    js["scoring_path"] = cfg_.scoring_path;
    js["parallelism"] = cfg_.num_threads;
    js["dr_at_fpr"] = report.dr_at_fpr;
    js["realized_fpr_calibration"] = report.realized_fpr_calibration;
    js["realized_fpr_eval"] = report.realized_fpr_eval;
    js["eer"] = {{"clean_raw", report.eer_clean},
                 {"attacked_raw", report.eer_attacked},
                 {"clean_purified", report.eer_clean_purified},
                 {"attacked_purified", report.eer_attacked_purified}};
    js["counts"] = {{"target", report.n_target},
                    {"nontarget", report.n_nontarget},
                    {"adversarial", report.n_adversarial}};
    js["generated_at"] = timestamp();
    write_text_file((dir / "run_manifest.json").string(), js.dump(2) + "\n");
  }

  ExperimentConfig cfg_;
  ConditioningFrontend conditioner_;
};

}  // namespace mdd
