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

#include <cmath>
#include <string>
#include <vector>

#include "mdd/asv.hpp"
#include "mdd/common.hpp"
#include "mdd/corpus.hpp"
#include "mdd/wave.hpp"

namespace mdd {

enum class AttackMethod { FGSM, BIM, PGD };
enum class AttackNorm { l2, linf };

inline std::string to_string(AttackMethod m) {
  switch (m) {
    case AttackMethod::FGSM: return "fgsm";
    case AttackMethod::BIM: return "bim";
    case AttackMethod::PGD: return "pgd";
  }
  throw ValueError("bad attack method");
}
inline std::string to_string(AttackNorm n) {
  return n == AttackNorm::l2 ? "l2" : "linf";
}
inline AttackMethod attack_method_from_string(const std::string& s) {
  if (s == "fgsm") return AttackMethod::FGSM;
  if (s == "bim") return AttackMethod::BIM;
  if (s == "pgd") return AttackMethod::PGD;
  throw ConfigError("unknown attack method: " + s);
}
inline AttackNorm attack_norm_from_string(const std::string& s) {
  if (s == "l2") return AttackNorm::l2;
  if (s == "linf") return AttackNorm::linf;
  throw ConfigError("unknown attack norm: " + s);
}

struct AttackConfig {
  AttackMethod method = AttackMethod::PGD;
  AttackNorm norm = AttackNorm::l2;
  double epsilon = 0.0;    // waveform amplitude units; 0 is the no-op ball
  double step_size = 0.0;
  int iterations = 50;
  bool random_start = false;  // PGD only
  uint64_t seed = 0;

  void validate() const {
    if (epsilon < 0) throw RangeError("attack epsilon must be >= 0");
    if (step_size < 0) throw RangeError("attack step size must be >= 0");
    if (iterations < 1) throw RangeError("attack iterations must be >= 1");
    if (method == AttackMethod::FGSM && iterations != 1)
      throw ConfigError("FGSM implies iterations = 1");
  }
};

struct AdversarialExample {
  std::string base_id;
  Waveform x_adv;
  double achieved_score = 0.0;
  double perturbation_norm = 0.0;
  AttackConfig config;
  bool zero_gradient = false;

  void check_budget(const Waveform& base) const {
    if (perturbation_norm > config.epsilon + 1e-6)
      throw RangeError("attack exceeded its budget: " +
                       std::to_string(perturbation_norm) + " > " +
                       std::to_string(config.epsilon));
    for (size_t i = 0; i < x_adv.samples.size(); ++i)
      if (std::abs(x_adv.samples[i]) > 1.0 + 1e-12)
        throw RangeError("adversarial sample outside [-1, 1]");
    (void)base;
  }
};

namespace detail {

inline double perturbation_norm(const Vec& delta, AttackNorm norm) {
  return norm == AttackNorm::l2 ? delta.norm()
                                : delta.lpNorm<Eigen::Infinity>();
}

// project delta into the eps-ball of the given norm
inline void project(Vec& delta, AttackNorm norm, double eps) {
  if (norm == AttackNorm::linf) {
    delta = delta.cwiseMax(-eps).cwiseMin(eps);
  } else {
    double n = delta.norm();
    if (n > eps) delta *= n > 0 ? eps / n : 0.0;
  }
}

inline Vec ascent_direction(const Vec& g, AttackNorm norm) {
  if (norm == AttackNorm::linf) {
    Vec d(g.size());
    for (Eigen::Index i = 0; i < g.size(); ++i)
      d[i] = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);  // sign(0) = 0
    return d;
  }
  double n = g.norm();
  return n > 0 ? Vec(g / n) : Vec(Vec::Zero(g.size()));
}

inline Waveform apply_delta(const Waveform& x, const Vec& delta) {
  Waveform out = x;
  for (size_t i = 0; i < out.samples.size(); ++i)
    out.samples[i] = std::clamp(out.samples[i] + delta[i], -1.0, 1.0);
  return out;
}

// Shared FGSM/BIM/PGD iterate. Maximizes the score (impersonation). The
// per-coordinate clip to [-1, 1] happens before projection; both operations
// keep the iterate inside the other's constraint set.
inline AdversarialExample iterate_attack(DifferentiableScorer& scorer,
                                         const Waveform& x,
                                         const AttackConfig& cfg,
                                         bool exact_projection) {
  cfg.validate();
  size_t n = x.samples.size();
  Eigen::Map<const Vec> x0(x.samples.data(), n);

  AdversarialExample adv;
  adv.config = cfg;
  adv.x_adv = x;

  if (cfg.epsilon == 0.0) {
    adv.achieved_score = scorer.score_waveform(x);
    adv.perturbation_norm = 0.0;
    return adv;
  }

  Vec delta = Vec::Zero(n);
  if (cfg.random_start && cfg.method == AttackMethod::PGD) {
    Rng rng(mix64(cfg.seed, 0x72737461ull));
    for (Eigen::Index i = 0; i < delta.size(); ++i)
      delta[i] = cfg.epsilon * (2.0 * rng.uniform() - 1.0);
    project(delta, cfg.norm, cfg.epsilon);
  }

  bool all_zero_grad = true;
  for (int k = 0; k < cfg.iterations; ++k) {
    Waveform xk = apply_delta(x, delta);
    std::pair<double, Vec> sg;
    try {
      sg = scorer.score_with_gradient(xk);
    } catch (const Error& e) {
      throw Error("attack failed at iteration " + std::to_string(k) + ": " +
                  e.what());
    }
    Vec dir = ascent_direction(sg.second, cfg.norm);
    if (dir.cwiseAbs().maxCoeff() > 0) all_zero_grad = false;
    double step = cfg.method == AttackMethod::FGSM ? cfg.epsilon
                                                   : cfg.step_size;
    Vec moved(n);
    for (size_t i = 0; i < n; ++i)
      moved[i] = std::clamp(x.samples[i] + delta[i] + step * dir[i],
                            -1.0, 1.0) - x.samples[i];
    delta = moved;
    project(delta, cfg.norm, cfg.epsilon);
    (void)exact_projection;  // BIM's per-step clip and PGD's projection agree
  }

  adv.zero_gradient = all_zero_grad;
  adv.x_adv = apply_delta(x, delta);
  Eigen::Map<const Vec> xa(adv.x_adv.samples.data(), n);
  adv.perturbation_norm = perturbation_norm(Vec(xa - x0), cfg.norm);
  adv.achieved_score = scorer.score_waveform(adv.x_adv);
  adv.check_budget(x);
  return adv;
}

}  // namespace detail

inline AdversarialExample fgsm(DifferentiableScorer& scorer, const Waveform& x,
                               AttackConfig cfg) {
  if (cfg.method != AttackMethod::FGSM)
    throw ConfigError("fgsm called with method " + to_string(cfg.method));
  cfg.iterations = 1;
  return detail::iterate_attack(scorer, x, cfg, /*exact_projection=*/false);
}

inline AdversarialExample bim(DifferentiableScorer& scorer, const Waveform& x,
                              const AttackConfig& cfg) {
  if (cfg.method != AttackMethod::BIM)
    throw ConfigError("bim called with method " + to_string(cfg.method));
  return detail::iterate_attack(scorer, x, cfg, /*exact_projection=*/false);
}

inline AdversarialExample pgd(DifferentiableScorer& scorer, const Waveform& x,
                              const AttackConfig& cfg) {
  if (cfg.method != AttackMethod::PGD)
    throw ConfigError("pgd called with method " + to_string(cfg.method));
  return detail::iterate_attack(scorer, x, cfg, /*exact_projection=*/true);
}

inline AdversarialExample run_attack(DifferentiableScorer& scorer,
                                     const Waveform& x,
                                     const AttackConfig& cfg) {
  switch (cfg.method) {
    case AttackMethod::FGSM: return fgsm(scorer, x, cfg);
    case AttackMethod::BIM: return bim(scorer, x, cfg);
    case AttackMethod::PGD: return pgd(scorer, x, cfg);
  }
  throw ValueError("bad attack method");
}

// ---------------------------------------------------------------------------
// Per-trial attacks against the defended ASV model (white box)

struct TrialAttackConfig {
  AttackConfig attack;
  double epsilon_rel = 0.02;     // l2 budget as a fraction of ||x||_2
  double step_factor = 2.5;      // step = step_factor * eps / iterations
};

struct AttackRunFailure {
  size_t trial_index;
  std::string message;
};

struct AttackRunResult {
  std::vector<AdversarialExample> examples;  // aligned with input trials
  std::vector<AttackRunFailure> failures;
};

// One adversarial example per (nontarget) trial test utterance. The RNG
// stream is derived from (seed, trial index) so results are order-independent
// and per-trial work can run concurrently.
inline AttackRunResult attack_trials(const AsvModel& model,
                                     const FeatureConfig& feat_cfg,
                                     const Manifest& manifest,
                                     const std::vector<Trial>& trials,
                                     const TrialAttackConfig& cfg,
                                     int num_threads = 1) {
  for (const auto& t : trials)
    if (t.label == TrialLabel::target)
      throw ValueError(
          "attack_trials expects nontarget trials (impersonation objective)");

  AttackRunResult result;
  result.examples.resize(trials.size());
  std::vector<std::string> errors(trials.size());
  FeatureExtractor fe(feat_cfg);

  parallel_for(trials.size(), std::max(1, num_threads), [&](size_t i) {
    try {
      const Trial& t = trials[i];
      const Utterance& enroll_u = manifest.find(t.enroll_id);
      const Utterance& test_u = manifest.find(t.test_id);
      Waveform enroll_w = read_wav(enroll_u.path, feat_cfg.sample_rate);
      Waveform test_w = read_wav(test_u.path, feat_cfg.sample_rate);

      AsvModel clone = model;
      Vec enroll_emb = clone.embed_values(fe.extract(enroll_w).values);
      AsvScorer scorer(clone, enroll_emb, feat_cfg);

      AttackConfig ac = cfg.attack;
      ac.seed = mix64(cfg.attack.seed, 0x7472ull + i);
      if (ac.norm == AttackNorm::l2) {
        Eigen::Map<const Vec> xv(test_w.samples.data(), test_w.samples.size());
        ac.epsilon = cfg.epsilon_rel * xv.norm();
      } else {
        ac.epsilon = cfg.epsilon_rel;
      }
      ac.step_size = cfg.step_factor * ac.epsilon / ac.iterations;

      AdversarialExample adv = run_attack(scorer, test_w, ac);
      adv.base_id = test_u.id;
      result.examples[i] = std::move(adv);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });

  for (size_t i = 0; i < trials.size(); ++i)
    if (!errors[i].empty()) result.failures.push_back({i, errors[i]});
  return result;
}

}  // namespace mdd
