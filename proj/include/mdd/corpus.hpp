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
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdd/common.hpp"
#include "mdd/io.hpp"
#include "mdd/wave.hpp"

namespace mdd {

struct Utterance {
  std::string id;
  std::string speaker_id;
  std::string path;
  std::string transcript;
  double duration_s = 0.0;
};

enum class TrialLabel { target, nontarget, adversarial_nontarget };

inline std::string to_string(TrialLabel l) {
  switch (l) {
    case TrialLabel::target: return "target";
    case TrialLabel::nontarget: return "nontarget";
    case TrialLabel::adversarial_nontarget: return "adversarial_nontarget";
  }
  throw ValueError("bad trial label");
}

inline TrialLabel trial_label_from_string(const std::string& s) {
  if (s == "target") return TrialLabel::target;
  if (s == "nontarget") return TrialLabel::nontarget;
  if (s == "adversarial_nontarget") return TrialLabel::adversarial_nontarget;
  throw ValueError("unknown trial label: " + s);
}

struct Trial {
  std::string enroll_id;
  std::string test_id;
  TrialLabel label = TrialLabel::target;
};

struct FeatureNormStats {
  double min = 0.0;
  double max = 1.0;
};

struct Manifest {
  static constexpr int kSchemaVersion = 1;
  std::vector<Utterance> utterances;  // sorted by id
  std::vector<Trial> trials;
  int64_t seed = 0;
  std::string created_at;
  std::optional<FeatureNormStats> feature_norm;

  const Utterance& find(const std::string& id) const {
    auto it = std::lower_bound(
        utterances.begin(), utterances.end(), id,
        [](const Utterance& u, const std::string& key) { return u.id < key; });
    if (it == utterances.end() || it->id != id)
      throw ResolutionError("utterance not found in manifest: " + id);
    return *it;
  }

  std::vector<std::string> speaker_ids() const {
    std::set<std::string> s;
    for (const auto& u : utterances) s.insert(u.speaker_id);
    return {s.begin(), s.end()};
  }

  void validate() const {
    std::set<std::string> ids;
    for (const auto& u : utterances) {
      if (!ids.insert(u.id).second)
        throw IngestError("duplicate utterance id: " + u.id);
      if (u.duration_s <= 0)
        throw IngestError("non-positive duration for utterance " + u.id);
    }
    for (const auto& t : trials) {
      const Utterance& e = find(t.enroll_id);
      const Utterance& x = find(t.test_id);
      if (t.enroll_id == t.test_id)
        throw ValueError("trial enrolls and tests the same utterance: " +
                         t.enroll_id);
      bool same = e.speaker_id == x.speaker_id;
      if (t.label == TrialLabel::target && !same)
        throw ValueError("target trial with different speakers: " +
                         t.enroll_id + " vs " + t.test_id);
      if (t.label != TrialLabel::target && same)
        throw ValueError("nontarget trial with same speaker: " + t.enroll_id +
                         " vs " + t.test_id);
    }
  }
};

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json j;
  j["schema_version"] = Manifest::kSchemaVersion;
  j["seed"] = m.seed;
  j["created_at"] = m.created_at;
  if (m.feature_norm) {
    j["feature_norm"] = {{"min", m.feature_norm->min},
                         {"max", m.feature_norm->max}};
  }
  j["utterances"] = nlohmann::json::array();
  for (const auto& u : m.utterances) {
    j["utterances"].push_back({{"id", u.id},
                               {"speaker_id", u.speaker_id},
                               {"path", u.path},
                               {"transcript", u.transcript},
                               {"duration_s", u.duration_s}});
  }
  j["trials"] = nlohmann::json::array();
  for (const auto& t : m.trials) {
    j["trials"].push_back({{"enroll_id", t.enroll_id},
                           {"test_id", t.test_id},
                           {"label", to_string(t.label)}});
  }
  return j;
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  if (!j.contains("schema_version") ||
      j.at("schema_version").get<int>() != Manifest::kSchemaVersion)
    throw IngestError("manifest schema_version mismatch");
  Manifest m;
  m.seed = j.at("seed").get<int64_t>();
  m.created_at = j.value("created_at", "");
  if (j.contains("feature_norm")) {
    FeatureNormStats fs;
    fs.min = j["feature_norm"].at("min").get<double>();
    fs.max = j["feature_norm"].at("max").get<double>();
    m.feature_norm = fs;
  }
  for (const auto& ju : j.at("utterances")) {
    Utterance u;
    u.id = ju.at("id").get<std::string>();
    u.speaker_id = ju.at("speaker_id").get<std::string>();
    u.path = ju.at("path").get<std::string>();
    u.transcript = ju.at("transcript").get<std::string>();
    u.duration_s = ju.at("duration_s").get<double>();
    m.utterances.push_back(std::move(u));
  }
  for (const auto& jt : j.at("trials")) {
    Trial t;
    t.enroll_id = jt.at("enroll_id").get<std::string>();
    t.test_id = jt.at("test_id").get<std::string>();
    t.label = trial_label_from_string(jt.at("label").get<std::string>());
    m.trials.push_back(std::move(t));
  }
  m.validate();
  return m;
}

inline void save_manifest(const std::string& path, const Manifest& m) {
  write_text_file(path, to_json(m).dump(2) + "\n");
}

inline Manifest load_manifest(const std::string& path) {
  return manifest_from_json(nlohmann::json::parse(read_text_file(path)));
}

// Ingests a flat directory of speakerid_uttid.wav files. Transcripts come
// from a TSV (id <tab> text); missing entries become empty strings. An
// optional speaker TSV (id <tab> speaker) overrides the filename convention.
inline Manifest load_corpus(const std::string& root,
                            const std::string& transcript_file = "",
                            const std::string& speaker_file = "",
                            int sample_rate = 16000,
                            int num_threads = 1) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root))
    throw IngestError("corpus root is not a directory: " + root);

  std::vector<std::string> wavs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_regular_file() && entry.path().extension() == ".wav")
      wavs.push_back(entry.path().string());
  }
  std::sort(wavs.begin(), wavs.end());
  if (wavs.empty()) throw IngestError("empty corpus: no wav files in " + root);

  std::map<std::string, std::string> transcripts;
  if (!transcript_file.empty()) {
    for (const auto& row : read_tsv(transcript_file))
      transcripts[row[0]] = row.size() > 1 ? row[1] : "";
  }
  std::map<std::string, std::string> speakers;
  if (!speaker_file.empty()) {
    for (const auto& row : read_tsv(speaker_file)) {
      if (row.size() < 2)
        throw IngestError("speaker label file row needs id<TAB>speaker");
      speakers[row[0]] = row[1];
    }
  }

  Manifest m;
  m.utterances.resize(wavs.size());
  parallel_for(wavs.size(), num_threads, [&](size_t i) {
    const std::string& path = wavs[i];
    std::string stem = fs::path(path).stem().string();
    Utterance u;
    u.id = stem;
    u.path = path;
    auto sp = speakers.find(stem);
    if (sp != speakers.end()) {
      u.speaker_id = sp->second;
    } else {
      size_t us = stem.find('_');
      if (us == std::string::npos || us == 0)
        throw IngestError("filename does not follow speakerid_uttid.wav: " +
                          path);
      u.speaker_id = stem.substr(0, us);
    }
    Waveform w = read_wav(path, sample_rate);
    u.duration_s = w.duration_s();
    auto tr = transcripts.find(stem);
    u.transcript = tr == transcripts.end() ? "" : tr->second;
    m.utterances[i] = std::move(u);
  });
  std::sort(m.utterances.begin(), m.utterances.end(),
            [](const Utterance& a, const Utterance& b) { return a.id < b.id; });
  m.validate();
  return m;
}

// Draws exactly n_target same-speaker and n_nontarget cross-speaker trials,
// uniformly without replacement from the ordered candidate pairs. Pure in
// (manifest, counts, seed).
inline std::vector<Trial> build_trials(const Manifest& m, int n_target,
                                       int n_nontarget, uint64_t seed) {
  if (n_target < 0 || n_nontarget < 0)
    throw RangeError("trial counts must be nonnegative");
  std::map<std::string, std::vector<const Utterance*>> by_speaker;
  for (const auto& u : m.utterances) by_speaker[u.speaker_id].push_back(&u);

  int speakers_with_two = 0;
  for (const auto& [sid, us] : by_speaker)
    if (us.size() >= 2) ++speakers_with_two;
  if (by_speaker.size() < 2 || speakers_with_two < 2)
    throw CapacityError(
        "need at least 2 speakers with at least 2 utterances each, have " +
        std::to_string(by_speaker.size()) + " speakers of which " +
        std::to_string(speakers_with_two) + " have 2+ utterances");

  std::vector<std::pair<const Utterance*, const Utterance*>> same, cross;
  for (const auto& a : m.utterances)
    for (const auto& b : m.utterances) {
      if (a.id == b.id) continue;
      if (a.speaker_id == b.speaker_id)
        same.emplace_back(&a, &b);
      else
        cross.emplace_back(&a, &b);
    }
  if (static_cast<size_t>(n_target) > same.size())
    throw CapacityError("requested " + std::to_string(n_target) +
                        " target trials but only " +
                        std::to_string(same.size()) + " same-speaker pairs");
  if (static_cast<size_t>(n_nontarget) > cross.size())
    throw CapacityError("requested " + std::to_string(n_nontarget) +
                        " nontarget trials but only " +
                        std::to_string(cross.size()) + " cross-speaker pairs");

  Rng rng(mix64(seed, 0x747269616cull));
  auto take = [&rng](auto& pool, int n) {
    // partial Fisher-Yates
    for (int i = 0; i < n; ++i) {
      int64_t j = rng.uniform_int(i, static_cast<int64_t>(pool.size()) - 1);
      std::swap(pool[i], pool[j]);
    }
  };
  take(same, n_target);
  take(cross, n_nontarget);

  std::vector<Trial> trials;
  trials.reserve(n_target + n_nontarget);
  for (int i = 0; i < n_target; ++i)
    trials.push_back({same[i].first->id, same[i].second->id,
                      TrialLabel::target});
  for (int i = 0; i < n_nontarget; ++i)
    trials.push_back({cross[i].first->id, cross[i].second->id,
                      TrialLabel::nontarget});
  return trials;
}

// ---------------------------------------------------------------------------
// Synthetic corpus generator. Each speaker gets a distinct fundamental and
// harmonic amplitude profile; utterances add seeded jitter, vibrato, an
// amplitude envelope and a low noise floor (the noise keeps Mel cells off the
// log floor so attack gradients stay alive).

struct SyntheticCorpusOptions {
  int n_speakers = 10;
  int n_utterances = 10;  // per speaker
  double duration_s = 1.295;
  int sample_rate = 16000;
  double noise_level = 5e-3;
  uint64_t seed = 1;
};

inline const std::vector<std::string>& synthetic_word_list() {
  static const std::vector<std::string> words = {
      "alder", "birch", "cedar", "dawn",  "ember",  "fjord", "glade", "heron",
      "inlet", "juniper", "kestrel", "larch", "marsh", "north", "osprey",
      "pine",  "quarry", "ridge", "spruce", "tarn",  "upland", "vale",
      "willow", "xenon", "yarrow", "zephyr", "brook", "crag",  "dune",
      "frost", "grove", "heath"};
  return words;
}

inline void generate_synthetic_corpus(const std::string& dir,
                                      const SyntheticCorpusOptions& opt) {
  namespace fs = std::filesystem;
  if (opt.n_speakers < 1 || opt.n_utterances < 1)
    throw ConfigError("synthetic corpus needs at least 1 speaker/utterance");
  fs::create_directories(dir);

  const auto& words = synthetic_word_list();
  std::string tsv;
  size_t n_samples = static_cast<size_t>(opt.duration_s * opt.sample_rate);

  for (int s = 0; s < opt.n_speakers; ++s) {
    Rng spk_rng(mix64(opt.seed, 0x73706bull + s));
    // fundamentals spread over ~1.5 octaves, plus a per-speaker profile
    double f0_base = 115.0 * std::pow(2.0, 1.5 * s / std::max(1, opt.n_speakers));
    const int n_harm = 6;
    std::vector<double> profile(n_harm);
    for (int h = 0; h < n_harm; ++h)
      profile[h] = 0.2 + spk_rng.uniform() * 0.8;

    for (int u = 0; u < opt.n_utterances; ++u) {
      Rng rng(mix64(opt.seed, 0x757474ull + s * 1000 + u));
      double f0 = f0_base * (1.0 + 0.02 * (rng.uniform() - 0.5));
      double vib_rate = 4.0 + 2.0 * rng.uniform();
      double vib_depth = 0.008 + 0.006 * rng.uniform();
      double am_rate = 1.0 + 2.0 * rng.uniform();
      std::vector<double> amps(n_harm);
      for (int h = 0; h < n_harm; ++h)
        amps[h] = profile[h] * (0.85 + 0.3 * rng.uniform());

      Waveform w;
      w.sample_rate = opt.sample_rate;
      w.samples.resize(n_samples);
      double phase0 = rng.uniform() * 2.0 * M_PI;
      for (size_t i = 0; i < n_samples; ++i) {
        double t = static_cast<double>(i) / opt.sample_rate;
        double inst_f = f0 * (1.0 + vib_depth * std::sin(2 * M_PI * vib_rate * t));
        double v = 0.0;
        for (int h = 0; h < n_harm; ++h)
          v += amps[h] * std::sin(2 * M_PI * (h + 1) * inst_f * t +
                                  phase0 * (h + 1));
        double env = (0.75 + 0.25 * std::sin(2 * M_PI * am_rate * t)) *
                     std::min(1.0, 8.0 * t) *
                     std::min(1.0, 8.0 * (opt.duration_s - t));
        v = v * env + opt.noise_level * rng.normal();
        w.samples[i] = v;
      }
      double peak = 0.0;
      for (double v : w.samples) peak = std::max(peak, std::abs(v));
      if (peak > 0)
        for (double& v : w.samples) v *= 0.7 / peak;

      char name[64];
      std::snprintf(name, sizeof(name), "spk%02d_u%03d", s, u);
      write_wav_pcm16((fs::path(dir) / (std::string(name) + ".wav")).string(),
                      w);

      int n_words = 3 + static_cast<int>(rng.uniform_int(0, 2));
      std::string text;
      for (int k = 0; k < n_words; ++k) {
        if (k) text += ' ';
        text += words[rng.uniform_int(0, static_cast<int64_t>(words.size()) - 1)];
      }
      tsv += std::string(name) + "\t" + text + "\n";
    }
  }
  write_text_file((fs::path(dir) / "transcripts.tsv").string(), tsv);
}

}  // namespace mdd
