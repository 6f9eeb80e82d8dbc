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

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdd/pipeline.hpp"

namespace {

struct CliOptions {
  std::string config_path;
  std::optional<int64_t> seed;
  std::optional<double> mask_ratio;
  std::vector<double> fpr_targets;
  std::string scoring_path;
  std::string stage;
};

mdd::ExperimentConfig load_config(const CliOptions& opt) {
  mdd::ExperimentConfig cfg = mdd::load_experiment_config(opt.config_path);
  if (opt.seed) cfg.master_seed = static_cast<uint64_t>(*opt.seed);
  if (opt.mask_ratio) cfg.diffusion.mask_ratios = {*opt.mask_ratio};
  if (!opt.fpr_targets.empty()) cfg.detector.fpr_targets = opt.fpr_targets;
  if (!opt.scoring_path.empty()) cfg.scoring_path = opt.scoring_path;
  cfg.validate();
  return cfg;
}

void print_report(double ratio, const mdd::MetricsReport& r) {
  std::printf("[evaluate] mask ratio %g (scoring path: %s)\n", ratio,
              r.scoring_path.c_str());
  for (const auto& [fpr, dr] : r.dr_at_fpr)
    std::printf("  DR at FPR=%-5g : %6.2f %%  (realized FPR cal %.4f / eval %.4f)\n",
                fpr, dr, r.realized_fpr_calibration.at(fpr),
                r.realized_fpr_eval.at(fpr));
  std::printf("  EER raw       : tar-vs-nontar %.2f %%, tar-vs-adv %.2f %%\n",
              r.eer_clean, r.eer_attacked);
  std::printf("  EER purified  : tar-vs-nontar %.2f %%, tar-vs-adv %.2f %%\n",
              r.eer_clean_purified, r.eer_attacked_purified);
}

int run_stage(const std::string& stage, const CliOptions& opt) {
  mdd::ExperimentConfig cfg = load_config(opt);
  mdd::Pipeline pipe(cfg);
  if (stage == "prepare") {
    mdd::Manifest m = pipe.prepare();
    std::printf("[prepare] %zu utterances, %zu trials, work dir %s\n",
                m.utterances.size(), m.trials.size(), cfg.work_dir.c_str());
  } else if (stage == "train-asv") {
    std::string p = pipe.train_asv_stage();
    std::printf("[train-asv] checkpoint %s\n", p.c_str());
  } else if (stage == "train-diffusion") {
    for (double r : cfg.diffusion.mask_ratios) {
      std::string p = pipe.train_diffusion_stage(r);
      std::printf("[train-diffusion] mask ratio %g -> %s\n", r, p.c_str());
    }
  } else if (stage == "attack") {
    std::string p = pipe.attack_stage();
    std::printf("[attack] artifacts in %s\n", p.c_str());
  } else if (stage == "calibrate") {
    for (double r : cfg.diffusion.mask_ratios) {
      std::string p = pipe.calibrate_stage(r);
      std::printf("[calibrate] mask ratio %g -> %s\n", r, p.c_str());
    }
  } else if (stage == "evaluate") {
    for (double r : cfg.diffusion.mask_ratios)
      print_report(r, pipe.evaluate_stage(r));
  } else if (stage == "plot") {
    for (double r : cfg.diffusion.mask_ratios) {
      pipe.plot_stage(r);
      std::printf("[plot] figures in %s\n", pipe.eval_dir(r).string().c_str());
    }
  } else if (stage == "sweep-mask-ratio") {
    pipe.sweep_stage();
    std::printf("[sweep-mask-ratio] summary tables in %s\n",
                (pipe.work() / "eval" / "summary").string().c_str());
  } else {
    std::fprintf(stderr, "unknown stage: %s\n", stage.c_str());
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mask-diffusion purification and adversarial detection for "
               "speaker verification"};
  app.fallthrough();

  CliOptions opt;
  app.add_option("--config", opt.config_path, "experiment config (JSON)")
      ->required();
  app.add_option("--stage", opt.stage,
                 "stage to run (alternative to a subcommand)");
  app.add_option("--seed", opt.seed, "override the master seed");
  app.add_option("--mask-ratio", opt.mask_ratio,
                 "override the mask ratio list with a single value");
  app.add_option("--fpr-target", opt.fpr_targets,
                 "override detector FPR targets (repeatable)")
      ->allow_extra_args(false);
  app.add_option("--scoring-path", opt.scoring_path,
                 "feature | waveform scoring path")
      ->check(CLI::IsMember({"feature", "waveform", ""}));

  static const char* kStages[] = {"prepare",   "train-asv", "train-diffusion",
                                  "attack",    "calibrate", "evaluate",
                                  "plot",      "sweep-mask-ratio"};
  std::vector<CLI::App*> subs;
  for (const char* s : kStages)
    subs.push_back(app.add_subcommand(s, std::string("run the ") + s +
                                             " stage"));

  CLI11_PARSE(app, argc, argv);

  try {
    std::vector<std::string> to_run;
    for (size_t i = 0; i < subs.size(); ++i)
      if (subs[i]->parsed()) to_run.push_back(kStages[i]);
    if (!opt.stage.empty()) to_run.push_back(opt.stage);
    if (to_run.empty()) {
      std::fprintf(stderr,
                   "nothing to do: pass a subcommand or --stage NAME\n");
      return 2;
    }
    for (const auto& s : to_run) {
      int rc = run_stage(s, opt);
      if (rc != 0) return rc;
    }
  } catch (const mdd::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
  return 0;
}
