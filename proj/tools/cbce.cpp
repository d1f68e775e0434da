// Copyright 2026 The CBCE Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


// Command-line entry point: synth, train, eval, infer, gradcheck.
// Exit codes: 0 success, 1 validation or usage error, 2 numeric failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cbce/datakit.hpp"
#include "cbce/gradcheck_suite.hpp"
#include "cbce/metrics.hpp"
#include "cbce/trainer.hpp"

namespace fs = std::filesystem;
using namespace cbce;

namespace {

// A data argument may name a manifest or a dataset directory.
std::string resolve_manifest(const std::string& data, const char* default_name) {
  if (fs::is_directory(data)) return (fs::path(data) / default_name).string();
  return data;
}

ExperimentConfig load_config(const std::string& path) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : ExperimentConfig::load(path);
  if (const char* dtype = std::getenv("CBCE_DTYPE"); dtype && *dtype) cfg.train.model.dtype = parse_dtype(dtype);
  return cfg;
}

void print_values(const char* label, const MetricValues& v) {
  std::printf("%-12s IoU %.4f  Fbeta %.4f  Ephi %.4f  CC %.4f  MAE %.4f\n", label, v.iou, v.fbeta, v.ephi, v.cc,
              v.mae);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Phrase-conditioned affordance segmentation toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate the synthetic affordance dataset");
  std::string synth_config, synth_out;
  std::optional<std::size_t> synth_samples, synth_phrases;
  std::optional<std::uint64_t> synth_seed;
  bool synth_pairs = false;
  synth->add_option("--config", synth_config, "Experiment config (JSON)");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--samples", synth_samples, "Override the image count");
  synth->add_option("--n-phrases", synth_phrases, "Override phrases per record");
  synth->add_option("--seed", synth_seed, "Override the generator seed");
  synth->add_flag("--pairs", synth_pairs, "Two-object images, one record per object");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model on a manifest");
  std::string train_config, train_data, train_out;
  std::optional<std::uint64_t> train_steps, train_seed;
  std::optional<std::size_t> train_phrases;
  std::optional<int> train_cycles;
  bool quiet = false;
  train_cmd->add_option("--config", train_config, "Experiment config (JSON)");
  train_cmd->add_option("--data", train_data, "Manifest, or dataset directory (uses train.jsonl)")->required();
  train_cmd->add_option("--out", train_out, "Run directory for the log and checkpoint")->required();
  train_cmd->add_option("--steps", train_steps, "Override max_steps");
  train_cmd->add_option("--seed", train_seed, "Override the training seed");
  train_cmd->add_option("--n-phrases", train_phrases, "Override phrases per training step");
  train_cmd->add_option("--cycles", train_cycles, "Override CIM cycles");
  train_cmd->add_flag("--quiet", quiet, "Suppress progress output");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  std::string eval_ckpt, eval_data, eval_report;
  EvalOptions eval_opts;
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_data, "Manifest, or dataset directory (uses test.jsonl)")->required();
  eval_cmd->add_option("--threshold", eval_opts.metrics.threshold, "Binarization threshold")->capture_default_str();
  eval_cmd->add_option("--beta-sq", eval_opts.metrics.beta_sq, "F-measure beta squared")->capture_default_str();
  eval_cmd->add_option("--threads", eval_opts.metrics.threads, "Metric threads (0: all cores)");
  eval_cmd->add_option("--n-phrases", eval_opts.n_phrases, "Leading phrases per record (0: training value)");
  eval_cmd->add_option("--report", eval_report, "Report path prefix; writes PREFIX.csv and PREFIX.json");

  // infer
  auto* infer_cmd = app.add_subcommand("infer", "Segment one image for a phrase set");
  std::string infer_ckpt, infer_image, infer_out = "mask", infer_gt;
  std::vector<std::string> infer_phrases;
  double infer_threshold = kDefaultThreshold;
  infer_cmd->add_option("--ckpt", infer_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--image", infer_image, "Input PPM image")->required()->check(CLI::ExistingFile);
  infer_cmd->add_option("--phrase", infer_phrases, "Descriptive phrase (repeatable)")->required();
  infer_cmd->add_option("--out", infer_out, "Output prefix; writes PREFIX.pgm and PREFIX.f32")->capture_default_str();
  infer_cmd->add_option("--threshold", infer_threshold, "Binarization threshold")->capture_default_str();
  infer_cmd->add_option("--gt", infer_gt, "Optional ground-truth PGM for overlap statistics");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "Central-difference gradient checks");
  std::string grad_op;
  std::uint64_t grad_seed = 0;
  std::size_t grad_count = 20;
  grad_cmd->add_option("--op", grad_op, "Single case name (default: all)");
  grad_cmd->add_option("--seed", grad_seed, "First seed")->capture_default_str();
  grad_cmd->add_option("--seeds", grad_count, "Number of seeds")->capture_default_str();
  bool grad_list = false;
  grad_cmd->add_flag("--list", grad_list, "List case names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) {
      ExperimentConfig cfg = load_config(synth_config);
      if (synth_samples) cfg.synth.samples = *synth_samples;
      if (synth_phrases) cfg.synth.n_phrases = *synth_phrases;
      if (synth_seed) cfg.synth.seed = *synth_seed;
      if (synth_pairs) cfg.synth.pairs = true;
      const SynthSummary s = synth_generate(cfg.synth, PhraseBank::toy(), synth_out);
      std::printf("wrote %zu records (%zu train, %zu test) to %s\n", s.records, s.train, s.test, synth_out.c_str());
    } else if (*train_cmd) {
      ExperimentConfig cfg = load_config(train_config);
      if (train_steps) cfg.train.max_steps = *train_steps;
      if (train_seed) cfg.train.seed = *train_seed;
      if (train_phrases) cfg.train.n_phrases = *train_phrases;
      if (train_cycles) cfg.train.model.cycles = *train_cycles;
      TrainOptions opts;
      if (!quiet) {
        opts.on_step = [](std::uint64_t step, double lr, double loss) {
          if (step % 100 == 0) std::printf("step %6llu  lr %.3e  loss %.3f\n", static_cast<unsigned long long>(step), lr, loss);
          std::fflush(stdout);
        };
      }
      const TrainResult r = train(cfg.train, resolve_manifest(train_data, "train.jsonl"), train_out, opts);
      std::printf("trained %llu steps; checkpoint %s\n", static_cast<unsigned long long>(r.steps),
                  r.checkpoint.c_str());
    } else if (*eval_cmd) {
      const LoadedModel model = load_model(eval_ckpt);
      const MetricReport report = evaluate(model, resolve_manifest(eval_data, "test.jsonl"), eval_opts);
      for (const auto& [label, values] : report.per_category) print_values(label.c_str(), values);
      print_values("overall", report.overall);
      if (report.cc_undefined) std::printf("CC undefined on %zu constant maps (scored 0)\n", report.cc_undefined);
      if (!eval_report.empty()) {
        write_report_csv(report, eval_report + ".csv");
        write_report_json(report, eval_report + ".json");
      }
    } else if (*infer_cmd) {
      const LoadedModel model = load_model(infer_ckpt);
      const InferResult r = infer(model, read_ppm(infer_image), infer_phrases, infer_threshold);
      if (r.unknown_tokens) {
        std::fprintf(stderr, "warning: %zu token(s) not in the vocabulary were mapped to <unk>\n", r.unknown_tokens);
      }
      write_pgm(infer_out + ".pgm", r.mask);
      write_probability_map(infer_out + ".f32", r.probs);
      double fg = 0, mean = 0;
      for (std::size_t i = 0; i < r.probs.numel(); ++i) {
        fg += r.mask[i];
        mean += r.probs[i];
      }
      const double n = static_cast<double>(r.probs.numel());
      std::printf("%zux%zu  foreground %.4f  mean probability %.4f\n", r.probs.dim(1), r.probs.dim(0), fg / n,
                  mean / n);
      if (!infer_gt.empty()) {
        const Tensor gt = read_pgm(infer_gt);
        std::printf("IoU %.4f  Fbeta %.4f  MAE %.4f\n", iou(r.probs, gt, infer_threshold),
                    f_measure(r.probs, gt, infer_threshold), mae(r.probs, gt));
      }
    } else if (*grad_cmd) {
      if (grad_list) {
        for (const auto& c : gradient_cases()) std::printf("%s\n", c.name.c_str());
        return 0;
      }
      bool ok = true;
      for (const auto& s : run_gradient_suite(grad_op, grad_seed, grad_count)) {
        const bool pass = s.passed == s.seeds;
        ok &= pass;
        std::printf("%-26s %s  %zu/%zu seeds  worst rel %.2e (seed %llu)\n", s.name.c_str(), pass ? "PASS" : "FAIL",
                    s.passed, s.seeds, s.worst_rel_error, static_cast<unsigned long long>(s.worst_seed));
      }
      return ok ? 0 : 2;
    }
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
