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


#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cbce/datakit.hpp"
#include "cbce/metrics.hpp"
#include "cbce/model.hpp"
#include "json.hpp"

namespace cbce {

// ---- optimizer ----

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  nlohmann::json to_json() const;
  static AdamConfig from_json(const nlohmann::json& j);
};

struct AdamState {
  std::vector<std::vector<double>> m, v;  // one moment buffer per parameter
  std::uint64_t t = 0;

  bool operator==(const AdamState&) const = default;
};

/// One Adam update from each parameter's accumulated gradient, with
/// decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
/// Moments are allocated on the first call.
void adam_step(const std::vector<Tensor>& params, AdamState& state, double lr, double weight_decay,
               const AdamConfig& cfg = {});

// base_lr * (1 - step/max_steps)^power for 0 <= step <= max_steps.
double poly_lr(std::uint64_t step, std::uint64_t max_steps, double base_lr, double power);

// ---- configuration ----

struct TrainConfig {
  std::uint64_t seed = 1;
  int epochs = 100;
  std::uint64_t max_steps = 0;  // 0: epochs * steps per epoch
  double base_lr = 2.5e-4;
  double weight_decay = 5e-4;
  double poly_power = 0.9;
  std::size_t batch_size = 1;
  std::size_t crop = 0;         // square training crop; 0 trains on full images
  std::size_t n_phrases = 4;
  bool freeze_backbone = false;
  AdamConfig adam;
  ModelConfig model;

  void validate() const;
  // The model section is kept separate in files; see ExperimentConfig.
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& train, const nlohmann::json& model);
};

/// A whole experiment file: {"synth": ..., "model": ..., "train": ...}.
struct ExperimentConfig {
  SynthConfig synth;
  TrainConfig train;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path);
};

// ---- checkpoints ----

/// Binary checkpoint: magic, format version, a JSON header (model and train
/// config, Adam constants, vocabulary, fused width), then every parameter as
/// (name, shape, dtype, little-endian float64 payload), the Adam moments,
/// the step counter and the data RNG state.
struct Checkpoint {
  static constexpr char kMagic[8] = {'C', 'B', 'C', 'E', 'C', 'K', 'P', 'T'};
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor>> params;
  AdamState adam;
  std::uint64_t step = 0;
  std::string rng_state;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

struct LoadedModel {
  CbceNet net;
  Vocabulary vocab;
  TrainConfig train;
  std::uint64_t step = 0;
};

Checkpoint make_checkpoint(const CbceNet& net, const Vocabulary& vocab, const TrainConfig& cfg,
                           const AdamState& adam, std::uint64_t step, const Rng& rng);
// Rebuilds the network from the header and copies every parameter in;
// a name or shape disagreement is a ValidationError.
LoadedModel load_model(const std::string& path);
LoadedModel load_model(const Checkpoint& ckpt);

// ---- training ----

struct TrainResult {
  std::vector<double> losses;  // per optimizer step, averaged over the batch
  std::uint64_t steps = 0;
  std::string checkpoint;
};

struct TrainOptions {
  // Called after every optimizer step with (step, lr, loss).
  std::function<void(std::uint64_t, double, double)> on_step;
};

/// Trains on a manifest and writes train_log.jsonl (appended) and
/// checkpoint.bin (rewritten every epoch) under out_dir. The vocabulary is
/// vocab.txt beside the manifest when present, else built from its phrases.
/// A non-finite loss throws NumericError naming the step, after logging it.
TrainResult train(const TrainConfig& cfg, const std::string& manifest, const std::string& out_dir,
                  const TrainOptions& options = {});

// Trailing moving average with the given window (shorter at the start).
std::vector<double> smoothed(const std::vector<double>& values, std::size_t window);

// ---- evaluation and inference ----

// Encodes phrases with the vocabulary; counts unknown tokens into *unknown.
PhraseSet encode_phrases(const Vocabulary& vocab, const std::vector<std::string>& phrases,
                         std::size_t* unknown = nullptr);

// The first n phrases of a record (all of them when n is 0 or too large).
std::vector<std::string> leading_phrases(const std::vector<std::string>& phrases, std::size_t n);

struct EvalOptions {
  MetricOptions metrics;
  std::size_t n_phrases = 0;  // 0: the checkpoint's training n_phrases
};

// Sigmoid probability map [H,W] at the image resolution.
Tensor predict(const LoadedModel& model, const Tensor& image, const std::vector<std::string>& phrases,
               std::size_t* unknown = nullptr);

MetricReport evaluate(const LoadedModel& model, const std::string& manifest, const EvalOptions& options = {});

struct InferResult {
  Tensor probs;  // [H,W]
  Tensor mask;   // probs >= threshold
  std::size_t unknown_tokens = 0;
};

InferResult infer(const LoadedModel& model, const Tensor& image, const std::vector<std::string>& phrases,
                  double threshold = kDefaultThreshold);

// Raw little-endian float32, row-major, no header.
void write_probability_map(const std::string& path, const Tensor& probs);

}  // namespace cbce
