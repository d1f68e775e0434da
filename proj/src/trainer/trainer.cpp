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


#include "cbce/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "cbce/graph.hpp"
#include "cbce/ops.hpp"

namespace fs = std::filesystem;

namespace cbce {
namespace {

template <typename T>
T field(const nlohmann::json& j, const char* key, T fallback, const char* section) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string(section) + " config: '" + key + "' has the wrong type");
  }
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const char* section) {
  if (!j.is_object()) throw ValidationError(std::string(section) + " config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ValidationError(std::string(section) + " config: unknown key '" + key + "'");
  }
}

// ---- little-endian binary I/O ----

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 8);
  }
  void u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 4);
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void doubles(std::span<const double> v) {
    u64(v.size());
    for (double d : v) f64(d);
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw ValidationError(path_ + ": truncated checkpoint");
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t count(std::uint64_t limit) {
    const std::uint64_t n = u64();
    if (n > limit) throw ValidationError(path_ + ": corrupt checkpoint (length " + std::to_string(n) + ")");
    return static_cast<std::size_t>(n);
  }
  std::string str() {
    std::string s(count(1ULL << 30), '\0');
    bytes(s.data(), s.size());
    return s;
  }
  std::vector<double> doubles() {
    std::vector<double> v(count(1ULL << 32));
    for (double& d : v) d = f64();
    return v;
  }

 private:
  std::istream& in_;
  std::string path_;
};

std::vector<std::string> choose_phrases(const std::vector<std::string>& phrases, std::size_t n, Rng& rng) {
  if (phrases.size() <= n) return phrases;
  std::vector<std::string> pool = phrases;
  rng.shuffle(pool);
  pool.resize(n);
  return pool;
}

bool is_backbone(const std::string& name) {
  const std::string prefix = std::string(CbceNet::kBackbonePrefix) + ".";
  return name.compare(0, prefix.size(), prefix) == 0;
}

void append_line(const fs::path& path, const nlohmann::json& line) {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw ValidationError("cannot append to " + path.string());
  out << line.dump() << '\n';
}

Vocabulary dataset_vocabulary(const std::string& manifest, const std::vector<ManifestRecord>& records) {
  const fs::path vocab_path = fs::path(manifest_dir(manifest)) / "vocab.txt";
  if (fs::exists(vocab_path)) return Vocabulary::load(vocab_path.string());
  std::vector<std::string> phrases;
  for (const auto& r : records) phrases.insert(phrases.end(), r.phrases.begin(), r.phrases.end());
  return Vocabulary::build(phrases);
}

}  // namespace

// ---- optimizer ----

nlohmann::json AdamConfig::to_json() const { return {{"beta1", beta1}, {"beta2", beta2}, {"eps", eps}}; }

AdamConfig AdamConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j, {"beta1", "beta2", "eps"}, "adam");
  AdamConfig c;
  c.beta1 = field(j, "beta1", c.beta1, "adam");
  c.beta2 = field(j, "beta2", c.beta2, "adam");
  c.eps = field(j, "eps", c.eps, "adam");
  if (!(c.beta1 >= 0 && c.beta1 < 1 && c.beta2 >= 0 && c.beta2 < 1 && c.eps > 0)) {
    throw ValidationError("adam config: betas must be in [0,1) and eps positive");
  }
  return c;
}

void adam_step(const std::vector<Tensor>& params, AdamState& state, double lr, double weight_decay,
               const AdamConfig& cfg) {
  if (state.m.empty() && state.t == 0) {
    for (const Tensor& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state holds " + std::to_string(state.m.size()) + " tensors, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel()) {
      throw ShapeError("adam_step: moment size mismatch for parameter " + std::to_string(i) + " of shape " +
                       shape_string(params[i].shape()));
    }
    if (!params[i].has_grad()) throw ValidationError("adam_step: parameter " + std::to_string(i) + " has no gradient");
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    auto values = p.mutable_data();
    const auto grad = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grad[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
      const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.eps);
      double next = values[k] - lr * (update + weight_decay * values[k]);
      if (p.dtype() == Dtype::kFloat32) next = static_cast<float>(next);
      values[k] = next;
    }
    if (!all_finite(values)) throw NumericError("adam_step: non-finite parameter " + std::to_string(i));
  }
}

double poly_lr(std::uint64_t step, std::uint64_t max_steps, double base_lr, double power) {
  if (max_steps == 0 || step > max_steps) {
    throw ValidationError("poly_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(max_steps) + "]");
  }
  return base_lr * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(max_steps), power);
}

// ---- configuration ----

void TrainConfig::validate() const {
  model.validate();
  if (epochs <= 0) throw ValidationError("train config: epochs must be positive");
  if (!(base_lr > 0)) throw ValidationError("train config: base_lr must be positive");
  if (!(weight_decay >= 0)) throw ValidationError("train config: weight_decay must be non-negative");
  if (!(poly_power >= 0)) throw ValidationError("train config: poly_power must be non-negative");
  if (batch_size == 0) throw ValidationError("train config: batch_size must be positive");
  if (n_phrases == 0) throw ValidationError("train config: n_phrases must be positive");
  if (crop != 0 && crop < 32) throw ValidationError("train config: crop must be 0 or at least 32");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"seed", seed},
          {"epochs", epochs},
          {"max_steps", max_steps},
          {"base_lr", base_lr},
          {"weight_decay", weight_decay},
          {"poly_power", poly_power},
          {"batch_size", batch_size},
          {"crop", crop},
          {"n_phrases", n_phrases},
          {"freeze_backbone", freeze_backbone},
          {"adam", adam.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& train, const nlohmann::json& model) {
  reject_unknown(train,
                 {"seed", "epochs", "max_steps", "base_lr", "weight_decay", "poly_power", "batch_size", "crop",
                  "n_phrases", "freeze_backbone", "adam"},
                 "train");
  TrainConfig c;
  c.seed = field(train, "seed", c.seed, "train");
  c.epochs = field(train, "epochs", c.epochs, "train");
  c.max_steps = field(train, "max_steps", c.max_steps, "train");
  c.base_lr = field(train, "base_lr", c.base_lr, "train");
  c.weight_decay = field(train, "weight_decay", c.weight_decay, "train");
  c.poly_power = field(train, "poly_power", c.poly_power, "train");
  c.batch_size = field(train, "batch_size", c.batch_size, "train");
  c.crop = field(train, "crop", c.crop, "train");
  c.n_phrases = field(train, "n_phrases", c.n_phrases, "train");
  c.freeze_backbone = field(train, "freeze_backbone", c.freeze_backbone, "train");
  if (train.contains("adam")) c.adam = AdamConfig::from_json(train.at("adam"));
  c.model = ModelConfig::from_json(model.is_null() ? nlohmann::json::object() : model);
  c.validate();
  return c;
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"synth", synth.to_json()}, {"model", train.model.to_json()}, {"train", train.to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j, {"synth", "model", "train"}, "experiment");
  ExperimentConfig c;
  if (j.contains("synth")) c.synth = SynthConfig::from_json(j.at("synth"));
  c.train = TrainConfig::from_json(j.value("train", nlohmann::json::object()),
                                   j.value("model", nlohmann::json::object()));
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path);
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path + ": malformed JSON (" + e.what() + ")");
  }
}

// ---- checkpoints ----

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write checkpoint " + path);
    Writer w(out);
    w.bytes(Checkpoint::kMagic, sizeof Checkpoint::kMagic);
    w.u32(Checkpoint::kVersion);
    w.str(ckpt.header.dump());
    w.u64(ckpt.params.size());
    for (const auto& [name, t] : ckpt.params) {
      w.str(name);
      w.u32(static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) w.u64(d);
      w.str(std::string(dtype_name(t.dtype())));
      w.doubles(t.data());
    }
    w.u64(ckpt.adam.t);
    w.u64(ckpt.adam.m.size());
    for (std::size_t i = 0; i < ckpt.adam.m.size(); ++i) {
      w.doubles(ckpt.adam.m[i]);
      w.doubles(ckpt.adam.v[i]);
    }
    w.u64(ckpt.step);
    w.str(ckpt.rng_state);
    if (!out) throw ValidationError("failed writing checkpoint " + path);
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path);
  Reader r(in, path);
  char magic[sizeof Checkpoint::kMagic];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, Checkpoint::kMagic, sizeof magic) != 0) throw ValidationError(path + ": not a checkpoint");
  const std::uint32_t version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw ValidationError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  try {
    ckpt.header = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::parse_error&) {
    throw ValidationError(path + ": corrupt checkpoint header");
  }
  const std::size_t n = r.count(1 << 20);
  for (std::size_t i = 0; i < n; ++i) {
    std::string name = r.str();
    Shape shape(r.u32());
    for (auto& d : shape) d = r.count(1ULL << 32);
    const Dtype dtype = parse_dtype(r.str());
    std::vector<double> values = r.doubles();
    if (values.size() != shape_numel(shape)) throw ValidationError(path + ": payload size mismatch for " + name);
    ckpt.params.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values), dtype));
  }
  ckpt.adam.t = r.u64();
  const std::size_t moments = r.count(1 << 20);
  for (std::size_t i = 0; i < moments; ++i) {
    ckpt.adam.m.push_back(r.doubles());
    ckpt.adam.v.push_back(r.doubles());
  }
  ckpt.step = r.u64();
  ckpt.rng_state = r.str();
  return ckpt;
}

Checkpoint make_checkpoint(const CbceNet& net, const Vocabulary& vocab, const TrainConfig& cfg,
                           const AdamState& adam, std::uint64_t step, const Rng& rng) {
  Checkpoint ckpt;
  ckpt.header = {{"model", net.config().to_json()},
                 {"train", cfg.to_json()},
                 {"adam", cfg.adam.to_json()},
                 {"vocab", vocab.tokens()},
                 {"fused_width", net.config().fused_width()}};
  for (const auto& [name, t] : net.params().entries()) ckpt.params.emplace_back(name, t.clone());
  ckpt.adam = adam;
  ckpt.step = step;
  ckpt.rng_state = rng.state();
  return ckpt;
}

LoadedModel load_model(const Checkpoint& ckpt) {
  const auto& h = ckpt.header;
  for (const char* key : {"model", "train", "vocab"}) {
    if (!h.contains(key)) throw ValidationError(std::string("checkpoint header lacks '") + key + "'");
  }
  TrainConfig cfg = TrainConfig::from_json(h.at("train"), h.at("model"));
  Vocabulary vocab(h.at("vocab").get<std::vector<std::string>>());
  if (vocab.size() != cfg.model.vocab_size) {
    throw ValidationError("checkpoint vocabulary has " + std::to_string(vocab.size()) + " tokens, config expects " +
                          std::to_string(cfg.model.vocab_size));
  }
  LoadedModel model{CbceNet(cfg.model, cfg.seed), std::move(vocab), cfg, ckpt.step};
  ParamStore& store = model.net.params();
  if (store.entries().size() != ckpt.params.size()) {
    throw ValidationError("checkpoint has " + std::to_string(ckpt.params.size()) + " parameters, model expects " +
                          std::to_string(store.entries().size()));
  }
  for (const auto& [name, saved] : ckpt.params) {
    if (!store.contains(name)) throw ValidationError("checkpoint parameter '" + name + "' is not in the model");
    Tensor target = store.get(name);
    if (target.shape() != saved.shape()) {
      throw ValidationError("checkpoint/config dimension mismatch for '" + name + "': " +
                            shape_string(saved.shape()) + " vs " + shape_string(target.shape()));
    }
    std::copy(saved.data().begin(), saved.data().end(), target.mutable_data().begin());
  }
  return model;
}

LoadedModel load_model(const std::string& path) { return load_model(load_checkpoint(path)); }

// ---- training ----

std::vector<double> smoothed(const std::vector<double>& values, std::size_t window) {
  if (window == 0) throw ValidationError("smoothed: window must be positive");
  std::vector<double> out(values.size());
  double running = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    running += values[i];
    if (i >= window) running -= values[i - window];
    out[i] = running / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

TrainResult train(const TrainConfig& cfg, const std::string& manifest, const std::string& out_dir,
                  const TrainOptions& options) {
  cfg.validate();
  const auto records = load_manifest(manifest);
  if (records.empty()) throw ValidationError("train: manifest " + manifest + " has no records");
  const fs::path data_dir = manifest_dir(manifest);
  const Vocabulary vocab = dataset_vocabulary(manifest, records);

  std::vector<Tensor> images, masks;
  for (const auto& r : records) {
    images.push_back(read_ppm((data_dir / r.image).string()));
    masks.push_back(read_pgm((data_dir / r.mask).string()));
  }

  TrainConfig run = cfg;
  run.model.vocab_size = vocab.size();
  CbceNet net(run.model, run.seed);
  std::vector<Tensor> trainable;
  for (const auto& [name, t] : net.params().entries()) {
    if (!(run.freeze_backbone && is_backbone(name))) trainable.push_back(t);
  }

  // Model initialization uses the seed directly; data order, crops and
  // phrase subsets use a derived stream.
  Rng rng = Rng::derive(run.seed, 1);
  const std::uint64_t per_epoch = (records.size() + run.batch_size - 1) / run.batch_size;
  std::uint64_t total = per_epoch * static_cast<std::uint64_t>(run.epochs);
  if (run.max_steps != 0) total = std::min(total, run.max_steps);

  fs::create_directories(out_dir);
  const fs::path log_path = fs::path(out_dir) / "train_log.jsonl";
  const fs::path ckpt_path = fs::path(out_dir) / "checkpoint.bin";

  TrainResult result;
  result.checkpoint = ckpt_path.string();
  AdamState adam;
  std::uint64_t step = 0;
  for (int epoch = 1; epoch <= run.epochs && step < total; ++epoch) {
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (std::uint64_t b = 0; b < per_epoch && step < total; ++b) {
      net.params().zero_grad();
      double loss_value = 0;
      const std::size_t first = b * run.batch_size;
      const std::size_t last = std::min(order.size(), first + run.batch_size);
      try {
        for (std::size_t i = first; i < last; ++i) {
          const std::size_t idx = order[i];
          auto [image, mask] = run.crop ? augment(images[idx], masks[idx], run.crop, run.crop, rng)
                                        : std::pair<Tensor, Tensor>{images[idx], masks[idx]};
          const auto phrases = choose_phrases(records[idx].phrases, run.n_phrases, rng);
          Graph graph;
          GraphScope scope(graph);
          Tensor loss = bce_loss(net.forward(image, encode_phrases(vocab, phrases)), mask);
          loss = ops::scale(loss, 1.0 / static_cast<double>(last - first));
          loss_value += loss.item();
          graph.backward(loss);
        }
        if (!std::isfinite(loss_value)) throw NumericError("loss is " + std::to_string(loss_value));
      } catch (const NumericError& e) {
        append_line(log_path, {{"step", step + 1}, {"epoch", epoch}, {"error", e.what()}});
        throw NumericError("training diverged at step " + std::to_string(step + 1) + ": " + e.what());
      }
      const double lr = poly_lr(step, total, run.base_lr, run.poly_power);
      adam_step(trainable, adam, lr, run.weight_decay, run.adam);
      ++step;
      result.losses.push_back(loss_value);
      append_line(log_path, {{"step", step}, {"epoch", epoch}, {"lr", lr}, {"loss", loss_value}});
      if (options.on_step) options.on_step(step, lr, loss_value);
    }
    save_checkpoint(ckpt_path.string(), make_checkpoint(net, vocab, run, adam, step, rng));
  }
  result.steps = step;
  return result;
}

// ---- evaluation and inference ----

PhraseSet encode_phrases(const Vocabulary& vocab, const std::vector<std::string>& phrases, std::size_t* unknown) {
  if (phrases.empty()) throw ValidationError("at least one phrase is required");
  std::vector<std::vector<int>> ids;
  for (const auto& p : phrases) {
    ids.push_back(vocab.encode(p, unknown));
    if (ids.back().empty()) throw ValidationError("phrase '" + p + "' has no tokens");
  }
  return PhraseSet::from_tokens(ids, vocab.size());
}

std::vector<std::string> leading_phrases(const std::vector<std::string>& phrases, std::size_t n) {
  if (n == 0 || n >= phrases.size()) return phrases;
  return {phrases.begin(), phrases.begin() + static_cast<long>(n)};
}

Tensor predict(const LoadedModel& model, const Tensor& image, const std::vector<std::string>& phrases,
               std::size_t* unknown) {
  return model.net.forward(image, encode_phrases(model.vocab, phrases, unknown)).probs;
}

MetricReport evaluate(const LoadedModel& model, const std::string& manifest, const EvalOptions& options) {
  const auto records = load_manifest(manifest);
  if (records.empty()) throw ValidationError("evaluate: manifest " + manifest + " has no records");
  const fs::path dir = manifest_dir(manifest);
  const std::size_t n = options.n_phrases ? options.n_phrases : model.train.n_phrases;
  std::map<std::string, Tensor> predictions;
  std::vector<EvalItem> items;
  for (const auto& r : records) {
    const Tensor image = read_ppm((dir / r.image).string());
    predictions[r.id] = predict(model, image, leading_phrases(r.phrases, n));
    items.push_back({r.id, r.affordance, read_pgm((dir / r.mask).string())});
  }
  return evaluate_dataset(predictions, items, options.metrics);
}

InferResult infer(const LoadedModel& model, const Tensor& image, const std::vector<std::string>& phrases,
                  double threshold) {
  InferResult out;
  out.probs = predict(model, image, phrases, &out.unknown_tokens);
  out.mask = Tensor::zeros(out.probs.shape());
  auto m = out.mask.mutable_data();
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = out.probs[i] >= threshold ? 1.0 : 0.0;
  return out;
}

void write_probability_map(const std::string& path, const Tensor& probs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path);
  for (double v : probs.data()) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
  }
}

}  // namespace cbce
