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


#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cbce/graph.hpp"
#include "cbce/ops.hpp"
#include "cbce/trainer.hpp"
#include "doctest.h"

using namespace cbce;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("cbce_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.backbone_channels = {4, 4, 8, 8, 8};
  m.c_i = 8;
  m.c_l = 8;
  m.c_f = 8;
  m.c_a = 8;
  m.rank = 4;
  m.embed_dim = 8;
  m.vocab_size = 40;
  return m;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.model = tiny_model();
  t.epochs = 1;
  t.base_lr = 1e-3;
  t.crop = 40;
  return t;
}

// A small on-disk dataset shared by the training tests.
const fs::path& tiny_dataset() {
  static const fs::path dir = [] {
    fs::path d = scratch("data");
    SynthConfig cfg;
    cfg.image_size = 48;
    cfg.samples = 8;
    cfg.max_distractors = 1;
    cfg.test_fraction = 0.25;
    synth_generate(cfg, PhraseBank::toy(), d.string());
    return d;
  }();
  return dir;
}

std::string train_manifest() { return (tiny_dataset() / "train.jsonl").string(); }

PhraseSet some_phrases(std::size_t vocab) {
  return PhraseSet::from_tokens({{2, 3, 4}, {5}, {6, 7}}, vocab);
}

}  // namespace

TEST_CASE("poly_lr anchors and monotonicity") {
  CHECK(poly_lr(0, 100, 2.5e-4, 0.9) == 2.5e-4);
  CHECK(poly_lr(100, 100, 2.5e-4, 0.9) == 0.0);
  CHECK(poly_lr(50, 100, 2.5e-4, 0.9) == doctest::Approx(2.5e-4 * std::exp(0.9 * std::log(0.5))).epsilon(1e-14));
  double prev = poly_lr(0, 1000, 1.0, 0.9);
  for (std::uint64_t s = 1; s <= 1000; ++s) {
    const double lr = poly_lr(s, 1000, 1.0, 0.9);
    CHECK(lr < prev);
    prev = lr;
  }
  CHECK_THROWS_AS(poly_lr(101, 100, 1.0, 0.9), ValidationError);
  CHECK_THROWS_AS(poly_lr(0, 0, 1.0, 0.9), ValidationError);
}

TEST_CASE("adam: zero gradient and zero decay leave parameters unchanged") {
  Tensor p = Tensor({3}, {0.5, -1.0, 2.0}).set_requires_grad(true);
  p.ensure_grad();
  AdamState state;
  for (int i = 0; i < 5; ++i) adam_step({p}, state, 0.1, 0.0);
  CHECK(std::vector<double>(p.data().begin(), p.data().end()) == std::vector<double>{0.5, -1.0, 2.0});
}

TEST_CASE("adam: first step moves each weight by lr times the gradient sign") {
  Tensor p = Tensor({4}, {0.0, 1.0, -1.0, 3.0}).set_requires_grad(true);
  const std::vector<double> g{0.3, -2.0, 1e-3, -7.5};
  std::copy(g.begin(), g.end(), p.ensure_grad().begin());
  AdamState state;
  const double lr = 0.01;
  const std::vector<double> before(p.data().begin(), p.data().end());
  adam_step({p}, state, lr, 0.0);
  // m_hat = g and v_hat = g^2 after bias correction at t = 1.
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(p[i] - before[i] == doctest::Approx(-lr * g[i] / (std::abs(g[i]) + 1e-8)).epsilon(1e-12));
  }
  CHECK(state.t == 1);
}

TEST_CASE("adam: a constant gradient gives steps of lr times its sign") {
  Tensor p = Tensor({2}, {0.0, 0.0}).set_requires_grad(true);
  AdamState state;
  const double lr = 1e-3;
  double last = 0.0;
  for (int i = 0; i < 1000; ++i) {
    auto g = p.ensure_grad();
    g[0] = 0.7;
    g[1] = -4.0;
    last = p[0];
    adam_step({p}, state, lr, 0.0);
  }
  CHECK(std::abs((p[0] - last) + lr) <= 1e-3 * lr);
  CHECK(p[0] == doctest::Approx(-1000 * lr).epsilon(1e-3));
  CHECK(p[1] == doctest::Approx(1000 * lr).epsilon(1e-3));
}

TEST_CASE("adam: weight decay is decoupled from the moments") {
  Tensor p = Tensor({2}, {2.0, -4.0}).set_requires_grad(true);
  p.ensure_grad();
  AdamState state;
  adam_step({p}, state, 0.1, 0.5);
  CHECK(p[0] == doctest::Approx(2.0 * (1 - 0.05)).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(-4.0 * (1 - 0.05)).epsilon(1e-15));
  for (const auto& m : state.m)
    for (double v : m) CHECK(v == 0.0);
}

TEST_CASE("adam: errors and float32 rounding") {
  Tensor a = Tensor({2}, {1.0, 2.0}).set_requires_grad(true);
  Tensor b = Tensor({3}, {1.0, 2.0, 3.0}).set_requires_grad(true);
  a.ensure_grad();
  b.ensure_grad();
  AdamState state;
  adam_step({a}, state, 0.1, 0.0);
  CHECK_THROWS_AS(adam_step({b}, state, 0.1, 0.0), ShapeError);
  CHECK_THROWS_AS(adam_step({a, b}, state, 0.1, 0.0), ShapeError);
  AdamState fresh;
  Tensor no_grad = Tensor({1}, {1.0}).set_requires_grad(true);
  CHECK_THROWS_AS(adam_step({no_grad}, fresh, 0.1, 0.0), ValidationError);

  Tensor f = Tensor({1}, {1.0}, Dtype::kFloat32).set_requires_grad(true);
  f.ensure_grad()[0] = 0.123;
  AdamState fs32;
  adam_step({f}, fs32, 1.0 / 3.0, 0.0);
  CHECK(f[0] == static_cast<double>(static_cast<float>(f[0])));
}

TEST_CASE("full network shapes at crop and evaluation sizes") {
  ModelConfig cfg;
  cfg.vocab_size = 30;
  CbceNet net(cfg, 3);
  CHECK(net.params().total_size() > 100000);
  Rng rng(1);
  for (std::size_t size : {80, 90}) {
    ForwardTrace trace;
    const MaskPrediction p = net.forward(random_uniform({size, size, 3}, 0, 1, rng), some_phrases(30), &trace);
    CHECK(p.logits.shape() == Shape{size, size});
    CHECK(p.probs.shape() == Shape{size, size});
    const std::size_t grid = (size + 7) / 8;
    CHECK(trace.aspp_in.shape() == Shape{grid, grid, 3 * cfg.fused_width()});
    CHECK(trace.aspp_out.shape() == Shape{grid, grid, cfg.c_a});
    for (double v : p.probs.data()) CHECK((v > 0.0 && v < 1.0));
  }
}

TEST_CASE("every parameter receives a nonzero gradient") {
  ModelConfig cfg;
  cfg.vocab_size = 30;
  CbceNet net(cfg, 5);
  Rng rng(2);
  Tensor gt = Tensor::zeros({80, 80});
  for (std::size_t r = 20; r < 50; ++r)
    for (std::size_t c = 30; c < 60; ++c) gt.mutable_data()[r * 80 + c] = 1.0;
  Graph graph;
  {
    GraphScope scope(graph);
    Tensor loss = bce_loss(net.forward(random_uniform({80, 80, 3}, 0, 1, rng), some_phrases(30)), gt);
    graph.backward(loss);
  }
  for (const auto& [name, t] : net.params().entries()) {
    CAPTURE(name);
    REQUIRE(t.has_grad());
    double norm = 0;
    for (double g : t.grad()) norm += g * g;
    // Embedding rows of unused tokens stay zero; the table as a whole does not.
    CHECK(norm > 0.0);
  }
}

TEST_CASE("fitting one sample reduces the loss for every seed") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CbceNet net(tiny_model(), seed);
    Rng rng(seed + 100);
    Tensor image = random_uniform({40, 40, 3}, 0, 1, rng);
    Tensor gt = Tensor::zeros({40, 40});
    for (std::size_t r = 8; r < 24; ++r)
      for (std::size_t c = 12; c < 30; ++c) gt.mutable_data()[r * 40 + c] = 1.0;
    std::vector<Tensor> params;
    for (const auto& [name, t] : net.params().entries()) params.push_back(t);
    AdamState state;
    double first = 0, last = 0;
    for (int step = 0; step < 30; ++step) {
      net.params().zero_grad();
      Graph graph;
      GraphScope scope(graph);
      Tensor loss = bce_loss(net.forward(image, some_phrases(40)), gt);
      graph.backward(loss);
      adam_step(params, state, 5e-3, 0.0);
      (step == 0 ? first : last) = loss.item();
    }
    CAPTURE(seed);
    CHECK(last < 0.7 * first);
  }
}

TEST_CASE("train and model configs round trip through JSON") {
  TrainConfig t = tiny_train();
  t.freeze_backbone = true;
  t.adam.beta2 = 0.99;
  const TrainConfig back = TrainConfig::from_json(t.to_json(), t.model.to_json());
  CHECK(back.to_json() == t.to_json());
  CHECK(back.model.to_json() == t.model.to_json());
  CHECK_THROWS_AS(TrainConfig::from_json({{"epoch", 3}}, {}), ValidationError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"epochs", 0}}, {}), ValidationError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"adam", {{"beta1", 1.0}}}}, {}), ValidationError);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"optim", {}}}), ValidationError);

  ExperimentConfig e;
  e.train = t;
  e.synth.pairs = true;
  CHECK(ExperimentConfig::from_json(e.to_json()).to_json() == e.to_json());
}

TEST_CASE("documented defaults and the shipped toy config") {
  const TrainConfig d;
  CHECK(d.base_lr == 2.5e-4);
  CHECK(d.weight_decay == 5e-4);
  CHECK(d.poly_power == 0.9);
  CHECK(d.epochs == 100);
  CHECK(d.batch_size == 1);
  CHECK(d.n_phrases == 4);
  CHECK(d.adam.beta1 == 0.9);
  CHECK(d.adam.beta2 == 0.999);
  CHECK(d.adam.eps == 1e-8);

  const ExperimentConfig toy = ExperimentConfig::load(CBCE_SOURCE_DIR "/configs/toy.json");
  CHECK(toy.synth.samples == 800);
  CHECK(toy.synth.test_fraction == 0.25);
  CHECK(PhraseBank::toy().categories().size() == 6);
  CHECK(toy.train.crop == 80);
  CHECK(toy.train.max_steps <= 3000);
  CHECK((toy.train.crop + 7) / 8 == 10);
  CHECK(toy.synth.image_size == toy.train.crop);
}

TEST_CASE("checkpoint round trip gives bit-identical forward outputs") {
  const fs::path dir = scratch("ckpt");
  TrainConfig cfg = tiny_train();
  CbceNet net(cfg.model, 9);
  Vocabulary vocab = Vocabulary::build({"alpha beta", "gamma"});
  cfg.model.vocab_size = vocab.size();
  CbceNet small(cfg.model, 9);
  AdamState adam;
  adam.t = 3;
  for (const auto& [name, t] : small.params().entries()) {
    adam.m.emplace_back(t.numel(), 0.25);
    adam.v.emplace_back(t.numel(), 0.5);
  }
  Rng rng(4);
  rng.uniform();
  const Checkpoint ckpt = make_checkpoint(small, vocab, cfg, adam, 17, rng);
  save_checkpoint((dir / "a.bin").string(), ckpt);
  const Checkpoint back = load_checkpoint((dir / "a.bin").string());
  CHECK(back.step == 17);
  CHECK(back.adam == adam);
  CHECK(back.header == ckpt.header);
  CHECK(back.header.at("fused_width") == cfg.model.fused_width());
  Rng restored;
  restored.set_state(back.rng_state);
  CHECK(restored.next_u64() == rng.next_u64());

  const LoadedModel loaded = load_model((dir / "a.bin").string());
  Rng img_rng(8);
  const Tensor image = random_uniform({40, 40, 3}, 0, 1, img_rng);
  const PhraseSet phrases = encode_phrases(vocab, {"alpha beta", "gamma delta"});
  CHECK(bit_equal(small.forward(image, phrases).logits, loaded.net.forward(image, phrases).logits));

  save_checkpoint((dir / "b.bin").string(), make_checkpoint(loaded.net, loaded.vocab, loaded.train, adam, 17, rng));
  CHECK(slurp(dir / "b.bin").size() == slurp(dir / "a.bin").size());
}

TEST_CASE("checkpoint loading rejects damaged or mismatched files") {
  const fs::path dir = scratch("ckpt_bad");
  TrainConfig cfg = tiny_train();
  Vocabulary vocab = Vocabulary::build({"alpha"});
  cfg.model.vocab_size = vocab.size();
  CbceNet net(cfg.model, 1);
  Checkpoint ckpt = make_checkpoint(net, vocab, cfg, {}, 0, Rng(1));
  save_checkpoint((dir / "ok.bin").string(), ckpt);
  const std::string bytes = slurp(dir / "ok.bin");

  std::ofstream(dir / "trunc.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(load_checkpoint((dir / "trunc.bin").string()), ValidationError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::ofstream(dir / "magic.bin", std::ios::binary) << bad;
  CHECK_THROWS_AS(load_checkpoint((dir / "magic.bin").string()), ValidationError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.bin").string()), ValidationError);

  Checkpoint wrong = ckpt;
  wrong.header["model"]["c_a"] = 12;
  CHECK_THROWS_WITH_AS(load_model(wrong), doctest::Contains("dimension mismatch"), ValidationError);
  Checkpoint missing = ckpt;
  missing.params.pop_back();
  CHECK_THROWS_AS(load_model(missing), ValidationError);
}

TEST_CASE("a two-step run writes two log lines and a loadable checkpoint") {
  const fs::path out = scratch("two_steps");
  TrainConfig cfg = tiny_train();
  cfg.max_steps = 2;
  const TrainResult r = train(cfg, train_manifest(), out.string());
  CHECK(r.steps == 2);
  CHECK(r.losses.size() == 2);
  std::ifstream log(out / "train_log.jsonl");
  std::string line;
  std::vector<nlohmann::json> lines;
  while (std::getline(log, line)) lines.push_back(nlohmann::json::parse(line));
  REQUIRE(lines.size() == 2);
  CHECK(lines[1].at("step") == 2);
  CHECK(lines[0].at("lr") == cfg.base_lr);
  CHECK(lines[1].at("loss").get<double>() == r.losses[1]);
  const LoadedModel m = load_model(r.checkpoint);
  CHECK(m.step == 2);
  CHECK(m.vocab.size() == Vocabulary::load((tiny_dataset() / "vocab.txt").string()).size());
}

TEST_CASE("training is seeded-deterministic") {
  TrainConfig cfg = tiny_train();
  cfg.epochs = 2;
  const TrainResult a = train(cfg, train_manifest(), scratch("det_a").string());
  const TrainResult b = train(cfg, train_manifest(), scratch("det_b").string());
  CHECK(a.losses == b.losses);
  CHECK(slurp(a.checkpoint) == slurp(b.checkpoint));
  cfg.seed = 2;
  const TrainResult c = train(cfg, train_manifest(), scratch("det_c").string());
  CHECK(c.losses != a.losses);
}

TEST_CASE("batches average the loss and accumulate gradients") {
  TrainConfig cfg = tiny_train();
  cfg.batch_size = 3;
  const TrainResult r = train(cfg, train_manifest(), scratch("batch").string());
  CHECK(r.steps == 2);  // 6 training records
}

TEST_CASE("frozen backbone keeps the visual weights") {
  TrainConfig cfg = tiny_train();
  cfg.freeze_backbone = true;
  const TrainResult r = train(cfg, train_manifest(), scratch("frozen").string());
  const LoadedModel trained = load_model(r.checkpoint);
  ModelConfig mc = cfg.model;
  mc.vocab_size = trained.vocab.size();
  const CbceNet init(mc, cfg.seed);
  for (const auto& [name, t] : init.params().entries()) {
    const bool same = bit_equal(t, trained.net.params().get(name));
    CHECK(same == (name.rfind("visual.", 0) == 0));
  }
}

TEST_CASE("a diverging run aborts and records the step") {
  const fs::path out = scratch("diverge");
  TrainConfig cfg = tiny_train();
  cfg.base_lr = 1e300;
  cfg.poly_power = 0.0;
  CHECK_THROWS_WITH_AS(train(cfg, train_manifest(), out.string()), doctest::Contains("at step"), NumericError);
  std::ifstream log(out / "train_log.jsonl");
  std::string line, last;
  while (std::getline(log, line)) last = line;
  const auto j = nlohmann::json::parse(last);
  CHECK(j.contains("error"));
  CHECK(j.at("step").get<int>() >= 1);
}

TEST_CASE("training rejects a missing manifest") {
  CHECK_THROWS_AS(train(tiny_train(), "/nonexistent/train.jsonl", scratch("none").string()), ValidationError);
}

TEST_CASE("evaluate reports every held-out record") {
  TrainConfig cfg = tiny_train();
  cfg.max_steps = 1;
  const TrainResult r = train(cfg, train_manifest(), scratch("eval").string());
  const LoadedModel m = load_model(r.checkpoint);
  EvalOptions opts;
  opts.metrics.threads = 1;
  const std::string test = (tiny_dataset() / "test.jsonl").string();
  const MetricReport report = evaluate(m, test, opts);
  CHECK(report.per_image.size() == load_manifest(test).size());
  CHECK(report.overall.iou >= 0.0);
  CHECK(report.overall.iou <= 1.0);
  CHECK(leading_phrases({"a", "b", "c"}, 2) == std::vector<std::string>{"a", "b"});
  CHECK(leading_phrases({"a", "b"}, 0).size() == 2);
}

TEST_CASE("infer is deterministic and reports unknown tokens") {
  TrainConfig cfg = tiny_train();
  cfg.max_steps = 1;
  const fs::path out = scratch("infer");
  const LoadedModel m = load_model(train(cfg, train_manifest(), out.string()).checkpoint);
  const auto rec = load_manifest(train_manifest()).front();
  const Tensor image = read_ppm((tiny_dataset() / rec.image).string());
  const InferResult a = infer(m, image, {"roll", "zzyzx quux"});
  const InferResult b = infer(m, image, {"roll", "zzyzx quux"});
  CHECK(a.unknown_tokens == 2);
  write_probability_map((out / "a.f32").string(), a.probs);
  write_probability_map((out / "b.f32").string(), b.probs);
  write_pgm((out / "a.pgm").string(), a.mask);
  write_pgm((out / "b.pgm").string(), b.mask);
  CHECK(slurp(out / "a.f32") == slurp(out / "b.f32"));
  CHECK(slurp(out / "a.pgm") == slurp(out / "b.pgm"));
  CHECK(slurp(out / "a.f32").size() == 4 * 48 * 48);
  CHECK_THROWS_AS(infer(m, image, {}), ValidationError);
  CHECK_THROWS_AS(infer(m, image, {"  "}), ValidationError);
}

TEST_CASE("smoothing is a trailing moving average") {
  CHECK(smoothed({1, 2, 3, 4}, 2) == std::vector<double>{1, 1.5, 2.5, 3.5});
  CHECK(smoothed({4}, 10) == std::vector<double>{4});
  CHECK_THROWS_AS(smoothed({1}, 0), ValidationError);
}
