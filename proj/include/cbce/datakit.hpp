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

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cbce/rng.hpp"
#include "cbce/tensor.hpp"
#include "json.hpp"

namespace cbce {

// ---- image files ----

// Binary PPM (P6) / PGM (P5), maxval 255. Images are [H,W,3] in [0,1];
// masks are [H,W] in {0,1} (stored as 0/255, read back as value >= 128).
Tensor read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_pgm(const std::string& path);
void write_pgm(const std::string& path, const Tensor& mask);
// Width and height from the header alone.
std::pair<std::size_t, std::size_t> read_pnm_size(const std::string& path);

// ---- manifests ----

struct ManifestRecord {
  std::string id;
  std::string image;  // relative to the manifest directory
  std::string mask;
  std::string affordance;
  std::vector<std::string> phrases;

  bool operator==(const ManifestRecord&) const = default;
};

/// Loads a JSONL manifest, validating every record; errors carry the line
/// number. An empty `categories` set accepts any label. With check_files,
/// image and mask headers are read and their sizes compared.
std::vector<ManifestRecord> load_manifest(const std::string& path,
                                          const std::set<std::string>& categories = {},
                                          bool check_files = true);
void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records);
std::string manifest_dir(const std::string& manifest_path);

// ---- phrase bank ----

enum class Perspective { kAction, kFunction, kAppearance, kEnvironment };

struct PhraseGroups {
  std::vector<std::string> action, function, appearance, environment;

  std::vector<std::string> all() const;
};

/// Affordance label -> phrases from four perspectives. A phrase may belong
/// to more than one affordance.
struct PhraseBank {
  std::map<std::string, PhraseGroups> groups;

  std::vector<std::string> categories() const;
  std::vector<std::string> all_phrases() const;  // sorted, unique
  void validate(std::size_t min_phrases = 4) const;

  static PhraseBank toy();
};

/// n distinct phrases for the affordance, drawn without replacement, at least
/// one of them from the action perspective; order is random.
std::vector<std::string> phrase_sample(const PhraseBank& bank, const std::string& affordance,
                                       std::size_t n, Rng& rng);

// ---- synthetic dataset ----

enum class ShapeKind { kDisc, kUShape, kWedge, kRectangle, kTShape, kRing };

struct ShapeSpec {
  ShapeKind kind = ShapeKind::kDisc;
  double cx = 0, cy = 0;   // center in pixels
  double size = 0;         // half extent
  double aspect = 1.0;     // secondary/primary half extent
  bool mirrored = false;
  std::array<double, 3> color{0, 0, 0};

  // Pixel (r, c) is inside when its center (c + 0.5, r + 0.5) is.
  bool contains(double x, double y) const;
  // Axis-aligned bounding box [x0, x1) x [y0, y1) in pixels.
  std::array<double, 4> bounds() const;
};

struct SynthConfig {
  std::size_t image_size = 90;
  std::size_t samples = 800;
  std::vector<std::string> classes;  // empty selects every bank category
  int min_distractors = 0;
  int max_distractors = 3;
  std::size_t n_phrases = 4;
  std::uint64_t seed = 7;
  double test_fraction = 0.25;
  bool pairs = false;  // two objects per image, one record per object
  std::size_t placement_retries = 200;

  void validate(const PhraseBank& bank) const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

struct SynthSample {
  std::string id;
  std::string affordance;
  Tensor image;  // [S,S,3]
  Tensor mask;   // [S,S]
  std::vector<ShapeSpec> objects;   // objects[0] is the target
  std::vector<std::string> phrases;
};

ShapeKind shape_for(const std::string& affordance, const PhraseBank& bank);

// Deterministic in (cfg.seed, index). In pairs mode returns the two records
// sharing image `index`.
std::vector<SynthSample> synth_sample(const SynthConfig& cfg, const PhraseBank& bank, std::size_t index);

struct SynthSummary {
  std::size_t records = 0;
  std::size_t train = 0;
  std::size_t test = 0;
};

/// Writes images/, masks/, manifest.jsonl, train.jsonl, test.jsonl and
/// vocab.txt under out_dir. Pairs mode puts every record in test.jsonl.
SynthSummary synth_generate(const SynthConfig& cfg, const PhraseBank& bank, const std::string& out_dir);

// Train/test membership by a seeded hash of the record index.
std::vector<bool> split_is_test(std::size_t count, double test_fraction, std::uint64_t seed);

// ---- augmentation ----

struct CropWindow {
  std::size_t top = 0, left = 0, height = 0, width = 0;
  bool flip = false;
};

CropWindow random_crop_window(std::size_t h, std::size_t w, std::size_t crop_h, std::size_t crop_w, Rng& rng);
std::pair<Tensor, Tensor> apply_crop(const Tensor& image, const Tensor& mask, const CropWindow& window);
// Same random crop window and horizontal flip for image and mask.
std::pair<Tensor, Tensor> augment(const Tensor& image, const Tensor& mask, std::size_t crop_h,
                                  std::size_t crop_w, Rng& rng);

}  // namespace cbce
