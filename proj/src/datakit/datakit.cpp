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


#include "cbce/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "cbce/encoders.hpp"

namespace fs = std::filesystem;

namespace cbce {
namespace {

// ---- PNM ----

struct PnmHeader {
  std::string magic;
  std::size_t width = 0, height = 0;
};

PnmHeader read_header(std::istream& in, const std::string& path) {
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    if (t.empty()) throw ValidationError(path + ": truncated PNM header");
    return t;
  };
  PnmHeader h;
  h.magic = token();
  if (h.magic != "P5" && h.magic != "P6") throw ValidationError(path + ": unsupported format " + h.magic);
  try {
    h.width = std::stoul(token());
    h.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw ValidationError(path + ": maxval must be 255");
  } catch (const std::invalid_argument&) {
    throw ValidationError(path + ": malformed PNM header");
  }
  if (h.width == 0 || h.height == 0) throw ValidationError(path + ": empty image");
  return h;
}

std::vector<unsigned char> read_pixels(const std::string& path, const char* magic, std::size_t channels,
                                       PnmHeader& header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  header = read_header(in, path);
  if (header.magic != magic) throw ValidationError(path + ": expected " + magic + ", found " + header.magic);
  std::vector<unsigned char> bytes(header.width * header.height * channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw ValidationError(path + ": truncated pixel data");
  return bytes;
}

void write_pixels(const std::string& path, const char* magic, std::size_t w, std::size_t h,
                  const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path);
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// ---- shapes ----

constexpr double kRingInner = 0.4;
constexpr double kUHeight = 1.0;
constexpr double kUWall = 0.45;
constexpr double kWedgeHalfHeight = 0.75;
constexpr double kTBar = 0.5;
constexpr double kTStem = 0.35;

double vertical_extent(const ShapeSpec& s) {
  switch (s.kind) {
    case ShapeKind::kRectangle: return s.aspect;
    case ShapeKind::kUShape: return kUHeight;
    case ShapeKind::kWedge: return kWedgeHalfHeight;
    default: return 1.0;
  }
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h + 360.0, 360.0) / 60.0;
  const double c = v * s;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  const double m = v - c;
  std::array<double, 3> rgb{0, 0, 0};
  switch (static_cast<int>(h)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  return {rgb[0] + m, rgb[1] + m, rgb[2] + m};
}

std::size_t class_index(const std::string& affordance, const PhraseBank& bank) {
  const auto cats = bank.categories();
  auto it = std::find(cats.begin(), cats.end(), affordance);
  if (it == cats.end()) throw ValidationError("unknown affordance '" + affordance + "'");
  return static_cast<std::size_t>(it - cats.begin());
}

ShapeSpec random_shape(const std::string& affordance, const PhraseBank& bank, double image_size, Rng& rng) {
  ShapeSpec s;
  s.kind = shape_for(affordance, bank);
  const double scale = image_size / 90.0;
  s.size = rng.uniform(14.0, 19.0) * scale;
  s.aspect = rng.uniform(0.6, 1.0);
  s.mirrored = rng.bernoulli(0.5);
  // Class hue bands 60 degrees apart, jittered within +-12.
  const double hue = 60.0 * static_cast<double>(class_index(affordance, bank) % 6) + rng.uniform(-12.0, 12.0);
  s.color = hsv_to_rgb(hue, rng.uniform(0.55, 0.9), rng.uniform(0.6, 0.95));
  return s;
}

bool overlaps(const std::array<double, 4>& a, const std::array<double, 4>& b, double gap) {
  return a[0] < b[2] + gap && b[0] < a[2] + gap && a[1] < b[3] + gap && b[1] < a[3] + gap;
}

// Places every shape inside the canvas with disjoint padded boxes.
void place(std::vector<ShapeSpec>& shapes, double size, std::size_t retries, Rng& rng) {
  for (std::size_t attempt = 0; attempt < retries; ++attempt) {
    bool ok = true;
    for (std::size_t i = 0; i < shapes.size() && ok; ++i) {
      ShapeSpec& s = shapes[i];
      const double hx = s.size, hy = s.size * vertical_extent(s);
      bool placed = false;
      for (int t = 0; t < 50 && !placed; ++t) {
        s.cx = rng.uniform(hx + 1.0, size - hx - 1.0);
        s.cy = rng.uniform(hy + 1.0, size - hy - 1.0);
        placed = true;
        for (std::size_t j = 0; j < i; ++j) {
          if (overlaps(s.bounds(), shapes[j].bounds(), 2.0)) {
            placed = false;
            break;
          }
        }
      }
      ok = placed;
    }
    if (ok) return;
  }
  throw ValidationError("synth: could not place " + std::to_string(shapes.size()) + " objects on a " +
                        std::to_string(static_cast<int>(size)) + "px canvas after " + std::to_string(retries) +
                        " attempts");
}

Tensor background(std::size_t size, Rng& rng) {
  const double base = rng.uniform(0.25, 0.5);
  const auto tint = hsv_to_rgb(rng.uniform(0.0, 360.0), rng.uniform(0.0, 0.15), 1.0);
  const double gx = rng.uniform(-0.1, 0.1), gy = rng.uniform(-0.1, 0.1);
  Tensor img = Tensor::zeros({size, size, 3});
  auto d = img.mutable_data();
  const double n = static_cast<double>(size);
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const double shade = base + gx * (static_cast<double>(c) / n - 0.5) + gy * (static_cast<double>(r) / n - 0.5);
      for (std::size_t ch = 0; ch < 3; ++ch)
        d[(r * size + c) * 3 + ch] = std::clamp(shade * tint[ch] + rng.uniform(-0.04, 0.04), 0.0, 1.0);
    }
  }
  return img;
}

void draw(const ShapeSpec& s, Tensor& image, Tensor* mask, Rng& rng) {
  const std::size_t size = image.dim(0);
  auto d = image.mutable_data();
  const auto b = s.bounds();
  const std::size_t r0 = static_cast<std::size_t>(std::max(0.0, std::floor(b[1])));
  const std::size_t r1 = std::min(size, static_cast<std::size_t>(std::ceil(b[3])) + 1);
  const std::size_t c0 = static_cast<std::size_t>(std::max(0.0, std::floor(b[0])));
  const std::size_t c1 = std::min(size, static_cast<std::size_t>(std::ceil(b[2])) + 1);
  for (std::size_t r = r0; r < r1; ++r) {
    for (std::size_t c = c0; c < c1; ++c) {
      if (!s.contains(static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5)) continue;
      for (std::size_t ch = 0; ch < 3; ++ch)
        d[(r * size + c) * 3 + ch] = std::clamp(s.color[ch] + rng.uniform(-0.03, 0.03), 0.0, 1.0);
      if (mask) mask->mutable_data()[r * size + c] = 1.0;
    }
  }
}


void require_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw ValidationError("cannot create directory " + p.string() + ": " + ec.message());
}

}  // namespace

// ---- image files ----

Tensor read_ppm(const std::string& path) {
  PnmHeader h;
  const auto bytes = read_pixels(path, "P6", 3, h);
  std::vector<double> values(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) values[i] = bytes[i] / 255.0;
  return Tensor({h.height, h.width, 3}, std::move(values));
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("write_ppm: expected [H,W,3], got " + shape_string(image.shape()));
  std::vector<unsigned char> bytes(image.numel());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(image[i]);
  write_pixels(path, "P6", image.dim(1), image.dim(0), bytes);
}

Tensor read_pgm(const std::string& path) {
  PnmHeader h;
  const auto bytes = read_pixels(path, "P5", 1, h);
  std::vector<double> values(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) values[i] = bytes[i] >= 128 ? 1.0 : 0.0;
  return Tensor({h.height, h.width}, std::move(values));
}

void write_pgm(const std::string& path, const Tensor& mask) {
  if (mask.rank() != 2) throw ShapeError("write_pgm: expected [H,W], got " + shape_string(mask.shape()));
  std::vector<unsigned char> bytes(mask.numel());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask[i] >= 0.5 ? 255 : 0;
  write_pixels(path, "P5", mask.dim(1), mask.dim(0), bytes);
}

std::pair<std::size_t, std::size_t> read_pnm_size(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  const PnmHeader h = read_header(in, path);
  return {h.width, h.height};
}

// ---- manifests ----

std::string manifest_dir(const std::string& manifest_path) {
  return fs::path(manifest_path).parent_path().string();
}

std::vector<ManifestRecord> load_manifest(const std::string& path, const std::set<std::string>& categories,
                                          bool check_files) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path);
  const fs::path dir = fs::path(path).parent_path();
  std::vector<ManifestRecord> records;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(where + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ValidationError(where + "record must be a JSON object");
    ManifestRecord r;
    for (const char* key : {"id", "image", "mask", "affordance", "phrases"}) {
      if (!j.contains(key)) throw ValidationError(where + "missing field '" + key + "'");
    }
    try {
      r.id = j.at("id").get<std::string>();
      r.image = j.at("image").get<std::string>();
      r.mask = j.at("mask").get<std::string>();
      r.affordance = j.at("affordance").get<std::string>();
      r.phrases = j.at("phrases").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception&) {
      throw ValidationError(where + "field has the wrong type");
    }
    if (r.id.empty()) throw ValidationError(where + "empty id");
    if (!ids.insert(r.id).second) throw ValidationError(where + "duplicate id '" + r.id + "'");
    if (r.phrases.empty()) throw ValidationError(where + "record '" + r.id + "' has no phrases");
    for (const auto& p : r.phrases) {
      if (tokenize(p).empty()) throw ValidationError(where + "record '" + r.id + "' has an empty phrase");
    }
    if (!categories.empty() && !categories.count(r.affordance)) {
      throw ValidationError(where + "unknown affordance '" + r.affordance + "'");
    }
    if (check_files) {
      const auto image_size = read_pnm_size((dir / r.image).string());
      const auto mask_size = read_pnm_size((dir / r.mask).string());
      if (image_size != mask_size) {
        throw ValidationError(where + "image " + std::to_string(image_size.first) + "x" +
                              std::to_string(image_size.second) + " and mask " + std::to_string(mask_size.first) +
                              "x" + std::to_string(mask_size.second) + " differ in size");
      }
    }
    records.push_back(std::move(r));
  }
  return records;
}

void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write manifest " + path);
  for (const ManifestRecord& r : records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["image"] = r.image;
    j["mask"] = r.mask;
    j["affordance"] = r.affordance;
    j["phrases"] = r.phrases;
    out << j.dump() << '\n';
  }
}

// ---- phrase bank ----

std::vector<std::string> PhraseGroups::all() const {
  std::vector<std::string> out;
  for (const auto* g : {&action, &function, &appearance, &environment}) out.insert(out.end(), g->begin(), g->end());
  return out;
}

std::vector<std::string> PhraseBank::categories() const {
  std::vector<std::string> out;
  for (const auto& [label, g] : groups) out.push_back(label);
  return out;
}

std::vector<std::string> PhraseBank::all_phrases() const {
  std::set<std::string> unique;
  for (const auto& [label, g] : groups)
    for (const auto& p : g.all()) unique.insert(p);
  return {unique.begin(), unique.end()};
}

void PhraseBank::validate(std::size_t min_phrases) const {
  if (groups.size() < 2) throw ValidationError("phrase bank needs at least two affordances");
  for (const auto& [label, g] : groups) {
    const auto all = g.all();
    const std::set<std::string> unique(all.begin(), all.end());
    if (unique.size() != all.size()) throw ValidationError("phrase bank: '" + label + "' repeats a phrase");
    if (all.size() < min_phrases) throw ValidationError("phrase bank: '" + label + "' has too few phrases");
    if (g.action.empty()) throw ValidationError("phrase bank: '" + label + "' has no action phrase");
  }
}

PhraseBank PhraseBank::toy() {
  PhraseBank bank;
  // Shared across classes: "push forward", "hold", "hollow", "kitchen",
  // "playground", "workshop", "outdoor activities".
  bank.groups["contain"] = {{"hold liquid", "pour", "fill up"},
                            {"container", "store things"},
                            {"hollow", "open top"},
                            {"kitchen", "dining table"}};
  bank.groups["cut"] = {{"cut", "slice", "hold"},
                        {"sharp edge", "divide food"},
                        {"pointed", "thin blade"},
                        {"kitchen", "workshop"}};
  bank.groups["hang"] = {{"hang", "hook onto", "pull"},
                         {"suspend objects", "attach things"},
                         {"ring shaped", "hollow"},
                         {"wardrobe", "outdoor activities"}};
  bank.groups["pound"] = {{"pound", "strike", "hold"},
                          {"drive nails", "apply force"},
                          {"heavy head", "long handle"},
                          {"workshop", "construction site"}};
  bank.groups["roll"] = {{"roll", "move by rotating", "push forward"},
                         {"travel smoothly", "spin around"},
                         {"round", "spherical"},
                         {"outdoor activities", "playground"}};
  bank.groups["stack"] = {{"stack", "pile up", "push forward"},
                          {"build towers", "stable support"},
                          {"flat sides", "square block"},
                          {"warehouse", "playground"}};
  return bank;
}

std::vector<std::string> phrase_sample(const PhraseBank& bank, const std::string& affordance, std::size_t n,
                                       Rng& rng) {
  auto it = bank.groups.find(affordance);
  if (it == bank.groups.end()) throw ValidationError("phrase_sample: unknown affordance '" + affordance + "'");
  const PhraseGroups& g = it->second;
  std::vector<std::string> all = g.all();
  if (n == 0) throw ValidationError("phrase_sample: n must be at least 1");
  if (n > all.size() || g.action.empty()) {
    throw ValidationError("phrase_sample: '" + affordance + "' has " + std::to_string(all.size()) +
                          " phrases, " + std::to_string(n) + " requested");
  }
  std::vector<std::string> out{g.action[rng.uniform_int(g.action.size())]};
  all.erase(std::find(all.begin(), all.end(), out.front()));
  rng.shuffle(all);
  out.insert(out.end(), all.begin(), all.begin() + static_cast<long>(n - 1));
  rng.shuffle(out);
  return out;
}

// ---- shapes ----

bool ShapeSpec::contains(double x, double y) const {
  double dx = x - cx;
  const double dy = y - cy;
  if (mirrored) dx = -dx;
  switch (kind) {
    case ShapeKind::kDisc: return dx * dx + dy * dy <= size * size;
    case ShapeKind::kRing: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= size * size && d2 >= kRingInner * kRingInner * size * size;
    }
    case ShapeKind::kRectangle: return std::abs(dx) <= size && std::abs(dy) <= size * aspect;
    case ShapeKind::kUShape: {
      const double h = kUHeight * size, wall = kUWall * size;
      if (std::abs(dx) > size || std::abs(dy) > h) return false;
      return !(std::abs(dx) < size - wall && dy < h - wall);
    }
    case ShapeKind::kWedge: {
      const double u = (dx + size) / (2.0 * size);
      return u >= 0.0 && u <= 1.0 && std::abs(dy) <= kWedgeHalfHeight * size * (1.0 - u);
    }
    case ShapeKind::kTShape: {
      const bool bar = std::abs(dx) <= size && dy >= -size && dy <= -size + kTBar * size;
      const bool stem = std::abs(dx) <= kTStem * size && std::abs(dy) <= size;
      return bar || stem;
    }
  }
  return false;
}

std::array<double, 4> ShapeSpec::bounds() const {
  const double hy = size * vertical_extent(*this);
  return {cx - size, cy - hy, cx + size, cy + hy};
}

ShapeKind shape_for(const std::string& affordance, const PhraseBank& bank) {
  static const std::map<std::string, ShapeKind> known{
      {"roll", ShapeKind::kDisc},         {"contain", ShapeKind::kUShape}, {"cut", ShapeKind::kWedge},
      {"stack", ShapeKind::kRectangle},   {"pound", ShapeKind::kTShape},   {"hang", ShapeKind::kRing}};
  auto it = known.find(affordance);
  if (it != known.end()) return it->second;
  return static_cast<ShapeKind>(class_index(affordance, bank) % 6);
}

// ---- synthetic dataset ----

void SynthConfig::validate(const PhraseBank& bank) const {
  bank.validate(n_phrases);
  const auto cats = classes.empty() ? bank.categories() : classes;
  if (cats.size() < 2) throw ValidationError("synth: at least two affordance classes are required");
  for (const auto& c : cats) class_index(c, bank);
  if (image_size < 32) throw ValidationError("synth: image_size must be at least 32");
  if (samples == 0) throw ValidationError("synth: samples must be positive");
  if (min_distractors < 0 || max_distractors < min_distractors) throw ValidationError("synth: bad distractor range");
  if (n_phrases == 0) throw ValidationError("synth: n_phrases must be positive");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ValidationError("synth: test_fraction must be in [0,1)");
  if (placement_retries == 0) throw ValidationError("synth: placement_retries must be positive");
}

nlohmann::json SynthConfig::to_json() const {
  return {{"image_size", image_size},
          {"samples", samples},
          {"classes", classes},
          {"min_distractors", min_distractors},
          {"max_distractors", max_distractors},
          {"n_phrases", n_phrases},
          {"seed", seed},
          {"test_fraction", test_fraction},
          {"pairs", pairs},
          {"placement_retries", placement_retries}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  if (!j.is_object()) throw ValidationError("synth config must be a JSON object");
  const nlohmann::json defaults = c.to_json();
  for (const auto& [key, value] : j.items())
    if (!defaults.contains(key)) throw ValidationError("synth config: unknown key '" + key + "'");
  try {
    c.image_size = j.value("image_size", c.image_size);
    c.samples = j.value("samples", c.samples);
    c.classes = j.value("classes", c.classes);
    c.min_distractors = j.value("min_distractors", c.min_distractors);
    c.max_distractors = j.value("max_distractors", c.max_distractors);
    c.n_phrases = j.value("n_phrases", c.n_phrases);
    c.seed = j.value("seed", c.seed);
    c.test_fraction = j.value("test_fraction", c.test_fraction);
    c.pairs = j.value("pairs", c.pairs);
    c.placement_retries = j.value("placement_retries", c.placement_retries);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("synth config: ") + e.what());
  }
  return c;
}

std::vector<SynthSample> synth_sample(const SynthConfig& cfg, const PhraseBank& bank, std::size_t index) {
  const auto cats = cfg.classes.empty() ? bank.categories() : cfg.classes;
  const std::size_t k = cats.size();
  // Image and phrase streams are independent, so the phrase count never moves pixels.
  Rng image_rng = Rng::derive(cfg.seed, 2 * index);
  Rng phrase_rng = Rng::derive(cfg.seed, 2 * index + 1);
  const double size = static_cast<double>(cfg.image_size);

  std::vector<std::string> labels;
  if (cfg.pairs) {
    const std::size_t a = index % k;
    const std::size_t b = (a + 1 + (index / k) % (k - 1)) % k;
    labels = {cats[a], cats[b]};
  } else {
    labels.push_back(cats[index % k]);
    const int distractors = image_rng.uniform_int(cfg.min_distractors, cfg.max_distractors);
    for (int d = 0; d < distractors; ++d) {
      const std::size_t other = (index % k + 1 + image_rng.uniform_int(k - 1)) % k;
      labels.push_back(cats[other]);
    }
  }
  std::vector<ShapeSpec> shapes;
  for (const auto& label : labels) shapes.push_back(random_shape(label, bank, size, image_rng));
  place(shapes, size, cfg.placement_retries, image_rng);

  Tensor image = background(cfg.image_size, image_rng);
  std::vector<Tensor> masks;
  const std::size_t targets = cfg.pairs ? 2 : 1;
  for (std::size_t s = 0; s < shapes.size(); ++s) {
    Tensor mask = Tensor::zeros({cfg.image_size, cfg.image_size});
    draw(shapes[s], image, s < targets ? &mask : nullptr, image_rng);
    if (s < targets) masks.push_back(mask);
  }

  char id[32];
  std::snprintf(id, sizeof id, cfg.pairs ? "pair_%05zu" : "synth_%05zu", index);
  std::vector<SynthSample> out;
  for (std::size_t t = 0; t < targets; ++t) {
    SynthSample s;
    s.id = cfg.pairs ? std::string(id) + (t == 0 ? "_a" : "_b") : std::string(id);
    s.affordance = labels[t];
    s.image = image;
    s.mask = masks[t];
    s.objects = shapes;
    std::swap(s.objects[0], s.objects[t]);
    s.phrases = phrase_sample(bank, labels[t], cfg.n_phrases, phrase_rng);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<bool> split_is_test(std::size_t count, double test_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  const std::uint64_t salt = splitmix64(seed ^ 0x5eed5eed5eed5eedULL);
  auto key = [&](std::size_t i) { return splitmix64(salt + i); };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ka = key(a), kb = key(b);
    return ka != kb ? ka < kb : a < b;
  });
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(count) * test_fraction));
  std::vector<bool> is_test(count, false);
  for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = true;
  return is_test;
}

SynthSummary synth_generate(const SynthConfig& cfg, const PhraseBank& bank, const std::string& out_dir) {
  cfg.validate(bank);
  const fs::path root(out_dir);
  require_dir(root / "images");
  require_dir(root / "masks");
  std::vector<ManifestRecord> all, train, test;
  const std::vector<bool> is_test = split_is_test(cfg.samples, cfg.test_fraction, cfg.seed);
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    const auto samples = synth_sample(cfg, bank, i);
    const std::string image_rel = "images/" + (cfg.pairs ? samples[0].id.substr(0, samples[0].id.size() - 2) : samples[0].id) + ".ppm";
    write_ppm((root / image_rel).string(), samples[0].image);
    for (const SynthSample& s : samples) {
      const std::string mask_rel = "masks/" + s.id + ".pgm";
      write_pgm((root / mask_rel).string(), s.mask);
      ManifestRecord r{s.id, image_rel, mask_rel, s.affordance, s.phrases};
      all.push_back(r);
      (cfg.pairs || is_test[i] ? test : train).push_back(std::move(r));
    }
  }
  write_manifest((root / "manifest.jsonl").string(), all);
  write_manifest((root / "train.jsonl").string(), train);
  write_manifest((root / "test.jsonl").string(), test);
  Vocabulary::build(bank.all_phrases()).save((root / "vocab.txt").string());
  std::ofstream meta(root / "synth_config.json", std::ios::binary);
  meta << cfg.to_json().dump(2) << '\n';
  return {all.size(), train.size(), test.size()};
}

// ---- augmentation ----

CropWindow random_crop_window(std::size_t h, std::size_t w, std::size_t crop_h, std::size_t crop_w, Rng& rng) {
  if (crop_h == 0 || crop_w == 0 || crop_h > h || crop_w > w) {
    throw ValidationError("augment: crop " + std::to_string(crop_h) + "x" + std::to_string(crop_w) +
                          " does not fit a " + std::to_string(h) + "x" + std::to_string(w) + " input");
  }
  CropWindow win;
  win.height = crop_h;
  win.width = crop_w;
  win.top = rng.uniform_int(h - crop_h + 1);
  win.left = rng.uniform_int(w - crop_w + 1);
  win.flip = rng.bernoulli(0.5);
  return win;
}

std::pair<Tensor, Tensor> apply_crop(const Tensor& image, const Tensor& mask, const CropWindow& win) {
  if (image.rank() != 3 || mask.rank() != 2 || image.dim(0) != mask.dim(0) || image.dim(1) != mask.dim(1)) {
    throw ShapeError("augment: image " + shape_string(image.shape()) + " and mask " + shape_string(mask.shape()) +
                     " do not correspond");
  }
  if (win.top + win.height > image.dim(0) || win.left + win.width > image.dim(1)) {
    throw ValidationError("augment: crop window exceeds the input");
  }
  const std::size_t c = image.dim(2), w = image.dim(1);
  std::vector<double> img(win.height * win.width * c), msk(win.height * win.width);
  for (std::size_t r = 0; r < win.height; ++r) {
    for (std::size_t x = 0; x < win.width; ++x) {
      const std::size_t src_x = win.left + (win.flip ? win.width - 1 - x : x);
      const std::size_t src = (win.top + r) * w + src_x;
      msk[r * win.width + x] = mask[src];
      for (std::size_t ch = 0; ch < c; ++ch) img[(r * win.width + x) * c + ch] = image[src * c + ch];
    }
  }
  return {Tensor({win.height, win.width, c}, std::move(img), image.dtype()),
          Tensor({win.height, win.width}, std::move(msk), mask.dtype())};
}

std::pair<Tensor, Tensor> augment(const Tensor& image, const Tensor& mask, std::size_t crop_h, std::size_t crop_w,
                                  Rng& rng) {
  if (image.rank() != 3 || mask.rank() != 2) throw ShapeError("augment: expected [H,W,C] image and [H,W] mask");
  return apply_crop(image, mask, random_crop_window(image.dim(0), image.dim(1), crop_h, crop_w, rng));
}

}  // namespace cbce
