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


#include "cbce/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace cbce {
namespace {

constexpr double kEps = 2.220446049250313e-16;

void require_same_shape(const Tensor& pred, const Tensor& gt, const char* metric) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError(std::string(metric) + ": prediction " + shape_string(pred.shape()) +
                     " and ground truth " + shape_string(gt.shape()) + " differ");
  }
  if (pred.numel() == 0) throw ShapeError(std::string(metric) + ": empty map");
}

void require_binary(const Tensor& gt, const char* metric) {
  for (double v : gt.data()) {
    if (v != 0.0 && v != 1.0) throw ValidationError(std::string(metric) + ": ground truth must be binary");
  }
}

struct Confusion {
  double tp = 0, fp = 0, fn = 0, tn = 0;
};

Confusion confusion(const Tensor& pred, const Tensor& gt, double threshold, const char* metric) {
  require_same_shape(pred, gt, metric);
  require_binary(gt, metric);
  Confusion c;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] >= threshold;
    const bool g = gt[i] == 1.0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::json values_json(const MetricValues& v) {
  return {{"iou", v.iou}, {"fbeta", v.fbeta}, {"ephi", v.ephi}, {"cc", v.cc}, {"mae", v.mae}};
}

void accumulate(MetricValues& into, const MetricValues& v) {
  into.iou += v.iou;
  into.fbeta += v.fbeta;
  into.ephi += v.ephi;
  into.cc += v.cc;
  into.mae += v.mae;
}

MetricValues divided(MetricValues v, double n) {
  return {v.iou / n, v.fbeta / n, v.ephi / n, v.cc / n, v.mae / n};
}

}  // namespace

double iou(const Tensor& pred, const Tensor& gt, double threshold) {
  const Confusion c = confusion(pred, gt, threshold, "iou");
  const double uni = c.tp + c.fp + c.fn;
  return uni == 0.0 ? 1.0 : c.tp / uni;
}

double f_measure(const Tensor& pred, const Tensor& gt, double threshold, double beta_sq) {
  if (!(beta_sq > 0.0)) throw ValidationError("f_measure: beta_sq must be positive");
  const Confusion c = confusion(pred, gt, threshold, "f_measure");
  if (c.tp + c.fp == 0.0 && c.tp + c.fn == 0.0) return 1.0;
  if (c.tp == 0.0) return 0.0;
  const double precision = c.tp / (c.tp + c.fp);
  const double recall = c.tp / (c.tp + c.fn);
  return (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall);
}

double e_measure(const Tensor& pred, const Tensor& gt, double threshold) {
  require_same_shape(pred, gt, "e_measure");
  require_binary(gt, "e_measure");
  const std::size_t n = pred.numel();
  std::vector<double> fm(n);
  double fm_mean = 0.0, gt_mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    fm[i] = pred[i] >= threshold ? 1.0 : 0.0;
    fm_mean += fm[i];
    gt_mean += gt[i];
  }
  const double count = static_cast<double>(n);
  fm_mean /= count;
  gt_mean /= count;
  // Degenerate ground truth: the alignment term is constant, score by coverage.
  if (gt_mean == 0.0) return 1.0 - fm_mean;
  if (gt_mean == 1.0) return fm_mean;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dfm = fm[i] - fm_mean, dgt = gt[i] - gt_mean;
    const double align = 2.0 * dgt * dfm / (dgt * dgt + dfm * dfm + kEps);
    total += (align + 1.0) * (align + 1.0) / 4.0;
  }
  return total / count;
}

double pearson_cc(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred, gt, "pearson_cc");
  const double n = static_cast<double>(pred.numel());
  double mp = 0.0, mg = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    mp += pred[i];
    mg += gt[i];
  }
  mp /= n;
  mg /= n;
  double cov = 0.0, vp = 0.0, vg = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double dp = pred[i] - mp, dg = gt[i] - mg;
    cov += dp * dg;
    vp += dp * dp;
    vg += dg * dg;
  }
  if (vp == 0.0 || vg == 0.0) throw ValidationError("pearson_cc: correlation undefined for a constant map");
  return std::clamp(cov / std::sqrt(vp * vg), -1.0, 1.0);
}

double mae(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred, gt, "mae");
  require_binary(gt, "mae");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    if (pred[i] < 0.0 || pred[i] > 1.0) throw ValidationError("mae: prediction must lie in [0,1]");
    total += std::abs(pred[i] - gt[i]);
  }
  return total / static_cast<double>(pred.numel());
}

MetricReport summarize(std::vector<ImageMetrics> rows) {
  if (rows.empty()) throw ValidationError("metric report needs at least one image");
  MetricReport report;
  for (const ImageMetrics& row : rows) {
    accumulate(report.overall, row.values);
    accumulate(report.per_category[row.affordance], row.values);
    ++report.category_counts[row.affordance];
    if (!row.cc_defined) ++report.cc_undefined;
  }
  report.overall = divided(report.overall, static_cast<double>(rows.size()));
  for (auto& [label, values] : report.per_category)
    values = divided(values, static_cast<double>(report.category_counts[label]));
  report.per_image = std::move(rows);
  return report;
}

MetricReport evaluate_dataset(const std::map<std::string, Tensor>& predictions,
                              const std::vector<EvalItem>& items, const MetricOptions& options) {
  if (items.empty()) throw ValidationError("evaluate_dataset: empty manifest");
  std::vector<const Tensor*> preds;
  for (const EvalItem& item : items) {
    auto it = predictions.find(item.id);
    if (it == predictions.end()) throw ValidationError("evaluate_dataset: missing prediction for record '" + item.id + "'");
    preds.push_back(&it->second);
  }
  std::vector<ImageMetrics> rows(items.size());
  std::vector<std::string> errors(items.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < items.size(); i = next++) {
      try {
        const Tensor& p = *preds[i];
        const Tensor& g = items[i].gt;
        ImageMetrics& row = rows[i];
        row.sample = items[i].id;
        row.affordance = items[i].affordance;
        row.values.iou = iou(p, g, options.threshold);
        row.values.fbeta = f_measure(p, g, options.threshold, options.beta_sq);
        row.values.ephi = e_measure(p, g, options.threshold);
        row.values.mae = mae(p, g);
        try {
          row.values.cc = pearson_cc(p, g);
        } catch (const ValidationError&) {
          row.values.cc = 0.0;
          row.cc_defined = false;
        }
      } catch (const std::exception& e) {
        errors[i] = "record '" + items[i].id + "': " + e.what();
      }
    }
  };
  std::size_t threads = options.threads ? options.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, items.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const std::string& e : errors)
    if (!e.empty()) throw ValidationError("evaluate_dataset: " + e);
  return summarize(std::move(rows));
}

void write_report_csv(const MetricReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write report " + path);
  out << "sample,affordance,iou,fbeta,ephi,cc,mae\n";
  for (const ImageMetrics& row : report.per_image) {
    const MetricValues& v = row.values;
    out << row.sample << ',' << row.affordance << ',' << format_double(v.iou) << ',' << format_double(v.fbeta)
        << ',' << format_double(v.ephi) << ',' << (row.cc_defined ? format_double(v.cc) : "nan") << ','
        << format_double(v.mae) << '\n';
  }
}

void write_report_json(const MetricReport& report, const std::string& path) {
  nlohmann::json j;
  j["overall"] = values_json(report.overall);
  j["num_images"] = report.per_image.size();
  j["cc_undefined"] = report.cc_undefined;
  for (const auto& [label, values] : report.per_category) {
    nlohmann::json entry = values_json(values);
    entry["count"] = report.category_counts.at(label);
    j["per_category"][label] = entry;
  }
  for (const ImageMetrics& row : report.per_image) {
    nlohmann::json entry = values_json(row.values);
    entry["sample"] = row.sample;
    entry["affordance"] = row.affordance;
    if (!row.cc_defined) entry["cc"] = nullptr;
    j["per_image"].push_back(entry);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write report " + path);
  out << j.dump(2) << '\n';
}

MetricReport read_report_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open report " + path);
  std::string line;
  if (!std::getline(in, line) || line != "sample,affordance,iou,fbeta,ephi,cc,mae") {
    throw ValidationError(path + ": unexpected report header");
  }
  std::vector<ImageMetrics> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 7) throw ValidationError(path + ":" + std::to_string(line_no) + ": expected 7 fields");
    ImageMetrics row;
    row.sample = fields[0];
    row.affordance = fields[1];
    try {
      row.values.iou = std::stod(fields[2]);
      row.values.fbeta = std::stod(fields[3]);
      row.values.ephi = std::stod(fields[4]);
      row.cc_defined = fields[5] != "nan";
      row.values.cc = row.cc_defined ? std::stod(fields[5]) : 0.0;
      row.values.mae = std::stod(fields[6]);
    } catch (const std::exception&) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": malformed number");
    }
    rows.push_back(std::move(row));
  }
  return summarize(std::move(rows));
}

}  // namespace cbce
