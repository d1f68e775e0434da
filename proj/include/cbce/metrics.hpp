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

#include <map>
#include <string>
#include <vector>

#include "cbce/tensor.hpp"

namespace cbce {

inline constexpr double kDefaultThreshold = 0.5;
inline constexpr double kDefaultBetaSq = 0.3;

// Inputs are same-shape maps; gt must be binary. Binarization is pred >= threshold.
double iou(const Tensor& pred, const Tensor& gt, double threshold = kDefaultThreshold);
double f_measure(const Tensor& pred, const Tensor& gt, double threshold = kDefaultThreshold,
                 double beta_sq = kDefaultBetaSq);
double e_measure(const Tensor& pred, const Tensor& gt, double threshold = kDefaultThreshold);
// Throws ValidationError when either map is constant.
double pearson_cc(const Tensor& pred, const Tensor& gt);
double mae(const Tensor& pred, const Tensor& gt);

struct MetricValues {
  double iou = 0.0;
  double fbeta = 0.0;
  double ephi = 0.0;
  double cc = 0.0;
  double mae = 0.0;
};

struct ImageMetrics {
  std::string sample;
  std::string affordance;
  MetricValues values;
  bool cc_defined = true;
};

struct MetricReport {
  std::vector<ImageMetrics> per_image;            // manifest order
  std::map<std::string, MetricValues> per_category;
  std::map<std::string, std::size_t> category_counts;
  MetricValues overall;
  std::size_t cc_undefined = 0;
};

struct EvalItem {
  std::string id;
  std::string affordance;
  Tensor gt;
};

struct MetricOptions {
  double threshold = kDefaultThreshold;
  double beta_sq = kDefaultBetaSq;
  std::size_t threads = 0;  // 0 selects the hardware concurrency
};

/// Per-image metrics in item order, per-category and overall unweighted means.
/// An undefined correlation (constant map) scores 0 and is counted.
MetricReport evaluate_dataset(const std::map<std::string, Tensor>& predictions,
                              const std::vector<EvalItem>& items, const MetricOptions& options = {});

// CSV: header sample,affordance,iou,fbeta,ephi,cc,mae with one row per image.
void write_report_csv(const MetricReport& report, const std::string& path);
void write_report_json(const MetricReport& report, const std::string& path);
// Rebuilds the per-image rows and recomputes the means.
MetricReport read_report_csv(const std::string& path);
MetricReport summarize(std::vector<ImageMetrics> rows);

}  // namespace cbce
