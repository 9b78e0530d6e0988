#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "segfetch/labeling.hpp"
#include "segfetch/model.hpp"

namespace segfetch {

/// bit i set iff conf[i] >= threshold. Requires 0 < threshold < 1.
DeltaBitmap binarize(std::span<const double> conf, double threshold);

/// The k highest-confidence bits (lower index wins ties).
DeltaBitmap top_k(std::span<const double> conf, std::size_t k);

/// Keeps at most `max_degree` set bits of `bits`, preferring the highest
/// confidences. max_degree = 0 means uncapped.
DeltaBitmap cap_degree(const DeltaBitmap& bits, std::span<const double> conf,
                       std::size_t max_degree);

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Pooled true/false positive and false negative counts.
struct Counts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  /// Empty prediction and empty label give precision 1; empty prediction
  /// with a non-empty label gives 0. Empty label gives recall 1. F1 is 0
  /// when precision and recall are both 0.
  Metrics metrics() const;
};

Counts count(const DeltaBitmap& pred, const DeltaBitmap& label);
Metrics set_metrics(const DeltaSet& pred, const DeltaSet& label);

struct ThrottleConfig {
  double grid_step = 0.01;
  std::size_t max_degree = 0;  // 0 = uncapped

  void validate() const;
};

/// Thresholds k / n for k = 1 .. n - 1 with n = round(1 / step).
std::vector<double> threshold_grid(double step);

struct GridPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double mean_degree = 0.0;
};

struct ThresholdReport {
  double optimal_threshold = 0.5;
  double optimal_f1 = 0.0;
  double mean_degree = 0.0;  // blocks per trigger at the optimum
  std::vector<GridPoint> grid;
  std::size_t samples = 0;
  bool degenerate = false;   // every validation label was empty
};

/// Micro-averaged metrics of `conf` binarized at `threshold` (with the
/// optional degree cap) against `labels`.
Counts evaluate_threshold(std::span<const ConfidenceVector> conf,
                          std::span<const DeltaBitmap> labels, double threshold,
                          std::size_t max_degree = 0);

/// Grid search for the micro-F1 maximizing threshold. Ties go to the larger
/// threshold.
ThresholdReport tune_threshold(std::span<const ConfidenceVector> conf,
                               std::span<const DeltaBitmap> labels, const ThrottleConfig& cfg);

/// Model confidences for every sample, in sample order.
std::vector<ConfidenceVector> predict_all(std::span<const Sample> samples,
                                          const ModelParams& params, const ModelConfig& cfg);

ThresholdReport tune_threshold(const ModelParams& params, const ModelConfig& model_cfg,
                               std::span<const Sample> validation, const ThrottleConfig& cfg);

std::string threshold_report_json(const ThresholdReport& report);
ThresholdReport threshold_report_from_json(const std::string& text);
std::string threshold_grid_csv(const ThresholdReport& report);

}  // namespace segfetch
