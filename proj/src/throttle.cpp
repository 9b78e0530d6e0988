#include "segfetch/throttle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace segfetch {

DeltaBitmap binarize(std::span<const double> conf, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw RangeError("threshold must lie in (0, 1)");
  DeltaBitmap out(conf.size());
  for (std::size_t i = 0; i < conf.size(); ++i) {
    if (conf[i] >= threshold) out.set(i);
  }
  return out;
}

namespace {

// Indices of `conf` ordered by descending confidence, then ascending index.
std::vector<std::size_t> by_confidence(std::span<const double> conf) {
  std::vector<std::size_t> order(conf.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return conf[a] > conf[b]; });
  return order;
}

}  // namespace

DeltaBitmap top_k(std::span<const double> conf, std::size_t k) {
  DeltaBitmap out(conf.size());
  const auto order = by_confidence(conf);
  for (std::size_t i = 0; i < std::min(k, order.size()); ++i) out.set(order[i]);
  return out;
}

DeltaBitmap cap_degree(const DeltaBitmap& bits, std::span<const double> conf,
                       std::size_t max_degree) {
  if (max_degree == 0 || bits.popcount() <= max_degree) return bits;
  if (conf.size() != bits.size()) throw RangeError("cap_degree: size mismatch");
  DeltaBitmap out(bits.size());
  std::size_t kept = 0;
  for (std::size_t i : by_confidence(conf)) {
    if (kept == max_degree) break;
    if (bits.test(i)) {
      out.set(i);
      ++kept;
    }
  }
  return out;
}

Metrics Counts::metrics() const {
  Metrics m;
  const std::uint64_t predicted = tp + fp;
  const std::uint64_t actual = tp + fn;
  if (predicted == 0) {
    m.precision = actual == 0 ? 1.0 : 0.0;
  } else {
    m.precision = static_cast<double>(tp) / static_cast<double>(predicted);
  }
  m.recall = actual == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(actual);
  const double sum = m.precision + m.recall;
  m.f1 = sum == 0.0 ? 0.0 : 2.0 * m.precision * m.recall / sum;
  return m;
}

Counts count(const DeltaBitmap& pred, const DeltaBitmap& label) {
  if (pred.size() != label.size()) throw RangeError("count: bitmap sizes differ");
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.test(i);
    const bool l = label.test(i);
    c.tp += p && l;
    c.fp += p && !l;
    c.fn += !p && l;
  }
  return c;
}

Metrics set_metrics(const DeltaSet& pred, const DeltaSet& label) {
  Counts c;
  for (std::int64_t d : pred) {
    if (label.contains(d)) {
      ++c.tp;
    } else {
      ++c.fp;
    }
  }
  c.fn = label.size() - c.tp;
  return c.metrics();
}

void ThrottleConfig::validate() const {
  if (!(grid_step > 0.0 && grid_step < 1.0)) throw ConfigError("grid_step must lie in (0, 1)");
  if (std::llround(1.0 / grid_step) < 2) throw ConfigError("grid_step too coarse for an interior grid");
}

std::vector<double> threshold_grid(double step) {
  ThrottleConfig{step}.validate();
  const long long n = std::llround(1.0 / step);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n - 1));
  for (long long k = 1; k < n; ++k) out.push_back(static_cast<double>(k) / static_cast<double>(n));
  return out;
}

Counts evaluate_threshold(std::span<const ConfidenceVector> conf,
                          std::span<const DeltaBitmap> labels, double threshold,
                          std::size_t max_degree) {
  if (conf.size() != labels.size()) throw RangeError("evaluate_threshold: count mismatch");
  Counts total;
  for (std::size_t i = 0; i < conf.size(); ++i) {
    const auto pred = cap_degree(binarize(conf[i], threshold), conf[i], max_degree);
    total += count(pred, labels[i]);
  }
  return total;
}

ThresholdReport tune_threshold(std::span<const ConfidenceVector> conf,
                               std::span<const DeltaBitmap> labels, const ThrottleConfig& cfg) {
  cfg.validate();
  if (conf.empty()) throw RangeError("tune_threshold: empty validation set");
  if (conf.size() != labels.size()) throw RangeError("tune_threshold: count mismatch");

  ThresholdReport report;
  report.samples = conf.size();
  report.degenerate = std::all_of(labels.begin(), labels.end(),
                                  [](const DeltaBitmap& b) { return b.popcount() == 0; });

  const auto grid = threshold_grid(cfg.grid_step);
  report.grid.resize(grid.size());
  parallel_for(grid.size(), [&](std::size_t k) {
    const Counts c = evaluate_threshold(conf, labels, grid[k], cfg.max_degree);
    const Metrics m = c.metrics();
    report.grid[k] = {grid[k], m.precision, m.recall, m.f1,
                      static_cast<double>(c.tp + c.fp) / static_cast<double>(conf.size())};
  });

  const GridPoint* best = nullptr;
  if (report.degenerate) {
    const auto it = std::min_element(report.grid.begin(), report.grid.end(),
                                     [](const GridPoint& a, const GridPoint& b) {
                                       return std::abs(a.threshold - 0.5) < std::abs(b.threshold - 0.5);
                                     });
    best = &*it;
  } else {
    for (const auto& p : report.grid) {
      if (best == nullptr || p.f1 >= best->f1) best = &p;
    }
  }
  report.optimal_threshold = best->threshold;
  report.optimal_f1 = best->f1;
  report.mean_degree = best->mean_degree;
  return report;
}

std::vector<ConfidenceVector> predict_all(std::span<const Sample> samples,
                                          const ModelParams& params, const ModelConfig& cfg) {
  std::vector<ConfidenceVector> out(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) { out[i] = forward(samples[i].input, params, cfg); });
  return out;
}

ThresholdReport tune_threshold(const ModelParams& params, const ModelConfig& model_cfg,
                               std::span<const Sample> validation, const ThrottleConfig& cfg) {
  const auto conf = predict_all(validation, params, model_cfg);
  std::vector<DeltaBitmap> labels;
  labels.reserve(validation.size());
  for (const auto& s : validation) labels.push_back(s.label);
  return tune_threshold(conf, labels, cfg);
}

std::string threshold_report_json(const ThresholdReport& report) {
  nlohmann::ordered_json j;
  j["optimal_threshold"] = report.optimal_threshold;
  j["optimal_f1"] = report.optimal_f1;
  j["mean_degree"] = report.mean_degree;
  j["samples"] = report.samples;
  j["degenerate"] = report.degenerate;
  auto& grid = j["grid"] = nlohmann::ordered_json::array();
  for (const auto& p : report.grid) {
    grid.push_back({{"threshold", p.threshold},
                    {"precision", p.precision},
                    {"recall", p.recall},
                    {"f1", p.f1},
                    {"mean_degree", p.mean_degree}});
  }
  return j.dump(2) + "\n";
}

ThresholdReport threshold_report_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ThresholdReport r;
  r.optimal_threshold = j.at("optimal_threshold").get<double>();
  r.optimal_f1 = j.at("optimal_f1").get<double>();
  r.mean_degree = j.at("mean_degree").get<double>();
  r.samples = j.at("samples").get<std::size_t>();
  r.degenerate = j.at("degenerate").get<bool>();
  for (const auto& p : j.at("grid")) {
    r.grid.push_back({p.at("threshold").get<double>(), p.at("precision").get<double>(),
                      p.at("recall").get<double>(), p.at("f1").get<double>(),
                      p.at("mean_degree").get<double>()});
  }
  return r;
}

std::string threshold_grid_csv(const ThresholdReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "threshold,precision,recall,f1,mean_degree\n";
  for (const auto& p : report.grid) {
    out << p.threshold << ',' << p.precision << ',' << p.recall << ',' << p.f1 << ','
        << p.mean_degree << '\n';
  }
  return out.str();
}

}  // namespace segfetch
