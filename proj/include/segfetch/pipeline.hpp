#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "segfetch/features.hpp"
#include "segfetch/labeling.hpp"
#include "segfetch/model.hpp"
#include "segfetch/simulator.hpp"
#include "segfetch/throttle.hpp"
#include "segfetch/trace.hpp"

namespace segfetch {

inline constexpr const char* kVersion = "0.1.0";

struct StageDependencyError : Error {
  explicit StageDependencyError(const std::string& m) : Error("stage_dependency", m) {}
};

struct StalenessError : Error {
  explicit StalenessError(const std::string& m) : Error("stale", m) {}
};

struct TraceSource {
  std::string file;  // empty = generate from `pattern`
  TraceFormat format = TraceFormat::automatic;
  PatternSpec pattern;
  std::size_t length = 20000;
};

struct SimulateSettings {
  TriggerStream triggers = TriggerStream::all_accesses;
  std::vector<std::string> baselines = {"next_line", "stride", "best_offset"};
  std::size_t baseline_degree = 1;
  bool oracle = true;
  std::size_t top_k = 10;
  std::size_t timeline_interval = 1000;
};

struct EvalSettings {
  std::vector<InputMode> input_modes = {InputMode::delta, InputMode::page_offset, InputMode::segmented};
  std::vector<unsigned> segment_bits = {6};
  std::vector<ContextMode> context_modes = {ContextMode::none, ContextMode::pc, ContextMode::pd};
};

struct SweepSettings {
  std::vector<std::uint64_t> latencies = {0, 50, 100, 200};
  std::vector<Throughput> throughputs = {Throughput::low, Throughput::high};
  std::vector<bool> distance = {false, true};
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  TraceSource trace;
  FeatureConfig features;
  LabelConfig labels;
  ModelConfig model;
  TrainConfig train;
  ThrottleConfig throttle;
  CacheConfig cache;
  LatencyModel latency;
  bool distance = false;  // label with skip = ceil(T / mean cycles per access)
  SplitRatios split;
  SimulateSettings simulate;
  EvalSettings eval;
  SweepSettings sweep;

  /// Checks every section and the cross-field constraints.
  void validate() const;
  /// Model configuration for the segmented main model.
  ModelConfig main_model() const;
};

/// Parses a JSON document; absent keys keep their defaults, unknown keys
/// are rejected. The model's N, F and B derive from the feature and label
/// sections; explicit values must agree.
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON with every field spelled out.
std::string config_to_json(const ExperimentConfig& cfg);
/// FNV-1a of the canonical JSON.
std::string config_hash(const ExperimentConfig& cfg);

enum class Stage { gen, preprocess, train, tune, eval, simulate, sweep, report };
Stage parse_stage(const std::string& name);
std::string stage_name(Stage stage);
const std::vector<Stage>& all_stages();

/// Default run directory: <root>/<config hash>.
std::filesystem::path default_run_dir(const ExperimentConfig& cfg,
                                      const std::filesystem::path& root = "runs");

/// Runs one stage, reading upstream artifacts from and writing outputs plus
/// manifests/<stage>.json to `run_dir`. Throws StageDependencyError when an
/// upstream artifact is missing and StalenessError when upstream artifacts
/// were produced under a different config or have changed since.
void run_stage(Stage stage, const ExperimentConfig& cfg, const std::filesystem::path& run_dir);

/// Hex FNV-1a of a file's bytes.
std::string file_hash(const std::filesystem::path& path);

}  // namespace segfetch
