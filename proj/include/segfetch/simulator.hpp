#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "segfetch/features.hpp"
#include "segfetch/labeling.hpp"
#include "segfetch/model.hpp"
#include "segfetch/trace.hpp"

namespace segfetch {

struct CacheConfig {
  std::size_t sets = 64;
  std::size_t ways = 16;
  std::size_t line_bytes = 64;
  std::string replacement = "lru";

  void validate() const;
  std::size_t capacity_bytes() const { return sets * ways * line_bytes; }
  std::size_t capacity_blocks() const { return sets * ways; }
};

/// Set-associative cache with LRU replacement. Lines carry a "prefetched,
/// not yet used" tag. Set index = block mod sets.
class Cache {
 public:
  explicit Cache(const CacheConfig& cfg);

  struct Line {
    std::uint64_t block = 0;
    bool prefetched = false;
  };

  bool contains(std::uint64_t block) const;
  /// Refreshes recency. Returns the line or null on a miss.
  Line* touch(std::uint64_t block);
  /// Inserts a block known to be absent; returns the evicted line, if any.
  std::optional<Line> insert(std::uint64_t block, bool prefetched);
  /// Number of resident lines still tagged prefetched.
  std::size_t unused_prefetched() const;

 private:
  std::vector<Line>& set_of(std::uint64_t block);
  const std::vector<Line>& set_of(std::uint64_t block) const;

  CacheConfig cfg_;
  std::vector<std::vector<Line>> sets_;  // each ordered most recent first
};

enum class Throughput { low, high };
Throughput parse_throughput(const std::string& name);
std::string throughput_name(Throughput t);

struct LatencyModel {
  std::uint64_t latency = 0;  // T, cycles
  Throughput throughput = Throughput::high;
};

enum class TriggerStream { all_accesses, llc_misses };
TriggerStream parse_trigger_stream(const std::string& name);
std::string trigger_stream_name(TriggerStream s);

struct PrefetchRequest {
  std::uint64_t block = 0;
  std::uint64_t issue_cycle = 0;
  std::string source;
};

struct TriggerEvent {
  std::size_t index = 0;  // position in the trace
  std::uint64_t cycle = 0;
  std::uint64_t pc = 0;
  std::uint64_t vaddr = 0;
  std::uint64_t block = 0;
  bool hit = false;
};

/// `observe` sees every trigger; `predict` runs only for triggers the
/// throughput model accepts and appends candidate blocks to `out`.
class Prefetcher {
 public:
  virtual ~Prefetcher() = default;
  virtual std::string name() const = 0;
  virtual void observe(const TriggerEvent&) {}
  virtual void predict(const TriggerEvent& event, std::vector<std::uint64_t>& out) = 0;
  /// Triggers that produced no prediction for lack of history.
  virtual std::uint64_t cold_starts() const { return 0; }
};

struct SimConfig {
  CacheConfig cache;
  LatencyModel latency;
  TriggerStream triggers = TriggerStream::all_accesses;
  bool record_events = false;
};

struct AccessEvent {
  std::size_t index = 0;
  std::uint64_t block = 0;
  bool hit = false;
  bool useful = false;  // hit on a prefetched, unused line
  bool late = false;    // missed while a prefetch for the block was in flight
  std::optional<std::uint64_t> evicted;
};

struct SimReport {
  std::string prefetcher;
  std::uint64_t demand_accesses = 0;
  std::uint64_t demand_misses = 0;
  std::uint64_t baseline_misses = 0;
  std::uint64_t triggers = 0;
  std::uint64_t triggers_dropped = 0;  // throughput "L" while busy
  std::uint64_t cold_starts = 0;
  std::uint64_t prefetches_requested = 0;
  std::uint64_t prefetches_issued = 0;
  std::uint64_t useful_prefetches = 0;
  std::uint64_t useless_evicted = 0;
  std::uint64_t late_prefetches = 0;
  std::uint64_t resident_unused = 0;
  std::uint64_t in_flight_at_end = 0;
  double accuracy = 0.0;
  bool accuracy_defined = false;
  double coverage = 0.0;
  std::map<std::size_t, std::uint64_t> degree_histogram;  // degree -> accepted triggers
  std::vector<AccessEvent> events;

  double mean_degree() const;
};

/// Demand misses of a run without prefetching.
std::uint64_t baseline_misses(std::span<const MemoryAccess> trace, const CacheConfig& cache,
                              const AddressConfig& addr);

/// Replays `trace` through the cache with `prefetcher` (may be null).
/// Prefetch candidates become insertable at trigger cycle + T; candidates for
/// blocks already resident or in flight are dropped. A demand miss on an
/// in-flight block counts as late and as an issued, useless prefetch.
/// Requests still in flight at the end are not issued.
SimReport simulate(std::span<const MemoryAccess> trace, Prefetcher* prefetcher,
                   const SimConfig& cfg, const AddressConfig& addr);

std::string sim_report_json(const SimReport& report);
std::string degree_histogram_csv(const SimReport& report);
/// Miss rate per `interval` demand accesses (requires recorded events).
std::string miss_timeline_csv(const SimReport& report, std::size_t interval);

// Baseline prefetchers.

class NextLinePrefetcher : public Prefetcher {
 public:
  explicit NextLinePrefetcher(std::size_t degree);
  std::string name() const override { return "next_line"; }
  void predict(const TriggerEvent& event, std::vector<std::uint64_t>& out) override;

 private:
  std::size_t degree_;
};

/// Per-PC direct-mapped table of (last block, stride, confidence). The
/// confidence counts consecutive repeats of the stride; the prefetcher issues
/// block + k*stride for k = 1..degree once it reaches `confirmations`.
class StridePrefetcher : public Prefetcher {
 public:
  explicit StridePrefetcher(std::size_t table_size = 256, std::size_t degree = 1,
                            int confirmations = 3);
  std::string name() const override { return "stride"; }
  void observe(const TriggerEvent& event) override;
  void predict(const TriggerEvent& event, std::vector<std::uint64_t>& out) override;

  struct Entry {
    std::uint64_t pc = 0;
    std::uint64_t last_block = 0;
    std::int64_t stride = 0;
    int confidence = 0;
    bool valid = false;
  };
  const Entry& entry_for(std::uint64_t pc) const;

 private:
  std::vector<Entry> table_;
  std::size_t degree_;
  int confirmations_;
};

/// Offset prefetcher with a recent-requests table. During a round of
/// `round_length` triggers, each candidate offset d scores a point when
/// block - d is in the table. At the end of the round the best-scoring offset
/// (smallest on ties) becomes active if its score exceeds `score_threshold`.
class BestOffsetPrefetcher : public Prefetcher {
 public:
  struct Config {
    std::vector<std::int64_t> offsets = {1, 2, 3, 4, 5, 6, 8, 9, 10, 12, 15, 16, 18, 20, 24, 25,
                                         27, 30, 32, 36, 40, 45, 48, 50, 54, 60, 64};
    std::size_t round_length = 64;  // triggers per scoring round
    std::size_t score_threshold = 1;
    std::size_t table_size = 256;
    std::size_t degree = 1;
  };

  BestOffsetPrefetcher() : BestOffsetPrefetcher(Config{}) {}
  explicit BestOffsetPrefetcher(Config cfg);
  std::string name() const override { return "best_offset"; }
  void observe(const TriggerEvent& event) override;
  void predict(const TriggerEvent& event, std::vector<std::uint64_t>& out) override;

  /// 0 while no offset has been selected.
  std::int64_t active_offset() const { return active_; }
  std::size_t rounds_completed() const { return rounds_; }

 private:
  bool recent(std::uint64_t block) const;

  Config cfg_;
  std::vector<std::uint64_t> table_;  // direct-mapped recent blocks
  std::vector<bool> table_valid_;
  std::vector<std::size_t> scores_;
  std::size_t in_round_ = 0;
  std::size_t rounds_ = 0;
  std::int64_t active_ = 0;
};

/// Prefetches the distinct blocks of the next `window` accesses after a skip
/// of `skip`, read directly from the trace.
class OraclePrefetcher : public Prefetcher {
 public:
  OraclePrefetcher(std::span<const MemoryAccess> trace, const AddressConfig& addr,
                   std::size_t window, std::size_t skip = 0);
  std::string name() const override { return "oracle"; }
  void predict(const TriggerEvent& event, std::vector<std::uint64_t>& out) override;

 private:
  std::span<const MemoryAccess> trace_;
  AddressConfig addr_;
  std::size_t window_;
  std::size_t skip_;
};

/// Issues a fixed list of blocks at given trace positions. Test scaffolding
/// for hand-built scenarios.
class ScriptedPrefetcher : public Prefetcher {
 public:
  explicit ScriptedPrefetcher(std::map<std::size_t, std::vector<std::uint64_t>> script)
      : script_(std::move(script)) {}
  std::string name() const override { return "scripted"; }
  void predict(const TriggerEvent& event, std::vector<std::uint64_t>& out) override;

 private:
  std::map<std::size_t, std::vector<std::uint64_t>> script_;
};

enum class DegreeMode { threshold, top_k };

struct ModelPrefetcherConfig {
  DegreeMode mode = DegreeMode::threshold;
  double threshold = 0.5;
  std::size_t top_k = 10;
  std::size_t max_degree = 0;  // 0 = uncapped
};

/// Runs the trained network on the last N triggers (segmented input with
/// context) and prefetches the deltas it selects.
class ModelPrefetcher : public Prefetcher {
 public:
  ModelPrefetcher(const ModelParams& params, const ModelConfig& model_cfg,
                  const FeatureConfig& features, const LabelConfig& labels,
                  ModelPrefetcherConfig cfg);
  std::string name() const override { return "model"; }
  void observe(const TriggerEvent& event) override;
  void predict(const TriggerEvent& event, std::vector<std::uint64_t>& out) override;
  std::uint64_t cold_starts() const override { return cold_starts_; }

  /// Selected bits for the current history, or nullopt during cold start.
  std::optional<DeltaBitmap> select() const;

 private:
  const ModelParams& params_;
  ModelConfig model_cfg_;
  FeatureConfig features_;
  LabelConfig labels_;
  ModelPrefetcherConfig cfg_;
  std::vector<MemoryAccess> history_;  // most recent first, at most N
  std::uint64_t cold_starts_ = 0;
};

/// Prefetcher factory for the CLI: "none", "next_line", "stride",
/// "best_offset". Returns null for "none".
std::unique_ptr<Prefetcher> make_baseline(const std::string& name, std::size_t degree);

}  // namespace segfetch
