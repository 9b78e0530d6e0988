#include "segfetch/simulator.hpp"

#include <algorithm>
#include <deque>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "segfetch/throttle.hpp"

namespace segfetch {

void CacheConfig::validate() const {
  if (sets == 0) throw ConfigError("cache sets must be positive");
  if (ways == 0) throw ConfigError("cache ways must be positive");
  if (line_bytes == 0) throw ConfigError("cache line size must be positive");
  if (replacement != "lru") throw ConfigError("unsupported replacement policy '" + replacement + "'");
}

Cache::Cache(const CacheConfig& cfg) : cfg_(cfg), sets_(cfg.sets) {
  cfg_.validate();
  for (auto& s : sets_) s.reserve(cfg_.ways);
}

std::vector<Cache::Line>& Cache::set_of(std::uint64_t block) { return sets_[block % cfg_.sets]; }

const std::vector<Cache::Line>& Cache::set_of(std::uint64_t block) const {
  return sets_[block % cfg_.sets];
}

bool Cache::contains(std::uint64_t block) const {
  const auto& set = set_of(block);
  return std::any_of(set.begin(), set.end(), [&](const Line& l) { return l.block == block; });
}

Cache::Line* Cache::touch(std::uint64_t block) {
  auto& set = set_of(block);
  auto it = std::find_if(set.begin(), set.end(), [&](const Line& l) { return l.block == block; });
  if (it == set.end()) return nullptr;
  std::rotate(set.begin(), it, it + 1);
  return &set.front();
}

std::optional<Cache::Line> Cache::insert(std::uint64_t block, bool prefetched) {
  auto& set = set_of(block);
  std::optional<Line> evicted;
  if (set.size() == cfg_.ways) {
    evicted = set.back();
    set.pop_back();
  }
  set.insert(set.begin(), Line{block, prefetched});
  return evicted;
}

std::size_t Cache::unused_prefetched() const {
  std::size_t n = 0;
  for (const auto& set : sets_) {
    n += static_cast<std::size_t>(
        std::count_if(set.begin(), set.end(), [](const Line& l) { return l.prefetched; }));
  }
  return n;
}

Throughput parse_throughput(const std::string& name) {
  if (name == "L" || name == "low") return Throughput::low;
  if (name == "H" || name == "high") return Throughput::high;
  throw ConfigError("unknown throughput '" + name + "' (expected L or H)");
}

std::string throughput_name(Throughput t) { return t == Throughput::low ? "L" : "H"; }

TriggerStream parse_trigger_stream(const std::string& name) {
  if (name == "all" || name == "all_accesses") return TriggerStream::all_accesses;
  if (name == "misses" || name == "llc_misses") return TriggerStream::llc_misses;
  throw ConfigError("unknown trigger stream '" + name + "'");
}

std::string trigger_stream_name(TriggerStream s) {
  return s == TriggerStream::all_accesses ? "all_accesses" : "llc_misses";
}

double SimReport::mean_degree() const {
  std::uint64_t n = 0;
  std::uint64_t total = 0;
  for (const auto& [degree, count] : degree_histogram) {
    n += count;
    total += degree * count;
  }
  return n == 0 ? 0.0 : static_cast<double>(total) / static_cast<double>(n);
}

std::uint64_t baseline_misses(std::span<const MemoryAccess> trace, const CacheConfig& cache,
                              const AddressConfig& addr) {
  Cache c(cache);
  std::uint64_t misses = 0;
  for (const auto& a : trace) {
    const std::uint64_t block = block_address(a.vaddr, addr);
    if (c.touch(block) == nullptr) {
      ++misses;
      c.insert(block, false);
    }
  }
  return misses;
}

namespace {

struct Pending {
  std::uint64_t block;
  std::uint64_t ready;
};

}  // namespace

SimReport simulate(std::span<const MemoryAccess> trace, Prefetcher* prefetcher,
                   const SimConfig& cfg, const AddressConfig& addr) {
  if (trace.empty()) throw EmptyTraceError("simulate: empty trace");
  cfg.cache.validate();
  addr.validate();

  SimReport r;
  r.prefetcher = prefetcher == nullptr ? "none" : prefetcher->name();
  r.baseline_misses = baseline_misses(trace, cfg.cache, addr);

  Cache cache(cfg.cache);
  std::deque<Pending> pending;  // ready cycles are non-decreasing
  std::unordered_set<std::uint64_t> in_flight;
  std::uint64_t busy_until = 0;
  std::vector<std::uint64_t> candidates;
  const std::uint64_t T = cfg.latency.latency;

  auto account_eviction = [&](const std::optional<Cache::Line>& ev) {
    if (ev && ev->prefetched) ++r.useless_evicted;
  };
  auto install_prefetch = [&](std::uint64_t block) {
    if (cache.contains(block)) return;
    ++r.prefetches_issued;
    account_eviction(cache.insert(block, true));
  };

  for (std::size_t i = 0; i < trace.size(); ++i) {
    const MemoryAccess& a = trace[i];
    while (!pending.empty() && pending.front().ready <= a.cycle) {
      const std::uint64_t b = pending.front().block;
      pending.pop_front();
      if (in_flight.erase(b) != 0) install_prefetch(b);
    }

    const std::uint64_t block = block_address(a.vaddr, addr);
    ++r.demand_accesses;
    AccessEvent ev{i, block, false, false, false, std::nullopt};
    if (Cache::Line* line = cache.touch(block)) {
      ev.hit = true;
      if (line->prefetched) {
        line->prefetched = false;
        ev.useful = true;
        ++r.useful_prefetches;
      }
    } else {
      ++r.demand_misses;
      if (in_flight.erase(block) != 0) {
        ev.late = true;
        ++r.late_prefetches;
        ++r.prefetches_issued;
      }
      const auto evicted = cache.insert(block, false);
      account_eviction(evicted);
      if (evicted) ev.evicted = evicted->block;
    }
    if (cfg.record_events) r.events.push_back(ev);

    if (prefetcher == nullptr) continue;
    if (cfg.triggers == TriggerStream::llc_misses && ev.hit) continue;

    const TriggerEvent trig{i, a.cycle, a.pc, a.vaddr, block, ev.hit};
    ++r.triggers;
    prefetcher->observe(trig);
    if (cfg.latency.throughput == Throughput::low && a.cycle < busy_until) {
      ++r.triggers_dropped;
      continue;
    }
    if (cfg.latency.throughput == Throughput::low) busy_until = a.cycle + T;

    candidates.clear();
    prefetcher->predict(trig, candidates);
    ++r.degree_histogram[candidates.size()];
    r.prefetches_requested += candidates.size();
    for (std::uint64_t b : candidates) {
      if (b > addr.block_mask() || cache.contains(b) || in_flight.contains(b)) continue;
      if (T == 0) {
        install_prefetch(b);
      } else {
        in_flight.insert(b);
        pending.push_back({b, a.cycle + T});
      }
    }
  }

  if (prefetcher != nullptr) r.cold_starts = prefetcher->cold_starts();
  r.in_flight_at_end = in_flight.size();
  r.resident_unused = cache.unused_prefetched();
  r.accuracy_defined = r.prefetches_issued > 0;
  r.accuracy = r.accuracy_defined ? static_cast<double>(r.useful_prefetches) /
                                        static_cast<double>(r.prefetches_issued)
                                  : 0.0;
  r.coverage = r.baseline_misses == 0 ? 0.0
                                      : static_cast<double>(r.useful_prefetches) /
                                            static_cast<double>(r.baseline_misses);
  return r;
}

std::string sim_report_json(const SimReport& r) {
  nlohmann::ordered_json j;
  j["prefetcher"] = r.prefetcher;
  j["demand_accesses"] = r.demand_accesses;
  j["demand_misses"] = r.demand_misses;
  j["baseline_misses"] = r.baseline_misses;
  j["triggers"] = r.triggers;
  j["triggers_dropped"] = r.triggers_dropped;
  j["cold_starts"] = r.cold_starts;
  j["prefetches_requested"] = r.prefetches_requested;
  j["prefetches_issued"] = r.prefetches_issued;
  j["useful_prefetches"] = r.useful_prefetches;
  j["useless_evicted"] = r.useless_evicted;
  j["late_prefetches"] = r.late_prefetches;
  j["resident_unused"] = r.resident_unused;
  j["in_flight_at_end"] = r.in_flight_at_end;
  j["accuracy"] = r.accuracy;
  j["accuracy_defined"] = r.accuracy_defined;
  j["coverage"] = r.coverage;
  j["mean_degree"] = r.mean_degree();
  auto& h = j["degree_histogram"] = nlohmann::ordered_json::object();
  for (const auto& [degree, count] : r.degree_histogram) h[std::to_string(degree)] = count;
  return j.dump(2) + "\n";
}

std::string degree_histogram_csv(const SimReport& r) {
  std::ostringstream out;
  out << "degree,triggers\n";
  for (const auto& [degree, count] : r.degree_histogram) out << degree << ',' << count << '\n';
  return out.str();
}

std::string miss_timeline_csv(const SimReport& r, std::size_t interval) {
  if (interval == 0) throw RangeError("miss timeline interval must be positive");
  std::ostringstream out;
  out.precision(17);
  out << "first_access,accesses,misses,miss_rate\n";
  for (std::size_t start = 0; start < r.events.size(); start += interval) {
    const std::size_t end = std::min(r.events.size(), start + interval);
    std::size_t misses = 0;
    for (std::size_t i = start; i < end; ++i) misses += !r.events[i].hit;
    out << start << ',' << end - start << ',' << misses << ','
        << static_cast<double>(misses) / static_cast<double>(end - start) << '\n';
  }
  return out.str();
}

NextLinePrefetcher::NextLinePrefetcher(std::size_t degree) : degree_(degree) {
  if (degree == 0) throw ConfigError("next-line degree must be positive");
}

void NextLinePrefetcher::predict(const TriggerEvent& event, std::vector<std::uint64_t>& out) {
  for (std::size_t k = 1; k <= degree_; ++k) out.push_back(event.block + k);
}

StridePrefetcher::StridePrefetcher(std::size_t table_size, std::size_t degree, int confirmations)
    : table_(table_size), degree_(degree), confirmations_(confirmations) {
  if (table_size == 0) throw ConfigError("stride table size must be positive");
  if (degree == 0) throw ConfigError("stride degree must be positive");
  if (confirmations < 1) throw ConfigError("stride confirmations must be >= 1");
}

const StridePrefetcher::Entry& StridePrefetcher::entry_for(std::uint64_t pc) const {
  return table_[pc % table_.size()];
}

void StridePrefetcher::observe(const TriggerEvent& event) {
  Entry& e = table_[event.pc % table_.size()];
  if (!e.valid || e.pc != event.pc) {
    e = Entry{event.pc, event.block, 0, 0, true};
    return;
  }
  const std::int64_t stride =
      static_cast<std::int64_t>(event.block) - static_cast<std::int64_t>(e.last_block);
  if (stride != 0 && stride == e.stride) {
    ++e.confidence;
  } else {
    e.stride = stride;
    e.confidence = 0;
  }
  e.last_block = event.block;
}

void StridePrefetcher::predict(const TriggerEvent& event, std::vector<std::uint64_t>& out) {
  const Entry& e = entry_for(event.pc);
  if (!e.valid || e.pc != event.pc || e.stride == 0 || e.confidence < confirmations_) return;
  for (std::size_t k = 1; k <= degree_; ++k) {
    const std::int64_t target =
        static_cast<std::int64_t>(event.block) + static_cast<std::int64_t>(k) * e.stride;
    if (target < 0) break;
    out.push_back(static_cast<std::uint64_t>(target));
  }
}

BestOffsetPrefetcher::BestOffsetPrefetcher(Config cfg)
    : cfg_(std::move(cfg)),
      table_(cfg_.table_size, 0),
      table_valid_(cfg_.table_size, false),
      scores_(cfg_.offsets.size(), 0) {
  if (cfg_.offsets.empty()) throw ConfigError("best-offset needs at least one offset");
  if (cfg_.round_length == 0) throw ConfigError("best-offset round length must be positive");
  if (cfg_.table_size == 0) throw ConfigError("best-offset table size must be positive");
  if (cfg_.degree == 0) throw ConfigError("best-offset degree must be positive");
  for (auto d : cfg_.offsets) {
    if (d == 0) throw ConfigError("best-offset offsets must be non-zero");
  }
}

bool BestOffsetPrefetcher::recent(std::uint64_t block) const {
  const std::size_t slot = block % table_.size();
  return table_valid_[slot] && table_[slot] == block;
}

void BestOffsetPrefetcher::observe(const TriggerEvent& event) {
  for (std::size_t k = 0; k < cfg_.offsets.size(); ++k) {
    const std::int64_t base = static_cast<std::int64_t>(event.block) - cfg_.offsets[k];
    if (base >= 0 && recent(static_cast<std::uint64_t>(base))) ++scores_[k];
  }
  const std::size_t slot = event.block % table_.size();
  table_[slot] = event.block;
  table_valid_[slot] = true;

  if (++in_round_ < cfg_.round_length) return;
  std::size_t best = 0;
  for (std::size_t k = 1; k < scores_.size(); ++k) {
    if (scores_[k] > scores_[best]) best = k;
  }
  active_ = scores_[best] > cfg_.score_threshold ? cfg_.offsets[best] : 0;
  std::fill(scores_.begin(), scores_.end(), 0);
  in_round_ = 0;
  ++rounds_;
}

void BestOffsetPrefetcher::predict(const TriggerEvent& event, std::vector<std::uint64_t>& out) {
  if (active_ == 0) return;
  for (std::size_t k = 1; k <= cfg_.degree; ++k) {
    const std::int64_t target =
        static_cast<std::int64_t>(event.block) + static_cast<std::int64_t>(k) * active_;
    if (target < 0) break;
    out.push_back(static_cast<std::uint64_t>(target));
  }
}

OraclePrefetcher::OraclePrefetcher(std::span<const MemoryAccess> trace, const AddressConfig& addr,
                                   std::size_t window, std::size_t skip)
    : trace_(trace), addr_(addr), window_(window), skip_(skip) {
  if (window == 0) throw ConfigError("oracle window must be positive");
}

void OraclePrefetcher::predict(const TriggerEvent& event, std::vector<std::uint64_t>& out) {
  const std::size_t first = event.index + skip_ + 1;
  const std::size_t last = std::min(trace_.size(), event.index + skip_ + window_ + 1);
  for (std::size_t i = first; i < last; ++i) {
    const std::uint64_t b = block_address(trace_[i].vaddr, addr_);
    if (b != event.block && std::find(out.begin(), out.end(), b) == out.end()) out.push_back(b);
  }
}

void ScriptedPrefetcher::predict(const TriggerEvent& event, std::vector<std::uint64_t>& out) {
  if (auto it = script_.find(event.index); it != script_.end()) {
    out.insert(out.end(), it->second.begin(), it->second.end());
  }
}

ModelPrefetcher::ModelPrefetcher(const ModelParams& params, const ModelConfig& model_cfg,
                                 const FeatureConfig& features, const LabelConfig& labels,
                                 ModelPrefetcherConfig cfg)
    : params_(params), model_cfg_(model_cfg), features_(features), labels_(labels), cfg_(cfg) {
  model_cfg_.validate();
  features_.validate();
  labels_.validate();
  if (model_cfg_.history != features_.history) throw ConfigError("model and feature history differ");
  if (model_cfg_.outputs != labels_.bitmap_size()) throw ConfigError("model outputs differ from 2 * bound");
  if (model_cfg_.features != features_.feature_width(InputMode::segmented)) {
    throw ConfigError("model input width differs from the segment count");
  }
  if (cfg_.mode == DegreeMode::threshold && !(cfg_.threshold > 0.0 && cfg_.threshold < 1.0)) {
    throw ConfigError("prefetch threshold must lie in (0, 1)");
  }
  history_.reserve(features_.history);
}

void ModelPrefetcher::observe(const TriggerEvent& event) {
  if (history_.size() == features_.history) history_.pop_back();
  history_.insert(history_.begin(), MemoryAccess{event.index, event.cycle, event.pc, event.vaddr});
}

std::optional<DeltaBitmap> ModelPrefetcher::select() const {
  if (history_.size() < features_.history) return std::nullopt;
  const ModelInput in = build_model_input(history_, features_);
  const ConfidenceVector conf = forward(in, params_, model_cfg_);
  DeltaBitmap bits = cfg_.mode == DegreeMode::top_k ? top_k(conf, cfg_.top_k)
                                                    : binarize(conf, cfg_.threshold);
  return cap_degree(bits, conf, cfg_.max_degree);
}

void ModelPrefetcher::predict(const TriggerEvent& event, std::vector<std::uint64_t>& out) {
  const auto bits = select();
  if (!bits) {
    ++cold_starts_;
    return;
  }
  const auto blocks = prefetch_addresses(event.block, bitmap_to_deltas(*bits, labels_), features_.addr);
  out.insert(out.end(), blocks.begin(), blocks.end());
}

std::unique_ptr<Prefetcher> make_baseline(const std::string& name, std::size_t degree) {
  if (name == "none") return nullptr;
  if (name == "next_line") return std::make_unique<NextLinePrefetcher>(degree);
  if (name == "stride") return std::make_unique<StridePrefetcher>(256, degree);
  if (name == "best_offset") {
    BestOffsetPrefetcher::Config c;
    c.degree = degree;
    return std::make_unique<BestOffsetPrefetcher>(c);
  }
  throw ConfigError("unknown prefetcher '" + name + "'");
}

}  // namespace segfetch
