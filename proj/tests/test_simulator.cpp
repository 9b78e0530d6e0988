#include <gtest/gtest.h>

#include <map>

#include "segfetch/simulator.hpp"

using namespace segfetch;

namespace {

Trace blocks_trace(const std::vector<std::uint64_t>& blocks, std::uint64_t cycles_per_access = 1) {
  Trace t;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    t.push_back({i, i * cycles_per_access, 0x400000, blocks[i] << 6});
  }
  return t;
}

SimConfig tiny_cache(std::size_t sets, std::size_t ways) {
  SimConfig c;
  c.cache.sets = sets;
  c.cache.ways = ways;
  c.record_events = true;
  return c;
}

void expect_conserved(const SimReport& r) {
  EXPECT_EQ(r.useful_prefetches + r.useless_evicted + r.late_prefetches + r.resident_unused,
            r.prefetches_issued)
      << r.prefetcher;
  EXPECT_LE(r.useful_prefetches, r.prefetches_issued);
  EXPECT_GE(r.accuracy, 0.0);
  EXPECT_LE(r.accuracy, 1.0);
  EXPECT_GE(r.coverage, 0.0);
  EXPECT_LE(r.coverage, 1.0);
}

Trace mixed_trace(std::uint64_t seed) {
  PatternSpec spec;
  spec.kind = PatternKind::multi_stream;
  return generate_trace(spec, 6000, seed);
}

}  // namespace

TEST(Cache, LruWithinSet) {
  CacheConfig cfg;
  cfg.sets = 1;
  cfg.ways = 2;
  Cache c(cfg);
  EXPECT_FALSE(c.insert(1, false));
  EXPECT_FALSE(c.insert(2, true));
  ASSERT_NE(c.touch(1), nullptr);
  const auto evicted = c.insert(3, false);
  ASSERT_TRUE(evicted);
  EXPECT_EQ(evicted->block, 2u);
  EXPECT_TRUE(evicted->prefetched);
  EXPECT_TRUE(c.contains(1));
  EXPECT_EQ(c.touch(2), nullptr);
  EXPECT_EQ(c.unused_prefetched(), 0u);
}

TEST(Cache, InvalidConfig) {
  CacheConfig cfg;
  cfg.sets = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.replacement = "random";
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_EQ(CacheConfig{}.capacity_bytes(), 64u * 16 * 64);
}

TEST(Simulate, HandScenarioStepByStep) {
  // 2 sets x 1 way; set = block mod 2. Block 3 is prefetched at access 0.
  const Trace trace = blocks_trace({0, 2, 3, 5, 2});
  ScriptedPrefetcher p(std::map<std::size_t, std::vector<std::uint64_t>>{{0, {3}}});
  const SimReport r = simulate(trace, &p, tiny_cache(2, 1), {});

  const std::vector<bool> hits{false, false, true, false, true};
  const std::vector<std::optional<std::uint64_t>> evictions{std::nullopt, 0, std::nullopt, 3, std::nullopt};
  ASSERT_EQ(r.events.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(r.events[i].hit, hits[i]) << i;
    EXPECT_EQ(r.events[i].evicted, evictions[i]) << i;
    EXPECT_EQ(r.events[i].useful, i == 2) << i;
  }
  EXPECT_EQ(r.prefetches_issued, 1u);
  EXPECT_EQ(r.useful_prefetches, 1u);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.demand_misses, 3u);
  EXPECT_EQ(r.baseline_misses, 4u);
  EXPECT_DOUBLE_EQ(r.coverage, 0.25);
  expect_conserved(r);
}

TEST(Simulate, NoPrefetcher) {
  const Trace trace = blocks_trace({1, 2, 1, 3});
  const SimReport r = simulate(trace, nullptr, tiny_cache(4, 2), {});
  EXPECT_FALSE(r.accuracy_defined);
  EXPECT_EQ(r.accuracy, 0.0);
  EXPECT_EQ(r.coverage, 0.0);
  EXPECT_EQ(r.demand_misses, 3u);
  EXPECT_EQ(r.demand_misses, r.baseline_misses);
}

TEST(Simulate, EmptyTraceIsAnError) {
  EXPECT_THROW(simulate({}, nullptr, {}, {}), EmptyTraceError);
}

TEST(Simulate, DuplicateRequestsNotIssued) {
  const Trace trace = blocks_trace({4, 4, 4});
  ScriptedPrefetcher p(std::map<std::size_t, std::vector<std::uint64_t>>{{0, {4, 9, 9}}, {1, {9}}});
  const SimReport r = simulate(trace, &p, tiny_cache(4, 4), {});
  EXPECT_EQ(r.prefetches_requested, 4u);
  EXPECT_EQ(r.prefetches_issued, 1u);
  expect_conserved(r);
}

TEST(Simulate, LatePrefetch) {
  // Next-line with T=5 on a sequential trace: each request is still in
  // flight when its demand arrives.
  std::vector<std::uint64_t> blocks;
  for (std::uint64_t b = 0; b < 100; ++b) blocks.push_back(1000 + b);
  SimConfig cfg = tiny_cache(16, 4);
  cfg.latency = {5, Throughput::high};
  NextLinePrefetcher p(1);
  const SimReport r = simulate(blocks_trace(blocks), &p, cfg, {});
  EXPECT_EQ(r.useful_prefetches, 0u);
  EXPECT_EQ(r.late_prefetches, 99u);
  EXPECT_EQ(r.demand_misses, 100u);
  EXPECT_EQ(r.in_flight_at_end, 1u);  // requested by the last access
  expect_conserved(r);

  NextLinePrefetcher far(8);
  const SimReport r2 = simulate(blocks_trace(blocks), &far, cfg, {});
  EXPECT_GT(r2.useful_prefetches, 0u);
  EXPECT_GT(r2.in_flight_at_end, 0u);
  expect_conserved(r2);
}

TEST(Simulate, LowThroughputDropsTriggers) {
  const Trace trace = generate_trace({.kind = PatternKind::stride, .stride = 2}, 100, 1);
  SimConfig cfg;
  cfg.latency = {10, Throughput::low};
  NextLinePrefetcher p(1);
  const SimReport r = simulate(trace, &p, cfg, {});
  EXPECT_EQ(r.triggers, 100u);
  EXPECT_EQ(r.triggers_dropped, 90u);
  std::uint64_t accepted = 0;
  for (const auto& [degree, n] : r.degree_histogram) accepted += n;
  EXPECT_EQ(accepted, 10u);
}

TEST(Simulate, IssuedNonIncreasingInLatencyUnderLowThroughput) {
  const Trace trace = mixed_trace(3);
  for (const std::string name : {"next_line", "stride", "best_offset"}) {
    std::uint64_t previous = UINT64_MAX;
    for (std::uint64_t t : {0, 50, 100, 200}) {
      auto p = make_baseline(name, 2);
      SimConfig cfg;
      cfg.latency = {t, Throughput::low};
      const SimReport r = simulate(trace, p.get(), cfg, {});
      EXPECT_LE(r.prefetches_issued, previous) << name << " T=" << t;
      previous = r.prefetches_issued;
    }
  }
}

TEST(Simulate, ConservationAcrossPrefetchersAndLatencies) {
  for (std::uint64_t seed : {1, 2}) {
    const Trace trace = mixed_trace(seed);
    for (const std::string name : {"next_line", "stride", "best_offset"}) {
      for (std::uint64_t t : {0, 7, 100}) {
        for (Throughput tp : {Throughput::low, Throughput::high}) {
          auto p = make_baseline(name, 3);
          SimConfig cfg;
          cfg.cache.sets = 16;
          cfg.cache.ways = 4;
          cfg.latency = {t, tp};
          expect_conserved(simulate(trace, p.get(), cfg, {}));
        }
      }
    }
  }
}

TEST(Simulate, OracleCoverageAnalytic) {
  // 100 distinct blocks repeated 10 times; the cache holds them all, so the
  // only baseline misses are the 100 cold ones and the oracle covers all
  // but the very first.
  std::vector<std::uint64_t> blocks;
  for (int rep = 0; rep < 10; ++rep) {
    for (std::uint64_t b = 0; b < 100; ++b) blocks.push_back(5000 + 7 * b);
  }
  const Trace trace = blocks_trace(blocks);
  OraclePrefetcher oracle(trace, {}, 16);
  const SimReport r = simulate(trace, &oracle, {}, {});
  EXPECT_EQ(r.baseline_misses, 100u);
  EXPECT_NEAR(r.coverage, 1.0 - 1.0 / 100.0, 1e-9);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
}

TEST(Simulate, OracleDominatesBaselines) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const Trace trace = mixed_trace(seed);
    for (const auto& [sets, window] : {std::pair<std::size_t, std::size_t>{16, 1}, {64, 16}}) {
      SimConfig cfg;
      cfg.cache.sets = sets;
      cfg.cache.ways = 4;
      OraclePrefetcher oracle(trace, {}, window);
      const double best = simulate(trace, &oracle, cfg, {}).coverage;
      for (const std::string name : {"next_line", "stride", "best_offset"}) {
        auto p = make_baseline(name, 1);
        EXPECT_GE(best, simulate(trace, p.get(), cfg, {}).coverage) << name << " window " << window;
      }
    }
  }
}

TEST(Simulate, BaselineMissesIndependentOfPrefetcher) {
  const Trace trace = mixed_trace(4);
  SimConfig cfg;
  cfg.cache.sets = 8;
  cfg.cache.ways = 2;
  const std::uint64_t base = baseline_misses(trace, cfg.cache, {});
  EXPECT_EQ(simulate(trace, nullptr, cfg, {}).demand_misses, base);
  for (const std::string name : {"next_line", "stride", "best_offset"}) {
    auto p = make_baseline(name, 1);
    EXPECT_EQ(simulate(trace, p.get(), cfg, {}).baseline_misses, base);
  }
}

TEST(Simulate, DeterministicReports) {
  const Trace trace = mixed_trace(5);
  SimConfig cfg;
  cfg.record_events = true;
  cfg.latency = {20, Throughput::low};
  auto a = make_baseline("best_offset", 2);
  auto b = make_baseline("best_offset", 2);
  const SimReport ra = simulate(trace, a.get(), cfg, {});
  const SimReport rb = simulate(trace, b.get(), cfg, {});
  EXPECT_EQ(sim_report_json(ra), sim_report_json(rb));
  EXPECT_EQ(miss_timeline_csv(ra, 100), miss_timeline_csv(rb, 100));
  EXPECT_EQ(degree_histogram_csv(ra), degree_histogram_csv(rb));
}

TEST(Baselines, NextLine) {
  NextLinePrefetcher p(2);
  std::vector<std::uint64_t> out;
  p.predict({.block = 10}, out);
  EXPECT_EQ(out, (std::vector<std::uint64_t>{11, 12}));
}

TEST(Baselines, StrideConfirmsBeforeIssuing) {
  StridePrefetcher p;
  std::vector<std::vector<std::uint64_t>> issued;
  for (std::uint64_t i = 0; i < 6; ++i) {
    TriggerEvent e{.index = i, .pc = 0x400100, .block = 3 * i};
    p.observe(e);
    std::vector<std::uint64_t> out;
    p.predict(e, out);
    issued.push_back(out);
  }
  for (std::size_t i = 0; i < 4; ++i) EXPECT_TRUE(issued[i].empty()) << i;
  EXPECT_EQ(issued[4], (std::vector<std::uint64_t>{15}));
  EXPECT_EQ(issued[5], (std::vector<std::uint64_t>{18}));
  EXPECT_EQ(p.entry_for(0x400100).stride, 3);
}

TEST(Baselines, StrideSeparatesPcs) {
  StridePrefetcher p;
  for (std::uint64_t i = 0; i < 8; ++i) {
    p.observe({.pc = 0x10, .block = 100 + 2 * i});
    p.observe({.pc = 0x20, .block = 900 - 5 * i});
  }
  EXPECT_EQ(p.entry_for(0x10).stride, 2);
  EXPECT_EQ(p.entry_for(0x20).stride, -5);
}

TEST(Baselines, BestOffsetConvergesToStride) {
  BestOffsetPrefetcher p;
  for (std::uint64_t i = 0; i < 200; ++i) {
    TriggerEvent e{.index = i, .block = 5000 + 3 * i};
    p.observe(e);
    std::vector<std::uint64_t> out;
    p.predict(e, out);
  }
  EXPECT_GE(p.rounds_completed(), 1u);
  EXPECT_EQ(p.active_offset(), 3);
}

TEST(Baselines, Factory) {
  EXPECT_EQ(make_baseline("none", 1), nullptr);
  EXPECT_EQ(make_baseline("stride", 1)->name(), "stride");
  EXPECT_THROW(make_baseline("markov", 1), ConfigError);
}

TEST(Parsing, ThroughputAndTriggers) {
  EXPECT_EQ(parse_throughput("L"), Throughput::low);
  EXPECT_EQ(parse_throughput("high"), Throughput::high);
  EXPECT_EQ(throughput_name(Throughput::low), "L");
  EXPECT_EQ(parse_trigger_stream("misses"), TriggerStream::llc_misses);
  EXPECT_THROW(parse_throughput("medium"), ConfigError);
}

TEST(ModelPrefetcher, ThresholdAndTopK) {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  const ModelParams params = init_params(cfg, 1);
  const FeatureConfig features;
  const LabelConfig labels;
  const Trace trace = generate_trace({.kind = PatternKind::stride, .stride = 3}, 40, 1);

  ModelPrefetcher strict(params, cfg, features, labels, {DegreeMode::threshold, 0.9});
  ModelPrefetcher topk(params, cfg, features, labels, {DegreeMode::top_k, 0.5, 10});
  std::size_t strict_total = 0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    TriggerEvent e{i, trace[i].cycle, trace[i].pc, trace[i].vaddr, block_address(trace[i].vaddr, {}), false};
    std::vector<std::uint64_t> a, b;
    strict.observe(e);
    topk.observe(e);
    strict.predict(e, a);
    topk.predict(e, b);
    strict_total += a.size();
    if (i + 1 >= features.history) EXPECT_EQ(b.size(), 10u) << i;
  }
  EXPECT_EQ(strict_total, 0u);
  EXPECT_EQ(topk.cold_starts(), features.history - 1);
}

TEST(ModelPrefetcher, RejectsMismatchedShapes) {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.outputs = 100;
  const ModelParams params = init_params(cfg, 1);
  EXPECT_THROW(ModelPrefetcher(params, cfg, {}, {}, {}), ConfigError);
}
