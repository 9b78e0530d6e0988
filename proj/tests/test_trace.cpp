#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "segfetch/trace.hpp"

using namespace segfetch;

namespace {

std::vector<std::uint64_t> blocks_of(const Trace& t, const AddressConfig& addr = {}) {
  std::vector<std::uint64_t> out;
  for (const auto& a : t) out.push_back(block_address(a.vaddr, addr));
  return out;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("segfetch_test_" + name);
}

}  // namespace

TEST(AddressConfig, DefaultGeometry) {
  AddressConfig a;
  EXPECT_EQ(a.page_bits(), 52u);
  EXPECT_EQ(a.block_index_bits(), 6u);
  EXPECT_EQ(a.block_bits(), 58u);
  EXPECT_EQ(a.blocks_per_page(), 64u);
}

TEST(AddressConfig, RejectsInconsistentWidths) {
  AddressConfig a;
  a.page_size_bits = 6;
  EXPECT_THROW(a.validate(), ConfigError);
  a = {};
  a.addr_bits = 65;
  EXPECT_THROW(a.validate(), ConfigError);
}

TEST(BlockAddress, StripsOffsetAndMasks) {
  AddressConfig a;
  EXPECT_EQ(block_address(0x1000, a), 0x40u);
  EXPECT_EQ(block_address(0x103f, a), 0x40u);
  EXPECT_EQ(block_address(0x1040, a), 0x41u);
  EXPECT_EQ(block_address(~0ULL, a), a.block_mask());
  a.addr_bits = 48;
  EXPECT_EQ(block_address(0xffff'0000'0000'1040ULL, a), 0x41u);
}

TEST(BlockAddress, ConstantInsideBlockAndMonotoneAcross) {
  AddressConfig a;
  std::uint64_t previous = 0;
  for (std::uint64_t v = 0x10000; v < 0x10000 + 64 * 40; ++v) {
    const std::uint64_t b = block_address(v, a);
    EXPECT_EQ(b, block_address(v & ~63ULL, a));
    EXPECT_GE(b, previous);
    previous = b;
  }
}

TEST(ParseTrace, ReadsBothFormatsAndComments) {
  std::istringstream in(
      "# ordinal,cycle,pc,vaddr\n"
      "0,10,0x400,0x1000\n"
      "\n"
      "1,12,0x404,0x1040\n");
  const Trace t = parse_trace(in);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[1], (MemoryAccess{1, 12, 0x404, 0x1040}));

  std::istringstream nocycle("7,0x400,0x2000\n9,0x400,0x2040\n");
  const Trace u = parse_trace(nocycle, TraceFormat::csv_nocycle);
  ASSERT_EQ(u.size(), 2u);
  EXPECT_EQ(u[0].ordinal, 0u);
  EXPECT_EQ(u[1].cycle, 1u);
}

TEST(ParseTrace, ReportsLineOfBadRecord) {
  std::istringstream in("0,1,0x400,0x1000\n1,2,zzz,0x1040\n");
  try {
    parse_trace(in);
    FAIL() << "expected a parse error";
  } catch (const TraceParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(ParseTrace, RejectsDecreasingCycles) {
  std::istringstream in("0,5,0x400,0x1000\n1,4,0x400,0x1040\n");
  EXPECT_THROW(parse_trace(in), TraceParseError);
}

TEST(ReadTrace, MissingFileIsAnError) {
  EXPECT_THROW(read_trace(temp_path("does_not_exist.csv")), TraceError);
}

TEST(ReadTrace, RoundTripPlainAndGzip) {
  PatternSpec spec;
  spec.kind = PatternKind::multi_stream;
  const Trace t = generate_trace(spec, 500, 3, {});
  for (bool gz : {false, true}) {
    const auto p = temp_path(gz ? "rt.csv.gz" : "rt.csv");
    write_trace(p, t, gz);
    EXPECT_EQ(read_trace(p), t);
    std::filesystem::remove(p);
  }
}

TEST(ReadTrace, GzipOutputIsByteStable) {
  const Trace t = generate_trace({}, 200, 1, {});
  const auto a = temp_path("a.csv.gz"), b = temp_path("b.csv.gz");
  write_trace(a, t, true);
  write_trace(b, t, true);
  EXPECT_EQ(std::filesystem::file_size(a), std::filesystem::file_size(b));
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  EXPECT_TRUE(std::equal(std::istreambuf_iterator<char>(fa), {}, std::istreambuf_iterator<char>(fb)));
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST(SplitTrace, DefaultProportions) {
  const TraceSplit s = split_trace(100, {});
  EXPECT_EQ(s.train, (AccessRange{0, 40}));
  EXPECT_EQ(s.validation, (AccessRange{40, 50}));
  EXPECT_EQ(s.test, (AccessRange{50, 100}));
  const TraceSplit small = split_trace(10, {});
  EXPECT_EQ(small.train, (AccessRange{0, 4}));
  EXPECT_EQ(small.validation, (AccessRange{4, 5}));
  EXPECT_EQ(small.test, (AccessRange{5, 10}));
}

TEST(SplitTrace, Errors) {
  EXPECT_THROW(split_trace(2, {}), Error);
  EXPECT_THROW(split_trace(100, {0.5, 0.5, 0.5}), Error);
  EXPECT_THROW(split_trace(100, {0.0, 0.5, 0.5}), Error);
}

TEST(SplitTrace, PartitionsEveryLength) {
  for (std::size_t n = 3; n < 400; ++n) {
    const TraceSplit s = split_trace(n, {0.3, 0.25, 0.45});
    EXPECT_EQ(s.train.begin, 0u);
    EXPECT_EQ(s.train.end, s.validation.begin);
    EXPECT_EQ(s.validation.end, s.test.begin);
    EXPECT_EQ(s.test.end, n);
  }
}

TEST(GenerateTrace, StrideExamples) {
  PatternSpec spec;
  spec.stride = 1;
  spec.start_block = 100;
  EXPECT_EQ(blocks_of(generate_trace(spec, 4, 0, {})), (std::vector<std::uint64_t>{100, 101, 102, 103}));
  spec.stride = 3;
  spec.start_block = 0;
  EXPECT_EQ(blocks_of(generate_trace(spec, 3, 0, {})), (std::vector<std::uint64_t>{0, 3, 6}));
}

TEST(GenerateTrace, StrideDeltaIsConstant) {
  PatternSpec spec;
  spec.stride = 7;
  const auto b = blocks_of(generate_trace(spec, 5000, 9, {}));
  for (std::size_t i = 1; i < b.size(); ++i) ASSERT_EQ(b[i] - b[i - 1], 7u);
}

TEST(GenerateTrace, DeterministicPerSeed) {
  for (auto kind : {PatternKind::page_walk, PatternKind::page_skip, PatternKind::multi_stream,
                    PatternKind::random}) {
    PatternSpec spec;
    spec.kind = kind;
    spec.restart_every = 16;
    EXPECT_EQ(generate_trace(spec, 1000, 42, {}), generate_trace(spec, 1000, 42, {}));
    EXPECT_NE(generate_trace(spec, 1000, 42, {}), generate_trace(spec, 1000, 43, {}))
        << pattern_kind_name(kind);
  }
}

TEST(GenerateTrace, PageWalkStaysInsidePage) {
  PatternSpec spec;
  spec.kind = PatternKind::page_walk;
  spec.accesses_per_page = 100;
  AddressConfig a;
  const Trace t = generate_trace(spec, 1000, 5, a);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto page = page_of_block(block_address(t[i].vaddr, a), a);
    const auto first = page_of_block(block_address(t[i - i % 100].vaddr, a), a);
    ASSERT_EQ(page, first) << i;
  }
}

TEST(GenerateTrace, PageSkipCrossesPages) {
  PatternSpec spec;
  spec.kind = PatternKind::page_skip;
  AddressConfig a;
  const auto b = blocks_of(generate_trace(spec, 64, 1, a), a);
  std::set<std::uint64_t> pages;
  for (auto x : b) pages.insert(page_of_block(x, a));
  EXPECT_GT(pages.size(), 10u);
  EXPECT_EQ(b[1] - b[0], 5u);
  EXPECT_EQ(b[4] - b[3], 70u);
}

TEST(GenerateTrace, CyclesFollowSpacing) {
  PatternSpec spec;
  spec.cycles_per_access = 10;
  const Trace t = generate_trace(spec, 5, 0, {});
  EXPECT_EQ(t[4].cycle, 40u);
  EXPECT_EQ(t[4].ordinal, 4u);
}

TEST(GenerateTrace, UnknownPatternName) {
  EXPECT_THROW(parse_pattern_kind("spiral"), ConfigError);
  EXPECT_EQ(parse_pattern_kind(pattern_kind_name(PatternKind::page_skip)), PatternKind::page_skip);
}
