#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "segfetch/common.hpp"

namespace segfetch {

/// One trace record. Ordinals are 0..n-1 within a trace; cycles are
/// non-decreasing.
struct MemoryAccess {
  std::uint64_t ordinal = 0;
  std::uint64_t cycle = 0;
  std::uint64_t pc = 0;
  std::uint64_t vaddr = 0;

  friend bool operator==(const MemoryAccess&, const MemoryAccess&) = default;
};

using Trace = std::vector<MemoryAccess>;

/// Address geometry: a virtual address is a p-bit page number, a c-bit block
/// index inside the page and the intra-block byte offset.
struct AddressConfig {
  unsigned addr_bits = 64;
  unsigned page_size_bits = 12;
  unsigned block_offset_bits = 6;

  /// Throws ConfigError unless block_offset_bits < page_size_bits < addr_bits <= 64.
  void validate() const;

  unsigned block_index_bits() const { return page_size_bits - block_offset_bits; }  // c
  unsigned page_bits() const { return addr_bits - page_size_bits; }                  // p
  unsigned block_bits() const { return addr_bits - block_offset_bits; }              // p + c
  std::uint64_t block_mask() const {
    return block_bits() >= 64 ? ~0ULL : (1ULL << block_bits()) - 1;
  }
  std::uint64_t blocks_per_page() const { return 1ULL << block_index_bits(); }

  friend bool operator==(const AddressConfig&, const AddressConfig&) = default;
};

/// Block address of `vaddr`: byte offset removed, masked to p+c bits.
std::uint64_t block_address(std::uint64_t vaddr, const AddressConfig& cfg);

/// Page number that contains `block`.
inline std::uint64_t page_of_block(std::uint64_t block, const AddressConfig& cfg) {
  return block >> cfg.block_index_bits();
}

/// Position of `block` inside its page (the c-bit block index).
inline std::uint64_t block_index_in_page(std::uint64_t block, const AddressConfig& cfg) {
  return block & (cfg.blocks_per_page() - 1);
}

struct TraceError : Error {
  explicit TraceError(const std::string& m) : Error("trace", m) {}
};

/// Parse failure; `line()` is 1-based.
struct TraceParseError : TraceError {
  TraceParseError(std::size_t line, const std::string& what);
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

struct EmptyTraceError : TraceError {
  explicit EmptyTraceError(const std::string& m) : TraceError(m) {}
};

enum class TraceFormat {
  csv,          // ordinal,cycle,pc_hex,vaddr_hex
  csv_nocycle,  // ordinal,pc_hex,vaddr_hex  (cycle := ordinal)
  automatic,    // per-line field count decides
};

TraceFormat parse_trace_format(const std::string& name);
std::string trace_format_name(TraceFormat format);

/// Reads a trace file (plain or gzip). Ordinals are reassigned 0..n-1.
Trace read_trace(const std::filesystem::path& path,
                 TraceFormat format = TraceFormat::automatic);
Trace parse_trace(std::istream& in, TraceFormat format = TraceFormat::automatic);

/// Writes `ordinal,cycle,pc_hex,vaddr_hex` lines with a `#` header.
/// Output is gzip-compressed when `gzip` is set.
void write_trace(const std::filesystem::path& path, const Trace& trace, bool gzip = false);
void write_trace(std::ostream& out, const Trace& trace);

/// Half-open index range [begin, end) into a trace.
struct AccessRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  friend bool operator==(const AccessRange&, const AccessRange&) = default;
};

struct TraceSplit {
  AccessRange train;
  AccessRange validation;
  AccessRange test;

  friend bool operator==(const TraceSplit&, const TraceSplit&) = default;
};

struct SplitRatios {
  double train = 0.4;
  double validation = 0.1;
  double test = 0.5;
};

/// Contiguous prefix split; boundaries are floor(cumulative fraction * n).
TraceSplit split_trace(std::size_t trace_length, const SplitRatios& ratios);

/// Synthetic access patterns.
enum class PatternKind {
  stride,       // constant block stride
  page_walk,    // random walk confined to one page at a time
  page_skip,    // repeating delta sequence crossing page boundaries
  multi_stream, // interleaved per-PC strided streams
  random,       // uniform random blocks inside a region
};

struct PatternSpec {
  PatternKind kind = PatternKind::stride;

  std::int64_t stride = 1;                // stride
  std::uint64_t start_block = 0x100000;   // stride, page_walk, page_skip, multi_stream
  std::uint64_t pc = 0x400000;            // base program counter
  std::int64_t max_step = 4;              // page_walk: |step| <= max_step
  std::uint64_t accesses_per_page = 256;  // page_walk: page change period
  std::vector<std::int64_t> deltas{5, 5, 5, 70};  // page_skip: repeating sequence
  std::uint64_t restart_every = 0;        // page_skip: jump to a random page-aligned base (0 = never)
  std::uint64_t region_pages = 1 << 20;   // page_skip restarts, random: region size in pages
  std::vector<std::int64_t> stream_strides{1, 2, 3, 4};  // multi_stream
  std::uint64_t cycles_per_access = 1;    // cycle = ordinal * cycles_per_access

  friend bool operator==(const PatternSpec&, const PatternSpec&) = default;
};

PatternKind parse_pattern_kind(const std::string& name);
std::string pattern_kind_name(PatternKind kind);

/// Deterministic given (spec, length, seed). Every access uses a block-aligned
/// byte address.
Trace generate_trace(const PatternSpec& spec, std::size_t length, std::uint64_t seed,
                     const AddressConfig& addr = {});

}  // namespace segfetch
