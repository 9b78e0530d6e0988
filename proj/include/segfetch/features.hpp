#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "segfetch/matrix.hpp"
#include "segfetch/trace.hpp"

namespace segfetch {

/// Address segmentation width. S = ceil((p + c) / bits).
struct SegmentationConfig {
  unsigned bits = 6;

  void validate(const AddressConfig& addr) const;
  unsigned segment_count(const AddressConfig& addr) const {
    return (addr.block_bits() + bits - 1) / bits;
  }
  friend bool operator==(const SegmentationConfig&, const SegmentationConfig&) = default;
};

/// A block address sliced into S integers, most significant first. Segment 0
/// holds the partial top slice when (p + c) is not a multiple of `bits`.
struct SegmentedAddress {
  std::vector<std::uint32_t> segments;
  std::vector<double> normalized;  // segments[i] * 2^-bits
};

SegmentedAddress segment_address(std::uint64_t block, const SegmentationConfig& seg,
                                 const AddressConfig& addr);

/// Writes the normalized segments of `block` into `out` (size S).
void segment_normalized(std::uint64_t block, const SegmentationConfig& seg,
                        const AddressConfig& addr, std::span<double> out);

/// Inverse of segment_address. Throws RangeError for an out-of-range segment
/// or a wrong segment count.
std::uint64_t desegment(std::span<const std::uint32_t> segments, const SegmentationConfig& seg,
                        const AddressConfig& addr);
inline std::uint64_t desegment(const SegmentedAddress& s, const SegmentationConfig& seg,
                               const AddressConfig& addr) {
  return desegment(s.segments, seg, addr);
}

/// Additive folding of the 64-bit pc into hash_bits-wide chunks (low chunk
/// first), summed modulo 2^hash_bits, normalized to [0, 1).
double pc_context(std::uint64_t pc, unsigned hash_bits);

/// 1 / (|page_n - page_1| + 1), in (0, 1].
double page_distance_context(std::uint64_t page_n, std::uint64_t page_1);

/// Which history representation feeds the model.
enum class InputMode {
  segmented,    // address segmentation: N x S reals
  delta,        // tokenized deltas between consecutive blocks
  page_offset,  // tokenized page number + normalized in-page offset
};

InputMode parse_input_mode(const std::string& name);
std::string input_mode_name(InputMode mode);

struct FeatureConfig {
  AddressConfig addr;
  SegmentationConfig seg;
  unsigned hash_bits = 16;
  std::size_t history = 9;  // N

  void validate() const;
  /// Width F of the real-valued feature rows for `mode`.
  std::size_t feature_width(InputMode mode) const;
};

/// One model input. Row n-1 describes history position n (row 0 is the
/// current, most recent access).
struct ModelInput {
  Matrix features;                    // N x F (F may be 0)
  std::vector<std::int32_t> tokens;   // N entries, or empty when unused
  Matrix context;                     // N x 2: (c_pc, c_pd)

  std::size_t history() const { return static_cast<std::size_t>(context.rows()); }
};

struct WindowError : Error {
  explicit WindowError(const std::string& m) : Error("window", m) {}
};

/// Value -> dense token map. Tokens are assigned in first-seen order from 0.
/// Once frozen, unknown values map to kOov.
class TokenDictionary {
 public:
  static constexpr std::int32_t kOov = -1;

  explicit TokenDictionary(std::size_t capacity = std::size_t{1} << 22) : capacity_(capacity) {}

  /// Token for `value`; grows the dictionary unless frozen. Throws
  /// CapacityError when a new entry would exceed capacity.
  std::int32_t map(std::int64_t value);
  std::int32_t lookup(std::int64_t value) const;
  std::int64_t value_of(std::int32_t token) const { return values_.at(static_cast<std::size_t>(token)); }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }
  std::size_t size() const { return values_.size(); }
  std::size_t capacity() const { return capacity_; }

 private:
  std::size_t capacity_;
  bool frozen_ = false;
  std::unordered_map<std::int64_t, std::int32_t> tokens_;
  std::vector<std::int64_t> values_;
};

struct CapacityError : Error {
  explicit CapacityError(const std::string& m) : Error("capacity", m) {}
};

std::vector<std::int32_t> tokenize(std::span<const std::int64_t> values, TokenDictionary& dict);

/// Address-segmentation input from `window` (most recent access first,
/// exactly cfg.history records).
ModelInput build_model_input(std::span<const MemoryAccess> window, const FeatureConfig& cfg);

/// Ablation input: N delta tokens. `window` holds N + 1 accesses, most
/// recent first; token n is the delta block(n) - block(n + 1).
ModelInput build_delta_input(std::span<const MemoryAccess> window, const FeatureConfig& cfg,
                             TokenDictionary& dict);

/// Ablation input: N page tokens plus the in-page offset / 2^c as the single
/// real feature. `window` holds N accesses, most recent first.
ModelInput build_page_offset_input(std::span<const MemoryAccess> window,
                                   const FeatureConfig& cfg, TokenDictionary& dict);

}  // namespace segfetch
