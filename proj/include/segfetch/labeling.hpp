#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <vector>

#include "segfetch/trace.hpp"

namespace segfetch {

/// Look-forward window W, delta bound, and distance-labeling skip.
/// The bitmap has B = 2 * bound bits; delta 0 has no slot.
struct LabelConfig {
  std::size_t window = 128;
  std::int64_t bound = 128;
  std::size_t skip = 0;

  void validate() const;
  std::size_t bitmap_size() const { return static_cast<std::size_t>(2 * bound); }
  friend bool operator==(const LabelConfig&, const LabelConfig&) = default;
};

/// Unordered set of non-zero block deltas (kept sorted for determinism).
using DeltaSet = std::set<std::int64_t>;

/// Fixed-size bit vector over bounded deltas.
class DeltaBitmap {
 public:
  DeltaBitmap() = default;
  explicit DeltaBitmap(std::size_t size) : bits_(size, 0) {}

  std::size_t size() const { return bits_.size(); }
  bool test(std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t i, bool value = true) { bits_[i] = value ? 1 : 0; }
  std::size_t popcount() const;
  std::span<const std::uint8_t> bits() const { return bits_; }

  /// Packs 8 bits per byte, bit i at byte i/8, position i%8.
  std::vector<std::uint8_t> pack() const;
  static DeltaBitmap unpack(std::span<const std::uint8_t> packed, std::size_t size);

  friend bool operator==(const DeltaBitmap&, const DeltaBitmap&) = default;

 private:
  std::vector<std::uint8_t> bits_;
};

/// Bit index of delta d: d + bound for d < 0, d + bound - 1 for d > 0.
std::size_t delta_to_index(std::int64_t delta, std::int64_t bound);
std::int64_t index_to_delta(std::size_t index, std::int64_t bound);

/// Deltas block(a[t + skip + j]) - block(a[t]) for 1 <= j <= W that fall in
/// [-bound, -1] U [1, bound]. Positions past the end of `trace` are ignored.
DeltaSet collect_future_deltas(std::span<const MemoryAccess> trace, std::size_t t,
                               const LabelConfig& cfg, const AddressConfig& addr);

/// True when the label window of trigger t runs past the end of the trace.
bool label_window_truncated(std::size_t trace_length, std::size_t t, const LabelConfig& cfg);

/// Throws RangeError for a delta of 0 or outside the bound.
DeltaBitmap deltas_to_bitmap(const DeltaSet& deltas, const LabelConfig& cfg);
DeltaSet bitmap_to_deltas(const DeltaBitmap& bitmap, const LabelConfig& cfg);

/// current_block + d for every d, dropping results outside [0, 2^(p+c)).
std::vector<std::uint64_t> prefetch_addresses(std::uint64_t current_block, const DeltaSet& deltas,
                                              const AddressConfig& addr);

}  // namespace segfetch
