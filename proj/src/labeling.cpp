#include "segfetch/labeling.hpp"

#include <algorithm>

namespace segfetch {

void LabelConfig::validate() const {
  if (window < 1) throw ConfigError("label window W must be >= 1");
  if (bound < 1) throw ConfigError("delta bound must be >= 1");
}

std::size_t DeltaBitmap::popcount() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

std::vector<std::uint8_t> DeltaBitmap::pack() const {
  std::vector<std::uint8_t> out((bits_.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < bits_.size(); ++i) {
    if (bits_[i]) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  return out;
}

DeltaBitmap DeltaBitmap::unpack(std::span<const std::uint8_t> packed, std::size_t size) {
  if (packed.size() != (size + 7) / 8) throw RangeError("DeltaBitmap::unpack: size mismatch");
  DeltaBitmap out(size);
  for (std::size_t i = 0; i < size; ++i) out.set(i, (packed[i / 8] >> (i % 8)) & 1u);
  return out;
}

std::size_t delta_to_index(std::int64_t delta, std::int64_t bound) {
  if (delta == 0 || delta < -bound || delta > bound) {
    throw RangeError("delta " + std::to_string(delta) + " outside bitmap bound +-" +
                     std::to_string(bound));
  }
  return static_cast<std::size_t>(delta < 0 ? delta + bound : delta + bound - 1);
}

std::int64_t index_to_delta(std::size_t index, std::int64_t bound) {
  const auto i = static_cast<std::int64_t>(index);
  if (i < 0 || i >= 2 * bound) throw RangeError("bitmap index out of range");
  return i < bound ? i - bound : i - bound + 1;
}

DeltaSet collect_future_deltas(std::span<const MemoryAccess> trace, std::size_t t,
                               const LabelConfig& cfg, const AddressConfig& addr) {
  if (t >= trace.size()) throw RangeError("collect_future_deltas: trigger past trace end");
  DeltaSet out;
  const auto current = static_cast<std::int64_t>(block_address(trace[t].vaddr, addr));
  const std::size_t first = t + cfg.skip + 1;
  const std::size_t last = std::min(trace.size(), t + cfg.skip + cfg.window + 1);
  for (std::size_t i = first; i < last; ++i) {
    const std::int64_t d = static_cast<std::int64_t>(block_address(trace[i].vaddr, addr)) - current;
    if (d != 0 && d >= -cfg.bound && d <= cfg.bound) out.insert(d);
  }
  return out;
}

bool label_window_truncated(std::size_t trace_length, std::size_t t, const LabelConfig& cfg) {
  return t + cfg.skip + cfg.window >= trace_length;
}

DeltaBitmap deltas_to_bitmap(const DeltaSet& deltas, const LabelConfig& cfg) {
  DeltaBitmap out(cfg.bitmap_size());
  for (std::int64_t d : deltas) out.set(delta_to_index(d, cfg.bound));
  return out;
}

DeltaSet bitmap_to_deltas(const DeltaBitmap& bitmap, const LabelConfig& cfg) {
  if (bitmap.size() != cfg.bitmap_size()) throw RangeError("bitmap size does not match label config");
  DeltaSet out;
  for (std::size_t i = 0; i < bitmap.size(); ++i) {
    if (bitmap.test(i)) out.insert(index_to_delta(i, cfg.bound));
  }
  return out;
}

std::vector<std::uint64_t> prefetch_addresses(std::uint64_t current_block, const DeltaSet& deltas,
                                              const AddressConfig& addr) {
  std::vector<std::uint64_t> out;
  out.reserve(deltas.size());
  const std::uint64_t limit = addr.block_mask();
  for (std::int64_t d : deltas) {
    if (d < 0) {
      const auto magnitude = static_cast<std::uint64_t>(-d);
      if (magnitude > current_block) continue;
      out.push_back(current_block - magnitude);
    } else {
      const auto magnitude = static_cast<std::uint64_t>(d);
      if (current_block > limit || magnitude > limit - current_block) continue;
      out.push_back(current_block + magnitude);
    }
  }
  return out;
}

}  // namespace segfetch
