#include "segfetch/features.hpp"

#include <cmath>

namespace segfetch {

void SegmentationConfig::validate(const AddressConfig& addr) const {
  if (bits < 1 || bits > addr.block_bits() || bits > 32) {
    throw ConfigError("segment width must be in [1, min(32, p + c)]");
  }
}

namespace {

struct SliceLayout {
  unsigned count;     // S
  unsigned top_bits;  // width of segment 0
};

SliceLayout layout(const SegmentationConfig& seg, const AddressConfig& addr) {
  const unsigned width = addr.block_bits();
  const unsigned count = seg.segment_count(addr);
  const unsigned rem = width % seg.bits;
  return {count, rem == 0 ? seg.bits : rem};
}

}  // namespace

SegmentedAddress segment_address(std::uint64_t block, const SegmentationConfig& seg,
                                 const AddressConfig& addr) {
  const SliceLayout lay = layout(seg, addr);
  const std::uint64_t low_mask = (1ULL << seg.bits) - 1;
  const double scale = std::ldexp(1.0, -static_cast<int>(seg.bits));
  block &= addr.block_mask();

  SegmentedAddress out;
  out.segments.resize(lay.count);
  out.normalized.resize(lay.count);
  for (unsigned i = 0; i < lay.count; ++i) {
    const unsigned shift = (lay.count - 1 - i) * seg.bits;
    auto value = static_cast<std::uint32_t>((block >> shift) & low_mask);
    out.segments[i] = value;
    out.normalized[i] = value * scale;
  }
  return out;
}

void segment_normalized(std::uint64_t block, const SegmentationConfig& seg,
                        const AddressConfig& addr, std::span<double> out) {
  const unsigned count = seg.segment_count(addr);
  if (out.size() != count) throw RangeError("segment_normalized: output size mismatch");
  const std::uint64_t low_mask = (1ULL << seg.bits) - 1;
  const double scale = std::ldexp(1.0, -static_cast<int>(seg.bits));
  block &= addr.block_mask();
  for (unsigned i = 0; i < count; ++i) {
    const unsigned shift = (count - 1 - i) * seg.bits;
    out[i] = static_cast<double>((block >> shift) & low_mask) * scale;
  }
}

std::uint64_t desegment(std::span<const std::uint32_t> segments, const SegmentationConfig& seg,
                        const AddressConfig& addr) {
  const SliceLayout lay = layout(seg, addr);
  if (segments.size() != lay.count) {
    throw RangeError("desegment: expected " + std::to_string(lay.count) + " segments, got " +
                     std::to_string(segments.size()));
  }
  std::uint64_t block = 0;
  for (unsigned i = 0; i < lay.count; ++i) {
    const unsigned width = i == 0 ? lay.top_bits : seg.bits;
    if (static_cast<std::uint64_t>(segments[i]) >> width != 0) {
      throw RangeError("desegment: segment " + std::to_string(i) + " out of range");
    }
    block = (block << seg.bits) | segments[i];
  }
  return block;
}

double pc_context(std::uint64_t pc, unsigned hash_bits) {
  if (hash_bits < 1 || hash_bits > 32) throw ConfigError("hash_bits must be in [1, 32]");
  const std::uint64_t modulus = 1ULL << hash_bits;
  const std::uint64_t mask = modulus - 1;
  std::uint64_t folded = 0;
  for (unsigned shift = 0; shift < 64; shift += hash_bits) {
    folded = (folded + ((pc >> shift) & mask)) & mask;
  }
  return static_cast<double>(folded) / static_cast<double>(modulus);
}

double page_distance_context(std::uint64_t page_n, std::uint64_t page_1) {
  const std::uint64_t distance = page_n > page_1 ? page_n - page_1 : page_1 - page_n;
  return 1.0 / (static_cast<double>(distance) + 1.0);
}

InputMode parse_input_mode(const std::string& name) {
  if (name == "segmented" || name == "as") return InputMode::segmented;
  if (name == "delta") return InputMode::delta;
  if (name == "page_offset") return InputMode::page_offset;
  throw ConfigError("unknown input mode '" + name + "'");
}

std::string input_mode_name(InputMode mode) {
  switch (mode) {
    case InputMode::segmented: return "segmented";
    case InputMode::delta: return "delta";
    case InputMode::page_offset: return "page_offset";
  }
  return "unknown";
}

void FeatureConfig::validate() const {
  addr.validate();
  seg.validate(addr);
  if (hash_bits < 1 || hash_bits > 32) throw ConfigError("hash_bits must be in [1, 32]");
  if (history < 1) throw ConfigError("history length must be >= 1");
}

std::size_t FeatureConfig::feature_width(InputMode mode) const {
  switch (mode) {
    case InputMode::segmented: return seg.segment_count(addr);
    case InputMode::delta: return 0;
    case InputMode::page_offset: return 1;
  }
  return 0;
}

std::int32_t TokenDictionary::lookup(std::int64_t value) const {
  auto it = tokens_.find(value);
  return it == tokens_.end() ? kOov : it->second;
}

std::int32_t TokenDictionary::map(std::int64_t value) {
  auto it = tokens_.find(value);
  if (it != tokens_.end()) return it->second;
  if (frozen_) return kOov;
  if (values_.size() >= capacity_) {
    throw CapacityError("token dictionary capacity " + std::to_string(capacity_) + " exceeded");
  }
  auto token = static_cast<std::int32_t>(values_.size());
  tokens_.emplace(value, token);
  values_.push_back(value);
  return token;
}

std::vector<std::int32_t> tokenize(std::span<const std::int64_t> values, TokenDictionary& dict) {
  std::vector<std::int32_t> out;
  out.reserve(values.size());
  for (std::int64_t v : values) out.push_back(dict.map(v));
  return out;
}

namespace {

void check_window(std::span<const MemoryAccess> window, std::size_t needed) {
  if (window.size() != needed) {
    throw WindowError("history window needs " + std::to_string(needed) + " accesses, got " +
                      std::to_string(window.size()));
  }
}

Matrix context_rows(std::span<const MemoryAccess> window, std::size_t n, const FeatureConfig& cfg) {
  Matrix ctx(static_cast<Eigen::Index>(n), 2);
  const std::uint64_t current_page = page_of_block(block_address(window[0].vaddr, cfg.addr), cfg.addr);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t page = page_of_block(block_address(window[i].vaddr, cfg.addr), cfg.addr);
    ctx(static_cast<Eigen::Index>(i), 0) = pc_context(window[i].pc, cfg.hash_bits);
    ctx(static_cast<Eigen::Index>(i), 1) = page_distance_context(page, current_page);
  }
  return ctx;
}

}  // namespace

ModelInput build_model_input(std::span<const MemoryAccess> window, const FeatureConfig& cfg) {
  check_window(window, cfg.history);
  const std::size_t s = cfg.seg.segment_count(cfg.addr);
  ModelInput in;
  in.features.resize(static_cast<Eigen::Index>(cfg.history), static_cast<Eigen::Index>(s));
  for (std::size_t i = 0; i < cfg.history; ++i) {
    std::span<double> row(in.features.row(static_cast<Eigen::Index>(i)).data(), s);
    segment_normalized(block_address(window[i].vaddr, cfg.addr), cfg.seg, cfg.addr, row);
  }
  in.context = context_rows(window, cfg.history, cfg);
  return in;
}

ModelInput build_delta_input(std::span<const MemoryAccess> window, const FeatureConfig& cfg,
                             TokenDictionary& dict) {
  check_window(window, cfg.history + 1);
  ModelInput in;
  in.features.resize(static_cast<Eigen::Index>(cfg.history), 0);
  in.tokens.resize(cfg.history);
  for (std::size_t i = 0; i < cfg.history; ++i) {
    const auto newer = static_cast<std::int64_t>(block_address(window[i].vaddr, cfg.addr));
    const auto older = static_cast<std::int64_t>(block_address(window[i + 1].vaddr, cfg.addr));
    in.tokens[i] = dict.map(newer - older);
  }
  in.context = context_rows(window, cfg.history, cfg);
  return in;
}

ModelInput build_page_offset_input(std::span<const MemoryAccess> window,
                                   const FeatureConfig& cfg, TokenDictionary& dict) {
  check_window(window, cfg.history);
  ModelInput in;
  in.features.resize(static_cast<Eigen::Index>(cfg.history), 1);
  in.tokens.resize(cfg.history);
  const double scale = 1.0 / static_cast<double>(cfg.addr.blocks_per_page());
  for (std::size_t i = 0; i < cfg.history; ++i) {
    const std::uint64_t block = block_address(window[i].vaddr, cfg.addr);
    in.tokens[i] = dict.map(static_cast<std::int64_t>(page_of_block(block, cfg.addr)));
    in.features(static_cast<Eigen::Index>(i), 0) =
        static_cast<double>(block_index_in_page(block, cfg.addr)) * scale;
  }
  in.context = context_rows(window, cfg.history, cfg);
  return in;
}

}  // namespace segfetch
