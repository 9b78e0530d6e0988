#include "segfetch/trace.hpp"

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace segfetch {

void AddressConfig::validate() const {
  if (addr_bits > 64) throw ConfigError("addr_bits must be <= 64");
  if (!(block_offset_bits < page_size_bits && page_size_bits < addr_bits)) {
    throw ConfigError("address config requires block_offset_bits < page_size_bits < addr_bits");
  }
}

std::uint64_t block_address(std::uint64_t vaddr, const AddressConfig& cfg) {
  return (vaddr >> cfg.block_offset_bits) & cfg.block_mask();
}

TraceParseError::TraceParseError(std::size_t line, const std::string& what)
    : TraceError("line " + std::to_string(line) + ": " + what), line_(line) {}

TraceFormat parse_trace_format(const std::string& name) {
  if (name == "csv") return TraceFormat::csv;
  if (name == "csv-nocycle" || name == "csv_nocycle") return TraceFormat::csv_nocycle;
  if (name == "auto" || name == "automatic") return TraceFormat::automatic;
  throw ConfigError("unknown trace format '" + name + "'");
}

std::string trace_format_name(TraceFormat format) {
  switch (format) {
    case TraceFormat::csv: return "csv";
    case TraceFormat::csv_nocycle: return "csv_nocycle";
    case TraceFormat::automatic: return "auto";
  }
  return "auto";
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

bool parse_hex(std::string_view field, std::uint64_t& out) {
  field = trim(field);
  if (field.size() < 3 || field[0] != '0' || (field[1] != 'x' && field[1] != 'X')) return false;
  field.remove_prefix(2);
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), out, 16);
  return ec == std::errc() && ptr == field.data() + field.size();
}

bool parse_dec(std::string_view field, std::uint64_t& out) {
  field = trim(field);
  if (field.empty()) return false;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), out, 10);
  return ec == std::errc() && ptr == field.data() + field.size();
}

class TraceParser {
 public:
  explicit TraceParser(TraceFormat format) : format_(format) {}

  void line(std::string_view text) {
    ++line_no_;
    text = trim(text);
    if (text.empty() || text.front() == '#') return;

    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
      std::size_t comma = text.find(',', start);
      fields.push_back(text.substr(start, comma == std::string_view::npos ? text.npos : comma - start));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }

    bool has_cycle = false;
    switch (format_) {
      case TraceFormat::csv: has_cycle = true; break;
      case TraceFormat::csv_nocycle: has_cycle = false; break;
      case TraceFormat::automatic: has_cycle = fields.size() == 4; break;
    }
    const std::size_t expected = has_cycle ? 4 : 3;
    if (fields.size() != expected) {
      throw TraceParseError(line_no_, "expected " + std::to_string(expected) + " fields, got " +
                                          std::to_string(fields.size()));
    }

    MemoryAccess a;
    std::uint64_t file_ordinal = 0;
    if (!parse_dec(fields[0], file_ordinal)) throw TraceParseError(line_no_, "invalid ordinal");
    std::size_t next = 1;
    if (has_cycle) {
      if (!parse_dec(fields[next++], a.cycle)) throw TraceParseError(line_no_, "invalid cycle");
    }
    if (!parse_hex(fields[next++], a.pc)) throw TraceParseError(line_no_, "invalid pc hex field");
    if (!parse_hex(fields[next++], a.vaddr)) throw TraceParseError(line_no_, "invalid vaddr hex field");

    a.ordinal = trace_.size();
    if (!has_cycle) a.cycle = a.ordinal;
    if (!trace_.empty() && a.cycle < trace_.back().cycle) {
      throw TraceParseError(line_no_, "cycle decreases");
    }
    trace_.push_back(a);
  }

  Trace finish(const std::string& source) {
    if (trace_.empty()) throw EmptyTraceError("trace '" + source + "' has no records");
    return std::move(trace_);
  }

 private:
  TraceFormat format_;
  std::size_t line_no_ = 0;
  Trace trace_;
};

}  // namespace

Trace parse_trace(std::istream& in, TraceFormat format) {
  TraceParser parser(format);
  std::string text;
  while (std::getline(in, text)) parser.line(text);
  return parser.finish("<stream>");
}

Trace read_trace(const std::filesystem::path& path, TraceFormat format) {
  if (!std::filesystem::exists(path)) throw TraceError("trace file not found: " + path.string());
  gzFile file = gzopen(path.c_str(), "rb");
  if (file == nullptr) throw TraceError("cannot open trace file: " + path.string());

  TraceParser parser(format);
  std::string pending;
  char buf[1 << 16];
  try {
    while (true) {
      int n = gzread(file, buf, sizeof buf);
      if (n < 0) throw TraceError("read error in " + path.string());
      if (n == 0) break;
      pending.append(buf, static_cast<std::size_t>(n));
      std::size_t start = 0;
      for (std::size_t nl; (nl = pending.find('\n', start)) != std::string::npos; start = nl + 1) {
        parser.line(std::string_view(pending).substr(start, nl - start));
      }
      pending.erase(0, start);
    }
    if (!pending.empty()) parser.line(pending);
  } catch (...) {
    gzclose(file);
    throw;
  }
  gzclose(file);
  return parser.finish(path.string());
}

void write_trace(std::ostream& out, const Trace& trace) {
  out << "# ordinal,cycle,pc,vaddr\n";
  char line[96];
  for (const MemoryAccess& a : trace) {
    int n = std::snprintf(line, sizeof line, "%llu,%llu,0x%llx,0x%llx\n",
                          static_cast<unsigned long long>(a.ordinal),
                          static_cast<unsigned long long>(a.cycle),
                          static_cast<unsigned long long>(a.pc),
                          static_cast<unsigned long long>(a.vaddr));
    out.write(line, n);
  }
}

void write_trace(const std::filesystem::path& path, const Trace& trace, bool gzip) {
  std::ostringstream text;
  write_trace(text, trace);
  const std::string body = text.str();
  if (!gzip) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw TraceError("cannot write trace file: " + path.string());
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    return;
  }
  // gzopen writes a fixed header (mtime 0), so output bytes are stable.
  gzFile file = gzopen(path.c_str(), "wb9");
  if (file == nullptr) throw TraceError("cannot write trace file: " + path.string());
  int n = gzwrite(file, body.data(), static_cast<unsigned>(body.size()));
  gzclose(file);
  if (n != static_cast<int>(body.size())) throw TraceError("short write to " + path.string());
}

TraceSplit split_trace(std::size_t n, const SplitRatios& r) {
  if (n < 3) throw TraceError("split requires at least 3 records, got " + std::to_string(n));
  if (!(r.train > 0 && r.validation > 0 && r.test > 0)) {
    throw ConfigError("split fractions must be positive");
  }
  if (std::abs(r.train + r.validation + r.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  auto boundary = [n](double fraction) {
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  };
  std::size_t b1 = boundary(r.train);
  std::size_t b2 = boundary(r.train + r.validation);
  if (b2 > n) b2 = n;
  return TraceSplit{{0, b1}, {b1, b2}, {b2, n}};
}

PatternKind parse_pattern_kind(const std::string& name) {
  if (name == "stride") return PatternKind::stride;
  if (name == "page_walk") return PatternKind::page_walk;
  if (name == "page_skip") return PatternKind::page_skip;
  if (name == "multi_stream") return PatternKind::multi_stream;
  if (name == "random") return PatternKind::random;
  throw ConfigError("unknown pattern '" + name + "'");
}

std::string pattern_kind_name(PatternKind kind) {
  switch (kind) {
    case PatternKind::stride: return "stride";
    case PatternKind::page_walk: return "page_walk";
    case PatternKind::page_skip: return "page_skip";
    case PatternKind::multi_stream: return "multi_stream";
    case PatternKind::random: return "random";
  }
  return "unknown";
}

Trace generate_trace(const PatternSpec& spec, std::size_t length, std::uint64_t seed,
                     const AddressConfig& addr) {
  addr.validate();
  if (length < 1) throw ConfigError("generate_trace: length must be >= 1");
  if (spec.cycles_per_access < 1) throw ConfigError("cycles_per_access must be >= 1");

  Rng rng(seed);
  const std::uint64_t mask = addr.block_mask();
  const std::uint64_t page_blocks = addr.blocks_per_page();
  const std::uint64_t start_page = spec.start_block / page_blocks;

  Trace trace;
  trace.reserve(length);
  auto emit = [&](std::uint64_t block, std::uint64_t pc) {
    MemoryAccess a;
    a.ordinal = trace.size();
    a.cycle = a.ordinal * spec.cycles_per_access;
    a.pc = pc;
    a.vaddr = (block & mask) << addr.block_offset_bits;
    trace.push_back(a);
  };

  switch (spec.kind) {
    case PatternKind::stride: {
      std::uint64_t block = spec.start_block;
      for (std::size_t i = 0; i < length; ++i) {
        emit(block, spec.pc);
        block += static_cast<std::uint64_t>(spec.stride);
      }
      break;
    }
    case PatternKind::page_walk: {
      if (spec.max_step < 1) throw ConfigError("page_walk.max_step must be >= 1");
      if (spec.accesses_per_page < 1) throw ConfigError("page_walk.accesses_per_page must be >= 1");
      std::uint64_t page = start_page;
      auto offset = static_cast<std::int64_t>(rng.below(page_blocks));
      const auto last = static_cast<std::int64_t>(page_blocks) - 1;
      for (std::size_t i = 0; i < length; ++i) {
        if (i > 0 && i % spec.accesses_per_page == 0) {
          ++page;
          offset = static_cast<std::int64_t>(rng.below(page_blocks));
        } else if (i > 0) {
          std::int64_t step = 0;
          while (step == 0) step = rng.between(-spec.max_step, spec.max_step);
          offset += step;
          if (offset < 0) offset = -offset;                 // reflect at the page start
          if (offset > last) offset = 2 * last - offset;    // and at the page end
          offset = std::clamp<std::int64_t>(offset, 0, last);
        }
        emit(page * page_blocks + static_cast<std::uint64_t>(offset), spec.pc);
      }
      break;
    }
    case PatternKind::page_skip: {
      if (spec.deltas.empty()) throw ConfigError("page_skip.deltas must be non-empty");
      std::uint64_t block = start_page * page_blocks;
      std::size_t phase = 0;
      for (std::size_t i = 0; i < length; ++i) {
        if (spec.restart_every > 0 && i > 0 && i % spec.restart_every == 0) {
          block = (start_page + rng.below(spec.region_pages)) * page_blocks;
          phase = 0;
        } else if (i > 0) {
          block += static_cast<std::uint64_t>(spec.deltas[phase]);
          phase = (phase + 1) % spec.deltas.size();
        }
        emit(block, spec.pc + 4 * phase);
      }
      break;
    }
    case PatternKind::multi_stream: {
      if (spec.stream_strides.empty()) throw ConfigError("multi_stream.stream_strides must be non-empty");
      const std::size_t streams = spec.stream_strides.size();
      std::vector<std::uint64_t> cursor(streams);
      for (std::size_t s = 0; s < streams; ++s) cursor[s] = spec.start_block + (s << 24);
      for (std::size_t i = 0; i < length; ++i) {
        std::size_t s = rng.below(streams);
        emit(cursor[s], spec.pc + 0x40 * s);
        cursor[s] += static_cast<std::uint64_t>(spec.stream_strides[s]);
      }
      break;
    }
    case PatternKind::random: {
      const std::uint64_t blocks = spec.region_pages * page_blocks;
      for (std::size_t i = 0; i < length; ++i) {
        emit(start_page * page_blocks + rng.below(blocks), spec.pc);
      }
      break;
    }
  }
  return trace;
}

}  // namespace segfetch
