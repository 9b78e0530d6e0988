#include "segfetch/dataset.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace segfetch {

static_assert(std::endian::native == std::endian::little,
              "binary artifacts are written in host order and assume a little-endian host");

Trace llc_miss_stream(std::span<const MemoryAccess> trace, const CacheConfig& cache,
                      const AddressConfig& addr) {
  Cache c(cache);
  Trace out;
  for (const auto& a : trace) {
    const std::uint64_t block = block_address(a.vaddr, addr);
    if (c.touch(block) == nullptr) {
      c.insert(block, false);
      out.push_back(a);
    }
  }
  return out;
}

std::vector<Sample> build_samples(std::span<const MemoryAccess> stream, const FeatureConfig& features,
                                  const LabelConfig& labels, InputMode mode, TokenDictionary* dict) {
  features.validate();
  labels.validate();
  if (mode != InputMode::segmented && dict == nullptr) {
    throw ConfigError("input mode " + input_mode_name(mode) + " needs a token dictionary");
  }
  const std::size_t n = features.history;
  std::vector<Sample> out;
  if (stream.size() <= n) return out;
  out.reserve(stream.size() - n);

  std::vector<MemoryAccess> window(n + 1);
  // Every mode starts at t = N so the ablations share trigger positions.
  for (std::size_t t = n; t < stream.size(); ++t) {
    for (std::size_t i = 0; i <= n; ++i) window[i] = stream[t - i];
    Sample s;
    switch (mode) {
      case InputMode::segmented:
        s.input = build_model_input(std::span(window).first(n), features);
        break;
      case InputMode::delta:
        s.input = build_delta_input(window, features, *dict);
        break;
      case InputMode::page_offset:
        s.input = build_page_offset_input(std::span(window).first(n), features, *dict);
        break;
    }
    s.label = deltas_to_bitmap(collect_future_deltas(stream, t, labels, features.addr), labels);
    s.ordinal = stream[t].ordinal;
    s.block = block_address(stream[t].vaddr, features.addr);
    s.truncated = label_window_truncated(stream.size(), t, labels);
    out.push_back(std::move(s));
  }
  return out;
}

ModelConfig model_config_for(const ModelConfig& base, const FeatureConfig& features,
                             const LabelConfig& labels, InputMode mode, std::size_t vocab) {
  ModelConfig cfg = base;
  cfg.history = features.history;
  cfg.features = features.feature_width(mode);
  cfg.outputs = labels.bitmap_size();
  cfg.vocab = mode == InputMode::segmented ? 0 : vocab;
  return cfg;
}

double mean_cycles_per_access(std::span<const MemoryAccess> stream) {
  if (stream.size() < 2) return 1.0;
  const double span = static_cast<double>(stream.back().cycle - stream.front().cycle);
  const double mean = span / static_cast<double>(stream.size() - 1);
  return mean > 0.0 ? mean : 1.0;
}

std::size_t distance_skip(std::uint64_t latency, std::span<const MemoryAccess> stream) {
  if (latency == 0) return 0;
  return static_cast<std::size_t>(std::ceil(static_cast<double>(latency) / mean_cycles_per_access(stream)));
}

namespace {

constexpr char kMagic[4] = {'S', 'F', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw DatasetError("dataset file is truncated");
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw DatasetError("dataset file is truncated");
    std::span<const std::uint8_t> s(reinterpret_cast<const std::uint8_t*>(bytes_.data()) + pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_dataset(std::span<const Sample> samples) {
  std::uint32_t n = 0, f = 0, b = 0;
  std::uint8_t tokens = 0;
  if (!samples.empty()) {
    n = static_cast<std::uint32_t>(samples[0].input.history());
    f = static_cast<std::uint32_t>(samples[0].input.features.cols());
    b = static_cast<std::uint32_t>(samples[0].label.size());
    tokens = samples[0].input.tokens.empty() ? 0 : 1;
  }
  std::string out(kMagic, 4);
  put(out, kVersion);
  put(out, n);
  put(out, f);
  put(out, b);
  put(out, tokens);
  put(out, static_cast<std::uint64_t>(samples.size()));
  for (const auto& s : samples) {
    const auto& in = s.input;
    if (in.history() != n || static_cast<std::uint32_t>(in.features.cols()) != f ||
        s.label.size() != b || in.tokens.empty() == (tokens != 0)) {
      throw DatasetError("samples have inconsistent shapes");
    }
    for (Eigen::Index i = 0; i < in.features.size(); ++i) put(out, static_cast<float>(in.features.data()[i]));
    for (std::int32_t t : in.tokens) put(out, t);
    for (Eigen::Index i = 0; i < in.context.size(); ++i) put(out, static_cast<float>(in.context.data()[i]));
    const auto packed = s.label.pack();
    out.append(reinterpret_cast<const char*>(packed.data()), packed.size());
    put(out, s.ordinal);
    put(out, s.block);
    put(out, static_cast<std::uint8_t>(s.truncated));
  }
  return out;
}

std::vector<Sample> decode_dataset(const std::string& bytes) {
  Reader r(bytes);
  const auto magic = r.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw DatasetError("not a dataset file");
  if (r.get<std::uint32_t>() != kVersion) throw DatasetError("unsupported dataset version");
  const auto n = r.get<std::uint32_t>();
  const auto f = r.get<std::uint32_t>();
  const auto b = r.get<std::uint32_t>();
  const bool tokens = r.get<std::uint8_t>() != 0;
  const auto count = r.get<std::uint64_t>();

  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t k = 0; k < count; ++k) {
    Sample s;
    s.input.features.resize(n, f);
    for (Eigen::Index i = 0; i < s.input.features.size(); ++i) s.input.features.data()[i] = r.get<float>();
    if (tokens) {
      s.input.tokens.resize(n);
      for (auto& t : s.input.tokens) t = r.get<std::int32_t>();
    }
    s.input.context.resize(n, 2);
    for (Eigen::Index i = 0; i < s.input.context.size(); ++i) s.input.context.data()[i] = r.get<float>();
    s.label = DeltaBitmap::unpack(r.take((b + 7) / 8), b);
    s.ordinal = r.get<std::uint64_t>();
    s.block = r.get<std::uint64_t>();
    s.truncated = r.get<std::uint8_t>() != 0;
    out.push_back(std::move(s));
  }
  if (!r.done()) throw DatasetError("trailing bytes after dataset");
  return out;
}

void write_dataset(const std::string& path, std::span<const Sample> samples) {
  const std::string bytes = encode_dataset(samples);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DatasetError("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DatasetError("write failed for " + path);
}

std::vector<Sample> read_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DatasetError("cannot read " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_dataset(bytes);
}

}  // namespace segfetch
