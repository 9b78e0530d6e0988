#include "segfetch/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

namespace segfetch {

namespace {

constexpr char kMagic[4] = {'S', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get(const std::string& bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw CheckpointError("checkpoint is truncated");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::uint64_t digest(std::string_view bytes) {
  Fnv1a h;
  h.update(bytes);
  return h.digest();
}

}  // namespace

std::string encode_checkpoint(const ModelConfig& cfg, const ModelParams& params) {
  cfg.validate();
  std::string out(kMagic, 4);
  put(out, kVersion);
  for (std::size_t v : {cfg.d_model, cfg.heads, cfg.layers, cfg.outputs, cfg.history, cfg.features,
                        cfg.vocab, cfg.ffn_mult}) {
    put(out, static_cast<std::uint64_t>(v));
  }
  put(out, static_cast<std::uint8_t>(cfg.context));

  const ModelParams shape = zero_params(cfg);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  shape.for_each([&](const std::string&, const Matrix& m) { shapes.emplace_back(m.rows(), m.cols()); });
  std::size_t k = 0;
  params.for_each([&](const std::string& name, const Matrix& m) {
    if (k >= shapes.size() || shapes[k] != std::make_pair(m.rows(), m.cols())) {
      throw CheckpointError("tensor " + name + " does not match the model configuration");
    }
    ++k;
    for (Eigen::Index i = 0; i < m.size(); ++i) put(out, static_cast<float>(m.data()[i]));
  });
  put(out, digest(out));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 + sizeof(std::uint64_t) || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError("not a checkpoint file");
  }
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::size_t tail = body;
  if (get<std::uint64_t>(bytes, tail) != digest(std::string_view(bytes).substr(0, body))) {
    throw CheckpointError("checkpoint checksum mismatch");
  }

  std::size_t pos = 4;
  if (get<std::uint32_t>(bytes, pos) != kVersion) throw CheckpointError("unsupported checkpoint version");
  Checkpoint c;
  for (std::size_t* field : {&c.config.d_model, &c.config.heads, &c.config.layers, &c.config.outputs,
                             &c.config.history, &c.config.features, &c.config.vocab,
                             &c.config.ffn_mult}) {
    *field = static_cast<std::size_t>(get<std::uint64_t>(bytes, pos));
  }
  const auto context = get<std::uint8_t>(bytes, pos);
  if (context > static_cast<std::uint8_t>(ContextMode::both)) throw CheckpointError("bad context mode");
  c.config.context = static_cast<ContextMode>(context);
  c.config.validate();

  c.params = zero_params(c.config);
  c.params.for_each([&](const std::string&, Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = get<float>(bytes, pos);
  });
  if (pos != body) throw CheckpointError("checkpoint size does not match its configuration");
  return c;
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams& params) {
  const std::string bytes = encode_checkpoint(cfg, params);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read " + path);
  return decode_checkpoint(std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()));
}

ModelParams round_to_float(ModelParams params) {
  params.for_each([](const std::string&, Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(m.data()[i]);
  });
  return params;
}

}  // namespace segfetch
