#pragma once

#include <string>

#include "segfetch/model.hpp"

namespace segfetch {

struct CheckpointError : Error {
  explicit CheckpointError(const std::string& m) : Error("checkpoint", m) {}
};

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

/// Layout: magic "SFCK", version, ModelConfig fields, every tensor of
/// ModelParams as little-endian f32 in declared order, then the FNV-1a
/// digest of all preceding bytes.
std::string encode_checkpoint(const ModelConfig& cfg, const ModelParams& params);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams& params);
Checkpoint load_checkpoint(const std::string& path);

/// Rounds every tensor to the nearest f32 so that in-memory parameters match
/// a reloaded checkpoint exactly.
ModelParams round_to_float(ModelParams params);

}  // namespace segfetch
