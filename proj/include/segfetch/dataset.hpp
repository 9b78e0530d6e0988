#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "segfetch/features.hpp"
#include "segfetch/labeling.hpp"
#include "segfetch/model.hpp"
#include "segfetch/simulator.hpp"
#include "segfetch/trace.hpp"

namespace segfetch {

struct DatasetError : Error {
  explicit DatasetError(const std::string& m) : Error("dataset", m) {}
};

/// Accesses of `trace` that miss in a cache without prefetching, in order.
Trace llc_miss_stream(std::span<const MemoryAccess> trace, const CacheConfig& cache,
                      const AddressConfig& addr);

/// Labeled samples for every trigger position of `stream` with a full
/// history. History and label windows both stay inside `stream`. Tokenized
/// modes map through `dict` (required for them; grows unless frozen).
std::vector<Sample> build_samples(std::span<const MemoryAccess> stream, const FeatureConfig& features,
                                  const LabelConfig& labels, InputMode mode,
                                  TokenDictionary* dict = nullptr);

/// Model configuration matching a feature/label setup; the remaining fields
/// are copied from `base`.
ModelConfig model_config_for(const ModelConfig& base, const FeatureConfig& features,
                             const LabelConfig& labels, InputMode mode,
                             std::size_t vocab = 0);

/// Mean cycles between consecutive accesses (1 for a single access).
double mean_cycles_per_access(std::span<const MemoryAccess> stream);

/// Label skip (in accesses) covering `latency` cycles: ceil(T / mean CPA).
std::size_t distance_skip(std::uint64_t latency, std::span<const MemoryAccess> stream);

/// Binary dataset file, little-endian: magic, version, N, F, B, token flag,
/// sample count, then per sample the feature rows (f32), tokens (i32, when
/// flagged), context rows (f32), the packed label, ordinal (u64), block
/// (u64) and truncation flag (u8).
void write_dataset(const std::string& path, std::span<const Sample> samples);
std::vector<Sample> read_dataset(const std::string& path);

/// Serialized bytes of write_dataset, for hashing and tests.
std::string encode_dataset(std::span<const Sample> samples);
std::vector<Sample> decode_dataset(const std::string& bytes);

}  // namespace segfetch
