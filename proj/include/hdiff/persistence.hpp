#pragma once

// Bit-exact binary formats: the token cache ("HDTK") for datasets and
// generation outputs, and the checkpoint ("HDCK") for model parameters with
// optional optimizer moments. Both are little-endian, versioned, and carry a
// trailing 64-bit checksum over the payload. Writes are atomic (temp file +
// rename).

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hdiff/network.hpp"
#include "hdiff/token_space.hpp"
#include "hdiff/toyworld.hpp"
#include "hdiff/training.hpp"

namespace hdiff {

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr uint32_t kTokenCacheVersion = 1;
inline constexpr uint32_t kCheckpointVersion = 1;

void save_token_cache(const std::string& path, const ToyDataset& dataset);
ToyDataset load_token_cache(const std::string& path);

struct CheckpointMeta {
    uint64_t train_digest = 0;
    uint64_t step = 0;
    TokenScaler scaler{};
};

struct Checkpoint {
    ModelParams<float> params;
    std::optional<OptimizerState> opt;
    CheckpointMeta meta;
};

void save_checkpoint(const std::string& path, const ModelParams<float>& params,
                     const OptimizerState* opt, const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::string& path);

// line-oriented `key = value` sidecar describing a run
void write_manifest(const std::string& path,
                    const std::vector<std::pair<std::string, std::string>>& entries);

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull);

} // namespace hdiff
