#pragma once

// Versioned binary checkpoint of a training run:
//   "PXPROTO\0" | u32 version | u64 payload bytes | payload | u64 FNV-1a(payload)
// The payload holds the config (JSON text), iteration, parameters, momentum
// buffers, both prototype banks and the static label store. Doubles are
// stored bit-exact, so save/load round-trips exactly.

#include <filesystem>
#include <stdexcept>
#include <string>

#include "pixproto/trainer.hpp"

namespace pixproto {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Missing, truncated, corrupted or incompatible checkpoint.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  TrainConfig config;
  TrainState state;
};

std::string serialize_checkpoint(const TrainConfig& cfg, const TrainState& state);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const TrainState& state);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pixproto
