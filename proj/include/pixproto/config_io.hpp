#pragma once

// JSON form of TrainConfig. Every key is optional (missing keys keep their
// defaults); unknown keys and wrongly typed values raise ConfigError naming
// the offending field. Comments in the file are ignored.

#include <filesystem>
#include <string>

#include "json.hpp"
#include "pixproto/trainer.hpp"

namespace pixproto {

nlohmann::json config_to_json(const TrainConfig& cfg);
/// Parses and validates.
TrainConfig config_from_json(const nlohmann::json& j);

TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
std::string dump_config(const TrainConfig& cfg);

/// FNV-1a 64 of the canonical dump, as 16 hex digits.
std::string config_hash(const TrainConfig& cfg);

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace pixproto
