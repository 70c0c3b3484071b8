#pragma once

// Line-delimited JSON datasets: one object instance per line. Doubles are
// written in shortest round-trip form, so read(write(x)) == x bit for bit.
// Schema: docs/formats.md.

#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "edgedepth/instance.hpp"

namespace edgedepth {

inline constexpr int kDatasetSchemaVersion = 1;

nlohmann::json instance_to_json(const Instance& inst);
Instance instance_from_json(const nlohmann::json& j);

/// Throws IoError when the file cannot be written.
void write_dataset(const std::filesystem::path& path, std::span<const Instance> instances);
/// Throws IoError / ParseError (the message names the 1-based line).
std::vector<Instance> read_dataset(const std::filesystem::path& path);

}  // namespace edgedepth
