#pragma once

// Binary checkpoint container: a JSON header (free-form metadata plus a
// tensor index) followed by little-endian float64 tensor data, row-major.
// Layout: docs/formats.md.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edgedepth/tinynn.hpp"

namespace edgedepth {

inline constexpr char kCheckpointMagic[8] = {'E', 'D', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

struct Tensor {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  std::vector<double> data;  // row-major

  bool operator==(const Tensor&) const = default;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Tensor> tensors;

  void put(const std::string& name, const Eigen::Ref<const nn::Matrix>& value);
  const Tensor* find(const std::string& name) const;
  /// Throws IncompatibleCheckpoint if the tensor is missing or has another shape.
  nn::Matrix get(const std::string& name, Index rows, Index cols) const;

  bool operator==(const Checkpoint&) const = default;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws IoError, or IncompatibleCheckpoint for foreign or corrupt files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameter values and AdamW moments under "<name>", "<name>.adam_m", "<name>.adam_v".
void put_params(Checkpoint& ckpt, const nn::ParamStore& params);
void get_params(const Checkpoint& ckpt, const nn::ParamStore& params);

/// Normalization running statistics under "<prefix>.block<k>.running_{mean,var}".
void put_running_stats(Checkpoint& ckpt, const nn::Encoder& enc, const std::string& prefix);
void get_running_stats(const Checkpoint& ckpt, nn::Encoder& enc, const std::string& prefix);

}  // namespace edgedepth
