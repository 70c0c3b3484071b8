#pragma once

// Experiment configuration. The on-disk form is JSON with a schema_version
// key; missing keys take defaults, unknown keys are rejected. Every report
// echoes the fully resolved configuration. Field reference: docs/formats.md.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edgedepth/gmw.hpp"
#include "edgedepth/synth.hpp"
#include "edgedepth/uncertainty.hpp"

namespace edgedepth {

inline constexpr int kRunConfigSchemaVersion = 1;
inline constexpr const char* kSeedEnvVar = "EDGEDEPTH_SEED";

enum class Strategy { Gmw, Uniform, Uncertainty, InverseDenominator };
enum class Head { Gmw, Uncertainty };
enum class Binning { Quantile, Linear, Log };

const char* to_string(Strategy s);
const char* to_string(Head h);
const char* to_string(WeightRule r);
const char* to_string(Binning b);

struct RunConfig {
  std::uint64_t seed = 42;

  // paths
  std::string data_dir = "data";
  std::string output_dir = "runs";

  // data
  Index train_count = 8000;
  Index val_count = 2000;
  SceneConfig scene;
  SelectionConfig selection;

  // networks
  Index encoder_layers = 4;
  Index encoder_hidden = 32;
  Index encoder_output = 32;
  nn::NormConfig norm;
  SinkhornConfig sinkhorn;
  WeightConfig weights;
  UncertaintyConfig uncertainty;

  // training
  Head head = Head::Gmw;
  Index batch_size = 32;
  Index cls_epochs = 50;
  Index reg_epochs = 50;
  nn::AdamWConfig optimizer{1e-3, 1e-5};
  double beta = 1.0;
  double bce_eps = 1e-7;
  int train_sinkhorn_iters = 20;  // fixed unrolled budget while training

  // evaluation
  Strategy strategy = Strategy::Gmw;
  std::string eval_dataset;     // empty: <data_dir>/val.jsonl
  std::string eval_checkpoint;  // empty: <output_dir>/<head>.ckpt for the strategy
  double histogram_bin_width = 0.25;
  Index histogram_bins = 40;
  std::vector<double> percentiles{50, 75, 90, 95, 99};

  // ablations
  std::vector<Index> ablate_ks{50, 500, 1500, 0};  // 0 means every candidate
  Index denom_bins = 10;
  Binning denom_binning = Binning::Quantile;
  double good_threshold = 0.5;
  bool denom_apply_mask = false;

  GmwConfig gmw_config() const;
  /// gmw_config() with the training Sinkhorn iteration budget.
  GmwConfig gmw_train_config() const;

  std::filesystem::path train_path() const;
  std::filesystem::path val_path() const;
  std::filesystem::path eval_dataset_path() const;
  std::filesystem::path checkpoint_path(Head h) const;
  std::filesystem::path train_log_path(Head h) const;
  /// eval_checkpoint if set, else checkpoint_path(h).
  std::filesystem::path eval_checkpoint_path(Head h) const;

  /// Throws InvalidArgument on out-of-range values.
  void validate() const;

  nlohmann::json to_json() const;
  /// Overlays `j` on the defaults; throws ParseError on unknown keys, wrong
  /// types or a missing/unsupported schema_version.
  static RunConfig from_json(const nlohmann::json& j);
};

/// Reads a config file (IoError / ParseError).
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies EDGEDEPTH_SEED if set; ParseError when it is not an unsigned integer.
void apply_seed_override(RunConfig& cfg);

}  // namespace edgedepth
