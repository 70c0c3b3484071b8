#pragma once

// Experiment runner behind the CLI: dataset generation, two-phase training,
// evaluation, and the edge-count and denominator-quality studies. Every
// command is deterministic given its RunConfig.

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edgedepth/checkpoint.hpp"
#include "edgedepth/run_config.hpp"

namespace edgedepth {

/// Keeps freed large buffers in the heap instead of returning them to the
/// OS; training reallocates the same few megabyte-sized arrays every step.
/// No-op outside glibc.
void tune_allocator();

std::vector<EdgeSample> make_samples(std::span<const Instance> instances,
                                     const SelectionConfig& selection);

// ---- checkpoints ---------------------------------------------------------

/// Model-shape settings a checkpoint must agree with to be loaded.
nlohmann::json model_signature(const RunConfig& cfg, Head head);

Checkpoint pack_gmw(GmwModel& model, const nn::AdamW& opt, const RunConfig& cfg,
                    const nlohmann::json& progress);
Checkpoint pack_uncertainty(UncertaintyModel& model, const nn::AdamW& opt, const RunConfig& cfg,
                            const nlohmann::json& progress);
/// Throw IncompatibleCheckpoint on kind or shape mismatch. `opt`, if given,
/// receives the stored step count.
GmwModel unpack_gmw(const Checkpoint& ckpt, const RunConfig& cfg, nn::AdamW* opt = nullptr);
UncertaintyModel unpack_uncertainty(const Checkpoint& ckpt, const RunConfig& cfg,
                                    nn::AdamW* opt = nullptr);

// ---- weighting -----------------------------------------------------------

/// Maps a sample to weights over its selected candidates.
using Weighter = std::function<nn::Vector(const EdgeSample&)>;

/// Builds the configured strategy, loading a checkpoint when it needs one.
Weighter make_weighter(const RunConfig& cfg);

struct ObjectResult {
  std::uint64_t id = 0;
  double depth_star = 0;
  double depth = 0;  // NaN when the object had no usable candidates
  double abs_error = 0;
  Index candidates = 0;
  bool ok = false;
};

std::vector<ObjectResult> evaluate(std::span<const Instance> instances,
                                   std::span<const EdgeSample> samples, const Weighter& weigh);

struct ErrorSummary {
  Index evaluated = 0;
  Index failed = 0;
  double mean = 0;
  double median = 0;
  double rmse = 0;
  double max = 0;
  std::vector<std::pair<double, double>> percentiles;  // (p, value)
};

ErrorSummary summarize(std::span<const ObjectResult> results, std::span<const double> percentiles);

// ---- commands ------------------------------------------------------------

struct GenerateSummary {
  std::filesystem::path train;
  std::filesystem::path val;
  Index train_count = 0;
  Index val_count = 0;
};

/// Train and val splits drawn with seeds mix_seed(seed, 1) and mix_seed(seed, 2).
GenerateSummary cmd_generate(const RunConfig& cfg);

struct TrainSummary {
  Index epochs = 0;
  Index best_epoch = 0;  // 1-based; 0 when no epoch improved on infinity
  double best_val_mae = 0;
  std::filesystem::path checkpoint;
  std::filesystem::path log;
};

/// Trains cfg.head on the train split, selecting the checkpoint by val
/// fused-depth MAE. GMW: phase 1 (cls_epochs) optimizes L_c, phase 2
/// (reg_epochs) L_c + beta L_r. Uncertainty: Laplace NLL for all epochs.
TrainSummary cmd_train(const RunConfig& cfg);

/// In-memory variant used by cmd_train; writes the log and checkpoint.
TrainSummary train_gmw(const RunConfig& cfg, std::span<const EdgeSample> train,
                       std::span<const EdgeSample> val, const std::filesystem::path& checkpoint,
                       const std::filesystem::path& log);
TrainSummary train_uncertainty(const RunConfig& cfg, std::span<const EdgeSample> train,
                               std::span<const EdgeSample> val,
                               const std::filesystem::path& checkpoint,
                               const std::filesystem::path& log);

struct Histogram {
  double bin_width = 0;
  std::vector<Index> counts;  // last bin collects everything beyond the others

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

Histogram error_histogram(std::span<const ObjectResult> results, double bin_width, Index bins);

struct MetricsReport {
  std::string strategy;
  std::string dataset;
  std::string checkpoint;  // empty when the strategy has none
  std::vector<ObjectResult> objects;
  ErrorSummary summary;
  Histogram histogram;
  nlohmann::json config;
  double wall_clock_s = 0;

  nlohmann::json to_json() const;
};

/// Evaluates cfg.strategy on the eval dataset and writes
/// <output_dir>/eval_<strategy>.json and eval_<strategy>_hist.csv.
/// Throws EmptyDataset for an empty split.
MetricsReport cmd_eval(const RunConfig& cfg);

struct AblationRow {
  Index k = 0;  // requested k; "all" is reported as the largest edge count
  Index objects = 0;
  Index failed = 0;
  double mean_candidates = 0;
  double mean = 0;
  double median = 0;
};

std::vector<AblationRow> ablate_edges(const RunConfig& cfg, std::span<const Instance> instances,
                                      std::span<const Index> ks, const Weighter& weigh);
std::string ablation_csv(std::span<const AblationRow> rows);
/// Writes <output_dir>/ablate_edges.csv.
std::vector<AblationRow> cmd_ablate_edges(const RunConfig& cfg);

struct DenomBin {
  double lo = 0;
  double hi = 0;
  Index count = 0;
  Index count_good = 0;  // |z - z*| < good_threshold
};

std::vector<DenomBin> denominator_histogram(const RunConfig& cfg,
                                            std::span<const Instance> instances);
std::string denominator_csv(std::span<const DenomBin> bins);
/// Bins the eval dataset's candidates; writes <output_dir>/denom_hist.csv.
std::vector<DenomBin> cmd_denominator_histogram(const RunConfig& cfg);

}  // namespace edgedepth
