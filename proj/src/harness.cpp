#include "edgedepth/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "edgedepth/dataset_io.hpp"
#include "edgedepth/fusion.hpp"

namespace edgedepth {

using nlohmann::json;

namespace {

constexpr std::uint64_t kTrainSplitStream = 1;
constexpr std::uint64_t kValSplitStream = 2;
constexpr std::uint64_t kModelInitStream = 101;
constexpr std::uint64_t kShuffleStream = 102;

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot open '" + path.string() + "' for writing");
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  auto out = open_output(path);
  out << text;
  out.flush();
  if (!out) throw Error(ErrorKind::IoError, "failed writing '" + path.string() + "'");
}

std::vector<Instance> read_nonempty(const std::filesystem::path& path) {
  auto data = read_dataset(path);
  if (data.empty()) throw Error(ErrorKind::EmptyDataset, "'" + path.string() + "' has no objects");
  return data;
}

double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double pos = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// Mean |fused - z*| over samples with candidates.
double mean_fused_error(std::span<const EdgeSample> samples, const Weighter& weigh) {
  double sum = 0;
  Index count = 0;
  for (const auto& s : samples) {
    if (s.selected.empty()) continue;
    sum += std::abs(weigh(s).dot(s.selected_depths()) - s.depth_star);
    ++count;
  }
  return count > 0 ? sum / static_cast<double>(count) : std::numeric_limits<double>::infinity();
}

json optimizer_json(const nn::AdamW& opt) {
  const auto& c = opt.config();
  return {{"steps", opt.steps()},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps}};
}

void check_kind(const Checkpoint& ckpt, Head head, const RunConfig& cfg) {
  const json& meta = ckpt.meta;
  if (!meta.contains("kind") || meta["kind"] != to_string(head)) {
    throw Error(ErrorKind::IncompatibleCheckpoint,
                std::string("checkpoint is not a ") + to_string(head) + " model");
  }
  const json expected = model_signature(cfg, head);
  if (!meta.contains("model") || meta["model"] != expected) {
    throw Error(ErrorKind::IncompatibleCheckpoint,
                "checkpoint model " + (meta.contains("model") ? meta["model"].dump() : "{}") +
                    " does not match config " + expected.dump());
  }
}

void restore_steps(const Checkpoint& ckpt, nn::AdamW* opt) {
  if (opt == nullptr) return;
  try {
    opt->set_steps(ckpt.meta.at("optimizer").at("steps").get<std::int64_t>());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::IncompatibleCheckpoint, e.what());
  }
}

// Shared epoch bookkeeping: writes one log line per epoch and keeps the
// best-val checkpoint on disk.
class EpochLogger {
 public:
  EpochLogger(const std::filesystem::path& log, std::filesystem::path checkpoint)
      : out_(open_output(log)), log_(log), checkpoint_(std::move(checkpoint)) {}

  bool record(json rec, double val_mae, const std::function<Checkpoint()>& pack) {
    const bool improved = val_mae < best_;
    if (improved) {
      best_ = val_mae;
      best_epoch_ = rec["epoch"].get<Index>();
      save_checkpoint(checkpoint_, pack());
    }
    rec["val_mae"] = val_mae;
    rec["best"] = improved;
    out_ << rec.dump() << '\n';
    out_.flush();
    if (!out_) throw Error(ErrorKind::IoError, "failed writing '" + log_.string() + "'");
    return improved;
  }

  TrainSummary summary(Index epochs) const {
    return {epochs, best_epoch_, best_, checkpoint_, log_};
  }

 private:
  std::ofstream out_;
  std::filesystem::path log_;
  std::filesystem::path checkpoint_;
  double best_ = std::numeric_limits<double>::infinity();
  Index best_epoch_ = 0;
};

[[noreturn]] void abort_non_finite(const RunConfig& cfg, Head head, const json& dump) {
  const auto path =
      std::filesystem::path(cfg.output_dir) / (std::string(to_string(head)) + "_nonfinite.json");
  try {
    write_text(path, dump.dump(2) + "\n");
  } catch (const Error&) {
    // The loss error below is the one worth reporting.
  }
  throw Error(ErrorKind::NonFiniteLoss,
              "non-finite training loss; diagnostics in '" + path.string() + "'");
}

}  // namespace

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

std::vector<EdgeSample> make_samples(std::span<const Instance> instances,
                                     const SelectionConfig& selection) {
  std::vector<EdgeSample> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) out.push_back(make_sample(inst, selection));
  return out;
}

json model_signature(const RunConfig& cfg, Head head) {
  if (head == Head::Gmw) {
    return {{"layers", cfg.encoder_layers},
            {"hidden", cfg.encoder_hidden},
            {"output", cfg.encoder_output}};
  }
  const auto& e = cfg.uncertainty.encoder;
  return {{"layers", e.layers}, {"hidden", e.hidden}, {"output", e.output_dim}};
}

Checkpoint pack_gmw(GmwModel& model, const nn::AdamW& opt, const RunConfig& cfg,
                    const json& progress) {
  Checkpoint ckpt;
  ckpt.meta = {{"kind", "gmw"},
               {"model", model_signature(cfg, Head::Gmw)},
               {"optimizer", optimizer_json(opt)},
               {"progress", progress},
               {"config", cfg.to_json()}};
  put_params(ckpt, model.params());
  put_running_stats(ckpt, model.encoder2d(), "enc2d");
  put_running_stats(ckpt, model.encoder3d(), "enc3d");
  return ckpt;
}

Checkpoint pack_uncertainty(UncertaintyModel& model, const nn::AdamW& opt, const RunConfig& cfg,
                            const json& progress) {
  Checkpoint ckpt;
  ckpt.meta = {{"kind", "uncertainty"},
               {"model", model_signature(cfg, Head::Uncertainty)},
               {"optimizer", optimizer_json(opt)},
               {"progress", progress},
               {"config", cfg.to_json()}};
  put_params(ckpt, model.params());
  put_running_stats(ckpt, model.encoder(), "unc");
  return ckpt;
}

GmwModel unpack_gmw(const Checkpoint& ckpt, const RunConfig& cfg, nn::AdamW* opt) {
  check_kind(ckpt, Head::Gmw, cfg);
  GmwModel model(cfg.gmw_config(), 0);
  get_params(ckpt, model.params());
  get_running_stats(ckpt, model.encoder2d(), "enc2d");
  get_running_stats(ckpt, model.encoder3d(), "enc3d");
  restore_steps(ckpt, opt);
  return model;
}

UncertaintyModel unpack_uncertainty(const Checkpoint& ckpt, const RunConfig& cfg,
                                    nn::AdamW* opt) {
  check_kind(ckpt, Head::Uncertainty, cfg);
  UncertaintyModel model(cfg.uncertainty, 0);
  get_params(ckpt, model.params());
  get_running_stats(ckpt, model.encoder(), "unc");
  restore_steps(ckpt, opt);
  return model;
}

Weighter make_weighter(const RunConfig& cfg) {
  switch (cfg.strategy) {
    case Strategy::Uniform:
      return [](const EdgeSample& s) {
        return weight_uniform(static_cast<Index>(s.selected.size()));
      };
    case Strategy::InverseDenominator:
      return [](const EdgeSample& s) {
        const auto cands = s.selected_candidates();
        return weight_inverse_denominator(std::span<const DepthCandidated>(cands));
      };
    case Strategy::Gmw: {
      auto model = std::make_shared<GmwModel>(
          unpack_gmw(load_checkpoint(cfg.eval_checkpoint_path(Head::Gmw)), cfg));
      return [model](const EdgeSample& s) { return model->weights(s); };
    }
    case Strategy::Uncertainty: {
      auto model = std::make_shared<UncertaintyModel>(
          unpack_uncertainty(load_checkpoint(cfg.eval_checkpoint_path(Head::Uncertainty)), cfg));
      return [model](const EdgeSample& s) { return model->weights(s); };
    }
  }
  throw Error(ErrorKind::InvalidArgument, "unknown strategy");
}

std::vector<ObjectResult> evaluate(std::span<const Instance> instances,
                                   std::span<const EdgeSample> samples, const Weighter& weigh) {
  require(instances.size() == samples.size(), ErrorKind::ShapeMismatch,
          "one sample per instance expected");
  std::vector<ObjectResult> out;
  out.reserve(samples.size());
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const EdgeSample& s = samples[k];
    ObjectResult r;
    r.id = instances[k].id;
    r.depth_star = s.depth_star;
    r.candidates = static_cast<Index>(s.selected.size());
    if (s.selected.empty()) {
      r.depth = std::numeric_limits<double>::quiet_NaN();
      r.abs_error = std::numeric_limits<double>::quiet_NaN();
    } else {
      const auto cands = s.selected_candidates();
      r.depth = fuse_depth(std::span<const DepthCandidated>(cands), weigh(s));
      r.abs_error = std::abs(r.depth - r.depth_star);
      r.ok = true;
    }
    out.push_back(r);
  }
  return out;
}

ErrorSummary summarize(std::span<const ObjectResult> results, std::span<const double> percentiles) {
  ErrorSummary s;
  std::vector<double> errs;
  for (const auto& r : results) {
    if (r.ok) {
      errs.push_back(r.abs_error);
    } else {
      ++s.failed;
    }
  }
  s.evaluated = static_cast<Index>(errs.size());
  if (errs.empty()) {
    s.mean = s.median = s.rmse = s.max = std::numeric_limits<double>::quiet_NaN();
  } else {
    double sum = 0;
    double sq = 0;
    for (const double e : errs) {
      sum += e;
      sq += e * e;
    }
    const auto n = static_cast<double>(errs.size());
    std::sort(errs.begin(), errs.end());
    s.mean = sum / n;
    s.rmse = std::sqrt(sq / n);
    s.max = errs.back();
    s.median = quantile_sorted(errs, 50);
  }
  for (const double p : percentiles) s.percentiles.emplace_back(p, quantile_sorted(errs, p));
  return s;
}

GenerateSummary cmd_generate(const RunConfig& cfg) {
  cfg.validate();
  const std::filesystem::path dir(cfg.data_dir);
  if (!std::filesystem::is_directory(dir)) {
    throw Error(ErrorKind::IoError, "output directory '" + dir.string() + "' does not exist");
  }
  GenerateSummary out{cfg.train_path(), cfg.val_path(), cfg.train_count, cfg.val_count};
  write_dataset(out.train,
                generate_instances(cfg.scene, cfg.train_count, mix_seed(cfg.seed, kTrainSplitStream)));
  write_dataset(out.val,
                generate_instances(cfg.scene, cfg.val_count, mix_seed(cfg.seed, kValSplitStream)));
  return out;
}

TrainSummary train_gmw(const RunConfig& cfg, std::span<const EdgeSample> train,
                       std::span<const EdgeSample> val, const std::filesystem::path& checkpoint,
                       const std::filesystem::path& log) {
  cfg.validate();
  require(!train.empty(), ErrorKind::EmptyDataset, "empty training split");
  require(!val.empty(), ErrorKind::EmptyDataset, "empty validation split");

  GmwModel model(cfg.gmw_train_config(), mix_seed(cfg.seed, kModelInitStream));
  const auto params = model.params();
  nn::AdamW opt(cfg.optimizer);
  std::mt19937_64 rng(mix_seed(cfg.seed, kShuffleStream));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  EpochLogger logger(log, checkpoint);
  const Weighter weigh = [&model](const EdgeSample& s) { return model.weights(s); };

  const Index epochs = cfg.cls_epochs + cfg.reg_epochs;
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  for (Index epoch = 1; epoch <= epochs; ++epoch) {
    const int phase = epoch <= cfg.cls_epochs ? 1 : 2;
    const double beta = phase == 1 ? 0.0 : cfg.beta;
    std::shuffle(order.begin(), order.end(), rng);

    double cls = 0;
    double reg = 0;
    double total = 0;
    Index iterations = 0;
    Index unconverged = 0;
    std::vector<const EdgeSample*> ptrs;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      ptrs.clear();
      for (std::size_t k = start; k < std::min(start + batch, order.size()); ++k) {
        ptrs.push_back(&train[order[k]]);
      }
      params.zero_grad();
      const BatchLoss loss = model.forward_backward(ptrs, nn::Mode::Train, beta, true);
      if (!std::isfinite(loss.total)) {
        json ids = json::array();
        for (std::size_t k = start; k < start + ptrs.size(); ++k) ids.push_back(order[k]);
        abort_non_finite(cfg, Head::Gmw,
                         {{"epoch", epoch},
                          {"phase", phase},
                          {"batch_start", start},
                          {"train_rows", ids},
                          {"classification", std::to_string(loss.classification)},
                          {"regression", std::to_string(loss.regression)},
                          {"params_finite", params.all_finite()}});
      }
      opt.step(params);
      const auto w = static_cast<double>(ptrs.size());
      cls += loss.classification * w;
      reg += loss.regression * w;
      total += loss.total * w;
      iterations += loss.sinkhorn_iterations;
      unconverged += loss.sinkhorn_unconverged;
    }
    const auto n = static_cast<double>(train.size());
    json rec = {{"epoch", epoch},
                {"phase", phase},
                {"beta", beta},
                {"loss", total / n},
                {"loss_cls", cls / n},
                {"loss_reg", reg / n},
                {"sinkhorn_iters_mean", static_cast<double>(iterations) / n},
                {"sinkhorn_unconverged", unconverged}};
    const double val_mae = mean_fused_error(val, weigh);
    logger.record(std::move(rec), val_mae, [&] {
      return pack_gmw(model, opt, cfg, {{"epoch", epoch}, {"phase", phase}, {"val_mae", val_mae}});
    });
  }
  return logger.summary(epochs);
}

TrainSummary train_uncertainty(const RunConfig& cfg, std::span<const EdgeSample> train,
                               std::span<const EdgeSample> val,
                               const std::filesystem::path& checkpoint,
                               const std::filesystem::path& log) {
  cfg.validate();
  require(!train.empty(), ErrorKind::EmptyDataset, "empty training split");
  require(!val.empty(), ErrorKind::EmptyDataset, "empty validation split");

  UncertaintyModel model(cfg.uncertainty, mix_seed(cfg.seed, kModelInitStream));
  const auto params = model.params();
  nn::AdamW opt(cfg.optimizer);
  std::mt19937_64 rng(mix_seed(cfg.seed, kShuffleStream));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  EpochLogger logger(log, checkpoint);
  const Weighter weigh = [&model](const EdgeSample& s) { return model.weights(s); };

  const Index epochs = cfg.cls_epochs + cfg.reg_epochs;
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  for (Index epoch = 1; epoch <= epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double nll = 0;
    Index count = 0;
    std::vector<const EdgeSample*> ptrs;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      ptrs.clear();
      for (std::size_t k = start; k < std::min(start + batch, order.size()); ++k) {
        ptrs.push_back(&train[order[k]]);
      }
      params.zero_grad();
      const UncertaintyLoss loss = model.forward_backward(ptrs, nn::Mode::Train, true);
      if (loss.candidates == 0) continue;
      if (!std::isfinite(loss.nll)) {
        abort_non_finite(cfg, Head::Uncertainty,
                         {{"epoch", epoch},
                          {"batch_start", start},
                          {"nll", std::to_string(loss.nll)},
                          {"params_finite", params.all_finite()}});
      }
      opt.step(params);
      nll += loss.nll * static_cast<double>(loss.candidates);
      count += loss.candidates;
    }
    json rec = {{"epoch", epoch},
                {"loss_nll", count > 0 ? nll / static_cast<double>(count) : 0.0}};
    const double val_mae = mean_fused_error(val, weigh);
    logger.record(std::move(rec), val_mae, [&] {
      return pack_uncertainty(model, opt, cfg, {{"epoch", epoch}, {"val_mae", val_mae}});
    });
  }
  return logger.summary(epochs);
}

TrainSummary cmd_train(const RunConfig& cfg) {
  cfg.validate();
  if (!std::filesystem::is_directory(cfg.output_dir)) {
    throw Error(ErrorKind::IoError, "output directory '" + cfg.output_dir + "' does not exist");
  }
  const auto train = make_samples(read_nonempty(cfg.train_path()), cfg.selection);
  const auto val = make_samples(read_nonempty(cfg.val_path()), cfg.selection);
  if (cfg.head == Head::Gmw) {
    return train_gmw(cfg, train, val, cfg.checkpoint_path(Head::Gmw), cfg.train_log_path(Head::Gmw));
  }
  return train_uncertainty(cfg, train, val, cfg.checkpoint_path(Head::Uncertainty),
                           cfg.train_log_path(Head::Uncertainty));
}

json Histogram::to_json() const {
  json lo = json::array();
  for (std::size_t b = 0; b < counts.size(); ++b) lo.push_back(static_cast<double>(b) * bin_width);
  return {{"bin_width", bin_width}, {"bin_lo", lo}, {"counts", counts}};
}

std::string Histogram::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < counts.size(); ++b) {
    out << static_cast<double>(b) * bin_width << ',';
    if (b + 1 == counts.size()) {
      out << "inf";
    } else {
      out << static_cast<double>(b + 1) * bin_width;
    }
    out << ',' << counts[b] << '\n';
  }
  return out.str();
}

Histogram error_histogram(std::span<const ObjectResult> results, double bin_width, Index bins) {
  require(bin_width > 0 && bins >= 1, ErrorKind::InvalidArgument, "bad histogram settings");
  Histogram h;
  h.bin_width = bin_width;
  h.counts.assign(static_cast<std::size_t>(bins) + 1, 0);
  for (const auto& r : results) {
    if (!r.ok) continue;
    const double slot = std::floor(r.abs_error / bin_width);
    const auto b = slot >= static_cast<double>(bins) ? static_cast<std::size_t>(bins)
                                                     : static_cast<std::size_t>(slot);
    ++h.counts[b];
  }
  return h;
}

json MetricsReport::to_json() const {
  json objs = json::array();
  for (const auto& r : objects) {
    json o = {{"id", r.id}, {"z_star", r.depth_star}, {"candidates", r.candidates}, {"ok", r.ok}};
    o["z_fused"] = r.ok ? json(r.depth) : json(nullptr);
    o["abs_error"] = r.ok ? json(r.abs_error) : json(nullptr);
    objs.push_back(std::move(o));
  }
  json pct = json::object();
  for (const auto& [p, v] : summary.percentiles) {
    std::ostringstream key;
    key << 'p' << p;
    pct[key.str()] = v;
  }
  return {{"strategy", strategy},
          {"dataset", dataset},
          {"checkpoint", checkpoint},
          {"objects", objects.size()},
          {"evaluated", summary.evaluated},
          {"failed", summary.failed},
          {"mean_abs_error", summary.mean},
          {"median_abs_error", summary.median},
          {"rmse", summary.rmse},
          {"max_abs_error", summary.max},
          {"percentiles", pct},
          {"histogram", histogram.to_json()},
          {"per_object", objs},
          {"config", config},
          {"wall_clock_s", wall_clock_s}};
}

MetricsReport cmd_eval(const RunConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto path = cfg.eval_dataset_path();
  const auto instances = read_nonempty(path);
  const Weighter weigh = make_weighter(cfg);
  const auto samples = make_samples(instances, cfg.selection);

  MetricsReport rep;
  rep.strategy = to_string(cfg.strategy);
  rep.dataset = path.string();
  if (cfg.strategy == Strategy::Gmw || cfg.strategy == Strategy::Uncertainty) {
    const Head h = cfg.strategy == Strategy::Gmw ? Head::Gmw : Head::Uncertainty;
    rep.checkpoint = cfg.eval_checkpoint_path(h).string();
  }
  rep.objects = evaluate(instances, samples, weigh);
  rep.summary = summarize(rep.objects, cfg.percentiles);
  rep.histogram = error_histogram(rep.objects, cfg.histogram_bin_width, cfg.histogram_bins);
  rep.config = cfg.to_json();
  rep.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const std::filesystem::path dir(cfg.output_dir);
  write_text(dir / ("eval_" + rep.strategy + ".json"), rep.to_json().dump(2) + "\n");
  write_text(dir / ("eval_" + rep.strategy + "_hist.csv"), rep.histogram.to_csv());
  return rep;
}

std::vector<AblationRow> ablate_edges(const RunConfig& cfg, std::span<const Instance> instances,
                                      std::span<const Index> ks, const Weighter& weigh) {
  require(!ks.empty(), ErrorKind::InvalidArgument, "ks must be non-empty");
  Index max_edges = 0;
  for (const auto& inst : instances) max_edges = std::max(max_edges, pair_count(inst.size()));
  std::vector<AblationRow> rows;
  for (const Index k : ks) {
    SelectionConfig sel = cfg.selection;
    sel.max_count = k == 0 ? std::max<Index>(max_edges, 1) : k;
    const auto samples = make_samples(instances, sel);
    const auto results = evaluate(instances, samples, weigh);
    const std::vector<double> none;
    const auto s = summarize(results, none);
    AblationRow row;
    row.k = k == 0 ? max_edges : k;
    row.objects = static_cast<Index>(results.size());
    row.failed = s.failed;
    double used = 0;
    for (const auto& r : results) used += static_cast<double>(r.candidates);
    row.mean_candidates = results.empty() ? 0 : used / static_cast<double>(results.size());
    row.mean = s.mean;
    row.median = s.median;
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::ostringstream out;
  out.precision(17);
  out << "k,objects,failed,mean_candidates,mean_abs_error,median_abs_error\n";
  for (const auto& r : rows) {
    out << r.k << ',' << r.objects << ',' << r.failed << ',' << r.mean_candidates << ',' << r.mean
        << ',' << r.median << '\n';
  }
  return out.str();
}

std::vector<AblationRow> cmd_ablate_edges(const RunConfig& cfg) {
  cfg.validate();
  const auto instances = read_nonempty(cfg.eval_dataset_path());
  const auto rows = ablate_edges(cfg, instances, cfg.ablate_ks, make_weighter(cfg));
  write_text(std::filesystem::path(cfg.output_dir) / "ablate_edges.csv", ablation_csv(rows));
  return rows;
}

std::vector<DenomBin> denominator_histogram(const RunConfig& cfg,
                                            std::span<const Instance> instances) {
  struct Item {
    double denom;
    bool good;
  };
  std::vector<Item> items;
  for (const auto& inst : instances) {
    const double z_star = inst.depth_star();
    for (const auto& c : generate_candidates(inst)) {
      if (!c.valid) continue;
      if (cfg.denom_apply_mask && c.denom < cfg.selection.tau) continue;
      items.push_back({c.denom, std::abs(c.depth - z_star) < cfg.good_threshold});
    }
  }
  std::sort(items.begin(), items.end(),
            [](const Item& a, const Item& b) { return a.denom < b.denom; });
  const auto bins = static_cast<std::size_t>(cfg.denom_bins);
  std::vector<DenomBin> out(bins);
  if (items.empty()) return out;

  const double lo = items.front().denom;
  const double hi = items.back().denom;
  if (cfg.denom_binning == Binning::Quantile) {
    // Equal-count bins by rank; bounds are the extreme values inside each bin.
    const std::size_t n = items.size();
    for (std::size_t b = 0; b < bins; ++b) {
      const std::size_t first = b * n / bins;
      const std::size_t last = (b + 1) * n / bins;
      DenomBin& bin = out[b];
      if (first == last) {
        bin.lo = bin.hi = items[std::min(first, n - 1)].denom;
        continue;
      }
      bin.lo = items[first].denom;
      bin.hi = items[last - 1].denom;
      for (std::size_t k = first; k < last; ++k) {
        ++bin.count;
        bin.count_good += items[k].good ? 1 : 0;
      }
    }
    return out;
  }

  const bool log_scale = cfg.denom_binning == Binning::Log;
  const double a = log_scale ? std::log(std::max(lo, 1e-300)) : lo;
  const double b_hi = log_scale ? std::log(std::max(hi, 1e-300)) : hi;
  const double width = (b_hi - a) / static_cast<double>(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    const double e0 = a + width * static_cast<double>(b);
    const double e1 = b + 1 == bins ? b_hi : a + width * static_cast<double>(b + 1);
    out[b].lo = log_scale ? std::exp(e0) : e0;
    out[b].hi = log_scale ? std::exp(e1) : e1;
  }
  for (const auto& it : items) {
    const double v = log_scale ? std::log(std::max(it.denom, 1e-300)) : it.denom;
    std::size_t b = width > 0 ? static_cast<std::size_t>((v - a) / width) : 0;
    b = std::min(b, bins - 1);
    ++out[b].count;
    out[b].count_good += it.good ? 1 : 0;
  }
  return out;
}

std::string denominator_csv(std::span<const DenomBin> bins) {
  std::ostringstream out;
  out.precision(17);
  out << "bin_lo,bin_hi,count,count_good\n";
  for (const auto& b : bins) out << b.lo << ',' << b.hi << ',' << b.count << ',' << b.count_good << '\n';
  return out.str();
}

std::vector<DenomBin> cmd_denominator_histogram(const RunConfig& cfg) {
  cfg.validate();
  const auto instances = read_nonempty(cfg.eval_dataset_path());
  const auto bins = denominator_histogram(cfg, instances);
  write_text(std::filesystem::path(cfg.output_dir) / "denom_hist.csv", denominator_csv(bins));
  return bins;
}

}  // namespace edgedepth
