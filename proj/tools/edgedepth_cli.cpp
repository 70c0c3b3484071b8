// edgedepth: dataset generation, training, evaluation and ablations.
//
//   edgedepth <generate|train|eval|ablate-edges|denom-hist> [--config run.json] [--<key> value]...
//
// Every leaf of the run configuration is also a flag named by its dotted path
// (e.g. --train.lr 1e-4, --eval.strategy uniform, --ablate.ks '[50,"all"]').
// Precedence: defaults < config file < EDGEDEPTH_SEED < flags. Results go to
// stdout as JSON; failures print {"error": {...}} to stderr and exit nonzero.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "edgedepth/harness.hpp"

namespace {

using nlohmann::json;
using namespace edgedepth;

constexpr int kExitFailure = 2;
constexpr int kExitUsage = 64;

void report_error(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
}

// Collects "a.b.c" -> default value for every leaf of the default config.
void collect_leaves(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
  for (const auto& [key, value] : j.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) {
      collect_leaves(value, path, out);
    } else if (path != "schema_version") {
      out.emplace(path, value);
    }
  }
}

json parse_flag_value(const std::string& text, const json& like) {
  if (like.is_string()) return text;
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    throw Error(ErrorKind::ParseError, "cannot parse flag value '" + text + "'");
  }
}

void set_path(json& root, const std::string& path, json value) {
  json* node = &root;
  std::size_t start = 0;
  for (std::size_t dot; (dot = path.find('.', start)) != std::string::npos; start = dot + 1) {
    node = &(*node)[path.substr(start, dot - start)];
  }
  (*node)[path.substr(start)] = std::move(value);
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Edge-based monocular depth: data, training and evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("-c,--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  bool print_config = false;
  app.add_flag("--print-config", print_config, "print the resolved configuration before running");

  std::map<std::string, json> leaves;
  collect_leaves(RunConfig{}.to_json(), "", leaves);
  std::map<std::string, std::string> flag_values;
  for (const auto& [path, value] : leaves) {
    app.add_option("--" + path, flag_values[path], "default: " + value.dump())
        ->group("Run configuration");
  }

  auto* generate = app.add_subcommand("generate", "write train/val datasets");
  auto* train = app.add_subcommand("train", "train the weighting head (train.head)");
  auto* eval = app.add_subcommand("eval", "evaluate eval.strategy and write a metrics report");
  auto* ablate = app.add_subcommand("ablate-edges", "error versus number of fused candidates");
  auto* denom = app.add_subcommand("denom-hist", "candidate quality per denominator bin");
  for (auto* sub : {generate, train, eval, ablate, denom}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("UsageError", e.what());
    return kExitUsage;
  }

  try {
    json given = {{"schema_version", kRunConfigSchemaVersion}};
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw Error(ErrorKind::IoError, "cannot open config '" + config_path + "'");
      try {
        given = json::parse(in);
      } catch (const json::exception& e) {
        throw Error(ErrorKind::ParseError, config_path + ": " + e.what());
      }
    }
    RunConfig cfg = RunConfig::from_json(given);
    apply_seed_override(cfg);

    json overlay = json::object();
    for (const auto& [path, text] : flag_values) {
      if (app.count("--" + path) > 0) set_path(overlay, path, parse_flag_value(text, leaves[path]));
    }
    if (!overlay.empty()) {
      json merged = cfg.to_json();
      merged.merge_patch(overlay);
      cfg = RunConfig::from_json(merged);
    }
    if (print_config) std::cerr << cfg.to_json().dump(2) << '\n';

    json result;
    if (*generate) {
      const auto s = cmd_generate(cfg);
      result = {{"train", s.train.string()},
                {"val", s.val.string()},
                {"train_count", s.train_count},
                {"val_count", s.val_count}};
    } else if (*train) {
      const auto s = cmd_train(cfg);
      result = {{"head", to_string(cfg.head)},
                {"epochs", s.epochs},
                {"best_epoch", s.best_epoch},
                {"best_val_mae", s.best_val_mae},
                {"checkpoint", s.checkpoint.string()},
                {"log", s.log.string()}};
    } else if (*eval) {
      const auto rep = cmd_eval(cfg);
      json pct = json::object();
      for (const auto& [p, v] : rep.summary.percentiles) pct["p" + std::to_string(int(p))] = v;
      result = {{"strategy", rep.strategy},
                {"evaluated", rep.summary.evaluated},
                {"failed", rep.summary.failed},
                {"mean_abs_error", rep.summary.mean},
                {"median_abs_error", rep.summary.median},
                {"percentiles", pct},
                {"wall_clock_s", rep.wall_clock_s}};
    } else if (*ablate) {
      result = json::array();
      for (const auto& r : cmd_ablate_edges(cfg)) {
        result.push_back({{"k", r.k},
                          {"mean_abs_error", r.mean},
                          {"median_abs_error", r.median},
                          {"failed", r.failed}});
      }
    } else if (*denom) {
      result = json::array();
      for (const auto& b : cmd_denominator_histogram(cfg)) {
        result.push_back(
            {{"bin_lo", b.lo}, {"bin_hi", b.hi}, {"count", b.count}, {"count_good", b.count_good}});
      }
    }
    std::cout << result.dump(2) << '\n';
    return EXIT_SUCCESS;
  } catch (const Error& e) {
    report_error(to_string(e.kind()), e.what());
  } catch (const std::exception& e) {
    report_error("InternalError", e.what());
  }
  return kExitFailure;
}
