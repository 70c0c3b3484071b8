#include "edgedepth/run_config.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace edgedepth {

using nlohmann::json;

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::Gmw: return "gmw";
    case Strategy::Uniform: return "uniform";
    case Strategy::Uncertainty: return "uncertainty";
    case Strategy::InverseDenominator: return "inverse_denominator";
  }
  return "?";
}

const char* to_string(Head h) { return h == Head::Gmw ? "gmw" : "uncertainty"; }

const char* to_string(WeightRule r) {
  return r == WeightRule::InverseDiagCost ? "inverse_diag_cost" : "assignment_diag";
}

const char* to_string(Binning b) {
  switch (b) {
    case Binning::Quantile: return "quantile";
    case Binning::Linear: return "linear";
    case Binning::Log: return "log";
  }
  return "?";
}

namespace {

template <typename E, std::size_t N>
E parse_enum(const json& j, const char* field, const E (&options)[N]) {
  const std::string s = j.get<std::string>();
  for (const E e : options) {
    if (s == to_string(e)) return e;
  }
  throw Error(ErrorKind::ParseError, std::string("unknown value '") + s + "' for " + field);
}

void reject_unknown(const json& given, const json& known, const std::string& path) {
  if (!given.is_object()) throw Error(ErrorKind::ParseError, path + " must be an object");
  for (const auto& [key, value] : given.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!known.contains(key)) throw Error(ErrorKind::ParseError, "unknown config key '" + here + "'");
    if (known.at(key).is_object()) reject_unknown(value, known.at(key), here);
  }
}

Index get_index(const json& j, const char* field) {
  if (!j.is_number_integer()) {
    throw Error(ErrorKind::ParseError, std::string(field) + " must be an integer");
  }
  return j.get<Index>();
}

double get_double(const json& j, const char* field) {
  if (!j.is_number()) throw Error(ErrorKind::ParseError, std::string(field) + " must be a number");
  return j.get<double>();
}

std::uint64_t get_u64(const json& j, const char* field) {
  if (!j.is_number_integer() || (!j.is_number_unsigned() && j.get<std::int64_t>() < 0)) {
    throw Error(ErrorKind::ParseError, std::string(field) + " must be a non-negative integer");
  }
  return j.get<std::uint64_t>();
}

}  // namespace

GmwConfig RunConfig::gmw_config() const {
  GmwConfig g;
  g.encoder2d = {4, encoder_layers, encoder_hidden, encoder_output};
  g.encoder3d = {6, encoder_layers, encoder_hidden, encoder_output};
  g.norm = norm;
  g.sinkhorn = sinkhorn;
  g.weights = weights;
  g.bce_eps = bce_eps;
  return g;
}

GmwConfig RunConfig::gmw_train_config() const {
  GmwConfig g = gmw_config();
  g.sinkhorn.max_iters = train_sinkhorn_iters;
  g.sinkhorn.tol = 0;
  return g;
}

std::filesystem::path RunConfig::train_path() const {
  return std::filesystem::path(data_dir) / "train.jsonl";
}

std::filesystem::path RunConfig::val_path() const {
  return std::filesystem::path(data_dir) / "val.jsonl";
}

std::filesystem::path RunConfig::eval_dataset_path() const {
  return eval_dataset.empty() ? val_path() : std::filesystem::path(eval_dataset);
}

std::filesystem::path RunConfig::checkpoint_path(Head h) const {
  return std::filesystem::path(output_dir) / (std::string(to_string(h)) + ".ckpt");
}

std::filesystem::path RunConfig::train_log_path(Head h) const {
  return std::filesystem::path(output_dir) / (std::string(to_string(h)) + "_train_log.jsonl");
}

std::filesystem::path RunConfig::eval_checkpoint_path(Head h) const {
  return eval_checkpoint.empty() ? checkpoint_path(h) : std::filesystem::path(eval_checkpoint);
}

void RunConfig::validate() const {
  const auto check = [](bool ok, const char* msg) {
    require(ok, ErrorKind::InvalidArgument, msg);
  };
  check(train_count >= 0 && val_count >= 0, "dataset sizes must be non-negative");
  check(scene.keypoints >= 2, "at least two keypoints are needed");
  scene.noise.validate();
  check(scene.poses.z_min > 0 && scene.poses.z_min < scene.poses.z_max, "bad depth range");
  check(scene.poses.x_min <= scene.poses.x_max && scene.poses.y_min <= scene.poses.y_max,
        "bad pose ranges");
  check(scene.poses.dims_jitter >= 0 && scene.poses.dims_jitter < 1, "dims_jitter must be in [0,1)");
  check((scene.dims.array() > 0).all(), "template dims must be positive");
  check(selection.tau >= 0 && selection.max_count >= 1, "selection needs tau >= 0 and k >= 1");
  check(encoder_layers >= 1 && encoder_hidden >= 1 && encoder_output >= 1,
        "encoder sizes must be positive");
  check(uncertainty.encoder.layers >= 1 && uncertainty.encoder.hidden >= 1 &&
            uncertainty.encoder.output_dim >= 1,
        "uncertainty encoder sizes must be positive");
  check(norm.eps > 0 && norm.momentum >= 0 && norm.momentum <= 1, "bad normalization settings");
  check(sinkhorn.alpha > 0 && sinkhorn.max_iters >= 1 && sinkhorn.tol >= 0, "bad sinkhorn settings");
  check(weights.eps > 0 && weights.temperature > 0, "bad weight settings");
  check(batch_size >= 1, "batch_size must be positive");
  check(cls_epochs >= 0 && reg_epochs >= 0 && cls_epochs + reg_epochs >= 1,
        "at least one training epoch is needed");
  check(optimizer.lr > 0 && optimizer.weight_decay >= 0, "bad optimizer settings");
  check(beta >= 0, "beta must be non-negative");
  check(train_sinkhorn_iters >= 1, "train.sinkhorn_iters must be positive");
  check(bce_eps > 0 && bce_eps < 0.5, "bce_eps must be in (0, 0.5)");
  check(histogram_bin_width > 0 && histogram_bins >= 1, "bad histogram settings");
  for (const double p : percentiles) check(p >= 0 && p <= 100, "percentiles must be in [0,100]");
  check(!ablate_ks.empty(), "ablate ks must be non-empty");
  for (const Index k : ablate_ks) check(k >= 0, "ablate ks must be non-negative (0 = all)");
  check(denom_bins >= 1 && good_threshold > 0, "bad denominator histogram settings");
}

json RunConfig::to_json() const {
  json ks = json::array();
  for (const Index k : ablate_ks) {
    if (k == 0) {
      ks.push_back("all");
    } else {
      ks.push_back(k);
    }
  }
  const auto& p = scene.poses;
  const auto& nz = scene.noise;
  return {
      {"schema_version", kRunConfigSchemaVersion},
      {"seed", seed},
      {"paths", {{"data_dir", data_dir}, {"output_dir", output_dir}}},
      {"data", {{"train_count", train_count}, {"val_count", val_count}}},
      {"scene",
       {{"template", to_string(scene.kind)},
        {"keypoints", scene.keypoints},
        {"dims", {scene.dims[0], scene.dims[1], scene.dims[2]}},
        {"template_seed", scene.template_seed},
        {"camera",
         {{"fx", scene.camera.fx},
          {"fy", scene.camera.fy},
          {"cx", scene.camera.cx},
          {"cy", scene.camera.cy}}},
        {"poses",
         {{"z_min", p.z_min},
          {"z_max", p.z_max},
          {"x_min", p.x_min},
          {"x_max", p.x_max},
          {"y_min", p.y_min},
          {"y_max", p.y_max},
          {"dims_jitter", p.dims_jitter}}},
        {"noise",
         {{"sigma_px", nz.sigma_px},
          {"sigma_3d", nz.sigma_3d},
          {"p_outlier", nz.p_outlier},
          {"outlier_box", nz.outlier_box}}}}},
      {"selection", {{"tau", selection.tau}, {"k", selection.max_count}}},
      {"model",
       {{"layers", encoder_layers},
        {"hidden", encoder_hidden},
        {"output", encoder_output},
        {"norm_eps", norm.eps},
        {"bn_momentum", norm.momentum}}},
      {"sinkhorn",
       {{"alpha", sinkhorn.alpha}, {"max_iters", sinkhorn.max_iters}, {"tol", sinkhorn.tol}}},
      {"weights",
       {{"rule", to_string(weights.rule)},
        {"eps", weights.eps},
        {"temperature", weights.temperature}}},
      {"uncertainty",
       {{"layers", uncertainty.encoder.layers},
        {"hidden", uncertainty.encoder.hidden},
        {"output", uncertainty.encoder.output_dim}}},
      {"train",
       {{"head", to_string(head)},
        {"batch_size", batch_size},
        {"cls_epochs", cls_epochs},
        {"reg_epochs", reg_epochs},
        {"lr", optimizer.lr},
        {"weight_decay", optimizer.weight_decay},
        {"adam_beta1", optimizer.beta1},
        {"adam_beta2", optimizer.beta2},
        {"adam_eps", optimizer.eps},
        {"beta", beta},
        {"bce_eps", bce_eps},
        {"sinkhorn_iters", train_sinkhorn_iters}}},
      {"eval",
       {{"strategy", to_string(strategy)},
        {"dataset", eval_dataset},
        {"checkpoint", eval_checkpoint},
        {"histogram_bin_width", histogram_bin_width},
        {"histogram_bins", histogram_bins},
        {"percentiles", percentiles}}},
      {"ablate", {{"ks", ks}}},
      {"denom_hist",
       {{"bins", denom_bins},
        {"binning", to_string(denom_binning)},
        {"good_threshold", good_threshold},
        {"apply_mask", denom_apply_mask}}},
  };
}

RunConfig RunConfig::from_json(const json& given) {
  const json defaults = RunConfig{}.to_json();
  reject_unknown(given, defaults, "");
  if (!given.contains("schema_version")) {
    throw Error(ErrorKind::ParseError, "config lacks schema_version");
  }
  if (given.at("schema_version") != kRunConfigSchemaVersion) {
    throw Error(ErrorKind::ParseError,
                "unsupported config schema_version " + given.at("schema_version").dump());
  }
  json j = defaults;
  j.merge_patch(given);

  RunConfig c;
  try {
    c.seed = get_u64(j["seed"], "seed");
    c.data_dir = j["paths"]["data_dir"].get<std::string>();
    c.output_dir = j["paths"]["output_dir"].get<std::string>();
    c.train_count = get_index(j["data"]["train_count"], "data.train_count");
    c.val_count = get_index(j["data"]["val_count"], "data.val_count");

    const json& s = j["scene"];
    c.scene.kind = template_kind_from_string(s["template"].get<std::string>());
    c.scene.keypoints = get_index(s["keypoints"], "scene.keypoints");
    if (!s["dims"].is_array() || s["dims"].size() != 3) {
      throw Error(ErrorKind::ParseError, "scene.dims must have 3 entries");
    }
    for (int k = 0; k < 3; ++k) c.scene.dims[k] = get_double(s["dims"][k], "scene.dims");
    c.scene.template_seed = get_u64(s["template_seed"], "scene.template_seed");
    const json& cam = s["camera"];
    c.scene.camera = Camerad(get_double(cam["fx"], "camera.fx"), get_double(cam["fy"], "camera.fy"),
                             get_double(cam["cx"], "camera.cx"), get_double(cam["cy"], "camera.cy"));
    const json& p = s["poses"];
    c.scene.poses = {get_double(p["z_min"], "poses.z_min"),   get_double(p["z_max"], "poses.z_max"),
                     get_double(p["x_min"], "poses.x_min"),   get_double(p["x_max"], "poses.x_max"),
                     get_double(p["y_min"], "poses.y_min"),   get_double(p["y_max"], "poses.y_max"),
                     get_double(p["dims_jitter"], "poses.dims_jitter")};
    const json& nz = s["noise"];
    c.scene.noise = {get_double(nz["sigma_px"], "noise.sigma_px"),
                     get_double(nz["sigma_3d"], "noise.sigma_3d"),
                     get_double(nz["p_outlier"], "noise.p_outlier"),
                     get_double(nz["outlier_box"], "noise.outlier_box")};

    c.selection.tau = get_double(j["selection"]["tau"], "selection.tau");
    c.selection.max_count = get_index(j["selection"]["k"], "selection.k");

    const json& m = j["model"];
    c.encoder_layers = get_index(m["layers"], "model.layers");
    c.encoder_hidden = get_index(m["hidden"], "model.hidden");
    c.encoder_output = get_index(m["output"], "model.output");
    c.norm.eps = get_double(m["norm_eps"], "model.norm_eps");
    c.norm.momentum = get_double(m["bn_momentum"], "model.bn_momentum");

    const json& sk = j["sinkhorn"];
    c.sinkhorn.alpha = get_double(sk["alpha"], "sinkhorn.alpha");
    c.sinkhorn.max_iters = static_cast<int>(get_index(sk["max_iters"], "sinkhorn.max_iters"));
    c.sinkhorn.tol = get_double(sk["tol"], "sinkhorn.tol");

    const json& w = j["weights"];
    c.weights.rule = parse_enum(w["rule"], "weights.rule",
                                {WeightRule::InverseDiagCost, WeightRule::AssignmentDiag});
    c.weights.eps = get_double(w["eps"], "weights.eps");
    c.weights.temperature = get_double(w["temperature"], "weights.temperature");

    const json& u = j["uncertainty"];
    c.uncertainty.encoder = {10, get_index(u["layers"], "uncertainty.layers"),
                             get_index(u["hidden"], "uncertainty.hidden"),
                             get_index(u["output"], "uncertainty.output")};
    c.uncertainty.norm = c.norm;

    const json& t = j["train"];
    c.head = parse_enum(t["head"], "train.head", {Head::Gmw, Head::Uncertainty});
    c.batch_size = get_index(t["batch_size"], "train.batch_size");
    c.cls_epochs = get_index(t["cls_epochs"], "train.cls_epochs");
    c.reg_epochs = get_index(t["reg_epochs"], "train.reg_epochs");
    c.optimizer = {get_double(t["lr"], "train.lr"), get_double(t["weight_decay"], "train.weight_decay"),
                   get_double(t["adam_beta1"], "train.adam_beta1"),
                   get_double(t["adam_beta2"], "train.adam_beta2"),
                   get_double(t["adam_eps"], "train.adam_eps")};
    c.beta = get_double(t["beta"], "train.beta");
    c.bce_eps = get_double(t["bce_eps"], "train.bce_eps");
    c.train_sinkhorn_iters = static_cast<int>(get_index(t["sinkhorn_iters"], "train.sinkhorn_iters"));

    const json& e = j["eval"];
    c.strategy = parse_enum(e["strategy"], "eval.strategy",
                            {Strategy::Gmw, Strategy::Uniform, Strategy::Uncertainty,
                             Strategy::InverseDenominator});
    c.eval_dataset = e["dataset"].get<std::string>();
    c.eval_checkpoint = e["checkpoint"].get<std::string>();
    c.histogram_bin_width = get_double(e["histogram_bin_width"], "eval.histogram_bin_width");
    c.histogram_bins = get_index(e["histogram_bins"], "eval.histogram_bins");
    c.percentiles.clear();
    for (const json& v : e["percentiles"]) c.percentiles.push_back(get_double(v, "eval.percentiles"));

    c.ablate_ks.clear();
    for (const json& v : j["ablate"]["ks"]) {
      if (v.is_string()) {
        if (v.get<std::string>() != "all") {
          throw Error(ErrorKind::ParseError, "ablate.ks entries are integers or \"all\"");
        }
        c.ablate_ks.push_back(0);
      } else {
        c.ablate_ks.push_back(get_index(v, "ablate.ks"));
      }
    }

    const json& d = j["denom_hist"];
    c.denom_bins = get_index(d["bins"], "denom_hist.bins");
    c.denom_binning = parse_enum(d["binning"], "denom_hist.binning",
                                 {Binning::Quantile, Binning::Linear, Binning::Log});
    c.good_threshold = get_double(d["good_threshold"], "denom_hist.good_threshold");
    c.denom_apply_mask = d["apply_mask"].get<bool>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, std::string("config: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::ParseError) throw;
    throw Error(ErrorKind::ParseError, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open config '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  json j;
  try {
    j = json::parse(buf.str());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j);
}

void apply_seed_override(RunConfig& cfg) {
  const char* raw = std::getenv(kSeedEnvVar);
  if (raw == nullptr || *raw == '\0') return;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(raw, &end, 10);
  if (errno != 0 || *end != '\0' || raw[0] == '-') {
    throw Error(ErrorKind::ParseError, std::string(kSeedEnvVar) + " must be an unsigned integer");
  }
  cfg.seed = v;
}

}  // namespace edgedepth
