#include "edgedepth/dataset_io.hpp"

#include <fstream>
#include <string>

namespace edgedepth {

using nlohmann::json;

namespace {

json vec(const Eigen::Ref<const Eigen::VectorXd>& v) {
  json out = json::array();
  for (Index k = 0; k < v.size(); ++k) out.push_back(v[k]);
  return out;
}

template <int N>
Eigen::Matrix<double, N, 1> read_vec(const json& j, const char* field) {
  const json& a = j.at(field);
  if (!a.is_array() || a.size() != N) {
    throw Error(ErrorKind::ParseError,
                std::string("field '") + field + "' must have " + std::to_string(N) + " entries");
  }
  Eigen::Matrix<double, N, 1> out;
  for (int k = 0; k < N; ++k) out[k] = a[k].get<double>();
  return out;
}

}  // namespace

json instance_to_json(const Instance& inst) {
  json j;
  j["schema"] = "edgedepth.instance";
  j["version"] = kDatasetSchemaVersion;
  j["id"] = inst.id;
  j["template"] = inst.template_name;
  j["dims"] = vec(inst.dims);
  j["camera"] = {{"fx", inst.camera.fx},
                 {"fy", inst.camera.fy},
                 {"cx", inst.camera.cx},
                 {"cy", inst.camera.cy}};
  j["pose"] = {{"yaw", inst.pose.yaw()}, {"t", vec(inst.pose.translation())}};
  json kps = json::array();
  for (std::size_t k = 0; k < inst.keypoints.size(); ++k) {
    json kp;
    kp["index"] = inst.keypoints[k].index;
    kp["object"] = vec(inst.keypoints[k].position);
    kp["pixel"] = vec(inst.pixels[k].uv);
    if (!inst.keypoints_clean.empty()) kp["object_clean"] = vec(inst.keypoints_clean[k].position);
    if (!inst.pixels_clean.empty()) kp["pixel_clean"] = vec(inst.pixels_clean[k].uv);
    kps.push_back(std::move(kp));
  }
  j["keypoints"] = std::move(kps);
  return j;
}

Instance instance_from_json(const json& j) {
  try {
    if (j.at("schema").get<std::string>() != "edgedepth.instance") {
      throw Error(ErrorKind::ParseError, "not an edgedepth.instance record");
    }
    const int version = j.at("version").get<int>();
    if (version != kDatasetSchemaVersion) {
      throw Error(ErrorKind::ParseError, "unsupported dataset version " + std::to_string(version));
    }
    Instance inst;
    inst.id = j.at("id").get<std::uint64_t>();
    inst.template_name = j.at("template").get<std::string>();
    inst.dims = read_vec<3>(j, "dims");
    const json& cam = j.at("camera");
    inst.camera = Camerad(cam.at("fx").get<double>(), cam.at("fy").get<double>(),
                          cam.at("cx").get<double>(), cam.at("cy").get<double>());
    const json& pose = j.at("pose");
    inst.pose = Posed(pose.at("yaw").get<double>(), read_vec<3>(pose, "t"));
    for (const json& kp : j.at("keypoints")) {
      const int index = kp.at("index").get<int>();
      inst.keypoints.push_back({read_vec<3>(kp, "object"), index});
      inst.pixels.push_back({read_vec<2>(kp, "pixel")});
      if (kp.contains("object_clean")) {
        inst.keypoints_clean.push_back({read_vec<3>(kp, "object_clean"), index});
      }
      if (kp.contains("pixel_clean")) inst.pixels_clean.push_back({read_vec<2>(kp, "pixel_clean")});
    }
    inst.validate();
    return inst;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::ParseError, e.what());
  }
}

void write_dataset(const std::filesystem::path& path, std::span<const Instance> instances) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot open '" + path.string() + "' for writing");
  for (const auto& inst : instances) out << instance_to_json(inst).dump() << '\n';
  out.flush();
  if (!out) throw Error(ErrorKind::IoError, "failed writing '" + path.string() + "'");
}

std::vector<Instance> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open '" + path.string() + "' for reading");
  std::vector<Instance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(instance_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::ParseError,
                  path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorKind::ParseError,
                  path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace edgedepth
