#include "edgedepth/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace edgedepth {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void Checkpoint::put(const std::string& name, const Eigen::Ref<const nn::Matrix>& value) {
  Tensor t{name, value.rows(), value.cols(), {}};
  t.data.resize(static_cast<std::size_t>(value.size()));
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      t.data.data(), value.rows(), value.cols()) = value;
  auto it = std::find_if(tensors.begin(), tensors.end(),
                         [&](const Tensor& x) { return x.name == name; });
  if (it != tensors.end()) {
    *it = std::move(t);
  } else {
    tensors.push_back(std::move(t));
  }
}

const Tensor* Checkpoint::find(const std::string& name) const {
  auto it = std::find_if(tensors.begin(), tensors.end(),
                         [&](const Tensor& x) { return x.name == name; });
  return it == tensors.end() ? nullptr : &*it;
}

nn::Matrix Checkpoint::get(const std::string& name, Index rows, Index cols) const {
  const Tensor* t = find(name);
  if (t == nullptr) throw Error(ErrorKind::IncompatibleCheckpoint, "missing tensor '" + name + "'");
  if (t->rows != rows || t->cols != cols) {
    throw Error(ErrorKind::IncompatibleCheckpoint,
                "tensor '" + name + "' has shape " + std::to_string(t->rows) + "x" +
                    std::to_string(t->cols) + ", expected " + std::to_string(rows) + "x" +
                    std::to_string(cols));
  }
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      t->data.data(), rows, cols);
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    index.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", offset}});
    offset += t.data.size() * sizeof(double);
  }
  const json header = {{"format", "edgedepth.checkpoint"},
                       {"version", kCheckpointVersion},
                       {"meta", ckpt.meta},
                       {"tensors", std::move(index)}};
  const std::string text = header.dump();
  const std::uint64_t length = text.size();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot open '" + path.string() + "' for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  out.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : ckpt.tensors) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  out.flush();
  if (!out) throw Error(ErrorKind::IoError, "failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open '" + path.string() + "' for reading");
  const auto corrupt = [&](const std::string& why) {
    return Error(ErrorKind::IncompatibleCheckpoint, path.string() + ": " + why);
  };

  char magic[sizeof(kCheckpointMagic)];
  std::uint64_t length = 0;
  if (!in.read(magic, sizeof(magic)) ||
      std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw corrupt("not an edgedepth checkpoint");
  }
  if (!in.read(reinterpret_cast<char*>(&length), sizeof(length)) || length > (1u << 30)) {
    throw corrupt("bad header length");
  }
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw corrupt("truncated header");

  Checkpoint ckpt;
  try {
    const json header = json::parse(text);
    if (header.at("format").get<std::string>() != "edgedepth.checkpoint") {
      throw corrupt("unknown format tag");
    }
    if (header.at("version").get<int>() != kCheckpointVersion) {
      throw corrupt("unsupported version " + header.at("version").dump());
    }
    ckpt.meta = header.at("meta");
    std::uint64_t expected = 0;
    for (const json& entry : header.at("tensors")) {
      Tensor t;
      t.name = entry.at("name").get<std::string>();
      t.rows = entry.at("shape").at(0).get<Index>();
      t.cols = entry.at("shape").at(1).get<Index>();
      if (t.rows < 0 || t.cols < 0 || entry.at("offset").get<std::uint64_t>() != expected) {
        throw corrupt("bad tensor index entry '" + t.name + "'");
      }
      t.data.resize(static_cast<std::size_t>(t.rows * t.cols));
      const auto bytes = static_cast<std::streamsize>(t.data.size() * sizeof(double));
      if (!in.read(reinterpret_cast<char*>(t.data.data()), bytes)) {
        throw corrupt("truncated tensor '" + t.name + "'");
      }
      expected += static_cast<std::uint64_t>(bytes);
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw corrupt(e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw corrupt("trailing bytes");
  return ckpt;
}

void put_params(Checkpoint& ckpt, const nn::ParamStore& params) {
  for (const auto& [name, p] : params.entries()) {
    ckpt.put(name, p->value);
    ckpt.put(name + ".adam_m", p->m);
    ckpt.put(name + ".adam_v", p->v);
  }
}

void get_params(const Checkpoint& ckpt, const nn::ParamStore& params) {
  for (const auto& [name, p] : params.entries()) {
    const Index r = p->value.rows();
    const Index c = p->value.cols();
    p->value = ckpt.get(name, r, c);
    p->m = ckpt.get(name + ".adam_m", r, c);
    p->v = ckpt.get(name + ".adam_v", r, c);
    p->grad.setZero(r, c);
  }
}

void put_running_stats(Checkpoint& ckpt, const nn::Encoder& enc, const std::string& prefix) {
  for (std::size_t k = 0; k < enc.blocks().size(); ++k) {
    const auto& b = enc.blocks()[k];
    const std::string base = prefix + ".block" + std::to_string(k);
    ckpt.put(base + ".running_mean", b.running_mean);
    ckpt.put(base + ".running_var", b.running_var);
  }
}

void get_running_stats(const Checkpoint& ckpt, nn::Encoder& enc, const std::string& prefix) {
  for (std::size_t k = 0; k < enc.blocks().size(); ++k) {
    auto& b = enc.blocks()[k];
    const std::string base = prefix + ".block" + std::to_string(k);
    b.running_mean = ckpt.get(base + ".running_mean", 1, b.out_dim());
    b.running_var = ckpt.get(base + ".running_var", 1, b.out_dim());
  }
}

}  // namespace edgedepth
