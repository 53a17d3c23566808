#pragma once

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3l/config.hpp"
#include "m3l/model.hpp"
#include "m3l/nn/adam.hpp"

namespace m3l::train {

namespace fs = std::filesystem;

inline constexpr char kCheckpointMagic[8] = {'M', '3', 'L', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// One saved tensor: name, dtype tag, shape and row-major values.
struct TensorRecord {
  std::string name;
  std::string dtype = "f32";
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<float> values;
};

struct Checkpoint {
  RunConfig config;
  std::int64_t env_steps = 0;
  std::int64_t cycle = 0;
  std::vector<TensorRecord> parameters;
  std::vector<TensorRecord> adam_m;
  std::vector<TensorRecord> adam_v;
  std::int64_t adam_steps = 0;
  nlohmann::json rng_state = nlohmann::json::object();
};

namespace detail {

inline void write_u32(std::ostream& o, std::uint32_t v) { o.write(reinterpret_cast<const char*>(&v), sizeof v); }
inline void write_i64(std::ostream& o, std::int64_t v) { o.write(reinterpret_cast<const char*>(&v), sizeof v); }
inline void write_str(std::ostream& o, const std::string& s) {
  write_u32(o, static_cast<std::uint32_t>(s.size()));
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t read_u32(std::istream& i) {
  std::uint32_t v = 0;
  if (!i.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("checkpoint truncated");
  return v;
}
inline std::int64_t read_i64(std::istream& i) {
  std::int64_t v = 0;
  if (!i.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("checkpoint truncated");
  return v;
}
inline std::string read_str(std::istream& i) {
  std::string s(read_u32(i), '\0');
  if (!i.read(s.data(), static_cast<std::streamsize>(s.size()))) throw std::runtime_error("checkpoint truncated");
  return s;
}

inline void write_tensors(std::ostream& o, const std::vector<TensorRecord>& ts) {
  write_u32(o, static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    write_str(o, t.name);
    write_str(o, t.dtype);
    write_i64(o, t.rows);
    write_i64(o, t.cols);
    o.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(float)));
  }
}

inline std::vector<TensorRecord> read_tensors(std::istream& i) {
  std::vector<TensorRecord> ts(read_u32(i));
  for (auto& t : ts) {
    t.name = read_str(i);
    t.dtype = read_str(i);
    if (t.dtype != "f32") throw std::runtime_error("checkpoint tensor " + t.name + " has unsupported dtype " + t.dtype);
    t.rows = read_i64(i);
    t.cols = read_i64(i);
    if (t.rows < 0 || t.cols < 0 || t.rows * t.cols > (std::int64_t{1} << 32)) throw std::runtime_error("checkpoint tensor " + t.name + " has a bad shape");
    t.values.resize(static_cast<std::size_t>(t.rows * t.cols));
    if (!i.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(float)))) {
      throw std::runtime_error("checkpoint truncated in tensor " + t.name);
    }
  }
  return ts;
}

}  // namespace detail

inline TensorRecord to_record(const std::string& name, const nn::Matrix<float>& m) {
  TensorRecord t{name, "f32", m.rows(), m.cols(), {}};
  t.values.assign(m.data(), m.data() + m.size());
  return t;
}

inline std::vector<TensorRecord> parameter_records(const nn::ParameterList<float>& params) {
  std::vector<TensorRecord> out;
  for (const auto& p : params) out.push_back(to_record(p.name, p.param->value));
  return out;
}

/// Copies named tensors into a parameter list; names, order and shapes must match.
inline void load_records(const std::vector<TensorRecord>& records, const nn::ParameterList<float>& params) {
  if (records.size() != params.size()) {
    throw std::runtime_error("checkpoint holds " + std::to_string(records.size()) + " tensors, model has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& r = records[i];
    auto& v = params[i].param->value;
    if (r.name != params[i].name || r.rows != v.rows() || r.cols != v.cols()) {
      throw std::runtime_error("checkpoint tensor " + r.name + " (" + std::to_string(r.rows) + "x" + std::to_string(r.cols) +
                               ") does not match model parameter " + params[i].name);
    }
    std::copy(r.values.begin(), r.values.end(), v.data());
  }
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream o(tmp, std::ios::binary | std::ios::trunc);
    if (!o) throw std::runtime_error("cannot write checkpoint " + tmp);
    o.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::write_u32(o, kCheckpointVersion);
    detail::write_str(o, to_json(c.config).dump());
    detail::write_i64(o, c.env_steps);
    detail::write_i64(o, c.cycle);
    detail::write_tensors(o, c.parameters);
    detail::write_i64(o, c.adam_steps);
    detail::write_tensors(o, c.adam_m);
    detail::write_tensors(o, c.adam_v);
    detail::write_str(o, c.rng_state.dump());
    o.flush();
    if (!o) throw std::runtime_error("write failed for checkpoint " + tmp);
  }
  fs::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream i(path, std::ios::binary);
  if (!i) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[sizeof kCheckpointMagic];
  if (!i.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw std::runtime_error(path + " is not a checkpoint file");
  }
  const std::uint32_t version = detail::read_u32(i);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint " + path + " has format version " + std::to_string(version) + ", this build reads version " +
                             std::to_string(kCheckpointVersion));
  }
  Checkpoint c;
  c.config = config_from_json(nlohmann::json::parse(detail::read_str(i)));
  c.env_steps = detail::read_i64(i);
  c.cycle = detail::read_i64(i);
  c.parameters = detail::read_tensors(i);
  c.adam_steps = detail::read_i64(i);
  c.adam_m = detail::read_tensors(i);
  c.adam_v = detail::read_tensors(i);
  c.rng_state = nlohmann::json::parse(detail::read_str(i));
  return c;
}

inline std::string checkpoint_name(std::int64_t env_steps) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "ckpt_%012lld.bin", static_cast<long long>(env_steps));
  return buf;
}

/// Checkpoint files of a run directory, oldest first.
inline std::vector<std::string> list_checkpoints(const std::string& run_dir) {
  std::vector<std::string> out;
  const fs::path dir = fs::path(run_dir) / "checkpoints";
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.rfind("ckpt_", 0) == 0 && e.path().extension() == ".bin") out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Builds a float model from a checkpoint's config and tensors.
inline Model<float> model_from_checkpoint(const Checkpoint& c) {
  Model<float> model(c.config.model);
  load_records(c.parameters, model.parameters());
  return model;
}

}  // namespace m3l::train
