#pragma once

// On-disk conventions.  A serialized object is a directory holding a
// meta.json (shapes, dtypes, timing metadata) plus one raw little-endian
// .bin per tensor.  Data tensors are stored as float32; model checkpoints
// keep float64 so that a save/load round trip does not perturb training.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "densecine/tensor.hpp"

namespace densecine::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw std::runtime_error("cannot create directory " + p.string() + ": " + ec.message());
}

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + p.string());
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!f) throw std::runtime_error("write failed: " + p.string());
}

inline std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + p.string());
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

inline void save_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

inline json load_json(const fs::path& p) {
  json j;
  try {
    j = json::parse(read_text(p));
  } catch (const json::parse_error& e) {
    throw std::runtime_error("malformed JSON in " + p.string() + ": " + e.what());
  }
  return j;
}

// ---- raw tensor payloads ------------------------------------------------

template <typename Scalar>
void write_bin(const fs::path& p, const Tensor& t) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + p.string());
  std::vector<Scalar> buf(t.v.size());
  for (size_t i = 0; i < t.v.size(); ++i) buf[i] = static_cast<Scalar>(t.v[i]);
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(Scalar)));
  if (!f) throw std::runtime_error("write failed: " + p.string());
}

template <typename Scalar>
Tensor read_bin(const fs::path& p, const std::vector<int>& shape) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + p.string());
  Tensor t(shape);
  std::vector<Scalar> buf(t.v.size());
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size() * sizeof(Scalar)));
  if (f.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(Scalar)))
    throw std::runtime_error("short read (file smaller than declared shape): " + p.string());
  char extra;
  if (f.read(&extra, 1))
    throw std::runtime_error("trailing bytes (file larger than declared shape): " + p.string());
  for (size_t i = 0; i < t.v.size(); ++i) t.v[i] = static_cast<double>(buf[i]);
  return t;
}

inline void write_f32(const fs::path& p, const Tensor& t) { write_bin<float>(p, t); }
inline Tensor read_f32(const fs::path& p, const std::vector<int>& shape) {
  return read_bin<float>(p, shape);
}
inline void write_f64(const fs::path& p, const Tensor& t) { write_bin<double>(p, t); }
inline Tensor read_f64(const fs::path& p, const std::vector<int>& shape) {
  return read_bin<double>(p, shape);
}

inline json shape_json(const Tensor& t) { return json(t.shape); }

inline std::vector<int> shape_from_json(const json& j) {
  if (!j.is_array()) throw std::runtime_error("meta.json: shape entry must be an array");
  std::vector<int> s;
  for (const auto& e : j) s.push_back(e.get<int>());
  return s;
}

// Tensor entry inside a meta.json: {"file": "x.bin", "shape": [...], "dtype": "float32"}
inline void save_tensor_entry(json& meta, const fs::path& dir, const std::string& key,
                              const Tensor& t, bool f64 = false) {
  const std::string file = key + ".bin";
  if (f64)
    write_f64(dir / file, t);
  else
    write_f32(dir / file, t);
  meta["tensors"][key] = {{"file", file}, {"shape", t.shape}, {"dtype", f64 ? "float64" : "float32"}};
}

inline Tensor load_tensor_entry(const json& meta, const fs::path& dir, const std::string& key) {
  if (!meta.contains("tensors") || !meta["tensors"].contains(key))
    throw std::runtime_error("meta.json in " + dir.string() + " has no tensor entry '" + key + "'");
  const auto& e = meta["tensors"][key];
  const auto shape = shape_from_json(e.at("shape"));
  const std::string dtype = e.at("dtype").get<std::string>();
  const fs::path file = dir / e.at("file").get<std::string>();
  if (dtype == "float32") return read_f32(file, shape);
  if (dtype == "float64") return read_f64(file, shape);
  throw std::runtime_error("unsupported dtype '" + dtype + "' in " + dir.string());
}

// ---- CSV ----------------------------------------------------------------

class CsvWriter {
 public:
  CsvWriter(const fs::path& p, const std::vector<std::string>& columns) : f_(p) {
    if (!f_) throw std::runtime_error("cannot open for write: " + p.string());
    for (size_t i = 0; i < columns.size(); ++i) f_ << (i ? "," : "") << columns[i];
    f_ << "\n";
    ncol_ = columns.size();
  }

  void row(const std::vector<double>& vals) {
    if (vals.size() != ncol_) throw std::invalid_argument("CsvWriter: column count mismatch");
    f_.precision(17);
    for (size_t i = 0; i < vals.size(); ++i) f_ << (i ? "," : "") << vals[i];
    f_ << "\n";
    f_.flush();
  }

 private:
  std::ofstream f_;
  size_t ncol_ = 0;
};

}  // namespace densecine::io
