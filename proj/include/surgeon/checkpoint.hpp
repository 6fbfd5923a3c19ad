#pragma once

// Manifest + blob tensor files.
//
//   <prefix>.json : {"blob": "<prefix>.bin", "meta": {...},
//                    "tensors": [{"name", "shape", "dtype": "f64", "offset", "length"}]}
//   <prefix>.bin  : little-endian IEEE-754 doubles, row-major, tensors back to back.
//
// offset and length are in bytes. Round trips are bit-exact.

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "surgeon/errors.hpp"
#include "surgeon/linalg.hpp"

namespace surgeon {

using Json = nlohmann::json;

struct Tensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  static Tensor from_matrix(std::string name, const Mat& m) {
    Tensor t{std::move(name), {m.rows(), m.cols()}, {}};
    t.data.resize(static_cast<std::size_t>(m.size()));
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) t.data[r * m.cols() + c] = m(r, c);
    return t;
  }

  static Tensor from_vector(std::string name, const Vec& v) {
    Tensor t{std::move(name), {v.size()}, {}};
    t.data.assign(v.data(), v.data() + v.size());
    return t;
  }

  Mat to_matrix() const {
    if (shape.size() != 2) throw IngestionError("tensor '" + name + "' is not a matrix");
    Mat m(shape[0], shape[1]);
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = data[r * m.cols() + c];
    return m;
  }

  Vec to_vector() const {
    if (shape.size() != 1) throw IngestionError("tensor '" + name + "' is not a vector");
    return Eigen::Map<const Vec>(data.data(), static_cast<Index>(data.size()));
  }
};

struct TensorFile {
  Json meta = Json::object();
  std::vector<Tensor> tensors;

  const Tensor& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw IngestionError("tensor '" + name + "' missing from checkpoint");
  }
  bool has(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }
};

namespace detail {

inline void put_le(std::string& out, double x) {
  const auto bits = std::bit_cast<std::uint64_t>(x);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

inline double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline std::filesystem::path manifest_path(const std::filesystem::path& prefix) {
  return std::filesystem::path(prefix.string() + ".json");
}
inline std::filesystem::path blob_path(const std::filesystem::path& prefix) {
  return std::filesystem::path(prefix.string() + ".bin");
}

inline void write_tensor_file(const TensorFile& file, const std::filesystem::path& prefix) {
  std::string blob;
  Json entries = Json::array();
  for (const auto& t : file.tensors) {
    std::int64_t count = 1;
    for (auto d : t.shape) count *= d;
    if (count != static_cast<std::int64_t>(t.data.size()))
      throw ConfigError("tensor '" + t.name + "' shape does not match its data");
    entries.push_back({{"name", t.name},
                       {"shape", t.shape},
                       {"dtype", "f64"},
                       {"offset", blob.size()},
                       {"length", t.data.size() * sizeof(double)}});
    for (double x : t.data) detail::put_le(blob, x);
  }
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  Json manifest{{"blob", blob_path(prefix).filename().string()},
                {"meta", file.meta},
                {"tensors", entries}};
  {
    std::ofstream out(blob_path(prefix), std::ios::binary | std::ios::trunc);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IngestionError("failed writing '" + blob_path(prefix).string() + "'");
  }
  std::ofstream out(manifest_path(prefix), std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw IngestionError("failed writing '" + manifest_path(prefix).string() + "'");
}

inline TensorFile read_tensor_file(const std::filesystem::path& prefix) {
  Json manifest;
  try {
    manifest = Json::parse(detail::read_all(manifest_path(prefix)));
  } catch (const Json::exception& e) {
    throw IngestionError("malformed manifest '" + manifest_path(prefix).string() + "': " + e.what());
  }
  const auto blob_file = manifest_path(prefix).parent_path() / manifest.at("blob").get<std::string>();
  const std::string blob = detail::read_all(blob_file);
  TensorFile file;
  file.meta = manifest.value("meta", Json::object());
  for (const auto& e : manifest.at("tensors")) {
    if (e.at("dtype") != "f64") throw IngestionError("unsupported dtype in manifest");
    Tensor t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<std::vector<std::int64_t>>();
    const auto offset = e.at("offset").get<std::size_t>();
    const auto length = e.at("length").get<std::size_t>();
    if (offset + length > blob.size() || length % sizeof(double) != 0)
      throw IngestionError("tensor '" + t.name + "' exceeds blob bounds");
    t.data.resize(length / sizeof(double));
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = detail::get_le(p + 8 * i);
    file.tensors.push_back(std::move(t));
  }
  return file;
}

}  // namespace surgeon
