#include "space/tensor_io.hpp"

#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

namespace space {

namespace {

using nlohmann::json;

void write_raw(const std::filesystem::path& path, const json& header, const float* data,
               size_t count) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot open " + path.string() + " for writing");
  const std::string line = header.dump() + "\n";
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 4));
  require(out.good(), "write failed: " + path.string());
}

}  // namespace

void write_tensor(const std::filesystem::path& path, const Matf& m, const std::string& name) {
  json header;
  header["shape"] = {m.rows(), m.cols()};
  header["name"] = name;
  write_raw(path, header, m.data(), static_cast<size_t>(m.size()));
}

void write_tensor(const std::filesystem::path& path, const Vecf& v, const std::string& name) {
  json header;
  header["shape"] = {v.size()};
  header["name"] = name;
  write_raw(path, header, v.data(), static_cast<size_t>(v.size()));
}

NamedTensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open tensor file " + path.string());
  std::string line;
  std::getline(in, line);
  json header = json::parse(line);
  NamedTensor t;
  t.name = header.value("name", "");
  for (const auto& d : header.at("shape")) t.shape.push_back(d.get<Eigen::Index>());
  require(!t.shape.empty() && t.shape.size() <= 2, "unsupported tensor rank in " + path.string());
  const Eigen::Index rows = t.shape[0];
  const Eigen::Index cols = t.shape.size() == 2 ? t.shape[1] : 1;
  t.data.resize(rows, cols);
  in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
  require(in.gcount() == static_cast<std::streamsize>(t.data.size() * 4),
          "truncated tensor file " + path.string());
  require(all_finite(t.data), "non-finite values in tensor file " + path.string());
  return t;
}

Matf read_tensor_matrix(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols) {
  NamedTensor t = read_tensor(path);
  require(t.data.rows() == rows && t.data.cols() == cols,
          "tensor shape mismatch in " + path.string());
  return t.data;
}

Vecf read_tensor_vector(const std::filesystem::path& path, Eigen::Index n) {
  NamedTensor t = read_tensor(path);
  require(t.data.size() == n, "tensor size mismatch in " + path.string());
  Vecf v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = t.data.data()[i];
  return v;
}

}  // namespace space
