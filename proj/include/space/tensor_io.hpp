#pragma once

#include <filesystem>
#include <string>

#include "space/common.hpp"

namespace space {

// Raw tensor file: one JSON header line {"shape":[rows,cols],"name":"..."}
// followed by the values as little-endian 32-bit floats in row-major order.
// Rank-1 tensors use shape [n].

void write_tensor(const std::filesystem::path& path, const Matf& m, const std::string& name);
void write_tensor(const std::filesystem::path& path, const Vecf& v, const std::string& name);

struct NamedTensor {
  std::string name;
  std::vector<Eigen::Index> shape;
  Matf data;  // rank-1 stored as n x 1
};

NamedTensor read_tensor(const std::filesystem::path& path);

Matf read_tensor_matrix(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols);
Vecf read_tensor_vector(const std::filesystem::path& path, Eigen::Index n);

}  // namespace space
