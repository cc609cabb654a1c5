#pragma once

// Flat named-tensor container: a text header listing name/dtype/shape per
// entry, then the raw little-endian float arrays back to back.
//
//   MDSPTENSORS v1
//   meta <single-line JSON, optional>
//   tensors <count>
//   <name> f32 <ndim> <extent...>
//   ...
//   data
//   <raw bytes>

#include <string>
#include <utility>
#include <vector>

#include "mdsp/tensor.hpp"

namespace mdsp {

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

void save_tensors(const std::string& path, const std::string& meta_json,
                  const NamedTensors& tensors);

struct LoadedTensors {
  std::string meta_json;
  NamedTensors tensors;
};

LoadedTensors load_tensors(const std::string& path);

}  // namespace mdsp
