#include "mdsp/serialize.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mdsp {

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

void save_tensors(const std::string& path, const std::string& meta_json,
                  const NamedTensors& tensors) {
  MDSP_CHECK(meta_json.find('\n') == std::string::npos, "save_tensors: meta must be a single line");
  std::ofstream f(path, std::ios::binary);
  MDSP_CHECK(f.good(), "save_tensors: cannot open '" << path << "' for writing");
  f << "MDSPTENSORS v1\n";
  if (!meta_json.empty()) f << "meta " << meta_json << "\n";
  f << "tensors " << tensors.size() << "\n";
  for (const auto& [name, t] : tensors) {
    MDSP_CHECK(!name.empty() && name.find_first_of(" \n") == std::string::npos,
               "save_tensors: invalid tensor name '" << name << "'");
    f << name << " f32 " << t.shape().size();
    for (int e : t.shape()) f << " " << e;
    f << "\n";
  }
  f << "data\n";
  for (const auto& [name, t] : tensors) {
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  MDSP_CHECK(f.good(), "save_tensors: write to '" << path << "' failed");
}

LoadedTensors load_tensors(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  MDSP_CHECK(f.good(), "load_tensors: cannot open '" << path << "'");
  std::string line;
  MDSP_CHECK(std::getline(f, line) && line == "MDSPTENSORS v1",
             "load_tensors: '" << path << "' is not a tensor container (bad magic)");
  LoadedTensors out;
  MDSP_CHECK(std::getline(f, line), "load_tensors: truncated header in '" << path << "'");
  if (line.rfind("meta ", 0) == 0) {
    out.meta_json = line.substr(5);
    MDSP_CHECK(std::getline(f, line), "load_tensors: truncated header in '" << path << "'");
  }
  std::size_t count = 0;
  {
    std::istringstream ss(line);
    std::string kw;
    ss >> kw >> count;
    MDSP_CHECK(kw == "tensors" && !ss.fail(), "load_tensors: expected 'tensors <count>', got '"
                                                  << line << "'");
  }
  struct Entry {
    std::string name;
    Shape shape;
  };
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    MDSP_CHECK(std::getline(f, line), "load_tensors: truncated header in '" << path << "'");
    std::istringstream ss(line);
    Entry e;
    std::string dtype;
    int ndim = 0;
    ss >> e.name >> dtype >> ndim;
    MDSP_CHECK(!ss.fail() && dtype == "f32" && ndim >= 0,
               "load_tensors: bad entry line '" << line << "'");
    e.shape.resize(static_cast<size_t>(ndim));
    for (int d = 0; d < ndim; ++d) {
      ss >> e.shape[static_cast<size_t>(d)];
      MDSP_CHECK(!ss.fail() && e.shape[static_cast<size_t>(d)] >= 0,
                 "load_tensors: bad extent in '" << line << "'");
    }
    entries.push_back(std::move(e));
  }
  MDSP_CHECK(std::getline(f, line) && line == "data",
             "load_tensors: expected 'data' separator in '" << path << "'");
  for (auto& e : entries) {
    const std::int64_t n = shape_numel(e.shape);
    std::vector<float> values(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(float)));
    MDSP_CHECK(f.gcount() == static_cast<std::streamsize>(n * sizeof(float)),
               "load_tensors: truncated data for tensor '" << e.name << "'");
    out.tensors.emplace_back(e.name, Tensor<float>::from_vector(e.shape, std::move(values)));
  }
  return out;
}

}  // namespace mdsp
