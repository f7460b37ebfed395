// SPDX-License-Identifier: Apache-2.0
#include "attrprompt/parameters.hpp"

#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace attrprompt {

namespace {

constexpr char kMagic[8] = {'A', 'P', 'A', 'R', 'R', 'A', 'Y', '1'};

std::int64_t element_count(const std::vector<std::int64_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

}  // namespace

bool has_prefix(std::string_view name, std::string_view prefix) {
  return name.substr(0, prefix.size()) == prefix;
}

Parameter& ParameterStore::add(const std::string& name, Matrix value, bool trainable) {
  auto [it, inserted] = params_.try_emplace(name);
  if (!inserted) throw std::invalid_argument("duplicate parameter '" + name + "'");
  Parameter& p = it->second;
  p.name = name;
  p.value = std::move(value);
  p.trainable = trainable;
  p.zero_grad();
  return p;
}

Parameter& ParameterStore::at(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw std::out_of_range("missing parameter '" + std::string(name) + "'");
}

const Parameter& ParameterStore::at(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw std::out_of_range("missing parameter '" + std::string(name) + "'");
}

Parameter* ParameterStore::find(std::string_view name) {
  auto it = params_.find(name);
  return it == params_.end() ? nullptr : &it->second;
}

const Parameter* ParameterStore::find(std::string_view name) const {
  auto it = params_.find(name);
  return it == params_.end() ? nullptr : &it->second;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

std::size_t ParameterStore::erase_prefix(std::string_view prefix) {
  std::size_t erased = 0;
  for (auto it = params_.begin(); it != params_.end();) {
    if (has_prefix(it->first, prefix)) {
      it = params_.erase(it);
      ++erased;
    } else {
      ++it;
    }
  }
  return erased;
}

void ParameterStore::freeze(const std::vector<std::string>& prefixes) {
  for (auto& [name, p] : params_) {
    for (const auto& prefix : prefixes) {
      if (has_prefix(name, prefix)) p.trainable = false;
    }
  }
}

void ParameterStore::zero_grad() {
  for (auto& [_, p] : params_) p.zero_grad();
}

Matrix NamedArray::as_matrix() const {
  Eigen::Index rows = 1;
  Eigen::Index cols = static_cast<Eigen::Index>(data.size());
  if (shape.size() >= 2) {
    rows = shape[0];
    cols = rows == 0 ? 0 : static_cast<Eigen::Index>(data.size()) / rows;
  }
  Matrix m(rows, cols);
  if (!data.empty()) std::memcpy(m.data(), data.data(), data.size() * sizeof(double));
  return m;
}

NamedArray NamedArray::from_matrix(const Matrix& m) {
  NamedArray a;
  a.shape = {m.rows(), m.cols()};
  a.data.assign(m.data(), m.data() + m.size());
  return a;
}

void write_array_file(const std::filesystem::path& path, const ArrayFile& file) {
  nlohmann::json manifest;
  manifest["format"] = "attrprompt-arrays";
  manifest["version"] = 1;
  manifest["metadata"] = file.metadata;
  auto& entries = manifest["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, arr] : file.arrays) {
    if (element_count(arr.shape) != static_cast<std::int64_t>(arr.data.size())) {
      throw std::invalid_argument("array '" + name + "': shape does not match data size");
    }
    const std::uint64_t nbytes = arr.data.size() * sizeof(double);
    entries.push_back({{"name", name}, {"dtype", "f64"}, {"shape", arr.shape},
                       {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  // The payload is little-endian; every supported build host is little-endian.
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, arr] : file.arrays) {
    out.write(reinterpret_cast<const char*>(arr.data.data()),
              static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

ArrayFile read_array_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error("'" + path.string() + "' is not an attrprompt array file");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated manifest in '" + path.string() + "'");
  const auto manifest = nlohmann::json::parse(text);
  const auto payload_start = in.tellg();

  ArrayFile file;
  file.metadata = manifest.value("metadata", nlohmann::json::object());
  for (const auto& entry : manifest.at("arrays")) {
    NamedArray arr;
    arr.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto count = element_count(arr.shape);
    const std::string dtype = entry.at("dtype");
    const auto offset = entry.at("offset").get<std::uint64_t>();
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    arr.data.resize(static_cast<std::size_t>(count));
    if (dtype == "f64") {
      in.read(reinterpret_cast<char*>(arr.data.data()), count * 8);
    } else if (dtype == "f32") {
      std::vector<float> buf(static_cast<std::size_t>(count));
      in.read(reinterpret_cast<char*>(buf.data()), count * 4);
      std::copy(buf.begin(), buf.end(), arr.data.begin());
    } else {
      throw std::runtime_error("array '" + entry.at("name").get<std::string>() +
                               "': unsupported dtype " + dtype);
    }
    if (!in) throw std::runtime_error("truncated payload for '" + entry.at("name").get<std::string>() + "'");
    file.arrays.emplace(entry.at("name").get<std::string>(), std::move(arr));
  }
  return file;
}

}  // namespace attrprompt
