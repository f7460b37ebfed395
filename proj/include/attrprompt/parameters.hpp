// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "attrprompt/autodiff.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace attrprompt {

using ad::Matrix;
using ad::Parameter;

/// Owns every named parameter of a model. Names are hierarchical
/// (`visual.transformer.resblocks.0.ln_1.weight`) and iteration is sorted.
/// References returned by `add`/`at` stay valid until the entry is erased.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Matrix value, bool trainable = true);
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }

  std::vector<std::string> names() const;
  std::size_t size() const { return params_.size(); }
  std::size_t erase_prefix(std::string_view prefix);

  /// Marks every parameter whose name starts with one of `prefixes` frozen.
  void freeze(const std::vector<std::string>& prefixes);
  void zero_grad();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Parameter, std::less<>> params_;
};

bool has_prefix(std::string_view name, std::string_view prefix);

/// One array inside a named-array file. Shape is row-major and may have any
/// rank; `data.size()` equals the product of `shape`.
struct NamedArray {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  /// Views the array as a matrix: rank 0/1 become 1xN, rank >= 2 keeps the
  /// first dimension and folds the rest into columns.
  Matrix as_matrix() const;
  static NamedArray from_matrix(const Matrix& m);
};

/// Single-file container: an 8-byte magic, a little-endian u64 manifest
/// length, a JSON manifest, then the raw array payload.
///
/// Manifest:
///   { "format": "attrprompt-arrays", "version": 1,
///     "arrays": [ {"name", "dtype": "f64"|"f32", "shape": [...],
///                  "offset": <bytes into payload>, "nbytes"} ... ],
///     "metadata": { ... free-form ... } }
///
/// Writing always emits f64. Reading accepts f64 and f32.
struct ArrayFile {
  std::map<std::string, NamedArray> arrays;
  nlohmann::json metadata = nlohmann::json::object();
};

void write_array_file(const std::filesystem::path& path, const ArrayFile& file);
ArrayFile read_array_file(const std::filesystem::path& path);

}  // namespace attrprompt
