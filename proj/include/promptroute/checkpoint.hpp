#pragma once

// Named-tensor container: <stem>.json manifest plus <stem>.bin with the raw
// float64 little-endian values laid out back to back.
//
// Manifest:
//   {"format": "promptroute-tensors", "version": 1, "dtype": "float64",
//    "endianness": "little", "data_file": "<stem>.bin", "fnv1a64": "<hex>",
//    "tensors": [{"name", "shape": [rows, cols], "offset", "nbytes"}, ...],
//    "meta": {...}}

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "promptroute/autodiff.hpp"

namespace promptroute {

struct TensorFile {
  std::map<std::string, ad::Matrix> tensors;
  std::vector<std::string> order;
  nlohmann::json meta;

  // Throws kMissingArtifact if absent, kShapeMismatch on a shape disagreement.
  const ad::Matrix& at(const std::string& name) const;
  void load_into(ad::Tensor& tensor) const;
};

std::filesystem::path manifest_path(const std::filesystem::path& stem);
std::filesystem::path data_path(const std::filesystem::path& stem);
bool tensor_file_exists(const std::filesystem::path& stem);

void save_tensors(const std::filesystem::path& stem, std::span<const ad::Tensor* const> tensors,
                  const nlohmann::json& meta);
TensorFile load_tensors(const std::filesystem::path& stem);

std::uint64_t fnv1a64(const void* data, std::size_t size,
                      std::uint64_t hash = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

}  // namespace promptroute
