#include "promptroute/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "promptroute/error.hpp"

namespace promptroute {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kFormat = "promptroute-tensors";

void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little)
    throw Error(ErrorCode::kIo, "tensor files require a little-endian host");
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::kIo, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kMissingArtifact, "cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t hash) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= p[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::string hex64(std::uint64_t value) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << value;
  return s.str();
}

fs::path manifest_path(const fs::path& stem) { return fs::path(stem.string() + ".json"); }
fs::path data_path(const fs::path& stem) { return fs::path(stem.string() + ".bin"); }

bool tensor_file_exists(const fs::path& stem) {
  return fs::exists(manifest_path(stem)) && fs::exists(data_path(stem));
}

const ad::Matrix& TensorFile::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end())
    throw Error(ErrorCode::kMissingArtifact, "tensor '" + name + "' not in checkpoint");
  return it->second;
}

void TensorFile::load_into(ad::Tensor& tensor) const {
  const ad::Matrix& m = at(tensor.name);
  if (m.rows() != tensor.value.rows() || m.cols() != tensor.value.cols())
    throw Error(ErrorCode::kShapeMismatch, "tensor '" + tensor.name + "' has shape [" +
                                               std::to_string(m.rows()) + ", " +
                                               std::to_string(m.cols()) + "] in checkpoint");
  tensor.value = m;
}

void save_tensors(const fs::path& stem, std::span<const ad::Tensor* const> tensors,
                  const json& meta) {
  require_little_endian();
  std::string bytes;
  json entries = json::array();
  for (const ad::Tensor* t : tensors) {
    const std::size_t nbytes = static_cast<std::size_t>(t->value.size()) * sizeof(double);
    entries.push_back({{"name", t->name},
                       {"shape", {t->value.rows(), t->value.cols()}},
                       {"offset", bytes.size()},
                       {"nbytes", nbytes}});
    bytes.append(reinterpret_cast<const char*>(t->value.data()), nbytes);
  }
  json manifest = {{"format", kFormat},
                   {"version", 1},
                   {"dtype", "float64"},
                   {"endianness", "little"},
                   {"data_file", data_path(stem).filename().string()},
                   {"fnv1a64", hex64(fnv1a64(bytes.data(), bytes.size()))},
                   {"tensors", entries},
                   {"meta", meta}};
  write_file(data_path(stem), bytes);
  write_file(manifest_path(stem), manifest.dump(2) + "\n");
}

TensorFile load_tensors(const fs::path& stem) {
  require_little_endian();
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path(stem)));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, manifest_path(stem).string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kFormat || manifest.value("dtype", "") != "float64" ||
      manifest.value("endianness", "") != "little")
    throw Error(ErrorCode::kParse, manifest_path(stem).string() + ": unsupported tensor file");
  const std::string bytes = read_file(data_path(stem));
  if (hex64(fnv1a64(bytes.data(), bytes.size())) != manifest.value("fnv1a64", ""))
    throw Error(ErrorCode::kIo, data_path(stem).string() + ": content hash mismatch");

  TensorFile file;
  file.meta = manifest.value("meta", json::object());
  for (const auto& e : manifest.at("tensors")) {
    const std::string name = e.at("name");
    const auto rows = e.at("shape").at(0).get<ad::Index>();
    const auto cols = e.at("shape").at(1).get<ad::Index>();
    const auto offset = e.at("offset").get<std::size_t>();
    const auto nbytes = e.at("nbytes").get<std::size_t>();
    if (nbytes != static_cast<std::size_t>(rows * cols) * sizeof(double) ||
        offset + nbytes > bytes.size())
      throw Error(ErrorCode::kParse, "tensor '" + name + "' is out of bounds");
    ad::Matrix m(rows, cols);
    if (nbytes > 0) std::memcpy(m.data(), bytes.data() + offset, nbytes);
    file.tensors.emplace(name, std::move(m));
    file.order.push_back(name);
  }
  return file;
}

}  // namespace promptroute
