#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dynasty/tensor.hpp"
#include "json.hpp"

namespace dynasty {

struct BundleEntry {
  std::string name;
  NdArray array;
};

// On-disk tensor bundle: a directory holding manifest.json (metadata plus
// name/shape/byte offset per tensor) and data.bin (the tensors' values as
// little-endian float64, row-major, concatenated in manifest order).
struct Bundle {
  nlohmann::json metadata;
  std::vector<BundleEntry> tensors;

  // Throws DataError if no tensor carries the name.
  const NdArray& get(const std::string& name) const;
};

void write_bundle(const std::filesystem::path& dir, const std::string& format, const Bundle& bundle);
// format must match the manifest's; throws DataError on mismatch or I/O failure.
Bundle read_bundle(const std::filesystem::path& dir, const std::string& format);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace dynasty
