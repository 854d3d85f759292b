#include "dynasty/bundle.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dynasty/error.hpp"

namespace dynasty {

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr const char* kBlob = "data.bin";

void put_le(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>(bits & 0xffu));
    bits >>= 8;
  }
}

double get_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

}  // namespace

const NdArray& Bundle::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.array;
  }
  throw DataError("bundle has no tensor named '" + name + "'");
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_bundle(const std::filesystem::path& dir, const std::string& format, const Bundle& bundle) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = format;
  manifest["version"] = 1;
  manifest["metadata"] = bundle.metadata;
  manifest["blob"] = kBlob;
  auto& index = manifest["tensors"];
  index = nlohmann::json::array();
  std::string blob;
  for (const auto& t : bundle.tensors) {
    index.push_back({{"name", t.name},
                     {"shape", t.array.shape},
                     {"dtype", "float64-le"},
                     {"offset", blob.size()},
                     {"bytes", t.array.values.size() * 8}});
    for (double v : t.array.values) put_le(blob, v);
  }
  manifest["blob_bytes"] = blob.size();
  write_text_file(dir / kBlob, blob);
  write_text_file(dir / kManifest, manifest.dump(2) + "\n");
}

Bundle read_bundle(const std::filesystem::path& dir, const std::string& format) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a bundle directory: " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_text_file(dir / kManifest));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  if (manifest.value("format", std::string()) != format) {
    throw DataError(dir.string() + " holds '" + manifest.value("format", std::string("?")) + "', expected '" +
                    format + "'");
  }
  const std::string blob = read_text_file(dir / manifest.value("blob", std::string(kBlob)));
  Bundle bundle;
  bundle.metadata = manifest.value("metadata", nlohmann::json::object());
  try {
    for (const auto& entry : manifest.at("tensors")) {
      BundleEntry t;
      t.name = entry.at("name").get<std::string>();
      Shape shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const std::size_t n = shape_numel(shape);
      if (offset + n * 8 > blob.size()) throw DataError("tensor '" + t.name + "' runs past the end of the blob");
      std::vector<double> values(n);
      const auto* base = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
      for (std::size_t i = 0; i < n; ++i) values[i] = get_le(base + 8 * i);
      t.array = NdArray(std::move(shape), std::move(values));
      bundle.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed tensor index in " + dir.string() + ": " + e.what());
  }
  return bundle;
}

}  // namespace dynasty
