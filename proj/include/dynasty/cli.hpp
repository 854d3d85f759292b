#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

namespace dynasty {

// Exit codes: 0 success, 1 usage error, 2 data/contract error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// SHA-1 of "blob <size>\0<content>", as git hashes file contents.
std::string git_blob_sha1(const std::string& content);
// Files hash as blobs. Directories hash the sorted "<relative path> <blob sha>\n"
// listing of every file below them, wrapped the same way as "tree <size>\0".
std::string content_hash(const std::filesystem::path& path);

struct RunManifest {
  std::string command;
  std::vector<std::string> arguments;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::filesystem::path> inputs;
  std::vector<std::string> outputs;  // relative to the output directory
  std::uint64_t seed = 0;
  std::string started_at;
  std::string finished_at;
  double wall_seconds = 0.0;
};

// Writes <out>/manifest.json with per-input hashes and their combined hash.
void write_run_manifest(const RunManifest& manifest, const std::filesystem::path& out);

}  // namespace dynasty
