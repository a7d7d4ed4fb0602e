#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace moetune {

/// Provenance record written next to every CLI run's outputs.
struct RunManifest {
  std::string command;
  std::map<std::string, std::string> resolved_config;
  unsigned long long seed = 0;
  std::vector<std::string> input_paths;
  std::vector<std::string> output_paths;
  std::map<std::string, std::string> input_hashes;  // path -> fnv1a64 hex
  std::string started_at;   // ISO-8601 UTC
  std::string finished_at;
};

std::uint64_t fnv1a64(const std::string& bytes);
std::string fnv1a64_file_hex(const std::string& path);
std::string iso8601_utc_now();

void write_manifest(const std::string& path, const RunManifest& m);
RunManifest read_manifest(const std::string& path);

/// key=value config file; '#' starts a comment, blank lines ignored.
std::map<std::string, std::string> read_config_file(const std::string& path);

}  // namespace moetune
