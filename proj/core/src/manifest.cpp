#include "moetune/manifest.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace moetune {

using nlohmann::json;

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fnv1a64_file_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("fnv1a64_file_hex: cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(os.str());
  return hex.str();
}

std::string iso8601_utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_manifest(const std::string& path, const RunManifest& m) {
  json doc = {{"command", m.command},
              {"resolved_config", m.resolved_config},
              {"seed", m.seed},
              {"input_paths", m.input_paths},
              {"output_paths", m.output_paths},
              {"input_hashes", m.input_hashes},
              {"started_at", m.started_at},
              {"finished_at", m.finished_at}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_manifest: cannot open " + path);
  out << doc.dump(2) << "\n";
}

RunManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_manifest: cannot open " + path);
  json doc = json::parse(in);
  RunManifest m;
  m.command = doc.at("command");
  m.resolved_config = doc.at("resolved_config").get<std::map<std::string, std::string>>();
  m.seed = doc.at("seed");
  m.input_paths = doc.at("input_paths").get<std::vector<std::string>>();
  m.output_paths = doc.at("output_paths").get<std::vector<std::string>>();
  m.input_hashes = doc.at("input_hashes").get<std::map<std::string, std::string>>();
  m.started_at = doc.at("started_at");
  m.finished_at = doc.at("finished_at");
  return m;
}

std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_config_file: cannot open " + path);
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("read_config_file: expected key=value at " + path + ":" +
                               std::to_string(lineno));
    }
    auto strip = [](std::string s) {
      const auto sb = s.find_first_not_of(" \t");
      if (sb == std::string::npos) return std::string();
      const auto se = s.find_last_not_of(" \t");
      return s.substr(sb, se - sb + 1);
    };
    const std::string key = strip(line.substr(0, eq));
    if (key.empty()) {
      throw std::runtime_error("read_config_file: empty key at " + path + ":" +
                               std::to_string(lineno));
    }
    out[key] = strip(line.substr(eq + 1));
  }
  return out;
}

}  // namespace moetune
