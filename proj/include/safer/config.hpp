#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "safer/error.hpp"

namespace safer {

inline constexpr const char* kCodeVersion = "0.3.0";

namespace config_detail {

inline std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace config_detail

// Flat key = value configuration with [section] prefixes. Keys are stored as
// "section.key" ("key" outside any section); later assignments win.
class Config {
 public:
  static Config from_string(const std::string& text, const std::string& origin = "<string>") {
    Config cfg;
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const size_t hash = line.find_first_of("#;");
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = config_detail::trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw ConfigError(origin + " line " + std::to_string(line_no) + ": unterminated section");
        section = config_detail::trim(line.substr(1, line.size() - 2));
        continue;
      }
      const size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + " line " + std::to_string(line_no) + ": expected key = value");
      const std::string key = config_detail::trim(line.substr(0, eq));
      const std::string value = config_detail::trim(line.substr(eq + 1));
      if (key.empty())
        throw ConfigError(origin + " line " + std::to_string(line_no) + ": empty key");
      cfg.values_[section.empty() ? key : section + "." + key] = value;
    }
    return cfg;
  }

  static Config from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file not found: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_string(buf.str(), path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_str(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require_str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key: " + key);
    return it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_double(key, it->second);
  }

  int get_int(const std::string& key, int fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_int(key, it->second);
  }

  uint64_t get_u64(const std::string& key, uint64_t fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      size_t used = 0;
      const uint64_t v = std::stoull(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": not an unsigned integer: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key " + key + ": not a boolean: " + v);
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static double parse_double(const std::string& key, const std::string& v) {
    try {
      size_t used = 0;
      const double x = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument("");
      return x;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": not a number: " + v);
    }
  }

  static int parse_int(const std::string& key, const std::string& v) {
    try {
      size_t used = 0;
      const long x = std::stol(v, &used);
      if (used != v.size()) throw std::invalid_argument("");
      return static_cast<int>(x);
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": not an integer: " + v);
    }
  }

  std::map<std::string, std::string> values_;
};

// Seed precedence: config value < SAFER_SEED environment variable < explicit
// command-line seed.
inline uint64_t resolve_seed(const Config& cfg, std::optional<uint64_t> cli_seed) {
  uint64_t seed = cfg.get_u64("seed", 1);
  if (const char* env = std::getenv("SAFER_SEED")) {
    try {
      size_t used = 0;
      const std::string s(env);
      seed = std::stoull(s, &used);
      if (used != s.size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw ConfigError("SAFER_SEED is not an unsigned integer");
    }
  }
  if (cli_seed) seed = *cli_seed;
  return seed;
}

inline uint64_t fnv1a_bytes(const char* data, size_t len) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < len; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("digest: cannot open " + path);
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// One manifest per command invocation: what ran, with which configuration and
// seed, over which artifact files (by content digest), and how long it took.
struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config_snapshot;
  uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  double wall_clock_seconds = 0.0;
};

inline void write_manifest(const std::string& path, const RunManifest& m) {
  nlohmann::json j;
  j["command"] = m.command;
  j["code_version"] = kCodeVersion;
  j["seed"] = m.seed;
  j["config"] = m.config_snapshot;
  auto digest_list = [](const std::vector<std::string>& paths) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : paths)
      arr.push_back({{"path", p}, {"fnv1a64", hex64(fnv1a_file(p))}});
    return arr;
  };
  j["inputs"] = digest_list(m.inputs);
  j["outputs"] = digest_list(m.outputs);
  j["wall_clock_seconds"] = m.wall_clock_seconds;
  std::ofstream out(path);
  if (!out) throw DataError("write_manifest: cannot open " + path);
  out << j.dump(2) << "\n";
}

}  // namespace safer
