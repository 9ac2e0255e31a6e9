#include "blopt/runio.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace blopt {

Config Config::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(f);
  } catch (const std::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config '" + path + "' is not an object");
  return from_json(std::move(doc));
}

Config Config::from_json(nlohmann::json doc) {
  Config c;
  c.doc_ = std::move(doc);
  return c;
}

double Config::num(const std::string& key, double fallback, double lo, double hi) {
  seen_.insert(key);
  double v = fallback;
  if (doc_.contains(key)) {
    if (!doc_.at(key).is_number()) throw ConfigError("config key '" + key + "' must be a number");
    v = doc_.at(key).get<double>();
  }
  if (v < lo || v > hi) {
    throw ConfigError("config key '" + key + "' = " + format_g10(v) + " outside [" +
                      format_g10(lo) + ", " + format_g10(hi) + "]");
  }
  return v;
}

std::int64_t Config::integer(const std::string& key, std::int64_t fallback, std::int64_t lo,
                             std::int64_t hi) {
  seen_.insert(key);
  std::int64_t v = fallback;
  if (doc_.contains(key)) {
    if (!doc_.at(key).is_number_integer()) {
      throw ConfigError("config key '" + key + "' must be an integer");
    }
    v = doc_.at(key).get<std::int64_t>();
  }
  if (v < lo || v > hi) {
    throw ConfigError("config key '" + key + "' = " + std::to_string(v) + " outside [" +
                      std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  return v;
}

std::string Config::str(const std::string& key, const std::string& fallback) {
  seen_.insert(key);
  if (!doc_.contains(key)) return fallback;
  if (!doc_.at(key).is_string()) throw ConfigError("config key '" + key + "' must be a string");
  return doc_.at(key).get<std::string>();
}

bool Config::flag(const std::string& key, bool fallback) {
  seen_.insert(key);
  if (!doc_.contains(key)) return fallback;
  if (!doc_.at(key).is_boolean()) throw ConfigError("config key '" + key + "' must be a boolean");
  return doc_.at(key).get<bool>();
}

void Config::finish() const {
  for (auto it = doc_.begin(); it != doc_.end(); ++it) {
    if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + it.key() + "'");
  }
}

std::string format_g10(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header)
    : path_(path) {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) buffer_ += ",";
    buffer_ += header[i];
  }
  buffer_ += "\n";
}

void CsvWriter::row(const std::vector<double>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) buffer_ += ",";
    buffer_ += format_g10(values[i]);
  }
  buffer_ += "\n";
}

void CsvWriter::row_prefixed(std::int64_t id, const std::vector<double>& values) {
  buffer_ += std::to_string(id);
  for (double v : values) {
    buffer_ += ",";
    buffer_ += format_g10(v);
  }
  buffer_ += "\n";
}

CsvWriter::~CsvWriter() {
  std::ofstream f(path_, std::ios::binary);
  if (f) f << buffer_;
}

std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot hash missing file '" + path + "'");
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[4096];
  while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
    const std::streamsize n = f.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
    if (!f) break;
  }
  return h;
}

std::string build_identifier() {
#if defined(__clang__)
  return std::string("clang-") + __clang_version__;
#elif defined(__GNUC__)
  return "gcc-" + std::to_string(__GNUC__) + "." + std::to_string(__GNUC_MINOR__) + "." +
         std::to_string(__GNUC_PATCHLEVEL__);
#else
  return "unknown";
#endif
}

RunManifest::RunManifest(std::string subcommand, std::string config_snapshot, std::uint64_t seed)
    : subcommand_(std::move(subcommand)), config_snapshot_(std::move(config_snapshot)),
      seed_(seed) {}

void RunManifest::add_output(const std::string& path) {
  outputs_.emplace_back(path, fnv1a_file(path));
}

void RunManifest::write(const std::string& path) const {
  nlohmann::json doc;
  doc["subcommand"] = subcommand_;
  doc["seed"] = seed_;
  doc["build"] = build_identifier();
  doc["config"] = nlohmann::json::parse(config_snapshot_);
  nlohmann::json outs = nlohmann::json::array();
  for (const auto& [file, hash] : outputs_) {
    char hex[24];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(hash));
    outs.push_back({{"file", file}, {"fnv1a64", hex}});
  }
  doc["outputs"] = outs;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write manifest '" + path + "'");
  f << doc.dump(2) << "\n";
}

}  // namespace blopt
