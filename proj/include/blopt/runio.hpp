#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

namespace blopt {

// Invalid or out-of-range configuration; maps to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Typed view over a JSON config document. Every key that is read gets marked;
// finish() rejects the document if unread (unknown) keys remain. Numeric
// ranges are validated at read time with the offending key in the message.
class Config {
 public:
  static Config load(const std::string& path);
  static Config from_json(nlohmann::json doc);

  double num(const std::string& key, double fallback, double lo, double hi);
  std::int64_t integer(const std::string& key, std::int64_t fallback, std::int64_t lo,
                       std::int64_t hi);
  std::string str(const std::string& key, const std::string& fallback);
  bool flag(const std::string& key, bool fallback);
  bool has(const std::string& key) const { return doc_.contains(key); }

  void finish() const;  // throws ConfigError on unknown keys
  std::string snapshot() const { return doc_.dump(); }

 private:
  nlohmann::json doc_ = nlohmann::json::object();
  std::set<std::string> seen_;
};

// Fixed-format CSV emitter (%.10g numerics) so identical runs produce
// identical bytes.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header);
  void row(const std::vector<double>& values);
  void row_prefixed(std::int64_t id, const std::vector<double>& values);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::string buffer_;
 public:
  ~CsvWriter();
};

std::string format_g10(double v);

// FNV-1a over file bytes; the manifest's content hash.
std::uint64_t fnv1a_file(const std::string& path);

std::string build_identifier();

// Run record: config snapshot, build id, and every output with its hash.
class RunManifest {
 public:
  RunManifest(std::string subcommand, std::string config_snapshot, std::uint64_t seed);
  void add_output(const std::string& path);
  void write(const std::string& path) const;

 private:
  std::string subcommand_;
  std::string config_snapshot_;
  std::uint64_t seed_;
  std::vector<std::pair<std::string, std::uint64_t>> outputs_;
};

}  // namespace blopt
