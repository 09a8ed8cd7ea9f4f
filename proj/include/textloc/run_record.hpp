#pragma once

// run.json: one record per output directory with the config hash, the
// git-style blob ids of every input file and timestamps.

#include <openssl/evp.h>

#include <nlohmann/json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "textloc/errors.hpp"

namespace textloc {

namespace detail {

inline std::string digest_hex(const EVP_MD* md, const std::string& data) {
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out, &len, md, nullptr) != 1) throw std::runtime_error("digest failed");
  std::ostringstream s;
  for (unsigned int i = 0; i < len; ++i) s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(out[i]);
  return s.str();
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ValidationError("cannot read '" + p.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace detail

inline std::string sha256_hex(const std::string& data) { return detail::digest_hex(EVP_sha256(), data); }

// Same id `git hash-object` prints for the file.
inline std::string git_blob_id(const std::filesystem::path& p) {
  const std::string body = detail::read_file(p);
  return detail::digest_hex(EVP_sha1(), "blob " + std::to_string(body.size()) + '\0' + body);
}

// Hash of the canonical serialisation (sorted keys, no whitespace). Key order
// and formatting of the source file do not matter; any value change does.
inline std::string config_hash(const nlohmann::json& config) { return sha256_hex(config.dump()); }

inline std::string utc_timestamp(std::chrono::system_clock::time_point tp = std::chrono::system_clock::now()) {
  const std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

struct RunRecord {
  std::string run_id;
  std::string command;
  nlohmann::json config;
  std::string config_hash;
  nlohmann::json inputs = nlohmann::json::object();  // path -> blob id
  std::string started;
  std::string finished;

  void add_input(const std::filesystem::path& p) {
    if (std::filesystem::is_regular_file(p)) inputs[p.string()] = git_blob_id(p);
  }
};

inline RunRecord make_run_record(const std::string& command, const nlohmann::json& config) {
  RunRecord r;
  r.command = command;
  r.config = config;
  r.config_hash = config_hash(config);
  r.run_id = command + "-" + r.config_hash.substr(0, 12);
  r.started = utc_timestamp();
  return r;
}

// Volatile fields (timestamps) live in run.json only; everything a
// determinism check compares is elsewhere.
inline void write_run_record(const std::filesystem::path& dir, RunRecord record) {
  std::filesystem::create_directories(dir);
  record.finished = utc_timestamp();
  nlohmann::json j{{"run_id", record.run_id},     {"command", record.command},   {"config", record.config},
                   {"config_hash", record.config_hash}, {"inputs", record.inputs}, {"started", record.started},
                   {"finished", record.finished}};
  std::ofstream(dir / "run.json") << j.dump(2) << '\n';
}

}  // namespace textloc
