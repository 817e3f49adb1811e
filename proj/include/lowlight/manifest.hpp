#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lowlight/config.hpp"

namespace lowlight {

inline std::string iso8601_utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// FNV-1a over the contents of the given files, in order.
inline std::string fingerprint_files(const std::vector<std::filesystem::path>& files) {
  Fnv1a64 h;
  for (const auto& p : files) {
    std::ifstream is(p, std::ios::binary);
    check_arg(is.good(), "cannot open " + p.string() + " for fingerprinting");
    char buf[1 << 16];
    while (is.read(buf, sizeof buf) || is.gcount() > 0)
      h.update(buf, static_cast<std::size_t>(is.gcount()));
  }
  return to_hex(h.digest());
}

// Reproducibility record for one command invocation. The hash covers the
// config snapshot, seed, dataset fingerprint and tool version (not the
// timestamp), and is embedded in artifact filenames.
struct RunManifest {
  std::string command;
  std::string config_snapshot;
  std::uint64_t seed = 0;
  std::string dataset_fingerprint;
  std::string tool_version = kToolVersion;
  std::string created_utc = iso8601_utc_now();
  std::vector<std::string> artifacts;

  std::string hash() const {
    Fnv1a64 h;
    h.update(command);
    h.update(config_snapshot);
    const std::string s = std::to_string(seed);
    h.update(s);
    h.update(dataset_fingerprint);
    h.update(tool_version);
    return to_hex(h.digest());
  }
  std::string short_hash() const { return hash().substr(8); }

  nlohmann::json to_json() const {
    return nlohmann::json{{"command", command},
                          {"config", config_snapshot},
                          {"seed", seed},
                          {"dataset_fingerprint", dataset_fingerprint},
                          {"tool_version", tool_version},
                          {"created_utc", created_utc},
                          {"hash", hash()},
                          {"artifacts", artifacts}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.config_snapshot = j.at("config").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.created_utc = j.at("created_utc").get<std::string>();
    if (j.contains("artifacts"))
      m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
    return m;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path);
    check_arg(os.good(), "cannot open " + path.string() + " for writing");
    os << to_json().dump(2) << '\n';
  }
  static RunManifest load(const std::filesystem::path& path) {
    std::ifstream is(path);
    check_arg(is.good(), "cannot open " + path.string());
    nlohmann::json j;
    is >> j;
    return from_json(j);
  }
};

// ---- dataset index -----------------------------------------------------------------
// CSV with header "raw,truth,ratio"; paths are relative to the index file.

struct IndexEntry {
  std::string raw;
  std::string truth;
  double ratio = 1.0;
};

inline void write_dataset_index(const std::filesystem::path& path,
                                const std::vector<IndexEntry>& entries) {
  std::ofstream os(path);
  check_arg(os.good(), "cannot open " + path.string() + " for writing");
  os << "raw,truth,ratio\n";
  os.precision(17);
  for (const auto& e : entries) os << e.raw << ',' << e.truth << ',' << e.ratio << '\n';
  check_arg(os.good(), "failed writing " + path.string());
}

inline std::vector<IndexEntry> read_dataset_index(const std::filesystem::path& path) {
  std::ifstream is(path);
  check_arg(is.good(), "cannot open dataset index " + path.string());
  std::string line;
  check_arg(static_cast<bool>(std::getline(is, line)) && line == "raw,truth,ratio",
            path.string() + " is not a dataset index (bad header)");
  std::vector<IndexEntry> entries;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    check_arg(c1 != std::string::npos && c2 != std::string::npos,
              path.string() + ": malformed index row: " + line);
    IndexEntry e;
    e.raw = line.substr(0, c1);
    e.truth = line.substr(c1 + 1, c2 - c1 - 1);
    e.ratio = std::stod(line.substr(c2 + 1));
    entries.push_back(std::move(e));
  }
  return entries;
}

/// Loads the indexed pairs into memory and reports the dataset fingerprint
/// (index file plus every referenced file, in index order).
inline std::pair<std::vector<TrainSample>, std::string> load_dataset(
    const std::filesystem::path& index_path) {
  const auto entries = read_dataset_index(index_path);
  const auto dir = index_path.parent_path();
  std::vector<TrainSample> samples;
  std::vector<std::filesystem::path> files = {index_path};
  for (const auto& e : entries) {
    TrainSample s;
    s.raw = read_raw(dir / e.raw);
    s.target = read_image(dir / e.truth).tensor;
    s.amplification = e.ratio;
    samples.push_back(std::move(s));
    files.push_back(dir / e.raw);
    files.push_back(dir / e.truth);
  }
  return {std::move(samples), fingerprint_files(files)};
}

}  // namespace lowlight
