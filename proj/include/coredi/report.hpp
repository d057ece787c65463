#pragma once

// Run-directory plumbing: metric report JSON, the run manifest, the advisory
// lock, and the curves emitter.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "coredi/config.hpp"
#include "coredi/errors.hpp"
#include "coredi/metrics.hpp"

#ifndef COREDI_SOURCE_ID
#define COREDI_SOURCE_ID "unknown"
#endif

namespace coredi {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline nlohmann::json metrics_json(const MetricReport& m, std::size_t step) {
  return {{"step", step},
          {"lds", m.lds},
          {"cds", m.cds},
          {"rmsc", m.rmsc},
          {"offdiag_cov_mass", m.offdiag_cov_mass},
          {"effective_rank", m.effective_rank}};
}

inline MetricReport metrics_from_json(const nlohmann::json& j) {
  MetricReport m;
  try {
    m.lds = j.at("lds").get<double>();
    m.cds = j.at("cds").get<double>();
    m.rmsc = j.at("rmsc").get<double>();
    m.offdiag_cov_mass = j.at("offdiag_cov_mass").get<double>();
    m.effective_rank = j.at("effective_rank").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed metric report: ") + e.what());
  }
  return m;
}

/// Exclusive advisory lock on <dir>/.lock for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + path_.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw IoError("run directory is locked by another process: " + path_.string());
    }
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// manifest.json: config snapshot, source id, seed, timestamps and an index
/// of every artifact with its byte length.
class RunManifest {
 public:
  RunManifest(const TrainConfig& config, std::filesystem::path dir)
      : config_(serialize(config)), seed_(config.seed), dir_(std::move(dir)), started_(utc_timestamp()) {}

  nlohmann::json finish() const {
    namespace fs = std::filesystem;
    nlohmann::json files = nlohmann::json::array();
    std::vector<fs::path> paths;
    for (const auto& e : fs::recursive_directory_iterator(dir_))
      if (e.is_regular_file()) paths.push_back(fs::relative(e.path(), dir_));
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) {
      if (p == "manifest.json" || p == ".lock") continue;
      files.push_back({{"path", p.generic_string()}, {"bytes", fs::file_size(dir_ / p)}});
    }
    const nlohmann::json j = {{"config", config_},      {"config_hash", hex_hash()},
                              {"source", COREDI_SOURCE_ID}, {"seed", seed_},
                              {"started", started_},    {"finished", utc_timestamp()},
                              {"files", files}};
    write_text(dir_ / "manifest.json", j.dump(2) + "\n");
    return j;
  }

 private:
  std::string hex_hash() const {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(config_hash(parse_config_text(config_))));
    return buf;
  }

  std::string config_;
  std::uint64_t seed_;
  std::filesystem::path dir_;
  std::string started_;
};

/// Checks that every file listed in <dir>/manifest.json exists with the
/// recorded length. Returns the offending paths.
inline std::vector<std::string> verify_manifest(const std::filesystem::path& dir) {
  const auto j = nlohmann::json::parse(read_text(dir / "manifest.json"), nullptr, false);
  if (j.is_discarded()) throw IoError("malformed manifest in " + dir.string());
  std::vector<std::string> bad;
  for (const auto& f : j.at("files")) {
    const auto p = dir / f.at("path").get<std::string>();
    std::error_code ec;
    const auto size = std::filesystem::file_size(p, ec);
    if (ec || size != f.at("bytes").get<std::uintmax_t>()) bad.push_back(p.string());
  }
  return bad;
}

/// Collects milestone metric reports and the loss log of a run into
/// curves.json:
///   {"milestones": {"step": [...], "lds": [...], "cds": [...], "rmsc": [...],
///                   "offdiag_cov_mass": [...], "effective_rank": [...]},
///    "loss": {"step": [...], "l_image": [...], "l_rep": [...], "l_reg": [...],
///             "total": [...], "lr_proj": [...]}}
inline nlohmann::json emit_curves(const std::filesystem::path& dir) {
  const TrainConfig config = parse_config_text(read_text(dir / "config.txt"));
  nlohmann::json ms = {{"step", nlohmann::json::array()}};
  const char* metric_keys[] = {"lds", "cds", "rmsc", "offdiag_cov_mass", "effective_rank"};
  for (const char* k : metric_keys) ms[k] = nlohmann::json::array();
  for (std::size_t k = 0; k < config.milestones; ++k) {
    const auto path = dir / ("milestone_" + std::to_string(k)) / "metrics.json";
    if (!std::filesystem::exists(path)) throw IoError("missing milestone report " + path.string());
    const auto j = nlohmann::json::parse(read_text(path), nullptr, false);
    if (j.is_discarded() || !j.contains("step")) throw IoError("malformed milestone report " + path.string());
    const MetricReport m = metrics_from_json(j);
    ms["step"].push_back(j["step"]);
    ms["lds"].push_back(m.lds);
    ms["cds"].push_back(m.cds);
    ms["rmsc"].push_back(m.rmsc);
    ms["offdiag_cov_mass"].push_back(m.offdiag_cov_mass);
    ms["effective_rank"].push_back(m.effective_rank);
  }

  const char* loss_keys[] = {"step", "l_image", "l_rep", "l_reg", "total", "lr_proj"};
  nlohmann::json loss;
  for (const char* k : loss_keys) loss[k] = nlohmann::json::array();
  std::istringstream csv(read_text(dir / "losses.csv"));
  std::string line;
  std::getline(csv, line);
  if (line != "step,l_image,l_rep,l_reg,total,lr_proj") throw IoError("unexpected loss log header in " + dir.string());
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    for (const char* k : loss_keys) {
      if (!std::getline(row, cell, ',')) throw IoError("short loss log row: " + line);
      if (std::string(k) == "step") {
        loss[k].push_back(std::stoull(cell));
      } else {
        loss[k].push_back(std::stod(cell));
      }
    }
  }
  const nlohmann::json out = {{"milestones", ms}, {"loss", loss}};
  write_text(dir / "curves.json", out.dump(2) + "\n");
  return out;
}

}  // namespace coredi
