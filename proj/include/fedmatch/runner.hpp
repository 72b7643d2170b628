#pragma once

// Run specifications (JSON) and the on-disk artifacts of a run.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fedmatch/federation.hpp"

namespace fedmatch {

struct RunSpec {
  Method method = Method::kFedMatch;
  ExperimentConfig exp;
  int repetitions = 3;
  std::string output_dir = "out";

  void validate() const;
  bool operator==(const RunSpec& other) const;
};

/// Parses a flat JSON object. Unset keys take their defaults; unknown keys
/// and invariant violations throw ConfigError.
RunSpec parse_run_spec(std::string_view json_text);
RunSpec load_run_spec(const std::filesystem::path& path);

/// Every key, resolved; parse_run_spec(to_json(s)) == s.
std::string to_json(const RunSpec& spec);

/// The fixed column order of metrics.csv.
inline constexpr std::string_view kMetricsHeader = "round,test_acc,labeled_acc,loss_s,loss_u,s2c_pct,c2s_pct,nnz_psi_frac";

std::string metrics_csv(const std::vector<RoundMetrics>& metrics);

struct RunOutput {
  std::vector<ExperimentResult> repetitions;  // seeds base_seed + i
};

/// Runs every repetition and writes <out>/rep_<i>/{metrics.csv,costs.csv},
/// <out>/config.json and <out>/summary.json.
RunOutput run(const RunSpec& spec);

/// Runs `spec` once per method under <out>/<method>/ and merges every
/// metrics row into <out>/compare.csv.
void compare(const RunSpec& spec, const std::vector<Method>& methods);

/// Writes `contents` beside `path` and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace fedmatch
