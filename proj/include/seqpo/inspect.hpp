#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace seqpo {

// Offline recomputation over a persisted rollout log: ratio histograms,
// clip fractions per the logged algorithm/clip config, and a cross-check
// against the recorded metrics stream.
struct InspectReport {
  int total_lines = 0;
  std::vector<int> corrupt_lines;  // 1-based line numbers that failed to parse

  std::size_t rollout_records = 0;
  std::size_t responses = 0;
  std::size_t tokens = 0;

  double clip_fraction_tokens = 0.0;
  double clip_fraction_sequences = 0.0;
  double min_token_ratio = 0.0;
  double max_token_ratio = 0.0;

  // (label, count) buckets for token-level ratios w and sequence ratios s.
  std::vector<std::pair<std::string, std::size_t>> token_ratio_histogram;
  std::vector<std::pair<std::string, std::size_t>> seq_ratio_histogram;

  bool compared_metrics = false;
  int metrics_mismatches = 0;
  std::vector<std::string> mismatch_details;

  std::string render() const;  // printable report
};

// metrics_path may be empty; then no cross-check is performed.
InspectReport inspect_rollout_log(const std::string& log_path,
                                  const std::string& metrics_path);

}  // namespace seqpo
