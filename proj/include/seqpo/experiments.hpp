#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "seqpo/config.hpp"
#include "seqpo/trainer.hpp"

namespace seqpo {

struct StudyRun {
  std::string variant;
  std::uint64_t seed = 0;
  TrainConfig config;
  std::vector<MetricsRecord> records;
  bool diverged = false;
  std::string message;
};

// Per-variant mean +/- std curves across seeds, indexed both by step and by
// consumed queries.
struct VariantCurve {
  std::string variant;
  std::vector<double> step_axis;
  std::vector<double> query_axis;
  std::vector<double> reward_mean;
  std::vector<double> reward_std;
  std::vector<double> clip_tokens_mean;
};

struct StudyReport {
  StudySpec spec;
  std::vector<StudyRun> runs;
  std::vector<VariantCurve> curves;
  nlohmann::json summary;
};

// Runs the study's variant matrix over the configured seeds. The base
// TrainConfig supplies everything a variant does not pin; aborted runs are
// reported with their diagnostic, never dropped.
StudyReport run_study(const StudySpec& spec, const TrainConfig& base,
                      const TaskSpec& task, const PolicyConfig& policy);

// Full machine-readable report (configs, seeds, summary, per-run curves).
nlohmann::json report_to_json(const StudyReport& report, const TaskSpec& task,
                              const PolicyConfig& policy);

}  // namespace seqpo
