#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqpo/objectives.hpp"
#include "seqpo/policy.hpp"
#include "seqpo/tasks.hpp"
#include "seqpo/trainer.hpp"

namespace seqpo {

enum class StudyKind { Efficiency, ClipFractions, MoeStability, NoiseRobustness };

struct StudySpec {
  StudyKind study = StudyKind::Efficiency;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<double> noise_levels = {0.0, 0.05};  // noise_robustness only

  void validate() const;
};

struct ExperimentConfig {
  PolicyConfig policy;
  TaskSpec task;
  TrainConfig train;
  std::optional<StudySpec> study;
  std::string output_dir = "out";

  void validate() const;
};

// Strict parsing: unknown keys are rejected with a ConfigError naming the key.
ExperimentConfig parse_experiment_config(const nlohmann::json& doc);

nlohmann::json to_json(const PolicyConfig& config);
nlohmann::json to_json(const TaskSpec& spec);
nlohmann::json to_json(const ClipConfig& clip);
nlohmann::json to_json(const TrainConfig& config);
nlohmann::json to_json(const StudySpec& spec);
nlohmann::json to_json(const ExperimentConfig& config);

nlohmann::json metrics_to_json(const MetricsRecord& record);

// Applies "dotted.path=value" onto a JSON document; the value is parsed as
// JSON when possible, otherwise taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// FNV-1a over the canonical dump; identifies the configuration in
// checkpoints and logs.
std::uint64_t config_hash(const nlohmann::json& doc);

std::string to_string(StudyKind kind);
StudyKind study_kind_from_string(const std::string& name);

}  // namespace seqpo
