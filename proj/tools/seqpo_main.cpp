#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "seqpo/config.hpp"
#include "seqpo/experiments.hpp"
#include "seqpo/inspect.hpp"
#include "seqpo/svg_plot.hpp"
#include "seqpo/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace seqpo;

namespace {

// Exit codes: 0 success, 1 inspection found inconsistencies, 2 config error,
// 3 numeric divergence, 4 I/O error.
constexpr int kExitOk = 0;
constexpr int kExitInspectMismatch = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitIo = 4;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool force = false;
};

json load_config_document(const CommonOptions& options) {
  std::ifstream in(options.config_path);
  if (!in) throw IoError("cannot open config file " + options.config_path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config file is not valid JSON: ") + e.what());
  }

  // Precedence: file < SEQPO_OVERRIDES < --override < --seed/--out.
  if (const char* env = std::getenv("SEQPO_OVERRIDES")) {
    std::stringstream stream(env);
    std::string item;
    while (std::getline(stream, item, ',')) {
      if (!item.empty()) apply_override(doc, item);
    }
  }
  for (const std::string& item : options.overrides) apply_override(doc, item);
  if (options.seed_set) doc["train"]["seed"] = options.seed;
  if (!options.out_dir.empty()) doc["output_dir"] = options.out_dir;
  return doc;
}

void prepare_output_dir(const fs::path& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir) && !fs::is_empty(dir, ec)) {
    if (!force)
      throw IoError("output directory " + dir.string() +
                    " is not empty; pass --force to overwrite");
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string());
}

json rollout_header(const ExperimentConfig& config) {
  return json{{"type", "header"},
              {"algorithm", to_string(config.train.algorithm)},
              {"clip", to_json(config.train.effective_clip())},
              {"group_size", config.train.group_size},
              {"policy", to_json(config.policy)}};
}

json rollout_record(const MinibatchTrace& trace, bool moe) {
  json groups = json::array();
  for (std::size_t g = 0; g < trace.groups.size(); ++g) {
    const Group& group = trace.groups[g];
    json responses = json::array();
    for (std::size_t i = 0; i < group.responses.size(); ++i) {
      const ScoredResponse& r = group.responses[i];
      json entry{{"tokens", r.tokens},
                 {"reward", group.rewards[i]},
                 {"advantage", group.advantages[i]},
                 {"old_log_probs", r.old_log_probs},
                 {"new_log_probs", r.new_log_probs}};
      if (moe) entry["trace"] = r.trace;
      responses.push_back(std::move(entry));
    }
    groups.push_back(json{{"type", "rollout"},
                          {"step", trace.step},
                          {"minibatch", trace.minibatch},
                          {"query_id", trace.first_query_index +
                                           static_cast<int>(g)},
                          {"query", group.query},
                          {"responses", std::move(responses)}});
  }
  return groups;
}

json checkpoint_json(const json& effective, const TrainResult& result) {
  return json{{"config_hash", config_hash(effective)},
              {"completed_steps", result.completed_steps},
              {"params",
               json{{"config", to_json(result.final_params.config)},
                    {"values", result.final_params.values}}},
              {"optimizer", json{{"first_moment", result.optimizer.first_moment},
                                 {"second_moment", result.optimizer.second_moment},
                                 {"step", result.optimizer.step}}}};
}

int cmd_train(const CommonOptions& options) {
  const json doc = load_config_document(options);
  const ExperimentConfig config = parse_experiment_config(doc);

  const fs::path out_dir(config.output_dir);
  prepare_output_dir(out_dir, options.force);

  const json effective = to_json(config);
  {
    std::ofstream out(out_dir / "effective_config.json");
    if (!out) throw IoError("cannot write effective_config.json");
    out << effective.dump(2) << "\n";
  }

  std::ofstream metrics_stream(out_dir / "metrics.jsonl", std::ios::app);
  std::ofstream rollout_stream(out_dir / "rollout.jsonl", std::ios::app);
  if (!metrics_stream || !rollout_stream)
    throw IoError("cannot open output streams in " + out_dir.string());
  rollout_stream << rollout_header(config).dump() << "\n";
  rollout_stream.flush();

  const bool moe = config.policy.is_moe();
  MinibatchHook hook = [&](const MinibatchTrace& trace) {
    for (const json& record : rollout_record(trace, moe))
      rollout_stream << record.dump() << "\n";
    rollout_stream.flush();
    metrics_stream << metrics_to_json(trace.record).dump() << "\n";
    metrics_stream.flush();
  };

  const TrainResult result =
      run_training(config.train, config.task, config.policy, hook);

  {
    std::ofstream out(out_dir / "checkpoint.json");
    if (!out) throw IoError("cannot write checkpoint.json");
    out << checkpoint_json(effective, result).dump() << "\n";
  }

  json summary{{"diverged", result.diverged},
               {"completed_steps", result.completed_steps},
               {"records", result.metrics.size()}};
  if (result.diverged) summary["message"] = result.divergence_message;
  if (!result.metrics.empty()) {
    summary["first_mean_reward"] = result.metrics.front().mean_reward;
    summary["final_mean_reward"] = result.metrics.back().mean_reward;
  }
  {
    std::ofstream out(out_dir / "summary.json");
    if (!out) throw IoError("cannot write summary.json");
    out << summary.dump(2) << "\n";
  }

  if (result.diverged) {
    std::cerr << "training diverged: " << result.divergence_message
              << " (last good checkpoint persisted)\n";
    return kExitDivergence;
  }
  std::cout << "completed " << result.completed_steps << " steps, "
            << result.metrics.size() << " updates";
  if (!result.metrics.empty())
    std::cout << ", mean reward " << result.metrics.front().mean_reward
              << " -> " << result.metrics.back().mean_reward;
  std::cout << "\n";
  return kExitOk;
}

int cmd_study(const CommonOptions& options) {
  const json doc = load_config_document(options);
  const ExperimentConfig config = parse_experiment_config(doc);
  if (!config.study)
    throw ConfigError("study command requires a 'study' section in the config");

  const fs::path out_dir(config.output_dir);
  prepare_output_dir(out_dir, options.force);
  fs::create_directories(out_dir / "runs");
  fs::create_directories(out_dir / "plots");

  {
    std::ofstream out(out_dir / "effective_config.json");
    if (!out) throw IoError("cannot write effective_config.json");
    out << to_json(config).dump(2) << "\n";
  }

  const StudyReport report =
      run_study(*config.study, config.train, config.task, config.policy);

  for (const StudyRun& run : report.runs) {
    std::ofstream out(out_dir / "runs" /
                      (run.variant + "_seed" + std::to_string(run.seed) +
                       ".jsonl"));
    if (!out) throw IoError("cannot write per-run metrics file");
    for (const MetricsRecord& record : run.records)
      out << metrics_to_json(record).dump() << "\n";
  }

  {
    std::ofstream out(out_dir / "report.json");
    if (!out) throw IoError("cannot write report.json");
    out << report_to_json(report, config.task, config.policy).dump(2) << "\n";
  }

  LinePlot reward_plot("mean reward (" + to_string(report.spec.study) + ")",
                       "step", "mean reward");
  LinePlot clip_plot("clipped-token fraction (" +
                         to_string(report.spec.study) + ")",
                     "step", "clip fraction (tokens)");
  for (const VariantCurve& curve : report.curves) {
    reward_plot.add_series(curve.variant, curve.step_axis, curve.reward_mean);
    clip_plot.add_series(curve.variant, curve.step_axis,
                         curve.clip_tokens_mean);
  }
  reward_plot.write((out_dir / "plots" / "reward_curves.svg").string());
  clip_plot.write((out_dir / "plots" / "clip_fractions.svg").string());

  const int aborted = report.summary.value("aborted_runs", 0);
  std::cout << "study " << to_string(report.spec.study) << ": "
            << report.runs.size() << " runs";
  if (aborted > 0) std::cout << " (" << aborted << " aborted)";
  std::cout << ", report written to " << (out_dir / "report.json").string()
            << "\n";
  return aborted > 0 ? kExitDivergence : kExitOk;
}

int cmd_inspect(const std::string& log_path, std::string metrics_path) {
  if (metrics_path.empty()) {
    const fs::path sibling = fs::path(log_path).parent_path() / "metrics.jsonl";
    if (fs::exists(sibling)) metrics_path = sibling.string();
  }
  const InspectReport report = inspect_rollout_log(log_path, metrics_path);
  std::cout << report.render();
  return report.metrics_mismatches > 0 ? kExitInspectMismatch : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale sequence-level policy optimization lab"};
  app.require_subcommand(1);

  CommonOptions train_options, study_options;
  std::string inspect_log, inspect_metrics;

  CLI::App* train = app.add_subcommand("train", "run a training experiment");
  train->add_option("--config", train_options.config_path, "config file (JSON)")
      ->required();
  train->add_option("--override", train_options.overrides,
                    "config override key.path=value (repeatable)");
  train->add_option("--out", train_options.out_dir, "output directory");
  train
      ->add_option("--seed", train_options.seed,
                   "override train.seed")
      ->each([&](const std::string&) { train_options.seed_set = true; });
  train->add_flag("--force", train_options.force,
                  "allow writing into a nonempty output directory");

  CLI::App* study = app.add_subcommand("study", "run a canned study");
  study->add_option("--config", study_options.config_path, "config file (JSON)")
      ->required();
  study->add_option("--override", study_options.overrides,
                    "config override key.path=value (repeatable)");
  study->add_option("--out", study_options.out_dir, "output directory");
  study
      ->add_option("--seed", study_options.seed,
                   "override train.seed")
      ->each([&](const std::string&) { study_options.seed_set = true; });
  study->add_flag("--force", study_options.force,
                  "allow writing into a nonempty output directory");

  CLI::App* inspect =
      app.add_subcommand("inspect", "recompute diagnostics from a rollout log");
  inspect->add_option("log", inspect_log, "rollout log (JSONL)")->required();
  inspect->add_option("--metrics", inspect_metrics,
                      "metrics stream to cross-check (defaults to the "
                      "sibling metrics.jsonl)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(train_options);
    if (study->parsed()) return cmd_study(study_options);
    if (inspect->parsed()) return cmd_inspect(inspect_log, inspect_metrics);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InputError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
