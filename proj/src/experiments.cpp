#include "seqpo/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace seqpo {

using nlohmann::json;

namespace {

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2]
                    : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double run_final_reward(const StudyRun& run) {
  return run.records.empty() ? 0.0 : run.records.back().mean_reward;
}

double run_first_reward(const StudyRun& run) {
  return run.records.empty() ? 0.0 : run.records.front().mean_reward;
}

double run_mean_clip_tokens(const StudyRun& run) {
  if (run.records.empty()) return 0.0;
  double sum = 0.0;
  for (const MetricsRecord& r : run.records) sum += r.clip_fraction_tokens;
  return sum / static_cast<double>(run.records.size());
}

double run_mean_flip_rate(const StudyRun& run) {
  double sum = 0.0;
  int count = 0;
  for (const MetricsRecord& r : run.records) {
    if (r.expert_flip_rate) {
      sum += *r.expert_flip_rate;
      ++count;
    }
  }
  return count == 0 ? 0.0 : sum / count;
}

struct Variant {
  std::string name;
  TrainConfig config;
};

std::vector<Variant> build_variants(const StudySpec& spec,
                                    const TrainConfig& base) {
  std::vector<Variant> variants;
  auto with_algorithm = [&](Algorithm algorithm, bool replay) {
    TrainConfig c = base;
    c.algorithm = algorithm;
    c.clip.reset();  // per-algorithm default clip ranges
    c.routing_replay = replay;
    return c;
  };
  switch (spec.study) {
    case StudyKind::Efficiency:
    case StudyKind::ClipFractions:
      variants.push_back({"gspo", with_algorithm(Algorithm::Gspo, false)});
      variants.push_back({"grpo", with_algorithm(Algorithm::Grpo, false)});
      break;
    case StudyKind::MoeStability:
      variants.push_back(
          {"grpo_replay", with_algorithm(Algorithm::Grpo, true)});
      variants.push_back({"grpo", with_algorithm(Algorithm::Grpo, false)});
      variants.push_back({"gspo", with_algorithm(Algorithm::Gspo, false)});
      break;
    case StudyKind::NoiseRobustness:
      for (double level : spec.noise_levels) {
        for (Algorithm algorithm : {Algorithm::Gspo, Algorithm::Grpo}) {
          TrainConfig c = with_algorithm(algorithm, false);
          c.likelihood_noise_std = level;
          std::ostringstream name;
          name << to_string(algorithm) << "_noise" << level;
          variants.push_back({name.str(), c});
        }
      }
      break;
  }
  return variants;
}

VariantCurve aggregate_curve(const std::string& variant,
                             const std::vector<const StudyRun*>& runs,
                             int queries_per_batch, int minibatches) {
  VariantCurve curve;
  curve.variant = variant;
  std::size_t length = 0;
  for (const StudyRun* run : runs)
    length = std::max(length, run->records.size());
  for (std::size_t idx = 0; idx < length; ++idx) {
    double sum = 0.0, sum_sq = 0.0, clip_sum = 0.0;
    int n = 0;
    for (const StudyRun* run : runs) {
      if (idx >= run->records.size()) continue;
      const double r = run->records[idx].mean_reward;
      sum += r;
      sum_sq += r * r;
      clip_sum += run->records[idx].clip_fraction_tokens;
      ++n;
    }
    if (n == 0) continue;
    const double mean = sum / n;
    const double var = std::max(0.0, sum_sq / n - mean * mean);
    const int step = static_cast<int>(idx) / minibatches;
    const int mb = static_cast<int>(idx) % minibatches;
    curve.step_axis.push_back(step + static_cast<double>(mb) / minibatches);
    curve.query_axis.push_back(static_cast<double>(step + 1) * queries_per_batch);
    curve.reward_mean.push_back(mean);
    curve.reward_std.push_back(std::sqrt(var));
    curve.clip_tokens_mean.push_back(clip_sum / n);
  }
  return curve;
}

}  // namespace

StudyReport run_study(const StudySpec& spec, const TrainConfig& base,
                      const TaskSpec& task, const PolicyConfig& policy) {
  spec.validate();
  if (spec.study == StudyKind::MoeStability && !policy.is_moe())
    throw ConfigError("moe_stability study requires an MoE policy config");

  StudyReport report;
  report.spec = spec;

  const std::vector<Variant> variants = build_variants(spec, base);
  for (const Variant& variant : variants) {
    for (std::uint64_t seed : spec.seeds) {
      StudyRun run;
      run.variant = variant.name;
      run.seed = seed;
      run.config = variant.config;
      run.config.seed = seed;
      TrainResult result = run_training(run.config, task, policy);
      run.records = std::move(result.metrics);
      run.diverged = result.diverged;
      run.message = result.divergence_message;
      report.runs.push_back(std::move(run));
    }
  }

  for (const Variant& variant : variants) {
    std::vector<const StudyRun*> runs;
    for (const StudyRun& run : report.runs)
      if (run.variant == variant.name) runs.push_back(&run);
    report.curves.push_back(aggregate_curve(variant.name, runs,
                                            base.queries_per_batch,
                                            base.minibatches_per_batch));
  }

  json summary;
  int aborted = 0;
  for (const StudyRun& run : report.runs) aborted += run.diverged ? 1 : 0;
  summary["aborted_runs"] = aborted;

  auto medians_for = [&](const std::string& variant, auto extractor) {
    std::vector<double> values;
    for (const StudyRun& run : report.runs)
      if (run.variant == variant) values.push_back(extractor(run));
    return median(std::move(values));
  };

  json per_variant;
  for (const Variant& variant : variants) {
    json entry;
    entry["median_final_reward"] = medians_for(variant.name, run_final_reward);
    entry["median_first_reward"] = medians_for(variant.name, run_first_reward);
    entry["median_improvement"] =
        medians_for(variant.name, [](const StudyRun& r) {
          return run_final_reward(r) - run_first_reward(r);
        });
    entry["median_clip_fraction_tokens"] =
        medians_for(variant.name, run_mean_clip_tokens);
    per_variant[variant.name] = entry;
  }
  summary["variants"] = per_variant;

  switch (spec.study) {
    case StudyKind::ClipFractions: {
      const double gspo = medians_for("gspo", run_mean_clip_tokens);
      const double grpo = medians_for("grpo", run_mean_clip_tokens);
      summary["clip_fraction_ratio_gspo_over_grpo"] =
          grpo > 0.0 ? gspo / grpo : std::numeric_limits<double>::infinity();
      break;
    }
    case StudyKind::MoeStability: {
      const double replay = medians_for("grpo_replay", run_final_reward);
      const double plain = medians_for("grpo", run_final_reward);
      const double gspo = medians_for("gspo", run_final_reward);
      summary["ordering_grpo_replay_ge_grpo"] = replay >= plain;
      summary["ordering_gspo_ge_grpo"] = gspo >= plain;
      summary["median_flip_rate_grpo"] = medians_for("grpo", run_mean_flip_rate);
      summary["median_flip_rate_gspo"] = medians_for("gspo", run_mean_flip_rate);
      break;
    }
    case StudyKind::Efficiency:
    case StudyKind::NoiseRobustness:
      break;
  }

  report.summary = std::move(summary);
  return report;
}

json report_to_json(const StudyReport& report, const TaskSpec& task,
                    const PolicyConfig& policy) {
  json doc;
  doc["study"] = to_string(report.spec.study);
  doc["spec"] = to_json(report.spec);
  doc["task"] = to_json(task);
  doc["policy"] = to_json(policy);
  doc["summary"] = report.summary;

  json runs = json::array();
  for (const StudyRun& run : report.runs) {
    json entry;
    entry["variant"] = run.variant;
    entry["seed"] = run.seed;
    entry["config"] = to_json(run.config);
    entry["diverged"] = run.diverged;
    if (run.diverged) entry["message"] = run.message;
    entry["final_reward"] = run.records.empty()
                                ? json()
                                : json(run.records.back().mean_reward);
    entry["num_records"] = run.records.size();
    runs.push_back(std::move(entry));
  }
  doc["runs"] = runs;

  json curves;
  for (const VariantCurve& curve : report.curves) {
    json entry;
    entry["step_axis"] = curve.step_axis;
    entry["query_axis"] = curve.query_axis;
    entry["reward_mean"] = curve.reward_mean;
    entry["reward_std"] = curve.reward_std;
    entry["clip_tokens_mean"] = curve.clip_tokens_mean;
    curves[curve.variant] = entry;
  }
  doc["curves"] = curves;
  return doc;
}

}  // namespace seqpo
