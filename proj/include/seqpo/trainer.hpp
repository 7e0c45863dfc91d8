#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "seqpo/objectives.hpp"
#include "seqpo/policy.hpp"
#include "seqpo/tasks.hpp"

namespace seqpo {

enum class Algorithm { Grpo, Gspo, GspoToken, PpoClip };

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  Algorithm algorithm = Algorithm::Gspo;
  int group_size = 8;
  int queries_per_batch = 16;
  int minibatches_per_batch = 4;
  std::optional<ClipConfig> clip;  // defaults to the algorithm's ranges
  double learning_rate = 1e-3;
  OptimizerConfig optimizer;
  int steps = 200;
  std::uint64_t seed = 1;
  bool routing_replay = false;
  int query_refresh_period = 1;
  int max_response_len = 8;
  double likelihood_noise_std = 0.0;
  int rollout_threads = 1;

  ClipConfig effective_clip() const;
  void validate() const;
};

// One record per mini-batch gradient update. wall_time is an in-memory
// diagnostic and is not part of the persisted metrics stream.
struct MetricsRecord {
  int step = 0;
  int minibatch = 0;
  double mean_reward = 0.0;
  double objective_value = 0.0;
  double grad_norm = 0.0;
  double clip_fraction_tokens = 0.0;
  double clip_fraction_sequences = 0.0;
  double mean_seq_ratio = 0.0;
  double token_ratio_variance = 0.0;
  std::optional<double> expert_flip_rate;  // MoE policies only
  double wall_time = 0.0;
};

struct OptimizerState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::int64_t step = 0;
};

// Gradient ASCENT update (the surrogate objectives are maximized).
void optimizer_step(OptimizerState& state, PolicyParams& params,
                    std::span<const double> gradient, double learning_rate,
                    const OptimizerConfig& config);

// Adds zero-mean Gaussian noise (per-token std) to the old-policy log-probs,
// simulating a likelihood mismatch between sampling and training engines.
ScoredResponse apply_likelihood_noise(ScoredResponse scored, double noise_std,
                                      std::uint64_t seed);

// Fills new_log_probs for every response in the group under `params`. With
// replay_routing, MoE scoring is forced through each response's recorded
// trace.
void rescore_group(const PolicyParams& params, Group& group,
                   bool replay_routing = false);

// Snapshot passed to the per-minibatch hook right after the optimizer update;
// groups carry the scores the update actually used.
struct MinibatchTrace {
  int step;
  int minibatch;
  int first_query_index;
  const std::vector<Group>& groups;
  const MetricsRecord& record;
};

using MinibatchHook = std::function<void(const MinibatchTrace&)>;

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  PolicyParams final_params;
  OptimizerState optimizer;
  bool diverged = false;
  std::string divergence_message;
  int completed_steps = 0;
};

TrainResult run_training(const TrainConfig& config, const TaskSpec& task,
                         const PolicyConfig& policy_config,
                         const MinibatchHook& hook = {});

// Enum <-> string helpers shared by config parsing and logging.
std::string to_string(Algorithm algorithm);
Algorithm algorithm_from_string(const std::string& name);
std::string to_string(ClipLevel level);
ClipLevel clip_level_from_string(const std::string& name);

}  // namespace seqpo
