#include "seqpo/trainer.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include "seqpo/gradients.hpp"
#include "seqpo/rng.hpp"

namespace seqpo {

namespace {

// Stream tags so every consumer of randomness gets an independent seed.
constexpr std::uint64_t kTagInit = 0x01;
constexpr std::uint64_t kTagQueries = 0x02;
constexpr std::uint64_t kTagRollout = 0x03;
constexpr std::uint64_t kTagNoise = 0x04;

bool algorithm_uses_token_advantages(Algorithm a) {
  return a == Algorithm::GspoToken || a == Algorithm::PpoClip;
}

bool all_finite(std::span<const double> values) {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

double population_variance(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return var / static_cast<double>(xs.size());
}

}  // namespace

ClipConfig TrainConfig::effective_clip() const {
  if (clip) return *clip;
  switch (algorithm) {
    case Algorithm::Gspo:
    case Algorithm::GspoToken:
      return ClipConfig{3e-4, 4e-4, ClipLevel::Sequence};
    case Algorithm::Grpo:
    case Algorithm::PpoClip:
      return ClipConfig{0.2, 0.27, ClipLevel::Token};
  }
  return ClipConfig{};
}

void TrainConfig::validate() const {
  if (group_size < 2) throw ConfigError("train.group_size must be >= 2");
  if (queries_per_batch < 1)
    throw ConfigError("train.queries_per_batch must be >= 1");
  if (minibatches_per_batch < 1)
    throw ConfigError("train.minibatches_per_batch must be >= 1");
  if (queries_per_batch % minibatches_per_batch != 0)
    throw ConfigError(
        "train.minibatches_per_batch must divide train.queries_per_batch");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("train.learning_rate must be finite and >= 0");
  if (steps < 0) throw ConfigError("train.steps must be >= 0");
  if (query_refresh_period < 1)
    throw ConfigError("train.query_refresh_period must be >= 1");
  if (max_response_len < 1)
    throw ConfigError("train.max_response_len must be >= 1");
  if (likelihood_noise_std < 0.0)
    throw ConfigError("train.likelihood_noise_std must be >= 0");
  if (rollout_threads < 1)
    throw ConfigError("train.rollout_threads must be >= 1");
  if (optimizer.kind == OptimizerKind::Adam) {
    if (optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0 ||
        optimizer.beta2 < 0.0 || optimizer.beta2 >= 1.0 ||
        optimizer.eps <= 0.0)
      throw ConfigError("train.optimizer adam parameters out of range");
  }
  const ClipConfig c = effective_clip();
  c.validate();
  const bool sequence_algo =
      algorithm == Algorithm::Gspo || algorithm == Algorithm::GspoToken;
  if (sequence_algo && c.level != ClipLevel::Sequence)
    throw ConfigError("train.clip.level must be sequence for gspo variants");
  if (!sequence_algo && c.level != ClipLevel::Token)
    throw ConfigError("train.clip.level must be token for grpo/ppo_clip");
}

void optimizer_step(OptimizerState& state, PolicyParams& params,
                    std::span<const double> gradient, double learning_rate,
                    const OptimizerConfig& config) {
  if (gradient.size() != params.values.size())
    throw InputError("gradient length does not match parameter vector");
  if (!all_finite(gradient)) throw NumericError("non-finite gradient");

  if (config.kind == OptimizerKind::Sgd) {
    for (std::size_t j = 0; j < gradient.size(); ++j)
      params.values[j] += learning_rate * gradient[j];
    ++state.step;
    return;
  }

  if (state.first_moment.size() != gradient.size()) {
    state.first_moment.assign(gradient.size(), 0.0);
    state.second_moment.assign(gradient.size(), 0.0);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t j = 0; j < gradient.size(); ++j) {
    state.first_moment[j] =
        config.beta1 * state.first_moment[j] + (1.0 - config.beta1) * gradient[j];
    state.second_moment[j] = config.beta2 * state.second_moment[j] +
                             (1.0 - config.beta2) * gradient[j] * gradient[j];
    const double m_hat = state.first_moment[j] / bc1;
    const double v_hat = state.second_moment[j] / bc2;
    params.values[j] += learning_rate * m_hat / (std::sqrt(v_hat) + config.eps);
  }
}

ScoredResponse apply_likelihood_noise(ScoredResponse scored, double noise_std,
                                      std::uint64_t seed) {
  if (noise_std < 0.0) throw InputError("noise std must be >= 0");
  if (noise_std == 0.0) return scored;
  Rng rng(seed);
  for (double& lp : scored.old_log_probs) lp += noise_std * rng.gaussian();
  return scored;
}

void rescore_group(const PolicyParams& params, Group& group,
                   bool replay_routing) {
  for (ScoredResponse& response : group.responses) {
    const RoutingTrace* trace =
        (replay_routing && !response.trace.empty()) ? &response.trace : nullptr;
    SequenceScore score =
        sequence_log_prob(params, group.query, response.tokens, trace);
    response.new_log_probs = std::move(score.per_token);
  }
}

namespace {

ObjectiveResult evaluate_objective(Algorithm algorithm, const Group& group,
                                   const ClipConfig& clip) {
  switch (algorithm) {
    case Algorithm::Grpo:
      return grpo_objective(group, clip);
    case Algorithm::Gspo:
      return gspo_objective(group, clip);
    case Algorithm::GspoToken:
      return gspo_token_objective(group, clip);
    case Algorithm::PpoClip:
      return ppo_clip_objective(group.responses, group.token_advantages, clip);
  }
  throw StateError("unknown algorithm");
}

GradientEstimate evaluate_gradient(Algorithm algorithm,
                                   const PolicyParams& params,
                                   const Group& group, const ClipConfig& clip,
                                   bool replay) {
  switch (algorithm) {
    case Algorithm::Grpo:
      return grpo_gradient(params, group, clip, replay);
    case Algorithm::Gspo:
      return gspo_gradient(params, group, clip, replay);
    case Algorithm::GspoToken:
      return gspo_token_gradient(params, group, clip, replay);
    case Algorithm::PpoClip:
      return ppo_clip_gradient(params, group.query, group.responses,
                               group.token_advantages, clip, replay);
  }
  throw StateError("unknown algorithm");
}

// Samples and scores one query's group under the frozen behavior policy.
Group rollout_group(const PolicyParams& old_params, const TaskSpec& task,
                    const TrainConfig& config,
                    const std::vector<TokenId>& query, int step,
                    int query_index) {
  Group group;
  group.query = query;
  group.responses.reserve(config.group_size);
  group.rewards.reserve(config.group_size);
  for (int r = 0; r < config.group_size; ++r) {
    ScoredResponse scored = sample_response(
        old_params, query, config.max_response_len,
        mix_seed(mix_seed(config.seed, kTagRollout, step), query_index, r));
    if (config.likelihood_noise_std > 0.0) {
      scored = apply_likelihood_noise(
          std::move(scored), config.likelihood_noise_std,
          mix_seed(mix_seed(config.seed, kTagNoise, step), query_index, r));
    }
    group.rewards.push_back(verify(task, query, scored.tokens));
    group.responses.push_back(std::move(scored));
  }
  group.advantages = group_advantages(group.rewards);
  if (algorithm_uses_token_advantages(config.algorithm)) {
    group.token_advantages.resize(group.responses.size());
    for (std::size_t i = 0; i < group.responses.size(); ++i)
      group.token_advantages[i].assign(group.responses[i].length(),
                                       group.advantages[i]);
  }
  return group;
}

}  // namespace

TrainResult run_training(const TrainConfig& config, const TaskSpec& task,
                         const PolicyConfig& policy_config,
                         const MinibatchHook& hook) {
  config.validate();
  policy_config.validate();
  task.validate_for(policy_config);
  const ClipConfig clip = config.effective_clip();

  TrainResult result;
  PolicyParams params = init_params(policy_config, mix_seed(config.seed, kTagInit));
  OptimizerState optimizer;
  PolicyParams last_good = params;
  OptimizerState last_good_opt = optimizer;

  QuerySet query_set;
  const int per_minibatch = config.queries_per_batch / config.minibatches_per_batch;

  for (int step = 0; step < config.steps; ++step) {
    if (step % config.query_refresh_period == 0) {
      query_set = generate_queries(
          task, config.queries_per_batch,
          mix_seed(config.seed, kTagQueries, step / config.query_refresh_period));
      query_set.refresh_period = config.query_refresh_period;
    }

    // Freeze the behavior policy for this rollout batch.
    const PolicyParams old_params = params;

    std::vector<Group> groups(config.queries_per_batch);
    const int threads =
        std::min(config.rollout_threads, config.queries_per_batch);
    if (threads <= 1) {
      for (int q = 0; q < config.queries_per_batch; ++q)
        groups[q] = rollout_group(old_params, task, config,
                                  query_set.queries[q], step, q);
    } else {
      // Per-query seeds make the result independent of the thread schedule.
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(threads);
      for (int w = 0; w < threads; ++w) {
        pool.emplace_back([&, w]() {
          try {
            for (int q = w; q < config.queries_per_batch; q += threads)
              groups[q] = rollout_group(old_params, task, config,
                                        query_set.queries[q], step, q);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
      for (auto& t : pool) t.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }

    double reward_sum = 0.0;
    std::size_t reward_count = 0;
    for (const Group& g : groups) {
      for (double r : g.rewards) reward_sum += r;
      reward_count += g.rewards.size();
    }
    const double step_mean_reward = reward_sum / static_cast<double>(reward_count);

    for (int mb = 0; mb < config.minibatches_per_batch; ++mb) {
      const auto start = std::chrono::steady_clock::now();
      const int lo = mb * per_minibatch;
      const int hi = lo + per_minibatch;

      std::vector<Group> batch(groups.begin() + lo, groups.begin() + hi);

      double flip_sum = 0.0;
      int flip_count = 0;
      for (Group& g : batch) {
        rescore_group(params, g, config.routing_replay);
        if (policy_config.is_moe()) {
          for (const ScoredResponse& r : g.responses) {
            flip_sum += expert_flip_rate(old_params, params, g.query, r.tokens,
                                         r.trace);
            ++flip_count;
          }
        }
      }

      const ParamLayout layout(policy_config);
      std::vector<double> gradient(layout.total_size(), 0.0);
      double objective_sum = 0.0;
      std::size_t tokens = 0, clipped_tokens = 0, sequences = 0,
                  clipped_sequences = 0;
      std::vector<double> seq_ratios;
      std::vector<double> token_ratios;

      bool numeric_failure = false;
      std::string failure_message;
      try {
        for (const Group& g : batch) {
          const ObjectiveResult obj =
              evaluate_objective(config.algorithm, g, clip);
          const GradientEstimate grad =
              evaluate_gradient(config.algorithm, params, g, clip,
                                config.routing_replay);
          objective_sum += obj.value;
          for (std::size_t j = 0; j < gradient.size(); ++j)
            gradient[j] += grad.vector[j];
          for (std::size_t i = 0; i < g.size(); ++i) {
            const auto& flags = obj.report.token_clipped[i];
            tokens += flags.size();
            for (char c : flags) clipped_tokens += (c != 0);
            clipped_sequences += (obj.report.response_clipped[i] != 0);
            ++sequences;
            seq_ratios.push_back(sequence_importance_ratio(g.responses[i]));
            for (std::size_t t = 0; t < g.responses[i].length(); ++t)
              token_ratios.push_back(std::exp(g.responses[i].new_log_probs[t] -
                                              g.responses[i].old_log_probs[t]));
          }
        }
      } catch (const NumericError& e) {
        numeric_failure = true;
        failure_message = e.what();
      }

      const double inv_batch = 1.0 / static_cast<double>(batch.size());
      for (double& gval : gradient) gval *= inv_batch;
      const double objective = objective_sum * inv_batch;

      if (!numeric_failure && !std::isfinite(objective)) {
        numeric_failure = true;
        failure_message = "objective value is non-finite";
      }
      if (!numeric_failure) {
        try {
          optimizer_step(optimizer, params, gradient, config.learning_rate,
                         config.optimizer);
        } catch (const NumericError& e) {
          numeric_failure = true;
          failure_message = e.what();
        }
      }
      if (!numeric_failure && !all_finite(params.values)) {
        numeric_failure = true;
        failure_message = "parameter vector is non-finite after the update";
      }

      if (numeric_failure) {
        result.diverged = true;
        result.divergence_message = "step " + std::to_string(step) +
                                    " minibatch " + std::to_string(mb) + ": " +
                                    failure_message;
        result.final_params = last_good;
        result.optimizer = last_good_opt;
        result.completed_steps = step;
        return result;
      }

      double grad_norm_sq = 0.0;
      for (double gval : gradient) grad_norm_sq += gval * gval;

      double seq_ratio_mean = 0.0;
      for (double s : seq_ratios) seq_ratio_mean += s;
      seq_ratio_mean /= static_cast<double>(seq_ratios.size());

      MetricsRecord record;
      record.step = step;
      record.minibatch = mb;
      record.mean_reward = step_mean_reward;
      record.objective_value = objective;
      record.grad_norm = std::sqrt(grad_norm_sq);
      record.clip_fraction_tokens =
          tokens == 0 ? 0.0 : static_cast<double>(clipped_tokens) / tokens;
      record.clip_fraction_sequences =
          sequences == 0 ? 0.0
                         : static_cast<double>(clipped_sequences) / sequences;
      record.mean_seq_ratio = seq_ratio_mean;
      record.token_ratio_variance = population_variance(token_ratios);
      if (policy_config.is_moe() && flip_count > 0)
        record.expert_flip_rate = flip_sum / flip_count;
      record.wall_time =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
              .count();

      result.metrics.push_back(record);
      if (hook) hook(MinibatchTrace{step, mb, lo, batch, record});

      last_good = params;
      last_good_opt = optimizer;
    }
    result.completed_steps = step + 1;
  }

  result.final_params = std::move(params);
  result.optimizer = std::move(optimizer);
  return result;
}

std::string to_string(Algorithm algorithm) {
  switch (algorithm) {
    case Algorithm::Grpo:
      return "grpo";
    case Algorithm::Gspo:
      return "gspo";
    case Algorithm::GspoToken:
      return "gspo_token";
    case Algorithm::PpoClip:
      return "ppo_clip";
  }
  return "unknown";
}

Algorithm algorithm_from_string(const std::string& name) {
  if (name == "grpo") return Algorithm::Grpo;
  if (name == "gspo") return Algorithm::Gspo;
  if (name == "gspo_token") return Algorithm::GspoToken;
  if (name == "ppo_clip") return Algorithm::PpoClip;
  throw ConfigError("unknown algorithm '" + name + "'");
}

std::string to_string(ClipLevel level) {
  return level == ClipLevel::Token ? "token" : "sequence";
}

ClipLevel clip_level_from_string(const std::string& name) {
  if (name == "token") return ClipLevel::Token;
  if (name == "sequence") return ClipLevel::Sequence;
  throw ConfigError("unknown clip level '" + name + "'");
}

}  // namespace seqpo
