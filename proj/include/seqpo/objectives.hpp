#pragma once

#include <span>
#include <vector>

#include "seqpo/policy.hpp"

namespace seqpo {

enum class ClipLevel { Token, Sequence };

// Asymmetric clip interval [1 - left, 1 + right] applied at the token or
// sequence level depending on the objective.
struct ClipConfig {
  double left = 0.2;
  double right = 0.27;
  ClipLevel level = ClipLevel::Token;

  double low() const { return 1.0 - left; }
  double high() const { return 1.0 + right; }
  void validate() const;
};

// Per-item clip bookkeeping. A token or response counts as clipped only when
// the clipped branch of the min is strictly smaller, i.e. clipping actually
// removes it from gradient flow given the advantage sign.
struct ClipReport {
  std::vector<char> response_clipped;
  std::vector<std::vector<char>> token_clipped;
  double token_fraction = 0.0;
  double sequence_fraction = 0.0;

  void finalize();  // recomputes the aggregate fractions from the flags
};

// G responses to one query, with rewards and group-relative advantages.
struct Group {
  std::vector<TokenId> query;
  std::vector<ScoredResponse> responses;
  std::vector<double> rewards;
  std::vector<double> advantages;                      // per response
  std::vector<std::vector<double>> token_advantages;   // per response x token

  std::size_t size() const { return responses.size(); }
};

// (r_i - mean) / population std; all zeros when the std is below 1e-8.
std::vector<double> group_advantages(std::span<const double> rewards);

// w_{i,t} = exp(new_logp - old_logp), elementwise.
std::vector<std::vector<double>> token_importance_ratios(const Group& group);

// Length-normalized sequence ratio s_i = exp(mean_t(new_logp - old_logp)).
double sequence_importance_ratio(const ScoredResponse& response);

struct ObjectiveResult {
  double value = 0.0;
  ClipReport report;
};

ObjectiveResult grpo_objective(const Group& group, const ClipConfig& clip);
ObjectiveResult gspo_objective(const Group& group, const ClipConfig& clip);
ObjectiveResult gspo_token_objective(const Group& group, const ClipConfig& clip);

// PPO with caller-supplied per-token advantages (no value model).
ObjectiveResult ppo_clip_objective(
    const std::vector<ScoredResponse>& responses,
    const std::vector<std::vector<double>>& advantages, const ClipConfig& clip);

// (1/N) sum_n f[z_n] * p_target(z_n) / p_behavior(z_n) over a finite outcome
// space; f, target_log_probs and behavior_log_probs are indexed by outcome.
double importance_sampling_estimate(std::span<const double> f,
                                    std::span<const double> target_log_probs,
                                    std::span<const double> behavior_log_probs,
                                    std::span<const int> samples);

}  // namespace seqpo
