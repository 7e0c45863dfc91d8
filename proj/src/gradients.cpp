#include "seqpo/gradients.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace seqpo {

namespace {

// Shared accumulator: vector = (1/G) sum_i sum_t coeffs[i][t] grad log pi.
// Responses whose coefficients are all zero are skipped entirely; a skipped
// response adds exact zeros, so the result is unchanged.
GradientEstimate accumulate(const PolicyParams& params,
                            std::span<const TokenId> query,
                            const std::vector<ScoredResponse>& responses,
                            std::vector<std::vector<double>> coeffs,
                            std::vector<double> per_response_weight,
                            bool replay_routing) {
  const ParamLayout layout(params.config);
  GradientEstimate estimate;
  estimate.vector.assign(layout.total_size(), 0.0);
  estimate.per_response_weight = std::move(per_response_weight);

  for (std::size_t i = 0; i < responses.size(); ++i) {
    const ScoredResponse& response = responses[i];
    const bool all_zero =
        std::all_of(coeffs[i].begin(), coeffs[i].end(),
                    [](double c) { return c == 0.0; });
    if (all_zero) continue;
    const RoutingTrace* trace =
        (replay_routing && !response.trace.empty()) ? &response.trace : nullptr;
    const std::vector<double> contribution = weighted_grad_log_prob(
        params, query, response.tokens, coeffs[i], trace);
    for (std::size_t j = 0; j < contribution.size(); ++j)
      estimate.vector[j] += contribution[j];
  }

  const double inv_g = 1.0 / static_cast<double>(responses.size());
  for (double& v : estimate.vector) v *= inv_g;
  estimate.token_weights = std::move(coeffs);
  return estimate;
}

}  // namespace

GradientEstimate gspo_gradient(const PolicyParams& params, const Group& group,
                               const ClipConfig& clip, bool replay_routing) {
  const ObjectiveResult objective = gspo_objective(group, clip);

  std::vector<std::vector<double>> coeffs(group.size());
  std::vector<double> response_weight(group.size(), 0.0);
  for (std::size_t i = 0; i < group.size(); ++i) {
    const std::size_t len = group.responses[i].length();
    coeffs[i].assign(len, 0.0);
    if (objective.report.response_clipped[i]) continue;
    const double s = sequence_importance_ratio(group.responses[i]);
    const double c =
        s * group.advantages[i] / static_cast<double>(len);
    response_weight[i] = c;
    std::fill(coeffs[i].begin(), coeffs[i].end(), c);
  }
  return accumulate(params, group.query, group.responses, std::move(coeffs),
                    std::move(response_weight), replay_routing);
}

GradientEstimate grpo_gradient(const PolicyParams& params, const Group& group,
                               const ClipConfig& clip, bool replay_routing) {
  const ObjectiveResult objective = grpo_objective(group, clip);
  const auto ratios = token_importance_ratios(group);

  std::vector<std::vector<double>> coeffs(group.size());
  std::vector<double> response_weight(group.size(), 0.0);
  for (std::size_t i = 0; i < group.size(); ++i) {
    const std::size_t len = group.responses[i].length();
    const double adv = group.advantages[i];
    response_weight[i] = adv / static_cast<double>(len);
    coeffs[i].assign(len, 0.0);
    for (std::size_t t = 0; t < len; ++t) {
      if (objective.report.token_clipped[i][t]) continue;
      coeffs[i][t] = ratios[i][t] * adv / static_cast<double>(len);
    }
  }
  return accumulate(params, group.query, group.responses, std::move(coeffs),
                    std::move(response_weight), replay_routing);
}

GradientEstimate gspo_token_gradient(const PolicyParams& params,
                                     const Group& group, const ClipConfig& clip,
                                     bool replay_routing) {
  const ObjectiveResult objective = gspo_token_objective(group, clip);

  std::vector<std::vector<double>> coeffs(group.size());
  std::vector<double> response_weight(group.size(), 0.0);
  for (std::size_t i = 0; i < group.size(); ++i) {
    const std::size_t len = group.responses[i].length();
    const double s = sequence_importance_ratio(group.responses[i]);
    response_weight[i] = s / static_cast<double>(len);
    coeffs[i].assign(len, 0.0);
    for (std::size_t t = 0; t < len; ++t) {
      if (objective.report.token_clipped[i][t]) continue;
      coeffs[i][t] =
          s * group.token_advantages[i][t] / static_cast<double>(len);
    }
  }
  return accumulate(params, group.query, group.responses, std::move(coeffs),
                    std::move(response_weight), replay_routing);
}

GradientEstimate ppo_clip_gradient(
    const PolicyParams& params, std::span<const TokenId> query,
    const std::vector<ScoredResponse>& responses,
    const std::vector<std::vector<double>>& advantages, const ClipConfig& clip,
    bool replay_routing) {
  const ObjectiveResult objective =
      ppo_clip_objective(responses, advantages, clip);

  std::vector<std::vector<double>> coeffs(responses.size());
  std::vector<double> response_weight(responses.size(), 0.0);
  for (std::size_t i = 0; i < responses.size(); ++i) {
    const ScoredResponse& r = responses[i];
    const std::size_t len = r.length();
    response_weight[i] = 1.0 / static_cast<double>(len);
    coeffs[i].assign(len, 0.0);
    for (std::size_t t = 0; t < len; ++t) {
      if (objective.report.token_clipped[i][t]) continue;
      const double w = std::exp(r.new_log_probs[t] - r.old_log_probs[t]);
      coeffs[i][t] = w * advantages[i][t] / static_cast<double>(len);
    }
  }
  return accumulate(params, query, responses, std::move(coeffs),
                    std::move(response_weight), replay_routing);
}

std::vector<double> finite_difference_gradient(
    const std::function<double(const PolicyParams&)>& objective,
    const PolicyParams& params, std::span<const std::size_t> coords,
    double step) {
  if (step <= 0.0) throw InputError("finite difference step must be positive");
  std::vector<double> result;
  result.reserve(coords.size());
  PolicyParams probe = params;
  for (std::size_t j : coords) {
    if (j >= probe.values.size())
      throw InputError("coordinate " + std::to_string(j) +
                       " outside the parameter vector");
    const double original = probe.values[j];
    probe.values[j] = original + step;
    const double up = objective(probe);
    probe.values[j] = original - step;
    const double down = objective(probe);
    probe.values[j] = original;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("objective is non-finite near coordinate " +
                         std::to_string(j));
    result.push_back((up - down) / (2.0 * step));
  }
  return result;
}

}  // namespace seqpo
