#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "seqpo/objectives.hpp"
#include "seqpo/policy.hpp"

namespace seqpo {

// Analytic gradient of a surrogate objective, in parameter layout.
// token_weights[i][t] is the coefficient on grad log pi(y_{i,t}|.) before the
// 1/G average; per_response_weight[i] is the per-response prefactor shared by
// the response's tokens (for the token-ratio algorithms it is the part that
// does not vary with t).
struct GradientEstimate {
  std::vector<double> vector;
  std::vector<double> per_response_weight;
  std::vector<std::vector<double>> token_weights;
};

// Gradient of gspo_objective: clipped responses contribute exactly zero;
// every surviving token in a response shares the same coefficient
// s_i * A_i / |y_i|.
GradientEstimate gspo_gradient(const PolicyParams& params, const Group& group,
                               const ClipConfig& clip,
                               bool replay_routing = false);

// Gradient of grpo_objective: token (i, t) carries coefficient
// A_i * w_{i,t} / |y_i| and clipped tokens contribute zero.
GradientEstimate grpo_gradient(const PolicyParams& params, const Group& group,
                               const ClipConfig& clip,
                               bool replay_routing = false);

// Gradient of gspo_token_objective in closed form: token (i, t) carries
// s_i * A_{i,t} / |y_i| with per-token clip masking.
GradientEstimate gspo_token_gradient(const PolicyParams& params,
                                     const Group& group,
                                     const ClipConfig& clip,
                                     bool replay_routing = false);

// Gradient of ppo_clip_objective with caller-supplied per-token advantages.
GradientEstimate ppo_clip_gradient(
    const PolicyParams& params, std::span<const TokenId> query,
    const std::vector<ScoredResponse>& responses,
    const std::vector<std::vector<double>>& advantages, const ClipConfig& clip,
    bool replay_routing = false);

// Central differences (f(x + h e_j) - f(x - h e_j)) / 2h at the requested
// coordinates; the verification oracle for the analytic estimators above.
std::vector<double> finite_difference_gradient(
    const std::function<double(const PolicyParams&)>& objective,
    const PolicyParams& params, std::span<const std::size_t> coords,
    double step);

}  // namespace seqpo
