#include "seqpo/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace seqpo {

namespace {

constexpr double kDegenerateStd = 1e-8;

void require_scored(const Group& group) {
  if (group.responses.empty()) throw InputError("group has no responses");
  for (const ScoredResponse& r : group.responses) {
    if (r.tokens.empty()) throw InputError("group contains an empty response");
    if (r.old_log_probs.size() != r.tokens.size())
      throw StateError("response is missing old-policy scores");
    if (!r.has_new_scores())
      throw StateError("response is missing current-policy scores");
  }
}

void require_advantages(const Group& group) {
  if (group.advantages.size() != group.responses.size())
    throw StateError("group advantages are not populated");
}

double clip_to(double x, double lo, double hi) {
  return std::min(std::max(x, lo), hi);
}

bool clip_binds(double ratio, double advantage, const ClipConfig& clip) {
  if (advantage > 0.0) return ratio > clip.high();
  if (advantage < 0.0) return ratio < clip.low();
  return false;
}

}  // namespace

void ClipConfig::validate() const {
  if (left < 0.0 || right < 0.0)
    throw ConfigError("clip offsets must be nonnegative");
  if (left >= 1.0) throw ConfigError("clip.left must be < 1");
}

void ClipReport::finalize() {
  std::size_t tokens = 0, clipped_tokens = 0, clipped_responses = 0;
  for (std::size_t i = 0; i < token_clipped.size(); ++i) {
    tokens += token_clipped[i].size();
    for (char c : token_clipped[i]) clipped_tokens += (c != 0);
    clipped_responses += (response_clipped[i] != 0);
  }
  token_fraction =
      tokens == 0 ? 0.0 : static_cast<double>(clipped_tokens) / tokens;
  sequence_fraction = response_clipped.empty()
                          ? 0.0
                          : static_cast<double>(clipped_responses) /
                                response_clipped.size();
}

std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2)
    throw InputError("group_advantages requires at least 2 rewards");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= n;
  const double std_dev = std::sqrt(var);

  std::vector<double> advantages(rewards.size(), 0.0);
  if (std_dev < kDegenerateStd) return advantages;
  for (std::size_t i = 0; i < rewards.size(); ++i)
    advantages[i] = (rewards[i] - mean) / std_dev;
  return advantages;
}

std::vector<std::vector<double>> token_importance_ratios(const Group& group) {
  require_scored(group);
  std::vector<std::vector<double>> ratios(group.size());
  for (std::size_t i = 0; i < group.size(); ++i) {
    const ScoredResponse& r = group.responses[i];
    ratios[i].resize(r.length());
    for (std::size_t t = 0; t < r.length(); ++t)
      ratios[i][t] = std::exp(r.new_log_probs[t] - r.old_log_probs[t]);
  }
  return ratios;
}

double sequence_importance_ratio(const ScoredResponse& response) {
  if (response.tokens.empty())
    throw InputError("sequence_importance_ratio requires a nonempty response");
  if (response.old_log_probs.size() != response.tokens.size())
    throw StateError("response is missing old-policy scores");
  if (!response.has_new_scores())
    throw StateError("response is missing current-policy scores");
  double sum = 0.0;
  for (std::size_t t = 0; t < response.tokens.size(); ++t)
    sum += response.new_log_probs[t] - response.old_log_probs[t];
  return std::exp(sum / static_cast<double>(response.tokens.size()));
}

ObjectiveResult grpo_objective(const Group& group, const ClipConfig& clip) {
  clip.validate();
  if (clip.level != ClipLevel::Token)
    throw ConfigError("grpo_objective requires token-level clipping");
  require_scored(group);
  require_advantages(group);

  const auto ratios = token_importance_ratios(group);
  ObjectiveResult result;
  result.report.response_clipped.assign(group.size(), 0);
  result.report.token_clipped.resize(group.size());

  double total = 0.0;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const double adv = group.advantages[i];
    const std::size_t len = group.responses[i].length();
    auto& flags = result.report.token_clipped[i];
    flags.assign(len, 0);
    double inner = 0.0;
    bool all_clipped = true;
    for (std::size_t t = 0; t < len; ++t) {
      const double w = ratios[i][t];
      inner += std::min(w * adv, clip_to(w, clip.low(), clip.high()) * adv);
      const bool clipped = clip_binds(w, adv, clip);
      flags[t] = clipped ? 1 : 0;
      all_clipped = all_clipped && clipped;
    }
    result.report.response_clipped[i] = all_clipped ? 1 : 0;
    total += inner / static_cast<double>(len);
  }
  result.value = total / static_cast<double>(group.size());
  result.report.finalize();
  return result;
}

ObjectiveResult gspo_objective(const Group& group, const ClipConfig& clip) {
  clip.validate();
  if (clip.level != ClipLevel::Sequence)
    throw ConfigError("gspo_objective requires sequence-level clipping");
  require_scored(group);
  require_advantages(group);

  ObjectiveResult result;
  result.report.response_clipped.assign(group.size(), 0);
  result.report.token_clipped.resize(group.size());

  double total = 0.0;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const double adv = group.advantages[i];
    const double s = sequence_importance_ratio(group.responses[i]);
    total += std::min(s * adv, clip_to(s, clip.low(), clip.high()) * adv);
    const bool clipped = clip_binds(s, adv, clip);
    result.report.response_clipped[i] = clipped ? 1 : 0;
    // A clipped response counts all of its tokens as clipped so token
    // fractions stay comparable with token-level algorithms.
    result.report.token_clipped[i].assign(group.responses[i].length(),
                                          clipped ? 1 : 0);
  }
  result.value = total / static_cast<double>(group.size());
  result.report.finalize();
  return result;
}

ObjectiveResult gspo_token_objective(const Group& group,
                                     const ClipConfig& clip) {
  clip.validate();
  if (clip.level != ClipLevel::Sequence)
    throw ConfigError("gspo_token_objective requires sequence-level clipping");
  require_scored(group);
  if (group.token_advantages.size() != group.responses.size())
    throw InputError("token advantage matrix does not match group size");
  for (std::size_t i = 0; i < group.size(); ++i)
    if (group.token_advantages[i].size() != group.responses[i].length())
      throw InputError("token advantage row " + std::to_string(i) +
                       " does not match response length");

  ObjectiveResult result;
  result.report.response_clipped.assign(group.size(), 0);
  result.report.token_clipped.resize(group.size());

  double total = 0.0;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const double s = sequence_importance_ratio(group.responses[i]);
    const std::size_t len = group.responses[i].length();
    auto& flags = result.report.token_clipped[i];
    flags.assign(len, 0);
    double inner = 0.0;
    bool all_clipped = true;
    for (std::size_t t = 0; t < len; ++t) {
      const double adv = group.token_advantages[i][t];
      inner += std::min(s * adv, clip_to(s, clip.low(), clip.high()) * adv);
      const bool clipped = clip_binds(s, adv, clip);
      flags[t] = clipped ? 1 : 0;
      all_clipped = all_clipped && clipped;
    }
    result.report.response_clipped[i] = all_clipped ? 1 : 0;
    total += inner / static_cast<double>(len);
  }
  result.value = total / static_cast<double>(group.size());
  result.report.finalize();
  return result;
}

ObjectiveResult ppo_clip_objective(
    const std::vector<ScoredResponse>& responses,
    const std::vector<std::vector<double>>& advantages,
    const ClipConfig& clip) {
  clip.validate();
  if (clip.level != ClipLevel::Token)
    throw ConfigError("ppo_clip_objective requires token-level clipping");
  if (responses.empty()) throw InputError("ppo_clip_objective needs responses");
  if (advantages.size() != responses.size())
    throw InputError("advantage matrix does not match response count");

  ObjectiveResult result;
  result.report.response_clipped.assign(responses.size(), 0);
  result.report.token_clipped.resize(responses.size());

  double total = 0.0;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    const ScoredResponse& r = responses[i];
    if (r.tokens.empty()) throw InputError("empty response in ppo_clip_objective");
    if (r.old_log_probs.size() != r.tokens.size() || !r.has_new_scores())
      throw StateError("response is missing scores");
    if (advantages[i].size() != r.length())
      throw InputError("advantage row " + std::to_string(i) +
                       " does not match response length");
    auto& flags = result.report.token_clipped[i];
    flags.assign(r.length(), 0);
    double inner = 0.0;
    bool all_clipped = true;
    for (std::size_t t = 0; t < r.length(); ++t) {
      const double w = std::exp(r.new_log_probs[t] - r.old_log_probs[t]);
      const double adv = advantages[i][t];
      inner += std::min(w * adv, clip_to(w, clip.low(), clip.high()) * adv);
      const bool clipped = clip_binds(w, adv, clip);
      flags[t] = clipped ? 1 : 0;
      all_clipped = all_clipped && clipped;
    }
    result.report.response_clipped[i] = all_clipped ? 1 : 0;
    total += inner / static_cast<double>(r.length());
  }
  result.value = total / static_cast<double>(responses.size());
  result.report.finalize();
  return result;
}

double importance_sampling_estimate(std::span<const double> f,
                                    std::span<const double> target_log_probs,
                                    std::span<const double> behavior_log_probs,
                                    std::span<const int> samples) {
  if (f.size() != target_log_probs.size() ||
      f.size() != behavior_log_probs.size())
    throw InputError("outcome vectors must share one length");
  if (samples.empty()) throw InputError("at least one sample is required");

  double total = 0.0;
  for (int z : samples) {
    if (z < 0 || static_cast<std::size_t>(z) >= f.size())
      throw InputError("sample outcome index out of range");
    if (!std::isfinite(behavior_log_probs[z]) ||
        std::exp(behavior_log_probs[z]) == 0.0)
      throw InputError("behavior probability is zero for a sampled outcome");
    total += f[z] * std::exp(target_log_probs[z] - behavior_log_probs[z]);
  }
  return total / static_cast<double>(samples.size());
}

}  // namespace seqpo
