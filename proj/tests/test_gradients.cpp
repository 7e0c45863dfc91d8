#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "seqpo/gradients.hpp"
#include "seqpo/rng.hpp"
#include "seqpo/trainer.hpp"

using namespace seqpo;

namespace {

bool close(double a, double b, double rtol, double atol = 0.0) {
  return std::abs(a - b) <= rtol * std::max(std::abs(a), std::abs(b)) + atol;
}

PolicyConfig dense_config(int vocab = 8, int hidden = 6) {
  PolicyConfig cfg;
  cfg.vocab_size = vocab;
  cfg.context_window = 8;
  cfg.hidden_dim = hidden;
  return cfg;
}

PolicyParams perturbed(const PolicyParams& params, double scale,
                       std::uint64_t seed) {
  PolicyParams out = params;
  Rng rng(seed);
  for (double& v : out.values) v += rng.uniform(-scale, scale);
  return out;
}

// Groups are sampled under old params and rescored under params.
Group sampled_group(const PolicyParams& old_params,
                    const PolicyParams& params, int group_size,
                    std::uint64_t seed, int max_len = 6) {
  Group g;
  g.query = {1, 4, 6};
  std::vector<double> rewards;
  for (int i = 0; i < group_size; ++i) {
    g.responses.push_back(
        sample_response(old_params, g.query, max_len, mix_seed(seed, i)));
    rewards.push_back(i % 2 == 0 ? 1.0 : 0.25 * i);
  }
  g.rewards = rewards;
  g.advantages = group_advantages(rewards);
  rescore_group(params, g);
  return g;
}

void broadcast_token_advantages(Group& g) {
  g.token_advantages.resize(g.size());
  for (std::size_t i = 0; i < g.size(); ++i)
    g.token_advantages[i].assign(g.responses[i].length(), g.advantages[i]);
}

std::vector<std::size_t> random_coords(std::size_t total, int n,
                                       std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> coords;
  for (int i = 0; i < n; ++i) coords.push_back(rng.below(total));
  return coords;
}

}  // namespace

TEST_CASE("finite differences recover simple derivatives") {
  PolicyParams params;
  params.config = dense_config(2, 1);
  params.values = {3.0, -1.5};

  SUBCASE("quadratic") {
    const auto quadratic = [](const PolicyParams& p) {
      return p.values[0] * p.values[0];
    };
    const std::vector<std::size_t> coords = {0};
    const auto fd = finite_difference_gradient(quadratic, params, coords, 1e-5);
    CHECK(std::abs(fd[0] - 6.0) < 1e-8);
  }

  SUBCASE("linear") {
    const auto linear = [](const PolicyParams& p) {
      return 2.0 * p.values[0] - 7.0 * p.values[1];
    };
    const std::vector<std::size_t> coords = {0, 1};
    const auto fd = finite_difference_gradient(linear, params, coords, 1e-5);
    CHECK(std::abs(fd[0] - 2.0) < 1e-10);
    CHECK(std::abs(fd[1] + 7.0) < 1e-10);
  }

  SUBCASE("nonpositive step is rejected") {
    const auto f = [](const PolicyParams&) { return 0.0; };
    const std::vector<std::size_t> coords = {0};
    CHECK_THROWS_AS(finite_difference_gradient(f, params, coords, 0.0),
                    InputError);
  }
}

TEST_CASE("gspo gradient matches finite differences away from the boundary") {
  const PolicyParams old_params = init_params(dense_config(), 100);
  const PolicyParams params = perturbed(old_params, 0.02, 101);
  const Group group = sampled_group(old_params, params, 4, 500);
  const ClipConfig wide{0.5, 0.5, ClipLevel::Sequence};

  const GradientEstimate grad = gspo_gradient(params, group, wide);
  const auto objective = [&](const PolicyParams& p) {
    Group probe = group;
    rescore_group(p, probe);
    return gspo_objective(probe, wide).value;
  };
  const auto coords = random_coords(params.values.size(), 80, 9);
  const auto fd = finite_difference_gradient(objective, params, coords, 1e-5);
  for (std::size_t k = 0; k < coords.size(); ++k)
    CHECK(close(grad.vector[coords[k]], fd[k], 1e-4, 1e-8));
}

TEST_CASE("grpo gradient matches finite differences away from the boundary") {
  const PolicyParams old_params = init_params(dense_config(), 200);
  const PolicyParams params = perturbed(old_params, 0.02, 201);
  const Group group = sampled_group(old_params, params, 4, 600);
  const ClipConfig wide{0.5, 0.5, ClipLevel::Token};

  const GradientEstimate grad = grpo_gradient(params, group, wide);
  const auto objective = [&](const PolicyParams& p) {
    Group probe = group;
    rescore_group(p, probe);
    return grpo_objective(probe, wide).value;
  };
  const auto coords = random_coords(params.values.size(), 80, 10);
  const auto fd = finite_difference_gradient(objective, params, coords, 1e-5);
  for (std::size_t k = 0; k < coords.size(); ++k)
    CHECK(close(grad.vector[coords[k]], fd[k], 1e-4, 1e-8));
}

TEST_CASE("gspo-token gradient matches finite differences away from the boundary") {
  const PolicyParams old_params = init_params(dense_config(), 300);
  const PolicyParams params = perturbed(old_params, 0.02, 301);
  Group group = sampled_group(old_params, params, 4, 700);
  group.token_advantages.resize(group.size());
  Rng rng(44);
  for (std::size_t i = 0; i < group.size(); ++i) {
    group.token_advantages[i].resize(group.responses[i].length());
    for (double& a : group.token_advantages[i]) a = rng.uniform(-1.5, 1.5);
  }
  const ClipConfig wide{0.5, 0.5, ClipLevel::Sequence};

  const GradientEstimate grad = gspo_token_gradient(params, group, wide);

  // The objective contains stop-gradients: s_{i,t} carries the numeric value
  // of s_i but only the current token's likelihood passes gradient. The
  // finite-difference oracle must realize that construction explicitly:
  // s_{i,t}(p) = s_i(base) * pi_p(y_t) / pi_base(y_t), with everything inside
  // the stop-gradient frozen at the base parameters.
  const Group base = group;
  const auto objective = [&](const PolicyParams& p) {
    Group probe = group;
    rescore_group(p, probe);
    double total = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
      const double frozen_s = sequence_importance_ratio(base.responses[i]);
      const std::size_t len = probe.responses[i].length();
      double inner = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const double s_it =
            frozen_s * std::exp(probe.responses[i].new_log_probs[t] -
                                base.responses[i].new_log_probs[t]);
        const double adv = probe.token_advantages[i][t];
        const double clipped = std::min(std::max(s_it, 0.5), 1.5);
        inner += std::min(s_it * adv, clipped * adv);
      }
      total += inner / static_cast<double>(len);
    }
    return total / static_cast<double>(probe.size());
  };

  // at the base point the frozen objective equals the implemented one
  CHECK(close(objective(params), gspo_token_objective(group, wide).value,
              1e-12, 1e-15));

  const auto coords = random_coords(params.values.size(), 80, 11);
  const auto fd = finite_difference_gradient(objective, params, coords, 1e-5);
  for (std::size_t k = 0; k < coords.size(); ++k)
    CHECK(close(grad.vector[coords[k]], fd[k], 1e-4, 1e-8));
}

TEST_CASE("zero advantages give a zero gradient vector") {
  const PolicyParams old_params = init_params(dense_config(), 400);
  const PolicyParams params = perturbed(old_params, 0.02, 401);
  Group group = sampled_group(old_params, params, 4, 800);
  group.advantages.assign(group.size(), 0.0);
  broadcast_token_advantages(group);

  for (const GradientEstimate& estimate :
       {gspo_gradient(params, group, ClipConfig{3e-4, 4e-4, ClipLevel::Sequence}),
        grpo_gradient(params, group, ClipConfig{0.2, 0.27, ClipLevel::Token}),
        gspo_token_gradient(params, group,
                            ClipConfig{3e-4, 4e-4, ClipLevel::Sequence})}) {
    for (double v : estimate.vector) CHECK(v == 0.0);
  }
}

TEST_CASE("single on-policy response reduces to the scaled score gradient") {
  const PolicyParams params = init_params(dense_config(), 123);
  Group group;
  group.query = {2, 3};
  group.responses.push_back(sample_response(params, group.query, 6, 77));
  group.rewards = {1.0};
  group.advantages = {1.0};
  rescore_group(params, group);

  const GradientEstimate grad =
      gspo_gradient(params, group, ClipConfig{3e-4, 4e-4, ClipLevel::Sequence});
  const std::vector<double> score_grad =
      grad_sequence_log_prob(params, group.query, group.responses[0].tokens);
  const double len = static_cast<double>(group.responses[0].length());
  for (std::size_t j = 0; j < grad.vector.size(); ++j)
    CHECK(close(grad.vector[j], score_grad[j] / len, 1e-12, 1e-15));
}

TEST_CASE("all algorithms coincide at theta = theta_old") {
  const PolicyParams params = init_params(dense_config(), 888);
  Group group = sampled_group(params, params, 6, 900);
  broadcast_token_advantages(group);

  const GradientEstimate gspo =
      gspo_gradient(params, group, ClipConfig{3e-4, 4e-4, ClipLevel::Sequence});
  const GradientEstimate grpo =
      grpo_gradient(params, group, ClipConfig{0.2, 0.27, ClipLevel::Token});
  const GradientEstimate gspo_token = gspo_token_gradient(
      params, group, ClipConfig{3e-4, 4e-4, ClipLevel::Sequence});
  const GradientEstimate ppo =
      ppo_clip_gradient(params, group.query, group.responses,
                        group.token_advantages,
                        ClipConfig{0.2, 0.27, ClipLevel::Token});

  for (std::size_t j = 0; j < gspo.vector.size(); ++j) {
    CHECK(std::abs(gspo.vector[j] - grpo.vector[j]) <= 1e-12);
    CHECK(std::abs(gspo.vector[j] - gspo_token.vector[j]) <= 1e-12);
    CHECK(std::abs(gspo.vector[j] - ppo.vector[j]) <= 1e-12);
  }
}

TEST_CASE("surviving grpo token weights stay within the clip-bounded range") {
  const PolicyParams old_params = init_params(dense_config(), 555);
  const PolicyParams params = init_params(dense_config(), 556);
  const Group group = sampled_group(old_params, params, 6, 1000);
  const ClipConfig clip{0.2, 0.27, ClipLevel::Token};
  const GradientEstimate grad = grpo_gradient(params, group, clip);

  bool saw_positive = false, saw_negative = false;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const double adv = group.advantages[i];
    if (adv == 0.0) continue;
    const double len = static_cast<double>(group.responses[i].length());
    for (double c : grad.token_weights[i]) {
      if (c == 0.0) continue;  // clipped out
      const double w = c * len / adv;
      if (adv > 0.0) {
        saw_positive = true;
        CHECK(w > 0.0);
        CHECK(w <= 1.27 + 1e-12);
      } else {
        saw_negative = true;
        CHECK(w >= 0.8 - 1e-12);
      }
    }
  }
  CHECK(saw_positive);
  CHECK(saw_negative);
}

TEST_CASE("gspo-token gradient with broadcast advantages equals gspo") {
  const PolicyParams old_params = init_params(dense_config(), 61);
  const PolicyParams params = perturbed(old_params, 0.05, 62);
  Group group = sampled_group(old_params, params, 5, 1100);
  broadcast_token_advantages(group);
  const ClipConfig clip{3e-4, 4e-4, ClipLevel::Sequence};

  const GradientEstimate a = gspo_gradient(params, group, clip);
  const GradientEstimate b = gspo_token_gradient(params, group, clip);
  REQUIRE(a.vector.size() == b.vector.size());
  for (std::size_t j = 0; j < a.vector.size(); ++j)
    CHECK(std::abs(a.vector[j] - b.vector[j]) <= 1e-12);
}

TEST_CASE("one nonzero token advantage isolates one token's gradient") {
  const PolicyParams params = init_params(dense_config(), 21);
  Group group;
  group.query = {3, 5};
  group.responses.push_back(sample_response(params, group.query, 6, 5));
  group.responses.push_back(sample_response(params, group.query, 6, 6));
  group.rewards = {1.0, 0.0};
  group.advantages = {1.0, -1.0};
  rescore_group(params, group);
  group.token_advantages.resize(2);
  group.token_advantages[0].assign(group.responses[0].length(), 0.0);
  group.token_advantages[1].assign(group.responses[1].length(), 0.0);
  const std::size_t target = group.responses[0].length() / 2;
  group.token_advantages[0][target] = 2.0;

  const ClipConfig wide{0.5, 0.5, ClipLevel::Sequence};
  const GradientEstimate grad = gspo_token_gradient(params, group, wide);

  // expected: s_i * 2.0 / (G * |y_0|) times that token's score gradient
  const double s = sequence_importance_ratio(group.responses[0]);
  std::vector<double> weights(group.responses[0].length(), 0.0);
  weights[target] = 1.0;
  const std::vector<double> token_grad = weighted_grad_log_prob(
      params, group.query, group.responses[0].tokens, weights);
  const double scale =
      s * 2.0 / (2.0 * static_cast<double>(group.responses[0].length()));
  for (std::size_t j = 0; j < grad.vector.size(); ++j)
    CHECK(close(grad.vector[j], scale * token_grad[j], 1e-12, 1e-15));
}

TEST_CASE("clipped items contribute exactly zero") {
  const PolicyParams old_params = init_params(dense_config(), 71);
  const PolicyParams params = init_params(dense_config(), 72);

  SUBCASE("gspo: responses clipped by a razor-thin band") {
    const Group group = sampled_group(old_params, params, 4, 1200);
    const ClipConfig clip{1e-6, 1e-6, ClipLevel::Sequence};
    const ObjectiveResult obj = gspo_objective(group, clip);
    const GradientEstimate grad = gspo_gradient(params, group, clip);
    bool found_clipped = false;
    for (std::size_t i = 0; i < group.size(); ++i) {
      if (!obj.report.response_clipped[i]) continue;
      found_clipped = true;
      CHECK(grad.per_response_weight[i] == 0.0);
      for (double c : grad.token_weights[i]) CHECK(c == 0.0);
    }
    REQUIRE(found_clipped);

    // removing the clipped responses' contributions changes nothing
    std::vector<double> rebuilt(grad.vector.size(), 0.0);
    for (std::size_t i = 0; i < group.size(); ++i) {
      if (obj.report.response_clipped[i]) continue;
      const auto contribution = weighted_grad_log_prob(
          params, group.query, group.responses[i].tokens,
          grad.token_weights[i]);
      for (std::size_t j = 0; j < rebuilt.size(); ++j)
        rebuilt[j] += contribution[j];
    }
    for (double& v : rebuilt) v /= static_cast<double>(group.size());
    for (std::size_t j = 0; j < rebuilt.size(); ++j)
      CHECK(close(grad.vector[j], rebuilt[j], 1e-12, 1e-15));
  }

  SUBCASE("grpo: clipped tokens have zero coefficients") {
    const Group group = sampled_group(old_params, params, 4, 1300);
    const ClipConfig clip{1e-6, 1e-6, ClipLevel::Token};
    const ObjectiveResult obj = grpo_objective(group, clip);
    const GradientEstimate grad = grpo_gradient(params, group, clip);
    bool found_clipped = false;
    for (std::size_t i = 0; i < group.size(); ++i) {
      for (std::size_t t = 0; t < group.responses[i].length(); ++t) {
        if (obj.report.token_clipped[i][t]) {
          found_clipped = true;
          CHECK(grad.token_weights[i][t] == 0.0);
        }
      }
    }
    REQUIRE(found_clipped);
  }
}

TEST_CASE("gspo weights all tokens of a response equally") {
  const PolicyParams old_params = init_params(dense_config(), 91);
  const PolicyParams params = perturbed(old_params, 0.03, 92);
  const Group group = sampled_group(old_params, params, 5, 1400);
  const ClipConfig clip{0.3, 0.3, ClipLevel::Sequence};
  const GradientEstimate grad = gspo_gradient(params, group, clip);

  for (std::size_t i = 0; i < group.size(); ++i) {
    for (double c : grad.token_weights[i])
      CHECK(c == grad.per_response_weight[i]);
  }

  // reconstruction: vector = (1/G) sum_i weight_i * grad_sequence_log_prob_i
  std::vector<double> rebuilt(grad.vector.size(), 0.0);
  for (std::size_t i = 0; i < group.size(); ++i) {
    if (grad.per_response_weight[i] == 0.0) continue;
    const std::vector<double> seq_grad = grad_sequence_log_prob(
        params, group.query, group.responses[i].tokens);
    for (std::size_t j = 0; j < rebuilt.size(); ++j)
      rebuilt[j] += grad.per_response_weight[i] * seq_grad[j];
  }
  for (double& v : rebuilt) v /= static_cast<double>(group.size());
  for (std::size_t j = 0; j < rebuilt.size(); ++j)
    CHECK(close(grad.vector[j], rebuilt[j], 1e-11, 1e-14));
}

TEST_CASE("unscored groups are rejected") {
  const PolicyParams params = init_params(dense_config(), 31);
  Group group;
  group.query = {1};
  group.responses.push_back(sample_response(params, group.query, 4, 1));
  group.responses.push_back(sample_response(params, group.query, 4, 2));
  group.rewards = {1.0, 0.0};
  group.advantages = group_advantages(group.rewards);
  CHECK_THROWS_AS(
      gspo_gradient(params, group, ClipConfig{3e-4, 4e-4, ClipLevel::Sequence}),
      StateError);
}
