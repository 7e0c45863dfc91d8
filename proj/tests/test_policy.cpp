#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "seqpo/gradients.hpp"
#include "seqpo/policy.hpp"
#include "seqpo/rng.hpp"

using namespace seqpo;

namespace {

bool close(double a, double b, double rtol, double atol = 0.0) {
  return std::abs(a - b) <= rtol * std::max(std::abs(a), std::abs(b)) + atol;
}

// Straightforward reimplementation of the documented forward pass, kept
// independent of the library code path. Also exposes the per-layer router
// scores so routing tests can reason about margins.
struct OracleResult {
  std::vector<double> log_probs;
  std::vector<std::vector<double>> router_scores;  // per MoE layer
  std::vector<std::vector<int>> chosen;            // per MoE layer
};

OracleResult oracle_forward(const PolicyParams& params,
                            const std::vector<TokenId>& prefix) {
  const PolicyConfig& cfg = params.config;
  const ParamLayout L(cfg);
  const int H = cfg.hidden_dim;
  const int V = cfg.vocab_size;
  const std::vector<double>& w = params.values;

  const int m = std::min<int>(static_cast<int>(prefix.size()), cfg.context_window);
  std::vector<double> pooled(H, 0.0);
  for (int j = static_cast<int>(prefix.size()) - m;
       j < static_cast<int>(prefix.size()); ++j)
    for (int u = 0; u < H; ++u) pooled[u] += w[L.embedding(prefix[j], u)];
  if (m > 0)
    for (int u = 0; u < H; ++u) pooled[u] /= m;

  OracleResult result;
  std::vector<double> h = pooled;
  if (cfg.is_moe()) {
    const MoEConfig& moe = *cfg.moe;
    for (int layer = 0; layer < moe.num_moe_layers; ++layer) {
      std::vector<double> scores(moe.num_experts);
      for (int e = 0; e < moe.num_experts; ++e) {
        scores[e] = w[L.router_bias(layer, e)];
        for (int u = 0; u < H; ++u)
          scores[e] += w[L.router_weight(layer, e, u)] * h[u];
      }
      result.router_scores.push_back(scores);

      std::vector<int> order(moe.num_experts);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
      });
      order.resize(moe.top_k);
      result.chosen.push_back(order);

      double max_score = scores[order[0]];
      for (int e : order) max_score = std::max(max_score, scores[e]);
      std::vector<double> gate(order.size());
      double norm = 0.0;
      for (std::size_t i = 0; i < order.size(); ++i) {
        gate[i] = std::exp(scores[order[i]] - max_score);
        norm += gate[i];
      }
      for (double& g : gate) g /= norm;

      std::vector<double> out(H, 0.0);
      for (std::size_t i = 0; i < order.size(); ++i) {
        const int e = order[i];
        for (int u = 0; u < H; ++u) {
          double z = w[L.expert_bias(layer, e, u)];
          for (int v = 0; v < H; ++v)
            z += w[L.expert_weight(layer, e, u, v)] * h[v];
          out[u] += gate[i] * std::tanh(z);
        }
      }
      h = out;
    }
  } else {
    std::vector<double> act(H);
    for (int o = 0; o < H; ++o) {
      double z = w[L.hidden_bias(o)];
      for (int i = 0; i < H; ++i) z += w[L.hidden_weight(o, i)] * pooled[i];
      act[o] = std::tanh(z);
    }
    h = act;
  }

  std::vector<double> logits(V);
  for (int t = 0; t < V; ++t) {
    logits[t] = w[L.out_bias(t)];
    for (int i = 0; i < H; ++i) logits[t] += w[L.out_weight(t, i)] * h[i];
  }
  // naive softmax-then-log (fine at this scale, and a different code path)
  double total = 0.0;
  for (double z : logits) total += std::exp(z);
  result.log_probs.resize(V);
  for (int t = 0; t < V; ++t)
    result.log_probs[t] = std::log(std::exp(logits[t]) / total);
  return result;
}

PolicyConfig dense_config(int vocab, int hidden, int window = 8) {
  PolicyConfig cfg;
  cfg.vocab_size = vocab;
  cfg.context_window = window;
  cfg.hidden_dim = hidden;
  return cfg;
}

PolicyConfig moe_config(int vocab, int hidden, int experts, int top_k,
                        int layers, int window = 8) {
  PolicyConfig cfg;
  cfg.vocab_size = vocab;
  cfg.context_window = window;
  cfg.hidden_dim = hidden;
  cfg.arch = PolicyArch::MoE;
  cfg.moe = MoEConfig{experts, top_k, layers};
  return cfg;
}

PolicyParams zero_params(const PolicyConfig& cfg) {
  PolicyParams params;
  params.config = cfg;
  params.values.assign(ParamLayout(cfg).total_size(), 0.0);
  return params;
}

}  // namespace

TEST_CASE("uniform zero-weight dense policy gives uniform log-probs") {
  const PolicyConfig cfg = dense_config(6, 5);
  const PolicyParams params = zero_params(cfg);
  for (const std::vector<TokenId>& prefix :
       {std::vector<TokenId>{}, {1}, {2, 3, 4, 5, 1, 2, 3, 4, 5}}) {
    const TokenDistribution dist = token_log_probs(params, prefix);
    REQUIRE(dist.log_probs.size() == 6);
    for (double lp : dist.log_probs)
      CHECK(lp == doctest::Approx(-std::log(6.0)).epsilon(1e-14));
  }
}

TEST_CASE("dense forward matches the independent oracle") {
  const PolicyConfig cfg = dense_config(5, 7, 4);
  const PolicyParams params = init_params(cfg, 12345);
  for (const std::vector<TokenId>& prefix :
       {std::vector<TokenId>{0}, {1, 2}, {4, 3, 2, 1, 0, 4}}) {
    const TokenDistribution dist = token_log_probs(params, prefix);
    const OracleResult oracle = oracle_forward(params, prefix);
    for (int t = 0; t < cfg.vocab_size; ++t)
      CHECK(close(dist.log_probs[t], oracle.log_probs[t], 1e-12, 1e-13));
  }
}

TEST_CASE("moe forward matches the independent oracle") {
  const PolicyConfig cfg = moe_config(6, 6, 4, 2, 2);
  const PolicyParams params = init_params(cfg, 777);
  for (const std::vector<TokenId>& prefix :
       {std::vector<TokenId>{1}, {2, 3}, {5, 4, 3, 2, 1}}) {
    const TokenDistribution dist = token_log_probs(params, prefix);
    const OracleResult oracle = oracle_forward(params, prefix);
    for (int t = 0; t < cfg.vocab_size; ++t)
      CHECK(close(dist.log_probs[t], oracle.log_probs[t], 1e-12, 1e-13));
  }
}

TEST_CASE("token distributions are normalized") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    const PolicyParams dense = init_params(dense_config(9, 6), seed);
    const PolicyParams moe = init_params(moe_config(9, 6, 5, 2, 2), seed);
    for (const PolicyParams* params : {&dense, &moe}) {
      const std::vector<TokenId> prefix = {1, 4, 7};
      const TokenDistribution dist = token_log_probs(*params, prefix);
      double total = 0.0;
      for (double lp : dist.log_probs) total += std::exp(lp);
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("replaying a policy's own routing is the identity") {
  const PolicyConfig cfg = moe_config(7, 6, 4, 2, 3);
  const PolicyParams params = init_params(cfg, 99);
  const std::vector<TokenId> query = {1, 2, 3};
  const std::vector<TokenId> response = {4, 5, 6, 0};

  const SequenceScore plain = sequence_log_prob(params, query, response);
  const SequenceScore replayed =
      sequence_log_prob(params, query, response, &plain.trace);
  REQUIRE(plain.per_token.size() == replayed.per_token.size());
  for (std::size_t t = 0; t < plain.per_token.size(); ++t)
    CHECK(plain.per_token[t] == replayed.per_token[t]);  // bitwise
  CHECK(plain.total == replayed.total);

  const TokenDistribution a = token_log_probs(params, query);
  const TokenDistribution b = token_log_probs(params, query, &plain.trace[0]);
  for (int t = 0; t < cfg.vocab_size; ++t)
    CHECK(a.log_probs[t] == b.log_probs[t]);
}

TEST_CASE("sequence log-prob of a uniform policy") {
  const PolicyParams params = zero_params(dense_config(4, 5));
  const std::vector<TokenId> query = {1};
  const std::vector<TokenId> response = {2, 3, 0};
  const SequenceScore score = sequence_log_prob(params, query, response);
  CHECK(score.total == doctest::Approx(3.0 * -std::log(4.0)).epsilon(1e-14));
  double acc = 0.0;
  for (double lp : score.per_token) acc += lp;
  CHECK(std::abs(acc - score.total) < 1e-12);
}

TEST_CASE("length-2 sequence probabilities sum to one by enumeration") {
  const PolicyParams params = init_params(dense_config(3, 5), 2024);
  const std::vector<TokenId> query = {1, 2};
  double mass = 0.0;
  for (TokenId a = 0; a < 3; ++a) {
    for (TokenId b = 0; b < 3; ++b) {
      const std::vector<TokenId> response = {a, b};
      mass += std::exp(sequence_log_prob(params, query, response).total);
    }
  }
  CHECK(std::abs(mass - 1.0) < 1e-9);
}

TEST_CASE("sampling is deterministic given the seed") {
  const PolicyParams params = init_params(moe_config(6, 6, 4, 2, 2), 5);
  const std::vector<TokenId> query = {1, 2};
  const ScoredResponse a = sample_response(params, query, 10, 42);
  const ScoredResponse b = sample_response(params, query, 10, 42);
  CHECK(a.tokens == b.tokens);
  CHECK(a.old_log_probs == b.old_log_probs);
  CHECK(a.trace == b.trace);
}

TEST_CASE("sampled log-probs equal rescoring exactly") {
  const PolicyParams params = init_params(dense_config(5, 6), 31);
  const std::vector<TokenId> query = {2, 3};
  const ScoredResponse sampled = sample_response(params, query, 8, 7);
  const SequenceScore rescored =
      sequence_log_prob(params, query, sampled.tokens);
  REQUIRE(sampled.old_log_probs.size() == rescored.per_token.size());
  for (std::size_t t = 0; t < sampled.old_log_probs.size(); ++t)
    CHECK(sampled.old_log_probs[t] == rescored.per_token[t]);
}

TEST_CASE("first-token frequencies match the uniform distribution") {
  const PolicyParams params = zero_params(dense_config(4, 4));
  const std::vector<TokenId> query = {1};
  std::map<TokenId, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i)
    counts[sample_response(params, query, 16, mix_seed(900, i)).tokens[0]]++;
  const double se = std::sqrt(0.25 * 0.75 / n);
  for (TokenId t = 0; t < 4; ++t) {
    const double freq = static_cast<double>(counts[t]) / n;
    CHECK(std::abs(freq - 0.25) < 3.0 * se);
  }
}

TEST_CASE("max_len one yields exactly one token") {
  const PolicyParams params = init_params(dense_config(5, 4), 8);
  const std::vector<TokenId> query = {1};
  const ScoredResponse r = sample_response(params, query, 1, 3);
  CHECK(r.tokens.size() == 1);
}

TEST_CASE("analytic sequence gradient matches finite differences (dense)") {
  const PolicyConfig cfg = dense_config(8, 6);
  const PolicyParams params = init_params(cfg, 4242);
  const std::vector<TokenId> query = {1, 5, 7};
  const std::vector<TokenId> response = {3, 2, 6, 4, 1, 0};

  const std::vector<double> grad =
      grad_sequence_log_prob(params, query, response);

  Rng rng(55);
  std::vector<std::size_t> coords;
  for (int i = 0; i < 64; ++i)
    coords.push_back(rng.below(params.values.size()));
  const auto objective = [&](const PolicyParams& p) {
    return sequence_log_prob(p, query, response).total;
  };
  const std::vector<double> fd =
      finite_difference_gradient(objective, params, coords, 1e-5);
  for (std::size_t k = 0; k < coords.size(); ++k)
    CHECK(close(grad[coords[k]], fd[k], 1e-4, 1e-8));
}

TEST_CASE("zero-weight dense gradient of the output bias is onehot minus uniform") {
  const PolicyConfig cfg = dense_config(5, 4);
  const PolicyParams params = zero_params(cfg);
  const ParamLayout layout(cfg);
  const std::vector<TokenId> query = {1};
  const std::vector<TokenId> response = {2, 2, 4, 0};

  const std::vector<double> grad =
      grad_sequence_log_prob(params, query, response);
  for (int v = 0; v < cfg.vocab_size; ++v) {
    int count = 0;
    for (TokenId t : response) count += (t == v);
    const double expected =
        count - static_cast<double>(response.size()) / cfg.vocab_size;
    CHECK(grad[layout.out_bias(v)] == doctest::Approx(expected).epsilon(1e-12));
  }
  // with zero weights every other block has zero gradient
  for (int o = 0; o < cfg.hidden_dim; ++o) {
    CHECK(grad[layout.hidden_bias(o)] == 0.0);
    for (int i = 0; i < cfg.hidden_dim; ++i)
      CHECK(grad[layout.hidden_weight(o, i)] == 0.0);
  }
}

TEST_CASE("moe gradient matches finite differences with and without replay") {
  const PolicyConfig cfg = moe_config(6, 5, 4, 2, 2);
  const PolicyParams params = init_params(cfg, 31337);
  const std::vector<TokenId> query = {2, 4};
  const std::vector<TokenId> response = {1, 3, 5, 0};
  const SequenceScore scored = sequence_log_prob(params, query, response);

  // routing margins must be comfortably away from ties for the no-replay
  // check (top-k is piecewise constant; the gradient is exact on each piece)
  std::vector<TokenId> prefix = query;
  double min_margin = 1e9;
  for (TokenId token : response) {
    const OracleResult oracle = oracle_forward(params, prefix);
    for (const auto& scores : oracle.router_scores) {
      std::vector<double> sorted(scores);
      std::sort(sorted.begin(), sorted.end(), std::greater<>());
      min_margin = std::min(min_margin, sorted[1] - sorted[2]);  // kth vs k+1th
    }
    prefix.push_back(token);
  }
  REQUIRE(min_margin > 1e-3);

  SUBCASE("without replay") {
    const std::vector<double> grad =
        grad_sequence_log_prob(params, query, response);
    Rng rng(7);
    std::vector<std::size_t> coords;
    for (int i = 0; i < 48; ++i) coords.push_back(rng.below(params.values.size()));
    const auto objective = [&](const PolicyParams& p) {
      return sequence_log_prob(p, query, response).total;
    };
    const auto fd = finite_difference_gradient(objective, params, coords, 1e-5);
    for (std::size_t k = 0; k < coords.size(); ++k)
      CHECK(close(grad[coords[k]], fd[k], 1e-4, 1e-8));
  }

  SUBCASE("with replay") {
    const std::vector<double> grad =
        grad_sequence_log_prob(params, query, response, &scored.trace);
    Rng rng(8);
    std::vector<std::size_t> coords;
    for (int i = 0; i < 48; ++i) coords.push_back(rng.below(params.values.size()));
    const auto objective = [&](const PolicyParams& p) {
      return sequence_log_prob(p, query, response, &scored.trace).total;
    };
    const auto fd = finite_difference_gradient(objective, params, coords, 1e-5);
    for (std::size_t k = 0; k < coords.size(); ++k)
      CHECK(close(grad[coords[k]], fd[k], 1e-4, 1e-8));
  }
}

TEST_CASE("never-activated experts receive zero gradient under replay") {
  const PolicyConfig cfg = moe_config(6, 5, 4, 2, 2);
  const PolicyParams params = init_params(cfg, 606);
  const ParamLayout layout(cfg);
  const std::vector<TokenId> query = {1, 2};
  const std::vector<TokenId> response = {3, 4, 0};
  const SequenceScore scored = sequence_log_prob(params, query, response);

  std::vector<std::vector<bool>> activated(
      cfg.moe->num_moe_layers, std::vector<bool>(cfg.moe->num_experts, false));
  for (const RoutingEntry& entry : scored.trace)
    for (int layer = 0; layer < cfg.moe->num_moe_layers; ++layer)
      for (int e : entry[layer]) activated[layer][e] = true;

  bool found_inactive = false;
  const std::vector<double> grad =
      grad_sequence_log_prob(params, query, response, &scored.trace);
  for (int layer = 0; layer < cfg.moe->num_moe_layers; ++layer) {
    for (int e = 0; e < cfg.moe->num_experts; ++e) {
      if (activated[layer][e]) continue;
      found_inactive = true;
      CHECK(grad[layout.router_bias(layer, e)] == 0.0);
      for (int u = 0; u < cfg.hidden_dim; ++u) {
        CHECK(grad[layout.router_weight(layer, e, u)] == 0.0);
        CHECK(grad[layout.expert_bias(layer, e, u)] == 0.0);
        for (int v = 0; v < cfg.hidden_dim; ++v)
          CHECK(grad[layout.expert_weight(layer, e, u, v)] == 0.0);
      }
    }
  }
  CHECK(found_inactive);  // the fixture must exercise the property
}

TEST_CASE("expert flip rate is zero when nothing changed") {
  const PolicyConfig cfg = moe_config(6, 5, 4, 2, 2);
  const PolicyParams params = init_params(cfg, 11);
  const std::vector<TokenId> query = {1};
  const std::vector<TokenId> response = {2, 3, 0};
  const SequenceScore scored = sequence_log_prob(params, query, response);
  CHECK(expert_flip_rate(params, params, query, response, scored.trace) == 0.0);
}

TEST_CASE("a single constructed router flip gives rate 1/(|y| * layers)") {
  const PolicyConfig cfg = moe_config(6, 6, 4, 1, 1);
  const PolicyParams params = init_params(cfg, 2718);
  const ParamLayout layout(cfg);
  const std::vector<TokenId> query = {1, 3};
  const std::vector<TokenId> response = {2, 4, 5, 0};
  const SequenceScore scored = sequence_log_prob(params, query, response);

  // Gaps between the selected expert and each candidate, per position. A
  // router-bias bump of size between the smallest and second-smallest gap of
  // one candidate flips exactly one position.
  std::vector<TokenId> prefix = query;
  std::vector<std::vector<double>> gaps(cfg.moe->num_experts);
  for (TokenId token : response) {
    const OracleResult oracle = oracle_forward(params, prefix);
    const std::vector<double>& scores = oracle.router_scores[0];
    const int top = oracle.chosen[0][0];
    for (int e = 0; e < cfg.moe->num_experts; ++e)
      gaps[e].push_back(scores[top] - scores[e]);
    prefix.push_back(token);
  }

  int candidate = -1;
  double g1 = 0.0, g2 = 0.0;
  for (int e = 0; e < cfg.moe->num_experts; ++e) {
    std::vector<double> sorted = gaps[e];
    std::sort(sorted.begin(), sorted.end());
    if (sorted.front() > 1e-9 && sorted.size() > 1 &&
        sorted[1] - sorted[0] > 1e-9) {
      candidate = e;
      g1 = sorted[0];
      g2 = sorted[1];
      break;
    }
  }
  REQUIRE(candidate >= 0);

  PolicyParams bumped = params;
  bumped.values[layout.router_bias(0, candidate)] += 0.5 * (g1 + g2);
  const double rate =
      expert_flip_rate(params, bumped, query, response, scored.trace);
  CHECK(rate ==
        doctest::Approx(1.0 / static_cast<double>(response.size())).epsilon(1e-12));
}

TEST_CASE("input validation") {
  const PolicyParams dense = init_params(dense_config(4, 4), 1);
  const PolicyParams moe = init_params(moe_config(4, 4, 3, 1, 1), 1);

  CHECK_THROWS_AS(token_log_probs(dense, std::vector<TokenId>{9}), InputError);
  CHECK_THROWS_AS(token_log_probs(dense, std::vector<TokenId>{-1}), InputError);
  CHECK_THROWS_AS(
      sequence_log_prob(dense, std::vector<TokenId>{1}, std::vector<TokenId>{}),
      InputError);
  CHECK_THROWS_AS(sample_response(dense, std::vector<TokenId>{1}, 0, 7),
                  InputError);

  const RoutingEntry entry = {{0}};
  CHECK_THROWS_AS(token_log_probs(dense, std::vector<TokenId>{1}, &entry),
                  ConfigError);
  const RoutingEntry bad_shape = {{0, 1}};
  CHECK_THROWS_AS(token_log_probs(moe, std::vector<TokenId>{1}, &bad_shape),
                  InputError);

  PolicyConfig bad = dense_config(1, 4);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  PolicyConfig bad_moe = moe_config(4, 4, 3, 3, 1);
  CHECK_THROWS_AS(bad_moe.validate(), ConfigError);
}
