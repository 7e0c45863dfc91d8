#include "seqpo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "seqpo/rng.hpp"

namespace seqpo {

void PolicyConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("policy.vocab_size must be >= 2");
  if (context_window < 1) throw ConfigError("policy.context_window must be >= 1");
  if (hidden_dim < 1) throw ConfigError("policy.hidden_dim must be >= 1");
  if (arch == PolicyArch::MoE) {
    if (!moe) throw ConfigError("policy.moe must be present when arch is moe");
    if (moe->num_experts < 2)
      throw ConfigError("policy.moe.num_experts must be >= 2");
    if (moe->top_k < 1 || moe->top_k >= moe->num_experts)
      throw ConfigError("policy.moe.top_k must satisfy 1 <= top_k < num_experts");
    if (moe->num_moe_layers < 1)
      throw ConfigError("policy.moe.num_moe_layers must be >= 1");
  }
}

ParamLayout::ParamLayout(const PolicyConfig& config)
    : vocab_(config.vocab_size), hidden_(config.hidden_dim) {
  config.validate();
  const std::size_t v = static_cast<std::size_t>(vocab_);
  const std::size_t h = static_cast<std::size_t>(hidden_);
  trunk_ = v * h;  // embedding table comes first
  if (config.is_moe()) {
    moe_ = true;
    experts_ = config.moe->num_experts;
    layers_ = config.moe->num_moe_layers;
    const std::size_t e = static_cast<std::size_t>(experts_);
    per_layer_ = e * h + e + e * (h * h + h);  // router w, router b, experts
    head_ = trunk_ + static_cast<std::size_t>(layers_) * per_layer_;
  } else {
    head_ = trunk_ + h * h + h;  // one hidden layer: weight + bias
  }
  total_ = head_ + v * h + v;  // output weight + bias
}

std::size_t ParamLayout::embedding(int token, int unit) const {
  return static_cast<std::size_t>(token) * hidden_ + unit;
}

std::size_t ParamLayout::hidden_weight(int out, int in) const {
  return trunk_ + static_cast<std::size_t>(out) * hidden_ + in;
}

std::size_t ParamLayout::hidden_bias(int out) const {
  return trunk_ + static_cast<std::size_t>(hidden_) * hidden_ + out;
}

std::size_t ParamLayout::layer_base(int layer) const {
  return trunk_ + static_cast<std::size_t>(layer) * per_layer_;
}

std::size_t ParamLayout::router_weight(int layer, int expert, int in) const {
  return layer_base(layer) + static_cast<std::size_t>(expert) * hidden_ + in;
}

std::size_t ParamLayout::router_bias(int layer, int expert) const {
  return layer_base(layer) + static_cast<std::size_t>(experts_) * hidden_ + expert;
}

std::size_t ParamLayout::expert_weight(int layer, int expert, int out,
                                       int in) const {
  const std::size_t h = static_cast<std::size_t>(hidden_);
  const std::size_t experts_off =
      layer_base(layer) + static_cast<std::size_t>(experts_) * h + experts_;
  return experts_off + static_cast<std::size_t>(expert) * (h * h + h) +
         static_cast<std::size_t>(out) * h + in;
}

std::size_t ParamLayout::expert_bias(int layer, int expert, int out) const {
  const std::size_t h = static_cast<std::size_t>(hidden_);
  const std::size_t experts_off =
      layer_base(layer) + static_cast<std::size_t>(experts_) * h + experts_;
  return experts_off + static_cast<std::size_t>(expert) * (h * h + h) + h * h +
         out;
}

std::size_t ParamLayout::out_weight(int token, int in) const {
  return head_ + static_cast<std::size_t>(token) * hidden_ + in;
}

std::size_t ParamLayout::out_bias(int token) const {
  return head_ + static_cast<std::size_t>(vocab_) * hidden_ + token;
}

PolicyParams init_params(const PolicyConfig& config, std::uint64_t seed) {
  config.validate();
  const ParamLayout layout(config);
  PolicyParams params;
  params.config = config;
  params.values.resize(layout.total_size());
  Rng rng(seed);
  for (double& v : params.values) v = rng.uniform(-0.1, 0.1);
  return params;
}

namespace {

void check_tokens(const PolicyConfig& config, std::span<const TokenId> tokens,
                  const char* what) {
  for (TokenId t : tokens) {
    if (t < 0 || t >= config.vocab_size) {
      throw InputError(std::string(what) + " contains token id " +
                       std::to_string(t) + " outside [0, " +
                       std::to_string(config.vocab_size) + ")");
    }
  }
}

void check_params(const PolicyParams& params, const ParamLayout& layout) {
  if (params.values.size() != layout.total_size()) {
    throw InputError("parameter vector has length " +
                     std::to_string(params.values.size()) + ", layout expects " +
                     std::to_string(layout.total_size()));
  }
}

void check_routing_entry(const PolicyConfig& config, const RoutingEntry& entry) {
  const MoEConfig& moe = *config.moe;
  if (static_cast<int>(entry.size()) != moe.num_moe_layers)
    throw InputError("routing entry has " + std::to_string(entry.size()) +
                     " layers, policy has " + std::to_string(moe.num_moe_layers));
  for (const auto& experts : entry) {
    if (static_cast<int>(experts.size()) != moe.top_k)
      throw InputError("routing entry lists " + std::to_string(experts.size()) +
                       " experts, top_k is " + std::to_string(moe.top_k));
    for (std::size_t a = 0; a < experts.size(); ++a) {
      if (experts[a] < 0 || experts[a] >= moe.num_experts)
        throw InputError("routing entry expert index out of range");
      for (std::size_t b = a + 1; b < experts.size(); ++b)
        if (experts[a] == experts[b])
          throw InputError("routing entry lists duplicate expert indices");
    }
  }
}

struct MoELayerCache {
  std::vector<double> input;              // h entering the layer
  std::vector<int> chosen;                // selection order
  std::vector<double> gate;               // softmax over chosen scores
  std::vector<std::vector<double>> act;   // tanh output per chosen expert
};

struct ForwardCache {
  std::vector<TokenId> window;  // the pooled suffix of the prefix
  std::vector<double> pooled;
  std::vector<double> dense_act;
  std::vector<MoELayerCache> layers;
  std::vector<double> final_hidden;
  std::vector<double> log_probs;
};

// Top-k expert indices by router score, descending; exact ties go to the
// lower index.
std::vector<int> select_top_k(const std::vector<double>& scores, int k) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(),
                    [&](int a, int b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  order.resize(k);
  return order;
}

ForwardCache forward(const PolicyParams& params, std::span<const TokenId> prefix,
                     const RoutingEntry* replay) {
  const PolicyConfig& config = params.config;
  const ParamLayout layout(config);
  check_params(params, layout);
  check_tokens(config, prefix, "prefix");
  if (replay) {
    if (!config.is_moe())
      throw ConfigError("routing replay supplied to a dense policy");
    check_routing_entry(config, *replay);
  }

  const int hidden = config.hidden_dim;
  const int vocab = config.vocab_size;
  const std::vector<double>& values = params.values;

  ForwardCache cache;

  // Mean-pooled summary of the last context_window prefix tokens; an empty
  // prefix pools to the zero vector.
  const int count =
      std::min<int>(static_cast<int>(prefix.size()), config.context_window);
  cache.window.assign(prefix.end() - count, prefix.end());
  cache.pooled.assign(hidden, 0.0);
  for (TokenId token : cache.window)
    for (int u = 0; u < hidden; ++u)
      cache.pooled[u] += values[layout.embedding(token, u)];
  if (count > 0)
    for (int u = 0; u < hidden; ++u) cache.pooled[u] /= count;

  std::vector<double> h = cache.pooled;

  if (config.is_moe()) {
    const MoEConfig& moe = *config.moe;
    cache.layers.reserve(moe.num_moe_layers);
    for (int layer = 0; layer < moe.num_moe_layers; ++layer) {
      MoELayerCache lc;
      lc.input = h;

      std::vector<double> scores(moe.num_experts);
      for (int e = 0; e < moe.num_experts; ++e) {
        double s = values[layout.router_bias(layer, e)];
        for (int u = 0; u < hidden; ++u)
          s += values[layout.router_weight(layer, e, u)] * lc.input[u];
        scores[e] = s;
      }

      lc.chosen = replay ? (*replay)[layer] : select_top_k(scores, moe.top_k);

      // Gate: softmax renormalized over the activated set, in stored order.
      double max_score = scores[lc.chosen[0]];
      for (int e : lc.chosen) max_score = std::max(max_score, scores[e]);
      lc.gate.resize(lc.chosen.size());
      double norm = 0.0;
      for (std::size_t i = 0; i < lc.chosen.size(); ++i) {
        lc.gate[i] = std::exp(scores[lc.chosen[i]] - max_score);
        norm += lc.gate[i];
      }
      for (double& g : lc.gate) g /= norm;

      std::vector<double> out(hidden, 0.0);
      lc.act.reserve(lc.chosen.size());
      for (std::size_t i = 0; i < lc.chosen.size(); ++i) {
        const int e = lc.chosen[i];
        std::vector<double> a(hidden);
        for (int u = 0; u < hidden; ++u) {
          double z = values[layout.expert_bias(layer, e, u)];
          for (int v = 0; v < hidden; ++v)
            z += values[layout.expert_weight(layer, e, u, v)] * lc.input[v];
          a[u] = std::tanh(z);
          out[u] += lc.gate[i] * a[u];
        }
        lc.act.push_back(std::move(a));
      }

      h = out;
      cache.layers.push_back(std::move(lc));
    }
  } else {
    cache.dense_act.resize(hidden);
    for (int o = 0; o < hidden; ++o) {
      double z = values[layout.hidden_bias(o)];
      for (int i = 0; i < hidden; ++i)
        z += values[layout.hidden_weight(o, i)] * cache.pooled[i];
      cache.dense_act[o] = std::tanh(z);
    }
    h = cache.dense_act;
  }

  cache.final_hidden = h;

  std::vector<double> logits(vocab);
  for (int t = 0; t < vocab; ++t) {
    double z = values[layout.out_bias(t)];
    for (int i = 0; i < hidden; ++i)
      z += values[layout.out_weight(t, i)] * h[i];
    logits[t] = z;
  }

  const double max_logit = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - max_logit);
  const double lse = max_logit + std::log(sum);

  cache.log_probs.resize(vocab);
  for (int t = 0; t < vocab; ++t) {
    cache.log_probs[t] = logits[t] - lse;
    if (!std::isfinite(cache.log_probs[t]))
      throw NumericError("non-finite log-probability in the output head");
  }
  return cache;
}

// Accumulates weight * d log p(target) / d theta into grad.
void backward(const PolicyParams& params, const ForwardCache& cache,
              TokenId target, double weight, std::vector<double>& grad) {
  const PolicyConfig& config = params.config;
  const ParamLayout layout(config);
  const int hidden = config.hidden_dim;
  const int vocab = config.vocab_size;
  const std::vector<double>& values = params.values;

  // d logp(target) / d logits = onehot(target) - softmax(logits)
  std::vector<double> dlogits(vocab);
  for (int t = 0; t < vocab; ++t)
    dlogits[t] = -std::exp(cache.log_probs[t]) * weight;
  dlogits[target] += weight;

  std::vector<double> dh(hidden, 0.0);
  for (int t = 0; t < vocab; ++t) {
    grad[layout.out_bias(t)] += dlogits[t];
    for (int i = 0; i < hidden; ++i) {
      grad[layout.out_weight(t, i)] += dlogits[t] * cache.final_hidden[i];
      dh[i] += dlogits[t] * values[layout.out_weight(t, i)];
    }
  }

  std::vector<double> dpool;
  if (config.is_moe()) {
    for (int layer = static_cast<int>(cache.layers.size()) - 1; layer >= 0;
         --layer) {
      const MoELayerCache& lc = cache.layers[layer];
      const std::size_t k = lc.chosen.size();

      std::vector<double> dgate(k, 0.0);
      for (std::size_t i = 0; i < k; ++i)
        for (int u = 0; u < hidden; ++u) dgate[i] += dh[u] * lc.act[i][u];

      double dot = 0.0;
      for (std::size_t i = 0; i < k; ++i) dot += lc.gate[i] * dgate[i];

      std::vector<double> dh_in(hidden, 0.0);
      for (std::size_t i = 0; i < k; ++i) {
        const int e = lc.chosen[i];
        const double dscore = lc.gate[i] * (dgate[i] - dot);
        grad[layout.router_bias(layer, e)] += dscore;
        for (int u = 0; u < hidden; ++u) {
          grad[layout.router_weight(layer, e, u)] += dscore * lc.input[u];
          dh_in[u] += dscore * values[layout.router_weight(layer, e, u)];
        }
        for (int u = 0; u < hidden; ++u) {
          const double da = lc.gate[i] * dh[u];
          const double dz = (1.0 - lc.act[i][u] * lc.act[i][u]) * da;
          grad[layout.expert_bias(layer, e, u)] += dz;
          for (int v = 0; v < hidden; ++v) {
            grad[layout.expert_weight(layer, e, u, v)] += dz * lc.input[v];
            dh_in[v] += dz * values[layout.expert_weight(layer, e, u, v)];
          }
        }
      }
      dh = std::move(dh_in);
    }
    dpool = std::move(dh);
  } else {
    std::vector<double> dpool_local(hidden, 0.0);
    for (int o = 0; o < hidden; ++o) {
      const double dz = (1.0 - cache.dense_act[o] * cache.dense_act[o]) * dh[o];
      grad[layout.hidden_bias(o)] += dz;
      for (int i = 0; i < hidden; ++i) {
        grad[layout.hidden_weight(o, i)] += dz * cache.pooled[i];
        dpool_local[i] += dz * values[layout.hidden_weight(o, i)];
      }
    }
    dpool = std::move(dpool_local);
  }

  if (!cache.window.empty()) {
    const double inv = 1.0 / static_cast<double>(cache.window.size());
    for (TokenId token : cache.window)
      for (int u = 0; u < hidden; ++u)
        grad[layout.embedding(token, u)] += dpool[u] * inv;
  }
}

RoutingEntry routing_of(const ForwardCache& cache) {
  RoutingEntry entry;
  entry.reserve(cache.layers.size());
  for (const MoELayerCache& lc : cache.layers) entry.push_back(lc.chosen);
  return entry;
}

}  // namespace

TokenDistribution token_log_probs(const PolicyParams& params,
                                  std::span<const TokenId> prefix,
                                  const RoutingEntry* replay) {
  ForwardCache cache = forward(params, prefix, replay);
  return TokenDistribution{std::move(cache.log_probs)};
}

SequenceScore sequence_log_prob(const PolicyParams& params,
                                std::span<const TokenId> query,
                                std::span<const TokenId> response,
                                const RoutingTrace* replay) {
  if (response.empty()) throw InputError("response must be nonempty");
  check_tokens(params.config, response, "response");
  if (replay && replay->size() != response.size())
    throw InputError("routing trace has " + std::to_string(replay->size()) +
                     " positions, response has " +
                     std::to_string(response.size()));

  SequenceScore score;
  score.per_token.reserve(response.size());
  std::vector<TokenId> prefix(query.begin(), query.end());
  prefix.reserve(query.size() + response.size());
  for (std::size_t t = 0; t < response.size(); ++t) {
    const RoutingEntry* entry = replay ? &(*replay)[t] : nullptr;
    ForwardCache cache = forward(params, prefix, entry);
    score.per_token.push_back(cache.log_probs[response[t]]);
    if (params.config.is_moe()) score.trace.push_back(routing_of(cache));
    prefix.push_back(response[t]);
  }
  score.total = 0.0;
  for (double lp : score.per_token) score.total += lp;
  return score;
}

ScoredResponse sample_response(const PolicyParams& params,
                               std::span<const TokenId> query, int max_len,
                               std::uint64_t seed) {
  if (max_len < 1) throw InputError("max_len must be >= 1");
  params.config.validate();
  Rng rng(seed);

  ScoredResponse out;
  std::vector<TokenId> prefix(query.begin(), query.end());
  for (int step = 0; step < max_len; ++step) {
    ForwardCache cache = forward(params, prefix, nullptr);
    const double u = rng.uniform();
    double cum = 0.0;
    TokenId picked = params.config.vocab_size - 1;
    for (int t = 0; t < params.config.vocab_size; ++t) {
      cum += std::exp(cache.log_probs[t]);
      if (u < cum) {
        picked = t;
        break;
      }
    }
    out.tokens.push_back(picked);
    out.old_log_probs.push_back(cache.log_probs[picked]);
    if (params.config.is_moe()) out.trace.push_back(routing_of(cache));
    prefix.push_back(picked);
    if (picked == kEosToken) break;
  }
  return out;
}

std::vector<double> weighted_grad_log_prob(const PolicyParams& params,
                                           std::span<const TokenId> query,
                                           std::span<const TokenId> response,
                                           std::span<const double> weights,
                                           const RoutingTrace* replay) {
  if (response.empty()) throw InputError("response must be nonempty");
  if (weights.size() != response.size())
    throw InputError("weights length must match response length");
  check_tokens(params.config, response, "response");
  if (replay && replay->size() != response.size())
    throw InputError("routing trace length must match response length");

  const ParamLayout layout(params.config);
  check_params(params, layout);
  std::vector<double> grad(layout.total_size(), 0.0);

  std::vector<TokenId> prefix(query.begin(), query.end());
  prefix.reserve(query.size() + response.size());
  for (std::size_t t = 0; t < response.size(); ++t) {
    if (weights[t] != 0.0) {
      const RoutingEntry* entry = replay ? &(*replay)[t] : nullptr;
      ForwardCache cache = forward(params, prefix, entry);
      backward(params, cache, response[t], weights[t], grad);
    }
    prefix.push_back(response[t]);
  }

  for (std::size_t j = 0; j < grad.size(); ++j) {
    if (!std::isfinite(grad[j]))
      throw NumericError("non-finite gradient at parameter index " +
                         std::to_string(j));
  }
  return grad;
}

std::vector<double> grad_sequence_log_prob(const PolicyParams& params,
                                           std::span<const TokenId> query,
                                           std::span<const TokenId> response,
                                           const RoutingTrace* replay) {
  const std::vector<double> ones(response.size(), 1.0);
  return weighted_grad_log_prob(params, query, response, ones, replay);
}

double expert_flip_rate(const PolicyParams& old_params,
                        const PolicyParams& new_params,
                        std::span<const TokenId> query,
                        std::span<const TokenId> response,
                        const RoutingTrace& old_trace) {
  if (!old_params.config.is_moe() || !new_params.config.is_moe())
    throw ConfigError("expert_flip_rate requires MoE policies");
  const MoEConfig& a = *old_params.config.moe;
  const MoEConfig& b = *new_params.config.moe;
  if (a.num_experts != b.num_experts || a.top_k != b.top_k ||
      a.num_moe_layers != b.num_moe_layers ||
      old_params.config.vocab_size != new_params.config.vocab_size ||
      old_params.config.hidden_dim != new_params.config.hidden_dim)
    throw InputError("expert_flip_rate requires matching MoE configurations");
  if (old_trace.size() != response.size())
    throw InputError("old_trace length must match response length");
  for (const RoutingEntry& entry : old_trace)
    check_routing_entry(old_params.config, entry);

  const SequenceScore rescored =
      sequence_log_prob(new_params, query, response, nullptr);

  std::size_t flips = 0, positions = 0;
  for (std::size_t t = 0; t < response.size(); ++t) {
    for (std::size_t layer = 0; layer < rescored.trace[t].size(); ++layer) {
      std::vector<int> lhs = old_trace[t][layer];
      std::vector<int> rhs = rescored.trace[t][layer];
      std::sort(lhs.begin(), lhs.end());
      std::sort(rhs.begin(), rhs.end());
      if (lhs != rhs) ++flips;
      ++positions;
    }
  }
  return positions == 0 ? 0.0
                        : static_cast<double>(flips) /
                              static_cast<double>(positions);
}

}  // namespace seqpo
