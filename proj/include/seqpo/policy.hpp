#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "seqpo/errors.hpp"

namespace seqpo {

using TokenId = std::int32_t;

// Token id 0 is reserved as end-of-sequence in every vocabulary.
inline constexpr TokenId kEosToken = 0;

enum class PolicyArch { Dense, MoE };

struct MoEConfig {
  int num_experts = 4;
  int top_k = 1;
  int num_moe_layers = 1;
};

struct PolicyConfig {
  int vocab_size = 8;
  int context_window = 8;
  int hidden_dim = 16;
  PolicyArch arch = PolicyArch::Dense;
  std::optional<MoEConfig> moe;

  bool is_moe() const { return arch == PolicyArch::MoE; }
  void validate() const;  // throws ConfigError on invariant violations
};

// Offsets into the flat parameter vector. The layout is fixed and documented
// in docs/parameter_layout.md so that tests can recompute the forward pass
// independently. All matrices are row-major with the output unit as the row.
class ParamLayout {
 public:
  explicit ParamLayout(const PolicyConfig& config);

  std::size_t total_size() const { return total_; }

  std::size_t embedding(int token, int unit) const;

  // Dense trunk.
  std::size_t hidden_weight(int out, int in) const;
  std::size_t hidden_bias(int out) const;

  // MoE trunk.
  std::size_t router_weight(int layer, int expert, int in) const;
  std::size_t router_bias(int layer, int expert) const;
  std::size_t expert_weight(int layer, int expert, int out, int in) const;
  std::size_t expert_bias(int layer, int expert, int out) const;

  // Output head.
  std::size_t out_weight(int token, int in) const;
  std::size_t out_bias(int token) const;

 private:
  std::size_t layer_base(int layer) const;

  int vocab_, hidden_, experts_ = 0, layers_ = 0;
  bool moe_ = false;
  std::size_t trunk_, per_layer_ = 0, head_, total_;
};

struct PolicyParams {
  PolicyConfig config;
  std::vector<double> values;
};

// Seeded uniform(-0.1, 0.1) over the full layout, filled in layout order.
PolicyParams init_params(const PolicyConfig& config, std::uint64_t seed);

// Routing capture: for one token position, the activated experts per MoE
// layer in selection order (router score descending, ties to the lower
// expert index).
using RoutingEntry = std::vector<std::vector<int>>;
using RoutingTrace = std::vector<RoutingEntry>;

struct TokenDistribution {
  std::vector<double> log_probs;  // length vocab_size, exp sums to 1
};

struct ScoredResponse {
  std::vector<TokenId> tokens;
  std::vector<double> old_log_probs;  // per token, under the sampling policy
  std::vector<double> new_log_probs;  // per token, under the current policy;
                                      // empty until rescored
  RoutingTrace trace;                 // recorded at sampling; empty for dense

  std::size_t length() const { return tokens.size(); }
  bool has_new_scores() const {
    return new_log_probs.size() == tokens.size() && !tokens.empty();
  }
};

// Exact next-token log distribution after `prefix`. With `replay` the listed
// experts are activated regardless of the current router's preference; the
// router gate is still a softmax over the replayed set's scores.
TokenDistribution token_log_probs(const PolicyParams& params,
                                  std::span<const TokenId> prefix,
                                  const RoutingEntry* replay = nullptr);

struct SequenceScore {
  double total = 0.0;
  std::vector<double> per_token;
  RoutingTrace trace;  // experts actually used while scoring; empty for dense
};

SequenceScore sequence_log_prob(const PolicyParams& params,
                                std::span<const TokenId> query,
                                std::span<const TokenId> response,
                                const RoutingTrace* replay = nullptr);

// Ancestral sampling from the policy; stops at EOS or max_len. The recorded
// log-probs equal sequence_log_prob of the sampled tokens bitwise.
ScoredResponse sample_response(const PolicyParams& params,
                               std::span<const TokenId> query, int max_len,
                               std::uint64_t seed);

// Accumulates sum_t weights[t] * d/dtheta log pi(y_t | x, y_<t) in parameter
// layout. Reverse accumulation through the network; exact.
std::vector<double> weighted_grad_log_prob(const PolicyParams& params,
                                           std::span<const TokenId> query,
                                           std::span<const TokenId> response,
                                           std::span<const double> weights,
                                           const RoutingTrace* replay = nullptr);

std::vector<double> grad_sequence_log_prob(const PolicyParams& params,
                                           std::span<const TokenId> query,
                                           std::span<const TokenId> response,
                                           const RoutingTrace* replay = nullptr);

// Fraction of (token, layer) positions whose activated expert set under
// `new_params` differs from the set recorded in `old_trace`.
double expert_flip_rate(const PolicyParams& old_params,
                        const PolicyParams& new_params,
                        std::span<const TokenId> query,
                        std::span<const TokenId> response,
                        const RoutingTrace& old_trace);

}  // namespace seqpo
