#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "seqpo/policy.hpp"

namespace seqpo {

// Synthetic verifiable tasks. Content symbols s in [0, symbols) map to token
// ids s + 1; token id 0 stays reserved for EOS. Targets always end with EOS.
enum class TaskKind { CopyReverse, ModSum, ParityMatch };

struct TaskSpec {
  TaskKind kind = TaskKind::ModSum;
  int min_query_len = 3;
  int max_query_len = 3;
  int symbols = 2;
  bool partial_credit = true;

  void validate() const;
  // Checks that queries fit the policy: lengths within the context window and
  // symbols within the vocabulary.
  void validate_for(const PolicyConfig& policy) const;
};

struct QuerySet {
  std::vector<std::vector<TokenId>> queries;
  std::uint64_t seed = 0;
  int refresh_period = 1;
};

QuerySet generate_queries(const TaskSpec& spec, int n, std::uint64_t seed);

// The exact response the verifier expects, including the trailing EOS.
std::vector<TokenId> target_response(const TaskSpec& spec,
                                     std::span<const TokenId> query);

// 1.0 for an exact target match; with partial credit, the fraction of target
// positions matched before the first error; 0.0 otherwise. Pure and total:
// malformed responses score 0.
double verify(const TaskSpec& spec, std::span<const TokenId> query,
              std::span<const TokenId> response);

}  // namespace seqpo
