#include "seqpo/tasks.hpp"

#include <algorithm>
#include <string>

#include "seqpo/rng.hpp"

namespace seqpo {

void TaskSpec::validate() const {
  if (min_query_len < 1) throw ConfigError("task.query_length must start at >= 1");
  if (max_query_len < min_query_len)
    throw ConfigError("task.query_length range is empty");
  if (symbols < 2) throw ConfigError("task.symbols must be >= 2");
}

void TaskSpec::validate_for(const PolicyConfig& policy) const {
  validate();
  if (max_query_len > policy.context_window)
    throw ConfigError("task.query_length exceeds policy.context_window");
  if (symbols + 1 > policy.vocab_size)
    throw ConfigError("task.symbols + 1 (EOS) exceeds policy.vocab_size");
}

QuerySet generate_queries(const TaskSpec& spec, int n, std::uint64_t seed) {
  spec.validate();
  if (n < 1) throw InputError("generate_queries requires n >= 1");
  Rng rng(seed);
  QuerySet set;
  set.seed = seed;
  set.queries.reserve(n);
  for (int i = 0; i < n; ++i) {
    const int len =
        spec.min_query_len +
        static_cast<int>(rng.below(spec.max_query_len - spec.min_query_len + 1));
    std::vector<TokenId> query(len);
    for (int j = 0; j < len; ++j)
      query[j] = 1 + static_cast<TokenId>(rng.below(spec.symbols));
    set.queries.push_back(std::move(query));
  }
  return set;
}

std::vector<TokenId> target_response(const TaskSpec& spec,
                                     std::span<const TokenId> query) {
  std::vector<TokenId> target;
  switch (spec.kind) {
    case TaskKind::CopyReverse: {
      target.assign(query.rbegin(), query.rend());
      break;
    }
    case TaskKind::ModSum: {
      long long sum = 0;
      for (TokenId t : query) sum += (t - 1);
      const long long base = spec.symbols;
      target.push_back(1 + static_cast<TokenId>(((sum % base) + base) % base));
      break;
    }
    case TaskKind::ParityMatch: {
      target.reserve(query.size());
      for (TokenId t : query)
        target.push_back(1 + static_cast<TokenId>((((t - 1) % 2) + 2) % 2));
      break;
    }
  }
  target.push_back(kEosToken);
  return target;
}

double verify(const TaskSpec& spec, std::span<const TokenId> query,
              std::span<const TokenId> response) {
  const std::vector<TokenId> target = target_response(spec, query);

  if (response.size() == target.size() &&
      std::equal(response.begin(), response.end(), target.begin()))
    return 1.0;
  if (!spec.partial_credit) return 0.0;

  std::size_t matched = 0;
  const std::size_t limit = std::min(response.size(), target.size());
  while (matched < limit && response[matched] == target[matched]) ++matched;
  return static_cast<double>(matched) / static_cast<double>(target.size());
}

}  // namespace seqpo
