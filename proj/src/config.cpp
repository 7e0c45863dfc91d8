#include "seqpo/config.hpp"

#include <algorithm>
#include <set>

namespace seqpo {

using nlohmann::json;

namespace {

// Rejects keys outside the allowed set so config typos fail loudly instead
// of silently changing a study.
void check_keys(const json& obj, const char* context,
                std::initializer_list<const char*> allowed) {
  if (!obj.is_object())
    throw ConfigError(std::string(context) + " must be a JSON object");
  for (const auto& item : obj.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) {
          return item.key() == k;
        }) == allowed.end()) {
      throw ConfigError(std::string("unknown key '") + item.key() + "' in " +
                        context);
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("invalid value for '") + key + "'");
  }
}

void read_string(const json& obj, const char* key, std::string& out) {
  if (!obj.contains(key)) return;
  if (!obj.at(key).is_string())
    throw ConfigError(std::string("'") + key + "' must be a string");
  out = obj.at(key).get<std::string>();
}

PolicyConfig parse_policy(const json& obj) {
  check_keys(obj, "policy",
             {"vocab_size", "context_window", "hidden_dim", "arch", "moe"});
  PolicyConfig config;
  read(obj, "vocab_size", config.vocab_size);
  read(obj, "context_window", config.context_window);
  read(obj, "hidden_dim", config.hidden_dim);
  std::string arch = "dense";
  read_string(obj, "arch", arch);
  if (arch == "dense") {
    config.arch = PolicyArch::Dense;
  } else if (arch == "moe") {
    config.arch = PolicyArch::MoE;
  } else {
    throw ConfigError("policy.arch must be 'dense' or 'moe'");
  }
  if (obj.contains("moe")) {
    const json& moe = obj.at("moe");
    check_keys(moe, "policy.moe", {"num_experts", "top_k", "num_moe_layers"});
    MoEConfig mc;
    read(moe, "num_experts", mc.num_experts);
    read(moe, "top_k", mc.top_k);
    read(moe, "num_moe_layers", mc.num_moe_layers);
    config.moe = mc;
  }
  return config;
}

TaskSpec parse_task(const json& obj) {
  check_keys(obj, "task",
             {"kind", "query_length", "symbols", "partial_credit"});
  TaskSpec spec;
  std::string kind = "mod_sum";
  read_string(obj, "kind", kind);
  if (kind == "copy_reverse") {
    spec.kind = TaskKind::CopyReverse;
  } else if (kind == "mod_sum") {
    spec.kind = TaskKind::ModSum;
  } else if (kind == "parity_match") {
    spec.kind = TaskKind::ParityMatch;
  } else {
    throw ConfigError("task.kind must be copy_reverse, mod_sum or parity_match");
  }
  if (obj.contains("query_length")) {
    const json& range = obj.at("query_length");
    if (!range.is_array() || range.size() != 2 ||
        !range.at(0).is_number_integer() || !range.at(1).is_number_integer())
      throw ConfigError("task.query_length must be [min, max] integers");
    spec.min_query_len = range.at(0).get<int>();
    spec.max_query_len = range.at(1).get<int>();
  }
  read(obj, "symbols", spec.symbols);
  read(obj, "partial_credit", spec.partial_credit);
  return spec;
}

ClipConfig parse_clip(const json& obj) {
  check_keys(obj, "clip", {"left", "right", "level"});
  ClipConfig clip;
  read(obj, "left", clip.left);
  read(obj, "right", clip.right);
  std::string level = "token";
  read_string(obj, "level", level);
  clip.level = clip_level_from_string(level);
  return clip;
}

TrainConfig parse_train(const json& obj) {
  check_keys(obj, "train",
             {"algorithm", "group_size", "queries_per_batch",
              "minibatches_per_batch", "clip", "learning_rate", "optimizer",
              "steps", "seed", "routing_replay", "query_refresh_period",
              "max_response_len", "likelihood_noise_std", "rollout_threads"});
  TrainConfig config;
  std::string algorithm = "gspo";
  read_string(obj, "algorithm", algorithm);
  config.algorithm = algorithm_from_string(algorithm);
  read(obj, "group_size", config.group_size);
  read(obj, "queries_per_batch", config.queries_per_batch);
  read(obj, "minibatches_per_batch", config.minibatches_per_batch);
  if (obj.contains("clip")) config.clip = parse_clip(obj.at("clip"));
  read(obj, "learning_rate", config.learning_rate);
  if (obj.contains("optimizer")) {
    const json& opt = obj.at("optimizer");
    check_keys(opt, "train.optimizer", {"kind", "beta1", "beta2", "eps"});
    std::string kind = "adam";
    read_string(opt, "kind", kind);
    if (kind == "sgd") {
      config.optimizer.kind = OptimizerKind::Sgd;
    } else if (kind == "adam") {
      config.optimizer.kind = OptimizerKind::Adam;
    } else {
      throw ConfigError("train.optimizer.kind must be 'sgd' or 'adam'");
    }
    read(opt, "beta1", config.optimizer.beta1);
    read(opt, "beta2", config.optimizer.beta2);
    read(opt, "eps", config.optimizer.eps);
  }
  read(obj, "steps", config.steps);
  read(obj, "seed", config.seed);
  read(obj, "routing_replay", config.routing_replay);
  read(obj, "query_refresh_period", config.query_refresh_period);
  read(obj, "max_response_len", config.max_response_len);
  read(obj, "likelihood_noise_std", config.likelihood_noise_std);
  read(obj, "rollout_threads", config.rollout_threads);
  return config;
}

StudySpec parse_study(const json& obj) {
  check_keys(obj, "study", {"study", "seeds", "noise_levels"});
  StudySpec spec;
  std::string kind = "efficiency";
  read_string(obj, "study", kind);
  spec.study = study_kind_from_string(kind);
  read(obj, "seeds", spec.seeds);
  read(obj, "noise_levels", spec.noise_levels);
  return spec;
}

}  // namespace

void StudySpec::validate() const {
  if (seeds.size() < 3)
    throw ConfigError("study.seeds must list >= 3 seeds for comparative runs");
  std::set<std::uint64_t> unique(seeds.begin(), seeds.end());
  if (unique.size() != seeds.size())
    throw ConfigError("study.seeds must be distinct");
  if (study == StudyKind::NoiseRobustness && noise_levels.empty())
    throw ConfigError("study.noise_levels must be nonempty");
  for (double level : noise_levels)
    if (level < 0.0) throw ConfigError("study.noise_levels must be >= 0");
}

void ExperimentConfig::validate() const {
  policy.validate();
  task.validate_for(policy);
  train.validate();
  if (study) {
    study->validate();
    if (study->study == StudyKind::MoeStability && !policy.is_moe())
      throw ConfigError("moe_stability study requires policy.arch = moe");
  }
  if (output_dir.empty()) throw ConfigError("output_dir must be nonempty");
}

ExperimentConfig parse_experiment_config(const json& doc) {
  check_keys(doc, "experiment config",
             {"policy", "task", "train", "study", "output_dir"});
  ExperimentConfig config;
  if (doc.contains("policy")) config.policy = parse_policy(doc.at("policy"));
  if (doc.contains("task")) config.task = parse_task(doc.at("task"));
  if (doc.contains("train")) config.train = parse_train(doc.at("train"));
  if (doc.contains("study")) config.study = parse_study(doc.at("study"));
  read_string(doc, "output_dir", config.output_dir);
  config.validate();
  return config;
}

json to_json(const PolicyConfig& config) {
  json obj{{"vocab_size", config.vocab_size},
           {"context_window", config.context_window},
           {"hidden_dim", config.hidden_dim},
           {"arch", config.is_moe() ? "moe" : "dense"}};
  if (config.moe) {
    obj["moe"] = json{{"num_experts", config.moe->num_experts},
                      {"top_k", config.moe->top_k},
                      {"num_moe_layers", config.moe->num_moe_layers}};
  }
  return obj;
}

json to_json(const TaskSpec& spec) {
  const char* kind = spec.kind == TaskKind::CopyReverse ? "copy_reverse"
                     : spec.kind == TaskKind::ModSum    ? "mod_sum"
                                                        : "parity_match";
  return json{{"kind", kind},
              {"query_length", json::array({spec.min_query_len, spec.max_query_len})},
              {"symbols", spec.symbols},
              {"partial_credit", spec.partial_credit}};
}

json to_json(const ClipConfig& clip) {
  return json{{"left", clip.left},
              {"right", clip.right},
              {"level", to_string(clip.level)}};
}

json to_json(const TrainConfig& config) {
  json obj{{"algorithm", to_string(config.algorithm)},
           {"group_size", config.group_size},
           {"queries_per_batch", config.queries_per_batch},
           {"minibatches_per_batch", config.minibatches_per_batch},
           {"clip", to_json(config.effective_clip())},
           {"learning_rate", config.learning_rate},
           {"optimizer",
            json{{"kind", config.optimizer.kind == OptimizerKind::Sgd ? "sgd"
                                                                      : "adam"},
                 {"beta1", config.optimizer.beta1},
                 {"beta2", config.optimizer.beta2},
                 {"eps", config.optimizer.eps}}},
           {"steps", config.steps},
           {"seed", config.seed},
           {"routing_replay", config.routing_replay},
           {"query_refresh_period", config.query_refresh_period},
           {"max_response_len", config.max_response_len},
           {"likelihood_noise_std", config.likelihood_noise_std},
           {"rollout_threads", config.rollout_threads}};
  return obj;
}

json to_json(const StudySpec& spec) {
  json obj{{"study", to_string(spec.study)}, {"seeds", spec.seeds}};
  if (spec.study == StudyKind::NoiseRobustness)
    obj["noise_levels"] = spec.noise_levels;
  return obj;
}

json to_json(const ExperimentConfig& config) {
  json obj{{"policy", to_json(config.policy)},
           {"task", to_json(config.task)},
           {"train", to_json(config.train)},
           {"output_dir", config.output_dir}};
  if (config.study) obj["study"] = to_json(*config.study);
  return obj;
}

json metrics_to_json(const MetricsRecord& record) {
  json obj{{"step", record.step},
           {"minibatch", record.minibatch},
           {"mean_reward", record.mean_reward},
           {"objective_value", record.objective_value},
           {"grad_norm", record.grad_norm},
           {"clip_fraction_tokens", record.clip_fraction_tokens},
           {"clip_fraction_sequences", record.clip_fraction_sequences},
           {"mean_seq_ratio", record.mean_seq_ratio},
           {"token_ratio_variance", record.token_ratio_variance}};
  if (record.expert_flip_rate) obj["expert_flip_rate"] = *record.expert_flip_rate;
  return obj;
}

void apply_override(json& doc, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must have the form key.path=value: '" +
                      assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // bare words are strings
  }

  json* node = &doc;
  std::size_t begin = 0;
  while (true) {
    const std::size_t dot = path.find('.', begin);
    const std::string key = path.substr(begin, dot - begin);
    if (key.empty())
      throw ConfigError("override path has an empty segment: '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    begin = dot + 1;
  }
}

std::uint64_t config_hash(const json& doc) {
  const std::string text = doc.dump();
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::string to_string(StudyKind kind) {
  switch (kind) {
    case StudyKind::Efficiency:
      return "efficiency";
    case StudyKind::ClipFractions:
      return "clip_fractions";
    case StudyKind::MoeStability:
      return "moe_stability";
    case StudyKind::NoiseRobustness:
      return "noise_robustness";
  }
  return "unknown";
}

StudyKind study_kind_from_string(const std::string& name) {
  if (name == "efficiency") return StudyKind::Efficiency;
  if (name == "clip_fractions") return StudyKind::ClipFractions;
  if (name == "moe_stability") return StudyKind::MoeStability;
  if (name == "noise_robustness") return StudyKind::NoiseRobustness;
  throw ConfigError("unknown study kind '" + name + "'");
}

}  // namespace seqpo
