#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "seqpo/config.hpp"
#include "seqpo/experiments.hpp"
#include "seqpo/gradients.hpp"
#include "seqpo/objectives.hpp"
#include "seqpo/policy.hpp"
#include "seqpo/tasks.hpp"
#include "seqpo/trainer.hpp"

namespace py = pybind11;
using namespace seqpo;

namespace {

// Keyword-friendly constructors for the config structs.
PolicyConfig make_policy_config(int vocab_size, int context_window,
                                int hidden_dim, const std::string& arch,
                                std::optional<MoEConfig> moe) {
  PolicyConfig config;
  config.vocab_size = vocab_size;
  config.context_window = context_window;
  config.hidden_dim = hidden_dim;
  config.arch = arch == "moe" ? PolicyArch::MoE : PolicyArch::Dense;
  config.moe = std::move(moe);
  config.validate();
  return config;
}

std::vector<TokenId> as_tokens(const std::vector<int>& xs) {
  return std::vector<TokenId>(xs.begin(), xs.end());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "desk-scale sequence-level policy optimization lab";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.attr("EOS_TOKEN") = kEosToken;

  py::class_<MoEConfig>(m, "MoEConfig")
      .def(py::init([](int num_experts, int top_k, int num_moe_layers) {
             return MoEConfig{num_experts, top_k, num_moe_layers};
           }),
           py::arg("num_experts") = 4, py::arg("top_k") = 1,
           py::arg("num_moe_layers") = 1)
      .def_readwrite("num_experts", &MoEConfig::num_experts)
      .def_readwrite("top_k", &MoEConfig::top_k)
      .def_readwrite("num_moe_layers", &MoEConfig::num_moe_layers);

  py::class_<PolicyConfig>(m, "PolicyConfig")
      .def(py::init(&make_policy_config), py::arg("vocab_size") = 8,
           py::arg("context_window") = 8, py::arg("hidden_dim") = 16,
           py::arg("arch") = "dense", py::arg("moe") = std::nullopt)
      .def_readwrite("vocab_size", &PolicyConfig::vocab_size)
      .def_readwrite("context_window", &PolicyConfig::context_window)
      .def_readwrite("hidden_dim", &PolicyConfig::hidden_dim)
      .def_readwrite("moe", &PolicyConfig::moe)
      .def_property_readonly("arch", [](const PolicyConfig& c) {
        return c.is_moe() ? "moe" : "dense";
      });

  py::class_<PolicyParams>(m, "PolicyParams")
      .def(py::init<>())
      .def_readwrite("config", &PolicyParams::config)
      .def_readwrite("values", &PolicyParams::values);

  py::class_<TokenDistribution>(m, "TokenDistribution")
      .def_readonly("log_probs", &TokenDistribution::log_probs);

  py::class_<ScoredResponse>(m, "ScoredResponse")
      .def(py::init<>())
      .def_readwrite("tokens", &ScoredResponse::tokens)
      .def_readwrite("old_log_probs", &ScoredResponse::old_log_probs)
      .def_readwrite("new_log_probs", &ScoredResponse::new_log_probs)
      .def_readwrite("trace", &ScoredResponse::trace);

  py::class_<SequenceScore>(m, "SequenceScore")
      .def_readonly("total", &SequenceScore::total)
      .def_readonly("per_token", &SequenceScore::per_token)
      .def_readonly("trace", &SequenceScore::trace);

  m.def("init_params", &init_params, py::arg("config"), py::arg("seed"));
  m.def(
      "token_log_probs",
      [](const PolicyParams& params, const std::vector<int>& prefix,
         std::optional<RoutingEntry> replay) {
        return token_log_probs(params, as_tokens(prefix),
                               replay ? &*replay : nullptr);
      },
      py::arg("params"), py::arg("prefix"), py::arg("replay") = std::nullopt);
  m.def(
      "sequence_log_prob",
      [](const PolicyParams& params, const std::vector<int>& query,
         const std::vector<int>& response, std::optional<RoutingTrace> replay) {
        return sequence_log_prob(params, as_tokens(query), as_tokens(response),
                                 replay ? &*replay : nullptr);
      },
      py::arg("params"), py::arg("query"), py::arg("response"),
      py::arg("replay") = std::nullopt);
  m.def(
      "sample_response",
      [](const PolicyParams& params, const std::vector<int>& query, int max_len,
         std::uint64_t seed) {
        return sample_response(params, as_tokens(query), max_len, seed);
      },
      py::arg("params"), py::arg("query"), py::arg("max_len"), py::arg("seed"));
  m.def(
      "grad_sequence_log_prob",
      [](const PolicyParams& params, const std::vector<int>& query,
         const std::vector<int>& response, std::optional<RoutingTrace> replay) {
        return grad_sequence_log_prob(params, as_tokens(query),
                                      as_tokens(response),
                                      replay ? &*replay : nullptr);
      },
      py::arg("params"), py::arg("query"), py::arg("response"),
      py::arg("replay") = std::nullopt);
  m.def(
      "expert_flip_rate",
      [](const PolicyParams& old_params, const PolicyParams& new_params,
         const std::vector<int>& query, const std::vector<int>& response,
         const RoutingTrace& old_trace) {
        return expert_flip_rate(old_params, new_params, as_tokens(query),
                                as_tokens(response), old_trace);
      },
      py::arg("old_params"), py::arg("new_params"), py::arg("query"),
      py::arg("response"), py::arg("old_trace"));

  py::class_<ClipConfig>(m, "ClipConfig")
      .def(py::init([](double left, double right, const std::string& level) {
             return ClipConfig{left, right, clip_level_from_string(level)};
           }),
           py::arg("left") = 0.2, py::arg("right") = 0.27,
           py::arg("level") = "token")
      .def_readwrite("left", &ClipConfig::left)
      .def_readwrite("right", &ClipConfig::right)
      .def_property(
          "level",
          [](const ClipConfig& c) { return to_string(c.level); },
          [](ClipConfig& c, const std::string& v) {
            c.level = clip_level_from_string(v);
          });

  py::class_<ClipReport>(m, "ClipReport")
      .def_readonly("response_clipped", &ClipReport::response_clipped)
      .def_readonly("token_clipped", &ClipReport::token_clipped)
      .def_readonly("token_fraction", &ClipReport::token_fraction)
      .def_readonly("sequence_fraction", &ClipReport::sequence_fraction);

  py::class_<Group>(m, "Group")
      .def(py::init<>())
      .def_readwrite("query", &Group::query)
      .def_readwrite("responses", &Group::responses)
      .def_readwrite("rewards", &Group::rewards)
      .def_readwrite("advantages", &Group::advantages)
      .def_readwrite("token_advantages", &Group::token_advantages);

  py::class_<ObjectiveResult>(m, "ObjectiveResult")
      .def_readonly("value", &ObjectiveResult::value)
      .def_readonly("report", &ObjectiveResult::report);

  m.def("group_advantages", [](const std::vector<double>& rewards) {
    return group_advantages(rewards);
  });
  m.def("token_importance_ratios", &token_importance_ratios);
  m.def("sequence_importance_ratio", &sequence_importance_ratio);
  m.def("grpo_objective", &grpo_objective);
  m.def("gspo_objective", &gspo_objective);
  m.def("gspo_token_objective", &gspo_token_objective);
  m.def("ppo_clip_objective", &ppo_clip_objective);
  m.def(
      "importance_sampling_estimate",
      [](const std::vector<double>& f, const std::vector<double>& target,
         const std::vector<double>& behavior, const std::vector<int>& samples) {
        return importance_sampling_estimate(f, target, behavior, samples);
      },
      py::arg("f"), py::arg("target_log_probs"), py::arg("behavior_log_probs"),
      py::arg("samples"));

  py::class_<GradientEstimate>(m, "GradientEstimate")
      .def_readonly("vector", &GradientEstimate::vector)
      .def_readonly("per_response_weight", &GradientEstimate::per_response_weight)
      .def_readonly("token_weights", &GradientEstimate::token_weights);

  m.def("gspo_gradient", &gspo_gradient, py::arg("params"), py::arg("group"),
        py::arg("clip"), py::arg("replay_routing") = false);
  m.def("grpo_gradient", &grpo_gradient, py::arg("params"), py::arg("group"),
        py::arg("clip"), py::arg("replay_routing") = false);
  m.def("gspo_token_gradient", &gspo_token_gradient, py::arg("params"),
        py::arg("group"), py::arg("clip"), py::arg("replay_routing") = false);
  m.def("rescore_group", &rescore_group, py::arg("params"), py::arg("group"),
        py::arg("replay_routing") = false);

  py::class_<TaskSpec>(m, "TaskSpec")
      .def(py::init([](const std::string& kind, int min_query_len,
                       int max_query_len, int symbols, bool partial_credit) {
             TaskSpec spec;
             if (kind == "copy_reverse") {
               spec.kind = TaskKind::CopyReverse;
             } else if (kind == "mod_sum") {
               spec.kind = TaskKind::ModSum;
             } else if (kind == "parity_match") {
               spec.kind = TaskKind::ParityMatch;
             } else {
               throw ConfigError("unknown task kind '" + kind + "'");
             }
             spec.min_query_len = min_query_len;
             spec.max_query_len = max_query_len;
             spec.symbols = symbols;
             spec.partial_credit = partial_credit;
             spec.validate();
             return spec;
           }),
           py::arg("kind") = "mod_sum", py::arg("min_query_len") = 3,
           py::arg("max_query_len") = 3, py::arg("symbols") = 2,
           py::arg("partial_credit") = true)
      .def_readwrite("min_query_len", &TaskSpec::min_query_len)
      .def_readwrite("max_query_len", &TaskSpec::max_query_len)
      .def_readwrite("symbols", &TaskSpec::symbols)
      .def_readwrite("partial_credit", &TaskSpec::partial_credit);

  py::class_<QuerySet>(m, "QuerySet")
      .def_readonly("queries", &QuerySet::queries)
      .def_readonly("seed", &QuerySet::seed);

  m.def("generate_queries", &generate_queries, py::arg("spec"), py::arg("n"),
        py::arg("seed"));
  m.def(
      "target_response",
      [](const TaskSpec& spec, const std::vector<int>& query) {
        return target_response(spec, as_tokens(query));
      },
      py::arg("spec"), py::arg("query"));
  m.def(
      "verify",
      [](const TaskSpec& spec, const std::vector<int>& query,
         const std::vector<int>& response) {
        return verify(spec, as_tokens(query), as_tokens(response));
      },
      py::arg("spec"), py::arg("query"), py::arg("response"));

  py::class_<OptimizerConfig>(m, "OptimizerConfig")
      .def(py::init([](const std::string& kind, double beta1, double beta2,
                       double eps) {
             OptimizerConfig c;
             c.kind = kind == "sgd" ? OptimizerKind::Sgd : OptimizerKind::Adam;
             c.beta1 = beta1;
             c.beta2 = beta2;
             c.eps = eps;
             return c;
           }),
           py::arg("kind") = "adam", py::arg("beta1") = 0.9,
           py::arg("beta2") = 0.999, py::arg("eps") = 1e-8);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_property(
          "algorithm",
          [](const TrainConfig& c) { return to_string(c.algorithm); },
          [](TrainConfig& c, const std::string& v) {
            c.algorithm = algorithm_from_string(v);
          })
      .def_readwrite("group_size", &TrainConfig::group_size)
      .def_readwrite("queries_per_batch", &TrainConfig::queries_per_batch)
      .def_readwrite("minibatches_per_batch", &TrainConfig::minibatches_per_batch)
      .def_readwrite("clip", &TrainConfig::clip)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("optimizer", &TrainConfig::optimizer)
      .def_readwrite("steps", &TrainConfig::steps)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("routing_replay", &TrainConfig::routing_replay)
      .def_readwrite("query_refresh_period", &TrainConfig::query_refresh_period)
      .def_readwrite("max_response_len", &TrainConfig::max_response_len)
      .def_readwrite("likelihood_noise_std", &TrainConfig::likelihood_noise_std)
      .def_readwrite("rollout_threads", &TrainConfig::rollout_threads);

  py::class_<MetricsRecord>(m, "MetricsRecord")
      .def_readonly("step", &MetricsRecord::step)
      .def_readonly("minibatch", &MetricsRecord::minibatch)
      .def_readonly("mean_reward", &MetricsRecord::mean_reward)
      .def_readonly("objective_value", &MetricsRecord::objective_value)
      .def_readonly("grad_norm", &MetricsRecord::grad_norm)
      .def_readonly("clip_fraction_tokens", &MetricsRecord::clip_fraction_tokens)
      .def_readonly("clip_fraction_sequences",
                    &MetricsRecord::clip_fraction_sequences)
      .def_readonly("mean_seq_ratio", &MetricsRecord::mean_seq_ratio)
      .def_readonly("token_ratio_variance", &MetricsRecord::token_ratio_variance)
      .def_readonly("expert_flip_rate", &MetricsRecord::expert_flip_rate);

  py::class_<TrainResult>(m, "TrainResult")
      .def_readonly("metrics", &TrainResult::metrics)
      .def_readonly("final_params", &TrainResult::final_params)
      .def_readonly("diverged", &TrainResult::diverged)
      .def_readonly("divergence_message", &TrainResult::divergence_message)
      .def_readonly("completed_steps", &TrainResult::completed_steps);

  m.def(
      "apply_likelihood_noise",
      [](const ScoredResponse& scored, double noise_std, std::uint64_t seed) {
        return apply_likelihood_noise(scored, noise_std, seed);
      },
      py::arg("scored"), py::arg("noise_std"), py::arg("seed"));
  m.def(
      "run_training",
      [](const TrainConfig& config, const TaskSpec& task,
         const PolicyConfig& policy) {
        return run_training(config, task, policy);
      },
      py::arg("config"), py::arg("task"), py::arg("policy"),
      py::call_guard<py::gil_scoped_release>());
}
