#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcpo/domains.hpp"
#include "mcpo/trainer.hpp"

namespace mcpo {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json config_to_json(const TrainConfig& c) {
  return nlohmann::json{
      {"batch_size", c.batch_size},
      {"rollouts_per_prompt", c.rollouts_per_prompt},
      {"mini_batches_per_step", c.mini_batches_per_step},
      {"steps", c.steps},
      {"learning_rate", c.learning_rate},
      {"adam", {{"beta1", c.adam_beta1}, {"beta2", c.adam_beta2}, {"eps", c.adam_eps}}},
      {"seed", c.seed},
      {"domains", c.domains},
      {"eval",
       {{"every", c.eval_every}, {"prompts", c.eval_prompts}, {"samples", c.eval_samples}}},
      {"checkpoint_every", c.checkpoint_every},
      {"parallel_rollouts", c.parallel_rollouts},
      {"algo", c.algo},
      {"clip",
       {{"eps_clip", c.clip.eps_clip},
        {"eps_std", c.clip.eps_std},
        {"entropy_coeff", c.clip.entropy_coeff}}},
      {"mcpo",
       {{"tau", c.contrastive.tau},
        {"lambda_cross", c.contrastive.lambda_cross},
        {"lambda_in", c.contrastive.lambda_in},
        {"lambda_cl", c.contrastive.lambda_cl},
        {"positive_threshold", c.contrastive.positive_threshold},
        {"warmup_batches", c.contrastive.warmup_batches},
        {"proj_dim", c.contrastive.proj_dim},
        {"proj_hidden_dim", c.contrastive.proj_hidden_dim}}},
      {"policy",
       {{"d_emb", c.policy.d_emb},
        {"d_hid", c.policy.d_hid},
        {"context_window", c.policy.context_window},
        {"max_prompt_len", c.policy.max_prompt_len},
        {"max_response_len", c.policy.max_response_len},
        {"init_scale", c.policy.init_scale}}}};
}

namespace detail {

// Readers that name the offending field on any type or range problem.

inline void reject_unknown(const nlohmann::json& obj, const std::set<std::string>& known,
                           const std::string& prefix) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("unknown config key: " + prefix + it.key());
}

template <class T>
void read_field(const nlohmann::json& obj, const char* key, T& dst, const std::string& prefix) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config field " + prefix + key + " has the wrong type");
  }
}

}  // namespace detail

/// Parse a (possibly partial) JSON object over the defaults in `base`.
/// Unknown keys are rejected so typos cannot silently fall back to defaults.
inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = TrainConfig{}) {
  using detail::read_field;
  using detail::reject_unknown;
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  reject_unknown(j, {"batch_size", "rollouts_per_prompt", "mini_batches_per_step", "steps",
                     "learning_rate", "adam", "seed", "domains", "eval", "checkpoint_every",
                     "parallel_rollouts", "algo", "clip", "mcpo", "policy"},
                 "");
  TrainConfig c = base;
  read_field(j, "batch_size", c.batch_size, "");
  read_field(j, "rollouts_per_prompt", c.rollouts_per_prompt, "");
  read_field(j, "mini_batches_per_step", c.mini_batches_per_step, "");
  read_field(j, "steps", c.steps, "");
  read_field(j, "learning_rate", c.learning_rate, "");
  read_field(j, "seed", c.seed, "");
  read_field(j, "domains", c.domains, "");
  read_field(j, "checkpoint_every", c.checkpoint_every, "");
  read_field(j, "parallel_rollouts", c.parallel_rollouts, "");
  read_field(j, "algo", c.algo, "");
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    reject_unknown(a, {"beta1", "beta2", "eps"}, "adam.");
    read_field(a, "beta1", c.adam_beta1, "adam.");
    read_field(a, "beta2", c.adam_beta2, "adam.");
    read_field(a, "eps", c.adam_eps, "adam.");
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    reject_unknown(e, {"every", "prompts", "samples"}, "eval.");
    read_field(e, "every", c.eval_every, "eval.");
    read_field(e, "prompts", c.eval_prompts, "eval.");
    read_field(e, "samples", c.eval_samples, "eval.");
  }
  if (j.contains("clip")) {
    const auto& cl = j.at("clip");
    reject_unknown(cl, {"eps_clip", "eps_std", "entropy_coeff"}, "clip.");
    read_field(cl, "eps_clip", c.clip.eps_clip, "clip.");
    read_field(cl, "eps_std", c.clip.eps_std, "clip.");
    read_field(cl, "entropy_coeff", c.clip.entropy_coeff, "clip.");
  }
  if (j.contains("mcpo")) {
    const auto& m = j.at("mcpo");
    reject_unknown(m,
                   {"tau", "lambda_cross", "lambda_in", "lambda_cl", "positive_threshold",
                    "warmup_batches", "proj_dim", "proj_hidden_dim"},
                   "mcpo.");
    read_field(m, "tau", c.contrastive.tau, "mcpo.");
    read_field(m, "lambda_cross", c.contrastive.lambda_cross, "mcpo.");
    read_field(m, "lambda_in", c.contrastive.lambda_in, "mcpo.");
    read_field(m, "lambda_cl", c.contrastive.lambda_cl, "mcpo.");
    read_field(m, "positive_threshold", c.contrastive.positive_threshold, "mcpo.");
    read_field(m, "warmup_batches", c.contrastive.warmup_batches, "mcpo.");
    read_field(m, "proj_dim", c.contrastive.proj_dim, "mcpo.");
    read_field(m, "proj_hidden_dim", c.contrastive.proj_hidden_dim, "mcpo.");
  }
  if (j.contains("policy")) {
    const auto& p = j.at("policy");
    reject_unknown(p,
                   {"d_emb", "d_hid", "context_window", "max_prompt_len", "max_response_len",
                    "init_scale"},
                   "policy.");
    read_field(p, "d_emb", c.policy.d_emb, "policy.");
    read_field(p, "d_hid", c.policy.d_hid, "policy.");
    read_field(p, "context_window", c.policy.context_window, "policy.");
    read_field(p, "max_prompt_len", c.policy.max_prompt_len, "policy.");
    read_field(p, "max_response_len", c.policy.max_response_len, "policy.");
    read_field(p, "init_scale", c.policy.init_scale, "policy.");
  }
  return c;
}

/// Range and consistency checks; throws ConfigError naming the field.
inline void validate_config(const TrainConfig& c) {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (c.domains.empty()) fail("domains must not be empty");
  for (const std::string& d : c.domains) domain_by_name(d);  // throws on unknown
  if (c.batch_size == 0 || c.batch_size % c.domains.size() != 0)
    fail("batch_size must be positive and divisible by the number of domains");
  if (c.mini_batches_per_step == 0 || c.batch_size % c.mini_batches_per_step != 0)
    fail("mini_batches_per_step must be positive and divide batch_size");
  if (c.rollouts_per_prompt < 2) fail("rollouts_per_prompt must be at least 2");
  if (c.steps == 0) fail("steps must be positive");
  if (!(c.learning_rate > 0.0)) fail("learning_rate must be positive");
  if (c.eval_samples < 1) fail("eval.samples must be at least 1");
  if (c.eval_prompts < 1) fail("eval.prompts must be at least 1");
  if (c.algo != "mcpo" && c.algo != "grpo") fail("algo must be \"mcpo\" or \"grpo\"");
  if (!(c.clip.eps_clip > 0.0 && c.clip.eps_clip < 1.0)) fail("clip.eps_clip must be in (0,1)");
  if (!(c.clip.eps_std > 0.0)) fail("clip.eps_std must be positive");
  if (c.clip.entropy_coeff < 0.0) fail("clip.entropy_coeff must be nonnegative");
  if (!(c.contrastive.tau > 0.0)) fail("mcpo.tau must be positive");
  if (c.contrastive.lambda_cross < 0.0) fail("mcpo.lambda_cross must be nonnegative");
  if (c.contrastive.lambda_in < 0.0) fail("mcpo.lambda_in must be nonnegative");
  if (c.contrastive.lambda_cl < 0.0) fail("mcpo.lambda_cl must be nonnegative");
  if (!(c.contrastive.positive_threshold > 0.0 && c.contrastive.positive_threshold < 1.0))
    fail("mcpo.positive_threshold must be in (0,1)");
  if (c.contrastive.proj_dim == 0 || c.contrastive.proj_hidden_dim == 0)
    fail("mcpo.proj_dim and mcpo.proj_hidden_dim must be positive");
  if (c.policy.d_emb == 0 || c.policy.d_hid == 0 || c.policy.context_window == 0)
    fail("policy dimensions must be positive");
  if (c.policy.max_response_len < 1 || c.policy.max_response_len > 16)
    fail("policy.max_response_len must be in [1,16]");
  if (c.policy.max_prompt_len < 1 || c.policy.max_prompt_len > 32)
    fail("policy.max_prompt_len must be in [1,32]");
  if (!(c.policy.init_scale > 0.0)) fail("policy.init_scale must be positive");
}

/// Apply one `dotted.key=value` override; the value is parsed as JSON when
/// possible and as a bare string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like dotted.key=value: " + assignment);
  std::string path = assignment.substr(0, eq);
  std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;  // bare string
  nlohmann::json* node = &j;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty override key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
  (*node)[parts.back()] = value;
}

/// Load a config: "default" (or empty) takes built-in defaults; anything else
/// is a JSON file path. Overrides apply on top, then the result is validated.
inline TrainConfig load_config(const std::string& config_path,
                               const std::vector<std::string>& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (!config_path.empty() && config_path != "default") {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config file: " + config_path);
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw ConfigError("config file " + config_path + " is not valid JSON: " + e.what());
    }
  }
  for (const std::string& o : overrides) apply_override(j, o);
  TrainConfig c = config_from_json(j);
  validate_config(c);
  return c;
}

}  // namespace mcpo
