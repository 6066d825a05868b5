#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mcpo/contrastive.hpp"
#include "mcpo/domains.hpp"
#include "mcpo/grpo.hpp"
#include "mcpo/objective.hpp"
#include "mcpo/policy.hpp"
#include "mcpo/rng.hpp"

namespace mcpo {

struct TrainConfig {
  std::size_t batch_size = 20;          // prompts per training step (B)
  std::size_t rollouts_per_prompt = 8;  // G
  std::size_t mini_batches_per_step = 1;
  std::size_t steps = 1500;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  std::vector<std::string> domains = {"modmath", "seqtrans", "choice", "toolcall",
                                      "saferchoice"};
  std::size_t eval_every = 100;
  std::size_t eval_prompts = 16;
  std::size_t eval_samples = 32;  // K of avg@K
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  bool parallel_rollouts = false;
  std::string algo = "mcpo";  // "mcpo" or "grpo"
  ClipConfig clip;
  ContrastiveConfig contrastive;
  PolicyConfig policy;
};

/// One record per optimizer step. wall_ms is runtime-only: it is reported on
/// the console but kept out of the metrics log so that same-seed runs produce
/// byte-identical log files.
struct StepMetrics {
  std::size_t step = 0;        // optimizer step, 1-based, gap-free
  std::size_t train_step = 0;  // rollout batch this update came from
  double reward_mean = 0.0;
  std::vector<std::pair<std::string, double>> reward_by_domain;
  double l_grpo = 0.0, l_cross = 0.0, l_in = 0.0, l_mcpo = 0.0, l_total = 0.0;
  double n_cross = 0.0, n_in = 0.0;
  PoolDiagnostics diag;
  double mean_entropy = 0.0;
  double wall_ms = 0.0;
};

inline nlohmann::json metrics_to_json(const StepMetrics& m) {
  nlohmann::json rewards = nlohmann::json::object();
  for (const auto& [name, r] : m.reward_by_domain) rewards[name] = r;
  return nlohmann::json{{"step", m.step},
                        {"train_step", m.train_step},
                        {"reward_mean", m.reward_mean},
                        {"rewards", rewards},
                        {"l_grpo", m.l_grpo},
                        {"l_cross", m.l_cross},
                        {"l_in", m.l_in},
                        {"l_mcpo", m.l_mcpo},
                        {"l_total", m.l_total},
                        {"n_cross", m.n_cross},
                        {"n_in", m.n_in},
                        {"entropy", m.mean_entropy},
                        {"pos_per_anchor", m.diag.pos_per_anchor},
                        {"positive_ratio", m.diag.positive_ratio},
                        {"mean_omega", m.diag.mean_omega},
                        {"pos_logit", m.diag.mean_pos_logit},
                        {"neg_logit", m.diag.mean_neg_logit},
                        {"margin", m.diag.margin}};
}

struct EvalRecord {
  std::size_t train_step = 0;
  std::vector<std::pair<std::string, double>> per_domain;
  double overall = 0.0;
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<Tensor> m, v;
  std::size_t t = 0;

  static AdamState init(std::span<const Tensor* const> params) {
    AdamState s;
    for (const Tensor* p : params) {
      s.m.push_back(Tensor::zeros(p->shape));
      s.v.push_back(Tensor::zeros(p->shape));
    }
    return s;
  }

  void update(std::span<Tensor* const> params, std::span<const Tensor* const> grads, double lr,
              double beta1, double beta2, double eps) {
    if (params.size() != m.size() || grads.size() != m.size())
      throw std::invalid_argument("AdamState::update: parameter list changed size");
    ++t;
    double bc1 = 1.0 - std::pow(beta1, double(t));
    double bc2 = 1.0 - std::pow(beta2, double(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = *grads[i];
      for (std::size_t j = 0; j < p.numel(); ++j) {
        double gj = g.data[j];
        m[i].data[j] = beta1 * m[i].data[j] + (1.0 - beta1) * gj;
        v[i].data[j] = beta2 * v[i].data[j] + (1.0 - beta2) * gj * gj;
        double mhat = m[i].data[j] / bc1;
        double vhat = v[i].data[j] / bc2;
        p.data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace stream_tag {
constexpr std::uint64_t kInit = 1;
constexpr std::uint64_t kPrompt = 2;
constexpr std::uint64_t kRollout = 3;
constexpr std::uint64_t kEvalPrompt = 4;
constexpr std::uint64_t kEvalRollout = 5;
}  // namespace stream_tag

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg)
      : cfg_(std::move(cfg)),
        policy_([&] {
          Rng rng = Rng::stream(cfg_.seed, {stream_tag::kInit});
          PolicyParams p = PolicyParams::init(cfg_.policy, rng);
          head_rng_state_ = rng;  // head init continues the same stream
          return p;
        }()),
        head_(ProjectionHead::init(cfg_.policy.d_hid, cfg_.contrastive, *head_rng_state_,
                                   cfg_.policy.init_scale)) {
    head_rng_state_.reset();
    for (const std::string& name : cfg_.domains) specs_.push_back(&domain_by_name(name));
    if (cfg_.batch_size % specs_.size() != 0)
      throw std::invalid_argument("batch_size must be divisible by the number of domains");
    if (cfg_.batch_size % cfg_.mini_batches_per_step != 0)
      throw std::invalid_argument("batch_size must be divisible by mini_batches_per_step");
    auto params = param_ptrs();
    opt_ = AdamState::init(std::vector<const Tensor*>(params.begin(), params.end()));
  }

  const TrainConfig& config() const { return cfg_; }
  const PolicyParams& policy() const { return policy_; }
  const ProjectionHead& head() const { return head_; }
  std::size_t optimizer_steps() const { return step_; }
  std::size_t train_steps() const { return train_step_; }
  std::size_t minibatches_done() const { return minibatches_; }
  const std::vector<EvalRecord>& eval_history() const { return eval_history_; }

  bool contrastive_enabled() const {
    return cfg_.algo == "mcpo" && cfg_.contrastive.lambda_cl > 0.0;
  }

  /// One rollout batch plus its mini-batch updates; returns one metrics
  /// record per optimizer step.
  std::vector<StepMetrics> train_step() {
    ++train_step_;
    PolicySnapshot snapshot(policy_);
    std::size_t S = specs_.size();
    std::size_t per_domain = cfg_.batch_size / S;
    std::size_t G = cfg_.rollouts_per_prompt;

    std::vector<RolloutGroup> groups(cfg_.batch_size);
    auto fill_slot = [&](std::size_t slot) {
      const DomainSpec& spec = *specs_[slot / per_domain];
      std::uint64_t did = std::uint64_t(spec.domain_id);
      Rng prng = Rng::stream(cfg_.seed, {stream_tag::kPrompt, did, train_step_, slot});
      Prompt prompt =
          sample_prompt(spec, prng, train_prompt_id(train_step_, spec.domain_id, slot));
      Rng rrng = Rng::stream(cfg_.seed, {stream_tag::kRollout, did, train_step_, slot});
      groups[slot] = RolloutGroup{prompt, sample_rollouts(snapshot, spec, prompt, G, rrng)};
    };
    if (cfg_.parallel_rollouts) {
      std::vector<std::future<void>> tasks;
      tasks.reserve(cfg_.batch_size);
      for (std::size_t slot = 0; slot < cfg_.batch_size; ++slot)
        tasks.push_back(std::async(std::launch::async, fill_slot, slot));
      for (auto& task : tasks) task.get();
    } else {
      for (std::size_t slot = 0; slot < cfg_.batch_size; ++slot) fill_slot(slot);
    }

    std::vector<std::vector<double>> advantages;
    advantages.reserve(groups.size());
    for (const RolloutGroup& g : groups) advantages.push_back(group_advantages(g, cfg_.clip));

    // batch-level reward stats, repeated on each mini-batch record
    double reward_sum = 0.0;
    std::vector<std::pair<std::string, double>> by_domain;
    for (std::size_t d = 0; d < S; ++d) {
      double dom_sum = 0.0;
      for (std::size_t s = d * per_domain; s < (d + 1) * per_domain; ++s)
        for (const Rollout& r : groups[s].rollouts) dom_sum += r.reward;
      reward_sum += dom_sum;
      by_domain.emplace_back(specs_[d]->name, dom_sum / double(per_domain * G));
    }
    double reward_mean = reward_sum / double(cfg_.batch_size * G);

    // mini-batches take groups round-robin so each keeps the domain mix
    std::size_t M = cfg_.mini_batches_per_step;
    std::vector<StepMetrics> records;
    for (std::size_t mb = 0; mb < M; ++mb) {
      auto start = std::chrono::steady_clock::now();
      std::vector<const RolloutGroup*> chunk;
      std::vector<std::vector<double>> chunk_adv;
      for (std::size_t slot = mb; slot < groups.size(); slot += M) {
        chunk.push_back(&groups[slot]);
        chunk_adv.push_back(advantages[slot]);
      }

      Tape tape;
      PolicyVars pv = lift_policy(tape, policy_);
      HeadVars hv = lift_head(tape, head_);
      bool detach = warmup_active(minibatches_, cfg_.contrastive);
      ObjectiveResult res =
          build_objective(tape, pv, cfg_.policy, &hv, chunk, chunk_adv, cfg_.clip,
                          cfg_.contrastive, contrastive_enabled(), detach);
      tape.backward(res.objective);

      std::vector<Var> leaves = pv.list();
      for (const Var& v : hv.list()) leaves.push_back(v);
      std::vector<const Tensor*> grads;
      grads.reserve(leaves.size());
      for (const Var& v : leaves) grads.push_back(&v.grad());
      auto params = param_ptrs();
      opt_.update(params, grads, cfg_.learning_rate, cfg_.adam_beta1, cfg_.adam_beta2,
                  cfg_.adam_eps);
      ++minibatches_;
      ++step_;

      StepMetrics m;
      m.step = step_;
      m.train_step = train_step_;
      m.reward_mean = reward_mean;
      m.reward_by_domain = by_domain;
      m.l_grpo = res.report.l_grpo;
      m.l_cross = res.report.l_cross;
      m.l_in = res.report.l_in;
      m.l_mcpo = res.report.l_mcpo;
      m.l_total = res.report.l_total;
      m.n_cross = res.report.n_cross;
      m.n_in = res.report.n_in;
      m.diag = res.report.diag;
      m.mean_entropy = res.mean_entropy;
      m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                            start)
                      .count();
      records.push_back(std::move(m));
    }
    return records;
  }

  /// Per-domain avg@K on held-out prompts (a reserved seed range disjoint
  /// from the training streams), plus their overall mean.
  EvalRecord evaluate() const {
    EvalRecord rec;
    rec.train_step = train_step_;
    double total = 0.0;
    fast::StepWork work;
    std::vector<double> probs;
    for (const DomainSpec* spec : specs_) {
      std::uint64_t did = std::uint64_t(spec->domain_id);
      double score_sum = 0.0;
      for (std::size_t i = 0; i < cfg_.eval_prompts; ++i) {
        Rng prng = Rng::stream(cfg_.seed, {stream_tag::kEvalPrompt, did, i});
        Prompt prompt = sample_prompt(*spec, prng,
                                      std::int64_t(1000000000 + did * 1000000 + i));
        std::vector<double> pmean = fast::prompt_mean(policy_, prompt.tokens);
        Rng rrng = Rng::stream(cfg_.seed, {stream_tag::kEvalRollout, did, i, train_step_});
        double hit = 0.0;
        for (std::size_t k = 0; k < cfg_.eval_samples; ++k)
          hit += fast::sample_one(policy_, pmean, *spec, prompt, rrng, work, probs).reward;
        score_sum += hit / double(cfg_.eval_samples);
      }
      double score = score_sum / double(cfg_.eval_prompts);
      rec.per_domain.emplace_back(spec->name, score);
      total += score;
    }
    rec.overall = total / double(specs_.size());
    return rec;
  }

  /// Full loop: metrics JSONL to `metrics_out`, progress to `console`,
  /// periodic checkpoints under `out_dir` when configured.
  void run(std::ostream* metrics_out, std::ostream* console,
           const std::filesystem::path* out_dir = nullptr) {
    if (console && train_step_ == 0)
      *console << "policy parameters: " << policy_.param_count() << ", projection head: "
               << head_.p1.numel() + head_.pb1.numel() + head_.p2.numel() + head_.pb2.numel()
               << "\n";
    while (train_step_ < cfg_.steps) {
      std::vector<StepMetrics> records = train_step();
      if (metrics_out) {
        for (const StepMetrics& m : records) *metrics_out << metrics_to_json(m).dump() << "\n";
        metrics_out->flush();
      }
      if (console && (train_step_ % 50 == 0 || train_step_ == cfg_.steps)) {
        const StepMetrics& m = records.back();
        *console << "step " << train_step_ << " reward " << m.reward_mean << " l_total "
                 << m.l_total << " entropy " << m.mean_entropy << " wall_ms " << m.wall_ms
                 << "\n";
      }
      if (cfg_.eval_every > 0 && train_step_ % cfg_.eval_every == 0) {
        EvalRecord ev = evaluate();
        eval_history_.push_back(ev);
        if (console) {
          *console << "eval@" << cfg_.eval_samples << " step " << train_step_ << " overall "
                   << ev.overall;
          for (const auto& [name, score] : ev.per_domain) *console << " " << name << " " << score;
          *console << "\n";
        }
      }
      if (out_dir && cfg_.checkpoint_every > 0 && train_step_ % cfg_.checkpoint_every == 0)
        save_checkpoint(*out_dir / ("ckpt_step" + std::to_string(train_step_) + ".json"));
    }
  }

  // -- persistence ----------------------------------------------------------

  nlohmann::json checkpoint_json() const {
    auto tensor_json = [](const Tensor& t) {
      return nlohmann::json{{"shape", t.shape}, {"data", t.data}};
    };
    nlohmann::json policy_tensors = nlohmann::json::object();
    for (const auto& [name, t] : policy_.named()) policy_tensors[name] = tensor_json(*t);
    nlohmann::json head_tensors = nlohmann::json::object();
    for (const auto& [name, t] : head_.named()) head_tensors[name] = tensor_json(*t);
    nlohmann::json opt_m = nlohmann::json::array(), opt_v = nlohmann::json::array();
    for (const Tensor& t : opt_.m) opt_m.push_back(tensor_json(t));
    for (const Tensor& t : opt_.v) opt_v.push_back(tensor_json(t));
    return nlohmann::json{
        {"version", 1},
        {"seed", cfg_.seed},
        {"counters",
         {{"optimizer_steps", step_}, {"train_steps", train_step_}, {"minibatches", minibatches_}}},
        {"policy",
         {{"vocab_size", cfg_.policy.vocab_size},
          {"d_emb", cfg_.policy.d_emb},
          {"d_hid", cfg_.policy.d_hid},
          {"context_window", cfg_.policy.context_window},
          {"tensors", policy_tensors}}},
        {"head",
         {{"proj_dim", cfg_.contrastive.proj_dim},
          {"proj_hidden_dim", cfg_.contrastive.proj_hidden_dim},
          {"tensors", head_tensors}}},
        {"optimizer", {{"t", opt_.t}, {"m", opt_m}, {"v", opt_v}}}};
  }

  void save_checkpoint(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw CheckpointError("cannot write checkpoint: " + path.string());
    out << checkpoint_json().dump() << "\n";
  }

  void load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CheckpointError("cannot read checkpoint: " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw CheckpointError("corrupt checkpoint " + path.string() + ": " + e.what());
    }
    load_checkpoint_json(j, path.string());
  }

  void load_checkpoint_json(const nlohmann::json& j, const std::string& origin) {
    if (!j.contains("version") || j["version"] != 1)
      throw CheckpointError("checkpoint version mismatch in " + origin);
    auto expect = [&](const nlohmann::json& obj, const char* key, std::size_t want,
                      const std::string& field) {
      std::size_t got = obj.at(key).get<std::size_t>();
      if (got != want)
        throw CheckpointError("checkpoint " + field + "=" + std::to_string(got) +
                              " does not match config " + field + "=" + std::to_string(want));
    };
    const nlohmann::json& pj = j.at("policy");
    expect(pj, "vocab_size", cfg_.policy.vocab_size, "policy.vocab_size");
    expect(pj, "d_emb", cfg_.policy.d_emb, "policy.d_emb");
    expect(pj, "d_hid", cfg_.policy.d_hid, "policy.d_hid");
    expect(pj, "context_window", cfg_.policy.context_window, "policy.context_window");
    const nlohmann::json& hj = j.at("head");
    expect(hj, "proj_dim", cfg_.contrastive.proj_dim, "mcpo.proj_dim");
    expect(hj, "proj_hidden_dim", cfg_.contrastive.proj_hidden_dim, "mcpo.proj_hidden_dim");

    auto read_tensor = [&](const nlohmann::json& tj, Tensor& dst, const std::string& name) {
      std::vector<std::size_t> shape = tj.at("shape").get<std::vector<std::size_t>>();
      std::vector<double> data = tj.at("data").get<std::vector<double>>();
      if (shape != dst.shape || data.size() != dst.data.size())
        throw CheckpointError("checkpoint tensor " + name + " has mismatched size");
      dst.data = std::move(data);
    };
    for (auto& [name, t] : policy_.named())
      read_tensor(pj.at("tensors").at(name), *t, "policy." + name);
    for (auto& [name, t] : head_.named())
      read_tensor(hj.at("tensors").at(name), *t, "head." + name);

    const nlohmann::json& oj = j.at("optimizer");
    opt_.t = oj.at("t").get<std::size_t>();
    const nlohmann::json& om = oj.at("m");
    const nlohmann::json& ov = oj.at("v");
    if (om.size() != opt_.m.size() || ov.size() != opt_.v.size())
      throw CheckpointError("checkpoint optimizer state has mismatched size");
    for (std::size_t i = 0; i < opt_.m.size(); ++i) {
      read_tensor(om[i], opt_.m[i], "optimizer.m");
      read_tensor(ov[i], opt_.v[i], "optimizer.v");
    }
    const nlohmann::json& cj = j.at("counters");
    step_ = cj.at("optimizer_steps").get<std::size_t>();
    train_step_ = cj.at("train_steps").get<std::size_t>();
    minibatches_ = cj.at("minibatches").get<std::size_t>();
    if (j.at("seed").get<std::uint64_t>() != cfg_.seed)
      throw CheckpointError("checkpoint seed does not match config seed");
  }

  static std::int64_t train_prompt_id(std::size_t train_step, int domain_id, std::size_t slot) {
    return std::int64_t(train_step) * 1000000 + std::int64_t(domain_id) * 10000 +
           std::int64_t(slot);
  }

 private:
  std::vector<Tensor*> param_ptrs() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : policy_.named()) out.push_back(t);
    for (auto& [name, t] : head_.named()) out.push_back(t);
    return out;
  }

  TrainConfig cfg_;
  std::optional<Rng> head_rng_state_;
  PolicyParams policy_;
  ProjectionHead head_;
  std::vector<const DomainSpec*> specs_;
  AdamState opt_;
  std::size_t step_ = 0;
  std::size_t train_step_ = 0;
  std::size_t minibatches_ = 0;
  std::vector<EvalRecord> eval_history_;
};

}  // namespace mcpo
