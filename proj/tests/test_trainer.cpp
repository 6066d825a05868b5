#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "mcpo/config.hpp"
#include "mcpo/trainer.hpp"

using namespace mcpo;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.batch_size = 4;
  c.rollouts_per_prompt = 3;
  c.steps = 4;
  c.seed = 11;
  c.domains = {"modmath", "saferchoice"};
  c.eval_every = 0;
  c.eval_prompts = 2;
  c.eval_samples = 4;
  c.policy.d_emb = 6;
  c.policy.d_hid = 8;
  c.policy.context_window = 3;
  c.policy.max_response_len = 6;
  c.contrastive.proj_dim = 4;
  c.contrastive.proj_hidden_dim = 4;
  c.contrastive.warmup_batches = 0;
  return c;
}

std::string run_metrics(const TrainConfig& cfg) {
  Trainer t(cfg);
  std::ostringstream metrics;
  t.run(&metrics, nullptr);
  return metrics.str();
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data == b.data;
}

}  // namespace

TEST_CASE("same seed, serial mode: byte-identical metric streams") {
  TrainConfig cfg = small_config();
  CHECK(run_metrics(cfg) == run_metrics(cfg));
}

TEST_CASE("parallel rollout generation yields the same batch as serial") {
  TrainConfig cfg = small_config();
  std::string serial = run_metrics(cfg);
  cfg.parallel_rollouts = true;
  CHECK(run_metrics(cfg) == serial);
}

TEST_CASE("lambda_cl = 0 matches the grpo-only code path bit for bit") {
  TrainConfig a = small_config();
  a.algo = "mcpo";
  a.contrastive.lambda_cl = 0.0;
  TrainConfig b = small_config();
  b.algo = "grpo";
  CHECK(run_metrics(a) == run_metrics(b));
}

TEST_CASE("metric records are complete and gap-free") {
  TrainConfig cfg = small_config();
  cfg.mini_batches_per_step = 2;
  Trainer t(cfg);
  std::ostringstream metrics;
  t.run(&metrics, nullptr);
  std::istringstream in(metrics.str());
  std::string line;
  std::size_t expect_step = 1;
  const char* keys[] = {"step",    "train_step", "reward_mean", "rewards",  "l_grpo",
                        "l_cross", "l_in",       "l_mcpo",      "l_total",  "n_cross",
                        "n_in",    "entropy",    "pos_per_anchor", "positive_ratio",
                        "mean_omega", "pos_logit", "neg_logit", "margin"};
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j.at("step").get<std::size_t>() == expect_step);
    for (const char* k : keys) REQUIRE(j.contains(k));
    // the combination identity holds on every record
    double lhs = j.at("l_total").get<double>();
    double rhs = j.at("l_grpo").get<double>() +
                 cfg.contrastive.lambda_cl *
                     (cfg.contrastive.lambda_cross * j.at("l_cross").get<double>() +
                      cfg.contrastive.lambda_in * j.at("l_in").get<double>());
    CHECK(std::fabs(lhs - rhs) < 1e-12);
    ++expect_step;
    ++lines;
  }
  CHECK(lines == cfg.steps * cfg.mini_batches_per_step);
}

TEST_CASE("ratios are one before the first update of a step and drift after it") {
  TrainConfig cfg = small_config();
  Trainer t(cfg);
  PolicyParams before = t.policy();
  PolicySnapshot snap(before);
  const DomainSpec& spec = domain_by_name("modmath");
  Rng prng = Rng::stream(99, {1});
  Prompt prompt = sample_prompt(spec, prng, 7);
  Rng rrng = Rng::stream(99, {2});
  auto rollouts = sample_rollouts(snap, spec, prompt, 3, rrng);

  auto max_ratio_dev = [&](const PolicyParams& params) {
    Tape tape;
    PolicyVars pv = lift_policy(tape, params);
    Var pm = prompt_mean_var(tape, pv, prompt.tokens);
    double dev = 0.0;
    for (const Rollout& r : rollouts) {
      RolloutEval ev = eval_rollout(tape, pv, params.cfg, pm, r.tokens, false);
      for (std::size_t i = 0; i < ev.logp.size(); ++i)
        dev = std::max(dev,
                       std::fabs(std::exp(ev.logp[i].value().item() - r.old_logprobs[i]) - 1.0));
    }
    return dev;
  };
  CHECK(max_ratio_dev(before) < 1e-10);
  t.train_step();
  CHECK(max_ratio_dev(t.policy()) > 1e-8);
}

TEST_CASE("warmup gates contrastive gradients away from the backbone") {
  TrainConfig on = small_config();
  on.contrastive.warmup_batches = 2;
  on.contrastive.lambda_cl = 0.1;
  on.steps = 4;
  TrainConfig off = on;
  off.contrastive.lambda_cl = 0.0;

  Trainer a(on), b(off);
  for (std::size_t s = 0; s < on.steps; ++s) {
    a.train_step();
    b.train_step();
    bool policy_equal = true;
    auto an = a.policy().named();
    auto bn = b.policy().named();
    for (std::size_t i = 0; i < an.size(); ++i)
      policy_equal = policy_equal && tensors_equal(*an[i].second, *bn[i].second);
    if (s + 1 <= 2) {
      // during warmup the backbone never sees contrastive gradients
      CHECK(policy_equal);
      // ...but the projection head trains under lambda_cl > 0
      if (s == 0) CHECK_FALSE(tensors_equal(a.head().p1, b.head().p1));
    } else {
      CHECK_FALSE(policy_equal);
    }
  }
}

TEST_CASE("warmup_batches = 0 means joint updates from the very first mini-batch") {
  TrainConfig on = small_config();
  on.contrastive.warmup_batches = 0;
  on.contrastive.lambda_cl = 0.1;
  TrainConfig off = on;
  off.contrastive.lambda_cl = 0.0;
  Trainer a(on), b(off);
  a.train_step();
  b.train_step();
  CHECK_FALSE(tensors_equal(a.policy().embed, b.policy().embed));
}

TEST_CASE("evaluate") {
  TrainConfig cfg = small_config();
  cfg.policy = PolicyConfig{};  // full-size defaults, fresh random policy
  cfg.domains = {"modmath"};
  cfg.batch_size = 2;
  Trainer t(cfg);
  EvalRecord ev = t.evaluate();
  REQUIRE(ev.per_domain.size() == 1);
  CHECK(ev.per_domain[0].first == "modmath");
  CHECK(ev.per_domain[0].second < 0.25);  // chance level for a random policy
  CHECK(ev.overall == ev.per_domain[0].second);

  EvalRecord again = t.evaluate();
  CHECK(again.overall == ev.overall);  // deterministic given (seed, step)
}

TEST_CASE("checkpoint save, load, resume") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "mcpo_test_ckpt";
  fs::create_directories(dir);
  fs::path ckpt = dir / "ckpt.json";

  TrainConfig cfg = small_config();
  cfg.steps = 6;

  // uninterrupted reference run
  Trainer full(cfg);
  std::ostringstream full_metrics;
  full.run(&full_metrics, nullptr);

  // interrupted at step 3, then resumed
  TrainConfig half = cfg;
  half.steps = 3;
  Trainer first(half);
  std::ostringstream first_metrics;
  first.run(&first_metrics, nullptr);
  first.save_checkpoint(ckpt);

  Trainer second(cfg);
  second.load_checkpoint(ckpt);
  // round-trip restored every parameter bit-exactly
  auto fn = first.policy().named();
  auto sn = second.policy().named();
  for (std::size_t i = 0; i < fn.size(); ++i) CHECK(tensors_equal(*fn[i].second, *sn[i].second));
  CHECK(second.train_steps() == 3);

  std::ostringstream second_metrics;
  second.run(&second_metrics, nullptr);
  CHECK(first_metrics.str() + second_metrics.str() == full_metrics.str());

  auto fin = full.policy().named();
  auto res = second.policy().named();
  for (std::size_t i = 0; i < fin.size(); ++i) CHECK(tensors_equal(*fin[i].second, *res[i].second));

  // dimension mismatch is an explicit error
  TrainConfig wrong = cfg;
  wrong.contrastive.proj_dim = 7;
  Trainer bad(wrong);
  CHECK_THROWS_AS(bad.load_checkpoint(ckpt), CheckpointError);

  // corrupt file
  {
    std::ofstream out(dir / "corrupt.json");
    out << "{ not json";
  }
  Trainer bad2(cfg);
  CHECK_THROWS_AS(bad2.load_checkpoint(dir / "corrupt.json"), CheckpointError);

  // version mismatch
  {
    nlohmann::json j = full.checkpoint_json();
    j["version"] = 999;
    std::ofstream out(dir / "version.json");
    out << j.dump();
  }
  Trainer bad3(cfg);
  CHECK_THROWS_AS(bad3.load_checkpoint(dir / "version.json"), CheckpointError);

  fs::remove_all(dir);
}

TEST_CASE("trainer rejects configs violating batch divisibility") {
  TrainConfig cfg = small_config();
  cfg.batch_size = 5;  // two domains
  CHECK_THROWS_AS(Trainer(cfg), std::invalid_argument);
}
