#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mcpo/contrastive.hpp"
#include "mcpo/contrastive_oracle.hpp"
#include "mcpo/objective.hpp"

using namespace mcpo;

namespace {

struct Spec {
  std::int64_t pid;
  int domain;
  int z;
  std::vector<double> v;
};

ContrastivePool make_pool(Tape& tape, const std::vector<Spec>& specs) {
  ContrastivePool pool;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    PoolEntry e;
    e.index = i;
    e.prompt_id = specs[i].pid;
    e.domain_id = specs[i].domain;
    e.correct = specs[i].z;
    e.reward = specs[i].z;
    e.v = l2_normalize(tape.leaf(Tensor::vector(specs[i].v)));
    e.v_value = e.v.value().data;
    pool.entries.push_back(std::move(e));
  }
  return pool;
}

std::vector<oracle::Entry> to_oracle(const ContrastivePool& pool) {
  std::vector<oracle::Entry> out;
  for (const PoolEntry& e : pool.entries)
    out.push_back({e.prompt_id, e.domain_id, e.correct, e.reward, e.v_value});
  return out;
}

std::vector<Spec> random_pool_specs(std::uint64_t seed, std::size_t n, std::size_t dim,
                                    int domains, std::size_t group) {
  Rng rng = Rng::stream(seed, {31});
  std::vector<Spec> specs;
  for (std::size_t i = 0; i < n; ++i) {
    Spec s;
    s.pid = std::int64_t(i / group);
    s.domain = 1 + int(s.pid) % domains;
    s.z = int(rng.next_below(2));
    for (std::size_t d = 0; d < dim; ++d) s.v.push_back(rng.uniform(-1.0, 1.0));
    specs.push_back(std::move(s));
  }
  return specs;
}

struct FastLosses {
  double cross, in, n_cross, n_in;
};

FastLosses fast_losses(Tape& tape, const ContrastivePool& pool, double tau) {
  PositiveSets sets = positive_sets(pool);
  auto protos = prototypes(pool);
  auto weights = cross_weights(pool, sets, protos);
  Masses m = masses(sets, weights);
  return {cross_loss(tape, pool, sets, weights, tau, m.n_cross).value().item(),
          in_loss(tape, pool, sets, tau, m.n_in).value().item(), m.n_cross, m.n_in};
}

PolicyConfig tiny_config() {
  PolicyConfig c;
  c.vocab_size = 8;
  c.d_emb = 3;
  c.d_hid = 4;
  c.context_window = 2;
  c.max_response_len = 6;
  c.pad_token = 6;
  c.eos_token = 7;
  return c;
}

ContrastiveConfig tiny_ccfg() {
  ContrastiveConfig c;
  c.proj_dim = 3;
  c.proj_hidden_dim = 3;
  c.tau = 0.5;
  return c;
}

// two prompt groups in different domains with mixed rewards
std::vector<RolloutGroup> tiny_groups(const PolicyConfig& cfg, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, {32});
  std::vector<RolloutGroup> groups;
  for (int p = 0; p < 2; ++p) {
    RolloutGroup g;
    g.prompt.prompt_id = p + 1;
    g.prompt.domain_id = p + 1;
    for (int i = 0; i < 3; ++i) g.prompt.tokens.push_back(int(rng.next_below(cfg.vocab_size)));
    for (int r = 0; r < 3; ++r) {
      Rollout roll;
      roll.prompt_id = g.prompt.prompt_id;
      roll.domain_id = g.prompt.domain_id;
      std::size_t len = 1 + rng.next_below(3);
      for (std::size_t t = 0; t < len; ++t)
        roll.tokens.push_back(int(rng.next_below(cfg.vocab_size)));
      for (std::size_t t = 0; t < len; ++t) roll.old_logprobs.push_back(rng.uniform(-3.0, -0.2));
      roll.reward = (p + r) % 2;  // both domains contribute corrects
      g.rollouts.push_back(std::move(roll));
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

}  // namespace

TEST_CASE("build_pool counts, labels, and normalizes") {
  PolicyConfig cfg = tiny_config();
  ContrastiveConfig ccfg = tiny_ccfg();
  Rng rng = Rng::stream(33, {});
  PolicyParams params = PolicyParams::init(cfg, rng);
  ProjectionHead head = ProjectionHead::init(cfg.d_hid, ccfg, rng);

  Tape tape;
  PolicyVars pv = lift_policy(tape, params);
  HeadVars hv = lift_head(tape, head);

  std::vector<RolloutEval> evals;
  std::vector<Rollout> store;
  std::vector<const Rollout*> rollouts;
  std::vector<int> prompt = {0, 1, 2};
  Var pmean = prompt_mean_var(tape, pv, prompt);
  for (int i = 0; i < 6; ++i) {
    Rollout r;
    r.prompt_id = i / 3;
    r.domain_id = 1 + i / 3;
    r.tokens = {i % 5, cfg.eos_token};
    r.reward = i % 2;
    store.push_back(r);
  }
  for (const Rollout& r : store) {
    evals.push_back(eval_rollout(tape, pv, cfg, pmean, r.tokens, false));
    rollouts.push_back(&r);
  }
  ContrastivePool pool = build_pool(tape, hv, evals, rollouts, ccfg, false);
  REQUIRE(pool.size() == 6);
  for (const PoolEntry& e : pool.entries) {
    double sq = 0.0;
    for (double x : e.v_value) sq += x * x;
    CHECK(std::fabs(std::sqrt(sq) - 1.0) < 1e-9);
    CHECK(e.correct == (e.reward >= 0.5 ? 1 : 0));
  }

  // all-zero rewards: no anchors, no prototypes, both losses zero
  for (Rollout& r : store) r.reward = 0.0;
  Tape t2;
  PolicyVars pv2 = lift_policy(t2, params);
  HeadVars hv2 = lift_head(t2, head);
  Var pm2 = prompt_mean_var(t2, pv2, prompt);
  std::vector<RolloutEval> evals2;
  for (const Rollout& r : store) evals2.push_back(eval_rollout(t2, pv2, cfg, pm2, r.tokens, false));
  ContrastivePool dead = build_pool(t2, hv2, evals2, rollouts, ccfg, false);
  CHECK(prototypes(dead).empty());
  FastLosses fl = fast_losses(t2, dead, 1.0);
  CHECK(fl.cross == 0.0);
  CHECK(fl.in == 0.0);
  CHECK(fl.n_cross == 0.0);
  CHECK(fl.n_in == 0.0);
}

TEST_CASE("prototypes") {
  Tape tape;
  // singleton: prototype equals the embedding
  ContrastivePool p1 = make_pool(tape, {{1, 1, 1, {3.0, 4.0}}});
  auto protos1 = prototypes(p1);
  REQUIRE(protos1.count(1) == 1);
  CHECK(std::fabs(protos1[1][0] - 0.6) < 1e-12);
  CHECK(std::fabs(protos1[1][1] - 0.8) < 1e-12);

  // antipodal correct rollouts: guarded zero prototype
  ContrastivePool p2 = make_pool(tape, {{1, 1, 1, {1.0, 0.0}}, {1, 1, 1, {-1.0, 0.0}}});
  auto protos2 = prototypes(p2);
  CHECK(protos2[1] == std::vector<double>{0.0, 0.0});

  // two orthonormal corrects: (e1 + e2) / sqrt(2)
  ContrastivePool p3 = make_pool(tape, {{1, 1, 1, {1.0, 0.0}}, {1, 1, 1, {0.0, 1.0}}});
  auto protos3 = prototypes(p3);
  CHECK(std::fabs(protos3[1][0] - 1.0 / std::sqrt(2.0)) < 1e-12);
  CHECK(std::fabs(protos3[1][1] - 1.0 / std::sqrt(2.0)) < 1e-12);

  // incorrect rollouts never form prototypes
  ContrastivePool p4 = make_pool(tape, {{1, 1, 0, {1.0, 0.0}}});
  CHECK(prototypes(p4).empty());
}

TEST_CASE("compat_weight closed forms") {
  std::vector<double> e1 = {1.0, 0.0};
  std::vector<double> e2 = {0.0, 1.0};
  std::vector<double> ne1 = {-1.0, 0.0};
  CHECK(compat_weight(e1, e1) == 1.0);
  CHECK(compat_weight(e1, e2) == 0.5);
  CHECK(compat_weight(e1, ne1) == 0.0);
  CHECK(compat_weight(e1, e2) == compat_weight(e2, e1));
}

TEST_CASE("positive sets") {
  Tape tape;
  // one domain only: no cross positives anywhere
  ContrastivePool mono = make_pool(
      tape, {{1, 1, 1, {1, 0}}, {1, 1, 1, {0, 1}}, {2, 1, 1, {1, 1}}, {2, 1, 0, {1, -1}}});
  PositiveSets ms = positive_sets(mono);
  for (const auto& c : ms.cross) CHECK(c.empty());
  // same-prompt correct sibling is an in-domain positive
  CHECK(std::find(ms.in[0].begin(), ms.in[0].end(), 1) != ms.in[0].end());
  // incorrect entries are never anchors
  CHECK(ms.in[3].empty());
  CHECK(ms.cross[3].empty());

  // spec enumeration: (dom A, z=1), (dom B, z=1), (dom A, z=0)
  ContrastivePool tri = make_pool(tape, {{1, 1, 1, {1, 0}}, {2, 2, 1, {0, 1}}, {3, 1, 0, {1, 1}}});
  PositiveSets ts = positive_sets(tri);
  CHECK(ts.cross[0] == std::vector<std::size_t>{1});
  CHECK(ts.in[0].empty());
  CHECK(ts.cross[1] == std::vector<std::size_t>{0});
}

TEST_CASE("masses") {
  Tape tape;
  ContrastivePool none = make_pool(tape, {{1, 1, 0, {1, 0}}, {2, 2, 0, {0, 1}}});
  PositiveSets s0 = positive_sets(none);
  auto w0 = cross_weights(none, s0, prototypes(none));
  Masses m0 = masses(s0, w0);
  CHECK(m0.n_cross == 0.0);
  CHECK(m0.n_in == 0.0);

  ContrastivePool in2 = make_pool(tape, {{1, 1, 1, {1, 0}}, {2, 1, 1, {0, 1}}});
  PositiveSets s1 = positive_sets(in2);
  Masses m1 = masses(s1, cross_weights(in2, s1, prototypes(in2)));
  CHECK(m1.n_in == 2.0);

  // two correct cross-domain entries with singleton prototypes: N_cross = 2 omega
  std::vector<double> a = {0.8, 0.6};
  std::vector<double> b = {0.6, 0.8};
  ContrastivePool cr = make_pool(tape, {{1, 1, 1, a}, {2, 2, 1, b}});
  PositiveSets s2 = positive_sets(cr);
  Masses m2 = masses(s2, cross_weights(cr, s2, prototypes(cr)));
  double dot = a[0] * b[0] + a[1] * b[1];
  CHECK(std::fabs(m2.n_cross - 2.0 * (dot + 1.0) / 2.0) < 1e-12);
}

TEST_CASE("cross loss closed forms") {
  Tape tape;
  // identical embeddings across two domains, tau = 1: each term is -log(e/e) = 0
  ContrastivePool p = make_pool(tape, {{1, 1, 1, {1, 0}}, {2, 2, 1, {1, 0}}});
  FastLosses fl = fast_losses(tape, p, 1.0);
  CHECK(std::fabs(fl.cross) < 1e-12);
  CHECK(fl.n_cross == 2.0);
}

TEST_CASE("in loss three-entry closed form") {
  Tape tape;
  ContrastivePool p =
      make_pool(tape, {{1, 1, 1, {1, 0}}, {2, 1, 1, {1, 0}}, {3, 1, 0, {0, 1}}});
  FastLosses fl = fast_losses(tape, p, 1.0);
  double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(std::fabs(fl.in - expected) < 1e-12);
  CHECK(std::fabs(expected - 0.31326) < 1e-5);
  CHECK(fl.n_in == 2.0);

  // single correct entry: no in-domain positives
  ContrastivePool lone = make_pool(tape, {{1, 1, 1, {1, 0}}, {2, 1, 0, {0, 1}}});
  CHECK(fast_losses(tape, lone, 1.0).in == 0.0);
}

TEST_CASE("denominator identity") {
  // sum_{k != i} exp(s_ik) must equal exp(s_ij) + sum_{k != i,j} exp(s_ik)
  std::vector<Spec> specs = random_pool_specs(77, 12, 5, 3, 3);
  Tape tape;
  ContrastivePool pool = make_pool(tape, specs);
  double tau = 0.7;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    for (std::size_t j = 0; j < pool.size(); ++j) {
      if (i == j) continue;
      double all = 0.0, split = 0.0;
      for (std::size_t k = 0; k < pool.size(); ++k) {
        if (k == i) continue;
        double s = 0.0;
        for (std::size_t d = 0; d < pool.entries[i].v_value.size(); ++d)
          s += pool.entries[i].v_value[d] * pool.entries[k].v_value[d];
        double e = std::exp(s / tau);
        all += e;
        if (k != j) split += e;
      }
      double s_ij = 0.0;
      for (std::size_t d = 0; d < pool.entries[i].v_value.size(); ++d)
        s_ij += pool.entries[i].v_value[d] * pool.entries[j].v_value[d];
      CHECK(std::fabs(all - (std::exp(s_ij / tau) + split)) < 1e-12 * std::max(1.0, all));
    }
  }
}

TEST_CASE("oracle equivalence on 200 seeded pools") {
  const double taus[] = {0.1, 0.5, 1.0};
  for (std::uint64_t trial = 0; trial < 200; ++trial) {
    Rng shape = Rng::stream(trial, {34});
    std::size_t n = 2 + shape.next_below(63);
    std::size_t dim = 2 + shape.next_below(7);
    std::size_t group = 2 + shape.next_below(3);
    int domains = 1 + int(shape.next_below(4));
    double tau = taus[trial % 3];
    std::vector<Spec> specs = random_pool_specs(trial, n, dim, domains, group);

    Tape tape;
    ContrastivePool pool = make_pool(tape, specs);
    FastLosses fl = fast_losses(tape, pool, tau);
    auto entries = to_oracle(pool);
    CHECK(std::fabs(fl.cross - oracle::naive_cross_loss(entries, tau)) < 1e-10);
    CHECK(std::fabs(fl.in - oracle::naive_in_loss(entries, tau)) < 1e-10);
  }
}

TEST_CASE("permutation invariance and bounds") {
  std::vector<Spec> specs = random_pool_specs(55, 20, 4, 3, 2);
  Tape tape;
  ContrastivePool pool = make_pool(tape, specs);
  FastLosses base = fast_losses(tape, pool, 0.4);

  // losses are nonnegative (every per-pair InfoNCE term is >= 0)
  CHECK(base.cross >= 0.0);
  CHECK(base.in >= 0.0);

  // N_cross bounded by the cross-positive pair count (omega <= 1)
  PositiveSets sets = positive_sets(pool);
  std::size_t cross_pairs = 0;
  for (const auto& c : sets.cross) cross_pairs += c.size();
  CHECK(base.n_cross <= double(cross_pairs) + 1e-12);

  // omega symmetric and bounded
  auto protos = prototypes(pool);
  for (auto& [pi, ci] : protos)
    for (auto& [pj, cj] : protos) {
      double w = compat_weight(ci, cj);
      CHECK(w >= 0.0);
      CHECK(w <= 1.0);
      CHECK(w == compat_weight(cj, ci));
    }

  // shuffle entries; losses and masses must not move
  std::vector<Spec> shuffled = specs;
  Rng rng = Rng::stream(56, {});
  for (std::size_t i = shuffled.size(); i > 1; --i)
    std::swap(shuffled[i - 1], shuffled[rng.next_below(i)]);
  Tape t2;
  ContrastivePool pool2 = make_pool(t2, shuffled);
  FastLosses perm = fast_losses(t2, pool2, 0.4);
  CHECK(std::fabs(base.cross - perm.cross) < 1e-12);
  CHECK(std::fabs(base.in - perm.in) < 1e-12);
  CHECK(std::fabs(base.n_cross - perm.n_cross) < 1e-12);
  CHECK(base.n_in == perm.n_in);
}

TEST_CASE("total_loss combination") {
  ContrastiveConfig cfg;
  cfg.lambda_cl = 0.0;
  Masses m;
  LossReport off = total_loss(1.75, 3.0, 4.0, m, cfg, PoolDiagnostics{});
  CHECK(off.l_total == off.l_grpo);

  cfg.lambda_cl = 0.1;
  cfg.lambda_cross = 0.5;
  cfg.lambda_in = 0.5;
  LossReport r = total_loss(2.0, 1.0, 1.0, m, cfg, PoolDiagnostics{});
  CHECK(std::fabs(r.l_total - 2.1) < 1e-12);
  CHECK(std::fabs(r.l_total - (r.l_grpo + cfg.lambda_cl * r.l_mcpo)) < 1e-12);
}

TEST_CASE("pool diagnostics") {
  Tape tape;
  // all-correct pool: ratio 1, no negatives -> NaN sentinels for neg/margin
  ContrastivePool all = make_pool(tape, {{1, 1, 1, {1, 0}}, {2, 2, 1, {0, 1}}});
  PositiveSets sa = positive_sets(all);
  auto wa = cross_weights(all, sa, prototypes(all));
  PoolDiagnostics da = pool_diagnostics(all, sa, wa, 0.5);
  CHECK(da.positive_ratio == 1.0);
  CHECK(std::isnan(da.mean_neg_logit));
  CHECK(std::isnan(da.margin));

  // hand-built 4-entry pool
  std::vector<double> e1 = {1.0, 0.0};
  std::vector<double> e2 = {0.0, 1.0};
  ContrastivePool p = make_pool(
      tape, {{1, 1, 1, e1}, {2, 2, 1, e1}, {3, 1, 0, e2}, {4, 2, 0, {-1.0, 0.0}}});
  PositiveSets sp = positive_sets(p);
  auto wp = cross_weights(p, sp, prototypes(p));
  double tau = 0.5;
  PoolDiagnostics d = pool_diagnostics(p, sp, wp, tau);
  CHECK(d.positive_ratio == 0.5);
  // cross pairs: (0,1) and (1,0), both logit 1/tau
  CHECK(std::fabs(d.mean_pos_logit - 1.0 / tau) < 1e-12);
  // negatives: each anchor (= e1) vs {e2: 0, -e1: -1} => mean -0.5/tau
  CHECK(std::fabs(d.mean_neg_logit - (-0.5 / tau)) < 1e-12);
  CHECK(std::fabs(d.margin - (1.5 / tau)) < 1e-12);
  CHECK(std::fabs(d.mean_omega - 1.0) < 1e-12);
  // no same-prompt siblings here
  CHECK(d.pos_per_anchor == 0.0);
}

TEST_CASE("gradient flow through the full objective") {
  PolicyConfig cfg = tiny_config();
  ContrastiveConfig ccfg = tiny_ccfg();
  ClipConfig clip;
  Rng rng = Rng::stream(60, {});
  PolicyParams params = PolicyParams::init(cfg, rng);
  ProjectionHead head = ProjectionHead::init(cfg.d_hid, ccfg, rng);
  std::vector<RolloutGroup> groups = tiny_groups(cfg, 61);
  std::vector<const RolloutGroup*> gptrs;
  std::vector<std::vector<double>> advantages;
  for (const RolloutGroup& g : groups) {
    gptrs.push_back(&g);
    advantages.push_back(group_advantages(g, clip));
  }

  auto full = [&](Tape& t, std::span<const Var> vars) {
    PolicyVars pv{vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6]};
    HeadVars hv{vars[7], vars[8], vars[9], vars[10]};
    return build_objective(t, pv, cfg, &hv, gptrs, advantages, clip, ccfg, true, false)
        .objective;
  };
  std::vector<std::pair<std::string, Tensor*>> all_params = params.named();
  for (auto& [name, tensor] : head.named()) all_params.emplace_back(name, tensor);
  auto report = grad_check(full, all_params, 1e-5, 1e-4);
  CHECK(report.all_pass);

  // lambda_cl = 0: head gradients are exactly zero
  ContrastiveConfig off = ccfg;
  off.lambda_cl = 0.0;
  Tape tape;
  PolicyVars pv = lift_policy(tape, params);
  HeadVars hv = lift_head(tape, head);
  ObjectiveResult res =
      build_objective(tape, pv, cfg, &hv, gptrs, advantages, clip, off, true, false);
  tape.backward(res.objective);
  for (const Var& v : hv.list())
    for (double g : v.grad().data) CHECK(g == 0.0);
}

TEST_CASE("descent on the in-domain loss raises the mean positive logit") {
  std::vector<Spec> specs = random_pool_specs(70, 10, 4, 1, 2);
  for (Spec& s : specs) s.z = 1;  // every entry correct, one domain
  double tau = 0.5;

  std::vector<Tensor> raw;
  for (const Spec& s : specs) raw.push_back(Tensor::vector(s.v));

  auto mean_pos_logit = [&](const std::vector<Tensor>& embeds) {
    Tape t;
    ContrastivePool pool;
    for (std::size_t i = 0; i < embeds.size(); ++i) {
      PoolEntry e;
      e.index = i;
      e.prompt_id = specs[i].pid;
      e.domain_id = specs[i].domain;
      e.correct = 1;
      e.v = l2_normalize(t.leaf(embeds[i]));
      e.v_value = e.v.value().data;
      pool.entries.push_back(std::move(e));
    }
    PositiveSets sets = positive_sets(pool);
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < pool.size(); ++i)
      for (std::size_t j : sets.in[i]) {
        double dot = 0.0;
        for (std::size_t d = 0; d < pool.entries[i].v_value.size(); ++d)
          dot += pool.entries[i].v_value[d] * pool.entries[j].v_value[d];
        total += dot / tau;
        ++pairs;
      }
    return total / double(pairs);
  };

  double before = mean_pos_logit(raw);

  Tape tape;
  ContrastivePool pool;
  std::vector<Var> leaves;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    Var leaf = tape.leaf(raw[i]);
    leaves.push_back(leaf);
    PoolEntry e;
    e.index = i;
    e.prompt_id = specs[i].pid;
    e.domain_id = specs[i].domain;
    e.correct = 1;
    e.v = l2_normalize(leaf);
    e.v_value = e.v.value().data;
    pool.entries.push_back(std::move(e));
  }
  PositiveSets sets = positive_sets(pool);
  Masses m = masses(sets, cross_weights(pool, sets, prototypes(pool)));
  Var loss = in_loss(tape, pool, sets, tau, m.n_in);
  tape.backward(loss);
  for (std::size_t i = 0; i < raw.size(); ++i)
    for (std::size_t d = 0; d < raw[i].numel(); ++d)
      raw[i].data[d] -= 1e-3 * leaves[i].grad().data[d];

  CHECK(mean_pos_logit(raw) > before);
}
