#pragma once

#include <span>
#include <vector>

#include "mcpo/contrastive.hpp"
#include "mcpo/grpo.hpp"
#include "mcpo/policy.hpp"

namespace mcpo {

/// Differentiable total objective for one PPO mini-batch plus the scalar
/// report. The optimized objective adds the entropy bonus on top of the
/// reported l_total (the report keeps the exact combination identity).
struct ObjectiveResult {
  Var objective;
  LossReport report;
  double mean_entropy = 0.0;
};

inline ObjectiveResult build_objective(Tape& tape, const PolicyVars& pv,
                                       const PolicyConfig& pcfg, const HeadVars* hv,
                                       std::span<const RolloutGroup* const> groups,
                                       std::span<const std::vector<double>> advantages,
                                       const ClipConfig& clip, const ContrastiveConfig& ccfg,
                                       bool contrastive_enabled, bool warmup_detach) {
  bool want_entropy = clip.entropy_coeff != 0.0;
  std::vector<RolloutEval> evals;
  std::vector<const Rollout*> rollouts;
  std::vector<double> flat_adv;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const RolloutGroup& group = *groups[g];
    Var pmean = prompt_mean_var(tape, pv, group.prompt.tokens);
    for (std::size_t r = 0; r < group.rollouts.size(); ++r) {
      evals.push_back(
          eval_rollout(tape, pv, pcfg, pmean, group.rollouts[r].tokens, want_entropy));
      rollouts.push_back(&group.rollouts[r]);
      flat_adv.push_back(advantages[g][r]);
    }
  }

  Var l_grpo = clipped_loss(tape, evals, rollouts, flat_adv, clip.eps_clip);
  Var bonus = entropy_bonus(tape, evals, clip.entropy_coeff);

  ObjectiveResult out;
  if (want_entropy) {
    double ent = 0.0;
    std::size_t steps = 0;
    for (const RolloutEval& ev : evals)
      for (const Var& h : ev.entropy) {
        ent += h.value().item();
        ++steps;
      }
    out.mean_entropy = steps ? ent / double(steps) : 0.0;
  }

  if (contrastive_enabled && hv) {
    ContrastivePool pool = build_pool(tape, *hv, evals, rollouts, ccfg, warmup_detach);
    PositiveSets sets = positive_sets(pool);
    auto protos = prototypes(pool);
    auto weights = cross_weights(pool, sets, protos);
    Masses m = masses(sets, weights);
    Var l_cross = cross_loss(tape, pool, sets, weights, ccfg.tau, m.n_cross);
    Var l_in = in_loss(tape, pool, sets, ccfg.tau, m.n_in);
    PoolDiagnostics diag = pool_diagnostics(pool, sets, weights, ccfg.tau);
    Var mcpo_term = add(scale(l_cross, ccfg.lambda_cross), scale(l_in, ccfg.lambda_in));
    out.objective = add(add(l_grpo, scale(mcpo_term, ccfg.lambda_cl)), bonus);
    out.report = total_loss(l_grpo.value().item(), l_cross.value().item(),
                            l_in.value().item(), m, ccfg, diag);
  } else {
    out.objective = add(l_grpo, bonus);
    Masses m;
    out.report = total_loss(l_grpo.value().item(), 0.0, 0.0, m, ccfg, PoolDiagnostics{});
  }
  return out;
}

}  // namespace mcpo
