#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "mcpo/policy.hpp"
#include "mcpo/tensor.hpp"

namespace mcpo {

struct ClipConfig {
  double eps_clip = 0.2;        // PPO-style clip half-width
  double eps_std = 1e-4;        // stabilizer added to the group reward std
  double entropy_coeff = 0.001;
};

struct RolloutGroup {
  Prompt prompt;
  std::vector<Rollout> rollouts;  // G >= 2, all for the same prompt
};

/// Within-group relative advantages: (r - mean) / (popstd + eps_std).
/// Population std, so a two-point {1, 0} group gives exactly +-1 as
/// eps_std -> 0. All-equal rewards give all-zero advantages.
inline std::vector<double> group_advantages(std::span<const double> rewards, double eps_std) {
  if (rewards.size() < 2)
    throw std::invalid_argument("group_advantages: need at least two rollouts");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= double(rewards.size());
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= double(rewards.size());
  double denom = std::sqrt(var) + eps_std;
  std::vector<double> adv(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i)
    adv[i] = denom > 0.0 ? (rewards[i] - mean) / denom : 0.0;
  return adv;
}

inline std::vector<double> group_advantages(const RolloutGroup& group, const ClipConfig& cfg) {
  std::vector<double> rewards;
  rewards.reserve(group.rollouts.size());
  for (const Rollout& r : group.rollouts) rewards.push_back(r.reward);
  return group_advantages(rewards, cfg.eps_std);
}

/// Clipped token-level surrogate over a flattened batch of rollouts:
///   -(1/(B*G)) sum_rollouts (1/|y|) sum_t min(rho*A, clip(rho, 1-e, 1+e)*A)
/// `evals` must be aligned with `rollouts` and `advantages` (one advantage
/// per rollout, broadcast over its tokens).
inline Var clipped_loss(Tape& tape, std::span<const RolloutEval> evals,
                        std::span<const Rollout* const> rollouts,
                        std::span<const double> advantages, double eps_clip) {
  if (evals.empty()) throw std::invalid_argument("clipped_loss: empty batch");
  if (evals.size() != rollouts.size() || evals.size() != advantages.size())
    throw std::invalid_argument("clipped_loss: misaligned inputs");
  std::vector<Var> per_rollout;
  per_rollout.reserve(evals.size());
  for (std::size_t i = 0; i < evals.size(); ++i) {
    const Rollout& r = *rollouts[i];
    Var logp = concat(evals[i].logp);
    Var old = tape.leaf(Tensor::vector(
        std::vector<double>(r.old_logprobs.begin(), r.old_logprobs.end())));
    Var ratio = exp(sub(logp, old));
    double a = advantages[i];
    Var term = minimum(scale(ratio, a), scale(clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip), a));
    per_rollout.push_back(mean(term));
  }
  return neg(mean(concat(per_rollout)));
}

/// -entropy_coeff * (mean per-step entropy over the batch). Negative when
/// entropy is positive, so adding it to the loss rewards exploration.
inline Var entropy_bonus(Tape& tape, std::span<const RolloutEval> evals, double entropy_coeff) {
  if (entropy_coeff == 0.0) return tape.constant(0.0);
  std::vector<Var> steps;
  for (const RolloutEval& ev : evals)
    for (const Var& h : ev.entropy) steps.push_back(h);
  if (steps.empty()) return tape.constant(0.0);
  return scale(mean(concat(steps)), -entropy_coeff);
}

}  // namespace mcpo
