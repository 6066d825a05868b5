#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mcpo/policy.hpp"
#include "mcpo/rng.hpp"
#include "mcpo/tensor.hpp"

namespace mcpo {

struct ContrastiveConfig {
  double tau = 0.1;                  // InfoNCE temperature
  double lambda_cross = 0.5;         // cross-domain sharing weight
  double lambda_in = 0.5;            // in-domain consolidation weight
  double lambda_cl = 0.1;            // top-level contrastive weight
  double positive_threshold = 0.5;   // reward >= threshold marks an anchor
  std::size_t warmup_batches = 100;  // head-only mini-batches before joint updates
  std::size_t proj_dim = 32;
  std::size_t proj_hidden_dim = 32;
};

/// During the first warmup_batches mini-batches, contrastive gradients reach
/// only the projection head; the backbone sees them afterwards.
inline bool warmup_active(std::size_t minibatches_done, const ContrastiveConfig& cfg) {
  return minibatches_done < cfg.warmup_batches;
}

/// Two-layer projection from the policy's hidden width to the embedding
/// space where rollout similarities are compared.
struct ProjectionHead {
  Tensor p1, pb1;  // [proj_hidden, d_hid], [proj_hidden]
  Tensor p2, pb2;  // [proj_dim, proj_hidden], [proj_dim]

  static ProjectionHead init(std::size_t d_hid, const ContrastiveConfig& cfg, Rng& rng,
                             double init_scale = 0.08) {
    ProjectionHead h;
    auto rand = [&](std::vector<std::size_t> shape) {
      Tensor t = Tensor::zeros(std::move(shape));
      for (double& v : t.data) v = rng.uniform(-init_scale, init_scale);
      return t;
    };
    h.p1 = rand({cfg.proj_hidden_dim, d_hid});
    h.pb1 = rand({cfg.proj_hidden_dim});
    h.p2 = rand({cfg.proj_dim, cfg.proj_hidden_dim});
    h.pb2 = rand({cfg.proj_dim});
    return h;
  }

  std::vector<std::pair<std::string, Tensor*>> named() {
    return {{"p1", &p1}, {"pb1", &pb1}, {"p2", &p2}, {"pb2", &pb2}};
  }
  std::vector<std::pair<std::string, const Tensor*>> named() const {
    return {{"p1", &p1}, {"pb1", &pb1}, {"p2", &p2}, {"pb2", &pb2}};
  }
};

struct HeadVars {
  Var p1, pb1, p2, pb2;
  std::vector<Var> list() const { return {p1, pb1, p2, pb2}; }
};

inline HeadVars lift_head(Tape& tape, const ProjectionHead& h) {
  return HeadVars{tape.leaf(h.p1), tape.leaf(h.pb1), tape.leaf(h.p2), tape.leaf(h.pb2)};
}

/// v = l2_normalize(P2 tanh(P1 h + b1) + b2)
inline Var project_embedding(const HeadVars& hv, const Var& hidden) {
  Var z = tanh(add(matmul(hv.p1, hidden), hv.pb1));
  return l2_normalize(add(matmul(hv.p2, z), hv.pb2));
}

/// Plain-double head forward for dumps and audits.
inline std::vector<double> project_embedding_value(const ProjectionHead& h,
                                                   std::span<const double> hidden) {
  std::vector<double> z(h.p1.rows());
  fast::matvec(h.p1, hidden, z);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = std::tanh(z[i] + h.pb1.data[i]);
  std::vector<double> v(h.p2.rows());
  fast::matvec(h.p2, z, v);
  double sq = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] += h.pb2.data[i];
    sq += v[i] * v[i];
  }
  double denom = std::max(std::sqrt(sq), 1e-12);
  for (double& x : v) x /= denom;
  return v;
}

struct PoolEntry {
  std::size_t index = 0;
  std::int64_t prompt_id = 0;
  int domain_id = 0;
  int correct = 0;  // z
  double reward = 0.0;
  Var v;                        // unit embedding on the tape
  std::vector<double> v_value;  // detached copy for prototypes and diagnostics
};

struct ContrastivePool {
  std::vector<PoolEntry> entries;
  std::size_t size() const { return entries.size(); }
};

/// Embed every rollout of the mini-batch under the current parameters. With
/// `detach_backbone` the hidden states enter as constants, so contrastive
/// gradients stop at the projection head (warmup gating).
inline ContrastivePool build_pool(Tape& tape, const HeadVars& hv,
                                  std::span<const RolloutEval> evals,
                                  std::span<const Rollout* const> rollouts,
                                  const ContrastiveConfig& cfg, bool detach_backbone) {
  if (evals.size() != rollouts.size())
    throw std::invalid_argument("build_pool: misaligned inputs");
  ContrastivePool pool;
  pool.entries.reserve(evals.size());
  for (std::size_t i = 0; i < evals.size(); ++i) {
    Var hidden = evals[i].pooled_hidden;
    if (detach_backbone) hidden = tape.leaf(hidden.value());
    PoolEntry e;
    e.index = i;
    e.prompt_id = rollouts[i]->prompt_id;
    e.domain_id = rollouts[i]->domain_id;
    e.reward = rollouts[i]->reward;
    e.correct = rollouts[i]->reward >= cfg.positive_threshold ? 1 : 0;
    e.v = project_embedding(hv, hidden);
    e.v_value = e.v.value().data;
    pool.entries.push_back(std::move(e));
  }
  return pool;
}

inline std::vector<double> l2_normalize_value(std::vector<double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  double denom = std::max(std::sqrt(sq), 1e-12);
  for (double& x : v) x /= denom;
  return v;
}

/// Unit-normalized mean of each prompt's correct embeddings. Prompts with no
/// correct rollout have no prototype.
inline std::map<std::int64_t, std::vector<double>> prototypes(const ContrastivePool& pool) {
  std::map<std::int64_t, std::pair<std::vector<double>, std::size_t>> acc;
  for (const PoolEntry& e : pool.entries) {
    if (!e.correct) continue;
    auto& [sum, count] = acc[e.prompt_id];
    if (sum.empty()) sum.assign(e.v_value.size(), 0.0);
    for (std::size_t i = 0; i < e.v_value.size(); ++i) sum[i] += e.v_value[i];
    ++count;
  }
  std::map<std::int64_t, std::vector<double>> out;
  for (auto& [pid, sc] : acc) {
    auto& [sum, count] = sc;
    for (double& x : sum) x /= double(count);
    out[pid] = l2_normalize_value(std::move(sum));
  }
  return out;
}

/// omega = (<c_i, c_j> + 1) / 2, in [0, 1]; 1 for aligned prototypes,
/// 0.5 for orthogonal (including the guarded zero prototype), 0 for antipodal.
inline double compat_weight(std::span<const double> ci, std::span<const double> cj) {
  double dot = 0.0;
  for (std::size_t i = 0; i < ci.size(); ++i) dot += ci[i] * cj[i];
  // unit prototypes keep the cosine in [-1, 1] up to rounding; clamp the noise
  return std::min(std::max((dot + 1.0) / 2.0, 0.0), 1.0);
}

/// For each correct anchor i: cross-domain and in-domain correct positives.
/// Incorrect entries are never anchors and never positives.
struct PositiveSets {
  std::vector<std::vector<std::size_t>> cross;  // indexed like the pool
  std::vector<std::vector<std::size_t>> in;
};

inline PositiveSets positive_sets(const ContrastivePool& pool) {
  std::size_t n = pool.size();
  PositiveSets sets;
  sets.cross.resize(n);
  sets.in.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!pool.entries[i].correct) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || !pool.entries[j].correct) continue;
      if (pool.entries[j].domain_id != pool.entries[i].domain_id)
        sets.cross[i].push_back(j);
      else
        sets.in[i].push_back(j);  // same-prompt siblings included
    }
  }
  return sets;
}

/// Compatibility weights aligned with sets.cross. Anchors and positives are
/// all correct, so both prototypes exist by construction. The weights are
/// plain doubles: no gradient flows through the prototypes into omega.
inline std::vector<std::vector<double>> cross_weights(
    const ContrastivePool& pool, const PositiveSets& sets,
    const std::map<std::int64_t, std::vector<double>>& protos) {
  std::vector<std::vector<double>> w(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (sets.cross[i].empty()) continue;
    const std::vector<double>& ci = protos.at(pool.entries[i].prompt_id);
    w[i].reserve(sets.cross[i].size());
    for (std::size_t j : sets.cross[i])
      w[i].push_back(compat_weight(ci, protos.at(pool.entries[j].prompt_id)));
  }
  return w;
}

struct Masses {
  double n_cross = 0.0;  // total omega over cross-positive pairs
  double n_in = 0.0;     // count of in-domain positive pairs
};

inline Masses masses(const PositiveSets& sets, const std::vector<std::vector<double>>& weights) {
  Masses m;
  for (const auto& row : weights)
    for (double w : row) m.n_cross += w;
  for (const auto& row : sets.in) m.n_in += double(row.size());
  return m;
}

namespace detail {

/// Shared InfoNCE core. Per anchor i and positive j:
///   -log( exp(s_ij) / sum_{k != i} exp(s_ik) )  with s = v_i . v_k / tau.
/// The denominator over all k != i equals the typeset
/// exp(s_ij) + sum_{k != i,j} exp(s_ik). Weighted terms sum to
///   W_i * lse_i - sum_j w_ij s_ij  per anchor, normalized by `normalizer`.
inline Var infonce(Tape& tape, const ContrastivePool& pool,
                   const std::vector<std::vector<std::size_t>>& positives,
                   const std::vector<std::vector<double>>* weights, double tau,
                   double normalizer) {
  if (normalizer == 0.0 || pool.size() < 2) return tape.constant(0.0);
  std::size_t n = pool.size();
  std::vector<Var> vs;
  vs.reserve(n);
  for (const PoolEntry& e : pool.entries) vs.push_back(e.v);
  Var embeddings = stack_rows(vs);
  Var sims = scale(matmul(embeddings, transpose(embeddings)), 1.0 / tau);
  Var total = tape.constant(0.0);
  std::vector<std::size_t> others;
  others.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    if (positives[i].empty()) continue;
    Var sim_row = row(sims, i);
    others.clear();
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) others.push_back(k);
    Var lse = log_sum_exp(gather(sim_row, others));
    Var pos = gather(sim_row, positives[i]);
    double wsum;
    Var weighted_pos;
    if (weights) {
      const std::vector<double>& w = (*weights)[i];
      wsum = 0.0;
      for (double x : w) wsum += x;
      weighted_pos = sum(mul(pos, tape.leaf(Tensor::vector(w))));
    } else {
      wsum = double(positives[i].size());
      weighted_pos = sum(pos);
    }
    total = add(total, sub(scale(lse, wsum), weighted_pos));
  }
  return scale(total, 1.0 / normalizer);
}

}  // namespace detail

/// Cross-domain knowledge-sharing loss: compatibility-weighted InfoNCE over
/// correct rollouts from other domains. Zero when there is no positive mass.
inline Var cross_loss(Tape& tape, const ContrastivePool& pool, const PositiveSets& sets,
                      const std::vector<std::vector<double>>& weights, double tau,
                      double n_cross) {
  return detail::infonce(tape, pool, sets.cross, &weights, tau, n_cross);
}

/// In-domain consolidation loss: unweighted InfoNCE over correct rollouts of
/// the same domain (same-prompt siblings included). Zero when N_in = 0.
inline Var in_loss(Tape& tape, const ContrastivePool& pool, const PositiveSets& sets, double tau,
                   double n_in) {
  return detail::infonce(tape, pool, sets.in, nullptr, tau, n_in);
}

/// Scalars behind the training-dynamics plots. NaN marks "undefined on this
/// pool" (no anchors, no cross pairs, or no negatives).
struct PoolDiagnostics {
  double pos_per_anchor = std::numeric_limits<double>::quiet_NaN();  // same-prompt correct sibs
  double positive_ratio = std::numeric_limits<double>::quiet_NaN();
  double mean_omega = std::numeric_limits<double>::quiet_NaN();
  double mean_pos_logit = std::numeric_limits<double>::quiet_NaN();  // cross positives
  double mean_neg_logit = std::numeric_limits<double>::quiet_NaN();  // anchor vs incorrect
  double margin = std::numeric_limits<double>::quiet_NaN();
};

inline PoolDiagnostics pool_diagnostics(const ContrastivePool& pool, const PositiveSets& sets,
                                        const std::vector<std::vector<double>>& weights,
                                        double tau) {
  PoolDiagnostics d;
  std::size_t n = pool.size();
  if (n == 0) return d;
  std::size_t n_correct = 0;
  for (const PoolEntry& e : pool.entries) n_correct += std::size_t(e.correct);
  d.positive_ratio = double(n_correct) / double(n);
  if (n_correct == 0) return d;

  auto logit = [&](std::size_t i, std::size_t j) {
    double dot = 0.0;
    for (std::size_t k = 0; k < pool.entries[i].v_value.size(); ++k)
      dot += pool.entries[i].v_value[k] * pool.entries[j].v_value[k];
    return dot / tau;
  };

  double sibs = 0.0;
  double omega_sum = 0.0, pos_sum = 0.0, neg_sum = 0.0;
  std::size_t cross_pairs = 0, neg_pairs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!pool.entries[i].correct) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (pool.entries[j].correct && pool.entries[j].prompt_id == pool.entries[i].prompt_id)
        sibs += 1.0;
      if (!pool.entries[j].correct) {
        neg_sum += logit(i, j);
        ++neg_pairs;
      }
    }
    for (std::size_t c = 0; c < sets.cross[i].size(); ++c) {
      pos_sum += logit(i, sets.cross[i][c]);
      omega_sum += weights[i][c];
      ++cross_pairs;
    }
  }
  d.pos_per_anchor = sibs / double(n_correct);
  if (cross_pairs > 0) {
    d.mean_omega = omega_sum / double(cross_pairs);
    d.mean_pos_logit = pos_sum / double(cross_pairs);
  }
  if (neg_pairs > 0) d.mean_neg_logit = neg_sum / double(neg_pairs);
  d.margin = d.mean_pos_logit - d.mean_neg_logit;
  return d;
}

/// Every scalar of one update, with the exact combination identity
/// l_total = l_grpo + lambda_cl * (lambda_cross * l_cross + lambda_in * l_in).
struct LossReport {
  double l_grpo = 0.0;
  double l_cross = 0.0;
  double l_in = 0.0;
  double l_mcpo = 0.0;
  double l_total = 0.0;
  double n_cross = 0.0;
  double n_in = 0.0;
  PoolDiagnostics diag;
};

inline LossReport total_loss(double l_grpo, double l_cross, double l_in, const Masses& m,
                             const ContrastiveConfig& cfg, const PoolDiagnostics& diag) {
  LossReport r;
  r.l_grpo = l_grpo;
  r.l_cross = l_cross;
  r.l_in = l_in;
  r.l_mcpo = cfg.lambda_cross * l_cross + cfg.lambda_in * l_in;
  r.l_total = l_grpo + cfg.lambda_cl * r.l_mcpo;
  r.n_cross = m.n_cross;
  r.n_in = m.n_in;
  r.diag = diag;
  return r;
}

}  // namespace mcpo
