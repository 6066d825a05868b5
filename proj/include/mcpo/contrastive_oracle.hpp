#pragma once

// Naive reference implementations of the contrastive losses: direct
// exponentiation, triple loops, prototypes recomputed from scratch. Used by
// the loss-audit command and by tests as an independent check on the fast
// tape-based path; deliberately kept free of any Tape machinery.

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

namespace mcpo::oracle {

struct Entry {
  std::int64_t prompt_id = 0;
  int domain_id = 0;
  int z = 0;
  double reward = 0.0;
  std::vector<double> v;
};

inline std::map<std::int64_t, std::vector<double>> naive_prototypes(
    std::span<const Entry> pool) {
  std::map<std::int64_t, std::vector<double>> sums;
  std::map<std::int64_t, std::size_t> counts;
  for (const Entry& e : pool) {
    if (!e.z) continue;
    auto& s = sums[e.prompt_id];
    if (s.empty()) s.assign(e.v.size(), 0.0);
    for (std::size_t i = 0; i < e.v.size(); ++i) s[i] += e.v[i];
    counts[e.prompt_id] += 1;
  }
  for (auto& [pid, s] : sums) {
    double norm = 0.0;
    for (double& x : s) x /= double(counts[pid]);
    for (double x : s) norm += x * x;
    norm = std::sqrt(norm);
    double denom = norm < 1e-12 ? 1e-12 : norm;
    for (double& x : s) x /= denom;
  }
  return sums;
}

inline double naive_omega(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return (dot + 1.0) / 2.0;
}

inline double naive_sim(const Entry& a, const Entry& b, double tau) {
  double dot = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) dot += a.v[i] * b.v[i];
  return dot / tau;
}

/// -1/N_cross * sum_{i: z=1} sum_{j in P_cross(i)} omega_ij *
///   log( exp(s_ij) / (exp(s_ij) + sum_{k != i,j} exp(s_ik)) ); 0 when empty.
inline double naive_cross_loss(std::span<const Entry> pool, double tau) {
  auto protos = naive_prototypes(pool);
  double mass = 0.0, total = 0.0;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (!pool[i].z) continue;
    for (std::size_t j = 0; j < pool.size(); ++j) {
      if (j == i || !pool[j].z || pool[j].domain_id == pool[i].domain_id) continue;
      double w = naive_omega(protos.at(pool[i].prompt_id), protos.at(pool[j].prompt_id));
      double pos = std::exp(naive_sim(pool[i], pool[j], tau));
      double rest = 0.0;
      for (std::size_t k = 0; k < pool.size(); ++k) {
        if (k == i || k == j) continue;
        rest += std::exp(naive_sim(pool[i], pool[k], tau));
      }
      total += w * std::log(pos / (pos + rest));
      mass += w;
    }
  }
  return mass == 0.0 ? 0.0 : -total / mass;
}

/// Same form with unweighted positives from the same domain; 0 when empty.
inline double naive_in_loss(std::span<const Entry> pool, double tau) {
  double count = 0.0, total = 0.0;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (!pool[i].z) continue;
    for (std::size_t j = 0; j < pool.size(); ++j) {
      if (j == i || !pool[j].z || pool[j].domain_id != pool[i].domain_id) continue;
      double pos = std::exp(naive_sim(pool[i], pool[j], tau));
      double rest = 0.0;
      for (std::size_t k = 0; k < pool.size(); ++k) {
        if (k == i || k == j) continue;
        rest += std::exp(naive_sim(pool[i], pool[k], tau));
      }
      total += std::log(pos / (pos + rest));
      count += 1.0;
    }
  }
  return count == 0.0 ? 0.0 : -total / count;
}

}  // namespace mcpo::oracle
