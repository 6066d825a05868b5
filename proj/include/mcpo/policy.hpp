#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mcpo/domains.hpp"
#include "mcpo/rng.hpp"
#include "mcpo/tensor.hpp"

namespace mcpo {

struct PolicyConfig {
  std::size_t vocab_size = vocab::kSize;
  std::size_t d_emb = 32;
  std::size_t d_hid = 64;
  std::size_t context_window = 8;  // K generated tokens fed back in
  std::size_t max_prompt_len = 32;
  std::size_t max_response_len = 16;
  double init_scale = 0.08;
  int pad_token = vocab::kPad;
  int eos_token = vocab::kEos;

  std::size_t input_dim() const { return d_emb * (context_window + 1); }
};

/// Fixed-window autoregressive policy: the mean prompt embedding is
/// concatenated with the embeddings of the last K generated tokens
/// (PAD-filled on the left) and pushed through two tanh layers; a final
/// projection yields logits over the vocabulary.
struct PolicyParams {
  PolicyConfig cfg;
  Tensor embed;         // [V, d_emb]
  Tensor w1, b1;        // [d_hid, input_dim], [d_hid]
  Tensor w2, b2;        // [d_hid, d_hid], [d_hid]
  Tensor w_out, b_out;  // [V, d_hid], [V]

  static PolicyParams init(const PolicyConfig& cfg, Rng& rng) {
    PolicyParams p;
    p.cfg = cfg;
    auto rand = [&](std::vector<std::size_t> shape) {
      Tensor t = Tensor::zeros(std::move(shape));
      for (double& v : t.data) v = rng.uniform(-cfg.init_scale, cfg.init_scale);
      return t;
    };
    p.embed = rand({cfg.vocab_size, cfg.d_emb});
    p.w1 = rand({cfg.d_hid, cfg.input_dim()});
    p.b1 = rand({cfg.d_hid});
    p.w2 = rand({cfg.d_hid, cfg.d_hid});
    p.b2 = rand({cfg.d_hid});
    p.w_out = rand({cfg.vocab_size, cfg.d_hid});
    p.b_out = rand({cfg.vocab_size});
    return p;
  }

  std::vector<std::pair<std::string, Tensor*>> named() {
    return {{"embed", &embed}, {"w1", &w1},       {"b1", &b1},      {"w2", &w2},
            {"b2", &b2},       {"w_out", &w_out}, {"b_out", &b_out}};
  }
  std::vector<std::pair<std::string, const Tensor*>> named() const {
    return {{"embed", &embed}, {"w1", &w1},       {"b1", &b1},      {"w2", &w2},
            {"b2", &b2},       {"w_out", &w_out}, {"b_out", &b_out}};
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named()) n += t->numel();
    return n;
  }
};

/// Frozen copy of the policy taken at rollout time; only const access.
class PolicySnapshot {
 public:
  explicit PolicySnapshot(PolicyParams p) : params_(std::move(p)) {}
  const PolicyParams& params() const { return params_; }

 private:
  PolicyParams params_;
};

struct Rollout {
  std::int64_t prompt_id = 0;
  int domain_id = 0;
  std::vector<int> tokens;           // response tokens, EOS-terminated or truncated
  std::vector<double> old_logprobs;  // log pi_old per token, aligned with tokens
  std::vector<int> answer;
  double reward = 0.0;
};

// ---------------------------------------------------------------------------
// Plain-double forward path (sampling and evaluation)
// ---------------------------------------------------------------------------

namespace fast {

inline void matvec(const Tensor& w, std::span<const double> x, std::span<double> out) {
  std::size_t rows = w.rows(), k = w.cols();
  for (std::size_t i = 0; i < rows; ++i) {
    const double* wr = w.data.data() + i * k;
    double s = 0.0;
    for (std::size_t p = 0; p < k; ++p) s += wr[p] * x[p];
    out[i] = s;
  }
}

inline std::vector<double> prompt_mean(const PolicyParams& p, std::span<const int> prompt) {
  if (prompt.empty()) throw std::invalid_argument("prompt_mean: empty prompt");
  std::vector<double> out(p.cfg.d_emb, 0.0);
  for (int tok : prompt) {
    const double* e = p.embed.data.data() + std::size_t(tok) * p.cfg.d_emb;
    for (std::size_t j = 0; j < p.cfg.d_emb; ++j) out[j] += e[j];
  }
  double inv = 1.0 / double(prompt.size());
  for (double& v : out) v *= inv;
  return out;
}

/// Scratch buffers for one forward step; reuse across calls to avoid churn.
struct StepWork {
  std::vector<double> ctx, h1, h2, logits;
};

/// Logits (and optionally the step hidden) for the next token given the
/// prompt mean and the tokens generated so far.
inline void step_logits(const PolicyParams& p, std::span<const double> pmean,
                        std::span<const int> prefix, StepWork& w,
                        std::vector<double>* hidden_out = nullptr) {
  const PolicyConfig& c = p.cfg;
  w.ctx.resize(c.input_dim());
  std::copy(pmean.begin(), pmean.end(), w.ctx.begin());
  for (std::size_t j = 0; j < c.context_window; ++j) {
    // window slot j holds generated token at position |prefix| - K + j
    std::ptrdiff_t pos = std::ptrdiff_t(prefix.size()) - std::ptrdiff_t(c.context_window) +
                         std::ptrdiff_t(j);
    int tok = pos >= 0 ? prefix[std::size_t(pos)] : c.pad_token;
    const double* e = p.embed.data.data() + std::size_t(tok) * c.d_emb;
    std::copy(e, e + c.d_emb, w.ctx.begin() + std::ptrdiff_t(c.d_emb * (j + 1)));
  }
  w.h1.resize(c.d_hid);
  matvec(p.w1, w.ctx, w.h1);
  for (std::size_t i = 0; i < c.d_hid; ++i) w.h1[i] = std::tanh(w.h1[i] + p.b1.data[i]);
  w.h2.resize(c.d_hid);
  matvec(p.w2, w.h1, w.h2);
  for (std::size_t i = 0; i < c.d_hid; ++i) w.h2[i] = std::tanh(w.h2[i] + p.b2.data[i]);
  w.logits.resize(c.vocab_size);
  matvec(p.w_out, w.h2, w.logits);
  for (std::size_t i = 0; i < c.vocab_size; ++i) w.logits[i] += p.b_out.data[i];
  if (hidden_out) *hidden_out = w.h2;
}

/// In-place logits -> probabilities; returns log(sum(exp(logits - max))) + max
inline double softmax_inplace(std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double& v : logits) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : logits) v /= z;
  return mx + std::log(z);
}

}  // namespace fast

/// Probability distribution over the vocabulary for the next token.
inline std::vector<double> next_token_dist(const PolicyParams& p, std::span<const int> prompt,
                                           std::span<const int> prefix) {
  if (prefix.size() >= p.cfg.max_response_len + 1)
    throw std::invalid_argument("next_token_dist: prefix exceeds the response cap");
  std::vector<double> pmean = fast::prompt_mean(p, prompt);
  fast::StepWork w;
  fast::step_logits(p, pmean, prefix, w);
  std::vector<double> probs = w.logits;
  fast::softmax_inplace(probs);
  return probs;
}

/// Shannon entropy (nats) of the next-token distribution.
inline double entropy(const PolicyParams& p, std::span<const int> prompt,
                      std::span<const int> prefix) {
  std::vector<double> probs = next_token_dist(p, prompt, prefix);
  double h = 0.0;
  for (double q : probs)
    if (q > 0.0) h -= q * std::log(q);
  return h;
}

namespace fast {

/// One ancestral sample with per-token sampling log-probs, verified on the spot.
inline Rollout sample_one(const PolicyParams& p, std::span<const double> pmean,
                          const DomainSpec& spec, const Prompt& prompt, Rng& rng, StepWork& w,
                          std::vector<double>& probs) {
  Rollout r;
  r.prompt_id = prompt.prompt_id;
  r.domain_id = prompt.domain_id;
  for (std::size_t t = 0; t < p.cfg.max_response_len; ++t) {
    step_logits(p, pmean, r.tokens, w);
    double mx = w.logits[0];
    for (double v : w.logits) mx = std::max(mx, v);
    double z = 0.0;
    probs.resize(w.logits.size());
    for (std::size_t i = 0; i < w.logits.size(); ++i) {
      probs[i] = std::exp(w.logits[i] - mx);
      z += probs[i];
    }
    std::size_t tok = probs.size() - 1;
    double u = rng.next_double() * z;
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) {
        tok = i;
        break;
      }
    }
    r.tokens.push_back(int(tok));
    r.old_logprobs.push_back((w.logits[tok] - mx) - std::log(z));
    if (int(tok) == p.cfg.eos_token) break;
  }
  r.answer = extract_answer(r.tokens);
  r.reward = verify(spec, r.answer, prompt.target);
  return r;
}

}  // namespace fast

/// G ancestral samples from the snapshot policy, each verified on the spot.
inline std::vector<Rollout> sample_rollouts(const PolicySnapshot& snapshot,
                                            const DomainSpec& spec, const Prompt& prompt,
                                            std::size_t G, Rng& rng) {
  if (G < 2) throw std::invalid_argument("sample_rollouts: G must be at least 2");
  const PolicyParams& p = snapshot.params();
  std::vector<double> pmean = fast::prompt_mean(p, prompt.tokens);
  std::vector<Rollout> out;
  out.reserve(G);
  fast::StepWork w;
  std::vector<double> probs;
  for (std::size_t g = 0; g < G; ++g)
    out.push_back(fast::sample_one(p, pmean, spec, prompt, rng, w, probs));
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable path
// ---------------------------------------------------------------------------

struct PolicyVars {
  Var embed, w1, b1, w2, b2, w_out, b_out;

  std::vector<Var> list() const { return {embed, w1, b1, w2, b2, w_out, b_out}; }
};

inline PolicyVars lift_policy(Tape& tape, const PolicyParams& p) {
  PolicyVars v;
  v.embed = tape.leaf(p.embed);
  v.w1 = tape.leaf(p.w1);
  v.b1 = tape.leaf(p.b1);
  v.w2 = tape.leaf(p.w2);
  v.b2 = tape.leaf(p.b2);
  v.w_out = tape.leaf(p.w_out);
  v.b_out = tape.leaf(p.b_out);
  return v;
}

inline Var prompt_mean_var(Tape& tape, const PolicyVars& pv, std::span<const int> prompt) {
  std::vector<Var> rows_;
  rows_.reserve(prompt.size());
  for (int tok : prompt) rows_.push_back(row(pv.embed, std::size_t(tok)));
  return mean_pool(stack_rows(rows_));
}

/// Per-token log-probabilities, per-step entropies, and the mean-pooled
/// hidden state of one rollout, all under the lifted (current) parameters.
struct RolloutEval {
  std::vector<Var> logp;     // scalar per response token
  std::vector<Var> entropy;  // scalar per step; empty unless requested
  Var pooled_hidden;         // [d_hid]
};

inline RolloutEval eval_rollout(Tape& tape, const PolicyVars& pv, const PolicyConfig& cfg,
                                const Var& prompt_mean, std::span<const int> response,
                                bool want_entropy) {
  if (response.empty()) throw std::invalid_argument("eval_rollout: empty response");
  if (response.size() > cfg.max_response_len)
    throw std::invalid_argument("eval_rollout: response exceeds the cap");
  RolloutEval ev;
  ev.logp.reserve(response.size());
  std::vector<Var> row_cache(cfg.vocab_size);  // embedding rows fetched at most once
  auto embed_row = [&](int tok) {
    Var& slot = row_cache[std::size_t(tok)];
    if (!slot.valid()) slot = row(pv.embed, std::size_t(tok));
    return slot;
  };
  std::vector<Var> hiddens;
  hiddens.reserve(response.size());
  std::vector<Var> parts(cfg.context_window + 1);
  for (std::size_t t = 0; t < response.size(); ++t) {
    parts[0] = prompt_mean;
    for (std::size_t j = 0; j < cfg.context_window; ++j) {
      std::ptrdiff_t pos =
          std::ptrdiff_t(t) - std::ptrdiff_t(cfg.context_window) + std::ptrdiff_t(j);
      parts[j + 1] = embed_row(pos >= 0 ? response[std::size_t(pos)] : cfg.pad_token);
    }
    Var ctx = concat(parts);
    Var h1 = tanh(add(matmul(pv.w1, ctx), pv.b1));
    Var h2 = tanh(add(matmul(pv.w2, h1), pv.b2));
    Var logits = add(matmul(pv.w_out, h2), pv.b_out);
    Var lse = log_sum_exp(logits);
    ev.logp.push_back(sub(pick(logits, std::size_t(response[t])), lse));
    if (want_entropy) {
      Var probs = softmax(logits, 1.0);
      ev.entropy.push_back(sub(lse, sum(mul(probs, logits))));
    }
    hiddens.push_back(h2);
  }
  ev.pooled_hidden = mean_pool(stack_rows(hiddens));
  return ev;
}

}  // namespace mcpo
