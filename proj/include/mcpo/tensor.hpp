#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mcpo {

/// Dense row-major array of 64-bit reals. Rank 0 (shape {}) is a scalar.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size())
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor full(std::vector<std::size_t> s, double v) {
    std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<double> d) {
    std::size_t n = d.size();
    return Tensor({n}, std::move(d));
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }

  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }
  double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

  double item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: not a scalar");
    return data[0];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Tensor& grad() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Single-use reverse-mode tape. Nodes are appended in evaluation order,
/// which is already topological; backward() sweeps them once in reverse.
/// A second backward() without reset() is an error.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Tape&)> back;  // empty for leaves/constants
  };

  Var leaf(Tensor v) {
    Tensor g = Tensor::zeros(v.shape);
    nodes_.push_back(Node{std::move(v), std::move(g), {}});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(double v) { return leaf(Tensor::scalar(v)); }

  /// Id the next recorded node will receive.
  std::size_t next_id() const { return nodes_.size(); }

  Var record(Tensor v, std::function<void(Tape&)> back) {
    Tensor g = Tensor::zeros(v.shape);
    nodes_.push_back(Node{std::move(v), std::move(g), std::move(back)});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  Tensor& grad(std::size_t id) { return nodes_[id].grad; }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Accumulate d(loss)/d(node) for every node reachable from `loss`.
  /// Unreachable nodes keep their zero-initialized gradients.
  void backward(const Var& loss) {
    if (backward_done_)
      throw std::logic_error("Tape::backward: tape already differentiated; run a fresh forward");
    if (loss.value().numel() != 1)
      throw std::invalid_argument("Tape::backward: loss must be a scalar");
    backward_done_ = true;
    nodes_[loss.id()].grad.data[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].back) nodes_[i].back(*this);
    }
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  bool backward_done() const { return backward_done_; }

 private:
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }

namespace detail {

// Broadcasting is deliberately limited to equal shapes and scalar-with-tensor.
enum class Bcast { Equal, ScalarLeft, ScalarRight };

inline Bcast bcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b)) return Bcast::Equal;
  if (a.numel() == 1) return Bcast::ScalarLeft;
  if (b.numel() == 1) return Bcast::ScalarRight;
  throw std::invalid_argument(std::string(op) +
                              ": shape mismatch (only equal shapes or scalar broadcast)");
}

// Scatter an output gradient back into a possibly-scalar operand gradient.
inline void accumulate(Tensor& dst, const std::vector<double>& contrib) {
  if (dst.numel() == contrib.size()) {
    for (std::size_t i = 0; i < contrib.size(); ++i) dst.data[i] += contrib[i];
  } else {  // scalar operand
    double s = 0.0;
    for (double v : contrib) s += v;
    dst.data[0] += s;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (equal shapes or scalar broadcast)
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd, class Back>
Var binary_op(const Var& a, const Var& b, const char* name, Fwd fwd, Back back) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Bcast k = bcast_kind(av, bv, name);
  Tensor out = (k == Bcast::ScalarLeft) ? Tensor::zeros(bv.shape) : Tensor::zeros(av.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double x = (k == Bcast::ScalarLeft) ? av.data[0] : av.data[i];
    double y = (k == Bcast::ScalarRight) ? bv.data[0] : bv.data[i];
    out.data[i] = fwd(x, y);
  }
  Tape& t = a.tape();
  std::size_t ai = a.id(), bi = b.id(), oid = t.next_id();
  return t.record(std::move(out), [ai, bi, oid, k, back](Tape& t) {
    const Tensor& g = t.grad(oid);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    std::vector<double> da(g.numel()), db(g.numel());
    for (std::size_t i = 0; i < g.numel(); ++i) {
      double x = (k == Bcast::ScalarLeft) ? av.data[0] : av.data[i];
      double y = (k == Bcast::ScalarRight) ? bv.data[0] : bv.data[i];
      auto [dx, dy] = back(x, y);
      da[i] = g.data[i] * dx;
      db[i] = g.data[i] * dy;
    }
    accumulate(t.grad(ai), da);
    accumulate(t.grad(bi), db);
  });
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return std::pair<double, double>{1.0, 1.0}; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return std::pair<double, double>{1.0, -1.0}; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y) { return std::pair<double, double>{y, x}; });
}

inline Var div(const Var& a, const Var& b) {
  for (double v : b.value().data)
    if (v == 0.0) throw std::domain_error("div: zero divisor");
  return detail::binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double x, double y) { return std::pair<double, double>{1.0 / y, -x / (y * y)}; });
}

/// Elementwise minimum; on ties the gradient goes to the first operand.
inline Var minimum(const Var& a, const Var& b) {
  return detail::binary_op(
      a, b, "minimum", [](double x, double y) { return x <= y ? x : y; },
      [](double x, double y) {
        return x <= y ? std::pair<double, double>{1.0, 0.0} : std::pair<double, double>{0.0, 1.0};
      });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd, class Back>
Var unary_op(const Var& a, Fwd fwd, Back back) {
  const Tensor& av = a.value();
  Tensor out = Tensor::zeros(av.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = fwd(av.data[i]);
  Tape& t = a.tape();
  std::size_t ai = a.id(), oid = t.next_id();
  return t.record(std::move(out), [ai, oid, back](Tape& t) {
    const Tensor& g = t.grad(oid);
    const Tensor& av = t.value(ai);
    const Tensor& ov = t.value(oid);
    Tensor& da = t.grad(ai);
    for (std::size_t i = 0; i < g.numel(); ++i)
      da.data[i] += g.data[i] * back(av.data[i], ov.data[i]);
  });
}

}  // namespace detail

inline Var exp(const Var& a) {
  return detail::unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double v : a.value().data)
    if (v <= 0.0) throw std::domain_error("log: non-positive operand");
  return detail::unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var tanh(const Var& a) {
  return detail::unary_op(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var scale(const Var& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::unary_op(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

/// Clamp to [lo, hi]; gradient passes through on the closed interval.
inline Var clamp(const Var& a, double lo, double hi) {
  return detail::unary_op(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// [m x k] * [k x n] -> [m x n], or [m x k] * [k] -> [m].
inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2) throw std::invalid_argument("matmul: left operand must be rank 2");
  std::size_t m = av.rows(), k = av.cols();
  bool vec = bv.rank() == 1;
  if (!vec && bv.rank() != 2)
    throw std::invalid_argument("matmul: right operand must be rank 1 or 2");
  std::size_t bk = vec ? bv.shape[0] : bv.rows();
  std::size_t n = vec ? 1 : bv.cols();
  if (bk != k) throw std::invalid_argument("matmul: inner dimensions disagree");

  Tensor out = vec ? Tensor::zeros({m}) : Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = av.data.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * bv.data[p * n + j];
      out.data[i * n + j] = s;
    }
  }
  Tape& t = a.tape();
  std::size_t ai = a.id(), bi = b.id(), oid = t.next_id();
  return t.record(std::move(out), [ai, bi, oid, m, k, n](Tape& t) {
    const Tensor& g = t.grad(oid);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    Tensor& da = t.grad(ai);
    Tensor& db = t.grad(bi);
    // dA += g * B^T ; dB += A^T * g
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += g.data[i * n + j] * bv.data[p * n + j];
        da.data[i * k + p] += s;
      }
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += av.data[i * k + p] * g.data[i * n + j];
        db.data[p * n + j] += s;
      }
  });
}

inline Var transpose(const Var& a) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw std::invalid_argument("transpose: operand must be rank 2");
  std::size_t m = av.rows(), n = av.cols();
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = av.data[i * n + j];
  Tape& t = a.tape();
  std::size_t ai = a.id(), oid = t.next_id();
  return t.record(std::move(out), [ai, oid, m, n](Tape& t) {
    const Tensor& g = t.grad(oid);
    Tensor& da = t.grad(ai);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) da.data[i * n + j] += g.data[j * m + i];
  });
}

// ---------------------------------------------------------------------------
// Reductions, normalization, structure
// ---------------------------------------------------------------------------

inline Var sum(const Var& a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.data) s += v;
  Tape& t = a.tape();
  std::size_t ai = a.id(), oid = t.next_id();
  return t.record(Tensor::scalar(s), [ai, oid](Tape& t) {
    double g = t.grad(oid).data[0];
    Tensor& da = t.grad(ai);
    for (double& v : da.data) v += g;
  });
}

inline Var mean(const Var& a) {
  const Tensor& av = a.value();
  if (av.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  double s = 0.0;
  for (double v : av.data) s += v;
  double inv = 1.0 / double(av.numel());
  Tape& t = a.tape();
  std::size_t ai = a.id(), oid = t.next_id();
  return t.record(Tensor::scalar(s * inv), [ai, oid, inv](Tape& t) {
    double g = t.grad(oid).data[0] * inv;
    Tensor& da = t.grad(ai);
    for (double& v : da.data) v += g;
  });
}

/// Mean over the first axis of a [t x d] tensor -> [d]. t must be >= 1.
inline Var mean_pool(const Var& a) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw std::invalid_argument("mean_pool: operand must be rank 2");
  std::size_t rows = av.rows(), d = av.cols();
  if (rows == 0) throw std::invalid_argument("mean_pool: empty pool");
  Tensor out = Tensor::zeros({d});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < d; ++j) out.data[j] += av.data[i * d + j];
  double inv = 1.0 / double(rows);
  for (double& v : out.data) v *= inv;
  Tape& t = a.tape();
  std::size_t ai = a.id(), oid = t.next_id();
  return t.record(std::move(out), [ai, oid, rows, d, inv](Tape& t) {
    const Tensor& g = t.grad(oid);
    Tensor& da = t.grad(ai);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < d; ++j) da.data[i * d + j] += g.data[j] * inv;
  });
}

/// Numerically stable softmax over a rank-1 tensor at the given temperature.
inline Var softmax(const Var& a, double temperature) {
  const Tensor& av = a.value();
  if (av.rank() != 1 || av.numel() == 0)
    throw std::invalid_argument("softmax: operand must be a nonempty rank-1 tensor");
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax: temperature must be positive");
  std::size_t n = av.numel();
  double mx = av.data[0];
  for (double v : av.data) mx = std::max(mx, v);
  Tensor out = Tensor::zeros({n});
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out.data[i] = std::exp((av.data[i] - mx) / temperature);
    z += out.data[i];
  }
  for (double& v : out.data) v /= z;
  Tape& t = a.tape();
  std::size_t ai = a.id(), oid = t.next_id();
  double inv_temp = 1.0 / temperature;
  return t.record(std::move(out), [ai, oid, n, inv_temp](Tape& t) {
    const Tensor& g = t.grad(oid);
    const Tensor& y = t.value(oid);
    Tensor& da = t.grad(ai);
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += g.data[i] * y.data[i];
    for (std::size_t i = 0; i < n; ++i) da.data[i] += inv_temp * y.data[i] * (g.data[i] - dot);
  });
}

/// log(sum(exp(x))) over a rank-1 tensor, computed with max subtraction.
inline Var log_sum_exp(const Var& a) {
  const Tensor& av = a.value();
  if (av.rank() != 1 || av.numel() == 0)
    throw std::invalid_argument("log_sum_exp: operand must be a nonempty rank-1 tensor");
  std::size_t n = av.numel();
  double mx = av.data[0];
  for (double v : av.data) mx = std::max(mx, v);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += std::exp(av.data[i] - mx);
  double out = mx + std::log(z);
  Tape& t = a.tape();
  std::size_t ai = a.id(), oid = t.next_id();
  return t.record(Tensor::scalar(out), [ai, oid, n](Tape& t) {
    double g = t.grad(oid).data[0];
    const Tensor& av = t.value(ai);
    double lse = t.value(oid).data[0];
    Tensor& da = t.grad(ai);
    for (std::size_t i = 0; i < n; ++i) da.data[i] += g * std::exp(av.data[i] - lse);
  });
}

/// x / max(||x||, 1e-12). The epsilon guard makes the zero vector a fixed
/// point instead of an error.
inline Var l2_normalize(const Var& a) {
  constexpr double kEps = 1e-12;
  const Tensor& av = a.value();
  if (av.rank() != 1) throw std::invalid_argument("l2_normalize: operand must be rank 1");
  std::size_t n = av.numel();
  double sq = 0.0;
  for (double v : av.data) sq += v * v;
  double nrm = std::sqrt(sq);
  double denom = std::max(nrm, kEps);
  Tensor out = Tensor::zeros({n});
  for (std::size_t i = 0; i < n; ++i) out.data[i] = av.data[i] / denom;
  Tape& t = a.tape();
  std::size_t ai = a.id(), oid = t.next_id();
  bool guarded = nrm < kEps;
  return t.record(std::move(out), [ai, oid, n, denom, guarded](Tape& t) {
    const Tensor& g = t.grad(oid);
    const Tensor& y = t.value(oid);
    Tensor& da = t.grad(ai);
    if (guarded) {
      for (std::size_t i = 0; i < n; ++i) da.data[i] += g.data[i] / denom;
      return;
    }
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += g.data[i] * y.data[i];
    for (std::size_t i = 0; i < n; ++i) da.data[i] += (g.data[i] - y.data[i] * dot) / denom;
  });
}

/// Single element of a rank-1 tensor as a scalar.
inline Var pick(const Var& a, std::size_t i) {
  const Tensor& av = a.value();
  if (av.rank() != 1) throw std::invalid_argument("pick: operand must be rank 1");
  if (i >= av.numel()) throw std::invalid_argument("pick: index out of range");
  Tape& t = a.tape();
  std::size_t ai = a.id(), oid = t.next_id();
  return t.record(Tensor::scalar(av.data[i]),
                  [ai, oid, i](Tape& t) { t.grad(ai).data[i] += t.grad(oid).data[0]; });
}

/// Subset of a rank-1 tensor; repeated indices accumulate on backward.
inline Var gather(const Var& a, std::vector<std::size_t> idx) {
  const Tensor& av = a.value();
  if (av.rank() != 1) throw std::invalid_argument("gather: operand must be rank 1");
  Tensor out = Tensor::zeros({idx.size()});
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] >= av.numel()) throw std::invalid_argument("gather: index out of range");
    out.data[j] = av.data[idx[j]];
  }
  Tape& t = a.tape();
  std::size_t ai = a.id(), oid = t.next_id();
  return t.record(std::move(out), [ai, oid, idx = std::move(idx)](Tape& t) {
    const Tensor& g = t.grad(oid);
    Tensor& da = t.grad(ai);
    for (std::size_t j = 0; j < idx.size(); ++j) da.data[idx[j]] += g.data[j];
  });
}

/// Row i of a rank-2 tensor as a rank-1 tensor.
inline Var row(const Var& a, std::size_t i) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw std::invalid_argument("row: operand must be rank 2");
  if (i >= av.rows()) throw std::invalid_argument("row: index out of range");
  std::size_t n = av.cols();
  Tensor out = Tensor::zeros({n});
  std::copy_n(av.data.data() + i * n, n, out.data.data());
  Tape& t = a.tape();
  std::size_t ai = a.id(), oid = t.next_id();
  return t.record(std::move(out), [ai, oid, i, n](Tape& t) {
    const Tensor& g = t.grad(oid);
    Tensor& da = t.grad(ai);
    for (std::size_t j = 0; j < n; ++j) da.data[i * n + j] += g.data[j];
  });
}

/// Stack equal-length rank-1 tensors into a [t x d] tensor.
inline Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: empty input");
  std::size_t d = rows[0].value().numel();
  for (const Var& r : rows)
    if (r.value().rank() != 1 || r.value().numel() != d)
      throw std::invalid_argument("stack_rows: rows must be rank 1 with equal length");
  Tensor out = Tensor::zeros({rows.size(), d});
  std::vector<std::size_t> ids;
  ids.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(rows[i].value().data.data(), d, out.data.data() + i * d);
    ids.push_back(rows[i].id());
  }
  Tape& t = rows[0].tape();
  std::size_t oid = t.next_id();
  return t.record(std::move(out), [ids = std::move(ids), oid, d](Tape& t) {
    const Tensor& g = t.grad(oid);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      Tensor& da = t.grad(ids[i]);
      for (std::size_t j = 0; j < d; ++j) da.data[j] += g.data[i * d + j];
    }
  });
}

/// Concatenate rank-1 (or scalar) tensors into one rank-1 tensor.
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: empty input");
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.value().rank() > 1) throw std::invalid_argument("concat: parts must be rank 0 or 1");
    total += p.value().numel();
  }
  Tensor out = Tensor::zeros({total});
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (id, offset)
  spans.reserve(parts.size());
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy_n(p.value().data.data(), p.value().numel(), out.data.data() + off);
    spans.emplace_back(p.id(), off);
    off += p.value().numel();
  }
  Tape& t = parts[0].tape();
  std::size_t oid = t.next_id();
  return t.record(std::move(out), [spans = std::move(spans), oid](Tape& t) {
    const Tensor& g = t.grad(oid);
    for (auto [id, offset] : spans) {
      Tensor& da = t.grad(id);
      for (std::size_t j = 0; j < da.numel(); ++j) da.data[j] += g.data[offset + j];
    }
  });
}

// Operator sugar.
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator+(double c, const Var& a) { return add_scalar(a, c); }
inline Var operator-(const Var& a, double c) { return add_scalar(a, -c); }
inline Var operator-(double c, const Var& a) { return add_scalar(neg(a), c); }

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0.0;
  bool all_pass = true;
};

/// Relative error with a floor so that near-zero gradient pairs compare on an
/// absolute scale instead of blowing up.
inline double rel_err(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-2});
  return std::fabs(a - b) / denom;
}

/// Check analytic gradients of a scalar function against central differences,
/// parameter by parameter. `f` must rebuild its forward pass from `params`
/// each call. Mutates `params` transiently; restores them on exit.
template <class F>
GradCheckReport grad_check(F&& f, std::vector<std::pair<std::string, Tensor*>> params,
                           double step, double tol) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  GradCheckReport report;

  // Analytic pass.
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (auto& [name, tensor] : params) vars.push_back(tape.leaf(*tensor));
  Var loss = f(tape, std::span<const Var>(vars));
  tape.backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(vars.size());
  for (const Var& v : vars) analytic.push_back(v.grad());

  auto eval = [&]() {
    Tape t2;
    std::vector<Var> v2;
    v2.reserve(params.size());
    for (auto& [name, tensor] : params) v2.push_back(t2.leaf(*tensor));
    return f(t2, std::span<const Var>(v2)).value().item();
  };

  for (std::size_t p = 0; p < params.size(); ++p) {
    GradCheckEntry entry;
    entry.name = params[p].first;
    Tensor& tensor = *params[p].second;
    for (std::size_t i = 0; i < tensor.numel(); ++i) {
      double saved = tensor.data[i];
      tensor.data[i] = saved + step;
      double fp = eval();
      tensor.data[i] = saved - step;
      double fm = eval();
      tensor.data[i] = saved;
      double fd = (fp - fm) / (2.0 * step);
      double err = rel_err(analytic[p].data[i], fd);
      entry.max_rel_err = std::max(entry.max_rel_err, err);
    }
    entry.pass = entry.max_rel_err < tol;
    report.worst = std::max(report.worst, entry.max_rel_err);
    report.all_pass = report.all_pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace mcpo
