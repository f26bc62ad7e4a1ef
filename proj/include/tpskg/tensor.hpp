#pragma once

// Dense tensor engine with reverse-mode differentiation. Deliberately small:
// it implements exactly the operations the rest of the project needs, with
// every reduction running in ascending index order so repeated runs are
// bit-identical at fixed precision.

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tpskg/common.hpp"

namespace tpskg {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

// Forward-op accounting. matmul adds m*n*k multiply-accumulates per batch
// item to forward_total; the encoder additionally brackets its own forwards
// into encoder_total so cost comparisons can be scoped the way MACs tables
// usually are (backbone only).
namespace macs {
inline thread_local uint64_t forward_total = 0;
inline thread_local uint64_t encoder_total = 0;
inline void reset() {
  forward_total = 0;
  encoder_total = 0;
}
}  // namespace macs

template <typename S>
class GradientTape;

template <typename S>
inline thread_local GradientTape<S>* g_active_tape = nullptr;

// ---------------------------------------------------------------------------
// Tensor: a value-semantic handle to a shared node holding shape, a flat
// row-major buffer, and an optional gradient buffer of the same length.
// ---------------------------------------------------------------------------

template <typename S>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until a backward pass first touches it
    bool requires_grad = false;
  };

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    int64_t n = numel(shape);
    t.node_ = std::make_shared<Node>(Node{std::move(shape), std::vector<S>(static_cast<size_t>(n), S(0)), {}, false});
    return t;
  }

  static Tensor full(Shape shape, S value) {
    Tensor t = zeros(std::move(shape));
    for (S& v : t.node_->data) v = value;
    return t;
  }

  static Tensor from(Shape shape, std::vector<S> data) {
    if (numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("Tensor::from: shape " + shape_str(shape) + " does not match buffer of " +
                       std::to_string(data.size()) + " elements");
    Tensor t;
    t.node_ = std::make_shared<Node>(Node{std::move(shape), std::move(data), {}, false});
    return t;
  }

  static Tensor scalar(S value) { return from({1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(node_->data.size()); }

  int64_t dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw IndexError("Tensor::dim: axis " + std::to_string(i) + " out of range for " + shape_str(shape()));
    return node_->shape[static_cast<size_t>(i)];
  }

  const std::vector<S>& data() const { return node_->data; }
  std::vector<S>& mutable_data() { return node_->data; }

  S item() const {
    if (size() != 1) throw ContractError("Tensor::item on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }

  S at(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank())
      throw IndexError("Tensor::at: index rank mismatch for " + shape_str(shape()));
    int64_t lin = 0;
    int axis = 0;
    for (int64_t i : idx) {
      int64_t d = node_->shape[static_cast<size_t>(axis)];
      if (i < 0 || i >= d) throw IndexError("Tensor::at: index out of range for " + shape_str(shape()));
      lin = lin * d + i;
      ++axis;
    }
    return node_->data[static_cast<size_t>(lin)];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (node_->grad.empty()) throw ContractError("Tensor::grad read before any backward populated it");
    return node_->grad;
  }
  std::vector<S>& mutable_grad() { return node_->grad; }
  void clear_grad() { node_->grad.clear(); }

  /// Values copied into a fresh non-differentiable tensor.
  Tensor detached() const {
    Tensor t = from(node_->shape, node_->data);
    return t;
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

template <typename S>
std::vector<S>& ensure_grad(typename Tensor<S>::Node& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), S(0));
  return n.grad;
}

// ---------------------------------------------------------------------------
// GradientTape: ordered record of executed operations. Execution order is a
// topological order by construction, so backward is a single reverse sweep.
// ---------------------------------------------------------------------------

template <typename S>
class GradientTape {
 public:
  struct Record {
    std::string op;
    std::shared_ptr<typename Tensor<S>::Node> out;
    std::function<void()> backward;
  };

  GradientTape() = default;
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  bool consumed() const { return consumed_; }

  void reset() {
    records_.clear();
    consumed_ = false;
  }

  void record(std::string op, const Tensor<S>& out, std::function<void()> fn) {
    records_.push_back(Record{std::move(op), out.node(), std::move(fn)});
  }

  /// Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse. Each
  /// requires_grad tensor reachable from the loss ends up with a populated
  /// grad buffer.
  void backward(const Tensor<S>& loss) {
    if (!loss.defined() || loss.size() != 1)
      throw ContractError("backward expects a scalar loss" +
                          (loss.defined() ? ", got shape " + shape_str(loss.shape()) : std::string()));
    if (consumed_) throw ContractError("backward invoked twice on the same tape without reset");
    consumed_ = true;
    auto node = loss.node();
    node->grad.assign(node->data.size(), S(0));
    node->grad[0] = S(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
  }

  /// Name of the first recorded op whose output contains a non-finite value,
  /// or empty string. Used for abort diagnostics.
  std::string first_non_finite() const {
    for (const auto& r : records_) {
      for (S v : r.out->data) {
        if (!std::isfinite(static_cast<double>(v))) return r.op;
      }
    }
    return {};
  }

 private:
  std::vector<Record> records_;
  bool consumed_ = false;
};

/// Activates a tape for the current thread for the lifetime of the scope.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(GradientTape<S>& tape) : prev_(g_active_tape<S>) { g_active_tape<S> = &tape; }
  ~TapeScope() { g_active_tape<S> = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradientTape<S>* prev_;
};

/// Suspends recording (e.g. the mask-finding forward pass).
template <typename S>
class NoGradScope {
 public:
  NoGradScope() : prev_(g_active_tape<S>) { g_active_tape<S> = nullptr; }
  ~NoGradScope() { g_active_tape<S> = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradientTape<S>* prev_;
};

namespace detail {

template <typename S>
void maybe_record(const char* op, std::initializer_list<Tensor<S>> inputs, Tensor<S>& out,
                  std::function<void()> fn) {
  GradientTape<S>* tape = g_active_tape<S>;
  if (tape == nullptr) return;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return;
  out.set_requires_grad(true);
  tape->record(op, out, std::move(fn));
}

/// b may share a's shape or be a trailing suffix of it (bias-style
/// broadcast over the leading dimensions). Returns numel(b).
template <typename S>
int64_t broadcast_suffix(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(as) + " and " + shape_str(bs) + " are incompatible");
  size_t off = as.size() - bs.size();
  for (size_t i = 0; i < bs.size(); ++i) {
    if (as[off + i] != bs[i])
      throw ShapeError(std::string(op) + ": shapes " + shape_str(as) + " and " + shape_str(bs) + " are incompatible");
  }
  return numel(bs);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  int64_t bn = detail::broadcast_suffix("add", a, b);
  int64_t n = a.size();
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.mutable_data().data();
  for (int64_t o = 0; o < n; o += bn)
    for (int64_t j = 0; j < bn; ++j) po[o + j] = pa[o + j] + pb[j];

  detail::maybe_record<S>("add", {a, b}, out, [an = a.node(), bnode = b.node(), on = out.node(), bn] {
    if (on->grad.empty()) return;
    const S* g = on->grad.data();
    int64_t n = static_cast<int64_t>(on->data.size());
    if (an->requires_grad) {
      auto& ga = ensure_grad<S>(*an);
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (bnode->requires_grad) {
      auto& gb = ensure_grad<S>(*bnode);
      for (int64_t o = 0; o < n; o += bn)
        for (int64_t j = 0; j < bn; ++j) gb[j] += g[o + j];
    }
  });
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  int64_t bn = detail::broadcast_suffix("mul", a, b);
  int64_t n = a.size();
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  S* po = out.mutable_data().data();
  for (int64_t o = 0; o < n; o += bn)
    for (int64_t j = 0; j < bn; ++j) po[o + j] = pa[o + j] * pb[j];

  detail::maybe_record<S>("mul", {a, b}, out, [an = a.node(), bnode = b.node(), on = out.node(), bn] {
    if (on->grad.empty()) return;
    const S* g = on->grad.data();
    const S* pa = an->data.data();
    const S* pb = bnode->data.data();
    int64_t n = static_cast<int64_t>(on->data.size());
    if (an->requires_grad) {
      auto& ga = ensure_grad<S>(*an);
      for (int64_t o = 0; o < n; o += bn)
        for (int64_t j = 0; j < bn; ++j) ga[o + j] += g[o + j] * pb[j];
    }
    if (bnode->requires_grad) {
      auto& gb = ensure_grad<S>(*bnode);
      for (int64_t o = 0; o < n; o += bn)
        for (int64_t j = 0; j < bn; ++j) gb[j] += g[o + j] * pa[o + j];
    }
  });
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  int64_t n = a.size();
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data().data();
  S* po = out.mutable_data().data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;

  detail::maybe_record<S>("scale", {a}, out, [an = a.node(), on = out.node(), c] {
    if (on->grad.empty() || !an->requires_grad) return;
    const S* g = on->grad.data();
    auto& ga = ensure_grad<S>(*an);
    int64_t n = static_cast<int64_t>(on->data.size());
    for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * c;
  });
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, scale(b, S(-1)));
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  // Exact erf form: 0.5 x (1 + erf(x / sqrt(2))).
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  int64_t n = a.size();
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data().data();
  S* po = out.mutable_data().data();
  for (int64_t i = 0; i < n; ++i) {
    double x = static_cast<double>(pa[i]);
    po[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
  }

  detail::maybe_record<S>("gelu", {a}, out, [an = a.node(), on = out.node()] {
    if (on->grad.empty() || !an->requires_grad) return;
    const S* g = on->grad.data();
    const S* pa = an->data.data();
    auto& ga = ensure_grad<S>(*an);
    int64_t n = static_cast<int64_t>(on->data.size());
    for (int64_t i = 0; i < n; ++i) {
      double x = static_cast<double>(pa[i]);
      double d = 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      ga[i] += g[i] * static_cast<S>(d);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor<S> out = Tensor<S>::from(std::move(shape), a.data());

  detail::maybe_record<S>("reshape", {a}, out, [an = a.node(), on = out.node()] {
    if (on->grad.empty() || !an->requires_grad) return;
    const S* g = on->grad.data();
    auto& ga = ensure_grad<S>(*an);
    int64_t n = static_cast<int64_t>(on->data.size());
    for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
  });
  return out;
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

/// out linear index -> in linear index map for a permutation of axes.
inline std::vector<int64_t> permute_index_map(const Shape& in_shape, const std::vector<int>& perm) {
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[static_cast<size_t>(perm[i])];
  auto in_strides = row_major_strides(in_shape);
  int64_t n = numel(in_shape);
  std::vector<int64_t> map(static_cast<size_t>(n));
  std::vector<int64_t> idx(perm.size(), 0);
  for (int64_t o = 0; o < n; ++o) {
    int64_t lin = 0;
    for (size_t i = 0; i < perm.size(); ++i) lin += idx[i] * in_strides[static_cast<size_t>(perm[i])];
    map[static_cast<size_t>(o)] = lin;
    for (int i = static_cast<int>(perm.size()) - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
  return map;
}

}  // namespace detail

template <typename S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<int>& perm) {
  const Shape& as = a.shape();
  if (perm.size() != as.size()) throw ShapeError("permute: axes rank mismatch for " + shape_str(as));
  std::vector<bool> seen(perm.size(), false);
  for (int p : perm) {
    if (p < 0 || p >= static_cast<int>(perm.size()) || seen[static_cast<size_t>(p)])
      throw ShapeError("permute: invalid axis permutation for " + shape_str(as));
    seen[static_cast<size_t>(p)] = true;
  }
  Shape os(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) os[i] = as[static_cast<size_t>(perm[i])];
  auto map = detail::permute_index_map(as, perm);
  Tensor<S> out = Tensor<S>::zeros(std::move(os));
  const S* pa = a.data().data();
  S* po = out.mutable_data().data();
  int64_t n = a.size();
  for (int64_t o = 0; o < n; ++o) po[o] = pa[map[static_cast<size_t>(o)]];

  detail::maybe_record<S>("permute", {a}, out, [an = a.node(), on = out.node(), map = std::move(map)] {
    if (on->grad.empty() || !an->requires_grad) return;
    const S* g = on->grad.data();
    auto& ga = ensure_grad<S>(*an);
    int64_t n = static_cast<int64_t>(on->data.size());
    for (int64_t o = 0; o < n; ++o) ga[map[static_cast<size_t>(o)]] += g[o];
  });
  return out;
}

template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& a) {
  std::vector<int> perm(static_cast<size_t>(a.rank()));
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

template <typename S>
Tensor<S> concat_rows(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("concat_rows: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not stack");
  int64_t ra = a.dim(0), rb = b.dim(0), c = a.dim(1);
  Tensor<S> out = Tensor<S>::zeros({ra + rb, c});
  S* po = out.mutable_data().data();
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for (int64_t i = 0; i < ra * c; ++i) po[i] = pa[i];
  for (int64_t i = 0; i < rb * c; ++i) po[ra * c + i] = pb[i];

  detail::maybe_record<S>("concat_rows", {a, b}, out,
                          [an = a.node(), bn = b.node(), on = out.node(), ra, rb, c] {
                            if (on->grad.empty()) return;
                            const S* g = on->grad.data();
                            if (an->requires_grad) {
                              auto& ga = ensure_grad<S>(*an);
                              for (int64_t i = 0; i < ra * c; ++i) ga[i] += g[i];
                            }
                            if (bn->requires_grad) {
                              auto& gb = ensure_grad<S>(*bn);
                              for (int64_t i = 0; i < rb * c; ++i) gb[i] += g[ra * c + i];
                            }
                          });
  return out;
}

/// Row i of a rank-2 tensor as a rank-1 tensor.
template <typename S>
Tensor<S> row(const Tensor<S>& a, int64_t i) {
  if (a.rank() != 2) throw ShapeError("row: expected rank-2 tensor, got " + shape_str(a.shape()));
  int64_t rows = a.dim(0), cols = a.dim(1);
  if (i < 0 || i >= rows) throw IndexError("row: index " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
  std::vector<S> buf(a.data().begin() + i * cols, a.data().begin() + (i + 1) * cols);
  Tensor<S> out = Tensor<S>::from({cols}, std::move(buf));

  detail::maybe_record<S>("row", {a}, out, [an = a.node(), on = out.node(), i, cols] {
    if (on->grad.empty() || !an->requires_grad) return;
    const S* g = on->grad.data();
    auto& ga = ensure_grad<S>(*an);
    for (int64_t j = 0; j < cols; ++j) ga[i * cols + j] += g[j];
  });
  return out;
}

// ---------------------------------------------------------------------------
// matmul: (..., m, k) x (..., k, n) -> (..., m, n). The second operand may be
// rank-2, in which case it is shared across the leading batch dimensions;
// otherwise leading dimensions must match exactly.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2)
    throw ShapeError("matmul: ranks below 2: " + shape_str(as) + " x " + shape_str(bs));
  int64_t m = as[as.size() - 2], k = as[as.size() - 1];
  int64_t kb = bs[bs.size() - 2], n = bs[bs.size() - 1];
  if (k != kb)
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(as) + " x " + shape_str(bs));
  bool shared_b = bs.size() == 2;
  if (!shared_b) {
    if (bs.size() != as.size())
      throw ShapeError("matmul: batch ranks disagree: " + shape_str(as) + " x " + shape_str(bs));
    for (size_t i = 0; i + 2 < as.size(); ++i) {
      if (as[i] != bs[i])
        throw ShapeError("matmul: batch dimensions disagree: " + shape_str(as) + " x " + shape_str(bs));
    }
  }
  Shape os(as.begin(), as.end());
  os[os.size() - 1] = n;
  int64_t batch = 1;
  for (size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];

  Tensor<S> out = Tensor<S>::zeros(std::move(os));
  {
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = out.mutable_data().data();
    for (int64_t bt = 0; bt < batch; ++bt) {
      const S* A = pa + bt * m * k;
      const S* B = pb + (shared_b ? 0 : bt * k * n);
      S* C = po + bt * m * n;
      for (int64_t i = 0; i < m; ++i) {
        S* Ci = C + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
          S av = A[i * k + kk];
          const S* Bk = B + kk * n;
          for (int64_t j = 0; j < n; ++j) Ci[j] += av * Bk[j];
        }
      }
    }
  }
  macs::forward_total += static_cast<uint64_t>(batch) * static_cast<uint64_t>(m) *
                         static_cast<uint64_t>(n) * static_cast<uint64_t>(k);

  detail::maybe_record<S>("matmul", {a, b}, out,
                          [an = a.node(), bn = b.node(), on = out.node(), batch, m, k, n, shared_b] {
    if (on->grad.empty()) return;
    const S* G = on->grad.data();
    const S* pa = an->data.data();
    const S* pb = bn->data.data();
    if (an->requires_grad) {
      auto& ga = ensure_grad<S>(*an);
      for (int64_t bt = 0; bt < batch; ++bt) {
        const S* Gb = G + bt * m * n;
        const S* B = pb + (shared_b ? 0 : bt * k * n);
        S* gA = ga.data() + bt * m * k;
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t kk = 0; kk < k; ++kk) {
            S acc = S(0);
            const S* Gi = Gb + i * n;
            const S* Bk = B + kk * n;
            for (int64_t j = 0; j < n; ++j) acc += Gi[j] * Bk[j];
            gA[i * k + kk] += acc;
          }
        }
      }
    }
    if (bn->requires_grad) {
      auto& gb = ensure_grad<S>(*bn);
      for (int64_t bt = 0; bt < batch; ++bt) {
        const S* Gb = G + bt * m * n;
        const S* A = pa + bt * m * k;
        S* gB = gb.data() + (shared_b ? 0 : bt * k * n);
        for (int64_t i = 0; i < m; ++i) {
          const S* Gi = Gb + i * n;
          for (int64_t kk = 0; kk < k; ++kk) {
            S av = A[i * k + kk];
            S* gBk = gB + kk * n;
            for (int64_t j = 0; j < n; ++j) gBk[j] += av * Gi[j];
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// softmax along an axis, computed with max-subtraction.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
  int r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of range for " + shape_str(a.shape()));
  int64_t len = a.shape()[static_cast<size_t>(axis)];
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= a.shape()[static_cast<size_t>(i)];
  for (int i = 0; i < axis; ++i) outer *= a.shape()[static_cast<size_t>(i)];

  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data().data();
  S* po = out.mutable_data().data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      int64_t base = o * len * inner + in;
      S mx = pa[base];
      for (int64_t l = 1; l < len; ++l) mx = std::max(mx, pa[base + l * inner]);
      S sum = S(0);
      for (int64_t l = 0; l < len; ++l) {
        S e = std::exp(pa[base + l * inner] - mx);
        po[base + l * inner] = e;
        sum += e;
      }
      S inv = S(1) / sum;
      for (int64_t l = 0; l < len; ++l) po[base + l * inner] *= inv;
    }
  }

  detail::maybe_record<S>("softmax", {a}, out, [an = a.node(), on = out.node(), outer, len, inner] {
    if (on->grad.empty() || !an->requires_grad) return;
    const S* g = on->grad.data();
    const S* y = on->data.data();
    auto& ga = ensure_grad<S>(*an);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        int64_t base = o * len * inner + in;
        S dot = S(0);
        for (int64_t l = 0; l < len; ++l) dot += g[base + l * inner] * y[base + l * inner];
        for (int64_t l = 0; l < len; ++l) {
          int64_t idx = base + l * inner;
          ga[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// layernorm over the last dimension, with affine gain/bias.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> layernorm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
  int64_t d = x.dim(-1);
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != d || bias.dim(0) != d)
    throw ShapeError("layernorm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                     " do not match feature dim of " + shape_str(x.shape()));
  int64_t rows = x.size() / d;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  std::vector<S> mean(static_cast<size_t>(rows)), rstd(static_cast<size_t>(rows));
  {
    const S* px = x.data().data();
    const S* pg = gain.data().data();
    const S* pb = bias.data().data();
    S* po = out.mutable_data().data();
    for (int64_t r = 0; r < rows; ++r) {
      const S* xr = px + r * d;
      S mu = S(0);
      for (int64_t j = 0; j < d; ++j) mu += xr[j];
      mu /= static_cast<S>(d);
      S var = S(0);
      for (int64_t j = 0; j < d; ++j) {
        S c = xr[j] - mu;
        var += c * c;
      }
      var /= static_cast<S>(d);
      S rs = S(1) / std::sqrt(var + eps);
      mean[static_cast<size_t>(r)] = mu;
      rstd[static_cast<size_t>(r)] = rs;
      S* orow = po + r * d;
      for (int64_t j = 0; j < d; ++j) orow[j] = pg[j] * ((xr[j] - mu) * rs) + pb[j];
    }
  }

  detail::maybe_record<S>("layernorm", {x, gain, bias}, out,
                          [xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node(), rows, d,
                           mean = std::move(mean), rstd = std::move(rstd)] {
    if (on->grad.empty()) return;
    const S* g = on->grad.data();
    const S* px = xn->data.data();
    const S* pg = gn->data.data();
    for (int64_t r = 0; r < rows; ++r) {
      const S* xr = px + r * d;
      const S* gr = g + r * d;
      S mu = mean[static_cast<size_t>(r)];
      S rs = rstd[static_cast<size_t>(r)];
      if (gn->requires_grad) {
        auto& gg = ensure_grad<S>(*gn);
        for (int64_t j = 0; j < d; ++j) gg[j] += gr[j] * ((xr[j] - mu) * rs);
      }
      if (bn->requires_grad) {
        auto& gb = ensure_grad<S>(*bn);
        for (int64_t j = 0; j < d; ++j) gb[j] += gr[j];
      }
      if (xn->requires_grad) {
        auto& gx = ensure_grad<S>(*xn);
        S sum1 = S(0), sum2 = S(0);
        for (int64_t j = 0; j < d; ++j) {
          S dxhat = gr[j] * pg[j];
          sum1 += dxhat;
          sum2 += dxhat * ((xr[j] - mu) * rs);
        }
        S invd = S(1) / static_cast<S>(d);
        for (int64_t j = 0; j < d; ++j) {
          S xhat = (xr[j] - mu) * rs;
          S dxhat = gr[j] * pg[j];
          gx[r * d + j] += rs * (dxhat - sum1 * invd - xhat * sum2 * invd);
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// cross entropy of a rank-1 logit vector against an integer label:
//   loss = -log softmax(logits)[label]
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, int64_t label) {
  if (logits.rank() != 1) throw ShapeError("cross_entropy: expected rank-1 logits, got " + shape_str(logits.shape()));
  int64_t g = logits.dim(0);
  if (label < 0 || label >= g)
    throw IndexError("cross_entropy: label " + std::to_string(label) + " out of range [0, " + std::to_string(g) + ")");
  const S* pl = logits.data().data();
  S mx = pl[0];
  for (int64_t i = 1; i < g; ++i) mx = std::max(mx, pl[i]);
  std::vector<S> probs(static_cast<size_t>(g));
  S sum = S(0);
  for (int64_t i = 0; i < g; ++i) {
    probs[static_cast<size_t>(i)] = std::exp(pl[i] - mx);
    sum += probs[static_cast<size_t>(i)];
  }
  S inv = S(1) / sum;
  for (int64_t i = 0; i < g; ++i) probs[static_cast<size_t>(i)] *= inv;
  S loss = std::log(sum) + mx - pl[label];
  Tensor<S> out = Tensor<S>::scalar(loss);

  detail::maybe_record<S>("cross_entropy", {logits}, out,
                          [ln = logits.node(), on = out.node(), label, probs = std::move(probs)] {
    if (on->grad.empty() || !ln->requires_grad) return;
    S go = on->grad[0];
    auto& gl = ensure_grad<S>(*ln);
    int64_t g = static_cast<int64_t>(ln->data.size());
    for (int64_t i = 0; i < g; ++i) {
      S ind = (i == label) ? S(1) : S(0);
      gl[i] += go * (probs[static_cast<size_t>(i)] - ind);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Small non-differentiable helpers.
// ---------------------------------------------------------------------------

template <typename S>
int64_t argmax(const Tensor<S>& a) {
  if (a.size() == 0) throw ContractError("argmax of empty tensor");
  const auto& d = a.data();
  int64_t best = 0;
  for (int64_t i = 1; i < a.size(); ++i) {
    if (d[static_cast<size_t>(i)] > d[static_cast<size_t>(best)]) best = i;
  }
  return best;
}

template <typename S>
bool all_finite(const Tensor<S>& a) {
  for (S v : a.data()) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

}  // namespace tpskg
