#pragma once

// Reverse-mode automatic differentiation on a per-step tape. Ops append
// nodes holding the forward value and a backward closure; backward() walks
// the tape once in reverse creation order. Parameters enter as leaf nodes
// bound to an external gradient accumulator, so anything not reachable from
// the loss keeps an exactly-zero gradient.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include "dspast/common.hpp"
#include "dspast/tensor.hpp"

namespace dspast {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;   // same shape as value once allocated
  bool shared = false;
  bool trainable = true;  // running stats and other buffers are not

  void ensure_grad() {
    if (grad.shape != value.shape) grad = Tensor<T>(value.shape);
  }
  void zero_grad() {
    ensure_grad();
    grad.fill(T(0));
  }
  bool grad_is_zero() const {
    for (T g : grad.v)
      if (g != T(0)) return false;
    return true;
  }
};

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr; }
  const Tensor<T>& val() const;
  const Shape& shape() const { return val().shape; }
};

template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* value = nullptr;  // &owned, or an external tensor for leaves
    Tensor<T> grad;                    // empty until reached by backward
    bool needs_grad = false;
    Parameter<T>* param = nullptr;     // leaf binding
    std::vector<int> parents;
    std::function<void(Tape&, Node&)> backward;
  };

  // When set, every op validates its output is finite.
  bool debug_checks = false;

  void reset() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Tensor<T>& val(int id) const { return *nodes_[static_cast<std::size_t>(id)].value; }

  Tensor<T>& grad_of(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.shape != n.value->shape) {
      n.grad = Tensor<T>(n.value->shape);
    }
    return n.grad;
  }
  bool grad_allocated(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.grad.shape == n.value->shape;
  }

  Var<T> leaf(Parameter<T>& p) {
    Node n;
    n.value = &p.value;
    n.needs_grad = p.trainable;
    n.param = &p;
    return push(std::move(n));
  }

  // Constant/input; no gradient is tracked through it.
  Var<T> constant(Tensor<T> t) {
    Node n;
    n.owned = std::move(t);
    n.value = &n.owned;  // fixed up by push
    return push(std::move(n));
  }

  Var<T> make(Tensor<T> value, std::vector<int> parents,
              std::function<void(Tape&, Node&)> backward) {
    Node n;
    n.owned = std::move(value);
    n.parents = std::move(parents);
    for (int p : n.parents)
      if (nodes_[static_cast<std::size_t>(p)].needs_grad) n.needs_grad = true;
    if (n.needs_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  // Runs backward from a scalar loss. Every reachable parameter accumulates
  // into Parameter::grad; unreachable ones are left untouched.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw InvalidInput("backward: variable from another tape");
    Node& ln = node(loss.id);
    if (ln.value->numel() != 1) throw InvalidInput("backward: loss must be scalar");
    grad_of(loss.id).v[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || !grad_allocated(i)) continue;
      if (n.backward) n.backward(*this, n);
      if (n.param != nullptr) {
        n.param->ensure_grad();
        for (std::size_t j = 0; j < n.grad.v.size(); ++j) n.param->grad.v[j] += n.grad.v[j];
      }
    }
  }

 private:
  Var<T> push(Node&& n) {
    // Deque storage: node addresses are stable, so value pointers into
    // `owned` survive later growth.
    nodes_.push_back(std::move(n));
    Node& stored = nodes_.back();
    if (stored.param == nullptr) stored.value = &stored.owned;
    if (debug_checks) {
      for (T x : stored.value->v)
        if (!std::isfinite(static_cast<double>(x)))
          throw InvalidInput("non-finite value produced by a forward op");
    }
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::deque<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::val() const {
  return tape->val(id);
}

namespace agdetail {

inline void require(bool cond, const char* msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace agdetail

// ---- elementwise ----

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  agdetail::require(a.val().shape == b.val().shape, "add: shape mismatch");
  Tensor<T> out = a.val();
  const Tensor<T>& bv = b.val();
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv.v[i];
  return a.tape->make(std::move(out), {a.id, b.id}, [a, b](Tape<T>& tp, typename Tape<T>::Node& n) {
    if (tp.node(a.id).needs_grad) {
      auto& ga = tp.grad_of(a.id);
      for (std::size_t i = 0; i < n.grad.v.size(); ++i) ga.v[i] += n.grad.v[i];
    }
    if (tp.node(b.id).needs_grad) {
      auto& gb = tp.grad_of(b.id);
      for (std::size_t i = 0; i < n.grad.v.size(); ++i) gb.v[i] += n.grad.v[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  agdetail::require(a.val().shape == b.val().shape, "mul: shape mismatch");
  Tensor<T> out = a.val();
  const Tensor<T>& bv = b.val();
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv.v[i];
  return a.tape->make(std::move(out), {a.id, b.id}, [a, b](Tape<T>& tp, typename Tape<T>::Node& n) {
    const Tensor<T>& av = tp.val(a.id);
    const Tensor<T>& bv2 = tp.val(b.id);
    if (tp.node(a.id).needs_grad) {
      auto& ga = tp.grad_of(a.id);
      for (std::size_t i = 0; i < n.grad.v.size(); ++i) ga.v[i] += n.grad.v[i] * bv2.v[i];
    }
    if (tp.node(b.id).needs_grad) {
      auto& gb = tp.grad_of(b.id);
      for (std::size_t i = 0; i < n.grad.v.size(); ++i) gb.v[i] += n.grad.v[i] * av.v[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, double c) {
  Tensor<T> out = a.val();
  for (auto& x : out.v) x = static_cast<T>(x * c);
  return a.tape->make(std::move(out), {a.id}, [a, c](Tape<T>& tp, typename Tape<T>::Node& n) {
    auto& ga = tp.grad_of(a.id);
    for (std::size_t i = 0; i < n.grad.v.size(); ++i) ga.v[i] += static_cast<T>(n.grad.v[i] * c);
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.val();
  for (auto& x : out.v) x = x > T(0) ? x : T(0);
  return a.tape->make(std::move(out), {a.id}, [a](Tape<T>& tp, typename Tape<T>::Node& n) {
    const Tensor<T>& av = tp.val(a.id);
    auto& ga = tp.grad_of(a.id);
    for (std::size_t i = 0; i < n.grad.v.size(); ++i)
      if (av.v[i] > T(0)) ga.v[i] += n.grad.v[i];
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out = a.val();
  for (auto& x : out.v) x = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x))));
  return a.tape->make(std::move(out), {a.id}, [a](Tape<T>& tp, typename Tape<T>::Node& n) {
    auto& ga = tp.grad_of(a.id);
    const Tensor<T>& y = *n.value;
    for (std::size_t i = 0; i < n.grad.v.size(); ++i)
      ga.v[i] += n.grad.v[i] * y.v[i] * (T(1) - y.v[i]);
  });
}

// Exact erf-based GELU.
template <typename T>
Var<T> gelu(Var<T> a) {
  Tensor<T> out = a.val();
  for (auto& x : out.v) {
    const double xd = static_cast<double>(x);
    x = static_cast<T>(0.5 * xd * (1.0 + std::erf(xd / std::sqrt(2.0))));
  }
  return a.tape->make(std::move(out), {a.id}, [a](Tape<T>& tp, typename Tape<T>::Node& n) {
    const Tensor<T>& av = tp.val(a.id);
    auto& ga = tp.grad_of(a.id);
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    for (std::size_t i = 0; i < n.grad.v.size(); ++i) {
      const double x = static_cast<double>(av.v[i]);
      const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      ga.v[i] += static_cast<T>(static_cast<double>(n.grad.v[i]) * (cdf + x * pdf));
    }
  });
}

// ---- dense products ----

// y = x . w^T + b with x [N, In], w [Out, In], b [Out].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const auto& xs = x.val().shape;
  const auto& ws = w.val().shape;
  agdetail::require(xs.size() == 2 && ws.size() == 2 && xs[1] == ws[1], "linear: shape mismatch");
  const std::int64_t n = xs[0], in = xs[1], out_dim = ws[0];
  agdetail::require(b.val().numel() == out_dim, "linear: bias size mismatch");
  Tensor<T> out({n, out_dim});
  gemm(x.val().data(), w.val().data(), out.data(), n, in, out_dim, false, true);
  const T* bias = b.val().data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < out_dim; ++j) out.v[static_cast<std::size_t>(i * out_dim + j)] += bias[j];
  return x.tape->make(std::move(out), {x.id, w.id, b.id},
                      [x, w, b, n, in, out_dim](Tape<T>& tp, typename Tape<T>::Node& nd) {
    if (tp.node(x.id).needs_grad)
      gemm(nd.grad.data(), tp.val(w.id).data(), tp.grad_of(x.id).data(), n, out_dim, in, false, false, true);
    if (tp.node(w.id).needs_grad)
      gemm(nd.grad.data(), tp.val(x.id).data(), tp.grad_of(w.id).data(), out_dim, n, in, true, false, true);
    if (tp.node(b.id).needs_grad) {
      auto& gb = tp.grad_of(b.id);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < out_dim; ++j) gb.v[static_cast<std::size_t>(j)] += nd.grad.v[static_cast<std::size_t>(i * out_dim + j)];
    }
  });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& as = a.val().shape;
  const auto& bs = b.val().shape;
  agdetail::require(as.size() == 2 && bs.size() == 2 && as[1] == bs[0], "matmul: shape mismatch");
  const std::int64_t m = as[0], k = as[1], n2 = bs[1];
  Tensor<T> out({m, n2});
  gemm(a.val().data(), b.val().data(), out.data(), m, k, n2);
  return a.tape->make(std::move(out), {a.id, b.id}, [a, b, m, k, n2](Tape<T>& tp, typename Tape<T>::Node& nd) {
    if (tp.node(a.id).needs_grad)
      gemm(nd.grad.data(), tp.val(b.id).data(), tp.grad_of(a.id).data(), m, n2, k, false, true, true);
    if (tp.node(b.id).needs_grad)
      gemm(tp.val(a.id).data(), nd.grad.data(), tp.grad_of(b.id).data(), k, m, n2, true, false, true);
  });
}

// Batched matmul over identical leading dims: a [..., m, k], b [..., k, n]
// (dimensions after applying the transpose flags).
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false) {
  const auto& as = a.val().shape;
  const auto& bs = b.val().shape;
  agdetail::require(as.size() == bs.size() && as.size() >= 3, "bmm: rank mismatch");
  std::int64_t batch = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) {
    agdetail::require(as[i] == bs[i], "bmm: batch dims differ");
    batch *= as[i];
  }
  const std::int64_t ar = as[as.size() - 2], ac = as[as.size() - 1];
  const std::int64_t br = bs[bs.size() - 2], bc = bs[bs.size() - 1];
  const std::int64_t m = trans_a ? ac : ar;
  const std::int64_t k = trans_a ? ar : ac;
  const std::int64_t kb = trans_b ? bc : br;
  const std::int64_t n2 = trans_b ? br : bc;
  agdetail::require(k == kb, "bmm: inner dims differ");

  Shape os(as.begin(), as.end() - 2);
  os.push_back(m);
  os.push_back(n2);
  Tensor<T> out(os);
  const std::int64_t a_step = ar * ac, b_step = br * bc, o_step = m * n2;
  for (std::int64_t i = 0; i < batch; ++i)
    gemm(a.val().data() + i * a_step, b.val().data() + i * b_step, out.data() + i * o_step,
         m, k, n2, trans_a, trans_b);
  return a.tape->make(std::move(out), {a.id, b.id},
                      [a, b, batch, a_step, b_step, o_step, m, k, n2, ar, ac, br, bc, trans_a, trans_b](
                          Tape<T>& tp, typename Tape<T>::Node& nd) {
    // dC = dA? Use: A (m,k), B(k,n), C(m,n): dA = dC.B^T, dB = A^T.dC, then
    // undo the transposes by swapping operands/flags.
    if (tp.node(a.id).needs_grad) {
      auto& ga = tp.grad_of(a.id);
      for (std::int64_t i = 0; i < batch; ++i) {
        if (!trans_a)
          gemm(nd.grad.data() + i * o_step, tp.val(b.id).data() + i * b_step, ga.data() + i * a_step,
               m, n2, k, false, !trans_b, true);
        else
          gemm(tp.val(b.id).data() + i * b_step, nd.grad.data() + i * o_step, ga.data() + i * a_step,
               ar, n2, ac, trans_b, true, true);
      }
    }
    if (tp.node(b.id).needs_grad) {
      auto& gb = tp.grad_of(b.id);
      for (std::int64_t i = 0; i < batch; ++i) {
        if (!trans_b)
          gemm(tp.val(a.id).data() + i * a_step, nd.grad.data() + i * o_step, gb.data() + i * b_step,
               k, m, n2, !trans_a, false, true);
        else
          gemm(nd.grad.data() + i * o_step, tp.val(a.id).data() + i * a_step, gb.data() + i * b_step,
               br, m, bc, true, trans_a, true);
      }
    }
  });
}

// ---- shape ops ----

template <typename T>
Var<T> reshape(Var<T> a, Shape new_shape) {
  agdetail::require(shape_numel(new_shape) == a.val().numel(), "reshape: element count differs");
  Tensor<T> out(new_shape, a.val().v);
  return a.tape->make(std::move(out), {a.id}, [a](Tape<T>& tp, typename Tape<T>::Node& n) {
    auto& ga = tp.grad_of(a.id);
    for (std::size_t i = 0; i < n.grad.v.size(); ++i) ga.v[i] += n.grad.v[i];
  });
}

namespace agdetail {

inline std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size());
  std::int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = acc;
    acc *= s[static_cast<std::size_t>(i)];
  }
  return st;
}

}  // namespace agdetail

template <typename T>
Var<T> permute(Var<T> a, std::vector<int> perm) {
  const Shape& s = a.val().shape;
  agdetail::require(perm.size() == s.size(), "permute: rank mismatch");
  Shape os(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) os[i] = s[static_cast<std::size_t>(perm[i])];
  const auto in_strides = agdetail::strides_of(s);
  const auto out_strides = agdetail::strides_of(os);
  Tensor<T> out(os);
  const std::int64_t n = out.numel();
  const int rank = static_cast<int>(s.size());
  for (std::int64_t idx = 0; idx < n; ++idx) {
    std::int64_t rem = idx, src = 0;
    for (int d = 0; d < rank; ++d) {
      const std::int64_t coord = rem / out_strides[static_cast<std::size_t>(d)];
      rem -= coord * out_strides[static_cast<std::size_t>(d)];
      src += coord * in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])];
    }
    out.v[static_cast<std::size_t>(idx)] = a.val().v[static_cast<std::size_t>(src)];
  }
  return a.tape->make(std::move(out), {a.id},
                      [a, perm, in_strides, out_strides, rank](Tape<T>& tp, typename Tape<T>::Node& nd) {
    auto& ga = tp.grad_of(a.id);
    const std::int64_t n2 = nd.grad.numel();
    for (std::int64_t idx = 0; idx < n2; ++idx) {
      std::int64_t rem = idx, src = 0;
      for (int d = 0; d < rank; ++d) {
        const std::int64_t coord = rem / out_strides[static_cast<std::size_t>(d)];
        rem -= coord * out_strides[static_cast<std::size_t>(d)];
        src += coord * in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])];
      }
      ga.v[static_cast<std::size_t>(src)] += nd.grad.v[static_cast<std::size_t>(idx)];
    }
  });
}

// Concatenate along axis 1 of 3-D tensors [B, Li, D].
template <typename T>
Var<T> concat_axis1(const std::vector<Var<T>>& parts) {
  agdetail::require(!parts.empty(), "concat: empty");
  const Shape& s0 = parts[0].val().shape;
  agdetail::require(s0.size() == 3, "concat_axis1: expects rank 3");
  std::int64_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.val().shape;
    agdetail::require(s.size() == 3 && s[0] == s0[0] && s[2] == s0[2], "concat_axis1: shape mismatch");
    total += s[1];
  }
  const std::int64_t b = s0[0], d = s0[2];
  Tensor<T> out({b, total, d});
  std::vector<int> ids;
  std::vector<std::int64_t> lens;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t li = p.val().shape[1];
    for (std::int64_t bi = 0; bi < b; ++bi)
      std::copy_n(p.val().data() + bi * li * d, li * d, out.data() + (bi * total + off) * d);
    ids.push_back(p.id);
    lens.push_back(li);
    off += li;
  }
  Tape<T>* tape = parts[0].tape;
  std::vector<int> parents = ids;
  return tape->make(std::move(out), parents, [ids, lens, b, d, total](Tape<T>& tp, typename Tape<T>::Node& nd) {
    std::int64_t off2 = 0;
    for (std::size_t pi = 0; pi < ids.size(); ++pi) {
      const std::int64_t li = lens[pi];
      if (tp.node(ids[pi]).needs_grad) {
        auto& g = tp.grad_of(ids[pi]);
        for (std::int64_t bi = 0; bi < b; ++bi)
          for (std::int64_t j = 0; j < li * d; ++j)
            g.v[static_cast<std::size_t>(bi * li * d + j)] += nd.grad.v[static_cast<std::size_t>((bi * total + off2) * d + j)];
      }
      off2 += li;
    }
  });
}

// Concatenate along the last axis of 3-D tensors [B, L, Di].
template <typename T>
Var<T> concat_lastdim(const std::vector<Var<T>>& parts) {
  agdetail::require(!parts.empty(), "concat: empty");
  const Shape& s0 = parts[0].val().shape;
  agdetail::require(s0.size() == 3, "concat_lastdim: expects rank 3");
  std::int64_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.val().shape;
    agdetail::require(s.size() == 3 && s[0] == s0[0] && s[1] == s0[1], "concat_lastdim: shape mismatch");
    total += s[2];
  }
  const std::int64_t rows = s0[0] * s0[1];
  Tensor<T> out({s0[0], s0[1], total});
  std::vector<int> ids;
  std::vector<std::int64_t> widths;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t di = p.val().shape[2];
    for (std::int64_t r = 0; r < rows; ++r)
      std::copy_n(p.val().data() + r * di, di, out.data() + r * total + off);
    ids.push_back(p.id);
    widths.push_back(di);
    off += di;
  }
  Tape<T>* tape = parts[0].tape;
  return tape->make(std::move(out), ids, [ids, widths, rows, total](Tape<T>& tp, typename Tape<T>::Node& nd) {
    std::int64_t off2 = 0;
    for (std::size_t pi = 0; pi < ids.size(); ++pi) {
      const std::int64_t di = widths[pi];
      if (tp.node(ids[pi]).needs_grad) {
        auto& g = tp.grad_of(ids[pi]);
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < di; ++j)
            g.v[static_cast<std::size_t>(r * di + j)] += nd.grad.v[static_cast<std::size_t>(r * total + off2 + j)];
      }
      off2 += di;
    }
  });
}

template <typename T>
Var<T> slice_lastdim(Var<T> a, std::int64_t start, std::int64_t len) {
  const Shape& s = a.val().shape;
  const std::int64_t d = s.back();
  agdetail::require(start >= 0 && start + len <= d, "slice: out of range");
  std::int64_t rows = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  Shape os = s;
  os.back() = len;
  Tensor<T> out(os);
  for (std::int64_t r = 0; r < rows; ++r)
    std::copy_n(a.val().data() + r * d + start, len, out.data() + r * len);
  return a.tape->make(std::move(out), {a.id}, [a, start, len, rows, d](Tape<T>& tp, typename Tape<T>::Node& nd) {
    auto& g = tp.grad_of(a.id);
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < len; ++j)
        g.v[static_cast<std::size_t>(r * d + start + j)] += nd.grad.v[static_cast<std::size_t>(r * len + j)];
  });
}

// Select rows along axis 1: x [B, L, D], indices into L.
template <typename T>
Var<T> gather_axis1(Var<T> a, std::vector<std::int64_t> idx) {
  const Shape& s = a.val().shape;
  agdetail::require(s.size() == 3, "gather_axis1: expects rank 3");
  const std::int64_t b = s[0], l = s[1], d = s[2];
  for (auto i : idx) agdetail::require(i >= 0 && i < l, "gather_axis1: index out of range");
  const std::int64_t k = static_cast<std::int64_t>(idx.size());
  Tensor<T> out({b, k, d});
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t j = 0; j < k; ++j)
      std::copy_n(a.val().data() + (bi * l + idx[static_cast<std::size_t>(j)]) * d, d,
                  out.data() + (bi * k + j) * d);
  return a.tape->make(std::move(out), {a.id}, [a, idx, b, l, d, k](Tape<T>& tp, typename Tape<T>::Node& nd) {
    auto& g = tp.grad_of(a.id);
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t j = 0; j < k; ++j) {
        T* dst = g.data() + (bi * l + idx[static_cast<std::size_t>(j)]) * d;
        const T* src = nd.grad.data() + (bi * k + j) * d;
        for (std::int64_t e = 0; e < d; ++e) dst[e] += src[e];
      }
  });
}

// [K, D] -> [B, K, D] by repetition; gradient sums over the batch.
template <typename T>
Var<T> broadcast_rows(Var<T> p, std::int64_t batch) {
  const Shape& s = p.val().shape;
  agdetail::require(s.size() == 2, "broadcast_rows: expects rank 2");
  const std::int64_t k = s[0], d = s[1];
  Tensor<T> out({batch, k, d});
  for (std::int64_t bi = 0; bi < batch; ++bi)
    std::copy_n(p.val().data(), k * d, out.data() + bi * k * d);
  return p.tape->make(std::move(out), {p.id}, [p, batch, k, d](Tape<T>& tp, typename Tape<T>::Node& nd) {
    auto& g = tp.grad_of(p.id);
    for (std::int64_t bi = 0; bi < batch; ++bi)
      for (std::int64_t j = 0; j < k * d; ++j)
        g.v[static_cast<std::size_t>(j)] += nd.grad.v[static_cast<std::size_t>(bi * k * d + j)];
  });
}

// x [B, P, D] + p [P, D] broadcast over batch.
template <typename T>
Var<T> add_bcast_rows(Var<T> x, Var<T> p) {
  const Shape& xs = x.val().shape;
  const Shape& ps = p.val().shape;
  agdetail::require(xs.size() == 3 && ps.size() == 2 && xs[1] == ps[0] && xs[2] == ps[1],
                    "add_bcast_rows: shape mismatch");
  const std::int64_t b = xs[0], pd = ps[0] * ps[1];
  Tensor<T> out = x.val();
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t j = 0; j < pd; ++j)
      out.v[static_cast<std::size_t>(bi * pd + j)] += p.val().v[static_cast<std::size_t>(j)];
  return x.tape->make(std::move(out), {x.id, p.id}, [x, p, b, pd](Tape<T>& tp, typename Tape<T>::Node& nd) {
    if (tp.node(x.id).needs_grad) {
      auto& gx = tp.grad_of(x.id);
      for (std::size_t i = 0; i < nd.grad.v.size(); ++i) gx.v[i] += nd.grad.v[i];
    }
    if (tp.node(p.id).needs_grad) {
      auto& gp = tp.grad_of(p.id);
      for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t j = 0; j < pd; ++j)
          gp.v[static_cast<std::size_t>(j)] += nd.grad.v[static_cast<std::size_t>(bi * pd + j)];
    }
  });
}

// y[b,c,s] = x[b,c,s] * gate[b,c]; the per-feature attention multiply.
template <typename T>
Var<T> mul_channel_gate(Var<T> x, Var<T> gate) {
  const Shape& xs = x.val().shape;
  const Shape& gs = gate.val().shape;
  agdetail::require(xs.size() >= 2 && gs.size() == 2 && xs[0] == gs[0] && xs[1] == gs[1],
                    "mul_channel_gate: shape mismatch");
  const std::int64_t b = xs[0], c = xs[1];
  std::int64_t s = 1;
  for (std::size_t i = 2; i < xs.size(); ++i) s *= xs[i];
  Tensor<T> out = x.val();
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const T g = gate.val().v[static_cast<std::size_t>(bi * c + ci)];
      T* row = out.data() + (bi * c + ci) * s;
      for (std::int64_t j = 0; j < s; ++j) row[j] *= g;
    }
  return x.tape->make(std::move(out), {x.id, gate.id}, [x, gate, b, c, s](Tape<T>& tp, typename Tape<T>::Node& nd) {
    const Tensor<T>& xv = tp.val(x.id);
    const Tensor<T>& gv = tp.val(gate.id);
    if (tp.node(x.id).needs_grad) {
      auto& gx = tp.grad_of(x.id);
      for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t ci = 0; ci < c; ++ci) {
          const T g = gv.v[static_cast<std::size_t>(bi * c + ci)];
          const std::int64_t base = (bi * c + ci) * s;
          for (std::int64_t j = 0; j < s; ++j)
            gx.v[static_cast<std::size_t>(base + j)] += nd.grad.v[static_cast<std::size_t>(base + j)] * g;
        }
    }
    if (tp.node(gate.id).needs_grad) {
      auto& gg = tp.grad_of(gate.id);
      for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t ci = 0; ci < c; ++ci) {
          const std::int64_t base = (bi * c + ci) * s;
          T acc = T(0);
          for (std::int64_t j = 0; j < s; ++j)
            acc += nd.grad.v[static_cast<std::size_t>(base + j)] * xv.v[static_cast<std::size_t>(base + j)];
          gg.v[static_cast<std::size_t>(bi * c + ci)] += acc;
        }
    }
  });
}

// ---- reductions ----

// Mean over axis 1 of [B, K, R] -> [B, R].
template <typename T>
Var<T> mean_axis1(Var<T> a) {
  const Shape& s = a.val().shape;
  agdetail::require(s.size() == 3, "mean_axis1: expects rank 3");
  const std::int64_t b = s[0], k = s[1], r = s[2];
  Tensor<T> out({b, r});
  const T inv = T(1) / static_cast<T>(k);
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ki = 0; ki < k; ++ki)
      for (std::int64_t j = 0; j < r; ++j)
        out.v[static_cast<std::size_t>(bi * r + j)] += a.val().v[static_cast<std::size_t>((bi * k + ki) * r + j)] * inv;
  return a.tape->make(std::move(out), {a.id}, [a, b, k, r, inv](Tape<T>& tp, typename Tape<T>::Node& nd) {
    auto& g = tp.grad_of(a.id);
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t ki = 0; ki < k; ++ki)
        for (std::int64_t j = 0; j < r; ++j)
          g.v[static_cast<std::size_t>((bi * k + ki) * r + j)] += nd.grad.v[static_cast<std::size_t>(bi * r + j)] * inv;
  });
}

// Mean over the last axis: [..., S] -> [...]. Used as global average pooling
// on [B, C, T*M].
template <typename T>
Var<T> mean_lastdim(Var<T> a) {
  const Shape& s = a.val().shape;
  agdetail::require(s.size() >= 2, "mean_lastdim: rank too small");
  const std::int64_t inner = s.back();
  std::int64_t rows = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  Shape os(s.begin(), s.end() - 1);
  Tensor<T> out(os);
  const T inv = T(1) / static_cast<T>(inner);
  for (std::int64_t r = 0; r < rows; ++r) {
    T acc = T(0);
    const T* src = a.val().data() + r * inner;
    for (std::int64_t j = 0; j < inner; ++j) acc += src[j];
    out.v[static_cast<std::size_t>(r)] = acc * inv;
  }
  return a.tape->make(std::move(out), {a.id}, [a, rows, inner, inv](Tape<T>& tp, typename Tape<T>::Node& nd) {
    auto& g = tp.grad_of(a.id);
    for (std::int64_t r = 0; r < rows; ++r) {
      const T gv = nd.grad.v[static_cast<std::size_t>(r)] * inv;
      T* dst = g.data() + r * inner;
      for (std::int64_t j = 0; j < inner; ++j) dst[j] += gv;
    }
  });
}

template <typename T>
Var<T> sum_all(Var<T> a) {
  double acc = 0;
  for (T x : a.val().v) acc += static_cast<double>(x);
  return a.tape->make(Tensor<T>::scalar(static_cast<T>(acc)), {a.id},
                      [a](Tape<T>& tp, typename Tape<T>::Node& nd) {
    auto& g = tp.grad_of(a.id);
    const T gv = nd.grad.v[0];
    for (auto& x : g.v) x += gv;
  });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.val().numel()));
}

// ---- softmax / normalization ----

template <typename T>
Var<T> softmax_lastdim(Var<T> a) {
  const Shape& s = a.val().shape;
  const std::int64_t inner = s.back();
  std::int64_t rows = a.val().numel() / inner;
  Tensor<T> out = a.val();
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * inner;
    T mx = row[0];
    for (std::int64_t j = 1; j < inner; ++j) mx = std::max(mx, row[j]);
    double denom = 0;
    for (std::int64_t j = 0; j < inner; ++j) {
      row[j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)));
      denom += static_cast<double>(row[j]);
    }
    const T inv = static_cast<T>(1.0 / denom);
    for (std::int64_t j = 0; j < inner; ++j) row[j] *= inv;
  }
  return a.tape->make(std::move(out), {a.id}, [a, rows, inner](Tape<T>& tp, typename Tape<T>::Node& nd) {
    auto& g = tp.grad_of(a.id);
    const Tensor<T>& y = *nd.value;
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* yr = y.data() + r * inner;
      const T* gr = nd.grad.data() + r * inner;
      double dot = 0;
      for (std::int64_t j = 0; j < inner; ++j) dot += static_cast<double>(gr[j]) * static_cast<double>(yr[j]);
      T* dst = g.data() + r * inner;
      for (std::int64_t j = 0; j < inner; ++j)
        dst[j] += static_cast<T>((static_cast<double>(gr[j]) - dot) * static_cast<double>(yr[j]));
    }
  });
}

// L2-normalizes each row of [N, D].
template <typename T>
Var<T> normalize_rows(Var<T> a, double eps = 1e-12) {
  const Shape& s = a.val().shape;
  agdetail::require(s.size() == 2, "normalize_rows: expects rank 2");
  const std::int64_t n = s[0], d = s[1];
  Tensor<T> out = a.val();
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double acc = 0;
    T* row = out.data() + i * d;
    for (std::int64_t j = 0; j < d; ++j) acc += static_cast<double>(row[j]) * static_cast<double>(row[j]);
    const double norm = std::sqrt(acc) + eps;
    (*norms)[static_cast<std::size_t>(i)] = norm;
    for (std::int64_t j = 0; j < d; ++j) row[j] = static_cast<T>(row[j] / norm);
  }
  return a.tape->make(std::move(out), {a.id}, [a, n, d, norms](Tape<T>& tp, typename Tape<T>::Node& nd) {
    auto& g = tp.grad_of(a.id);
    const Tensor<T>& y = *nd.value;
    for (std::int64_t i = 0; i < n; ++i) {
      const T* yr = y.data() + i * d;
      const T* gr = nd.grad.data() + i * d;
      double dot = 0;
      for (std::int64_t j = 0; j < d; ++j) dot += static_cast<double>(gr[j]) * static_cast<double>(yr[j]);
      const double inv_norm = 1.0 / (*norms)[static_cast<std::size_t>(i)];
      T* dst = g.data() + i * d;
      for (std::int64_t j = 0; j < d; ++j)
        dst[j] += static_cast<T>((static_cast<double>(gr[j]) - dot * static_cast<double>(yr[j])) * inv_norm);
    }
  });
}

// LayerNorm over the last axis with affine parameters.
template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-6) {
  const Shape& s = x.val().shape;
  const std::int64_t d = s.back();
  agdetail::require(gamma.val().numel() == d && beta.val().numel() == d, "layernorm: affine size mismatch");
  const std::int64_t rows = x.val().numel() / d;
  Tensor<T> out(s);
  auto xhat = std::make_shared<Tensor<T>>(s);
  auto invstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = x.val().data() + r * d;
    double mean = 0;
    for (std::int64_t j = 0; j < d; ++j) mean += static_cast<double>(src[j]);
    mean /= static_cast<double>(d);
    double var = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = static_cast<double>(src[j]) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*invstd)[static_cast<std::size_t>(r)] = is;
    T* xh = xhat->data() + r * d;
    T* dst = out.data() + r * d;
    for (std::int64_t j = 0; j < d; ++j) {
      xh[j] = static_cast<T>((static_cast<double>(src[j]) - mean) * is);
      dst[j] = static_cast<T>(static_cast<double>(gamma.val().v[static_cast<std::size_t>(j)]) * static_cast<double>(xh[j]) +
                              static_cast<double>(beta.val().v[static_cast<std::size_t>(j)]));
    }
  }
  return x.tape->make(std::move(out), {x.id, gamma.id, beta.id},
                      [x, gamma, beta, rows, d, xhat, invstd](Tape<T>& tp, typename Tape<T>::Node& nd) {
    const bool need_x = tp.node(x.id).needs_grad;
    const bool need_g = tp.node(gamma.id).needs_grad;
    const bool need_b = tp.node(beta.id).needs_grad;
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xh = xhat->data() + r * d;
      const T* gr = nd.grad.data() + r * d;
      if (need_g) {
        auto& gg = tp.grad_of(gamma.id);
        for (std::int64_t j = 0; j < d; ++j)
          gg.v[static_cast<std::size_t>(j)] += gr[j] * xh[j];
      }
      if (need_b) {
        auto& gb = tp.grad_of(beta.id);
        for (std::int64_t j = 0; j < d; ++j) gb.v[static_cast<std::size_t>(j)] += gr[j];
      }
      if (need_x) {
        auto& gx = tp.grad_of(x.id);
        double mean_dxhat = 0, mean_dxhat_xhat = 0;
        for (std::int64_t j = 0; j < d; ++j) {
          const double dxh = static_cast<double>(gr[j]) * static_cast<double>(gamma.val().v[static_cast<std::size_t>(j)]);
          mean_dxhat += dxh;
          mean_dxhat_xhat += dxh * static_cast<double>(xh[j]);
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        const double is = (*invstd)[static_cast<std::size_t>(r)];
        T* dst = gx.data() + r * d;
        for (std::int64_t j = 0; j < d; ++j) {
          const double dxh = static_cast<double>(gr[j]) * static_cast<double>(gamma.val().v[static_cast<std::size_t>(j)]);
          dst[j] += static_cast<T>((dxh - mean_dxhat - static_cast<double>(xh[j]) * mean_dxhat_xhat) * is);
        }
      }
    }
  });
}

// BatchNorm over channel axis 1 of [B, C, ...]. In train mode uses batch
// statistics (biased variance) and updates the running buffers; in eval mode
// uses the running buffers. `running_*` live outside the tape.
template <typename T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                 bool train, double momentum = 0.1, double eps = 1e-5) {
  const Shape& s = x.val().shape;
  agdetail::require(s.size() >= 2, "batchnorm: rank too small");
  const std::int64_t b = s[0], c = s[1];
  std::int64_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  agdetail::require(gamma.val().numel() == c && beta.val().numel() == c, "batchnorm: affine size mismatch");
  agdetail::require(running_mean.numel() == c && running_var.numel() == c, "batchnorm: running stats size mismatch");

  const std::int64_t n_per_c = b * inner;
  auto mean = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c), 0.0);
  auto invstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c), 0.0);
  if (train) {
    std::vector<double> var(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t ci = 0; ci < c; ++ci) {
        const T* src = x.val().data() + (bi * c + ci) * inner;
        double acc = 0;
        for (std::int64_t j = 0; j < inner; ++j) acc += static_cast<double>(src[j]);
        (*mean)[static_cast<std::size_t>(ci)] += acc;
      }
    for (auto& m : *mean) m /= static_cast<double>(n_per_c);
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t ci = 0; ci < c; ++ci) {
        const T* src = x.val().data() + (bi * c + ci) * inner;
        const double m = (*mean)[static_cast<std::size_t>(ci)];
        double acc = 0;
        for (std::int64_t j = 0; j < inner; ++j) {
          const double d0 = static_cast<double>(src[j]) - m;
          acc += d0 * d0;
        }
        var[static_cast<std::size_t>(ci)] += acc;
      }
    for (std::int64_t ci = 0; ci < c; ++ci) {
      var[static_cast<std::size_t>(ci)] /= static_cast<double>(n_per_c);
      (*invstd)[static_cast<std::size_t>(ci)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(ci)] + eps);
      running_mean.v[static_cast<std::size_t>(ci)] = static_cast<T>(
          (1.0 - momentum) * static_cast<double>(running_mean.v[static_cast<std::size_t>(ci)]) +
          momentum * (*mean)[static_cast<std::size_t>(ci)]);
      running_var.v[static_cast<std::size_t>(ci)] = static_cast<T>(
          (1.0 - momentum) * static_cast<double>(running_var.v[static_cast<std::size_t>(ci)]) +
          momentum * var[static_cast<std::size_t>(ci)]);
    }
  } else {
    for (std::int64_t ci = 0; ci < c; ++ci) {
      (*mean)[static_cast<std::size_t>(ci)] = static_cast<double>(running_mean.v[static_cast<std::size_t>(ci)]);
      (*invstd)[static_cast<std::size_t>(ci)] =
          1.0 / std::sqrt(static_cast<double>(running_var.v[static_cast<std::size_t>(ci)]) + eps);
    }
  }

  Tensor<T> out(s);
  auto xhat = std::make_shared<Tensor<T>>(s);
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const T* src = x.val().data() + (bi * c + ci) * inner;
      T* xh = xhat->data() + (bi * c + ci) * inner;
      T* dst = out.data() + (bi * c + ci) * inner;
      const double m = (*mean)[static_cast<std::size_t>(ci)];
      const double is = (*invstd)[static_cast<std::size_t>(ci)];
      const double g = static_cast<double>(gamma.val().v[static_cast<std::size_t>(ci)]);
      const double bt = static_cast<double>(beta.val().v[static_cast<std::size_t>(ci)]);
      for (std::int64_t j = 0; j < inner; ++j) {
        xh[j] = static_cast<T>((static_cast<double>(src[j]) - m) * is);
        dst[j] = static_cast<T>(g * static_cast<double>(xh[j]) + bt);
      }
    }

  return x.tape->make(std::move(out), {x.id, gamma.id, beta.id},
                      [x, gamma, beta, b, c, inner, n_per_c, xhat, invstd, train](
                          Tape<T>& tp, typename Tape<T>::Node& nd) {
    const bool need_x = tp.node(x.id).needs_grad;
    std::vector<double> sum_g(static_cast<std::size_t>(c), 0.0), sum_gx(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t ci = 0; ci < c; ++ci) {
        const T* gr = nd.grad.data() + (bi * c + ci) * inner;
        const T* xh = xhat->data() + (bi * c + ci) * inner;
        double a0 = 0, a1 = 0;
        for (std::int64_t j = 0; j < inner; ++j) {
          a0 += static_cast<double>(gr[j]);
          a1 += static_cast<double>(gr[j]) * static_cast<double>(xh[j]);
        }
        sum_g[static_cast<std::size_t>(ci)] += a0;
        sum_gx[static_cast<std::size_t>(ci)] += a1;
      }
    if (tp.node(beta.id).needs_grad) {
      auto& gb = tp.grad_of(beta.id);
      for (std::int64_t ci = 0; ci < c; ++ci) gb.v[static_cast<std::size_t>(ci)] += static_cast<T>(sum_g[static_cast<std::size_t>(ci)]);
    }
    if (tp.node(gamma.id).needs_grad) {
      auto& gg = tp.grad_of(gamma.id);
      for (std::int64_t ci = 0; ci < c; ++ci) gg.v[static_cast<std::size_t>(ci)] += static_cast<T>(sum_gx[static_cast<std::size_t>(ci)]);
    }
    if (need_x) {
      auto& gx = tp.grad_of(x.id);
      for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t ci = 0; ci < c; ++ci) {
          const T* gr = nd.grad.data() + (bi * c + ci) * inner;
          const T* xh = xhat->data() + (bi * c + ci) * inner;
          T* dst = gx.data() + (bi * c + ci) * inner;
          const double g = static_cast<double>(gamma.val().v[static_cast<std::size_t>(ci)]);
          const double is = (*invstd)[static_cast<std::size_t>(ci)];
          if (train) {
            const double mg = sum_g[static_cast<std::size_t>(ci)] / static_cast<double>(n_per_c);
            const double mgx = sum_gx[static_cast<std::size_t>(ci)] / static_cast<double>(n_per_c);
            for (std::int64_t j = 0; j < inner; ++j) {
              const double dxh = static_cast<double>(gr[j]) - mg - static_cast<double>(xh[j]) * mgx;
              dst[j] += static_cast<T>(g * is * dxh);
            }
          } else {
            for (std::int64_t j = 0; j < inner; ++j)
              dst[j] += static_cast<T>(g * is * static_cast<double>(gr[j]));
          }
        }
    }
  });
}

// ---- convolution ----

namespace agdetail {

// im2col for [C, H, W] -> [C*kh*kw, oh*ow].
template <typename T>
void im2col(const T* x, std::int64_t c, std::int64_t h, std::int64_t w, int kh, int kw, int stride, int pad,
            std::int64_t oh, std::int64_t ow, T* col) {
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        T* dst = col + ((ci * kh + ki) * kw + kj) * oh * ow;
        for (std::int64_t oi = 0; oi < oh; ++oi) {
          const std::int64_t ii = oi * stride + ki - pad;
          for (std::int64_t oj = 0; oj < ow; ++oj) {
            const std::int64_t jj = oj * stride + kj - pad;
            dst[oi * ow + oj] = (ii >= 0 && ii < h && jj >= 0 && jj < w)
                                    ? x[(ci * h + ii) * w + jj]
                                    : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, std::int64_t c, std::int64_t h, std::int64_t w, int kh, int kw, int stride, int pad,
                std::int64_t oh, std::int64_t ow, T* x) {
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        const T* src = col + ((ci * kh + ki) * kw + kj) * oh * ow;
        for (std::int64_t oi = 0; oi < oh; ++oi) {
          const std::int64_t ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) continue;
          for (std::int64_t oj = 0; oj < ow; ++oj) {
            const std::int64_t jj = oj * stride + kj - pad;
            if (jj >= 0 && jj < w) x[(ci * h + ii) * w + jj] += src[oi * ow + oj];
          }
        }
      }
}

}  // namespace agdetail

// x [B, C, H, W], w [O, C, kh, kw], b [O] -> [B, O, OH, OW].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
  const Shape& xs = x.val().shape;
  const Shape& ws = w.val().shape;
  agdetail::require(xs.size() == 4 && ws.size() == 4 && xs[1] == ws[1], "conv2d: shape mismatch");
  const std::int64_t batch = xs[0], c = xs[1], h = xs[2], wdt = xs[3];
  const std::int64_t o = ws[0];
  const int kh = static_cast<int>(ws[2]), kw = static_cast<int>(ws[3]);
  agdetail::require(b.val().numel() == o, "conv2d: bias size mismatch");
  const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t ow = (wdt + 2 * pad - kw) / stride + 1;
  agdetail::require(oh > 0 && ow > 0, "conv2d: output would be empty");

  const std::int64_t ck = c * kh * kw;
  Tensor<T> out({batch, o, oh, ow});
  std::vector<T> col(static_cast<std::size_t>(ck * oh * ow));
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    agdetail::im2col(x.val().data() + bi * c * h * wdt, c, h, wdt, kh, kw, stride, pad, oh, ow, col.data());
    gemm(w.val().data(), col.data(), out.data() + bi * o * oh * ow, o, ck, oh * ow);
    for (std::int64_t oi = 0; oi < o; ++oi) {
      const T bias = b.val().v[static_cast<std::size_t>(oi)];
      T* dst = out.data() + (bi * o + oi) * oh * ow;
      for (std::int64_t j = 0; j < oh * ow; ++j) dst[j] += bias;
    }
  }
  return x.tape->make(std::move(out), {x.id, w.id, b.id},
                      [x, w, b, batch, c, h, wdt, o, kh, kw, stride, pad, oh, ow, ck](
                          Tape<T>& tp, typename Tape<T>::Node& nd) {
    const bool need_x = tp.node(x.id).needs_grad;
    const bool need_w = tp.node(w.id).needs_grad;
    const bool need_b = tp.node(b.id).needs_grad;
    std::vector<T> col(static_cast<std::size_t>(ck * oh * ow));
    std::vector<T> dcol(static_cast<std::size_t>(ck * oh * ow));
    for (std::int64_t bi = 0; bi < batch; ++bi) {
      const T* gout = nd.grad.data() + bi * o * oh * ow;
      if (need_w) {
        agdetail::im2col(tp.val(x.id).data() + bi * c * h * wdt, c, h, wdt, kh, kw, stride, pad, oh, ow, col.data());
        gemm(gout, col.data(), tp.grad_of(w.id).data(), o, oh * ow, ck, false, true, true);
      }
      if (need_b) {
        auto& gb = tp.grad_of(b.id);
        for (std::int64_t oi = 0; oi < o; ++oi) {
          double acc = 0;
          for (std::int64_t j = 0; j < oh * ow; ++j) acc += static_cast<double>(gout[oi * oh * ow + j]);
          gb.v[static_cast<std::size_t>(oi)] += static_cast<T>(acc);
        }
      }
      if (need_x) {
        gemm(tp.val(w.id).data(), gout, dcol.data(), ck, o, oh * ow, true, false);
        agdetail::col2im_add(dcol.data(), c, h, wdt, kh, kw, stride, pad, oh, ow,
                             tp.grad_of(x.id).data() + bi * c * h * wdt);
      }
    }
  });
}

// ---- dropout ----

template <typename T>
Var<T> dropout(Var<T> x, double rate, Prng& rng, bool train) {
  if (!train || rate <= 0.0) return x;
  agdetail::require(rate < 1.0, "dropout: rate must be < 1");
  const double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<T>>(x.val().v.size());
  Tensor<T> out = x.val();
  for (std::size_t i = 0; i < out.v.size(); ++i) {
    const T m = rng.uniform() < keep ? static_cast<T>(1.0 / keep) : T(0);
    (*mask)[i] = m;
    out.v[i] *= m;
  }
  return x.tape->make(std::move(out), {x.id}, [x, mask](Tape<T>& tp, typename Tape<T>::Node& nd) {
    auto& g = tp.grad_of(x.id);
    for (std::size_t i = 0; i < nd.grad.v.size(); ++i) g.v[i] += nd.grad.v[i] * (*mask)[i];
  });
}

// ---- losses ----

// Mean binary cross-entropy with logits over all entries.
template <typename T>
Var<T> bce_with_logits_mean(Var<T> logits, const Tensor<T>& targets) {
  agdetail::require(logits.val().shape == targets.shape, "bce: shape mismatch");
  const std::int64_t n = logits.val().numel();
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double z = static_cast<double>(logits.val().v[static_cast<std::size_t>(i)]);
    const double t = static_cast<double>(targets.v[static_cast<std::size_t>(i)]);
    acc += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor<T> tgt = targets;
  return logits.tape->make(Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n))), {logits.id},
                           [logits, tgt = std::make_shared<Tensor<T>>(std::move(tgt)), n](
                               Tape<T>& tp, typename Tape<T>::Node& nd) {
    auto& g = tp.grad_of(logits.id);
    const double gv = static_cast<double>(nd.grad.v[0]) / static_cast<double>(n);
    for (std::int64_t i = 0; i < n; ++i) {
      const double z = static_cast<double>(tp.val(logits.id).v[static_cast<std::size_t>(i)]);
      const double p = 1.0 / (1.0 + std::exp(-z));
      g.v[static_cast<std::size_t>(i)] += static_cast<T>(gv * (p - static_cast<double>(tgt->v[static_cast<std::size_t>(i)])));
    }
  });
}

// Mean categorical cross-entropy from logits [B, K] and integer labels.
template <typename T>
Var<T> softmax_ce_mean(Var<T> logits, const std::vector<int>& labels) {
  const Shape& s = logits.val().shape;
  agdetail::require(s.size() == 2, "ce: logits must be 2-D");
  const std::int64_t b = s[0], k = s[1];
  agdetail::require(static_cast<std::int64_t>(labels.size()) == b, "ce: label count mismatch");
  for (int l : labels)
    if (l < 0 || l >= k) throw InvalidInput("ce: label out of range");

  auto probs = std::make_shared<Tensor<T>>(Shape{b, k});
  double loss = 0;
  for (std::int64_t i = 0; i < b; ++i) {
    const T* row = logits.val().data() + i * k;
    double mx = static_cast<double>(row[0]);
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0;
    for (std::int64_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    const double log_denom = std::log(denom) + mx;
    loss += log_denom - static_cast<double>(row[labels[static_cast<std::size_t>(i)]]);
    T* pr = probs->data() + i * k;
    for (std::int64_t j = 0; j < k; ++j)
      pr[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - log_denom));
  }
  return logits.tape->make(Tensor<T>::scalar(static_cast<T>(loss / static_cast<double>(b))), {logits.id},
                           [logits, probs, labels, b, k](Tape<T>& tp, typename Tape<T>::Node& nd) {
    auto& g = tp.grad_of(logits.id);
    const double gv = static_cast<double>(nd.grad.v[0]) / static_cast<double>(b);
    for (std::int64_t i = 0; i < b; ++i) {
      T* dst = g.data() + i * k;
      const T* pr = probs->data() + i * k;
      for (std::int64_t j = 0; j < k; ++j) dst[j] += static_cast<T>(gv * static_cast<double>(pr[j]));
      dst[labels[static_cast<std::size_t>(i)]] -= static_cast<T>(gv);
    }
  });
}

// Multi-head attention over already-projected q, k, v of shape [B, L, D].
template <typename T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, int heads) {
  const Shape& s = q.val().shape;
  agdetail::require(s.size() == 3, "mha: expects [B, L, D]");
  agdetail::require(q.val().shape == k.val().shape && k.val().shape == v.val().shape, "mha: q/k/v shapes differ");
  const std::int64_t b = s[0], l = s[1], d = s[2];
  agdetail::require(d % heads == 0, "mha: embed dim not divisible by heads");
  const std::int64_t dh = d / heads;

  auto split = [&](Var<T> t) {
    return permute(reshape(t, {b, l, heads, dh}), {0, 2, 1, 3});  // [B, H, L, dh]
  };
  Var<T> qh = split(q), kh = split(k), vh = split(v);
  Var<T> scores = scale(bmm(qh, kh, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  Var<T> att = softmax_lastdim(scores);
  Var<T> ctx = bmm(att, vh);                              // [B, H, L, dh]
  return reshape(permute(ctx, {0, 2, 1, 3}), {b, l, d});  // [B, L, D]
}

}  // namespace dspast
