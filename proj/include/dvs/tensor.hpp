#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dvs/common.hpp"
#include "dvs/random.hpp"

namespace dvs {

// Define-by-run reverse-mode autodiff over dense NCHW tensors.
// Every op records its inputs and a backward closure on the output node;
// backward() runs one reverse topological sweep, accumulating (+=) into each
// grad so a value consumed k times receives the sum of k contributions.

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, bool requires_grad = false) {
    Tensor t = raw(std::move(shape));
    std::fill(t.n_->value.begin(), t.n_->value.end(), T(0));
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> value, bool requires_grad = false) {
    Tensor t;
    t.n_ = std::make_shared<Node<T>>();
    t.n_->shape = std::move(shape);
    DVS_CHECK(long(value.size()) == numel_of(t.n_->shape),
              "tensor from: value size ", value.size(), " does not match shape ",
              shape_str(t.n_->shape));
    t.n_->value = std::move(value);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    Tensor t = raw(std::move(shape));
    std::fill(t.n_->value.begin(), t.n_->value.end(), v);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return leaf(std::move(shape), requires_grad);
  }

  static Tensor scalar(T v) { return full({1}, v); }

  // Uninitialized value buffer; graph metadata filled in by finish_op.
  static Tensor raw(Shape shape) {
    Tensor t;
    t.n_ = std::make_shared<Node<T>>();
    t.n_->value.resize(std::size_t(numel_of(shape)));
    t.n_->shape = std::move(shape);
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  long rank() const { return long(n_->shape.size()); }
  long dim(long i) const { return n_->shape[std::size_t(i)]; }
  long numel() const { return long(n_->value.size()); }

  T* data() { return n_->value.data(); }
  const T* data() const { return n_->value.data(); }
  std::vector<T>& value() { return n_->value; }
  const std::vector<T>& value() const { return n_->value; }

  T item() const {
    DVS_CHECK(numel() == 1, "item: tensor has shape ", shape_str(shape()));
    return n_->value[0];
  }

  // Linear NCHW offset helpers for rank-4 tensors.
  long at4(long n, long c, long h, long w) const {
    const Shape& s = n_->shape;
    return ((n * s[1] + c) * s[2] + h) * s[3] + w;
  }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) {
    DVS_CHECK(!n_->backward, "set_requires_grad: only leaf tensors");
    n_->requires_grad = rg;
  }

  bool has_grad() const { return n_ && !n_->grad.empty(); }
  const std::vector<T>& grad() const {
    DVS_CHECK(!n_->grad.empty(), "grad: no gradient accumulated for this tensor");
    return n_->grad;
  }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }
  void drop_grad() { n_->grad.clear(); }

  Tensor detach() const {
    Tensor t = raw(n_->shape);
    t.n_->value = n_->value;
    return t;
  }

  std::shared_ptr<Node<T>>& node() { return n_; }
  const std::shared_ptr<Node<T>>& node() const { return n_; }

  void backward() {
    DVS_CHECK(defined(), "backward: undefined tensor");
    DVS_CHECK(numel() == 1, "backward: loss must be scalar, got shape ",
              shape_str(shape()));
    DVS_CHECK(n_->requires_grad,
              "backward: loss is not connected to any tensor requiring grad");
    // Post-order over the subgraph that requires grad: parents land before
    // children, so the reverse sweep visits each consumer before its producer
    // and each node's backward runs exactly once.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        ++stack.back().second;
        Node<T>* p = node->parents[idx].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->ensure_grad();
    n_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward) (*it)->backward(**it);
    }
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

template <typename T>
void check_finite(const char* op, const std::vector<T>& v) {
  for (T x : v) {
    if (!std::isfinite(double(x)))
      fail("non-finite value produced by op '", op, "'");
  }
}

// Wire an already-filled output into the graph.  When grads are off or no
// input needs them, the node keeps no parents and no closure, so the upstream
// graph is released as soon as its handles go out of scope.
template <typename T, typename F>
void finish_op(Tensor<T>& out, const char* op, std::initializer_list<Tensor<T>> inputs,
               F bwd) {
  out.node()->op = op;
  check_finite(op, out.value());
  if (!grad_mode()) return;
  bool needs = false;
  for (const Tensor<T>& in : inputs)
    if (in.defined() && in.node()->requires_grad) needs = true;
  if (!needs) return;
  out.node()->requires_grad = true;
  for (const Tensor<T>& in : inputs)
    if (in.defined()) out.node()->parents.push_back(in.node());
  out.node()->backward = std::move(bwd);
}

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  DVS_CHECK(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()),
            " vs ", shape_str(b.shape()), "; no implicit broadcasting");
}

namespace eigen {
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<Mat<T>>;
template <typename T>
using MapConst = Eigen::Map<const Mat<T>>;
}  // namespace eigen

// ---- elementwise ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("add", a, b);
  Tensor<T> out = Tensor<T>::raw(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* y = out.data();
  for (long i = 0; i < a.numel(); ++i) y[i] = av[i] + bv[i];
  finish_op(out, "add", {a, b}, [pa = a.node(), pb = b.node()](Node<T>& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("sub", a, b);
  Tensor<T> out = Tensor<T>::raw(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* y = out.data();
  for (long i = 0; i < a.numel(); ++i) y[i] = av[i] - bv[i];
  finish_op(out, "sub", {a, b}, [pa = a.node(), pb = b.node()](Node<T>& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("mul", a, b);
  Tensor<T> out = Tensor<T>::raw(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* y = out.data();
  for (long i = 0; i < a.numel(); ++i) y[i] = av[i] * bv[i];
  finish_op(out, "mul", {a, b}, [pa = a.node(), pb = b.node()](Node<T>& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        pa->grad[i] += n.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        pb->grad[i] += n.grad[i] * pa->value[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::raw(a.shape());
  const T* av = a.data();
  T* y = out.data();
  for (long i = 0; i < a.numel(); ++i) y[i] = av[i] * c;
  finish_op(out, "scale", {a}, [pa = a.node(), c](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * c;
  });
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::raw(a.shape());
  const T* av = a.data();
  T* y = out.data();
  for (long i = 0; i < a.numel(); ++i) y[i] = av[i] + c;
  finish_op(out, "add_scalar", {a}, [pa = a.node()](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::raw(a.shape());
  const T* av = a.data();
  T* y = out.data();
  for (long i = 0; i < a.numel(); ++i) y[i] = std::exp(av[i]);
  finish_op(out, "exp", {a}, [pa = a.node()](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      pa->grad[i] += n.grad[i] * n.value[i];
  });
  return out;
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::raw(a.shape());
  const T* av = a.data();
  T* y = out.data();
  for (long i = 0; i < a.numel(); ++i) y[i] = std::tanh(av[i]);
  finish_op(out, "tanh", {a}, [pa = a.node()](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      pa->grad[i] += n.grad[i] * (T(1) - n.value[i] * n.value[i]);
  });
  return out;
}

template <typename T>
Tensor<T> lrelu(const Tensor<T>& a, T slope = T(0.2)) {
  Tensor<T> out = Tensor<T>::raw(a.shape());
  const T* av = a.data();
  T* y = out.data();
  for (long i = 0; i < a.numel(); ++i) y[i] = av[i] > T(0) ? av[i] : av[i] * slope;
  finish_op(out, "lrelu", {a}, [pa = a.node(), slope](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      pa->grad[i] += n.grad[i] * (pa->value[i] > T(0) ? T(1) : slope);
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return lrelu(a, T(0));
}

template <typename T>
Tensor<T> abs_op(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::raw(a.shape());
  const T* av = a.data();
  T* y = out.data();
  for (long i = 0; i < a.numel(); ++i) y[i] = std::abs(av[i]);
  finish_op(out, "abs", {a}, [pa = a.node()](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      T x = pa->value[i];
      T s = x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
      pa->grad[i] += n.grad[i] * s;
    }
  });
  return out;
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::raw(a.shape());
  const T* av = a.data();
  T* y = out.data();
  for (long i = 0; i < a.numel(); ++i) y[i] = av[i] * av[i];
  finish_op(out, "square", {a}, [pa = a.node()](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      pa->grad[i] += n.grad[i] * T(2) * pa->value[i];
  });
  return out;
}

// ---- reductions ----

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::raw({1});
  T acc = T(0);
  const T* av = a.data();
  for (long i = 0; i < a.numel(); ++i) acc += av[i];
  out.data()[0] = acc;
  finish_op(out, "sum_all", {a}, [pa = a.node()](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    const T g = n.grad[0];
    for (auto& d : pa->grad) d += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  DVS_CHECK(a.numel() > 0, "mean_all: empty tensor");
  return scale(sum_all(a), T(1) / T(a.numel()));
}

// ---- linear algebra ----

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  DVS_CHECK(a.rank() == 2 && b.rank() == 2, "matmul: expects rank-2, got ",
            shape_str(a.shape()), " x ", shape_str(b.shape()));
  const long m = a.dim(0), k = a.dim(1), n = b.dim(1);
  DVS_CHECK(b.dim(0) == k, "matmul: inner dims differ, ", shape_str(a.shape()),
            " x ", shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::raw({m, n});
  eigen::MapConst<T> A(a.data(), m, k), B(b.data(), k, n);
  eigen::MapMat<T> Y(out.data(), m, n);
  Y.noalias() = A * B;
  finish_op(out, "matmul", {a, b}, [pa = a.node(), pb = b.node(), m, k, n](Node<T>& nd) {
    eigen::MapConst<T> G(nd.grad.data(), m, n);
    if (pa->requires_grad) {
      pa->ensure_grad();
      eigen::MapConst<T> B(pb->value.data(), k, n);
      eigen::MapMat<T> dA(pa->grad.data(), m, k);
      dA.noalias() += G * B.transpose();
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      eigen::MapConst<T> A(pa->value.data(), m, k);
      eigen::MapMat<T> dB(pb->grad.data(), k, n);
      dB.noalias() += A.transpose() * G;
    }
  });
  return out;
}

// y = x * w^T + b with x (N,I), w (O,I), optional b (O).
template <typename T>
Tensor<T> fc(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  DVS_CHECK(x.rank() == 2 && w.rank() == 2, "fc: expects rank-2 x and w, got ",
            shape_str(x.shape()), " and ", shape_str(w.shape()));
  const long N = x.dim(0), I = x.dim(1), O = w.dim(0);
  DVS_CHECK(w.dim(1) == I, "fc: weight shape ", shape_str(w.shape()),
            " does not match input ", shape_str(x.shape()));
  if (b.defined())
    DVS_CHECK(b.rank() == 1 && b.dim(0) == O, "fc: bias shape ",
              shape_str(b.shape()), " does not match out features ", O);
  Tensor<T> out = Tensor<T>::raw({N, O});
  eigen::MapConst<T> X(x.data(), N, I), W(w.data(), O, I);
  eigen::MapMat<T> Y(out.data(), N, O);
  Y.noalias() = X * W.transpose();
  if (b.defined()) {
    const T* bv = b.data();
    T* y = out.data();
    for (long n = 0; n < N; ++n)
      for (long o = 0; o < O; ++o) y[n * O + o] += bv[o];
  }
  finish_op(out, "fc", {x, w, b},
            [px = x.node(), pw = w.node(), pb = b.defined() ? b.node() : nullptr, N, I,
             O](Node<T>& nd) {
              eigen::MapConst<T> G(nd.grad.data(), N, O);
              if (px->requires_grad) {
                px->ensure_grad();
                eigen::MapConst<T> W(pw->value.data(), O, I);
                eigen::MapMat<T> dX(px->grad.data(), N, I);
                dX.noalias() += G * W;
              }
              if (pw->requires_grad) {
                pw->ensure_grad();
                eigen::MapConst<T> X(px->value.data(), N, I);
                eigen::MapMat<T> dW(pw->grad.data(), O, I);
                dW.noalias() += G.transpose() * X;
              }
              if (pb && pb->requires_grad) {
                pb->ensure_grad();
                for (long n = 0; n < N; ++n)
                  for (long o = 0; o < O; ++o)
                    pb->grad[std::size_t(o)] += nd.grad[std::size_t(n * O + o)];
              }
            });
  return out;
}

// ---- shape ops ----

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  DVS_CHECK(numel_of(shape) == a.numel(), "reshape: cannot view ",
            shape_str(a.shape()), " as ", shape_str(shape));
  Tensor<T> out = Tensor<T>::raw(std::move(shape));
  std::copy(a.data(), a.data() + a.numel(), out.data());
  finish_op(out, "reshape", {a}, [pa = a.node()](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> concat(long axis, const std::vector<Tensor<T>>& parts) {
  DVS_CHECK(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  DVS_CHECK(axis >= 0 && axis < long(s0.size()), "concat: axis ", axis,
            " out of range for rank ", s0.size());
  long axis_total = 0;
  for (const auto& p : parts) {
    DVS_CHECK(p.rank() == long(s0.size()), "concat: rank mismatch");
    for (long d = 0; d < p.rank(); ++d)
      if (d != axis)
        DVS_CHECK(p.dim(d) == s0[std::size_t(d)], "concat: dim ", d,
                  " mismatch: ", shape_str(p.shape()), " vs ", shape_str(s0));
    axis_total += p.dim(axis);
  }
  Shape out_shape = s0;
  out_shape[std::size_t(axis)] = axis_total;
  long outer = 1, inner = 1;
  for (long d = 0; d < axis; ++d) outer *= s0[std::size_t(d)];
  for (long d = axis + 1; d < long(s0.size()); ++d) inner *= s0[std::size_t(d)];

  Tensor<T> out = Tensor<T>::raw(out_shape);
  T* y = out.data();
  const long out_row = axis_total * inner;
  std::vector<long> offsets(parts.size());
  {
    long off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      offsets[i] = off;
      const long blk = parts[i].dim(axis) * inner;
      const T* src = parts[i].data();
      for (long r = 0; r < outer; ++r)
        std::memcpy(y + r * out_row + off, src + r * blk, std::size_t(blk) * sizeof(T));
      off += blk;
    }
  }
  std::vector<std::shared_ptr<Node<T>>> pnodes;
  for (const auto& p : parts) pnodes.push_back(p.node());
  Tensor<T> result = out;
  result.node()->op = "concat";
  check_finite("concat", result.value());
  if (grad_mode()) {
    bool needs = false;
    for (const auto& p : parts)
      if (p.requires_grad()) needs = true;
    if (needs) {
      result.node()->requires_grad = true;
      result.node()->parents = pnodes;
      result.node()->backward = [pnodes, offsets, outer, inner, out_row](Node<T>& n) {
        for (std::size_t i = 0; i < pnodes.size(); ++i) {
          auto& p = pnodes[i];
          if (!p->requires_grad) continue;
          p->ensure_grad();
          const long blk = long(p->value.size()) / outer;
          for (long r = 0; r < outer; ++r) {
            const T* g = n.grad.data() + r * out_row + offsets[i];
            T* dst = p->grad.data() + r * blk;
            for (long j = 0; j < blk; ++j) dst[j] += g[j];
          }
        }
      };
    }
  }
  return result;
}

template <typename T>
Tensor<T> concat(long axis, std::initializer_list<Tensor<T>> parts) {
  return concat(axis, std::vector<Tensor<T>>(parts));
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, long axis, long start, long len) {
  DVS_CHECK(axis >= 0 && axis < a.rank(), "slice: axis ", axis,
            " out of range for rank ", a.rank());
  DVS_CHECK(start >= 0 && len > 0 && start + len <= a.dim(axis),
            "slice: range [", start, ",", start + len, ") out of bounds for dim ",
            a.dim(axis));
  Shape out_shape = a.shape();
  out_shape[std::size_t(axis)] = len;
  long outer = 1, inner = 1;
  for (long d = 0; d < axis; ++d) outer *= a.dim(d);
  for (long d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
  const long in_row = a.dim(axis) * inner;
  const long out_row = len * inner;
  const long off = start * inner;

  Tensor<T> out = Tensor<T>::raw(out_shape);
  const T* src = a.data();
  T* y = out.data();
  for (long r = 0; r < outer; ++r)
    std::memcpy(y + r * out_row, src + r * in_row + off,
                std::size_t(out_row) * sizeof(T));
  finish_op(out, "slice", {a}, [pa = a.node(), outer, in_row, out_row, off](Node<T>& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (long r = 0; r < outer; ++r) {
      const T* g = n.grad.data() + r * out_row;
      T* dst = pa->grad.data() + r * in_row + off;
      for (long j = 0; j < out_row; ++j) dst[j] += g[j];
    }
  });
  return out;
}

// ---- classification heads ----

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  DVS_CHECK(x.rank() == 2, "log_softmax: expects (N,V), got ", shape_str(x.shape()));
  const long N = x.dim(0), V = x.dim(1);
  Tensor<T> out = Tensor<T>::raw(x.shape());
  const T* xv = x.data();
  T* y = out.data();
  for (long n = 0; n < N; ++n) {
    const T* row = xv + n * V;
    T m = row[0];
    for (long v = 1; v < V; ++v) m = std::max(m, row[v]);
    T acc = T(0);
    for (long v = 0; v < V; ++v) acc += std::exp(row[v] - m);
    const T lse = m + std::log(acc);
    for (long v = 0; v < V; ++v) y[n * V + v] = row[v] - lse;
  }
  finish_op(out, "log_softmax", {x}, [px = x.node(), N, V](Node<T>& nd) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (long n = 0; n < N; ++n) {
      T gsum = T(0);
      for (long v = 0; v < V; ++v) gsum += nd.grad[std::size_t(n * V + v)];
      for (long v = 0; v < V; ++v) {
        const std::size_t i = std::size_t(n * V + v);
        px->grad[i] += nd.grad[i] - std::exp(nd.value[i]) * gsum;
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> rowwise_dot(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("rowwise_dot", a, b);
  DVS_CHECK(a.rank() == 2, "rowwise_dot: expects (N,D), got ", shape_str(a.shape()));
  const long N = a.dim(0), D = a.dim(1);
  Tensor<T> out = Tensor<T>::raw({N, 1});
  const T* av = a.data();
  const T* bv = b.data();
  T* y = out.data();
  for (long n = 0; n < N; ++n) {
    T acc = T(0);
    for (long d = 0; d < D; ++d) acc += av[n * D + d] * bv[n * D + d];
    y[n] = acc;
  }
  finish_op(out, "rowwise_dot", {a, b}, [pa = a.node(), pb = b.node(), N, D](Node<T>& nd) {
    for (long n = 0; n < N; ++n) {
      const T g = nd.grad[std::size_t(n)];
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (long d = 0; d < D; ++d)
          pa->grad[std::size_t(n * D + d)] += g * pb->value[std::size_t(n * D + d)];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (long d = 0; d < D; ++d)
          pb->grad[std::size_t(n * D + d)] += g * pa->value[std::size_t(n * D + d)];
      }
    }
  });
  return out;
}

// Per-sample Gram matrix of feature maps: (N,C,H,W) -> (N,C,C), scaled by 1/(H*W).
template <typename T>
Tensor<T> gram(const Tensor<T>& x) {
  DVS_CHECK(x.rank() == 4, "gram: expects (N,C,H,W), got ", shape_str(x.shape()));
  const long N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::raw({N, C, C});
  const T inv = T(1) / T(HW);
  for (long n = 0; n < N; ++n) {
    eigen::MapConst<T> X(x.data() + n * C * HW, C, HW);
    eigen::MapMat<T> G(out.data() + n * C * C, C, C);
    G.noalias() = X * X.transpose() * inv;
  }
  finish_op(out, "gram", {x}, [px = x.node(), N, C, HW, inv](Node<T>& nd) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (long n = 0; n < N; ++n) {
      eigen::MapConst<T> G(nd.grad.data() + n * C * C, C, C);
      eigen::MapConst<T> X(px->value.data() + n * C * HW, C, HW);
      eigen::MapMat<T> dX(px->grad.data() + n * C * HW, C, HW);
      dX.noalias() += (G + G.transpose()) * X * inv;
    }
  });
  return out;
}

// ---- constants ----

template <typename T>
Tensor<T> one_hot(const std::vector<long>& labels, long V) {
  const long N = long(labels.size());
  Tensor<T> t = Tensor<T>::leaf({N, V});
  for (long n = 0; n < N; ++n) {
    DVS_CHECK(labels[std::size_t(n)] >= 0 && labels[std::size_t(n)] < V,
              "one_hot: label ", labels[std::size_t(n)], " out of range [0,", V, ")");
    t.data()[n * V + labels[std::size_t(n)]] = T(1);
  }
  return t;
}

// ---- init helpers ----

template <typename T>
void fill_normal(Tensor<T>& t, std::mt19937_64& g, double mean = 0.0, double stddev = 1.0) {
  for (long i = 0; i < t.numel(); ++i)
    t.data()[i] = T(mean + stddev * RngPool::normal(g));
}

template <typename T>
void fill_uniform(Tensor<T>& t, std::mt19937_64& g, double lo, double hi) {
  for (long i = 0; i < t.numel(); ++i)
    t.data()[i] = T(lo + (hi - lo) * RngPool::uniform(g));
}

template <typename T>
Tensor<T> randn(Shape shape, std::mt19937_64& g) {
  Tensor<T> t = Tensor<T>::raw(std::move(shape));
  for (long i = 0; i < t.numel(); ++i) t.data()[i] = T(RngPool::normal(g));
  return t;
}

// Trainable leaf drawn from N(0, stddev^2).
template <typename T>
Tensor<T> param_normal(Shape shape, std::mt19937_64& g, double stddev) {
  Tensor<T> t = Tensor<T>::leaf(std::move(shape), true);
  fill_normal(t, g, 0.0, stddev);
  return t;
}

// Trainable zero-initialized leaf, the default for biases.
template <typename T>
Tensor<T> param_zeros(Shape shape) {
  return Tensor<T>::leaf(std::move(shape), true);
}

// Ordered (name, tensor) pairs; registration order fixes checkpoint layout.
template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

// ---- finite-difference gradient checking ----

struct GradCheckResult {
  double max_rel_err = 0.0;
  long probes = 0;
};

// Central differences in double precision against the analytic backward pass.
// f rebuilds the loss from the current parameter values on every call; any
// stochastic input must be frozen outside f.  Large tensors can be spot
// checked by capping probes per tensor (coordinates drawn without bias).
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> params,
                                  double eps = 1e-5,
                                  long max_probes_per_tensor = 0,
                                  std::uint64_t probe_seed = 17) {
  {
    NoGradGuard ng;
    const double l0 = f().item();
    const double l1 = f().item();
    DVS_CHECK(l0 == l1,
              "grad_check: fn is non-deterministic across probe evaluations");
  }
  for (auto& p : params) p.zero_grad();
  Tensor<double> loss = f();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params)
    analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0));

  GradCheckResult res;
  std::mt19937_64 pick(probe_seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<long> idx;
    if (max_probes_per_tensor > 0 && p.numel() > max_probes_per_tensor) {
      std::unordered_set<long> chosen;
      while (long(chosen.size()) < max_probes_per_tensor)
        chosen.insert(RngPool::uniform_int(pick, p.numel()));
      idx.assign(chosen.begin(), chosen.end());
    } else {
      idx.resize(std::size_t(p.numel()));
      for (long i = 0; i < p.numel(); ++i) idx[std::size_t(i)] = i;
    }
    for (long i : idx) {
      const double old = p.data()[i];
      double lp, lm;
      {
        NoGradGuard ng;
        p.data()[i] = old + eps;
        lp = f().item();
        p.data()[i] = old - eps;
        lm = f().item();
        p.data()[i] = old;
      }
      const double num = (lp - lm) / (2.0 * eps);
      const double ana = analytic[pi][std::size_t(i)];
      const double rel =
          std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.probes;
    }
  }
  return res;
}

}  // namespace dvs
