#pragma once

// Minimal reverse-mode differentiable tensor engine. Dense row-major
// N-d arrays (images are NCHW) with a dynamically built tape; backward()
// walks the tape in reverse topological order. Float is the training
// precision, double is used by the gradient-check suites.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mdsp/check.hpp"
#include "mdsp/rng.hpp"

namespace mdsp {

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // sized lazily; empty means "no grad yet"
  bool requires_grad = false;
  std::uint64_t seq = 0;  // creation order, makes topo sort deterministic
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // null for leaves

  std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

inline std::uint64_t next_seq() {
  static thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_mode() {
  static thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables tape construction in a scope (inference / benchmarking).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false) {
    return filled(s, T(0), requires_grad);
  }

  static Tensor filled(const Shape& s, T v, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<detail::Node<T>>();
    t.node_->shape = s;
    t.node_->values.assign(static_cast<size_t>(shape_numel(s)), v);
    t.node_->requires_grad = requires_grad;
    t.node_->seq = detail::next_seq();
    return t;
  }

  static Tensor from_vector(const Shape& s, std::vector<T> v, bool requires_grad = false) {
    MDSP_CHECK(static_cast<std::int64_t>(v.size()) == shape_numel(s),
               "tensor: " << v.size() << " values do not fill shape " << shape_str(s));
    Tensor t;
    t.node_ = std::make_shared<detail::Node<T>>();
    t.node_->shape = s;
    t.node_->values = std::move(v);
    t.node_->requires_grad = requires_grad;
    t.node_->seq = detail::next_seq();
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return filled({}, v, requires_grad); }

  static Tensor randn(const Shape& s, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    Tensor t = zeros(s, requires_grad);
    for (auto& v : t.node_->values) v = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  std::int64_t numel() const { return node_ ? node_->numel() : 0; }

  T* data() { return node_->values.data(); }
  const T* data() const { return node_->values.data(); }
  std::span<T> values() { return node_->values; }
  std::span<const T> values() const { return node_->values; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const {
    MDSP_CHECK(has_grad(), "tensor: gradient not populated");
    return node_->grad;
  }
  std::span<T> grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    MDSP_CHECK(node_ && node_->numel() == 1, "tensor: item() requires a single-element tensor, got "
                                                 << (node_ ? shape_str(node_->shape) : "null"));
    return node_->values[0];
  }

  // Deep copy of values only; the copy is a fresh leaf.
  Tensor clone_detached() const {
    Tensor t;
    t.node_ = std::make_shared<detail::Node<T>>();
    t.node_->shape = node_->shape;
    t.node_->values = node_->values;
    t.node_->requires_grad = false;
    t.node_->seq = detail::next_seq();
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(node_->values.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(node_->values[i]);
    return Tensor<U>::from_vector(node_->shape, std::move(v), false);
  }

  std::shared_ptr<detail::Node<T>> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node<T>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

// Builds an op output node. The tape edge is only recorded when grad mode
// is on and some parent requires grad; otherwise the result is a plain leaf.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> values, std::vector<Tensor<T>> parents,
                  std::function<void(Node<T>&)> backprop) {
  Tensor<T> out = Tensor<T>::from_vector(std::move(shape), std::move(values), false);
  bool track = grad_mode();
  if (track) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    track = any;
  }
  if (track) {
    auto n = out.node();
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  return out;
}

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
// calls; interior gradients are reset at the start of each sweep.
template <typename T>
void backward(const Tensor<T>& loss) {
  MDSP_CHECK(loss.defined() && loss.numel() == 1,
             "backward: loss must be a scalar, got " << (loss.defined() ? shape_str(loss.shape()) : "null"));
  MDSP_CHECK(loss.requires_grad(), "backward: loss does not require grad");

  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::vector<std::pair<NodeT*, size_t>> stack;
  std::vector<NodeT*> seen;

  auto mark = [&](NodeT* n) {
    // Sorted-vector set; graphs stay small (thousands of nodes).
    auto it = std::lower_bound(seen.begin(), seen.end(), n, std::less<NodeT*>());
    if (it != seen.end() && *it == n) return false;
    seen.insert(it, n);
    return true;
  };

  NodeT* root = loss.node().get();
  if (mark(root)) stack.emplace_back(root, 0);
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      NodeT* p = n->parents[idx++].get();
      if (p->requires_grad && mark(p)) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior (op-produced) nodes get fresh gradients each sweep.
  for (NodeT* n : order) {
    if (n->backprop) {
      n->grad.assign(n->values.size(), T(0));
    } else {
      n->ensure_grad();
    }
  }
  root->grad[0] = T(1);

  std::sort(order.begin(), order.end(),
            [](const NodeT* a, const NodeT* b) { return a->seq > b->seq; });
  for (NodeT* n : order) {
    if (n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  MDSP_CHECK(a.shape() == b.shape(),
             "add: shape mismatch " << shape_str(a.shape()) << " vs " << shape_str(b.shape()));
  std::vector<T> out(a.values().begin(), a.values().end());
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& n) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  MDSP_CHECK(a.shape() == b.shape(),
             "mul: shape mismatch " << shape_str(a.shape()) << " vs " << shape_str(b.shape()));
  std::vector<T> out(a.values().begin(), a.values().end());
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& n) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * bn->values[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i] * an->values[i];
    }
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= c;
  auto an = a.node();
  return detail::make_op<T>(a.shape(), std::move(out), {a}, [an, c](detail::Node<T>& n) {
    an->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * c;
  });
}

enum class Act { relu, elu, sigmoid };

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Act kind) {
  std::vector<T> out(x.values().begin(), x.values().end());
  switch (kind) {
    case Act::relu:
      for (auto& v : out) v = v > T(0) ? v : T(0);
      break;
    case Act::elu:  // alpha = 1
      for (auto& v : out) v = v > T(0) ? v : std::expm1(v);
      break;
    case Act::sigmoid:
      for (auto& v : out) {
        if (v >= T(0)) {
          v = T(1) / (T(1) + std::exp(-v));
        } else {
          const T e = std::exp(v);
          v = e / (T(1) + e);
        }
      }
      break;
  }
  auto xn = x.node();
  // n.values in the closure are this op's own outputs.
  return detail::make_op<T>(x.shape(), std::move(out), {x}, [xn, kind](detail::Node<T>& n) {
    xn->ensure_grad();
    switch (kind) {
      case Act::relu:
        for (size_t i = 0; i < n.grad.size(); ++i)
          if (xn->values[i] > T(0)) xn->grad[i] += n.grad[i];
        break;
      case Act::elu:
        for (size_t i = 0; i < n.grad.size(); ++i)
          xn->grad[i] += n.grad[i] * (xn->values[i] > T(0) ? T(1) : n.values[i] + T(1));
        break;
      case Act::sigmoid:
        for (size_t i = 0; i < n.grad.size(); ++i)
          xn->grad[i] += n.grad[i] * n.values[i] * (T(1) - n.values[i]);
        break;
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) { return activation(x, Act::relu); }
template <typename T>
Tensor<T> elu(const Tensor<T>& x) { return activation(x, Act::elu); }
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) { return activation(x, Act::sigmoid); }

// ---------------------------------------------------------------------------
// reductions and reshapes
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  auto xn = x.node();
  return detail::make_op<T>({}, {s}, {x}, [xn](detail::Node<T>& n) {
    xn->ensure_grad();
    const T g = n.grad[0];
    for (auto& gv : xn->grad) gv += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  MDSP_CHECK(x.numel() > 0, "mean: empty tensor");
  T s = T(0);
  for (T v : x.values()) s += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  auto xn = x.node();
  return detail::make_op<T>({}, {s * inv}, {x}, [xn, inv](detail::Node<T>& n) {
    xn->ensure_grad();
    const T g = n.grad[0] * inv;
    for (auto& gv : xn->grad) gv += g;
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& s) {
  MDSP_CHECK(shape_numel(s) == x.numel(),
             "reshape: " << shape_str(x.shape()) << " cannot view as " << shape_str(s));
  std::vector<T> out(x.values().begin(), x.values().end());
  auto xn = x.node();
  return detail::make_op<T>(s, std::move(out), {x}, [xn](detail::Node<T>& n) {
    xn->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i];
  });
}

// Channel slice of an NCHW tensor: keeps channels [c0, c1).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  MDSP_CHECK(x.ndim() == 4, "slice_channels: expected 4-d NCHW, got " << shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  MDSP_CHECK(0 <= c0 && c0 < c1 && c1 <= C,
             "slice_channels: range [" << c0 << ", " << c1 << ") outside " << C << " channels");
  const int Cs = c1 - c0;
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  std::vector<T> out(static_cast<size_t>(N) * Cs * plane);
  const T* px = x.data();
  for (int n = 0; n < N; ++n) {
    std::copy(px + (static_cast<std::int64_t>(n) * C + c0) * plane,
              px + (static_cast<std::int64_t>(n) * C + c1) * plane,
              out.begin() + static_cast<std::int64_t>(n) * Cs * plane);
  }
  auto xn = x.node();
  return detail::make_op<T>({N, Cs, H, W}, std::move(out), {x},
                            [xn, N, C, c0, Cs, plane](detail::Node<T>& n) {
                              xn->ensure_grad();
                              for (int b = 0; b < N; ++b) {
                                T* dst = xn->grad.data() + (static_cast<std::int64_t>(b) * C + c0) * plane;
                                const T* src = n.grad.data() + static_cast<std::int64_t>(b) * Cs * plane;
                                for (std::int64_t i = 0; i < Cs * plane; ++i) dst[i] += src[i];
                              }
                            });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  MDSP_CHECK(!xs.empty(), "concat_channels: no inputs");
  const int N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
  int Ctot = 0;
  for (const auto& x : xs) {
    MDSP_CHECK(x.ndim() == 4, "concat_channels: expected 4-d NCHW, got " << shape_str(x.shape()));
    MDSP_CHECK(x.dim(0) == N && x.dim(2) == H && x.dim(3) == W,
               "concat_channels: batch/spatial mismatch " << shape_str(x.shape()) << " vs "
                                                          << shape_str(xs[0].shape()));
    Ctot += x.dim(1);
  }
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  std::vector<T> out(static_cast<size_t>(N) * Ctot * plane);
  std::vector<int> chans;
  for (const auto& x : xs) chans.push_back(x.dim(1));
  for (int n = 0; n < N; ++n) {
    std::int64_t coff = 0;
    for (const auto& x : xs) {
      const int Ci = x.dim(1);
      std::copy(x.data() + static_cast<std::int64_t>(n) * Ci * plane,
                x.data() + static_cast<std::int64_t>(n + 1) * Ci * plane,
                out.begin() + (static_cast<std::int64_t>(n) * Ctot + coff) * plane);
      coff += Ci;
    }
  }
  std::vector<std::shared_ptr<detail::Node<T>>> pnodes;
  for (const auto& x : xs) pnodes.push_back(x.node());
  return detail::make_op<T>({N, Ctot, H, W}, std::move(out), xs,
                            [pnodes, chans, N, Ctot, plane](detail::Node<T>& n) {
                              for (int b = 0; b < N; ++b) {
                                std::int64_t coff = 0;
                                for (size_t k = 0; k < pnodes.size(); ++k) {
                                  const int Ci = chans[k];
                                  if (pnodes[k]->requires_grad) {
                                    pnodes[k]->ensure_grad();
                                    T* dst = pnodes[k]->grad.data() + static_cast<std::int64_t>(b) * Ci * plane;
                                    const T* src =
                                        n.grad.data() + (static_cast<std::int64_t>(b) * Ctot + coff) * plane;
                                    for (std::int64_t i = 0; i < Ci * plane; ++i) dst[i] += src[i];
                                  }
                                  coff += Ci;
                                }
                              }
                            });
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* img, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* col) {
  // col is (C*k*k) x (Ho*Wo), row-major.
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
  std::int64_t row = 0;
  for (int c = 0; c < C; ++c) {
    const T* plane = img + static_cast<std::int64_t>(c) * H * W;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++row) {
        T* dst = col + row * P;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* d = dst + static_cast<std::int64_t>(oy) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(d, d + Wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::int64_t>(iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            d[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accum(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* img) {
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
  std::int64_t row = 0;
  for (int c = 0; c < C; ++c) {
    T* plane = img + static_cast<std::int64_t>(c) * H * W;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++row) {
        const T* src = col + row * P;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          T* d = plane + static_cast<std::int64_t>(iy) * W;
          const T* s = src + static_cast<std::int64_t>(oy) * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) d[ix] += s[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// weight is (Cout, Cin, k, k); bias (Cout) optional (undefined Tensor to skip).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int pad) {
  MDSP_CHECK(x.ndim() == 4, "conv2d: input must be NCHW, got " << shape_str(x.shape()));
  MDSP_CHECK(weight.ndim() == 4, "conv2d: weight must be 4-d, got " << shape_str(weight.shape()));
  MDSP_CHECK(stride >= 1 && pad >= 0, "conv2d: bad stride/pad " << stride << "/" << pad);
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = weight.dim(0), k = weight.dim(2);
  MDSP_CHECK(weight.dim(2) == weight.dim(3), "conv2d: non-square kernel " << shape_str(weight.shape()));
  MDSP_CHECK(Cin == weight.dim(1), "conv2d: input channels mismatch, input " << shape_str(x.shape())
                                                                             << " vs weight "
                                                                             << shape_str(weight.shape()));
  if (bias.defined()) {
    MDSP_CHECK(bias.ndim() == 1 && bias.dim(0) == Cout,
               "conv2d: bias shape " << shape_str(bias.shape()) << " does not match " << Cout << " filters");
  }
  const int Ho = conv_out_extent(H, k, stride, pad);
  const int Wo = conv_out_extent(W, k, stride, pad);
  MDSP_CHECK(Ho >= 1 && Wo >= 1, "conv2d: kernel " << k << " does not fit input " << shape_str(x.shape())
                                                   << " with stride " << stride << " pad " << pad);

  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
  const std::int64_t K = static_cast<std::int64_t>(Cin) * k * k;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);

  std::vector<T> out(static_cast<size_t>(N) * Cout * P);
  std::vector<T> colbuf;
  if (!pointwise) colbuf.resize(static_cast<size_t>(K) * P);

  detail::ConstMatMap<T> Wm(weight.data(), Cout, K);
  for (int n = 0; n < N; ++n) {
    const T* img = x.data() + static_cast<std::int64_t>(n) * Cin * H * W;
    T* dst = out.data() + static_cast<std::int64_t>(n) * Cout * P;
    detail::MatMap<T> Om(dst, Cout, P);
    if (pointwise) {
      detail::ConstMatMap<T> Bm(img, K, P);
      Om.noalias() = Wm * Bm;
    } else {
      detail::im2col(img, Cin, H, W, k, stride, pad, Ho, Wo, colbuf.data());
      detail::ConstMatMap<T> Bm(colbuf.data(), K, P);
      Om.noalias() = Wm * Bm;
    }
    if (bias.defined()) {
      for (int co = 0; co < Cout; ++co) {
        const T b = bias.data()[co];
        T* row = dst + static_cast<std::int64_t>(co) * P;
        for (std::int64_t i = 0; i < P; ++i) row[i] += b;
      }
    }
  }

  auto xn = x.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor<T>> parents = {x, weight};
  if (bias.defined()) parents.push_back(bias);

  auto bp = [xn, wn, bn, N, Cin, H, W, Cout, k, stride, pad, Ho, Wo, P, K,
             pointwise](detail::Node<T>& nd) {
    std::vector<T> colbuf, dcolbuf;
    if (!pointwise) {
      colbuf.resize(static_cast<size_t>(K) * P);
      if (xn->requires_grad) dcolbuf.resize(static_cast<size_t>(K) * P);
    }
    detail::ConstMatMap<T> Wm(wn->values.data(), Cout, K);
    if (wn->requires_grad) wn->ensure_grad();
    if (xn->requires_grad) xn->ensure_grad();
    if (bn && bn->requires_grad) bn->ensure_grad();
    for (int n = 0; n < N; ++n) {
      const T* img = xn->values.data() + static_cast<std::int64_t>(n) * Cin * H * W;
      detail::ConstMatMap<T> Gm(nd.grad.data() + static_cast<std::int64_t>(n) * Cout * P, Cout, P);
      if (wn->requires_grad) {
        detail::MatMap<T> dWm(wn->grad.data(), Cout, K);
        if (pointwise) {
          detail::ConstMatMap<T> Bm(img, K, P);
          dWm.noalias() += Gm * Bm.transpose();
        } else {
          detail::im2col(img, Cin, H, W, k, stride, pad, Ho, Wo, colbuf.data());
          detail::ConstMatMap<T> Bm(colbuf.data(), K, P);
          dWm.noalias() += Gm * Bm.transpose();
        }
      }
      if (xn->requires_grad) {
        if (pointwise) {
          detail::MatMap<T> dXm(xn->grad.data() + static_cast<std::int64_t>(n) * Cin * H * W, K, P);
          dXm.noalias() += Wm.transpose() * Gm;
        } else {
          detail::MatMap<T> dCm(dcolbuf.data(), K, P);
          dCm.noalias() = Wm.transpose() * Gm;
          detail::col2im_accum(dcolbuf.data(), Cin, H, W, k, stride, pad, Ho, Wo,
                               xn->grad.data() + static_cast<std::int64_t>(n) * Cin * H * W);
        }
      }
      if (bn && bn->requires_grad) {
        for (int co = 0; co < Cout; ++co) {
          const T* row = nd.grad.data() + (static_cast<std::int64_t>(n) * Cout + co) * P;
          T s = T(0);
          for (std::int64_t i = 0; i < P; ++i) s += row[i];
          bn->grad[co] += s;
        }
      }
    }
  };
  return detail::make_op<T>({N, Cout, Ho, Wo}, std::move(out), std::move(parents), std::move(bp));
}

// ---------------------------------------------------------------------------
// maxpool2d / upsample
// ---------------------------------------------------------------------------

// Gradient routes to the argmax position; ties go to the first element of the
// window in row-major order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride, int pad) {
  MDSP_CHECK(x.ndim() == 4, "maxpool2d: input must be NCHW, got " << shape_str(x.shape()));
  MDSP_CHECK(k >= 1 && stride >= 1 && pad >= 0, "maxpool2d: bad window/stride/pad");
  MDSP_CHECK(pad < k, "maxpool2d: pad " << pad << " must be smaller than window " << k);
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  MDSP_CHECK(k <= H + 2 * pad && k <= W + 2 * pad,
             "maxpool2d: window " << k << " larger than padded input " << shape_str(x.shape()));
  const int Ho = conv_out_extent(H, k, stride, pad);
  const int Wo = conv_out_extent(W, k, stride, pad);

  std::vector<T> out(static_cast<size_t>(N) * C * Ho * Wo);
  std::vector<std::int64_t> argmax(out.size());
  std::int64_t o = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* plane = x.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
      const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * H * W;
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t bestIdx = -1;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              const T v = plane[static_cast<std::int64_t>(iy) * W + ix];
              if (v > best) {
                best = v;
                bestIdx = base + static_cast<std::int64_t>(iy) * W + ix;
              }
            }
          }
          out[static_cast<size_t>(o)] = best;
          argmax[static_cast<size_t>(o)] = bestIdx;
        }
      }
    }
  }
  auto xn = x.node();
  return detail::make_op<T>({N, C, Ho, Wo}, std::move(out), {x},
                            [xn, argmax = std::move(argmax)](detail::Node<T>& n) {
                              xn->ensure_grad();
                              for (size_t i = 0; i < n.grad.size(); ++i)
                                xn->grad[argmax[i]] += n.grad[i];
                            });
}

// Nearest-neighbor upsampling by an integer factor; backward sums replicas.
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int factor) {
  MDSP_CHECK(x.ndim() == 4, "upsample_nearest: input must be NCHW, got " << shape_str(x.shape()));
  MDSP_CHECK(factor >= 1, "upsample_nearest: factor must be >= 1, got " << factor);
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H * factor, Wo = W * factor;
  std::vector<T> out(static_cast<size_t>(N) * C * Ho * Wo);
  for (int nc = 0; nc < N * C; ++nc) {
    const T* src = x.data() + static_cast<std::int64_t>(nc) * H * W;
    T* dst = out.data() + static_cast<std::int64_t>(nc) * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const T* srow = src + static_cast<std::int64_t>(oy / factor) * W;
      T* drow = dst + static_cast<std::int64_t>(oy) * Wo;
      for (int ox = 0; ox < Wo; ++ox) drow[ox] = srow[ox / factor];
    }
  }
  auto xn = x.node();
  return detail::make_op<T>({N, C, Ho, Wo}, std::move(out), {x},
                            [xn, N, C, H, W, factor, Ho, Wo](detail::Node<T>& n) {
                              xn->ensure_grad();
                              for (int nc = 0; nc < N * C; ++nc) {
                                T* dst = xn->grad.data() + static_cast<std::int64_t>(nc) * H * W;
                                const T* src = n.grad.data() + static_cast<std::int64_t>(nc) * Ho * Wo;
                                for (int oy = 0; oy < Ho; ++oy)
                                  for (int ox = 0; ox < Wo; ++ox)
                                    dst[static_cast<std::int64_t>(oy / factor) * W + ox / factor] +=
                                        src[static_cast<std::int64_t>(oy) * Wo + ox];
                              }
                            });
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

// Training mode normalizes with per-channel batch statistics (biased
// variance) and updates the running buffers in place with momentum 0.1.
// Eval mode applies the running statistics. running_mean/var are plain
// buffers and never receive gradients.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                      T momentum = T(0.1), T eps = T(1e-5)) {
  MDSP_CHECK(x.ndim() == 4, "batchnorm2d: input must be NCHW, got " << shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  MDSP_CHECK(gamma.numel() == C && beta.numel() == C && running_mean.numel() == C &&
                 running_var.numel() == C,
             "batchnorm2d: parameter size mismatch for " << C << " channels");
  const std::int64_t m = static_cast<std::int64_t>(N) * H * W;
  MDSP_CHECK(!training || m > 1,
             "batchnorm2d: training mode needs more than one value per channel (got batch "
                 << N << ", spatial " << H << "x" << W << ")");

  std::vector<T> mu(C), invstd(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      T s = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = x.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) s += p[i];
      }
      const T mean_c = s / static_cast<T>(m);
      T v = T(0);
      for (int n = 0; n < N; ++n) {
        const T* p = x.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) {
          const T d = p[i] - mean_c;
          v += d * d;
        }
      }
      const T var_c = v / static_cast<T>(m);
      mu[c] = mean_c;
      invstd[c] = T(1) / std::sqrt(var_c + eps);
      running_mean.data()[c] = (T(1) - momentum) * running_mean.data()[c] + momentum * mean_c;
      running_var.data()[c] = (T(1) - momentum) * running_var.data()[c] + momentum * var_c;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mu[c] = running_mean.data()[c];
      invstd[c] = T(1) / std::sqrt(running_var.data()[c] + eps);
    }
  }

  std::vector<T> out(x.values().begin(), x.values().end());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      T* p = out.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
      const T g = gamma.data()[c], b = beta.data()[c], mc = mu[c], is = invstd[c];
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i)
        p[i] = (p[i] - mc) * is * g + b;
    }
  }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  auto bp = [xn, gn, bn, N, C, H, W, m, training, mu = std::move(mu),
             invstd = std::move(invstd)](detail::Node<T>& nd) {
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    if (gn->requires_grad) gn->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    if (xn->requires_grad) xn->ensure_grad();
    for (int c = 0; c < C; ++c) {
      const T mc = mu[c], is = invstd[c], g = gn->values[c];
      T sum_dy = T(0), sum_dy_xhat = T(0);
      for (int n = 0; n < N; ++n) {
        const T* dy = nd.grad.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
        const T* xv = xn->values.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          sum_dy += dy[i];
          sum_dy_xhat += dy[i] * (xv[i] - mc) * is;
        }
      }
      if (gn->requires_grad) gn->grad[c] += sum_dy_xhat;
      if (bn->requires_grad) bn->grad[c] += sum_dy;
      if (!xn->requires_grad) continue;
      if (training) {
        const T inv_m = T(1) / static_cast<T>(m);
        for (int n = 0; n < N; ++n) {
          const T* dy = nd.grad.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
          const T* xv = xn->values.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
          T* dx = xn->grad.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) {
            const T xhat = (xv[i] - mc) * is;
            dx[i] += g * is * (dy[i] - inv_m * sum_dy - inv_m * xhat * sum_dy_xhat);
          }
        }
      } else {
        for (int n = 0; n < N; ++n) {
          const T* dy = nd.grad.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
          T* dx = xn->grad.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) dx[i] += dy[i] * g * is;
        }
      }
    }
  };
  return detail::make_op<T>({N, C, H, W}, std::move(out), {x, gamma, beta}, std::move(bp));
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Mean squared error over all elements. target is a constant.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  MDSP_CHECK(pred.shape() == target.shape(), "mse_loss: shape mismatch " << shape_str(pred.shape())
                                                                         << " vs "
                                                                         << shape_str(target.shape()));
  const std::int64_t n = pred.numel();
  MDSP_CHECK(n > 0, "mse_loss: empty tensors");
  T s = T(0);
  const T* pp = pred.data();
  const T* pt = target.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const T d = pp[i] - pt[i];
    s += d * d;
  }
  const T inv = T(1) / static_cast<T>(n);
  auto pn = pred.node();
  auto tn = target.node();
  return detail::make_op<T>({}, {s * inv}, {pred}, [pn, tn, inv](detail::Node<T>& nd) {
    pn->ensure_grad();
    const T g = nd.grad[0] * inv * T(2);
    for (size_t i = 0; i < pn->grad.size(); ++i)
      pn->grad[i] += g * (pn->values[i] - tn->values[i]);
  });
}

// Number of nonzero mask entries; the denominator that turns the masked
// sum losses below into means.
template <typename T>
std::int64_t mask_count(const Tensor<T>& mask) {
  std::int64_t cnt = 0;
  for (T v : mask.values())
    if (v != T(0)) ++cnt;
  return cnt;
}

// Sum of squared errors over elements where mask is nonzero.
template <typename T>
Tensor<T> masked_mse_sum(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& mask) {
  MDSP_CHECK(pred.shape() == target.shape() && pred.shape() == mask.shape(),
             "masked_mse_sum: shape mismatch " << shape_str(pred.shape()) << " / "
                                               << shape_str(target.shape()) << " / "
                                               << shape_str(mask.shape()));
  const std::int64_t n = pred.numel();
  T s = T(0);
  const T* pp = pred.data();
  const T* pt = target.data();
  const T* pm = mask.data();
  for (std::int64_t i = 0; i < n; ++i) {
    if (pm[i] != T(0)) {
      const T d = pp[i] - pt[i];
      s += d * d;
    }
  }
  auto pn = pred.node();
  auto tn = target.node();
  auto mn = mask.node();
  return detail::make_op<T>({}, {s}, {pred}, [pn, tn, mn](detail::Node<T>& nd) {
    pn->ensure_grad();
    const T g = nd.grad[0] * T(2);
    for (size_t i = 0; i < pn->grad.size(); ++i)
      if (mn->values[i] != T(0)) pn->grad[i] += g * (pn->values[i] - tn->values[i]);
  });
}

// Sum of binary cross entropy on logits over elements where mask is
// nonzero, in the numerically stable form.
template <typename T>
Tensor<T> masked_bce_with_logits_sum(const Tensor<T>& logits, const Tensor<T>& target,
                                     const Tensor<T>& mask) {
  MDSP_CHECK(logits.shape() == target.shape() && logits.shape() == mask.shape(),
             "masked_bce_with_logits_sum: shape mismatch " << shape_str(logits.shape()) << " / "
                                                           << shape_str(target.shape()) << " / "
                                                           << shape_str(mask.shape()));
  const std::int64_t n = logits.numel();
  T s = T(0);
  const T* pz = logits.data();
  const T* pt = target.data();
  const T* pm = mask.data();
  for (std::int64_t i = 0; i < n; ++i) {
    if (pm[i] != T(0)) {
      const T z = pz[i], t = pt[i];
      s += std::max(z, T(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
  }
  auto zn = logits.node();
  auto tn = target.node();
  auto mn = mask.node();
  return detail::make_op<T>({}, {s}, {logits}, [zn, tn, mn](detail::Node<T>& nd) {
    zn->ensure_grad();
    const T g = nd.grad[0];
    for (size_t i = 0; i < zn->grad.size(); ++i) {
      if (mn->values[i] == T(0)) continue;
      const T z = zn->values[i];
      T sig;
      if (z >= T(0)) {
        sig = T(1) / (T(1) + std::exp(-z));
      } else {
        const T e = std::exp(z);
        sig = e / (T(1) + e);
      }
      zn->grad[i] += g * (sig - tn->values[i]);
    }
  });
}

// Per-position softmax cross entropy over the channel dimension of an NCHW
// tensor. labels is row-major (n, y, x); entries equal to ignore_label are
// excluded from the mean. Out-of-range labels raise an error.
template <typename T>
Tensor<T> softmax_cross_entropy_pixels(const Tensor<T>& logits, const std::vector<int>& labels,
                                       int ignore_label = -1) {
  MDSP_CHECK(logits.ndim() == 4, "softmax_cross_entropy_pixels: expected NCHW, got "
                                     << shape_str(logits.shape()));
  const int N = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  const std::int64_t px = static_cast<std::int64_t>(N) * H * W;
  MDSP_CHECK(static_cast<std::int64_t>(labels.size()) == px,
             "softmax_cross_entropy_pixels: " << labels.size() << " labels for " << px << " positions");
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;

  std::int64_t cnt = 0;
  T s = T(0);
  const T* pl = logits.data();
  for (int n = 0; n < N; ++n) {
    for (std::int64_t i = 0; i < plane; ++i) {
      const int lab = labels[static_cast<size_t>(n * plane + i)];
      if (lab == ignore_label) continue;
      MDSP_CHECK(lab >= 0 && lab < C,
                 "softmax_cross_entropy_pixels: label " << lab << " out of range [0, " << C << ")");
      const T* base = pl + static_cast<std::int64_t>(n) * C * plane + i;
      T mx = base[0];
      for (int c = 1; c < C; ++c) mx = std::max(mx, base[static_cast<std::int64_t>(c) * plane]);
      T lse = T(0);
      for (int c = 0; c < C; ++c) lse += std::exp(base[static_cast<std::int64_t>(c) * plane] - mx);
      lse = std::log(lse) + mx;
      s += lse - base[static_cast<std::int64_t>(lab) * plane];
      ++cnt;
    }
  }
  const T inv = cnt > 0 ? T(1) / static_cast<T>(cnt) : T(0);
  auto zn = logits.node();
  return detail::make_op<T>(
      {}, {s * inv}, {logits}, [zn, labels, ignore_label, N, C, plane, inv](detail::Node<T>& nd) {
        zn->ensure_grad();
        const T g = nd.grad[0] * inv;
        if (g == T(0)) return;
        for (int n = 0; n < N; ++n) {
          for (std::int64_t i = 0; i < plane; ++i) {
            const int lab = labels[static_cast<size_t>(n * plane + i)];
            if (lab == ignore_label) continue;
            const T* base = zn->values.data() + static_cast<std::int64_t>(n) * C * plane + i;
            T* gbase = zn->grad.data() + static_cast<std::int64_t>(n) * C * plane + i;
            T mx = base[0];
            for (int c = 1; c < C; ++c) mx = std::max(mx, base[static_cast<std::int64_t>(c) * plane]);
            T lse = T(0);
            for (int c = 0; c < C; ++c) lse += std::exp(base[static_cast<std::int64_t>(c) * plane] - mx);
            for (int c = 0; c < C; ++c) {
              const T p = std::exp(base[static_cast<std::int64_t>(c) * plane] - mx) / lse;
              gbase[static_cast<std::int64_t>(c) * plane] += g * (p - (c == lab ? T(1) : T(0)));
            }
          }
        }
      });
}

inline std::int64_t count_valid_labels(const std::vector<int>& labels, int ignore_label = -1) {
  std::int64_t n = 0;
  for (int l : labels)
    if (l != ignore_label) ++n;
  return n;
}

// Weighted sum of scalar tensors: sum_i weights[i] * scalars[i].
template <typename T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& scalars, const std::vector<T>& weights) {
  MDSP_CHECK(!scalars.empty() && scalars.size() == weights.size(),
             "weighted_sum: " << scalars.size() << " terms vs " << weights.size() << " weights");
  T s = T(0);
  for (size_t i = 0; i < scalars.size(); ++i) {
    MDSP_CHECK(scalars[i].numel() == 1, "weighted_sum: term " << i << " is not a scalar");
    s += weights[i] * scalars[i].item();
  }
  std::vector<std::shared_ptr<detail::Node<T>>> pnodes;
  for (const auto& t : scalars) pnodes.push_back(t.node());
  return detail::make_op<T>({}, {s}, scalars, [pnodes, weights](detail::Node<T>& nd) {
    for (size_t i = 0; i < pnodes.size(); ++i) {
      if (!pnodes[i]->requires_grad) continue;
      pnodes[i]->ensure_grad();
      pnodes[i]->grad[0] += nd.grad[0] * weights[i];
    }
  });
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

// v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
// A missing gradient counts as zero. velocity must be zero-initialized by the
// caller and must match the parameter size.
template <typename T>
void sgd_momentum_step(Tensor<T>& param, std::vector<T>& velocity, T lr, T momentum,
                       T weight_decay) {
  const std::int64_t n = param.numel();
  MDSP_CHECK(static_cast<std::int64_t>(velocity.size()) == n,
             "sgd_momentum_step: velocity size " << velocity.size() << " vs param " << n);
  const T* g = param.has_grad() ? param.grad().data() : nullptr;
  T* p = param.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const T gi = g ? g[i] : T(0);
    velocity[static_cast<size_t>(i)] =
        momentum * velocity[static_cast<size_t>(i)] + gi + weight_decay * p[i];
    p[i] -= lr * velocity[static_cast<size_t>(i)];
  }
}

// ---------------------------------------------------------------------------
// misc utilities
// ---------------------------------------------------------------------------

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace mdsp
