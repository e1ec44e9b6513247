#pragma once

// Dense row-major tensors with a minimal reverse-mode autodiff engine.
// Templated on the scalar type: float for training, double for
// finite-difference gradient checking (the per-op tolerances are not
// achievable in single precision).
//
// Tensors are immutable values once they participate in a graph; a graph
// (and the Tape built from it) is single-threaded. Ops record parents and a
// backprop closure only while gradients are enabled and some input requires
// them, so inference builds no graph at all.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "neuroswap/errors.hpp"
#include "neuroswap/rng.hpp"

namespace neuroswap {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Thread-local gradient mode. Feature extraction may run on worker threads
// with gradients disabled while a training thread keeps them on.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first use
  bool requires_grad = false;
  bool backward_ran = false;  // set on a node used as a backward root
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node<T>>> parents;
  // Reads this->grad and accumulates into parents' grad buffers.
  std::function<void(Node<T>&)> backprop;

  int64_t numel() const { return shape_numel(shape); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (const T& x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by op '") + op + "'");
  }
}

template <typename T>
class TensorT {
 public:
  std::shared_ptr<Node<T>> node;

  TensorT() = default;
  explicit TensorT(std::shared_ptr<Node<T>> n) : node(std::move(n)) {}

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static TensorT filled(Shape shape, T v, bool requires_grad = false) {
    validate_shape(shape);
    auto n = std::make_shared<Node<T>>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad && grad_enabled();
    return TensorT(std::move(n));
  }

  static TensorT from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    validate_shape(shape);
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw DimensionError("from_data: " + shape_str(shape) + " does not match buffer of " +
                           std::to_string(data.size()) + " scalars");
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad && grad_enabled();
    return TensorT(std::move(n));
  }

  static TensorT scalar(T v, bool requires_grad = false) { return from_data({}, {v}, requires_grad); }

  static TensorT randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    validate_shape(shape);
    std::vector<T> data(shape_numel(shape));
    for (T& x : data) x = static_cast<T>(gaussian(rng, 0.0, static_cast<double>(stddev)));
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return node != nullptr; }
  const Shape& shape() const { return node->shape; }
  int64_t ndim() const { return static_cast<int64_t>(node->shape.size()); }
  int64_t dim(int i) const { return node->shape[i]; }
  int64_t numel() const { return node->numel(); }
  bool requires_grad() const { return node->requires_grad; }

  TensorT& set_requires_grad(bool v) {
    node->requires_grad = v;
    return *this;
  }

  std::span<const T> data() const { return node->value; }
  // Only valid for leaves outside any live graph (parameter updates, buffer fills).
  std::span<T> data_mut() { return node->value; }

  std::span<const T> grad() const { return node->grad; }
  void zero_grad() {
    node->grad.assign(node->value.size(), T(0));
    node->backward_ran = false;
  }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor with " + std::to_string(numel()) + " elements");
    return node->value[0];
  }

  T at(std::initializer_list<int64_t> idx) const {
    if (idx.size() != node->shape.size()) throw DimensionError("at(): index rank mismatch");
    int64_t off = 0, i = 0;
    for (int64_t v : idx) off = off * node->shape[i] + v, ++i;
    return node->value[off];
  }

 private:
  static void validate_shape(const Shape& shape) {
    for (int64_t d : shape) {
      if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
    }
  }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// ---------------------------------------------------------------------------
// Op construction
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> make_op(const char* name, Shape shape, std::vector<T> value,
                   std::initializer_list<TensorT<T>> inputs, std::function<void(Node<T>&)> backprop) {
  check_finite(value, name);
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = name;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const auto& in : inputs) n->parents.push_back(in.node);
    n->backprop = std::move(backprop);
  }
  return TensorT<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// Tape: explicit topological record over the graph reachable from a root.
// Parents always precede their consumers in `order`; running backward visits
// each node exactly once, accumulating gradients additively over fan-out.
// ---------------------------------------------------------------------------

template <typename T>
struct TapeT {
  std::shared_ptr<Node<T>> root;
  std::vector<Node<T>*> order;  // topological: parents before children

  static TapeT build(const TensorT<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) throw ContractError("backward root must be a scalar tensor");
    TapeT tape;
    tape.root = loss.node;
    std::unordered_set<Node<T>*> visited;
    // Iterative post-order DFS over parents that require grad.
    std::vector<std::pair<Node<T>*, size_t>> stack;
    if (loss.node->requires_grad) stack.emplace_back(loss.node.get(), 0);
    while (!stack.empty()) {
      auto& [node, next_parent] = stack.back();
      if (next_parent == 0 && visited.count(node)) {
        stack.pop_back();
        continue;
      }
      if (next_parent < node->parents.size()) {
        Node<T>* parent = node->parents[next_parent].get();
        ++next_parent;
        if (parent->requires_grad && !visited.count(parent)) stack.emplace_back(parent, 0);
      } else {
        visited.insert(node);
        tape.order.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  // Seeds d(root)/d(root) = 1 and propagates to every reachable node.
  void run_backward() {
    if (root->backward_ran)
      throw ContractError("backward already ran for this root; zero_grad/rebuild the graph first");
    root->backward_ran = true;
    if (!root->requires_grad) return;
    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (!n->backprop) continue;
      n->ensure_grad();
      for (auto& p : n->parents)
        if (p->requires_grad) p->ensure_grad();
      n->backprop(*n);
    }
  }
};

template <typename T>
void backward(const TensorT<T>& loss) {
  auto tape = TapeT<T>::build(loss);
  tape.run_backward();
}

// ---------------------------------------------------------------------------
// Elementwise and binary ops
// ---------------------------------------------------------------------------

template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] + pb[i];
  return make_op<T>("add", a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    for (int k = 0; k < 2; ++k) {
      auto& p = *n.parents[k];
      if (!p.requires_grad) continue;
      for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    }
  });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] - pb[i];
  return make_op<T>("sub", a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad)
      for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
    if (pb.requires_grad)
      for (size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
  });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] * pb[i];
  return make_op<T>("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad)
      for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * pb.value[i];
    if (pb.requires_grad)
      for (size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i] * pa.value[i];
  });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] * c;
  return make_op<T>("scale", a.shape(), std::move(out), {a}, [c](Node<T>& n) {
    auto& p = *n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * c;
  });
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T c) {
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] + c;
  return make_op<T>("add_scalar", a.shape(), std::move(out), {a}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
  });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = pa[i] > T(0) ? pa[i] : T(0);
  return make_op<T>("relu", a.shape(), std::move(out), {a}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (p.value[i] > T(0)) p.grad[i] += n.grad[i];
  });
}

template <typename T>
TensorT<T> tanh_op(const TensorT<T>& a) {
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::tanh(pa[i]);
  return make_op<T>("tanh", a.shape(), std::move(out), {a}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * (T(1) - n.value[i] * n.value[i]);
  });
}

template <typename T>
TensorT<T> exp_op(const TensorT<T>& a) {
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::exp(pa[i]);
  return make_op<T>("exp", a.shape(), std::move(out), {a}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * n.value[i];
  });
}

template <typename T>
TensorT<T> log_op(const TensorT<T>& a) {
  std::vector<T> out(a.numel());
  const T* pa = a.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    if (!(pa[i] > T(0))) throw DomainError("log of non-positive value");
    out[i] = std::log(pa[i]);
  }
  return make_op<T>("log", a.shape(), std::move(out), {a}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] / p.value[i];
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(new_shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_op<T>("reshape", std::move(new_shape), std::move(out), {a}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
  });
}

template <typename T>
TensorT<T> gather_rows(const TensorT<T>& a, std::vector<int64_t> rows) {
  if (a.ndim() != 2) throw DimensionError("gather_rows expects a 2-d tensor");
  const int64_t d = a.dim(1);
  std::vector<T> out(rows.size() * d);
  for (size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= a.dim(0)) throw DimensionError("gather_rows: row index out of range");
    std::memcpy(out.data() + r * d, a.data().data() + rows[r] * d, sizeof(T) * d);
  }
  Shape shape{static_cast<int64_t>(rows.size()), d};
  return make_op<T>("gather_rows", std::move(shape), std::move(out), {a}, [rows, d](Node<T>& n) {
    auto& p = *n.parents[0];
    for (size_t r = 0; r < rows.size(); ++r)
      for (int64_t j = 0; j < d; ++j) p.grad[rows[r] * d + j] += n.grad[r * d + j];
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum_all(const TensorT<T>& a) {
  double acc = 0;  // double accumulation keeps reductions order-insensitive in f32
  for (T v : a.data()) acc += v;
  T s = static_cast<T>(acc);
  return make_op<T>("sum_all", {}, {s}, {a}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[0];
  });
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
TensorT<T> sum_diag(const TensorT<T>& a) {
  if (a.ndim() != 2 || a.dim(0) != a.dim(1)) throw DimensionError("sum_diag expects a square matrix");
  const int64_t n_rows = a.dim(0);
  double acc = 0;
  for (int64_t i = 0; i < n_rows; ++i) acc += a.data()[i * n_rows + i];
  T s = static_cast<T>(acc);
  return make_op<T>("sum_diag", {}, {s}, {a}, [n_rows](Node<T>& n) {
    auto& p = *n.parents[0];
    for (int64_t i = 0; i < n_rows; ++i) p.grad[i * n_rows + i] += n.grad[0];
  });
}

// ---------------------------------------------------------------------------
// GEMM helpers (value-level, shared by matmul and conv)
// ---------------------------------------------------------------------------

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_acc(int64_t M, int64_t N, int64_t K, const T* __restrict a, const T* __restrict b, T* __restrict c) {
  for (int64_t i = 0; i < M; ++i) {
    const T* arow = a + i * K;
    T* crow = c + i * N;
    for (int64_t k = 0; k < K; ++k) {
      const T av = arow[k];
      const T* brow = b + k * N;
      for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt_acc(int64_t M, int64_t N, int64_t K, const T* __restrict a, const T* __restrict b, T* __restrict c) {
  for (int64_t i = 0; i < M; ++i) {
    const T* arow = a + i * K;
    T* crow = c + i * N;
    for (int64_t j = 0; j < N; ++j) {
      const T* brow = b + j * K;
      T s = 0;
      for (int64_t k = 0; k < K; ++k) s += arow[k] * brow[k];
      crow[j] += s;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn_acc(int64_t M, int64_t N, int64_t K, const T* __restrict a, const T* __restrict b, T* __restrict c) {
  for (int64_t k = 0; k < K; ++k) {
    const T* arow = a + k * M;
    const T* brow = b + k * N;
    for (int64_t i = 0; i < M; ++i) {
      const T av = arow[i];
      T* crow = c + i * N;
      for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw DimensionError("matmul expects 2-d tensors");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> out(M * N, T(0));
  gemm_acc(M, N, K, a.data().data(), b.data().data(), out.data());
  return make_op<T>("matmul", {M, N}, std::move(out), {a, b}, [M, K, N](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    // dA = dC * B^T ; dB = A^T * dC
    if (pa.requires_grad) gemm_nt_acc(M, K, N, n.grad.data(), pb.value.data(), pa.grad.data());
    if (pb.requires_grad) gemm_tn_acc(K, N, M, pa.value.data(), n.grad.data(), pb.grad.data());
  });
}

// A [M,K] * B[N,K]^T -> [M,N]
template <typename T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw DimensionError("matmul_nt expects 2-d tensors");
  if (a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(0);
  std::vector<T> out(M * N, T(0));
  gemm_nt_acc(M, N, K, a.data().data(), b.data().data(), out.data());
  return make_op<T>("matmul_nt", {M, N}, std::move(out), {a, b}, [M, K, N](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    // C = A B^T: dA = dC * B ; dB = dC^T * A
    if (pa.requires_grad) gemm_acc(M, K, N, n.grad.data(), pb.value.data(), pa.grad.data());
    if (pb.requires_grad) gemm_tn_acc(N, K, M, n.grad.data(), pa.value.data(), pb.grad.data());
  });
}

// x [N,D] + v [D] broadcast over rows
template <typename T>
TensorT<T> add_rowvec(const TensorT<T>& x, const TensorT<T>& v) {
  if (x.ndim() != 2 || v.ndim() != 1 || x.dim(1) != v.dim(0))
    throw DimensionError("add_rowvec: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
  const int64_t N = x.dim(0), D = x.dim(1);
  std::vector<T> out(N * D);
  const T* px = x.data().data();
  const T* pv = v.data().data();
  for (int64_t i = 0; i < N; ++i)
    for (int64_t j = 0; j < D; ++j) out[i * D + j] = px[i * D + j] + pv[j];
  return make_op<T>("add_rowvec", x.shape(), std::move(out), {x, v}, [N, D](Node<T>& n) {
    auto& px = *n.parents[0];
    auto& pv = *n.parents[1];
    if (px.requires_grad)
      for (size_t i = 0; i < n.grad.size(); ++i) px.grad[i] += n.grad[i];
    if (pv.requires_grad)
      for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < D; ++j) pv.grad[j] += n.grad[i * D + j];
  });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation semantics) and max pooling
// ---------------------------------------------------------------------------

struct ConvSpec {
  int64_t stride = 1;
  int64_t padding = 0;
};

// x [B, C, L], w [F, C, K] -> [B, F, L'] with L' = (L + 2p - K)/s + 1
template <typename T>
TensorT<T> conv1d(const TensorT<T>& x, const TensorT<T>& w, ConvSpec spec = {}) {
  if (x.ndim() != 3 || w.ndim() != 3) throw DimensionError("conv1d expects x [B,C,L], w [F,C,K]");
  if (x.dim(1) != w.dim(1))
    throw DimensionError("conv1d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  const int64_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  const int64_t F = w.dim(0), K = w.dim(2);
  const int64_t s = spec.stride, p = spec.padding;
  if (s < 1 || p < 0) throw DimensionError("conv1d: invalid stride/padding");
  if (K > L + 2 * p) throw DimensionError("conv1d: kernel larger than padded input");
  const int64_t Lo = (L + 2 * p - K) / s + 1;

  // im2col: cols [C*K, Lo] per batch item, out = W[F, C*K] * cols
  const int64_t ck = C * K;
  std::vector<T> out(B * F * Lo, T(0));
  std::vector<T> cols(ck * Lo);
  for (int64_t b = 0; b < B; ++b) {
    const T* xb = x.data().data() + b * C * L;
    std::fill(cols.begin(), cols.end(), T(0));
    for (int64_t c = 0; c < C; ++c)
      for (int64_t k = 0; k < K; ++k) {
        T* dst = cols.data() + (c * K + k) * Lo;
        for (int64_t o = 0; o < Lo; ++o) {
          int64_t src = o * s + k - p;
          if (src >= 0 && src < L) dst[o] = xb[c * L + src];
        }
      }
    gemm_acc(F, Lo, ck, w.data().data(), cols.data(), out.data() + b * F * Lo);
  }
  return make_op<T>("conv1d", {B, F, Lo}, std::move(out), {x, w}, [=](Node<T>& n) {
    auto& px = *n.parents[0];
    auto& pw = *n.parents[1];
    std::vector<T> cols_local(ck * Lo);
    std::vector<T> dcols(ck * Lo);
    for (int64_t b = 0; b < B; ++b) {
      const T* dout = n.grad.data() + b * F * Lo;
      if (pw.requires_grad) {
        const T* xb = px.value.data() + b * C * L;
        std::fill(cols_local.begin(), cols_local.end(), T(0));
        for (int64_t c = 0; c < C; ++c)
          for (int64_t k = 0; k < K; ++k) {
            T* dst = cols_local.data() + (c * K + k) * Lo;
            for (int64_t o = 0; o < Lo; ++o) {
              int64_t src = o * s + k - p;
              if (src >= 0 && src < L) dst[o] = xb[c * L + src];
            }
          }
        // dW += dout [F,Lo] * cols^T [Lo, C*K]
        gemm_nt_acc(F, ck, Lo, dout, cols_local.data(), pw.grad.data());
      }
      if (px.requires_grad) {
        std::fill(dcols.begin(), dcols.end(), T(0));
        // dcols = W^T [C*K, F] * dout [F, Lo]
        gemm_tn_acc(ck, Lo, F, pw.value.data(), dout, dcols.data());
        T* dxb = px.grad.data() + b * C * L;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t k = 0; k < K; ++k) {
            const T* src = dcols.data() + (c * K + k) * Lo;
            for (int64_t o = 0; o < Lo; ++o) {
              int64_t dst = o * s + k - p;
              if (dst >= 0 && dst < L) dxb[c * L + dst] += src[o];
            }
          }
      }
    }
  });
}

// x [B, C, H, W], w [F, C, KH, KW] -> [B, F, H', W']
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, ConvSpec spec = {}) {
  if (x.ndim() != 4 || w.ndim() != 4) throw DimensionError("conv2d expects x [B,C,H,W], w [F,C,KH,KW]");
  if (x.dim(1) != w.dim(1))
    throw DimensionError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t F = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int64_t s = spec.stride, p = spec.padding;
  if (s < 1 || p < 0) throw DimensionError("conv2d: invalid stride/padding");
  if (KH > H + 2 * p || KW > W + 2 * p) throw DimensionError("conv2d: kernel larger than padded input");
  const int64_t Ho = (H + 2 * p - KH) / s + 1;
  const int64_t Wo = (W + 2 * p - KW) / s + 1;
  const int64_t ck = C * KH * KW, ohw = Ho * Wo;

  auto fill_cols = [=](const T* xb, T* cols) {
    for (int64_t c = 0; c < C; ++c)
      for (int64_t kh = 0; kh < KH; ++kh)
        for (int64_t kw = 0; kw < KW; ++kw) {
          T* dst = cols + ((c * KH + kh) * KW + kw) * ohw;
          for (int64_t oh = 0; oh < Ho; ++oh) {
            int64_t ih = oh * s + kh - p;
            if (ih < 0 || ih >= H) {
              std::fill(dst + oh * Wo, dst + (oh + 1) * Wo, T(0));
              continue;
            }
            const T* src = xb + (c * H + ih) * W;
            for (int64_t ow = 0; ow < Wo; ++ow) {
              int64_t iw = ow * s + kw - p;
              dst[oh * Wo + ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
            }
          }
        }
  };

  std::vector<T> out(B * F * ohw, T(0));
  std::vector<T> cols(ck * ohw);
  for (int64_t b = 0; b < B; ++b) {
    fill_cols(x.data().data() + b * C * H * W, cols.data());
    gemm_acc(F, ohw, ck, w.data().data(), cols.data(), out.data() + b * F * ohw);
  }
  return make_op<T>("conv2d", {B, F, Ho, Wo}, std::move(out), {x, w}, [=](Node<T>& n) {
    auto& px = *n.parents[0];
    auto& pw = *n.parents[1];
    std::vector<T> cols_local(ck * ohw);
    std::vector<T> dcols(ck * ohw);
    for (int64_t b = 0; b < B; ++b) {
      const T* dout = n.grad.data() + b * F * ohw;
      if (pw.requires_grad) {
        fill_cols(px.value.data() + b * C * H * W, cols_local.data());
        gemm_nt_acc(F, ck, ohw, dout, cols_local.data(), pw.grad.data());
      }
      if (px.requires_grad) {
        std::fill(dcols.begin(), dcols.end(), T(0));
        gemm_tn_acc(ck, ohw, F, pw.value.data(), dout, dcols.data());
        T* dxb = px.grad.data() + b * C * H * W;
        for (int64_t c = 0; c < C; ++c)
          for (int64_t kh = 0; kh < KH; ++kh)
            for (int64_t kw = 0; kw < KW; ++kw) {
              const T* src = dcols.data() + ((c * KH + kh) * KW + kw) * ohw;
              for (int64_t oh = 0; oh < Ho; ++oh) {
                int64_t ih = oh * s + kh - p;
                if (ih < 0 || ih >= H) continue;
                T* drow = dxb + (c * H + ih) * W;
                for (int64_t ow = 0; ow < Wo; ++ow) {
                  int64_t iw = ow * s + kw - p;
                  if (iw >= 0 && iw < W) drow[iw] += src[oh * Wo + ow];
                }
              }
            }
      }
    }
  });
}

// Max pooling; gradient routes to the argmax, first index on ties.
template <typename T>
TensorT<T> maxpool1d(const TensorT<T>& x, int64_t window, int64_t stride) {
  if (x.ndim() != 3) throw DimensionError("maxpool1d expects [B,C,L]");
  if (window <= 0 || stride <= 0) throw DimensionError("maxpool1d: window and stride must be positive");
  const int64_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  if (window > L) throw DimensionError("maxpool1d: window larger than input");
  const int64_t Lo = (L - window) / stride + 1;
  std::vector<T> out(B * C * Lo);
  auto argmax = std::make_shared<std::vector<int64_t>>(B * C * Lo);
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* src = x.data().data() + bc * L;
    for (int64_t o = 0; o < Lo; ++o) {
      int64_t best = o * stride;
      T bv = src[best];
      for (int64_t k = 1; k < window; ++k) {
        int64_t idx = o * stride + k;
        if (src[idx] > bv) bv = src[idx], best = idx;
      }
      out[bc * Lo + o] = bv;
      (*argmax)[bc * Lo + o] = best;
    }
  }
  return make_op<T>("maxpool1d", {B, C, Lo}, std::move(out), {x}, [=](Node<T>& n) {
    auto& p = *n.parents[0];
    for (int64_t bc = 0; bc < B * C; ++bc)
      for (int64_t o = 0; o < Lo; ++o) p.grad[bc * L + (*argmax)[bc * Lo + o]] += n.grad[bc * Lo + o];
  });
}

template <typename T>
TensorT<T> maxpool2d(const TensorT<T>& x, int64_t window, int64_t stride) {
  if (x.ndim() != 4) throw DimensionError("maxpool2d expects [B,C,H,W]");
  if (window <= 0 || stride <= 0) throw DimensionError("maxpool2d: window and stride must be positive");
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window > H || window > W) throw DimensionError("maxpool2d: window larger than input");
  const int64_t Ho = (H - window) / stride + 1;
  const int64_t Wo = (W - window) / stride + 1;
  std::vector<T> out(B * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<int64_t>>(B * C * Ho * Wo);
  for (int64_t bc = 0; bc < B * C; ++bc) {
    const T* src = x.data().data() + bc * H * W;
    T* dst = out.data() + bc * Ho * Wo;
    int64_t* am = argmax->data() + bc * Ho * Wo;
    for (int64_t oh = 0; oh < Ho; ++oh)
      for (int64_t ow = 0; ow < Wo; ++ow) {
        int64_t best = (oh * stride) * W + ow * stride;
        T bv = src[best];
        for (int64_t kh = 0; kh < window; ++kh)
          for (int64_t kw = 0; kw < window; ++kw) {
            int64_t idx = (oh * stride + kh) * W + ow * stride + kw;
            if (src[idx] > bv) bv = src[idx], best = idx;
          }
        dst[oh * Wo + ow] = bv;
        am[oh * Wo + ow] = best;
      }
  }
  return make_op<T>("maxpool2d", {B, C, Ho, Wo}, std::move(out), {x}, [=](Node<T>& n) {
    auto& p = *n.parents[0];
    for (int64_t bc = 0; bc < B * C; ++bc)
      for (int64_t o = 0; o < Ho * Wo; ++o)
        p.grad[bc * H * W + (*argmax)[bc * Ho * Wo + o]] += n.grad[bc * Ho * Wo + o];
  });
}

// ---------------------------------------------------------------------------
// Softmax family (max-subtracted for stability). axis: 1 = rows, 0 = columns
// of a 2-d tensor; 1-d tensors are treated as a single row.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void softmax_strided(const T* x, T* y, int64_t n, int64_t stride, bool log_out) {
  T mx = x[0];
  for (int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i * stride]);
  T z = 0;
  for (int64_t i = 0; i < n; ++i) z += std::exp(x[i * stride] - mx);
  if (log_out) {
    T lz = std::log(z);
    for (int64_t i = 0; i < n; ++i) y[i * stride] = x[i * stride] - mx - lz;
  } else {
    for (int64_t i = 0; i < n; ++i) y[i * stride] = std::exp(x[i * stride] - mx) / z;
  }
}

struct AxisView {
  int64_t n_lanes;     // number of independent softmax vectors
  int64_t lane_len;    // elements per vector
  int64_t lane_step;   // offset between consecutive lanes
  int64_t elem_step;   // stride within a vector
};

template <typename T>
AxisView axis_view(const TensorT<T>& x, int axis) {
  if (x.ndim() == 1) return {1, x.dim(0), 0, 1};
  if (x.ndim() != 2) throw DimensionError("softmax expects a 1-d or 2-d tensor");
  if (axis == 1) return {x.dim(0), x.dim(1), x.dim(1), 1};
  if (axis == 0) return {x.dim(1), x.dim(0), 1, x.dim(1)};
  throw DimensionError("softmax: axis must be 0 or 1");
}

}  // namespace detail

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis = 1) {
  auto v = detail::axis_view(x, axis);
  std::vector<T> out(x.numel());
  for (int64_t l = 0; l < v.n_lanes; ++l)
    detail::softmax_strided(x.data().data() + l * v.lane_step, out.data() + l * v.lane_step, v.lane_len,
                            v.elem_step, false);
  return make_op<T>("softmax", x.shape(), std::move(out), {x}, [v](Node<T>& n) {
    auto& p = *n.parents[0];
    for (int64_t l = 0; l < v.n_lanes; ++l) {
      const T* y = n.value.data() + l * v.lane_step;
      const T* dy = n.grad.data() + l * v.lane_step;
      T* dx = p.grad.data() + l * v.lane_step;
      T dot = 0;
      for (int64_t i = 0; i < v.lane_len; ++i) dot += y[i * v.elem_step] * dy[i * v.elem_step];
      for (int64_t i = 0; i < v.lane_len; ++i)
        dx[i * v.elem_step] += y[i * v.elem_step] * (dy[i * v.elem_step] - dot);
    }
  });
}

template <typename T>
TensorT<T> log_softmax(const TensorT<T>& x, int axis = 1) {
  auto v = detail::axis_view(x, axis);
  std::vector<T> out(x.numel());
  for (int64_t l = 0; l < v.n_lanes; ++l)
    detail::softmax_strided(x.data().data() + l * v.lane_step, out.data() + l * v.lane_step, v.lane_len,
                            v.elem_step, true);
  return make_op<T>("log_softmax", x.shape(), std::move(out), {x}, [v](Node<T>& n) {
    auto& p = *n.parents[0];
    for (int64_t l = 0; l < v.n_lanes; ++l) {
      const T* y = n.value.data() + l * v.lane_step;
      const T* dy = n.grad.data() + l * v.lane_step;
      T* dx = p.grad.data() + l * v.lane_step;
      T sum_dy = 0;
      for (int64_t i = 0; i < v.lane_len; ++i) sum_dy += dy[i * v.elem_step];
      for (int64_t i = 0; i < v.lane_len; ++i)
        dx[i * v.elem_step] += dy[i * v.elem_step] - std::exp(y[i * v.elem_step]) * sum_dy;
    }
  });
}

// log softmax with a 0/1 support mask on the normalizing sum. Entries outside
// the support still get a (finite) value x - logZ but carry no denominator
// gradient. Every lane needs at least one active entry.
template <typename T>
TensorT<T> masked_log_softmax(const TensorT<T>& x, const std::vector<uint8_t>& mask, int axis = 1) {
  if (static_cast<int64_t>(mask.size()) != x.numel())
    throw DimensionError("masked_log_softmax: mask size mismatch");
  auto v = detail::axis_view(x, axis);
  std::vector<T> out(x.numel());
  auto m = std::make_shared<std::vector<uint8_t>>(mask);
  for (int64_t l = 0; l < v.n_lanes; ++l) {
    const T* xs = x.data().data() + l * v.lane_step;
    const uint8_t* ms = m->data() + l * v.lane_step;
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t i = 0; i < v.lane_len; ++i)
      if (ms[i * v.elem_step]) mx = std::max(mx, xs[i * v.elem_step]);
    if (!std::isfinite(mx)) throw ContractError("masked_log_softmax: empty support in a lane");
    T z = 0;
    for (int64_t i = 0; i < v.lane_len; ++i)
      if (ms[i * v.elem_step]) z += std::exp(xs[i * v.elem_step] - mx);
    T lz = std::log(z) + mx;
    T* ys = out.data() + l * v.lane_step;
    for (int64_t i = 0; i < v.lane_len; ++i) ys[i * v.elem_step] = xs[i * v.elem_step] - lz;
  }
  return make_op<T>("masked_log_softmax", x.shape(), std::move(out), {x}, [v, m](Node<T>& n) {
    auto& p = *n.parents[0];
    for (int64_t l = 0; l < v.n_lanes; ++l) {
      const T* y = n.value.data() + l * v.lane_step;
      const T* dy = n.grad.data() + l * v.lane_step;
      const uint8_t* ms = m->data() + l * v.lane_step;
      T* dx = p.grad.data() + l * v.lane_step;
      T sum_dy = 0;
      for (int64_t i = 0; i < v.lane_len; ++i) sum_dy += dy[i * v.elem_step];
      for (int64_t i = 0; i < v.lane_len; ++i) {
        T soft = ms[i * v.elem_step] ? std::exp(y[i * v.elem_step]) : T(0);
        dx[i * v.elem_step] += dy[i * v.elem_step] - soft * sum_dy;
      }
    }
  });
}

// Negative log likelihood: -sum_i logprobs[i, labels[i]].
template <typename T>
TensorT<T> nll_loss(const TensorT<T>& logprobs, const std::vector<int>& labels) {
  if (logprobs.ndim() != 2) throw DimensionError("nll_loss expects [N,C] log probabilities");
  const int64_t N = logprobs.dim(0), C = logprobs.dim(1);
  if (static_cast<int64_t>(labels.size()) != N) throw DimensionError("nll_loss: label count mismatch");
  T s = 0;
  for (int64_t i = 0; i < N; ++i) {
    if (labels[i] < 0 || labels[i] >= C) throw ContractError("nll_loss: label out of range");
    s -= logprobs.data()[i * C + labels[i]];
  }
  auto lab = std::make_shared<std::vector<int>>(labels);
  return make_op<T>("nll_loss", {}, {s}, {logprobs}, [N, C, lab](Node<T>& n) {
    auto& p = *n.parents[0];
    for (int64_t i = 0; i < N; ++i) p.grad[i * C + (*lab)[i]] -= n.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Row-normalization and cosine similarity
// ---------------------------------------------------------------------------

// y_i = x_i / max(||x_i||_2, floor), rows of a 2-d tensor.
template <typename T>
TensorT<T> row_l2_normalize(const TensorT<T>& x, T floor = T(1e-8)) {
  if (x.ndim() != 2) throw DimensionError("row_l2_normalize expects [N,D]");
  const int64_t N = x.dim(0), D = x.dim(1);
  std::vector<T> out(N * D);
  auto norms = std::make_shared<std::vector<T>>(N);
  auto floored = std::make_shared<std::vector<uint8_t>>(N);
  for (int64_t i = 0; i < N; ++i) {
    const T* xi = x.data().data() + i * D;
    T s = 0;
    for (int64_t j = 0; j < D; ++j) s += xi[j] * xi[j];
    T nr = std::sqrt(s);
    (*floored)[i] = nr < floor;
    nr = std::max(nr, floor);
    (*norms)[i] = nr;
    for (int64_t j = 0; j < D; ++j) out[i * D + j] = xi[j] / nr;
  }
  return make_op<T>("row_l2_normalize", x.shape(), std::move(out), {x}, [=](Node<T>& n) {
    auto& p = *n.parents[0];
    for (int64_t i = 0; i < N; ++i) {
      const T* y = n.value.data() + i * D;
      const T* dy = n.grad.data() + i * D;
      T* dx = p.grad.data() + i * D;
      const T nr = (*norms)[i];
      if ((*floored)[i]) {
        for (int64_t j = 0; j < D; ++j) dx[j] += dy[j] / nr;
      } else {
        T dot = 0;
        for (int64_t j = 0; j < D; ++j) dot += y[j] * dy[j];
        for (int64_t j = 0; j < D; ++j) dx[j] += (dy[j] - y[j] * dot) / nr;
      }
    }
  });
}

// M[i,k] = <a_i, b_k> / (||a_i|| ||b_k||), norms floored at `floor`.
template <typename T>
TensorT<T> cosine_similarity_matrix(const TensorT<T>& a, const TensorT<T>& b, T floor = T(1e-8)) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw DimensionError("cosine_similarity_matrix: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return matmul_nt(row_l2_normalize(a, floor), row_l2_normalize(b, floor));
}

// Squared Euclidean distances D[i,j] = ||a_i - b_j||^2.
template <typename T>
TensorT<T> pairwise_sqdist(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw DimensionError("pairwise_sqdist: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t M = a.dim(0), N = b.dim(0), D = a.dim(1);
  std::vector<T> out(M * N);
  for (int64_t i = 0; i < M; ++i) {
    const T* ai = a.data().data() + i * D;
    for (int64_t j = 0; j < N; ++j) {
      const T* bj = b.data().data() + j * D;
      T s = 0;
      for (int64_t k = 0; k < D; ++k) {
        T d = ai[k] - bj[k];
        s += d * d;
      }
      out[i * N + j] = s;
    }
  }
  return make_op<T>("pairwise_sqdist", {M, N}, std::move(out), {a, b}, [M, N, D](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    for (int64_t i = 0; i < M; ++i)
      for (int64_t j = 0; j < N; ++j) {
        const T g2 = T(2) * n.grad[i * N + j];
        if (g2 == T(0)) continue;
        const T* ai = pa.value.data() + i * D;
        const T* bj = pb.value.data() + j * D;
        for (int64_t k = 0; k < D; ++k) {
          T diff = ai[k] - bj[k];
          if (pa.requires_grad) pa.grad[i * D + k] += g2 * diff;
          if (pb.requires_grad) pb.grad[j * D + k] -= g2 * diff;
        }
      }
  });
}

// [B, X, Y] -> [B, Y, X]; swaps the last two axes of a 3-d tensor.
template <typename T>
TensorT<T> swap_last_axes(const TensorT<T>& x) {
  if (x.ndim() != 3) throw DimensionError("swap_last_axes expects a 3-d tensor");
  const int64_t B = x.dim(0), X = x.dim(1), Y = x.dim(2);
  std::vector<T> out(x.numel());
  for (int64_t b = 0; b < B; ++b) {
    const T* src = x.data().data() + b * X * Y;
    T* dst = out.data() + b * X * Y;
    for (int64_t i = 0; i < X; ++i)
      for (int64_t j = 0; j < Y; ++j) dst[j * X + i] = src[i * Y + j];
  }
  return make_op<T>("swap_last_axes", {B, Y, X}, std::move(out), {x}, [B, X, Y](Node<T>& n) {
    auto& p = *n.parents[0];
    for (int64_t b = 0; b < B; ++b) {
      const T* dy = n.grad.data() + b * X * Y;
      T* dx = p.grad.data() + b * X * Y;
      for (int64_t i = 0; i < X; ++i)
        for (int64_t j = 0; j < Y; ++j) dx[i * Y + j] += dy[j * X + i];
    }
  });
}

// Gradient reversal: identity forward, upstream gradient scaled by -lambda.
template <typename T>
TensorT<T> gradient_reversal(const TensorT<T>& x, T lambda) {
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_op<T>("gradient_reversal", x.shape(), std::move(out), {x}, [lambda](Node<T>& n) {
    auto& p = *n.parents[0];
    for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] -= lambda * n.grad[i];
  });
}

// out[b,d] = sum_t a[b,t] * s[b,t,d]  (attention-weighted pooling over time)
template <typename T>
TensorT<T> attention_combine(const TensorT<T>& s, const TensorT<T>& a) {
  if (s.ndim() != 3 || a.ndim() != 2 || s.dim(0) != a.dim(0) || s.dim(1) != a.dim(1))
    throw DimensionError("attention_combine: S " + shape_str(s.shape()) + " vs a " + shape_str(a.shape()));
  const int64_t B = s.dim(0), Tn = s.dim(1), D = s.dim(2);
  std::vector<T> out(B * D, T(0));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < Tn; ++t) {
      const T w = a.data()[b * Tn + t];
      const T* src = s.data().data() + (b * Tn + t) * D;
      T* dst = out.data() + b * D;
      for (int64_t d = 0; d < D; ++d) dst[d] += w * src[d];
    }
  return make_op<T>("attention_combine", {B, D}, std::move(out), {s, a}, [B, Tn, D](Node<T>& n) {
    auto& ps = *n.parents[0];
    auto& pa = *n.parents[1];
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t = 0; t < Tn; ++t) {
        const T w = pa.value[b * Tn + t];
        const T* dout = n.grad.data() + b * D;
        const T* sval = ps.value.data() + (b * Tn + t) * D;
        if (ps.requires_grad) {
          T* ds = ps.grad.data() + (b * Tn + t) * D;
          for (int64_t d = 0; d < D; ++d) ds[d] += w * dout[d];
        }
        if (pa.requires_grad) {
          T acc = 0;
          for (int64_t d = 0; d < D; ++d) acc += sval[d] * dout[d];
          pa.grad[b * Tn + t] += acc;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormStateT {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormStateT(int64_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
  int64_t channels() const { return static_cast<int64_t>(running_mean.size()); }
};

using BatchNormState = BatchNormStateT<float>;

// x: [B,C], [B,C,L] or [B,C,H,W]; normalizes per channel over batch and
// spatial axes. Train mode uses batch statistics (biased variance, floored by
// eps) and updates running stats with momentum; eval mode uses running stats.
template <typename T>
TensorT<T> batch_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      BatchNormStateT<T>& state, bool training) {
  if (x.ndim() < 2 || x.ndim() > 4) throw DimensionError("batch_norm expects 2-4d input");
  const int64_t B = x.dim(0), C = x.dim(1);
  int64_t S = 1;
  for (int i = 2; i < x.ndim(); ++i) S *= x.dim(i);
  if (gamma.numel() != C || beta.numel() != C || state.channels() != C)
    throw DimensionError("batch_norm: gamma/beta/state channel mismatch");
  if (training && B < 2) throw ConfigError("batch_norm: train mode needs batch size >= 2");

  const int64_t reduce = B * S;
  const T* px = x.data().data();
  std::vector<T> mean(C), var(C);
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      double m = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* src = px + (b * C + c) * S;
        for (int64_t s2 = 0; s2 < S; ++s2) m += src[s2];
      }
      m /= reduce;
      double v = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* src = px + (b * C + c) * S;
        for (int64_t s2 = 0; s2 < S; ++s2) {
          double d = src[s2] - m;
          v += d * d;
        }
      }
      v /= reduce;
      mean[c] = static_cast<T>(m);
      var[c] = static_cast<T>(v);
      state.running_mean[c] =
          (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mean[c];
      state.running_var[c] =
          (T(1) - state.momentum) * state.running_var[c] + state.momentum * var[c];
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }

  std::vector<T> inv_std(C);
  for (int64_t c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + state.eps);

  std::vector<T> out(x.numel());
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const T* src = px + (b * C + c) * S;
      T* dst = out.data() + (b * C + c) * S;
      const T g = gamma.data()[c], bt = beta.data()[c], mu = mean[c], is = inv_std[c];
      for (int64_t s2 = 0; s2 < S; ++s2) dst[s2] = g * (src[s2] - mu) * is + bt;
    }

  auto mean_sh = std::make_shared<std::vector<T>>(std::move(mean));
  auto inv_sh = std::make_shared<std::vector<T>>(std::move(inv_std));
  return make_op<T>("batch_norm", x.shape(), std::move(out), {x, gamma, beta},
                    [B, C, S, reduce, training, mean_sh, inv_sh](Node<T>& n) {
    auto& px2 = *n.parents[0];
    auto& pg = *n.parents[1];
    auto& pb = *n.parents[2];
    for (int64_t c = 0; c < C; ++c) {
      const T mu = (*mean_sh)[c], is = (*inv_sh)[c], g = pg.value[c];
      // accumulate per-channel sums of dy and dy*xhat
      double sum_dy = 0, sum_dy_xhat = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* xv = px2.value.data() + (b * C + c) * S;
        const T* dy = n.grad.data() + (b * C + c) * S;
        for (int64_t s2 = 0; s2 < S; ++s2) {
          const T xhat = (xv[s2] - mu) * is;
          sum_dy += dy[s2];
          sum_dy_xhat += dy[s2] * xhat;
        }
      }
      if (pg.requires_grad) pg.grad[c] += static_cast<T>(sum_dy_xhat);
      if (pb.requires_grad) pb.grad[c] += static_cast<T>(sum_dy);
      if (!px2.requires_grad) continue;
      if (training) {
        const T k1 = static_cast<T>(sum_dy / reduce);
        const T k2 = static_cast<T>(sum_dy_xhat / reduce);
        for (int64_t b = 0; b < B; ++b) {
          const T* xv = px2.value.data() + (b * C + c) * S;
          const T* dy = n.grad.data() + (b * C + c) * S;
          T* dx = px2.grad.data() + (b * C + c) * S;
          for (int64_t s2 = 0; s2 < S; ++s2) {
            const T xhat = (xv[s2] - mu) * is;
            dx[s2] += g * is * (dy[s2] - k1 - xhat * k2);
          }
        }
      } else {
        for (int64_t b = 0; b < B; ++b) {
          const T* dy = n.grad.data() + (b * C + c) * S;
          T* dx = px2.grad.data() + (b * C + c) * S;
          for (int64_t s2 = 0; s2 < S; ++s2) dx[s2] += g * is * dy[s2];
        }
      }
    }
  });
}

}  // namespace neuroswap
