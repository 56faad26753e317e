#pragma once

// Reverse-mode autodiff over dense tensors. Ops execute eagerly on
// construction; GraphContext::backward walks the recorded graph once in
// reverse topological order. Buffers are pooled and recycled across steps,
// so a fixed training-step graph reaches a steady allocation state.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "kdaudit/error.hpp"
#include "kdaudit/ops.hpp"
#include "kdaudit/rng.hpp"
#include "kdaudit/tensor.hpp"

namespace kdaudit {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using MapCM = Eigen::Map<const MatRM<T>>;
template <typename T>
using MapA = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using MapCA = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
class GraphContext;

template <typename T>
struct Node {
  std::vector<int64_t> shape;
  int64_t n = 0;
  T* value = nullptr;  // owned buffer or external view (leaves)
  T* grad = nullptr;   // allocated lazily during backward, zero-initialized
  bool requires_grad = false;
  std::array<Node*, 3> parents{};
  int n_parents = 0;
  uint8_t mark = 0;  // backward traversal state
  std::vector<T> value_buf;
  std::vector<T> grad_buf;

  virtual ~Node() = default;
  virtual void backward(GraphContext<T>& ctx) = 0;

  std::span<const T> values() const { return {value, static_cast<size_t>(n)}; }
  std::span<const T> grads() const { return {grad, static_cast<size_t>(n)}; }
};

template <typename T>
class GraphContext {
 public:
  // When false (inference), no node requires grad and backward is unavailable.
  bool grad_enabled = true;

  std::vector<T> alloc(int64_t n) {
    size_t best = pool_.size();
    for (size_t i = 0; i < pool_.size(); ++i) {
      if (static_cast<int64_t>(pool_[i].capacity()) >= n &&
          (best == pool_.size() || pool_[i].capacity() < pool_[best].capacity()))
        best = i;
    }
    if (best < pool_.size()) {
      std::vector<T> v = std::move(pool_[best]);
      pool_[best] = std::move(pool_.back());
      pool_.pop_back();
      v.resize(static_cast<size_t>(n));
      return v;
    }
    return std::vector<T>(static_cast<size_t>(n));
  }

  template <typename NodeT, typename... Args>
  NodeT* make(Args&&... args) {
    auto node = std::make_unique<NodeT>(std::forward<Args>(args)...);
    NodeT* raw = node.get();
    nodes_.push_back(std::move(node));
    return raw;
  }

  void init_owned(Node<T>* node, std::vector<int64_t> shape) {
    node->shape = std::move(shape);
    node->n = Tensor<T>::numel_of(node->shape);
    node->value_buf = alloc(node->n);
    node->value = node->value_buf.data();
  }

  void ensure_grad(Node<T>* node) {
    if (node->grad) return;
    node->grad_buf = alloc(node->n);
    std::fill(node->grad_buf.begin(), node->grad_buf.end(), T(0));
    node->grad = node->grad_buf.data();
  }

  // Releases every node and recycles buffers; leaves pointing at external
  // storage are not touched.
  void reset() {
    for (auto& node : nodes_) {
      if (!node->value_buf.empty()) pool_.push_back(std::move(node->value_buf));
      if (!node->grad_buf.empty()) pool_.push_back(std::move(node->grad_buf));
    }
    nodes_.clear();
  }

  // Reverse-mode sweep from a scalar loss. Visits each reachable node
  // exactly once; throws InternalError if the recorded graph has a cycle.
  void backward(Node<T>* loss) {
    if (!grad_enabled) throw InternalError("backward called on an inference context");
    if (loss->n != 1) throw std::invalid_argument("backward: loss must be scalar");
    for (auto& node : nodes_) node->mark = 0;

    std::vector<Node<T>*> order;
    order.reserve(nodes_.size());
    std::vector<std::pair<Node<T>*, int>> stack;
    stack.emplace_back(loss, 0);
    loss->mark = 1;
    while (!stack.empty()) {
      auto& [node, next_parent] = stack.back();
      if (next_parent < node->n_parents) {
        Node<T>* parent = node->parents[next_parent++];
        if (!parent->requires_grad) continue;
        if (parent->mark == 1) throw InternalError("backward: cycle detected");
        if (parent->mark == 0) {
          parent->mark = 1;
          stack.emplace_back(parent, 0);
        }
      } else {
        node->mark = 2;
        order.push_back(node);
        stack.pop_back();
      }
    }

    ensure_grad(loss);
    loss->grad[0] = T(1);
    last_backward_visits_ = 0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->grad == nullptr) continue;
      (*it)->backward(*this);
      ++last_backward_visits_;
    }
  }

  int64_t last_backward_visits() const { return last_backward_visits_; }
  size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<Node<T>>> nodes_;
  std::vector<std::vector<T>> pool_;
  int64_t last_backward_visits_ = 0;
};

// ---------------------------------------------------------------- leaves

template <typename T>
struct LeafNode final : Node<T> {
  void backward(GraphContext<T>&) override {}
};

// View over external storage (parameters, cached inputs). The storage must
// outlive the step; gradients land in the node's own pooled buffer.
template <typename T>
Node<T>* leaf(GraphContext<T>& ctx, std::vector<int64_t> shape, T* external,
              bool requires_grad) {
  auto* node = ctx.template make<LeafNode<T>>();
  node->shape = std::move(shape);
  node->n = Tensor<T>::numel_of(node->shape);
  node->value = external;
  node->requires_grad = requires_grad && ctx.grad_enabled;
  return node;
}

template <typename T>
Node<T>* leaf(GraphContext<T>& ctx, Tensor<T>& t, bool requires_grad) {
  return leaf(ctx, t.shape, t.data.data(), requires_grad);
}

// Constant with its own pooled buffer (e.g. dropout masks); fill after call.
template <typename T>
Node<T>* constant_owned(GraphContext<T>& ctx, std::vector<int64_t> shape) {
  auto* node = ctx.template make<LeafNode<T>>();
  ctx.init_owned(node, std::move(shape));
  node->requires_grad = false;
  return node;
}

namespace detail {

template <typename T>
void attach(Node<T>* node, std::initializer_list<Node<T>*> parents, GraphContext<T>& ctx) {
  node->n_parents = 0;
  node->requires_grad = false;
  for (Node<T>* p : parents) {
    node->parents[node->n_parents++] = p;
    node->requires_grad = node->requires_grad || p->requires_grad;
  }
  node->requires_grad = node->requires_grad && ctx.grad_enabled;
}

template <typename T>
void accumulate(GraphContext<T>& ctx, Node<T>* parent, std::span<const T> contribution) {
  if (!parent->requires_grad) return;
  ctx.ensure_grad(parent);
  MapA<T>(parent->grad, parent->n) +=
      MapCA<T>(contribution.data(), static_cast<int64_t>(contribution.size()));
}

}  // namespace detail

// ----------------------------------------------------------- elementwise

template <typename T>
struct AddNode final : Node<T> {
  void backward(GraphContext<T>& ctx) override {
    for (int i = 0; i < this->n_parents; ++i)
      detail::accumulate(ctx, this->parents[i], this->grads());
  }
};

template <typename T>
Node<T>* add(GraphContext<T>& ctx, Node<T>* a, Node<T>* b) {
  if (!same_shape(a->shape, b->shape)) throw std::invalid_argument("add: shape mismatch");
  auto* node = ctx.template make<AddNode<T>>();
  ctx.init_owned(node, a->shape);
  detail::attach(node, {a, b}, ctx);
  MapA<T>(node->value, node->n) = MapCA<T>(a->value, a->n) + MapCA<T>(b->value, b->n);
  return node;
}

template <typename T>
struct ScaleNode final : Node<T> {
  T factor{};
  void backward(GraphContext<T>& ctx) override {
    Node<T>* a = this->parents[0];
    if (!a->requires_grad) return;
    ctx.ensure_grad(a);
    MapA<T>(a->grad, a->n) += MapCA<T>(this->grad, this->n) * factor;
  }
};

template <typename T>
Node<T>* scale(GraphContext<T>& ctx, Node<T>* a, double factor) {
  auto* node = ctx.template make<ScaleNode<T>>();
  node->factor = static_cast<T>(factor);
  ctx.init_owned(node, a->shape);
  detail::attach(node, {a}, ctx);
  MapA<T>(node->value, node->n) = MapCA<T>(a->value, a->n) * node->factor;
  return node;
}

template <typename T>
struct HadamardNode final : Node<T> {
  void backward(GraphContext<T>& ctx) override {
    Node<T>* a = this->parents[0];
    Node<T>* b = this->parents[1];
    if (a->requires_grad) {
      ctx.ensure_grad(a);
      MapA<T>(a->grad, a->n) += MapCA<T>(this->grad, this->n) * MapCA<T>(b->value, b->n);
    }
    if (b->requires_grad) {
      ctx.ensure_grad(b);
      MapA<T>(b->grad, b->n) += MapCA<T>(this->grad, this->n) * MapCA<T>(a->value, a->n);
    }
  }
};

template <typename T>
Node<T>* hadamard(GraphContext<T>& ctx, Node<T>* a, Node<T>* b) {
  if (!same_shape(a->shape, b->shape)) throw std::invalid_argument("hadamard: shape mismatch");
  auto* node = ctx.template make<HadamardNode<T>>();
  ctx.init_owned(node, a->shape);
  detail::attach(node, {a, b}, ctx);
  MapA<T>(node->value, node->n) = MapCA<T>(a->value, a->n) * MapCA<T>(b->value, b->n);
  return node;
}

template <typename T>
struct ReluNode final : Node<T> {
  void backward(GraphContext<T>& ctx) override {
    Node<T>* a = this->parents[0];
    if (!a->requires_grad) return;
    ctx.ensure_grad(a);
    for (int64_t i = 0; i < this->n; ++i)
      if (a->value[i] > T(0)) a->grad[i] += this->grad[i];
  }
};

template <typename T>
Node<T>* relu(GraphContext<T>& ctx, Node<T>* a) {
  auto* node = ctx.template make<ReluNode<T>>();
  ctx.init_owned(node, a->shape);
  detail::attach(node, {a}, ctx);
  MapA<T>(node->value, node->n) = MapCA<T>(a->value, a->n).max(T(0));
  return node;
}

// GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
template <typename T>
struct GeluNode final : Node<T> {
  static constexpr double kC = 0.7978845608028653728;  // sqrt(2/pi)
  static constexpr double kA = 0.044715;
  void backward(GraphContext<T>& ctx) override {
    Node<T>* a = this->parents[0];
    if (!a->requires_grad) return;
    ctx.ensure_grad(a);
    const T c = static_cast<T>(kC), ka = static_cast<T>(kA);
    MapCA<T> x(a->value, a->n);
    auto u = c * (x + ka * x.cube());
    auto t = u.tanh();
    auto dudx = c * (T(1) + T(3) * ka * x.square());
    MapA<T>(a->grad, a->n) +=
        MapCA<T>(this->grad, this->n) *
        (T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t.square()) * dudx);
  }
};

template <typename T>
Node<T>* gelu(GraphContext<T>& ctx, Node<T>* a) {
  auto* node = ctx.template make<GeluNode<T>>();
  ctx.init_owned(node, a->shape);
  detail::attach(node, {a}, ctx);
  const T c = static_cast<T>(GeluNode<T>::kC), ka = static_cast<T>(GeluNode<T>::kA);
  MapCA<T> x(a->value, a->n);
  MapA<T>(node->value, node->n) = T(0.5) * x * (T(1) + (c * (x + ka * x.cube())).tanh());
  return node;
}

// ---------------------------------------------------------------- linear

// Col-major view of a row-major [r,c] buffer, i.e. its transpose, without
// copying; Eigen's GEMM handles mixed storage orders natively and this is
// measurably faster than .transpose() on row-major maps.
template <typename T>
using MapT = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>>;

template <typename T>
struct MatmulNode final : Node<T> {
  bool trans_b = false;
  void backward(GraphContext<T>& ctx) override {
    Node<T>* a = this->parents[0];
    Node<T>* b = this->parents[1];
    const int64_t m = this->shape[0], n2 = this->shape[1];
    const int64_t k = a->shape[1];
    MapCM<T> dY(this->grad, m, n2);
    if (a->requires_grad) {
      ctx.ensure_grad(a);
      MapM<T> dA(a->grad, m, k);
      if (!trans_b)
        dA.noalias() += dY * MapT<T>(b->value, n2, k);  // dY * B^T
      else
        dA.noalias() += dY * MapCM<T>(b->value, n2, k);
    }
    if (b->requires_grad) {
      ctx.ensure_grad(b);
      if (!trans_b) {
        MapM<T> dB(b->grad, k, n2);
        dB.noalias() += MapT<T>(a->value, k, m) * dY;  // A^T * dY
      } else {
        MapM<T> dB(b->grad, n2, k);
        dB.noalias() += MapT<T>(this->grad, n2, m) * MapCM<T>(a->value, m, k);  // dY^T * A
      }
    }
  }
};

// a[m,k] * b[k,n], or a[m,k] * b[n,k]^T when trans_b.
template <typename T>
Node<T>* matmul(GraphContext<T>& ctx, Node<T>* a, Node<T>* b, bool trans_b = false) {
  if (a->shape.size() != 2 || b->shape.size() != 2)
    throw std::invalid_argument("matmul: expects 2-D operands");
  const int64_t m = a->shape[0], k = a->shape[1];
  const int64_t n2 = trans_b ? b->shape[0] : b->shape[1];
  const int64_t kb = trans_b ? b->shape[1] : b->shape[0];
  if (k != kb) throw std::invalid_argument("matmul: inner dimensions differ");
  auto* node = ctx.template make<MatmulNode<T>>();
  node->trans_b = trans_b;
  ctx.init_owned(node, {m, n2});
  detail::attach(node, {a, b}, ctx);
  MapM<T> C(node->value, m, n2);
  MapCM<T> A(a->value, m, k);
  if (!trans_b)
    C.noalias() = A * MapCM<T>(b->value, k, n2);
  else
    C.noalias() = A * MapT<T>(b->value, k, n2);  // A * B^T via the col-major view
  return node;
}

template <typename T>
struct AddRowvecNode final : Node<T> {
  void backward(GraphContext<T>& ctx) override {
    Node<T>* x = this->parents[0];
    Node<T>* b = this->parents[1];
    const int64_t m = this->shape[0], n2 = this->shape[1];
    if (x->requires_grad) detail::accumulate(ctx, x, this->grads());
    if (b->requires_grad) {
      ctx.ensure_grad(b);
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->grad, n2) +=
          MapCM<T>(this->grad, m, n2).colwise().sum();
    }
  }
};

template <typename T>
Node<T>* add_rowvec(GraphContext<T>& ctx, Node<T>* x, Node<T>* b) {
  if (x->shape.size() != 2 || b->n != x->shape[1])
    throw std::invalid_argument("add_rowvec: shape mismatch");
  auto* node = ctx.template make<AddRowvecNode<T>>();
  ctx.init_owned(node, x->shape);
  detail::attach(node, {x, b}, ctx);
  const int64_t m = x->shape[0], n2 = x->shape[1];
  MapM<T>(node->value, m, n2) =
      MapCM<T>(x->value, m, n2).rowwise() +
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->value, n2);
  return node;
}

template <typename T>
Node<T>* linear(GraphContext<T>& ctx, Node<T>* x, Node<T>* w, Node<T>* b) {
  return add_rowvec(ctx, matmul(ctx, x, w), b);
}

// ------------------------------------------------------------- layernorm

template <typename T>
struct LayerNormNode final : Node<T> {
  std::vector<T> mean, rstd;
  void backward(GraphContext<T>& ctx) override {
    Node<T>* x = this->parents[0];
    Node<T>* g = this->parents[1];
    Node<T>* b = this->parents[2];
    const int64_t m = this->shape[0], n2 = this->shape[1];
    const bool need_x = x->requires_grad;
    if (need_x) ctx.ensure_grad(x);
    if (g->requires_grad) ctx.ensure_grad(g);
    if (b->requires_grad) ctx.ensure_grad(b);
    for (int64_t i = 0; i < m; ++i) {
      const T* xr = x->value + i * n2;
      const T* dy = this->grad + i * n2;
      MapCA<T> xv(xr, n2), dyv(dy, n2);
      auto xhat = (xv - mean[i]) * rstd[i];
      if (g->requires_grad) MapA<T>(g->grad, n2) += dyv * xhat;
      if (b->requires_grad) MapA<T>(b->grad, n2) += dyv;
      if (need_x) {
        MapCA<T> gv(g->value, n2);
        auto dxhat = dyv * gv;
        const T mean_dxhat = dxhat.sum() / static_cast<T>(n2);
        const T mean_dxhat_xhat = (dxhat * xhat).sum() / static_cast<T>(n2);
        MapA<T>(x->grad + i * n2, n2) +=
            rstd[i] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
      }
    }
  }
};

template <typename T>
Node<T>* layernorm(GraphContext<T>& ctx, Node<T>* x, Node<T>* gain, Node<T>* bias,
                   double eps = 1e-5) {
  if (x->shape.size() != 2 || gain->n != x->shape[1] || bias->n != x->shape[1])
    throw std::invalid_argument("layernorm: shape mismatch");
  auto* node = ctx.template make<LayerNormNode<T>>();
  ctx.init_owned(node, x->shape);
  detail::attach(node, {x, gain, bias}, ctx);
  const int64_t m = x->shape[0], n2 = x->shape[1];
  node->mean.resize(m);
  node->rstd.resize(m);
  MapCA<T> gv(gain->value, n2), bv(bias->value, n2);
  for (int64_t i = 0; i < m; ++i) {
    MapCA<T> xv(x->value + i * n2, n2);
    const T mu = xv.sum() / static_cast<T>(n2);
    const T var = (xv - mu).square().sum() / static_cast<T>(n2);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
    node->mean[i] = mu;
    node->rstd[i] = rstd;
    MapA<T>(node->value + i * n2, n2) = ((xv - mu) * rstd) * gv + bv;
  }
  return node;
}

// ----------------------------------------------------- embeddings and ids

template <typename T>
struct EmbeddingNode final : Node<T> {
  std::vector<int32_t> ids;
  void backward(GraphContext<T>& ctx) override {
    Node<T>* w = this->parents[0];
    if (!w->requires_grad) return;
    ctx.ensure_grad(w);
    const int64_t d = this->shape[1];
    for (size_t i = 0; i < ids.size(); ++i)
      MapA<T>(w->grad + int64_t(ids[i]) * d, d) +=
          MapCA<T>(this->grad + int64_t(i) * d, d);
  }
};

template <typename T>
Node<T>* embedding(GraphContext<T>& ctx, Node<T>* table, std::span<const int32_t> ids) {
  if (table->shape.size() != 2) throw std::invalid_argument("embedding: table must be 2-D");
  const int64_t vocab = table->shape[0], d = table->shape[1];
  for (int32_t id : ids)
    if (id < 0 || id >= vocab) throw std::invalid_argument("embedding: token id out of range");
  auto* node = ctx.template make<EmbeddingNode<T>>();
  node->ids.assign(ids.begin(), ids.end());
  ctx.init_owned(node, {static_cast<int64_t>(ids.size()), d});
  detail::attach(node, {table}, ctx);
  for (size_t i = 0; i < ids.size(); ++i)
    MapA<T>(node->value + int64_t(i) * d, d) =
        MapCA<T>(table->value + int64_t(ids[i]) * d, d);
  return node;
}

// x[(b,t),:] + P[t,:] for a [batch*T, d] activation and [maxT, d] table.
template <typename T>
struct AddPositionNode final : Node<T> {
  int64_t batch = 0, seq = 0;
  void backward(GraphContext<T>& ctx) override {
    Node<T>* x = this->parents[0];
    Node<T>* p = this->parents[1];
    const int64_t d = this->shape[1];
    if (x->requires_grad) detail::accumulate(ctx, x, this->grads());
    if (p->requires_grad) {
      ctx.ensure_grad(p);
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t t = 0; t < seq; ++t)
          MapA<T>(p->grad + t * d, d) += MapCA<T>(this->grad + (b * seq + t) * d, d);
    }
  }
};

template <typename T>
Node<T>* add_position(GraphContext<T>& ctx, Node<T>* x, Node<T>* pos, int64_t batch,
                      int64_t seq) {
  if (x->shape.size() != 2 || x->shape[0] != batch * seq || pos->shape[1] != x->shape[1] ||
      pos->shape[0] < seq)
    throw std::invalid_argument("add_position: shape mismatch");
  auto* node = ctx.template make<AddPositionNode<T>>();
  node->batch = batch;
  node->seq = seq;
  ctx.init_owned(node, x->shape);
  detail::attach(node, {x, pos}, ctx);
  const int64_t d = x->shape[1];
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t t = 0; t < seq; ++t)
      MapA<T>(node->value + (b * seq + t) * d, d) =
          MapCA<T>(x->value + (b * seq + t) * d, d) + MapCA<T>(pos->value + t * d, d);
  return node;
}

// ------------------------------------------------------ attention shaping

template <typename T>
struct SliceColsNode final : Node<T> {
  int64_t c0 = 0;
  void backward(GraphContext<T>& ctx) override {
    Node<T>* x = this->parents[0];
    if (!x->requires_grad) return;
    ctx.ensure_grad(x);
    const int64_t m = this->shape[0], w = this->shape[1], stride = x->shape[1];
    for (int64_t i = 0; i < m; ++i)
      MapA<T>(x->grad + i * stride + c0, w) += MapCA<T>(this->grad + i * w, w);
  }
};

template <typename T>
Node<T>* slice_cols(GraphContext<T>& ctx, Node<T>* x, int64_t c0, int64_t c1) {
  if (x->shape.size() != 2 || c0 < 0 || c1 > x->shape[1] || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range");
  auto* node = ctx.template make<SliceColsNode<T>>();
  node->c0 = c0;
  ctx.init_owned(node, {x->shape[0], c1 - c0});
  detail::attach(node, {x}, ctx);
  const int64_t m = x->shape[0], w = c1 - c0, stride = x->shape[1];
  for (int64_t i = 0; i < m; ++i)
    MapA<T>(node->value + i * w, w) = MapCA<T>(x->value + i * stride + c0, w);
  return node;
}

// [batch*T, d] -> [batch, heads, T, d/heads]
template <typename T>
struct ToHeadsNode final : Node<T> {
  void backward(GraphContext<T>& ctx) override {
    Node<T>* x = this->parents[0];
    if (!x->requires_grad) return;
    ctx.ensure_grad(x);
    const int64_t B = this->shape[0], H = this->shape[1], S = this->shape[2],
                  dh = this->shape[3];
    const int64_t d = H * dh;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t t = 0; t < S; ++t)
          MapA<T>(x->grad + (b * S + t) * d + h * dh, dh) +=
              MapCA<T>(this->grad + (((b * H + h) * S) + t) * dh, dh);
  }
};

template <typename T>
Node<T>* to_heads(GraphContext<T>& ctx, Node<T>* x, int64_t batch, int64_t seq,
                  int64_t heads) {
  const int64_t d = x->shape[1];
  if (x->shape.size() != 2 || x->shape[0] != batch * seq || d % heads != 0)
    throw std::invalid_argument("to_heads: shape mismatch");
  const int64_t dh = d / heads;
  auto* node = ctx.template make<ToHeadsNode<T>>();
  ctx.init_owned(node, {batch, heads, seq, dh});
  detail::attach(node, {x}, ctx);
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t t = 0; t < seq; ++t)
        MapA<T>(node->value + (((b * heads + h) * seq) + t) * dh, dh) =
            MapCA<T>(x->value + (b * seq + t) * d + h * dh, dh);
  return node;
}

// [batch, heads, T, dh] -> [batch*T, heads*dh]
template <typename T>
struct FromHeadsNode final : Node<T> {
  void backward(GraphContext<T>& ctx) override {
    Node<T>* x = this->parents[0];
    if (!x->requires_grad) return;
    ctx.ensure_grad(x);
    const int64_t B = x->shape[0], H = x->shape[1], S = x->shape[2], dh = x->shape[3];
    const int64_t d = H * dh;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t t = 0; t < S; ++t)
          MapA<T>(x->grad + (((b * H + h) * S) + t) * dh, dh) +=
              MapCA<T>(this->grad + (b * S + t) * d + h * dh, dh);
  }
};

template <typename T>
Node<T>* from_heads(GraphContext<T>& ctx, Node<T>* x) {
  if (x->shape.size() != 4) throw std::invalid_argument("from_heads: expects 4-D input");
  const int64_t B = x->shape[0], H = x->shape[1], S = x->shape[2], dh = x->shape[3];
  auto* node = ctx.template make<FromHeadsNode<T>>();
  ctx.init_owned(node, {B * S, H * dh});
  detail::attach(node, {x}, ctx);
  const int64_t d = H * dh;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t t = 0; t < S; ++t)
        MapA<T>(node->value + (b * S + t) * d + h * dh, dh) =
            MapCA<T>(x->value + (((b * H + h) * S) + t) * dh, dh);
  return node;
}

// Batched a[..., m, k] * b[..., k, n] (or b[..., n, k]^T) over equal leading dims.
template <typename T>
struct BatchedMatmulNode final : Node<T> {
  bool trans_b = false;
  int64_t batches = 0, m = 0, k = 0, nn = 0;
  void backward(GraphContext<T>& ctx) override {
    Node<T>* a = this->parents[0];
    Node<T>* b = this->parents[1];
    if (a->requires_grad) ctx.ensure_grad(a);
    if (b->requires_grad) ctx.ensure_grad(b);
    const int64_t sa = m * k, sb = k * nn, sc = m * nn;
    for (int64_t i = 0; i < batches; ++i) {
      MapCM<T> dY(this->grad + i * sc, m, nn);
      if (a->requires_grad) {
        MapM<T> dA(a->grad + i * sa, m, k);
        if (!trans_b)
          dA.noalias() += dY * MapT<T>(b->value + i * sb, nn, k);
        else
          dA.noalias() += dY * MapCM<T>(b->value + i * sb, nn, k);
      }
      if (b->requires_grad) {
        if (!trans_b) {
          MapM<T> dB(b->grad + i * sb, k, nn);
          dB.noalias() += MapT<T>(a->value + i * sa, k, m) * dY;
        } else {
          MapM<T> dB(b->grad + i * sb, nn, k);
          dB.noalias() +=
              MapT<T>(this->grad + i * sc, nn, m) * MapCM<T>(a->value + i * sa, m, k);
        }
      }
    }
  }
};

template <typename T>
Node<T>* batched_matmul(GraphContext<T>& ctx, Node<T>* a, Node<T>* b, bool trans_b = false) {
  if (a->shape.size() != b->shape.size() || a->shape.size() < 3)
    throw std::invalid_argument("batched_matmul: rank mismatch");
  const size_t r = a->shape.size();
  int64_t batches = 1;
  for (size_t i = 0; i + 2 < r; ++i) {
    if (a->shape[i] != b->shape[i])
      throw std::invalid_argument("batched_matmul: leading dims differ");
    batches *= a->shape[i];
  }
  const int64_t m = a->shape[r - 2], k = a->shape[r - 1];
  const int64_t nn = trans_b ? b->shape[r - 2] : b->shape[r - 1];
  const int64_t kb = trans_b ? b->shape[r - 1] : b->shape[r - 2];
  if (k != kb) throw std::invalid_argument("batched_matmul: inner dims differ");
  auto* node = ctx.template make<BatchedMatmulNode<T>>();
  node->trans_b = trans_b;
  node->batches = batches;
  node->m = m;
  node->k = k;
  node->nn = nn;
  std::vector<int64_t> out_shape(a->shape.begin(), a->shape.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(nn);
  ctx.init_owned(node, std::move(out_shape));
  detail::attach(node, {a, b}, ctx);
  const int64_t sa = m * k, sb = k * nn, sc = m * nn;
  for (int64_t i = 0; i < batches; ++i) {
    MapM<T> C(node->value + i * sc, m, nn);
    MapCM<T> A(a->value + i * sa, m, k);
    if (!trans_b)
      C.noalias() = A * MapCM<T>(b->value + i * sb, k, nn);
    else
      C.noalias() = A * MapT<T>(b->value + i * sb, k, nn);
  }
  return node;
}

// Row softmax over the last axis of [batch, heads, T, T] scores, entries
// with j > i masked out (causal attention).
template <typename T>
struct CausalSoftmaxNode final : Node<T> {
  void backward(GraphContext<T>& ctx) override {
    Node<T>* s = this->parents[0];
    if (!s->requires_grad) return;
    ctx.ensure_grad(s);
    const int64_t S = this->shape[2];
    const int64_t rows = this->n / S;
    // Full-width arithmetic: masked entries hold p = 0, so they contribute
    // nothing and receive zero gradient.
    for (int64_t r = 0; r < rows; ++r) {
      MapCA<T> pv(this->value + r * S, S), dpv(this->grad + r * S, S);
      const T dot = (pv * dpv).sum();
      MapA<T>(s->grad + r * S, S) += pv * (dpv - dot);
    }
  }
};

template <typename T>
Node<T>* causal_softmax(GraphContext<T>& ctx, Node<T>* scores) {
  if (scores->shape.size() != 4 || scores->shape[2] != scores->shape[3])
    throw std::invalid_argument("causal_softmax: expects [B,H,T,T] scores");
  auto* node = ctx.template make<CausalSoftmaxNode<T>>();
  ctx.init_owned(node, scores->shape);
  detail::attach(node, {scores}, ctx);
  const int64_t S = scores->shape[2];
  const int64_t rows = node->n / S;
  // exp over the full row with masked entries forced to -inf; exp(-inf) = 0,
  // so the masked tail normalizes away and the whole row stays vectorized.
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t i = r % S;  // row index within the block decides the mask
    const T* x = scores->value + r * S;
    T* y = node->value + r * S;
    const T mx = MapCA<T>(x, i + 1).maxCoeff();
    MapA<T> yv(y, S);
    yv = MapCA<T>(x, S) - mx;
    std::fill(y + i + 1, y + S, neg_inf);
    yv = yv.exp();
    yv /= yv.sum();
  }
  return node;
}

// --------------------------------------------------------------- losses

template <typename T>
struct LogSoftmaxNode final : Node<T> {
  void backward(GraphContext<T>& ctx) override {
    Node<T>* x = this->parents[0];
    if (!x->requires_grad) return;
    ctx.ensure_grad(x);
    const int64_t m = this->shape[0], k = this->shape[1];
    for (int64_t i = 0; i < m; ++i) {
      MapCA<T> y(this->value + i * k, k), dy(this->grad + i * k, k);
      const T gsum = dy.sum();
      MapA<T>(x->grad + i * k, k) += dy - y.exp() * gsum;
    }
  }
};

template <typename T>
Node<T>* log_softmax_rows(GraphContext<T>& ctx, Node<T>* x) {
  if (x->shape.size() != 2) throw std::invalid_argument("log_softmax_rows: expects 2-D");
  auto* node = ctx.template make<LogSoftmaxNode<T>>();
  ctx.init_owned(node, x->shape);
  detail::attach(node, {x}, ctx);
  const int64_t m = x->shape[0], k = x->shape[1];
  for (int64_t i = 0; i < m; ++i) {
    MapCA<T> xv(x->value + i * k, k);
    const T mx = xv.maxCoeff();
    const T lse = mx + std::log((xv - mx).exp().sum());
    MapA<T>(node->value + i * k, k) = xv - lse;
  }
  return node;
}

// -(1/m) sum_i logp[i, y_i]
template <typename T>
struct NllNode final : Node<T> {
  std::vector<int32_t> ids;
  void backward(GraphContext<T>& ctx) override {
    Node<T>* logp = this->parents[0];
    if (!logp->requires_grad) return;
    ctx.ensure_grad(logp);
    const int64_t k = logp->shape[1];
    const T g = this->grad[0] / static_cast<T>(ids.size());
    for (size_t i = 0; i < ids.size(); ++i)
      logp->grad[int64_t(i) * k + ids[i]] -= g;
  }
};

template <typename T>
Node<T>* nll_from_logprobs(GraphContext<T>& ctx, Node<T>* logp, std::span<const int32_t> ids) {
  if (logp->shape.size() != 2 || logp->shape[0] != static_cast<int64_t>(ids.size()))
    throw std::invalid_argument("nll_from_logprobs: shape mismatch");
  const int64_t k = logp->shape[1];
  for (int32_t id : ids)
    if (id < 0 || id >= k) throw std::invalid_argument("nll_from_logprobs: label out of range");
  auto* node = ctx.template make<NllNode<T>>();
  node->ids.assign(ids.begin(), ids.end());
  ctx.init_owned(node, {1});
  detail::attach(node, {logp}, ctx);
  double acc = 0.0;
  for (size_t i = 0; i < ids.size(); ++i) acc -= double(logp->value[int64_t(i) * k + ids[i]]);
  node->value[0] = static_cast<T>(acc / double(ids.size()));
  return node;
}

// -(1/m) sum_i sum_k target[i,k] * logp[i,k]  (cross-entropy vs. soft
// targets). The target is a constant node, so the teacher side is detached.
template <typename T>
struct SoftCrossEntropyNode final : Node<T> {
  void backward(GraphContext<T>& ctx) override {
    Node<T>* logp = this->parents[0];
    Node<T>* target = this->parents[1];
    if (!logp->requires_grad) return;
    ctx.ensure_grad(logp);
    const int64_t m = logp->shape[0];
    const T g = this->grad[0] / static_cast<T>(m);
    MapA<T>(logp->grad, logp->n) -= g * MapCA<T>(target->value, logp->n);
  }
};

template <typename T>
Node<T>* soft_cross_entropy(GraphContext<T>& ctx, Node<T>* logp, Node<T>* target) {
  if (!same_shape(logp->shape, target->shape))
    throw std::invalid_argument("soft_cross_entropy: shape mismatch");
  auto* node = ctx.template make<SoftCrossEntropyNode<T>>();
  ctx.init_owned(node, {1});
  detail::attach(node, {logp, target}, ctx);
  double acc = 0.0;
  for (int64_t i = 0; i < logp->n; ++i) acc -= double(target->value[i]) * double(logp->value[i]);
  node->value[0] = static_cast<T>(acc / double(logp->shape[0]));
  return node;
}

// (1/m) sum_i KL(target_i || softmax row i) given the student's
// log-probabilities and a constant target probability matrix.
template <typename T>
struct KlToTargetNode final : Node<T> {
  void backward(GraphContext<T>& ctx) override {
    Node<T>* logp = this->parents[0];
    Node<T>* target = this->parents[1];
    if (!logp->requires_grad) return;
    ctx.ensure_grad(logp);
    const int64_t m = logp->shape[0];
    const T g = this->grad[0] / static_cast<T>(m);
    MapA<T>(logp->grad, logp->n) -= g * MapCA<T>(target->value, logp->n);
  }
};

template <typename T>
Node<T>* kl_to_target(GraphContext<T>& ctx, Node<T>* logp, Node<T>* target) {
  if (!same_shape(logp->shape, target->shape))
    throw std::invalid_argument("kl_to_target: shape mismatch");
  auto* node = ctx.template make<KlToTargetNode<T>>();
  ctx.init_owned(node, {1});
  detail::attach(node, {logp, target}, ctx);
  double acc = 0.0;
  for (int64_t i = 0; i < logp->n; ++i) {
    const double t = double(target->value[i]);
    if (t <= 0.0) continue;
    acc += t * (std::log(std::max(t, kProbFloor)) - double(logp->value[i]));
  }
  node->value[0] = static_cast<T>(acc / double(logp->shape[0]));
  return node;
}

// mean((x - target)^2) against a detached (constant-node) target.
template <typename T>
struct MseNode final : Node<T> {
  void backward(GraphContext<T>& ctx) override {
    Node<T>* x = this->parents[0];
    Node<T>* target = this->parents[1];
    if (!x->requires_grad) return;
    ctx.ensure_grad(x);
    const T g = this->grad[0] * T(2) / static_cast<T>(x->n);
    MapA<T>(x->grad, x->n) +=
        g * (MapCA<T>(x->value, x->n) - MapCA<T>(target->value, x->n));
  }
};

template <typename T>
Node<T>* mse_to_target(GraphContext<T>& ctx, Node<T>* x, Node<T>* target) {
  if (!same_shape(x->shape, target->shape))
    throw std::invalid_argument("mse_to_target: shape mismatch");
  auto* node = ctx.template make<MseNode<T>>();
  ctx.init_owned(node, {1});
  detail::attach(node, {x, target}, ctx);
  double acc = 0.0;
  for (int64_t i = 0; i < x->n; ++i) {
    const double diff = double(x->value[i]) - double(target->value[i]);
    acc += diff * diff;
  }
  node->value[0] = static_cast<T>(acc / double(x->n));
  return node;
}

// -------------------------------------------------------------- dropout

// Inverted dropout: kept entries scaled by 1/(1-rate). Identity when the
// context is in inference mode or rate == 0. Each element consumes one
// 32-bit draw (two elements per generator step).
template <typename T>
Node<T>* dropout(GraphContext<T>& ctx, Node<T>* x, double rate, RngStream& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
  if (!ctx.grad_enabled || rate == 0.0) return x;
  Node<T>* mask = constant_owned(ctx, x->shape);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  const auto threshold = static_cast<uint32_t>(rate * 4294967296.0);
  int64_t i = 0;
  for (; i + 1 < mask->n; i += 2) {
    const uint64_t r = rng.next_u64();
    mask->value[i] = static_cast<uint32_t>(r) < threshold ? T(0) : keep_scale;
    mask->value[i + 1] = static_cast<uint32_t>(r >> 32) < threshold ? T(0) : keep_scale;
  }
  if (i < mask->n)
    mask->value[i] = static_cast<uint32_t>(rng.next_u64()) < threshold ? T(0) : keep_scale;
  return hadamard(ctx, x, mask);
}

}  // namespace kdaudit
