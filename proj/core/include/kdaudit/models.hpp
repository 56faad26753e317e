#pragma once

// Two model families sharing one parameter registry: an MLP classifier for
// the synthetic-blob experiments and a small decoder-only character
// transformer. Forward passes build autodiff graphs; inference contexts
// (grad_enabled = false) skip gradients and dropout.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kdaudit/graph.hpp"
#include "kdaudit/rng.hpp"
#include "kdaudit/tensor.hpp"

namespace kdaudit {

inline constexpr double kInitStd = 0.02;  // GPT-style init for all weight matrices

struct MlpConfig {
  int64_t input_dim = 16;
  std::vector<int64_t> hidden = {64, 64};
  int64_t classes = 10;

  void validate() const {
    if (input_dim < 1) throw std::invalid_argument("MlpConfig: input_dim < 1");
    if (hidden.empty()) throw std::invalid_argument("MlpConfig: need at least one hidden layer");
    for (int64_t h : hidden)
      if (h < 1) throw std::invalid_argument("MlpConfig: empty hidden layer");
    if (classes < 2) throw std::invalid_argument("MlpConfig: need K >= 2 classes");
  }
};

struct GptConfig {
  int64_t vocab = 65;
  int64_t embed_dim = 128;
  int64_t layers = 4;
  int64_t heads = 4;
  int64_t block_size = 128;
  double dropout = 0.1;
  double width_fraction = 1.0;  // applied to embed_dim, rounded down to a multiple of heads

  // Width-scaled embedding dim: floor(d*w) rounded down to a multiple of
  // heads, never below one dim per head.
  int64_t effective_dim() const {
    auto scaled = static_cast<int64_t>(std::floor(double(embed_dim) * width_fraction));
    scaled = (scaled / heads) * heads;
    return std::max<int64_t>(scaled, heads);
  }

  void validate() const {
    if (vocab < 1) throw std::invalid_argument("GptConfig: empty vocab");
    if (layers < 1 || heads < 1) throw std::invalid_argument("GptConfig: layers/heads < 1");
    if (block_size < 2) throw std::invalid_argument("GptConfig: block_size must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0)
      throw std::invalid_argument("GptConfig: dropout must be in [0,1)");
    if (width_fraction <= 0.0 || width_fraction > 1.0)
      throw std::invalid_argument("GptConfig: width_fraction must be in (0,1]");
    if (effective_dim() % heads != 0)
      throw std::invalid_argument("GptConfig: embed dim not divisible by heads");
  }
};

// Named parameter tensors in a fixed registration order (the checkpoint and
// optimizer order).
template <typename T>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  Tensor<T>& add(std::string name, std::vector<int64_t> shape) {
    names.push_back(std::move(name));
    tensors.emplace_back(std::move(shape));
    return tensors.back();
  }
  size_t index_of(std::string_view name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw std::invalid_argument("ParamSet: unknown parameter " + std::string(name));
  }
  Tensor<T>& at(std::string_view name) { return tensors[index_of(name)]; }
  const Tensor<T>& at(std::string_view name) const { return tensors[index_of(name)]; }
  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    out.names = names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
};

// Per-step binding of parameters to graph leaves, in registry order.
template <typename T>
struct BoundParams {
  ParamSet<T>* set = nullptr;
  std::vector<Node<T>*> leaves;

  static BoundParams bind(GraphContext<T>& ctx, ParamSet<T>& params, bool requires_grad) {
    BoundParams bp;
    bp.set = &params;
    bp.leaves.reserve(params.tensors.size());
    for (auto& t : params.tensors) bp.leaves.push_back(leaf(ctx, t, requires_grad));
    return bp;
  }
  Node<T>* node(std::string_view name) const { return leaves[set->index_of(name)]; }
};

// ------------------------------------------------------------------- MLP

template <typename T>
ParamSet<T> mlp_param_shapes(const MlpConfig& cfg) {
  cfg.validate();
  ParamSet<T> ps;
  int64_t in = cfg.input_dim;
  for (size_t i = 0; i < cfg.hidden.size(); ++i) {
    ps.add("fc" + std::to_string(i) + ".w", {in, cfg.hidden[i]});
    ps.add("fc" + std::to_string(i) + ".b", {cfg.hidden[i]});
    in = cfg.hidden[i];
  }
  ps.add("head.w", {in, cfg.classes});
  ps.add("head.b", {cfg.classes});
  return ps;
}

inline int64_t mlp_param_count(const MlpConfig& cfg) {
  int64_t n = 0, in = cfg.input_dim;
  for (int64_t h : cfg.hidden) {
    n += in * h + h;
    in = h;
  }
  return n + in * cfg.classes + cfg.classes;
}

// Logits for a [N, input_dim] batch; when feature_tap >= 0, *tap_out is the
// post-activation output of that hidden layer.
template <typename T>
Node<T>* mlp_forward(GraphContext<T>& ctx, BoundParams<T>& bp, const MlpConfig& cfg,
                     Node<T>* input, int feature_tap = -1, Node<T>** tap_out = nullptr) {
  if (input->shape.size() != 2 || input->shape[1] != cfg.input_dim)
    throw std::invalid_argument("mlp_forward: batch shape does not match config");
  if (feature_tap >= static_cast<int>(cfg.hidden.size()))
    throw std::invalid_argument("mlp_forward: feature tap beyond last hidden layer");
  Node<T>* x = input;
  for (size_t i = 0; i < cfg.hidden.size(); ++i) {
    const std::string p = "fc" + std::to_string(i);
    x = relu(ctx, linear(ctx, x, bp.node(p + ".w"), bp.node(p + ".b")));
    if (static_cast<int>(i) == feature_tap && tap_out) *tap_out = x;
  }
  return linear(ctx, x, bp.node("head.w"), bp.node("head.b"));
}

// ------------------------------------------------------------------- GPT

template <typename T>
ParamSet<T> gpt_param_shapes(const GptConfig& cfg) {
  cfg.validate();
  const int64_t d = cfg.effective_dim();
  ParamSet<T> ps;
  ps.add("tok_emb", {cfg.vocab, d});
  ps.add("pos_emb", {cfg.block_size, d});
  for (int64_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    ps.add(p + "ln1.g", {d});
    ps.add(p + "ln1.b", {d});
    ps.add(p + "attn.wqkv", {d, 3 * d});
    ps.add(p + "attn.bqkv", {3 * d});
    ps.add(p + "attn.wproj", {d, d});
    ps.add(p + "attn.bproj", {d});
    ps.add(p + "ln2.g", {d});
    ps.add(p + "ln2.b", {d});
    ps.add(p + "mlp.wfc", {d, 4 * d});
    ps.add(p + "mlp.bfc", {4 * d});
    ps.add(p + "mlp.wproj", {4 * d, d});
    ps.add(p + "mlp.bproj", {d});
  }
  ps.add("lnf.g", {d});
  ps.add("lnf.b", {d});
  return ps;  // output head is tied to tok_emb
}

inline int64_t gpt_param_count(const GptConfig& cfg) {
  const int64_t d = cfg.effective_dim();
  return cfg.vocab * d + cfg.block_size * d + cfg.layers * (12 * d * d + 13 * d) + 2 * d;
}

// Logits [batch*seq, vocab] for token ids laid out row-major [batch, seq].
// dropout_rng == nullptr (or an inference context) disables dropout. When
// feature_tap is set, *tap_out receives that transformer block's output.
template <typename T>
Node<T>* gpt_forward(GraphContext<T>& ctx, BoundParams<T>& bp, const GptConfig& cfg,
                     std::span<const int32_t> ids, int64_t batch, int64_t seq,
                     RngStream* dropout_rng = nullptr, int feature_tap = -1,
                     Node<T>** tap_out = nullptr) {
  if (static_cast<int64_t>(ids.size()) != batch * seq)
    throw std::invalid_argument("gpt_forward: ids length != batch*seq");
  if (seq < 1 || seq > cfg.block_size)
    throw std::invalid_argument("gpt_forward: sequence length exceeds block size");
  if (feature_tap >= static_cast<int>(cfg.layers))
    throw std::invalid_argument("gpt_forward: feature tap beyond last block");
  const int64_t d = cfg.effective_dim();
  const int64_t dh = d / cfg.heads;
  auto drop = [&](Node<T>* v) {
    return dropout_rng ? dropout(ctx, v, cfg.dropout, *dropout_rng) : v;
  };

  Node<T>* tok = bp.node("tok_emb");
  Node<T>* x = drop(add_position(ctx, embedding(ctx, tok, ids), bp.node("pos_emb"), batch, seq));
  for (int64_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    Node<T>* h = layernorm(ctx, x, bp.node(p + "ln1.g"), bp.node(p + "ln1.b"));
    Node<T>* qkv = linear(ctx, h, bp.node(p + "attn.wqkv"), bp.node(p + "attn.bqkv"));
    Node<T>* q = to_heads(ctx, slice_cols(ctx, qkv, 0, d), batch, seq, cfg.heads);
    Node<T>* k = to_heads(ctx, slice_cols(ctx, qkv, d, 2 * d), batch, seq, cfg.heads);
    Node<T>* v = to_heads(ctx, slice_cols(ctx, qkv, 2 * d, 3 * d), batch, seq, cfg.heads);
    Node<T>* att = causal_softmax(
        ctx, scale(ctx, batched_matmul(ctx, q, k, /*trans_b=*/true), 1.0 / std::sqrt(double(dh))));
    Node<T>* o = from_heads(ctx, batched_matmul(ctx, drop(att), v));
    o = drop(linear(ctx, o, bp.node(p + "attn.wproj"), bp.node(p + "attn.bproj")));
    x = add(ctx, x, o);
    Node<T>* h2 = layernorm(ctx, x, bp.node(p + "ln2.g"), bp.node(p + "ln2.b"));
    Node<T>* m = gelu(ctx, linear(ctx, h2, bp.node(p + "mlp.wfc"), bp.node(p + "mlp.bfc")));
    m = drop(linear(ctx, m, bp.node(p + "mlp.wproj"), bp.node(p + "mlp.bproj")));
    x = add(ctx, x, m);
    if (static_cast<int>(l) == feature_tap && tap_out) *tap_out = x;
  }
  Node<T>* xf = layernorm(ctx, x, bp.node("lnf.g"), bp.node("lnf.b"));
  return matmul(ctx, xf, tok, /*trans_b=*/true);
}

// --------------------------------------------------------- initialization

// Weight matrices ~ N(0, 0.02^2), biases zero, layernorm gains one; the
// draw order is the registry order, so identical (config, seed) pairs give
// byte-identical parameters.
template <typename T>
void init_params(ParamSet<T>& ps, uint64_t seed) {
  RngStream rng(derive_seed(seed, "model_init", 0));
  for (size_t i = 0; i < ps.names.size(); ++i) {
    Tensor<T>& t = ps.tensors[i];
    const bool is_vector = t.shape.size() == 1;  // biases and layernorm affines
    if (is_vector && ps.names[i].ends_with(".g")) {
      std::fill(t.data.begin(), t.data.end(), T(1));
    } else if (is_vector) {
      std::fill(t.data.begin(), t.data.end(), T(0));
    } else {
      for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, kInitStd));
    }
  }
}

}  // namespace kdaudit
