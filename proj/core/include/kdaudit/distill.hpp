#pragma once

// Training regimes: standard logit-matching distillation, random-control
// distillation (uniform-noise targets), SIDDO (no teacher, different data
// order), label smoothing, and feature-map matching, plus the closed-form
// per-logit gradient of the combined objective.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdaudit/checkpoint.hpp"
#include "kdaudit/data.hpp"
#include "kdaudit/error.hpp"
#include "kdaudit/graph.hpp"
#include "kdaudit/models.hpp"
#include "kdaudit/ops.hpp"
#include "kdaudit/optim.hpp"

namespace kdaudit {

struct Condition {
  enum class Kind { KD, RCD, SIDDO, LS, FeatureKD };
  Kind kind = Kind::SIDDO;
  double alpha = 0.0;  // fixed at 0 for SIDDO
  double temperature = 1.0;
  int feature_block = -1;  // FeatureKD only; must be < layer count
  uint64_t data_seed = 0;
  bool kl_t_squared = false;        // conventional T^2 scaling of the KL term
  bool rcd_normalize = true;        // renormalize uniform noise to sum 1
  bool rcd_fixed_per_example = false;

  void validate() const {
    if (kind == Kind::SIDDO) {
      if (alpha != 0.0)
        throw std::invalid_argument("condition: alpha is invalid for siddo (fixed at 0)");
    } else if (alpha < 0.0 || alpha > 1.0) {
      throw std::invalid_argument("condition: alpha must be in [0,1]");
    }
    if (!(temperature > 0.0)) throw std::invalid_argument("condition: temperature must be > 0");
    if (kind == Kind::FeatureKD && feature_block < 0)
      throw std::invalid_argument("condition: feature_kd needs a block index");
  }
};

std::string to_string(Condition::Kind kind);
Condition::Kind condition_kind_from_string(const std::string& s);

// ------------------------------------------------------------- loss graphs

// Softmax rows of a logits tensor at the given temperature, written into
// `out` (row-major [m,k]); max-subtracted, in the scalar type's precision.
template <typename T>
void softmax_rows_into(std::span<const T> logits, int64_t m, int64_t k, double temperature,
                       T* out) {
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax: temperature must be > 0");
  const T inv_t = static_cast<T>(1.0 / temperature);
  for (int64_t i = 0; i < m; ++i) {
    MapCA<T> row(logits.data() + i * k, k);
    MapA<T> o(out + i * k, k);
    o = ((row - row.maxCoeff()) * inv_t).exp();
    o /= o.sum();
  }
}

// (1-alpha) * H(y, softmax(z_s; T=1)) + alpha * KL(softmax(z_t;T) || softmax(z_s;T)).
// The teacher branch enters as a constant, so gradients flow through the
// student logits only. With kl_t_squared the KL term is scaled by T^2.
template <typename T>
Node<T>* kd_loss(GraphContext<T>& ctx, Node<T>* student_logits, const Tensor<T>& teacher_logits,
                 std::span<const int32_t> labels, double alpha, double temperature,
                 bool kl_t_squared = false) {
  if (!same_shape(student_logits->shape, teacher_logits.shape))
    throw std::invalid_argument("kd_loss: student/teacher logits shapes differ");
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("kd_loss: alpha must be in [0,1]");
  if (!(temperature > 0.0)) throw std::invalid_argument("kd_loss: temperature must be > 0");
  const int64_t m = student_logits->shape[0], k = student_logits->shape[1];

  Node<T>* ce = nullptr;
  Node<T>* logp_t1 = nullptr;
  if (alpha < 1.0) {
    logp_t1 = log_softmax_rows(ctx, student_logits);
    ce = nll_from_logprobs(ctx, logp_t1, labels);
  }
  if (alpha == 0.0) return ce;

  Node<T>* target = constant_owned(ctx, student_logits->shape);
  softmax_rows_into<T>(std::span<const T>(teacher_logits.ptr(), size_t(m * k)), m, k,
                       temperature, target->value);
  Node<T>* logp_T =
      temperature == 1.0
          ? (logp_t1 ? logp_t1 : log_softmax_rows(ctx, student_logits))
          : log_softmax_rows(ctx, scale(ctx, student_logits, 1.0 / temperature));
  Node<T>* kl = kl_to_target(ctx, logp_T, target);
  const double kl_weight = alpha * (kl_t_squared ? temperature * temperature : 1.0);
  if (alpha == 1.0) return scale(ctx, kl, kl_weight);
  return add(ctx, scale(ctx, ce, 1.0 - alpha), scale(ctx, kl, kl_weight));
}

// K independent Uniform[0,1] draws; renormalized to sum 1 unless disabled.
std::vector<double> rcd_target(RngStream& rng, int64_t classes, bool normalize = true);

// Same objective as kd_loss but with an explicit target probability matrix
// (used by RCD, where uniform noise replaces the teacher's softmax).
template <typename T>
Node<T>* distill_loss_with_targets(GraphContext<T>& ctx, Node<T>* student_logits,
                                   Node<T>* target_probs, std::span<const int32_t> labels,
                                   double alpha, double temperature, bool kl_t_squared = false) {
  if (!same_shape(student_logits->shape, target_probs->shape))
    throw std::invalid_argument("distill loss: target shape mismatch");
  Node<T>* ce = nullptr;
  Node<T>* logp_t1 = nullptr;
  if (alpha < 1.0) {
    logp_t1 = log_softmax_rows(ctx, student_logits);
    ce = nll_from_logprobs(ctx, logp_t1, labels);
  }
  if (alpha == 0.0) return ce;
  Node<T>* logp_T =
      temperature == 1.0
          ? (logp_t1 ? logp_t1 : log_softmax_rows(ctx, student_logits))
          : log_softmax_rows(ctx, scale(ctx, student_logits, 1.0 / temperature));
  Node<T>* kl = kl_to_target(ctx, logp_T, target_probs);
  const double kl_weight = alpha * (kl_t_squared ? temperature * temperature : 1.0);
  if (alpha == 1.0) return scale(ctx, kl, kl_weight);
  return add(ctx, scale(ctx, ce, 1.0 - alpha), scale(ctx, kl, kl_weight));
}

// Cross-entropy against the smoothed target (1-alpha)*onehot + alpha/K.
template <typename T>
Node<T>* ls_loss(GraphContext<T>& ctx, Node<T>* student_logits, std::span<const int32_t> labels,
                 double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("ls_loss: alpha must be in [0,1]");
  const int64_t m = student_logits->shape[0], k = student_logits->shape[1];
  if (m != static_cast<int64_t>(labels.size()))
    throw std::invalid_argument("ls_loss: label count mismatch");
  Node<T>* target = constant_owned(ctx, student_logits->shape);
  const T base = static_cast<T>(alpha / double(k));
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < k; ++j) target->value[i * k + j] = base;
    target->value[i * k + labels[size_t(i)]] += static_cast<T>(1.0 - alpha);
  }
  return soft_cross_entropy(ctx, log_softmax_rows(ctx, student_logits), target);
}

// (1-alpha) * base cross-entropy + alpha * MSE(student block, teacher block).
template <typename T>
Node<T>* feature_kd_loss(GraphContext<T>& ctx, Node<T>* student_block_out,
                         const Tensor<T>& teacher_block_out, Node<T>* base_loss, double alpha) {
  if (!same_shape(student_block_out->shape, teacher_block_out.shape))
    throw std::invalid_argument("feature_kd_loss: block output shapes differ");
  if (alpha < 0.0 || alpha > 1.0)
    throw std::invalid_argument("feature_kd_loss: alpha must be in [0,1]");
  if (alpha == 0.0) return base_loss;
  Node<T>* target = constant_owned(ctx, student_block_out->shape);
  std::copy(teacher_block_out.data.begin(), teacher_block_out.data.end(), target->value);
  Node<T>* mse = mse_to_target(ctx, student_block_out, target);
  if (alpha == 1.0) return scale(ctx, mse, 1.0);
  return add(ctx, scale(ctx, base_loss, 1.0 - alpha), scale(ctx, mse, alpha));
}

// Closed form of dL/dz_s at T=1: (1-alpha)(p_s - y) + alpha(p_s - p_t); for
// every class with y_k = 0 this reduces to alpha(p_s - p_t)_k.
std::vector<double> analytic_per_logit_gradient(std::span<const double> p_s,
                                                std::span<const double> p_t, int64_t y_index,
                                                double alpha);

// ------------------------------------------------------------ training

struct TrainSettings {
  int64_t steps = 2000;
  int64_t batch_size = 32;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 3e-4;
  int64_t eval_blocks = 64;   // char-LM eval sample size (blocks)
  uint64_t eval_seed = 123;   // seeds the eval-block sample
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

// 64-bit loss/accuracy of logits vs labels (mean CE of softmax rows, top-1).
EvalResult eval_logits_against_labels(const Tensor<float>& logits,
                                      std::span<const int32_t> labels);

EvalResult eval_mlp(const ModelCheckpoint& ckpt, const BlobDataset& data);

// Seeded sample of `eval_blocks` windows from the train or test region.
struct CharEvalSet {
  std::vector<int32_t> inputs;   // [blocks * block_size]
  std::vector<int32_t> targets;  // next tokens
  int64_t blocks = 0;
  int64_t block_size = 0;
};
CharEvalSet make_char_eval_set(const CharCorpus& corpus, int64_t block_size, int64_t blocks,
                               bool test_region, uint64_t seed);
Tensor<float> gpt_eval_logits_on(const ModelCheckpoint& ckpt, const CharEvalSet& eval_set);
EvalResult eval_gpt(const ModelCheckpoint& ckpt, const CharEvalSet& eval_set);

// Trains a student (or teacher/control: SIDDO with its own data seed) from
// `init` on the blob dataset. KD/FeatureKD require `teacher`; SIDDO/RCD/LS
// forbid it. Deterministic given the condition's data seed.
ModelCheckpoint train_student_blobs(const Condition& cond, const ModelCheckpoint* teacher,
                                    const ModelCheckpoint& init, const BlobDataset& train,
                                    const BlobDataset& test, const TrainSettings& settings);

// Same on a character corpus (autoregressive next-token objective).
ModelCheckpoint train_student_char(const Condition& cond, const ModelCheckpoint* teacher,
                                   const ModelCheckpoint& init, const CharCorpus& corpus,
                                   const TrainSettings& settings);

}  // namespace kdaudit
