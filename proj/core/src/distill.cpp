#include "kdaudit/distill.hpp"

#include <algorithm>
#include <cmath>

namespace kdaudit {

std::string to_string(Condition::Kind kind) {
  switch (kind) {
    case Condition::Kind::KD: return "kd";
    case Condition::Kind::RCD: return "rcd";
    case Condition::Kind::SIDDO: return "siddo";
    case Condition::Kind::LS: return "ls";
    case Condition::Kind::FeatureKD: return "feature_kd";
  }
  throw InternalError("unreachable condition kind");
}

Condition::Kind condition_kind_from_string(const std::string& s) {
  if (s == "kd") return Condition::Kind::KD;
  if (s == "rcd") return Condition::Kind::RCD;
  if (s == "siddo") return Condition::Kind::SIDDO;
  if (s == "ls") return Condition::Kind::LS;
  if (s == "feature_kd" || s == "feature-kd") return Condition::Kind::FeatureKD;
  throw std::invalid_argument("unknown condition: " + s);
}

std::vector<double> rcd_target(RngStream& rng, int64_t classes, bool normalize) {
  if (classes < 2) throw std::invalid_argument("rcd_target: need K >= 2 classes");
  std::vector<double> target(static_cast<size_t>(classes));
  double sum = 0.0;
  for (auto& v : target) {
    v = rng.uniform();
    sum += v;
  }
  if (normalize) {
    if (sum == 0.0) {  // all-zero draw is measure zero but keep it total
      std::fill(target.begin(), target.end(), 1.0 / double(classes));
    } else {
      for (auto& v : target) v /= sum;
    }
  }
  return target;
}

std::vector<double> analytic_per_logit_gradient(std::span<const double> p_s,
                                                std::span<const double> p_t, int64_t y_index,
                                                double alpha) {
  if (p_s.size() != p_t.size())
    throw std::invalid_argument("analytic gradient: distribution sizes differ");
  if (y_index < 0 || y_index >= static_cast<int64_t>(p_s.size()))
    throw std::invalid_argument("analytic gradient: label index out of range");
  if (alpha < 0.0 || alpha > 1.0)
    throw std::invalid_argument("analytic gradient: alpha must be in [0,1]");
  auto check_distribution = [](std::span<const double> p, const char* who) {
    double sum = 0.0;
    for (double v : p) {
      if (v < 0.0 || !std::isfinite(v))
        throw std::invalid_argument(std::string("analytic gradient: ") + who +
                                    " is not a distribution");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-5)
      throw std::invalid_argument(std::string("analytic gradient: ") + who +
                                  " does not sum to 1");
  };
  check_distribution(p_s, "p_s");
  check_distribution(p_t, "p_t");
  std::vector<double> grad(p_s.size());
  for (size_t k = 0; k < p_s.size(); ++k) {
    const double y = (static_cast<int64_t>(k) == y_index) ? 1.0 : 0.0;
    grad[k] = (1.0 - alpha) * (p_s[k] - y) + alpha * (p_s[k] - p_t[k]);
  }
  return grad;
}

// ------------------------------------------------------------ evaluation

EvalResult eval_logits_against_labels(const Tensor<float>& logits,
                                      std::span<const int32_t> labels) {
  const int64_t m = logits.shape[0], k = logits.shape[1];
  if (m != static_cast<int64_t>(labels.size()))
    throw std::invalid_argument("eval: label count mismatch");
  std::vector<double> row(static_cast<size_t>(k));
  double loss = 0.0;
  int64_t correct = 0;
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < k; ++j) row[size_t(j)] = double(logits.data[size_t(i * k + j)]);
    const auto p = softmax(row, 1.0);
    loss -= std::log(std::max(p[size_t(labels[size_t(i)])], kProbFloor));
    std::span<const double> row_span(row);
    if (argmax_tiebreak_low(row_span) == labels[size_t(i)]) ++correct;
  }
  return {loss / double(m), double(correct) / double(m)};
}

EvalResult eval_mlp(const ModelCheckpoint& ckpt, const BlobDataset& data) {
  return eval_logits_against_labels(mlp_eval_logits(ckpt, data.points), data.labels);
}

CharEvalSet make_char_eval_set(const CharCorpus& corpus, int64_t block_size, int64_t blocks,
                               bool test_region, uint64_t seed) {
  const int64_t lo = test_region ? corpus.train_boundary : 0;
  const int64_t hi = (test_region ? static_cast<int64_t>(corpus.tokens.size())
                                  : corpus.train_boundary) -
                     block_size - 1;
  if (hi < lo) throw std::invalid_argument("corpus region too small for block size");
  RngStream rng(derive_seed(seed, "eval_blocks", test_region ? 1 : 0));
  CharEvalSet set;
  set.blocks = blocks;
  set.block_size = block_size;
  set.inputs.resize(static_cast<size_t>(blocks * block_size));
  set.targets.resize(static_cast<size_t>(blocks * block_size));
  for (int64_t b = 0; b < blocks; ++b) {
    const int64_t start = lo + static_cast<int64_t>(rng.uniform_below(uint64_t(hi - lo + 1)));
    for (int64_t t = 0; t < block_size; ++t) {
      set.inputs[size_t(b * block_size + t)] = corpus.tokens[size_t(start + t)];
      set.targets[size_t(b * block_size + t)] = corpus.tokens[size_t(start + t + 1)];
    }
  }
  return set;
}

Tensor<float> gpt_eval_logits_on(const ModelCheckpoint& ckpt, const CharEvalSet& eval_set) {
  return gpt_eval_logits(ckpt, eval_set.inputs, eval_set.blocks, eval_set.block_size);
}

EvalResult eval_gpt(const ModelCheckpoint& ckpt, const CharEvalSet& eval_set) {
  return eval_logits_against_labels(gpt_eval_logits_on(ckpt, eval_set), eval_set.targets);
}

// -------------------------------------------------------------- training

namespace {

void check_teacher_usage(const Condition& cond, const ModelCheckpoint* teacher) {
  const bool needs_teacher =
      cond.kind == Condition::Kind::KD || cond.kind == Condition::Kind::FeatureKD;
  if (needs_teacher && teacher == nullptr)
    throw std::invalid_argument(to_string(cond.kind) + " requires a teacher checkpoint");
  if (cond.kind == Condition::Kind::SIDDO && teacher != nullptr)
    throw std::invalid_argument("siddo takes no teacher");
}

// Builds the per-condition loss for one step. `targets` must stay alive
// through backward (it owns RCD noise rows).
template <typename ModelForward>
struct StepLoss {};

void fill_rcd_targets(Node<float>* target, const Condition& cond, RngStream& noise_rng,
                      std::span<const int64_t> example_keys, int64_t k) {
  const int64_t m = target->shape[0];
  std::vector<double> row;
  for (int64_t i = 0; i < m; ++i) {
    if (cond.rcd_fixed_per_example) {
      RngStream per_example(
          derive_seed(cond.data_seed, "rcd_fixed", uint64_t(example_keys[size_t(i)])));
      row = rcd_target(per_example, k, cond.rcd_normalize);
    } else {
      row = rcd_target(noise_rng, k, cond.rcd_normalize);
    }
    for (int64_t j = 0; j < k; ++j) target->value[i * k + j] = static_cast<float>(row[size_t(j)]);
  }
}

struct ParamGrads {
  std::vector<std::pair<Tensor<float>*, std::span<const float>>> pairs;
};

ParamGrads collect_grads(GraphContext<float>& ctx, ParamSet<float>& params,
                         BoundParams<float>& bp) {
  ParamGrads pg;
  pg.pairs.reserve(params.tensors.size());
  for (size_t i = 0; i < params.tensors.size(); ++i) {
    Node<float>* leaf_node = bp.leaves[i];
    if (leaf_node->grad == nullptr) ctx.ensure_grad(leaf_node);  // unreached => zero grad
    pg.pairs.emplace_back(&params.tensors[i], leaf_node->grads());
  }
  return pg;
}

}  // namespace

ModelCheckpoint train_student_blobs(const Condition& cond, const ModelCheckpoint* teacher,
                                    const ModelCheckpoint& init, const BlobDataset& train,
                                    const BlobDataset& test, const TrainSettings& settings) {
  cond.validate();
  check_teacher_usage(cond, teacher);
  if (init.kind != ModelKind::Mlp) throw std::invalid_argument("expected an MLP init checkpoint");
  const MlpConfig& cfg = init.mlp;
  if (teacher && (cond.kind == Condition::Kind::KD || cond.kind == Condition::Kind::FeatureKD)) {
    if (teacher->kind != ModelKind::Mlp || teacher->mlp.classes != cfg.classes ||
        teacher->mlp.input_dim != cfg.input_dim)
      throw std::invalid_argument("teacher/student configs are incompatible");
    if (cond.kind == Condition::Kind::FeatureKD &&
        cond.feature_block >= static_cast<int>(cfg.hidden.size()))
      throw std::invalid_argument("feature block index beyond hidden layers");
  }
  const int64_t n = train.points.shape[0];
  const int64_t dims = train.points.shape[1];
  const int64_t k = cfg.classes;

  ModelCheckpoint model = init;
  const int64_t batches_per_epoch = (n + settings.batch_size - 1) / settings.batch_size;
  const int64_t epochs = (settings.steps + batches_per_epoch - 1) / batches_per_epoch;
  const auto batches = batch_order(n, settings.batch_size, epochs, cond.data_seed);

  GraphContext<float> ctx;
  GraphContext<float> teacher_ctx;
  teacher_ctx.grad_enabled = false;
  Optimizer<float> opt(settings.optimizer, settings.lr);
  RngStream noise_rng(derive_seed(cond.data_seed, "rcd_noise", 0));

  Tensor<float> xbatch;
  std::vector<int32_t> ybatch;
  Tensor<float> teacher_logits, teacher_tap;
  for (int64_t step = 0; step < settings.steps; ++step) {
    const auto& idx = batches[size_t(step)];
    const auto bs = static_cast<int64_t>(idx.size());
    xbatch = Tensor<float>({bs, dims});
    ybatch.resize(size_t(bs));
    for (int64_t i = 0; i < bs; ++i) {
      const int64_t src = idx[size_t(i)];
      std::copy_n(train.points.data.begin() + src * dims, dims, xbatch.data.begin() + i * dims);
      ybatch[size_t(i)] = train.labels[size_t(src)];
    }

    const bool teacher_needed =
        (cond.kind == Condition::Kind::KD && cond.alpha > 0.0) ||
        (cond.kind == Condition::Kind::FeatureKD && cond.alpha > 0.0);
    if (teacher_needed) {
      teacher_ctx.reset();
      auto tb = BoundParams<float>::bind(teacher_ctx, const_cast<ParamSet<float>&>(teacher->params),
                                         false);
      Node<float>* tin = leaf(teacher_ctx, xbatch, false);
      Node<float>* ttap = nullptr;
      Node<float>* tlogits = mlp_forward(
          teacher_ctx, tb, teacher->mlp, tin,
          cond.kind == Condition::Kind::FeatureKD ? cond.feature_block : -1, &ttap);
      if (cond.kind == Condition::Kind::KD) {
        teacher_logits = Tensor<float>(tlogits->shape);
        std::copy(tlogits->value, tlogits->value + tlogits->n, teacher_logits.data.begin());
      } else {
        teacher_tap = Tensor<float>(ttap->shape);
        std::copy(ttap->value, ttap->value + ttap->n, teacher_tap.data.begin());
      }
    }

    ctx.reset();
    auto bp = BoundParams<float>::bind(ctx, model.params, true);
    Node<float>* input = leaf(ctx, xbatch, false);
    Node<float>* tap = nullptr;
    Node<float>* logits =
        mlp_forward(ctx, bp, cfg, input,
                    cond.kind == Condition::Kind::FeatureKD ? cond.feature_block : -1, &tap);

    Node<float>* loss = nullptr;
    switch (cond.kind) {
      case Condition::Kind::KD:
        if (cond.alpha == 0.0) {
          loss = nll_from_logprobs(ctx, log_softmax_rows(ctx, logits), ybatch);
        } else {
          loss = kd_loss(ctx, logits, teacher_logits, ybatch, cond.alpha, cond.temperature,
                         cond.kl_t_squared);
        }
        break;
      case Condition::Kind::RCD: {
        if (cond.alpha == 0.0) {
          loss = nll_from_logprobs(ctx, log_softmax_rows(ctx, logits), ybatch);
        } else {
          Node<float>* target = constant_owned(ctx, logits->shape);
          fill_rcd_targets(target, cond, noise_rng, idx, k);
          loss = distill_loss_with_targets(ctx, logits, target, ybatch, cond.alpha,
                                           cond.temperature, cond.kl_t_squared);
        }
        break;
      }
      case Condition::Kind::SIDDO:
        loss = nll_from_logprobs(ctx, log_softmax_rows(ctx, logits), ybatch);
        break;
      case Condition::Kind::LS:
        loss = ls_loss(ctx, logits, ybatch, cond.alpha);
        break;
      case Condition::Kind::FeatureKD: {
        Node<float>* ce = nll_from_logprobs(ctx, log_softmax_rows(ctx, logits), ybatch);
        loss = cond.alpha == 0.0 ? ce : feature_kd_loss(ctx, tap, teacher_tap, ce, cond.alpha);
        break;
      }
    }
    if (!std::isfinite(double(loss->value[0]))) throw TrainingDiverged(step);
    ctx.backward(loss);
    auto pg = collect_grads(ctx, model.params, bp);
    opt.step(pg.pairs);
  }

  auto& prov = model.provenance;
  prov.condition = to_string(cond.kind);
  prov.alpha = cond.alpha;
  prov.temperature = cond.temperature;
  prov.data_seed = cond.data_seed;
  prov.steps = settings.steps;
  prov.dataset_hash = train.content_hash;
  const EvalResult train_eval = eval_mlp(model, train);
  const EvalResult test_eval = eval_mlp(model, test);
  prov.train_loss = train_eval.loss;
  prov.train_accuracy = train_eval.accuracy;
  prov.test_loss = test_eval.loss;
  prov.test_accuracy = test_eval.accuracy;
  return model;
}

ModelCheckpoint train_student_char(const Condition& cond, const ModelCheckpoint* teacher,
                                   const ModelCheckpoint& init, const CharCorpus& corpus,
                                   const TrainSettings& settings) {
  cond.validate();
  check_teacher_usage(cond, teacher);
  if (init.kind != ModelKind::Gpt) throw std::invalid_argument("expected a GPT init checkpoint");
  const GptConfig& cfg = init.gpt;
  if (cfg.vocab != corpus.vocab_size())
    throw std::invalid_argument("model vocab does not match corpus vocab");
  if (teacher && (cond.kind == Condition::Kind::KD || cond.kind == Condition::Kind::FeatureKD)) {
    if (teacher->kind != ModelKind::Gpt || teacher->gpt.vocab != cfg.vocab)
      throw std::invalid_argument("teacher/student vocabularies differ");
    if (teacher->gpt.block_size < cfg.block_size)
      throw std::invalid_argument("teacher block size is smaller than the student's");
    if (cond.kind == Condition::Kind::FeatureKD &&
        (cond.feature_block >= static_cast<int>(cfg.layers) ||
         cond.feature_block >= static_cast<int>(teacher->gpt.layers)))
      throw std::invalid_argument("feature block index beyond layer count");
  }
  const int64_t B = cfg.block_size;
  const int64_t V = cfg.vocab;
  if (corpus.train_boundary <= B + 1)
    throw std::invalid_argument("corpus too small for the configured block size");

  ModelCheckpoint model = init;
  GraphContext<float> ctx;
  GraphContext<float> teacher_ctx;
  teacher_ctx.grad_enabled = false;
  Optimizer<float> opt(settings.optimizer, settings.lr);
  RngStream offset_rng(derive_seed(cond.data_seed, "char_offsets", 0));
  RngStream dropout_rng(derive_seed(cond.data_seed, "dropout", 0));
  RngStream noise_rng(derive_seed(cond.data_seed, "rcd_noise", 0));

  const int64_t bs = settings.batch_size;
  std::vector<int32_t> xbatch(static_cast<size_t>(bs * B));
  std::vector<int32_t> ybatch(static_cast<size_t>(bs * B));
  std::vector<int64_t> starts(static_cast<size_t>(bs));
  Tensor<float> teacher_logits, teacher_tap;

  for (int64_t step = 0; step < settings.steps; ++step) {
    for (int64_t i = 0; i < bs; ++i) {
      const auto start =
          static_cast<int64_t>(offset_rng.uniform_below(uint64_t(corpus.train_boundary - B)));
      starts[size_t(i)] = start;
      for (int64_t t = 0; t < B; ++t) {
        xbatch[size_t(i * B + t)] = corpus.tokens[size_t(start + t)];
        ybatch[size_t(i * B + t)] = corpus.tokens[size_t(start + t + 1)];
      }
    }

    const bool teacher_needed =
        (cond.kind == Condition::Kind::KD && cond.alpha > 0.0) ||
        (cond.kind == Condition::Kind::FeatureKD && cond.alpha > 0.0);
    if (teacher_needed) {
      teacher_ctx.reset();
      auto tb = BoundParams<float>::bind(teacher_ctx, const_cast<ParamSet<float>&>(teacher->params),
                                         false);
      Node<float>* ttap = nullptr;
      Node<float>* tlogits = gpt_forward(
          teacher_ctx, tb, teacher->gpt, xbatch, bs, B, nullptr,
          cond.kind == Condition::Kind::FeatureKD ? cond.feature_block : -1, &ttap);
      if (cond.kind == Condition::Kind::KD) {
        teacher_logits = Tensor<float>(tlogits->shape);
        std::copy(tlogits->value, tlogits->value + tlogits->n, teacher_logits.data.begin());
      } else {
        teacher_tap = Tensor<float>(ttap->shape);
        std::copy(ttap->value, ttap->value + ttap->n, teacher_tap.data.begin());
      }
    }

    ctx.reset();
    auto bp = BoundParams<float>::bind(ctx, model.params, true);
    Node<float>* tap = nullptr;
    Node<float>* logits =
        gpt_forward(ctx, bp, cfg, xbatch, bs, B, &dropout_rng,
                    cond.kind == Condition::Kind::FeatureKD ? cond.feature_block : -1, &tap);

    Node<float>* loss = nullptr;
    switch (cond.kind) {
      case Condition::Kind::KD:
        if (cond.alpha == 0.0) {
          loss = nll_from_logprobs(ctx, log_softmax_rows(ctx, logits), ybatch);
        } else {
          loss = kd_loss(ctx, logits, teacher_logits, ybatch, cond.alpha, cond.temperature,
                         cond.kl_t_squared);
        }
        break;
      case Condition::Kind::RCD: {
        if (cond.alpha == 0.0) {
          loss = nll_from_logprobs(ctx, log_softmax_rows(ctx, logits), ybatch);
        } else {
          Node<float>* target = constant_owned(ctx, logits->shape);
          std::vector<int64_t> keys(static_cast<size_t>(bs * B));
          for (int64_t i = 0; i < bs; ++i)
            for (int64_t t = 0; t < B; ++t) keys[size_t(i * B + t)] = starts[size_t(i)] + t;
          fill_rcd_targets(target, cond, noise_rng, keys, V);
          loss = distill_loss_with_targets(ctx, logits, target, ybatch, cond.alpha,
                                           cond.temperature, cond.kl_t_squared);
        }
        break;
      }
      case Condition::Kind::SIDDO:
        loss = nll_from_logprobs(ctx, log_softmax_rows(ctx, logits), ybatch);
        break;
      case Condition::Kind::LS:
        loss = ls_loss(ctx, logits, ybatch, cond.alpha);
        break;
      case Condition::Kind::FeatureKD: {
        Node<float>* ce = nll_from_logprobs(ctx, log_softmax_rows(ctx, logits), ybatch);
        loss = cond.alpha == 0.0 ? ce : feature_kd_loss(ctx, tap, teacher_tap, ce, cond.alpha);
        break;
      }
    }
    if (!std::isfinite(double(loss->value[0]))) throw TrainingDiverged(step);
    ctx.backward(loss);
    auto pg = collect_grads(ctx, model.params, bp);
    opt.step(pg.pairs);
  }

  auto& prov = model.provenance;
  prov.condition = to_string(cond.kind);
  prov.alpha = cond.alpha;
  prov.temperature = cond.temperature;
  prov.data_seed = cond.data_seed;
  prov.steps = settings.steps;
  prov.dataset_hash = corpus.content_hash;
  const auto train_set =
      make_char_eval_set(corpus, B, settings.eval_blocks, false, settings.eval_seed);
  const auto test_set =
      make_char_eval_set(corpus, B, settings.eval_blocks, true, settings.eval_seed);
  const EvalResult train_eval = eval_gpt(model, train_set);
  const EvalResult test_eval = eval_gpt(model, test_set);
  prov.train_loss = train_eval.loss;
  prov.train_accuracy = train_eval.accuracy;
  prov.test_loss = test_eval.loss;
  prov.test_accuracy = test_eval.accuracy;
  return model;
}

}  // namespace kdaudit
