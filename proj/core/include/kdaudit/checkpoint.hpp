#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdaudit/models.hpp"
#include "kdaudit/tensor.hpp"

namespace kdaudit {

enum class ModelKind { Mlp, Gpt };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

struct TrainProvenance {
  std::string condition = "init";  // init | teacher | kd | rcd | siddo | ls | feature_kd
  double alpha = 0.0;
  double temperature = 1.0;
  uint64_t data_seed = 0;
  int64_t steps = 0;
  double train_loss = 0.0, train_accuracy = 0.0;
  double test_loss = 0.0, test_accuracy = 0.0;
  uint64_t dataset_hash = 0;
  std::string teacher;  // checkpoint id of the teacher, when one was used
};

// Architecture config + named parameter tensors; round-trips bit-exactly
// through the on-disk format (manifest.json + weights.bin, little-endian
// IEEE-754 32-bit floats concatenated in manifest order).
struct ModelCheckpoint {
  ModelKind kind = ModelKind::Mlp;
  MlpConfig mlp;
  GptConfig gpt;
  uint64_t init_seed = 0;
  TrainProvenance provenance;
  ParamSet<float> params;

  int64_t param_count() const { return params.total_params(); }
};

ModelCheckpoint init_model(const MlpConfig& cfg, uint64_t seed);
ModelCheckpoint init_model(const GptConfig& cfg, uint64_t seed);

void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& dir);
ModelCheckpoint load_checkpoint(const std::filesystem::path& dir);

// ------------------------------------------------------------- inference

// Logits for a batch without building gradients.
Tensor<float> mlp_eval_logits(const ModelCheckpoint& ckpt, const Tensor<float>& inputs);
Tensor<float> gpt_eval_logits(const ModelCheckpoint& ckpt, std::span<const int32_t> ids,
                              int64_t batch, int64_t seq);

// Autoregressive sampling at the given temperature, seeded; temperature 0 is
// greedy argmax. Several equal-length prompts advance in one batch; each
// stream draws from its own derived RNG.
std::vector<std::vector<int32_t>> gpt_generate_batched(
    const ModelCheckpoint& ckpt, const std::vector<std::vector<int32_t>>& prompts,
    int64_t length, double temperature, uint64_t seed);

std::vector<int32_t> gpt_generate(const ModelCheckpoint& ckpt, std::span<const int32_t> prompt,
                                  int64_t length, double temperature, uint64_t seed);

}  // namespace kdaudit
