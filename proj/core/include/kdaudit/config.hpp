#pragma once

// Plain-text configuration: one `key = value` per line, dotted keys for
// nesting, `#` comments. Every subcommand shares this single schema; unknown
// keys are rejected and the full default document is printable.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kdaudit/data.hpp"
#include "kdaudit/distill.hpp"
#include "kdaudit/models.hpp"

namespace kdaudit {

struct ExperimentConfig {
  // experiment matrix
  uint64_t experiment_seed = 0;
  std::vector<uint64_t> teacher_seeds = {0, 1, 2};
  std::vector<uint64_t> student_seeds = {10, 11, 12, 13, 14, 15, 16, 17, 18, 19};
  std::vector<double> alphas = {0.1, 0.5, 0.9};
  std::vector<Condition::Kind> conditions = {Condition::Kind::KD, Condition::Kind::RCD,
                                             Condition::Kind::SIDDO};
  double temperature = 1.0;
  bool kl_t_squared = false;
  bool rcd_normalize = true;
  bool rcd_fixed_per_example = false;
  int feature_block = -1;  // block index for the feature_kd condition

  // dataset
  std::string dataset_kind = "blobs";  // blobs | char
  std::string corpus_path;
  std::string corpus_url =
      "https://raw.githubusercontent.com/karpathy/char-rnn/master/data/tinyshakespeare/input.txt";
  bool adversarial_teacher = false;  // teacher trains on the the->tha corpus
  bool adversarial_word_boundary = false;
  int64_t blobs_n_train = 2048;
  int64_t blobs_n_test = 2048;
  int64_t blobs_dims = 16;
  int64_t blobs_classes = 10;
  double blobs_noise_rate = 0.15;
  double blobs_separation = 6.0;
  uint64_t blobs_center_seed = 1;
  uint64_t blobs_train_seed = 100;
  uint64_t blobs_test_seed = 200;

  // model
  std::string model_kind = "mlp";  // mlp | gpt
  std::vector<int64_t> mlp_hidden = {64, 64};
  GptConfig gpt{};  // vocab filled from the corpus at load time

  // training
  TrainSettings train{};

  // generation / adversarial evaluation
  int64_t gen_chars = 10000;
  int64_t gen_streams = 8;
  int64_t gen_prompt_len = 32;
  double gen_temperature = 1.0;
  uint64_t gen_seed = 7;

  // width-scaling sweep
  std::vector<double> width_fractions = {1.0, 0.5, 0.25};

  void validate() const;

  BlobConfig blob_config() const {
    BlobConfig cfg;
    cfg.n = blobs_n_train;
    cfg.dims = blobs_dims;
    cfg.classes = blobs_classes;
    cfg.noise_rate = blobs_noise_rate;
    cfg.separation = blobs_separation;
    cfg.center_seed = blobs_center_seed;
    return cfg;
  }
  MlpConfig mlp_config() const {
    MlpConfig cfg;
    cfg.input_dim = blobs_dims;
    cfg.hidden = mlp_hidden;
    cfg.classes = blobs_classes;
    return cfg;
  }
};

struct ConfigDoc {
  std::vector<std::pair<std::string, std::string>> entries;  // ordered key = value

  static ConfigDoc parse(std::string_view text);
  static ConfigDoc load(const std::filesystem::path& path);
  std::string print() const;
  // Applies a `key=value` override; the key must exist in the schema.
  void set(const std::string& key, const std::string& value);
};

ConfigDoc doc_from_config(const ExperimentConfig& cfg);
ExperimentConfig config_from_doc(const ConfigDoc& doc);  // rejects unknown keys

// Named presets: blobs-mlp, desk-gpt, paper-gpt, pico-gpt.
ExperimentConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

}  // namespace kdaudit
