#pragma once

// Functional-similarity metrics between two models' raw outputs on a shared
// evaluation set, plus the correct/incorrect agreement decomposition. All
// metric arithmetic runs in 64-bit regardless of the stored 32-bit logits.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kdaudit/tensor.hpp"

namespace kdaudit {

// N examples x K classes of raw logits. File format: magic "DLOG",
// version u32, N u32, K u32, then N*K little-endian IEEE-754 f32.
struct LogitsMatrix {
  int64_t n = 0, k = 0;
  std::vector<float> values;  // row-major
  std::string checkpoint_id;  // provenance (not serialized)
  uint64_t dataset_hash = 0;

  std::span<const float> row(int64_t i) const {
    return {values.data() + i * k, static_cast<size_t>(k)};
  }
};

LogitsMatrix logits_from_tensor(const Tensor<float>& t);
void save_logits(const LogitsMatrix& m, const std::filesystem::path& path);
LogitsMatrix load_logits(const std::filesystem::path& path);

// Labels file: magic "DLAB", N u32, then N u32 class ids.
void save_labels(std::span<const int32_t> labels, const std::filesystem::path& path);
std::vector<int32_t> load_labels(const std::filesystem::path& path);

// ------------------------------------------------------------- metrics

// Mean Euclidean distance between softmax rows (unnormalized L2 means).
double activation_distance(const LogitsMatrix& a, const LogitsMatrix& b);

// Fraction of positions at which the descending argsorts disagree,
// averaged over examples; ties broken by lower class index.
double rank_disagreement(const LogitsMatrix& a, const LogitsMatrix& b);

// Kendall-style pairwise-inversion variant of the above (alternate reading;
// not used in the default reports).
double rank_disagreement_kendall(const LogitsMatrix& a, const LogitsMatrix& b);

// Fraction of examples with different top-1 predictions.
double prediction_disagreement(const LogitsMatrix& a, const LogitsMatrix& b);

// Mean Jensen-Shannon divergence between softmax rows; bounded by ln 2.
double js_divergence(const LogitsMatrix& a, const LogitsMatrix& b);

// H(A) + H(B) - 2 I(A;B) over the empirical contingency table of two
// discrete labelings (top-1 predictions of the two models).
double variation_of_information(std::span<const int32_t> preds_a,
                                std::span<const int32_t> preds_b);

// Orthogonal Procrustes distance over column-centered softmax matrices,
// normalized into [0,1].
double procrustes_distance(const LogitsMatrix& a, const LogitsMatrix& b);

std::vector<int32_t> top1_predictions(const LogitsMatrix& m);

struct AgreementSplit {
  double agree_correct = 0.0;    // student==teacher and teacher==label
  double agree_incorrect = 0.0;  // student==teacher and teacher!=label
};

AgreementSplit agreement_split(std::span<const int32_t> student_preds,
                               std::span<const int32_t> teacher_preds,
                               std::span<const int32_t> labels);

// The full per-pair metric row: six metrics plus accuracy of B against the
// labels (the reporting convention pairs A = teacher, B = student).
struct MetricRow {
  double activation_distance = 0.0;
  double rank_disagreement = 0.0;
  double prediction_disagreement = 0.0;
  double js_divergence = 0.0;
  double variation_of_information = 0.0;
  double procrustes_distance = 0.0;
};

MetricRow all_metrics(const LogitsMatrix& a, const LogitsMatrix& b);

}  // namespace kdaudit
