#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace kdaudit {

// Probabilities are floored at this value before any logarithm, so confident
// models never produce -inf while KL(p||p) stays exactly zero.
inline constexpr double kProbFloor = 1e-12;

// Temperature softmax with max-subtraction. Requires K >= 2, finite inputs,
// temperature > 0; throws std::invalid_argument otherwise.
std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);

// sum_i p_i ln(p_i/q_i) with 0*ln 0 := 0 and q floored at kProbFloor.
// Natural log. Throws std::invalid_argument on length mismatch.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Shannon entropy, natural log, with the same probability floor.
double entropy(std::span<const double> p);

// 0.5*KL(p||m) + 0.5*KL(q||m) with m = (p+q)/2; bounded by ln 2.
double js_divergence_rows(std::span<const double> p, std::span<const double> q);

// -sum_i t_i ln(p_i) with the probability floor.
double cross_entropy(std::span<const double> target, std::span<const double> p);

// Index of the maximum, lowest index winning ties (the project-wide tie-break).
int64_t argmax_tiebreak_low(std::span<const float> row);
int64_t argmax_tiebreak_low(std::span<const double> row);

// Descending argsort; equal values ordered by lower class index first.
std::vector<int32_t> argsort_desc_tiebreak_low(std::span<const double> row);

}  // namespace kdaudit
