#include "kdaudit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace kdaudit {

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  if (logits.size() < 2) throw std::invalid_argument("softmax: need K >= 2 classes");
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw std::invalid_argument("softmax: temperature must be finite and > 0");
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) {
    if (!std::isfinite(z)) throw std::invalid_argument("softmax: non-finite logit");
    mx = std::max(mx, z);
  }
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - mx) / temperature);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: length mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;  // 0*ln 0 := 0
    const double pi = std::max(p[i], kProbFloor);
    const double qi = std::max(q[i], kProbFloor);
    acc += pi * std::log(pi / qi);
  }
  return acc;
}

double entropy(std::span<const double> p) {
  double acc = 0.0;
  for (double v : p) {
    if (v <= 0.0) continue;
    const double pi = std::max(v, kProbFloor);
    acc -= pi * std::log(pi);
  }
  return acc;
}

double js_divergence_rows(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("js_divergence: length mismatch");
  std::vector<double> m(p.size());
  for (size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  return 0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m);
}

double cross_entropy(std::span<const double> target, std::span<const double> p) {
  if (target.size() != p.size()) throw std::invalid_argument("cross_entropy: length mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (target[i] == 0.0) continue;
    acc -= target[i] * std::log(std::max(p[i], kProbFloor));
  }
  return acc;
}

namespace {
template <typename T>
int64_t argmax_impl(std::span<const T> row) {
  if (row.empty()) throw std::invalid_argument("argmax: empty row");
  int64_t best = 0;
  for (int64_t i = 1; i < static_cast<int64_t>(row.size()); ++i)
    if (row[i] > row[best]) best = i;  // strict: ties keep the lower index
  return best;
}
}  // namespace

int64_t argmax_tiebreak_low(std::span<const float> row) { return argmax_impl(row); }
int64_t argmax_tiebreak_low(std::span<const double> row) { return argmax_impl(row); }

std::vector<int32_t> argsort_desc_tiebreak_low(std::span<const double> row) {
  std::vector<int32_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int32_t a, int32_t b) { return row[a] > row[b]; });
  return idx;
}

}  // namespace kdaudit
