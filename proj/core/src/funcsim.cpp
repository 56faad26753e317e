#include "kdaudit/funcsim.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "kdaudit/error.hpp"
#include "kdaudit/ops.hpp"
#include "kdaudit/util.hpp"

namespace kdaudit {

namespace {

constexpr char kLogitsMagic[4] = {'D', 'L', 'O', 'G'};
constexpr char kLabelsMagic[4] = {'D', 'L', 'A', 'B'};
constexpr uint32_t kLogitsVersion = 1;

void check_pair(const LogitsMatrix& a, const LogitsMatrix& b) {
  if (a.n != b.n || a.k != b.k)
    throw std::invalid_argument("logits shapes differ: " + std::to_string(a.n) + "x" +
                                std::to_string(a.k) + " vs " + std::to_string(b.n) + "x" +
                                std::to_string(b.k));
  if (a.n < 1) throw std::invalid_argument("empty logits matrix");
}

std::vector<double> softmax_row(const LogitsMatrix& m, int64_t i) {
  const auto r = m.row(i);
  std::vector<double> row(r.size());
  for (size_t j = 0; j < r.size(); ++j) row[j] = double(r[j]);
  return softmax(row, 1.0);
}

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::ifstream& in, const std::filesystem::path& path) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw IoError("truncated file: " + path.string());
  return v;
}

}  // namespace

LogitsMatrix logits_from_tensor(const Tensor<float>& t) {
  if (t.shape.size() != 2) throw std::invalid_argument("logits tensor must be 2-D");
  LogitsMatrix m;
  m.n = t.shape[0];
  m.k = t.shape[1];
  m.values = t.data;
  for (float v : m.values)
    if (!std::isfinite(v)) throw std::invalid_argument("logits contain non-finite entries");
  return m;
}

void save_logits(const LogitsMatrix& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kLogitsMagic, 4);
  write_u32(out, kLogitsVersion);
  write_u32(out, static_cast<uint32_t>(m.n));
  write_u32(out, static_cast<uint32_t>(m.k));
  out.write(reinterpret_cast<const char*>(m.values.data()),
            static_cast<std::streamsize>(m.values.size() * sizeof(float)));
  if (!out) throw IoError("write failed: " + path.string());
}

LogitsMatrix load_logits(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kLogitsMagic, 4) != 0)
    throw std::invalid_argument("not a logits file (bad magic): " + path.string());
  const uint32_t version = read_u32(in, path);
  if (version != kLogitsVersion)
    throw std::invalid_argument("unsupported logits file version in " + path.string());
  LogitsMatrix m;
  m.n = read_u32(in, path);
  m.k = read_u32(in, path);
  m.values.resize(static_cast<size_t>(m.n * m.k));
  in.read(reinterpret_cast<char*>(m.values.data()),
          static_cast<std::streamsize>(m.values.size() * sizeof(float)));
  if (!in) throw IoError("truncated logits file: " + path.string());
  return m;
}

void save_labels(std::span<const int32_t> labels, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kLabelsMagic, 4);
  write_u32(out, static_cast<uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size() * sizeof(int32_t)));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<int32_t> load_labels(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kLabelsMagic, 4) != 0)
    throw std::invalid_argument("not a labels file (bad magic): " + path.string());
  const uint32_t n = read_u32(in, path);
  std::vector<int32_t> labels(n);
  in.read(reinterpret_cast<char*>(labels.data()),
          static_cast<std::streamsize>(labels.size() * sizeof(int32_t)));
  if (!in) throw IoError("truncated labels file: " + path.string());
  return labels;
}

// ------------------------------------------------------------- metrics

double activation_distance(const LogitsMatrix& a, const LogitsMatrix& b) {
  check_pair(a, b);
  double total = 0.0;
  for (int64_t i = 0; i < a.n; ++i) {
    const auto pa = softmax_row(a, i);
    const auto pb = softmax_row(b, i);
    double d2 = 0.0;
    for (int64_t j = 0; j < a.k; ++j) {
      const double diff = pa[size_t(j)] - pb[size_t(j)];
      d2 += diff * diff;
    }
    total += std::sqrt(d2);
  }
  return total / double(a.n);
}

double rank_disagreement(const LogitsMatrix& a, const LogitsMatrix& b) {
  check_pair(a, b);
  std::vector<double> ra(static_cast<size_t>(a.k)), rb(static_cast<size_t>(a.k));
  double total = 0.0;
  for (int64_t i = 0; i < a.n; ++i) {
    for (int64_t j = 0; j < a.k; ++j) {
      ra[size_t(j)] = double(a.values[size_t(i * a.k + j)]);
      rb[size_t(j)] = double(b.values[size_t(i * a.k + j)]);
    }
    const auto sa = argsort_desc_tiebreak_low(ra);
    const auto sb = argsort_desc_tiebreak_low(rb);
    int64_t mismatches = 0;
    for (int64_t j = 0; j < a.k; ++j)
      if (sa[size_t(j)] != sb[size_t(j)]) ++mismatches;
    total += double(mismatches) / double(a.k);
  }
  return total / double(a.n);
}

double rank_disagreement_kendall(const LogitsMatrix& a, const LogitsMatrix& b) {
  check_pair(a, b);
  std::vector<double> ra(static_cast<size_t>(a.k)), rb(static_cast<size_t>(a.k));
  std::vector<int64_t> pos_a(static_cast<size_t>(a.k)), pos_b(static_cast<size_t>(a.k));
  double total = 0.0;
  const double pairs = double(a.k) * double(a.k - 1) / 2.0;
  for (int64_t i = 0; i < a.n; ++i) {
    for (int64_t j = 0; j < a.k; ++j) {
      ra[size_t(j)] = double(a.values[size_t(i * a.k + j)]);
      rb[size_t(j)] = double(b.values[size_t(i * a.k + j)]);
    }
    const auto sa = argsort_desc_tiebreak_low(ra);
    const auto sb = argsort_desc_tiebreak_low(rb);
    for (int64_t j = 0; j < a.k; ++j) {
      pos_a[size_t(sa[size_t(j)])] = j;
      pos_b[size_t(sb[size_t(j)])] = j;
    }
    int64_t discordant = 0;
    for (int64_t x = 0; x < a.k; ++x)
      for (int64_t y = x + 1; y < a.k; ++y) {
        const bool order_a = pos_a[size_t(x)] < pos_a[size_t(y)];
        const bool order_b = pos_b[size_t(x)] < pos_b[size_t(y)];
        if (order_a != order_b) ++discordant;
      }
    total += double(discordant) / pairs;
  }
  return total / double(a.n);
}

std::vector<int32_t> top1_predictions(const LogitsMatrix& m) {
  std::vector<int32_t> preds(static_cast<size_t>(m.n));
  for (int64_t i = 0; i < m.n; ++i)
    preds[size_t(i)] = static_cast<int32_t>(argmax_tiebreak_low(m.row(i)));
  return preds;
}

double prediction_disagreement(const LogitsMatrix& a, const LogitsMatrix& b) {
  check_pair(a, b);
  const auto pa = top1_predictions(a);
  const auto pb = top1_predictions(b);
  int64_t mismatches = 0;
  for (int64_t i = 0; i < a.n; ++i)
    if (pa[size_t(i)] != pb[size_t(i)]) ++mismatches;
  return double(mismatches) / double(a.n);
}

double js_divergence(const LogitsMatrix& a, const LogitsMatrix& b) {
  check_pair(a, b);
  double total = 0.0;
  for (int64_t i = 0; i < a.n; ++i)
    total += js_divergence_rows(softmax_row(a, i), softmax_row(b, i));
  return total / double(a.n);
}

double variation_of_information(std::span<const int32_t> preds_a,
                                std::span<const int32_t> preds_b) {
  if (preds_a.size() != preds_b.size())
    throw std::invalid_argument("variation_of_information: length mismatch");
  if (preds_a.empty()) throw std::invalid_argument("variation_of_information: empty labelings");
  const double n = double(preds_a.size());
  std::map<int32_t, double> pa, pb;
  std::map<std::pair<int32_t, int32_t>, double> joint;
  for (size_t i = 0; i < preds_a.size(); ++i) {
    pa[preds_a[i]] += 1.0;
    pb[preds_b[i]] += 1.0;
    joint[{preds_a[i], preds_b[i]}] += 1.0;
  }
  double ha = 0.0, hb = 0.0, mi = 0.0;
  for (auto& [k, c] : pa) ha -= (c / n) * std::log(c / n);
  for (auto& [k, c] : pb) hb -= (c / n) * std::log(c / n);
  for (auto& [k, c] : joint) {
    const double pj = c / n;
    mi += pj * std::log(pj / ((pa[k.first] / n) * (pb[k.second] / n)));
  }
  const double voi = ha + hb - 2.0 * mi;
  return std::max(voi, 0.0);  // guard tiny negative rounding
}

double procrustes_distance(const LogitsMatrix& a, const LogitsMatrix& b) {
  check_pair(a, b);
  using MatD = Eigen::MatrixXd;
  MatD pa(a.n, a.k), pb(a.n, a.k);
  for (int64_t i = 0; i < a.n; ++i) {
    const auto ra = softmax_row(a, i);
    const auto rb = softmax_row(b, i);
    for (int64_t j = 0; j < a.k; ++j) {
      pa(i, j) = ra[size_t(j)];
      pb(i, j) = rb[size_t(j)];
    }
  }
  pa.rowwise() -= pa.colwise().mean();
  pb.rowwise() -= pb.colwise().mean();
  const double na = pa.squaredNorm(), nb = pb.squaredNorm();
  const double denom = na + nb;
  if (denom < 1e-30) return 0.0;  // both constant after centering
  const MatD cross = pb.transpose() * pa;
  Eigen::JacobiSVD<MatD> svd(cross);
  if (svd.info() != Eigen::Success)
    throw NumericalError("procrustes: SVD failed (||P_B^T P_A||_F = " +
                         fmt6(cross.norm()) + ")");
  const double nuclear = svd.singularValues().sum();
  const double dist = (na + nb - 2.0 * nuclear) / denom;
  return std::clamp(dist, 0.0, 1.0);
}

AgreementSplit agreement_split(std::span<const int32_t> student_preds,
                               std::span<const int32_t> teacher_preds,
                               std::span<const int32_t> labels) {
  if (student_preds.size() != teacher_preds.size() || student_preds.size() != labels.size())
    throw std::invalid_argument("agreement_split: length mismatch");
  if (student_preds.empty()) throw std::invalid_argument("agreement_split: empty inputs");
  int64_t correct = 0, incorrect = 0;
  for (size_t i = 0; i < student_preds.size(); ++i) {
    if (student_preds[i] != teacher_preds[i]) continue;
    if (teacher_preds[i] == labels[i])
      ++correct;
    else
      ++incorrect;
  }
  const double n = double(student_preds.size());
  return {double(correct) / n, double(incorrect) / n};
}

MetricRow all_metrics(const LogitsMatrix& a, const LogitsMatrix& b) {
  MetricRow row;
  row.activation_distance = activation_distance(a, b);
  row.rank_disagreement = rank_disagreement(a, b);
  row.prediction_disagreement = prediction_disagreement(a, b);
  row.js_divergence = js_divergence(a, b);
  row.variation_of_information =
      variation_of_information(top1_predictions(a), top1_predictions(b));
  row.procrustes_distance = procrustes_distance(a, b);
  return row;
}

}  // namespace kdaudit
