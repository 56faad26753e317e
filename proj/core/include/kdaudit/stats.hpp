#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kdaudit/distill.hpp"

namespace kdaudit {

struct MannWhitneyResult {
  double u = 0.0;    // min(U_a, U_b), midrank ties
  double u_a = 0.0;  // U statistic of the first sample
  double p = 0.0;    // two-sided
  bool exact = false;
};

// Two-sided Mann-Whitney U. Exact p by full enumeration when |a|+|b| <= 16
// and the pooled sample is tie-free; otherwise the normal approximation with
// tie and continuity corrections. Requires |a| >= 3 and |b| >= 3; throws
// DegenerateSamples when every value in both samples is identical.
MannWhitneyResult mann_whitney_u(std::span<const double> a, std::span<const double> b);

// One-sided p for the alternative "a is stochastically smaller than b"
// (small U_a). Exact under the same conditions as above.
double mann_whitney_one_sided_less(std::span<const double> a, std::span<const double> b);

// Sample standard deviation (n-1 denominator) divided by sqrt(n); n >= 2.
double sem(std::span<const double> samples);

double mean(std::span<const double> samples);
double median(std::span<const double> samples);

// Spearman rank correlation with midranks.
double spearman(std::span<const double> x, std::span<const double> y);

// ---------------------------------------------------------- significance

// Per-(condition, alpha) samples: metric name -> one value per student seed.
struct MetricSamples {
  Condition::Kind kind = Condition::Kind::SIDDO;
  double alpha = 0.0;
  std::map<std::string, std::vector<double>> by_metric;
};

struct SignificanceRow {
  std::string metric;
  std::string condition = "kd";
  double alpha = 0.0;
  double u_vs_siddo = 0.0, p_vs_siddo = 0.0;
  double u_vs_rcd = 0.0, p_vs_rcd = 0.0;
  std::string direction;  // better | worse | mixed (KD median vs both controls)
  bool significant = false;
  std::string status = "ok";  // ok | degenerate | incomplete:<gap>
};

// Lower-is-better orientation for each reported metric (accuracy- and
// agreement-style metrics prefer higher values).
bool metric_lower_is_better(const std::string& metric);

// One row per (metric, KD alpha): the KD sample tested two-sided against
// SIDDO and against the matching-alpha RCD sample; flagged significant only
// when both tests pass at 0.05 and the KD median is favorable against both
// controls. Throws IncompleteMatrix when a needed condition is absent and
// std::invalid_argument when any cell has fewer than 3 runs.
std::vector<SignificanceRow> build_significance_table(const std::vector<MetricSamples>& cells);

std::string significance_table_csv(const std::vector<SignificanceRow>& rows);

}  // namespace kdaudit
