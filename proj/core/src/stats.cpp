#include "kdaudit/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "kdaudit/error.hpp"
#include "kdaudit/util.hpp"

namespace kdaudit {

namespace {

// Midranks of the pooled sample; returns (ranks for a, ranks for b, tie flag,
// tie-group sizes).
struct PooledRanks {
  std::vector<double> ranks_a, ranks_b;
  std::vector<int64_t> tie_groups;
  bool has_ties = false;
};

PooledRanks pooled_midranks(std::span<const double> a, std::span<const double> b) {
  struct Entry {
    double value;
    bool from_a;
  };
  std::vector<Entry> pooled;
  pooled.reserve(a.size() + b.size());
  for (double v : a) pooled.push_back({v, true});
  for (double v : b) pooled.push_back({v, false});
  std::stable_sort(pooled.begin(), pooled.end(),
                   [](const Entry& x, const Entry& y) { return x.value < y.value; });
  PooledRanks out;
  out.ranks_a.reserve(a.size());
  out.ranks_b.reserve(b.size());
  size_t i = 0;
  while (i < pooled.size()) {
    size_t j = i;
    while (j < pooled.size() && pooled[j].value == pooled[i].value) ++j;
    const double midrank = (double(i + 1) + double(j)) / 2.0;  // ranks are 1-based
    const auto group = static_cast<int64_t>(j - i);
    out.tie_groups.push_back(group);
    if (group > 1) out.has_ties = true;
    for (size_t t = i; t < j; ++t)
      (pooled[t].from_a ? out.ranks_a : out.ranks_b).push_back(midrank);
    i = j;
  }
  return out;
}

// Null distribution of U_a for tie-free samples: counts of rank subsets by
// rank sum, via the standard dynamic program over ranks 1..N choose n.
std::vector<double> exact_u_distribution(int64_t n, int64_t m) {
  const int64_t N = n + m;
  const int64_t max_sum = n * N;  // max possible rank sum for sample a
  // dp[c][s] = number of ways to choose c ranks from those seen so far with sum s
  std::vector<std::vector<double>> dp(
      static_cast<size_t>(n + 1), std::vector<double>(static_cast<size_t>(max_sum + 1), 0.0));
  dp[0][0] = 1.0;
  for (int64_t r = 1; r <= N; ++r)
    for (int64_t c = std::min(n, r); c >= 1; --c)
      for (int64_t s = max_sum; s >= r; --s)
        dp[size_t(c)][size_t(s)] += dp[size_t(c - 1)][size_t(s - r)];
  // U_a = rank_sum - n(n+1)/2 ranges over 0..nm
  const int64_t base = n * (n + 1) / 2;
  std::vector<double> dist(static_cast<size_t>(n * m + 1), 0.0);
  for (int64_t s = base; s <= max_sum; ++s) {
    const int64_t u = s - base;
    if (u <= n * m) dist[size_t(u)] = dp[size_t(n)][size_t(s)];
  }
  return dist;
}

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

struct ApproxParams {
  double mu, sigma;
};

ApproxParams normal_params(int64_t n, int64_t m, const std::vector<int64_t>& tie_groups) {
  const double N = double(n + m);
  double tie_term = 0.0;
  for (int64_t t : tie_groups) tie_term += double(t) * double(t) * double(t) - double(t);
  const double var =
      (double(n) * double(m) / 12.0) * ((N + 1.0) - tie_term / (N * (N - 1.0)));
  if (var <= 0.0)
    throw DegenerateSamples("mann-whitney: all pooled values identical, p undefined");
  return {double(n) * double(m) / 2.0, std::sqrt(var)};
}

}  // namespace

MannWhitneyResult mann_whitney_u(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 3 || b.size() < 3)
    throw std::invalid_argument("mann_whitney_u: need at least 3 values per sample");
  const auto n = static_cast<int64_t>(a.size());
  const auto m = static_cast<int64_t>(b.size());
  const PooledRanks pr = pooled_midranks(a, b);
  const double rank_sum_a = std::accumulate(pr.ranks_a.begin(), pr.ranks_a.end(), 0.0);
  const double u_a = rank_sum_a - double(n) * double(n + 1) / 2.0;
  const double u_b = double(n) * double(m) - u_a;

  MannWhitneyResult res;
  res.u_a = u_a;
  res.u = std::min(u_a, u_b);
  if (!pr.has_ties && n + m <= 16) {
    const auto dist = exact_u_distribution(n, m);
    const double total = std::accumulate(dist.begin(), dist.end(), 0.0);
    double tail = 0.0;
    for (size_t u = 0; u < dist.size(); ++u)
      if (double(u) <= res.u + 1e-9) tail += dist[u];
    res.p = std::min(1.0, 2.0 * tail / total);
    res.exact = true;
  } else {
    const auto [mu, sigma] = normal_params(n, m, pr.tie_groups);
    const double z = std::max(0.0, std::abs(u_a - mu) - 0.5) / sigma;
    res.p = std::min(1.0, 2.0 * normal_sf(z));
    res.exact = false;
  }
  return res;
}

double mann_whitney_one_sided_less(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 3 || b.size() < 3)
    throw std::invalid_argument("mann_whitney: need at least 3 values per sample");
  const auto n = static_cast<int64_t>(a.size());
  const auto m = static_cast<int64_t>(b.size());
  const PooledRanks pr = pooled_midranks(a, b);
  const double rank_sum_a = std::accumulate(pr.ranks_a.begin(), pr.ranks_a.end(), 0.0);
  const double u_a = rank_sum_a - double(n) * double(n + 1) / 2.0;
  if (!pr.has_ties && n + m <= 16) {
    const auto dist = exact_u_distribution(n, m);
    const double total = std::accumulate(dist.begin(), dist.end(), 0.0);
    double tail = 0.0;
    for (size_t u = 0; u < dist.size(); ++u)
      if (double(u) <= u_a + 1e-9) tail += dist[u];
    return tail / total;
  }
  const auto [mu, sigma] = normal_params(n, m, pr.tie_groups);
  const double z = (mu - u_a - 0.5) / sigma;  // small U_a => large z => small p
  return normal_sf(z);
}

double sem(std::span<const double> samples) {
  if (samples.size() < 2) throw std::invalid_argument("sem: need at least 2 samples");
  const double n = double(samples.size());
  const double mu = mean(samples);
  double ss = 0.0;
  for (double v : samples) ss += (v - mu) * (v - mu);
  return std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

double mean(std::span<const double> samples) {
  if (samples.empty()) throw std::invalid_argument("mean of empty sample");
  return std::accumulate(samples.begin(), samples.end(), 0.0) / double(samples.size());
}

double median(std::span<const double> samples) {
  if (samples.empty()) throw std::invalid_argument("median of empty sample");
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const size_t mid = sorted.size() / 2;
  return sorted.size() % 2 == 1 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("spearman: need two equal samples of size >= 2");
  auto midranks = [](std::span<const double> v) {
    std::vector<size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    size_t i = 0;
    while (i < idx.size()) {
      size_t j = i;
      while (j < idx.size() && v[idx[j]] == v[idx[i]]) ++j;
      const double midrank = (double(i + 1) + double(j)) / 2.0;
      for (size_t t = i; t < j; ++t) ranks[idx[t]] = midrank;
      i = j;
    }
    return ranks;
  };
  const auto rx = midranks(x);
  const auto ry = midranks(y);
  const double mx = mean(rx), my = mean(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0)
    throw DegenerateSamples("spearman: constant ranks, correlation undefined");
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------- significance

bool metric_lower_is_better(const std::string& metric) {
  return !(metric.find("accuracy") != std::string::npos ||
           metric.find("agree") != std::string::npos);
}

std::vector<SignificanceRow> build_significance_table(const std::vector<MetricSamples>& cells) {
  const MetricSamples* siddo = nullptr;
  std::vector<const MetricSamples*> kd_cells;
  std::map<double, const MetricSamples*> rcd_by_alpha;
  for (const auto& cell : cells) {
    if (cell.kind == Condition::Kind::SIDDO) siddo = &cell;
    if (cell.kind == Condition::Kind::KD || cell.kind == Condition::Kind::FeatureKD)
      kd_cells.push_back(&cell);
    if (cell.kind == Condition::Kind::RCD) rcd_by_alpha[cell.alpha] = &cell;
  }
  if (kd_cells.empty()) throw IncompleteMatrix("significance table: no kd condition present");
  if (!siddo) throw IncompleteMatrix("significance table: missing control condition siddo");

  std::vector<SignificanceRow> rows;
  for (const MetricSamples* kd : kd_cells) {
    const auto rcd_it = rcd_by_alpha.find(kd->alpha);
    if (rcd_it == rcd_by_alpha.end())
      throw IncompleteMatrix("significance table: missing rcd condition at alpha " +
                             fmt6(kd->alpha));
    const MetricSamples* rcd = rcd_it->second;
    for (const auto& [metric, kd_values] : kd->by_metric) {
      const auto siddo_it = siddo->by_metric.find(metric);
      const auto rcd_metric_it = rcd->by_metric.find(metric);
      if (siddo_it == siddo->by_metric.end() || rcd_metric_it == rcd->by_metric.end())
        throw IncompleteMatrix("significance table: metric " + metric +
                               " missing from a control condition");
      if (kd_values.size() < 3 || siddo_it->second.size() < 3 ||
          rcd_metric_it->second.size() < 3)
        throw std::invalid_argument("significance table: need >= 3 runs per condition");

      SignificanceRow row;
      row.metric = metric;
      row.condition = to_string(kd->kind);
      row.alpha = kd->alpha;
      const bool lower = metric_lower_is_better(metric);
      const double kd_median = median(kd_values);
      const double siddo_median = median(siddo_it->second);
      const double rcd_median = median(rcd_metric_it->second);
      const bool better_siddo = lower ? kd_median < siddo_median : kd_median > siddo_median;
      const bool better_rcd = lower ? kd_median < rcd_median : kd_median > rcd_median;
      row.direction = (better_siddo && better_rcd) ? "better"
                      : (!better_siddo && !better_rcd) ? "worse"
                                                       : "mixed";
      try {
        const auto vs_siddo = mann_whitney_u(kd_values, siddo_it->second);
        const auto vs_rcd = mann_whitney_u(kd_values, rcd_metric_it->second);
        row.u_vs_siddo = vs_siddo.u;
        row.p_vs_siddo = vs_siddo.p;
        row.u_vs_rcd = vs_rcd.u;
        row.p_vs_rcd = vs_rcd.p;
        row.significant = vs_siddo.p < 0.05 && vs_rcd.p < 0.05 && better_siddo && better_rcd;
      } catch (const DegenerateSamples&) {
        row.u_vs_siddo = row.u_vs_rcd = std::numeric_limits<double>::quiet_NaN();
        row.p_vs_siddo = row.p_vs_rcd = std::numeric_limits<double>::quiet_NaN();
        row.significant = false;
        row.status = "degenerate";
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string significance_table_csv(const std::vector<SignificanceRow>& rows) {
  std::ostringstream out;
  out << "metric,condition,alpha,u_vs_siddo,p_vs_siddo,u_vs_rcd,p_vs_rcd,direction,significant\n";
  for (const auto& r : rows) {
    const std::string sig = r.status == "ok" ? (r.significant ? "true" : "false") : r.status;
    out << r.metric << ',' << r.condition << ',' << fmt6(r.alpha) << ',' << fmt6(r.u_vs_siddo)
        << ',' << fmt6(r.p_vs_siddo) << ',' << fmt6(r.u_vs_rcd) << ',' << fmt6(r.p_vs_rcd)
        << ',' << r.direction << ',' << sig << '\n';
  }
  return out.str();
}

}  // namespace kdaudit
