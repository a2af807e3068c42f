#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace evnas {

inline double mean(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean: empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / v.size();
}

inline double standard_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// One-sided Wilcoxon rank-sum (Mann-Whitney) p-value for H1: samples in `a`
/// tend to be larger than samples in `b`. Normal approximation with midranks
/// and tie correction; adequate for the sample sizes used here.
inline double rank_sum_p_value(const std::vector<double>& a, const std::vector<double>& b) {
  const size_t na = a.size(), nb = b.size();
  if (na == 0 || nb == 0) throw std::invalid_argument("rank_sum_p_value: empty sample");
  struct Obs {
    double value;
    bool from_a;
  };
  std::vector<Obs> all;
  all.reserve(na + nb);
  for (double v : a) all.push_back({v, true});
  for (double v : b) all.push_back({v, false});
  std::sort(all.begin(), all.end(), [](const Obs& x, const Obs& y) { return x.value < y.value; });

  const double n = static_cast<double>(na + nb);
  double rank_sum_a = 0.0;
  double tie_term = 0.0;
  size_t i = 0;
  while (i < all.size()) {
    size_t j = i;
    while (j < all.size() && all[j].value == all[i].value) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    for (size_t k = i; k < j; ++k)
      if (all[k].from_a) rank_sum_a += midrank;
    i = j;
  }

  const double u_a = rank_sum_a - static_cast<double>(na) * (na + 1) / 2.0;
  const double mu = static_cast<double>(na) * nb / 2.0;
  const double sigma_sq = static_cast<double>(na) * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (sigma_sq <= 0.0) return u_a > mu ? 0.0 : 1.0;  // all observations tied
  const double z = (u_a - mu - 0.5) / std::sqrt(sigma_sq);  // continuity correction
  return 1.0 - standard_normal_cdf(z);
}

}  // namespace evnas
