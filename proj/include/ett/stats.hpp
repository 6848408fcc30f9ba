#pragma once

// Summary statistics and the significance tests used by the benchmark
// harness: exact one-sided binomial sign test for paired accuracy
// comparisons, chi-square goodness of fit for sampler conformance, and
// Spearman rank correlation for monotonic-trend checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace ett::stats {

inline double mean(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("stats::mean: empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / double(v.size());
}

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

// Half-width of the 95% normal-approximation confidence interval.
inline double ci95(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  return 1.96 * sample_sd(v) / std::sqrt(double(v.size()));
}

// P(X >= k) for X ~ Binomial(n, 1/2), exact via log factorials.
inline double binomial_tail_geq(int k, int n) {
  if (n < 0 || k < 0 || k > n) throw std::invalid_argument("binomial_tail_geq: bad arguments");
  double log_half_n = -double(n) * std::log(2.0);
  double p = 0.0;
  for (int i = k; i <= n; ++i) {
    double lc = std::lgamma(double(n) + 1.0) - std::lgamma(double(i) + 1.0) -
                std::lgamma(double(n - i) + 1.0);
    p += std::exp(lc + log_half_n);
  }
  return std::min(p, 1.0);
}

struct SignTestResult {
  int wins = 0;
  int losses = 0;
  int ties = 0;
  double p_one_sided = 1.0;  // H1: a > b
};

// Paired one-sided sign test of H1: a tends to exceed b. Ties are dropped,
// which is the standard treatment.
inline SignTestResult paired_sign_test(const std::vector<double>& a,
                                       const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument("paired_sign_test: size mismatch or empty");
  SignTestResult r;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i])
      ++r.wins;
    else if (a[i] < b[i])
      ++r.losses;
    else
      ++r.ties;
  }
  int n = r.wins + r.losses;
  r.p_one_sided = n == 0 ? 1.0 : binomial_tail_geq(r.wins, n);
  return r;
}

namespace detail {

// Regularized lower incomplete gamma P(a, x) by series expansion (x < a+1).
inline double gamma_p_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double del = sum;
  for (int i = 0; i < 500; ++i) {
    ap += 1.0;
    del *= x / ap;
    sum += del;
    if (std::abs(del) < std::abs(sum) * 1e-15) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Regularized upper incomplete gamma Q(a, x) by continued fraction (x >= a+1),
// modified Lentz iteration.
inline double gamma_q_cf(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 500; ++i) {
    double an = -double(i) * (double(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  return h * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

}  // namespace detail

// Regularized upper incomplete gamma Q(a, x).
inline double gamma_q(double a, double x) {
  if (a <= 0.0 || x < 0.0) throw std::invalid_argument("gamma_q: bad arguments");
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
  return detail::gamma_q_cf(a, x);
}

// Survival function of the chi-square distribution.
inline double chi2_sf(double stat, int df) {
  if (df <= 0) throw std::invalid_argument("chi2_sf: df must be positive");
  return gamma_q(0.5 * df, 0.5 * stat);
}

// Goodness-of-fit p-value of observed counts against equal expected counts.
inline double chi2_uniform_p(const std::vector<int64_t>& observed) {
  if (observed.size() < 2) throw std::invalid_argument("chi2_uniform_p: need >= 2 bins");
  int64_t total = 0;
  for (int64_t o : observed) total += o;
  if (total == 0) throw std::invalid_argument("chi2_uniform_p: empty sample");
  double expected = double(total) / double(observed.size());
  double stat = 0.0;
  for (int64_t o : observed) {
    double d = double(o) - expected;
    stat += d * d / expected;
  }
  return chi2_sf(stat, int(observed.size()) - 1);
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

namespace detail {

// Mid-ranks with ties averaged.
inline std::vector<double> ranks(const std::vector<double>& v) {
  size_t n = v.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> r(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    double avg = 0.5 * (double(i) + double(j)) + 1.0;
    for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace detail

// Spearman rank correlation (Pearson correlation of mid-ranks).
inline double spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 3)
    throw std::invalid_argument("spearman_rho: need paired samples of size >= 3");
  auto rx = detail::ranks(x);
  auto ry = detail::ranks(y);
  double mx = mean(rx), my = mean(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < rx.size(); ++i) {
    double dx = rx[i] - mx, dy = ry[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("spearman_rho: constant input");
  return sxy / std::sqrt(sxx * syy);
}

// One-sided p-value for H1: rho < 0, normal approximation z = rho*sqrt(n-1).
inline double spearman_p_negative(double rho, size_t n) {
  if (n < 4) throw std::invalid_argument("spearman_p_negative: sample too small");
  double z = rho * std::sqrt(double(n - 1));
  return normal_cdf(z);
}

inline uint64_t fnv1a(const void* data, size_t bytes) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace ett::stats
