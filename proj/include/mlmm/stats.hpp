#pragma once

// Small statistical helpers shared across the library: t/normal tail
// probabilities, empirical quantiles, and a stable hash for manifests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

namespace mlmm {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

inline double two_sided_p_normal(double z) { return 2.0 * normal_cdf(-std::fabs(z)); }

inline double two_sided_p_t(double t, double df) {
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(dist, -std::fabs(t));
}

// P(T > t): the directional p-value used for the rejection indicator.
inline double upper_tail_p_t(double t, double df) {
  boost::math::students_t dist(df);
  return boost::math::cdf(boost::math::complement(dist, t));
}

// Upper-tail critical value, e.g. t_critical(df, 0.975) for a 95% CI.
inline double t_critical(double df, double p) {
  boost::math::students_t dist(df);
  return boost::math::quantile(dist, p);
}

// Type-7 empirical quantile (linear interpolation between order statistics).
inline double quantile_type7(std::vector<double> v, double p) {
  if (v.empty()) throw std::invalid_argument("quantile_type7: empty sample");
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("quantile_type7: p outside [0,1]");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Sample SD (n-1 denominator).
inline double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (static_cast<double>(v.size()) - 1.0));
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

// 12 significant digits; the serialization precision for all CSV output.
inline std::string format_g12(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return std::string(buf);
}

}  // namespace mlmm
