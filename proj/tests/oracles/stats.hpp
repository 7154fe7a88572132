#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <vector>

namespace oracle {

// Running mean m_n = m_{n-1} + (x_n - m_{n-1}) / n, per element.
inline std::vector<double> streaming_mean(const std::vector<std::vector<double>>& rows) {
  std::vector<double> m(rows.front().size(), 0.0);
  double n = 0.0;
  for (const auto& r : rows) {
    n += 1.0;
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += (r[j] - m[j]) / n;
  }
  return m;
}

// NMI from the contingency table in long double, arithmetic-mean normalised.
inline double nmi_reference(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<int, std::map<int, long double>> table;
  std::map<int, long double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[a[i]][b[i]] += 1;
    ra[a[i]] += 1;
    rb[b[i]] += 1;
  }
  const long double n = static_cast<long double>(a.size());
  long double mi = 0, ha = 0, hb = 0;
  for (const auto& [x, row] : table) {
    for (const auto& [y, c] : row) mi += c / n * std::log(c * n / (ra[x] * rb[y]));
  }
  for (const auto& [_, c] : ra) ha -= c / n * std::log(c / n);
  for (const auto& [_, c] : rb) hb -= c / n * std::log(c / n);
  if (ha == 0 && hb == 0) return 1.0;
  return static_cast<double>(mi / ((ha + hb) / 2));
}

// Mean silhouette coefficient with Euclidean distance.
inline double silhouette(const std::vector<std::vector<double>>& x, const std::vector<int>& labels) {
  const std::size_t n = x.size();
  auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t d = 0; d < x[i].size(); ++d) s += (x[i][d] - x[j][d]) * (x[i][d] - x[j][d]);
    return std::sqrt(s);
  };
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::map<int, std::pair<double, std::size_t>> per;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      auto& e = per[labels[j]];
      e.first += dist(i, j);
      ++e.second;
    }
    const auto own = per[labels[i]];
    if (own.second == 0) continue;
    const double a = own.first / static_cast<double>(own.second);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [lab, e] : per) {
      if (lab != labels[i] && e.second) b = std::min(b, e.first / static_cast<double>(e.second));
    }
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(n);
}

}  // namespace oracle
