#pragma once

#include <limits>
#include <vector>

#include "imr/geometry.hpp"

namespace imr {

struct Assignment {
  std::vector<std::size_t> match;  // row i is assigned column match[i]
  double cost = 0.0;
};

// Minimum-cost perfect matching on a square cost matrix (row-major n x n),
// shortest augmenting path form of the Kuhn-Munkres algorithm, O(n^3).
inline Assignment solve_assignment(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) throw ArgumentError("solve_assignment: cost matrix is not n x n");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      const double* row = &cost[(i0 - 1) * n];
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = row[j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  Assignment a;
  a.match.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) a.match[p[j] - 1] = j - 1;
  for (std::size_t i = 0; i < n; ++i) a.cost += cost[i * n + a.match[i]];
  return a;
}

// Optimal one-to-one matching of two equal-size point sets under squared
// Euclidean cost.
inline Assignment hungarian_match(const std::vector<Vec3>& P, const std::vector<Vec3>& Q) {
  if (P.size() != Q.size()) {
    throw ArgumentError(detail::concat("hungarian_match: point sets differ in size (", P.size(), " vs ", Q.size(), ")"));
  }
  const std::size_t n = P.size();
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = (P[i] - Q[j]).squaredNorm();
  return solve_assignment(cost, n);
}

}  // namespace imr
