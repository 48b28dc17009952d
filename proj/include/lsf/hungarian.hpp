#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "lsf/array.hpp"
#include "lsf/error.hpp"

namespace lsf {

namespace detail {

// Shortest-augmenting-path Hungarian method with row/column potentials.
// Solves rows x cols (rows <= cols) and returns the optimal total cost.
// `row_ids` and `col_ids` select the active submatrix of `cost`.
inline double hungarian_optimum(const Array2D<double>& cost, const std::vector<std::size_t>& row_ids,
                                const std::vector<std::size_t>& col_ids,
                                std::vector<std::size_t>* assignment = nullptr) {
  const std::size_t n = row_ids.size();
  const std::size_t m = col_ids.size();
  if (n == 0) {
    if (assignment) assignment->clear();
    return 0.0;
  }
  constexpr double kInf = std::numeric_limits<double>::infinity();
  auto a = [&](std::size_t i, std::size_t j) { return cost(row_ids[i - 1], col_ids[j - 1]); };

  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
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
    } while (j0 != 0);
  }

  std::vector<std::size_t> row_to_col(n, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cost(row_ids[i], col_ids[row_to_col[i]]);
  if (assignment) *assignment = std::move(row_to_col);
  return total;
}

}  // namespace detail

/// Sum of cost[i][assignment[i]] accumulated in row order.
inline double assignment_cost(const Array2D<double>& cost, const std::vector<std::size_t>& assignment) {
  double total = 0.0;
  for (std::size_t i = 0; i < assignment.size(); ++i) total += cost(i, assignment[i]);
  return total;
}

/// Minimum-cost assignment of every row to a distinct column (rows <= cols).
///
/// Among optimal assignments the lexicographically smallest column vector is returned:
/// rows are fixed one at a time to the smallest column that still admits an optimal
/// completion, each completion being re-solved exactly.
inline std::vector<std::size_t> hungarian_min_cost(const Array2D<double>& cost) {
  const std::size_t rows = cost.rows();
  const std::size_t cols = cost.cols();
  if (rows > cols) {
    throw Error(Errc::ShapeError, "cost matrix has more rows (" + std::to_string(rows) +
                                      ") than columns (" + std::to_string(cols) + ")");
  }
  for (double c : cost.values()) {
    if (!std::isfinite(c)) throw Error(Errc::NonFiniteCost, "cost matrix contains a non-finite entry");
  }
  if (rows == 0) return {};

  std::vector<std::size_t> all_rows(rows), all_cols(cols);
  for (std::size_t i = 0; i < rows; ++i) all_rows[i] = i;
  for (std::size_t j = 0; j < cols; ++j) all_cols[j] = j;
  const double optimum = detail::hungarian_optimum(cost, all_rows, all_cols);

  double scale = 1.0;
  for (double c : cost.values()) scale = std::max(scale, std::abs(c));
  const double tolerance = 1e-9 * scale * static_cast<double>(rows);

  std::vector<std::size_t> result;
  result.reserve(rows);
  std::vector<char> taken(cols, 0);
  double fixed_cost = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    std::vector<std::size_t> rest_rows(all_rows.begin() + static_cast<std::ptrdiff_t>(i) + 1, all_rows.end());
    bool placed = false;
    for (std::size_t j = 0; j < cols && !placed; ++j) {
      if (taken[j]) continue;
      std::vector<std::size_t> rest_cols;
      for (std::size_t jj = 0; jj < cols; ++jj) {
        if (!taken[jj] && jj != j) rest_cols.push_back(jj);
      }
      const double completion = detail::hungarian_optimum(cost, rest_rows, rest_cols);
      if (fixed_cost + cost(i, j) + completion <= optimum + tolerance) {
        result.push_back(j);
        taken[j] = 1;
        fixed_cost += cost(i, j);
        placed = true;
      }
    }
    // Unreachable for finite input: the column used by an optimal solution always qualifies.
    if (!placed) throw Error(Errc::NonFiniteCost, "assignment search lost optimality");
  }
  return result;
}

}  // namespace lsf
