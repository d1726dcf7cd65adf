#include "rttdp/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "rttdp/errors.hpp"

namespace rttdp {

namespace {

void require_classes(std::size_t k, std::size_t size, const char* who) {
  if (k < 2) throw ContractError(std::string(who) + ": no derangement exists for K < 2");
  if (size != k * k) {
    throw ContractError(std::string(who) + ": expected " + std::to_string(k * k) + " entries, got " +
                        std::to_string(size));
  }
}

}  // namespace

ConfusionState::ConfusionState(std::size_t k, double beta)
    : classes(k), momentum(beta), c(k * k, k ? 1.0 / static_cast<double>(k) : 0.0), mapping(k) {
  for (std::size_t i = 0; i < k; ++i) mapping[i] = static_cast<int>((i + 1) % k);
}

std::vector<double> blended_confusion(const ConfusionState& state, std::span<const double> posteriors,
                                      std::span<const int> labels) {
  const std::size_t k = state.classes;
  if (posteriors.size() != labels.size() * k) {
    throw ContractError("update_confusion: " + std::to_string(posteriors.size()) +
                        " posterior entries for " + std::to_string(labels.size()) + " labels");
  }
  std::vector<double> sums(k * k, 0.0);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ContractError("update_confusion: label " + std::to_string(y) + " out of range");
    }
    ++counts[static_cast<std::size_t>(y)];
    for (std::size_t q = 0; q < k; ++q) sums[static_cast<std::size_t>(y) * k + q] += posteriors[i * k + q];
  }
  std::vector<double> out = state.c;
  const double b = state.momentum;
  for (std::size_t row = 0; row < k; ++row) {
    if (counts[row] == 0) continue;
    for (std::size_t q = 0; q < k; ++q) {
      const double mean = sums[row * k + q] / static_cast<double>(counts[row]);
      out[row * k + q] = b * out[row * k + q] + (1.0 - b) * mean;
    }
  }
  return out;
}

void update_confusion(ConfusionState& state, std::span<const double> posteriors,
                      std::span<const int> labels) {
  state.c = blended_confusion(state, posteriors, labels);
}

std::vector<int> greedy_mapping(std::span<const double> c, std::size_t k) {
  require_classes(k, c.size(), "greedy_mapping");
  std::vector<double> m(c.begin(), c.end());
  for (std::size_t i = 0; i < k; ++i) m[i * k + i] = 0.0;
  std::vector<int> mapping(k, -1);
  std::vector<bool> row_done(k, false), col_used(k, false);

  for (std::size_t step = 0; step < k; ++step) {
    // The pseudo-code's raw argmax can strand the last row on its own column
    // (or pick a zeroed cell when all remaining mass is gone). Pairs that make
    // the remaining derangement infeasible are skipped; otherwise the order of
    // preference is exactly the normalized row maximum, ties to lowest index.
    const std::size_t remaining = k - step;
    auto feasible = [&](std::size_t r, std::size_t q) {
      if (r == q || row_done[r] || col_used[q]) return false;
      if (remaining != 2) return true;
      // After this pick one row and one column remain; they must differ.
      std::size_t last_row = k, last_col = k;
      for (std::size_t i = 0; i < k; ++i) {
        if (!row_done[i] && i != r) last_row = i;
        if (!col_used[i] && i != q) last_col = i;
      }
      return last_row != last_col;
    };
    double best = -1.0;
    std::size_t best_row = k, best_col = k;
    for (std::size_t r = 0; r < k; ++r) {
      if (row_done[r]) continue;
      double norm = 0.0;
      for (std::size_t q = 0; q < k; ++q) norm += std::abs(m[r * k + q]);
      norm = std::max(norm, 1e-12);
      double row_best = -1.0;
      std::size_t row_col = k;
      for (std::size_t q = 0; q < k; ++q) {
        if (!feasible(r, q)) continue;
        const double v = m[r * k + q] / norm;
        if (v > row_best) {
          row_best = v;
          row_col = q;
        }
      }
      if (row_col < k && row_best > best) {
        best = row_best;
        best_row = r;
        best_col = row_col;
      }
    }
    mapping[best_row] = static_cast<int>(best_col);
    row_done[best_row] = true;
    col_used[best_col] = true;
    for (std::size_t q = 0; q < k; ++q) m[best_row * k + q] = 0.0;
    for (std::size_t r = 0; r < k; ++r) m[r * k + best_col] = 0.0;
  }
  return mapping;
}

std::vector<int> exact_mapping(std::span<const double> c, std::size_t k) {
  require_classes(k, c.size(), "exact_mapping");
  // Minimize cost = -C with the diagonal priced out of any optimal solution.
  double span = 0.0;
  for (double v : c) span = std::max(span, std::abs(v));
  const double forbidden = (span + 1.0) * static_cast<double>(k) * 4.0;
  auto cost = [&](std::size_t i, std::size_t j) { return i == j ? forbidden : -c[i * k + j]; };

  // Shortest augmenting path Hungarian algorithm, 1-based potentials.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(k + 1, 0.0), v(k + 1, 0.0);
  std::vector<std::size_t> p(k + 1, 0), way(k + 1, 0);
  for (std::size_t i = 1; i <= k; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(k + 1, inf);
    std::vector<bool> used(k + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= k; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= k; ++j) {
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
  std::vector<int> mapping(k);
  for (std::size_t j = 1; j <= k; ++j) mapping[p[j] - 1] = static_cast<int>(j - 1);
  return mapping;
}

std::vector<int> solve_mapping(std::span<const double> c, std::size_t k, MappingSolver solver) {
  return solver == MappingSolver::Greedy ? greedy_mapping(c, k) : exact_mapping(c, k);
}

double mapping_objective(std::span<const double> c, std::size_t k, std::span<const int> mapping) {
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) s += c[i * k + static_cast<std::size_t>(mapping[i])];
  return s;
}

bool is_derangement(std::span<const int> mapping) {
  std::vector<bool> seen(mapping.size(), false);
  for (std::size_t i = 0; i < mapping.size(); ++i) {
    const int m = mapping[i];
    if (m < 0 || static_cast<std::size_t>(m) >= mapping.size()) return false;
    if (static_cast<std::size_t>(m) == i || seen[static_cast<std::size_t>(m)]) return false;
    seen[static_cast<std::size_t>(m)] = true;
  }
  return true;
}

}  // namespace rttdp
