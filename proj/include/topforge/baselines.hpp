#pragma once

// Non-learned comparators: a constructive greedy heuristic, a uniformly
// random policy, and an exact solver for small instances.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <limits>
#include <vector>

#include "topforge/core.hpp"
#include "topforge/env.hpp"
#include "topforge/errors.hpp"
#include "topforge/random.hpp"

namespace topforge {

// Agents take turns appending the admissible region with the best prize per
// unit of marginal travel time (detour relative to going straight to the end
// depot). An agent with nothing admissible closes its route.
inline Solution greedy_heuristic(const Instance& inst, int m) {
  FleetState state = init_state(inst, m);
  const int end = inst.end_node();
  std::vector<char> open(static_cast<std::size_t>(m), 1);
  bool progress = true;
  while (progress) {
    progress = false;
    for (int k = 0; k < m; ++k) {
      const auto uk = static_cast<std::size_t>(k);
      if (!open[uk]) continue;
      const Mask mask = feasible_mask(state, k, inst);
      const int cur = state.current_node[uk];
      const double direct = leg_time(inst, cur, end);
      int best = -1;
      double best_ratio = -1.0;
      for (int i = 1; i < end; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const double detour = leg_time(inst, cur, i) + leg_time(inst, i, end) - direct;
        const double ratio = inst.prize(i) / std::max(detour, 1e-12);
        if (ratio > best_ratio) {
          best_ratio = ratio;
          best = i;
        }
      }
      if (best < 0) {
        open[uk] = 0;
        continue;
      }
      state.t_left[uk] -= leg_time(inst, cur, best);
      state.current_node[uk] = best;
      state.visited[static_cast<std::size_t>(best)] = 1;
      state.routes[uk].push_back(best);
      progress = true;
    }
  }
  Solution sol{state.routes};
  for (auto& r : sol.routes) r.push_back(end);
  return sol;
}

inline constexpr int kExhaustiveMaxRegions = 10;

namespace detail {

// Region set as a bitmask over regions 1..n (bit i-1).
using SubsetMask = std::uint32_t;

inline double canonical_reward(SubsetMask s, const Instance& inst) {
  double total = 0.0;
  for (int i = 1; i <= static_cast<int>(inst.n()); ++i)
    if (s >> (i - 1) & 1u) total += inst.prize(i);
  return total;
}

}  // namespace detail

// Exact optimum. Shortest start-to-end paths over every region subset come
// from a Held-Karp recursion; a subset-partition recursion then decides which
// unions of at most m feasible subsets exist. Among unions with the largest
// reward, those with the fewest regions are kept; each subset is visited in
// its shortest order, and the lexicographically smallest list of routes wins.
inline Solution exhaustive_optimal(const Instance& inst, int m) {
  using detail::SubsetMask;
  const int n = static_cast<int>(inst.n());
  if (n > kExhaustiveMaxRegions)
    throw RefusalError("exhaustive_optimal: n = " + std::to_string(n) + " exceeds the limit of " +
                       std::to_string(kExhaustiveMaxRegions));
  if (m < 1) throw InvalidArgument("exhaustive_optimal: fleet size must be >= 1");
  (void)init_state(inst, m);  // rejects instances with an unreachable end depot

  const int end = inst.end_node();
  const SubsetMask full = (SubsetMask{1} << n) - 1;
  const std::size_t subsets = std::size_t{1} << n;
  constexpr double inf = std::numeric_limits<double>::infinity();

  // best[s][j]: shortest path from the start depot through exactly the
  // regions in s, ending at region j+1 (j in s).
  std::vector<double> best(subsets * static_cast<std::size_t>(std::max(n, 1)), inf);
  std::vector<int> prev(best.size(), -1);
  auto at = [n](SubsetMask s, int j) { return static_cast<std::size_t>(s) * static_cast<std::size_t>(n) + j; };
  for (int j = 0; j < n; ++j) best[at(SubsetMask{1} << j, j)] = leg_time(inst, 0, j + 1);
  for (SubsetMask s = 1; s <= full; ++s)
    for (int j = 0; j < n; ++j) {
      if (!(s >> j & 1u)) continue;
      const double base = best[at(s, j)];
      if (base == inf) continue;
      for (int k = 0; k < n; ++k) {
        if (s >> k & 1u) continue;
        const SubsetMask t = s | (SubsetMask{1} << k);
        const double cand = base + leg_time(inst, j + 1, k + 1);
        if (cand < best[at(t, k)]) {
          best[at(t, k)] = cand;
          prev[at(t, k)] = j;
        }
      }
    }

  // Route of minimal duration per subset, and whether it fits the budget.
  std::vector<char> feasible(subsets, 0);
  std::vector<Route> route(subsets);
  feasible[0] = leg_time(inst, 0, end) <= inst.t_max + kFeasibilityEps;
  route[0] = {0, end};
  for (SubsetMask s = 1; s <= full; ++s) {
    double len = inf;
    int last = -1;
    for (int j = 0; j < n; ++j) {
      if (!(s >> j & 1u) || best[at(s, j)] == inf) continue;
      const double cand = best[at(s, j)] + leg_time(inst, j + 1, end);
      if (cand < len) {
        len = cand;
        last = j;
      }
    }
    if (last < 0 || len > inst.t_max + kFeasibilityEps) continue;
    feasible[s] = 1;
    Route r{end};
    SubsetMask cur = s;
    for (int j = last; j >= 0;) {
      r.push_back(j + 1);
      const int p = prev[at(cur, j)];
      cur &= ~(SubsetMask{1} << j);
      j = p;
    }
    r.push_back(0);
    std::reverse(r.begin(), r.end());
    route[s] = std::move(r);
  }

  // reach[k][u]: u can be split into at most k feasible subsets. Feasible
  // subsets are closed under taking subsets, so "at most k" and "exactly k
  // possibly empty" coincide.
  std::vector<std::vector<char>> reach(static_cast<std::size_t>(m) + 1, std::vector<char>(subsets, 0));
  reach[0][0] = 1;
  for (int k = 1; k <= m; ++k) {
    auto& cur = reach[static_cast<std::size_t>(k)];
    const auto& before = reach[static_cast<std::size_t>(k - 1)];
    for (SubsetMask u = 0; u <= full; ++u) {
      if (before[u]) {
        cur[u] = 1;
        continue;
      }
      for (SubsetMask s = u; s; s = (s - 1) & u)
        if (feasible[s] && before[u & ~s]) {
          cur[u] = 1;
          break;
        }
    }
  }

  // Peels off one route per agent, smallest route first.
  auto peel = [&](SubsetMask u) {
    Solution sol;
    SubsetMask rest = u;
    for (int k = m; k >= 1; --k) {
      const auto& after = reach[static_cast<std::size_t>(k - 1)];
      const Route* pick_route = nullptr;
      SubsetMask pick_set = 0;
      for (SubsetMask s = rest;; s = (s - 1) & rest) {
        if (feasible[s] && after[rest & ~s] && (!pick_route || route[s] < *pick_route)) {
          pick_route = &route[s];
          pick_set = s;
        }
        if (s == 0) break;
      }
      if (!pick_route) throw std::logic_error("exhaustive_optimal: partition reconstruction failed");
      sol.routes.push_back(*pick_route);
      rest &= ~pick_set;
    }
    return sol;
  };

  const auto& top = reach[static_cast<std::size_t>(m)];
  double best_reward = 0.0;
  int best_count = 0;
  for (SubsetMask u = 1; u <= full; ++u) {
    if (!top[u]) continue;
    const double r = detail::canonical_reward(u, inst);
    if (r > best_reward || (r == best_reward && std::popcount(u) < best_count)) {
      best_reward = r;
      best_count = std::popcount(u);
    }
  }
  // Among equally good unions, the lexicographically smallest route list.
  Solution chosen = peel(0);
  bool have = best_count == 0;
  for (SubsetMask u = 1; u <= full && best_count > 0; ++u) {
    if (!top[u] || std::popcount(u) != best_count || detail::canonical_reward(u, inst) != best_reward) continue;
    Solution cand = peel(u);
    if (!have || cand.routes < chosen.routes) {
      chosen = std::move(cand);
      have = true;
    }
  }
  return chosen;
}

// Rollout of a policy that is uniform over each agent's admissible nodes.
inline Rollout random_rollout(const Instance& inst, int m, Rng& rng) {
  const std::size_t t = static_cast<std::size_t>(inst.node_count());
  PolicyFn uniform = [&](const FleetState& state, const Mask& mask) {
    const std::size_t rows = static_cast<std::size_t>(state.m());
    std::vector<real> p(rows * t, real(0));
    for (std::size_t k = 0; k < rows; ++k) {
      const auto first = mask.begin() + static_cast<std::ptrdiff_t>(k * t);
      const auto count = std::count(first, first + static_cast<std::ptrdiff_t>(t), 1);
      for (std::size_t j = 0; j < t; ++j)
        if (mask[k * t + j]) p[k * t + j] = real(1) / static_cast<real>(count);
    }
    return Tensor::matrix(rows, t, std::move(p));
  };
  return run_episode(inst, m, uniform, DecodeMode::Sample, rng);
}

}  // namespace topforge
