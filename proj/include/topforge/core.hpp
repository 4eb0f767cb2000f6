#pragma once

// Team Orienteering Problem domain types: instances, solutions, feasibility
// checking and reward evaluation.
//
// Node numbering is fixed: 0 is the start depot, 1..n are the regions and
// n+1 is the end depot.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "topforge/errors.hpp"

namespace topforge {

inline constexpr double kFeasibilityEps = 1e-9;

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

struct Instance {
  std::vector<Point> coords;   // regions 1..n, stored 0-based
  std::vector<double> prizes;  // one per region
  Point depot_start;
  Point depot_end;
  double t_max = 0.0;
  double speed = 1.0;
  int m = 1;  // fleet size the instance was generated for

  std::size_t n() const noexcept { return coords.size(); }
  int end_node() const noexcept { return static_cast<int>(coords.size()) + 1; }
  int node_count() const noexcept { return static_cast<int>(coords.size()) + 2; }

  // Coordinates of node index i (depots included).
  const Point& node(int i) const {
    if (i < 0 || i > end_node())
      throw InvalidRoute("node index " + std::to_string(i) + " outside [0, " +
                         std::to_string(end_node()) + "]");
    if (i == 0) return depot_start;
    if (i == end_node()) return depot_end;
    return coords[static_cast<std::size_t>(i - 1)];
  }

  // Prize of node index i; depots give nothing.
  double prize(int i) const {
    if (i < 0 || i > end_node())
      throw InvalidRoute("node index " + std::to_string(i) + " outside [0, " +
                         std::to_string(end_node()) + "]");
    if (i == 0 || i == end_node()) return 0.0;
    return prizes[static_cast<std::size_t>(i - 1)];
  }

  friend bool operator==(const Instance&, const Instance&) = default;
};

using Route = std::vector<int>;

struct Solution {
  std::vector<Route> routes;  // one per agent

  std::size_t m() const noexcept { return routes.size(); }

  friend bool operator==(const Solution&, const Solution&) = default;
};

inline double travel_time(const Point& a, const Point& b, double speed = 1.0) {
  if (!std::isfinite(a.x) || !std::isfinite(a.y) || !std::isfinite(b.x) || !std::isfinite(b.y))
    throw InvalidArgument("travel_time: non-finite coordinate");
  if (!std::isfinite(speed) || speed <= 0.0)
    throw InvalidArgument("travel_time: speed must be positive and finite");
  return std::hypot(a.x - b.x, a.y - b.y) / speed;
}

// Travel time between two node indices of an instance.
inline double leg_time(const Instance& inst, int from, int to) {
  return travel_time(inst.node(from), inst.node(to), inst.speed);
}

inline double route_duration(const Route& route, const Instance& inst) {
  double total = 0.0;
  for (std::size_t i = 1; i < route.size(); ++i) total += leg_time(inst, route[i - 1], route[i]);
  if (route.size() == 1) (void)inst.node(route[0]);
  return total;
}

enum class ViolationKind {
  BadStart,          // route does not begin at the start depot
  BadEnd,            // route does not end at the end depot
  BadIndex,          // index outside [0, n+1] or a depot inside the route
  RepeatedInRoute,   // region visited twice by the same agent
  RepeatedAcross,    // region visited by more than one agent
  TimeBudget,        // route_duration exceeds t_max
  NoAgents,
};

inline const char* to_string(ViolationKind k) {
  switch (k) {
    case ViolationKind::BadStart: return "bad-start";
    case ViolationKind::BadEnd: return "bad-end";
    case ViolationKind::BadIndex: return "bad-index";
    case ViolationKind::RepeatedInRoute: return "repeated-in-route";
    case ViolationKind::RepeatedAcross: return "repeated-across-agents";
    case ViolationKind::TimeBudget: return "time-budget";
    case ViolationKind::NoAgents: return "no-agents";
  }
  return "unknown";
}

struct Violation {
  ViolationKind kind;
  int agent = -1;  // 0-based agent index, -1 when not applicable
  int node = -1;   // offending node index, -1 when not applicable
  std::string message;
};

struct FeasibilityReport {
  bool ok = true;
  std::vector<Violation> violations;

  bool has(ViolationKind k) const {
    return std::any_of(violations.begin(), violations.end(),
                       [k](const Violation& v) { return v.kind == k; });
  }
};

inline FeasibilityReport check_feasibility(const Solution& sol, const Instance& inst) {
  FeasibilityReport rep;
  auto report = [&rep](ViolationKind kind, int agent, int node, std::string msg) {
    rep.ok = false;
    rep.violations.push_back({kind, agent, node, std::move(msg)});
  };
  if (sol.routes.empty()) {
    report(ViolationKind::NoAgents, -1, -1, "solution has no agents");
    return rep;
  }

  const int end = inst.end_node();
  std::vector<int> owner(inst.n() + 1, -1);
  for (std::size_t k = 0; k < sol.routes.size(); ++k) {
    const Route& r = sol.routes[k];
    const int agent = static_cast<int>(k);
    const std::string who = "agent " + std::to_string(agent);
    if (r.empty() || r.front() != 0)
      report(ViolationKind::BadStart, agent, r.empty() ? -1 : r.front(), who + " does not start at the start depot");
    if (r.empty() || r.back() != end)
      report(ViolationKind::BadEnd, agent, r.empty() ? -1 : r.back(), who + " does not end at the end depot");

    bool indices_ok = true;
    std::vector<int> seen_here;
    for (std::size_t pos = 0; pos < r.size(); ++pos) {
      const int v = r[pos];
      const bool endpoint = pos == 0 || pos + 1 == r.size();
      if (v < 0 || v > end) {
        indices_ok = false;
        report(ViolationKind::BadIndex, agent, v, who + " uses invalid node " + std::to_string(v));
        continue;
      }
      if (v == 0 || v == end) {
        if (!endpoint) report(ViolationKind::BadIndex, agent, v, who + " passes through a depot mid-route");
        continue;
      }
      if (std::find(seen_here.begin(), seen_here.end(), v) != seen_here.end()) {
        report(ViolationKind::RepeatedInRoute, agent, v,
               "region " + std::to_string(v) + " visited twice by " + who);
        continue;
      }
      seen_here.push_back(v);
      auto& o = owner[static_cast<std::size_t>(v)];
      if (o >= 0 && o != agent)
        report(ViolationKind::RepeatedAcross, agent, v,
               "region " + std::to_string(v) + " visited twice (agents " + std::to_string(o) + " and " +
                   std::to_string(agent) + ")");
      else
        o = agent;
    }

    if (indices_ok) {
      const double d = route_duration(r, inst);
      if (d > inst.t_max + kFeasibilityEps) {
        std::ostringstream os;
        os << "time budget exceeded, " << who << " (" << d << " > " << inst.t_max << ")";
        report(ViolationKind::TimeBudget, agent, -1, os.str());
      }
    }
  }
  return rep;
}

// Sum of prizes of the distinct regions appearing in any route, accumulated
// in ascending region order so equal region sets give bit-equal rewards.
inline double total_reward(const Solution& sol, const Instance& inst) {
  std::vector<char> visited(inst.n() + 2, 0);
  for (const Route& r : sol.routes)
    for (int v : r) {
      (void)inst.node(v);
      visited[static_cast<std::size_t>(v)] = 1;
    }
  double total = 0.0;
  for (int i = 1; i <= static_cast<int>(inst.n()); ++i)
    if (visited[static_cast<std::size_t>(i)]) total += inst.prize(i);
  return total;
}

inline std::size_t regions_visited(const Solution& sol, const Instance& inst) {
  std::vector<char> visited(inst.n() + 2, 0);
  for (const Route& r : sol.routes)
    for (int v : r)
      if (v > 0 && v < inst.end_node()) visited[static_cast<std::size_t>(v)] = 1;
  return static_cast<std::size_t>(std::count(visited.begin(), visited.end(), 1));
}

inline double sum_of_prizes(const Instance& inst) {
  double s = 0.0;
  for (double p : inst.prizes) s += p;
  return s;
}

}  // namespace topforge
