#pragma once

// Fleet decoding simulator: state, feasibility masks, ordered per-agent node
// selection with blocking, and complete rollouts.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "topforge/core.hpp"
#include "topforge/errors.hpp"
#include "topforge/policy.hpp"
#include "topforge/random.hpp"
#include "topforge/tensor.hpp"

namespace topforge {

struct FleetState {
  std::vector<int> current_node;  // per agent
  std::vector<double> t_left;     // per agent
  std::vector<char> visited;      // indexed by node, n+2 entries; only regions are set
  std::vector<char> finished;     // per agent, at the end depot
  std::vector<Route> routes;      // partial routes, each starting at 0
  int step = 1;                   // fleet step index, starts at 1

  int m() const { return static_cast<int>(current_node.size()); }
  bool all_finished() const {
    return std::all_of(finished.begin(), finished.end(), [](char f) { return f != 0; });
  }
};

inline FleetState init_state(const Instance& inst, int m) {
  if (m < 1) throw InvalidArgument("init_state: fleet size must be >= 1");
  const double direct = travel_time(inst.depot_start, inst.depot_end, inst.speed);
  if (direct > inst.t_max + kFeasibilityEps)
    throw InfeasibleInstance("end depot unreachable: depot-to-depot time " + std::to_string(direct) +
                             " exceeds t_max " + std::to_string(inst.t_max));
  FleetState s;
  s.current_node.assign(static_cast<std::size_t>(m), 0);
  s.t_left.assign(static_cast<std::size_t>(m), inst.t_max);
  s.visited.assign(inst.n() + 2, 0);
  s.finished.assign(static_cast<std::size_t>(m), 0);
  s.routes.assign(static_cast<std::size_t>(m), Route{0});
  return s;
}

// Admissible next nodes of one agent; blocked (optional, indexed by node)
// holds regions taken earlier in the current fleet step.
inline Mask feasible_mask(const FleetState& state, int agent, const Instance& inst,
                          const std::vector<char>* blocked = nullptr) {
  if (agent < 0 || agent >= state.m()) throw InvalidArgument("feasible_mask: agent index out of range");
  const std::size_t k = static_cast<std::size_t>(agent);
  const int end = inst.end_node();
  Mask mask(static_cast<std::size_t>(inst.node_count()), 0);
  if (state.finished[k]) {
    mask[static_cast<std::size_t>(end)] = 1;
    return mask;
  }
  const int cur = state.current_node[k];
  const double budget = state.t_left[k] + kFeasibilityEps;
  for (int i = 1; i < end; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    if (state.visited[ui] || (blocked && (*blocked)[ui])) continue;
    if (leg_time(inst, cur, i) + leg_time(inst, i, end) <= budget) mask[ui] = 1;
  }
  if (leg_time(inst, cur, end) <= budget) mask[static_cast<std::size_t>(end)] = 1;
  return mask;
}

// m x (n+2) row-major admissibility for the whole fleet at the start of a step.
inline Mask fleet_mask(const FleetState& state, const Instance& inst) {
  Mask all;
  all.reserve(static_cast<std::size_t>(state.m() * inst.node_count()));
  for (int k = 0; k < state.m(); ++k) {
    Mask row = feasible_mask(state, k, inst);
    all.insert(all.end(), row.begin(), row.end());
  }
  return all;
}

enum class DecodeMode { Sample, Greedy };

struct Selection {
  std::vector<int> actions;
  std::vector<double> effective_prob;  // probability of the pick after blocking and re-normalization
  std::vector<char> forced;            // finished, single admissible choice, or empty row after blocking
  std::vector<std::vector<int>> blocked;  // regions blocked for each agent at its turn
};

namespace detail {

// Re-normalized row of one agent after zeroing blocked columns. Returns the
// sum of the surviving mass.
inline double surviving_row(std::span<const real> row, const std::vector<int>& blocked, std::vector<double>& out) {
  out.assign(row.begin(), row.end());
  for (int b : blocked) out[static_cast<std::size_t>(b)] = 0.0;
  double s = 0.0;
  for (double v : out) s += v;
  return s;
}

}  // namespace detail

// Agents choose in ascending index order. A region picked by an agent is
// zeroed in the rows of every later agent, which are then re-normalized.
// replay, when given, fixes each agent's action instead of choosing.
inline Selection select_actions(const Tensor& probs, const FleetState& state, const Instance& inst,
                                DecodeMode mode, Rng& rng, const std::vector<int>* replay = nullptr) {
  const std::size_t m = static_cast<std::size_t>(state.m());
  const std::size_t t = static_cast<std::size_t>(inst.node_count());
  if (probs.rows() != m || probs.cols() != t)
    throw ShapeError("select_actions: probabilities of shape " + shape_str(probs.shape()) + " for " +
                     std::to_string(m) + " agents and " + std::to_string(t) + " nodes");
  const int end = inst.end_node();
  Selection sel;
  sel.actions.resize(m);
  sel.effective_prob.resize(m);
  sel.forced.resize(m);
  sel.blocked.resize(m);
  std::vector<int> taken;
  std::vector<double> row;
  for (std::size_t k = 0; k < m; ++k) {
    sel.blocked[k] = taken;
    if (state.finished[k]) {
      sel.actions[k] = end;
      sel.effective_prob[k] = 1.0;
      sel.forced[k] = 1;
      continue;
    }
    const double total = detail::surviving_row(probs.data().subspan(k * t, t), taken, row);
    const auto positive = std::count_if(row.begin(), row.end(), [](double v) { return v > 0.0; });
    int choice = -1;
    if (total <= 0.0 || positive == 0) {
      choice = end;
      sel.effective_prob[k] = 1.0;
      sel.forced[k] = 1;
    } else if (replay) {
      choice = (*replay)[k];
      if (choice < 0 || choice > end || !(row[static_cast<std::size_t>(choice)] > 0.0))
        throw ContractViolation("replayed action " + std::to_string(choice) + " of agent " + std::to_string(k) +
                                " has zero probability");
      sel.forced[k] = positive == 1;
    } else if (positive == 1) {
      choice = static_cast<int>(std::find_if(row.begin(), row.end(), [](double v) { return v > 0.0; }) - row.begin());
      sel.forced[k] = 1;
    } else if (mode == DecodeMode::Greedy) {
      choice = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    } else {
      const double u = rng.uniform() * total;
      double cum = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        if (!(row[j] > 0.0)) continue;
        choice = static_cast<int>(j);
        cum += row[j];
        if (cum > u) break;
      }
    }
    if (sel.forced[k]) {
      sel.effective_prob[k] = 1.0;
    } else {
      sel.effective_prob[k] = taken.empty() ? row[static_cast<std::size_t>(choice)]
                                            : row[static_cast<std::size_t>(choice)] / total;
    }
    sel.actions[k] = choice;
    if (choice != end) taken.push_back(choice);
  }
  return sel;
}

// Advances every agent by one node. Each action must be admissible given the
// picks of the agents before it in this step.
inline FleetState apply_actions(const FleetState& state, const std::vector<int>& actions, const Instance& inst) {
  if (actions.size() != state.current_node.size())
    throw ContractViolation("apply_actions: expected one action per agent");
  FleetState next = state;
  const int end = inst.end_node();
  std::vector<char> blocked(inst.n() + 2, 0);
  for (int k = 0; k < state.m(); ++k) {
    const auto uk = static_cast<std::size_t>(k);
    const int a = actions[uk];
    if (a < 0 || a > end) throw ContractViolation("apply_actions: node index " + std::to_string(a) + " out of range");
    const Mask mask = feasible_mask(state, k, inst, &blocked);
    if (!mask[static_cast<std::size_t>(a)])
      throw ContractViolation("apply_actions: node " + std::to_string(a) + " is not admissible for agent " +
                              std::to_string(k));
    if (state.finished[uk]) continue;  // absorbing self-loop at the end depot
    next.t_left[uk] -= leg_time(inst, state.current_node[uk], a);
    next.current_node[uk] = a;
    next.routes[uk].push_back(a);
    if (a == end) {
      next.finished[uk] = 1;
    } else {
      next.visited[static_cast<std::size_t>(a)] = 1;
      blocked[static_cast<std::size_t>(a)] = 1;
      if (leg_time(inst, a, end) > next.t_left[uk] + kFeasibilityEps)
        throw ContractViolation("apply_actions: end depot no longer reachable for agent " + std::to_string(k));
    }
  }
  ++next.step;
  return next;
}

// [t_left, x, y] per agent.
inline Tensor agent_features(const FleetState& state, const Instance& inst) {
  std::vector<real> f;
  f.reserve(static_cast<std::size_t>(state.m()) * 3);
  for (int k = 0; k < state.m(); ++k) {
    const Point& p = inst.node(state.current_node[static_cast<std::size_t>(k)]);
    f.push_back(state.t_left[static_cast<std::size_t>(k)]);
    f.push_back(p.x);
    f.push_back(p.y);
  }
  return Tensor::matrix(static_cast<std::size_t>(state.m()), 3, std::move(f));
}

// Per-agent query rows for the current fleet state.
inline Tensor context_embedding(const PolicyNet& net, const DecoderCache& cache, const FleetState& state,
                                const Instance& inst) {
  return net.context_embedding(cache, agent_features(state, inst));
}

struct Rollout {
  Solution solution;
  double log_prob = 0.0;  // sum over free actions of log effective probability
  double reward = 0.0;
  Tensor log_prob_tensor;  // scalar; carries the graph when recording, undefined if no free action
  std::vector<std::vector<int>> actions;  // per fleet step, one node per agent
  std::size_t free_actions = 0;
};

// Probabilities m x (n+2) for a fleet state, given its admissibility mask.
using PolicyFn = std::function<Tensor(const FleetState&, const Mask&)>;

// Runs one episode until every agent reaches the end depot.
inline Rollout run_episode(const Instance& inst, int m, const PolicyFn& policy, DecodeMode mode, Rng& rng,
                           const std::vector<std::vector<int>>* replay = nullptr) {
  FleetState state = init_state(inst, m);
  const int safety = static_cast<int>(inst.n()) + 2;
  const std::size_t t = static_cast<std::size_t>(inst.node_count());
  Rollout out;
  Tensor acc;
  while (!state.all_finished()) {
    if (state.step > safety)
      throw std::logic_error("rollout exceeded " + std::to_string(safety) + " fleet steps (masking bug)");
    const Mask mask = fleet_mask(state, inst);
    Tensor probs = policy(state, mask);
    const std::vector<int>* fixed = nullptr;
    if (replay) {
      const auto idx = static_cast<std::size_t>(state.step - 1);
      if (idx >= replay->size()) throw ContractViolation("replay ended before all agents finished");
      fixed = &(*replay)[idx];
    }
    Selection sel = select_actions(probs, state, inst, mode, rng, fixed);
    for (std::size_t k = 0; k < sel.actions.size(); ++k) {
      if (sel.forced[k]) continue;
      ++out.free_actions;
      out.log_prob += std::log(sel.effective_prob[k]);
      Tensor term = log(pick(probs, k, static_cast<std::size_t>(sel.actions[k])));
      if (!sel.blocked[k].empty()) {
        std::vector<real> keep(t, real(1));
        for (int b : sel.blocked[k]) keep[static_cast<std::size_t>(b)] = real(0);
        Tensor row = slice_rows(probs, k, 1);
        term = sub(term, log(sum(mul(row, Tensor::matrix(1, t, std::move(keep))))));
      }
      acc = acc.defined() ? add(acc, term) : term;
    }
    out.actions.push_back(sel.actions);
    state = apply_actions(state, sel.actions, inst);
  }
  out.solution.routes = state.routes;
  out.reward = total_reward(out.solution, inst);
  out.log_prob_tensor = acc;
  if (acc.defined()) out.log_prob = acc.item();
  return out;
}

// Rollouts of the attention policy over a batch of instances, encoded
// together. With recording on, each Rollout carries its log-probability graph.
inline std::vector<Rollout> rollout_batch(const PolicyNet& net, const std::vector<Instance>& instances,
                                          DecodeMode mode, Rng& rng, NormMode norm = NormMode::Infer,
                                          int m_override = 0,
                                          const std::vector<std::vector<std::vector<int>>>* replay = nullptr) {
  std::vector<Tensor> inputs;
  inputs.reserve(instances.size());
  for (const auto& inst : instances) inputs.push_back(net.input_embedding(inst));
  std::vector<Tensor> nodes = net.encode_batch(inputs, norm);
  std::vector<Rollout> out;
  out.reserve(instances.size());
  for (std::size_t b = 0; b < instances.size(); ++b) {
    const Instance& inst = instances[b];
    DecoderCache cache = net.prepare_decoder(nodes[b]);
    PolicyFn fn = [&](const FleetState& state, const Mask& mask) {
      return net.decode_step(cache, context_embedding(net, cache, state, inst), mask).probs;
    };
    out.push_back(run_episode(inst, m_override > 0 ? m_override : inst.m, fn, mode, rng,
                              replay ? &(*replay)[b] : nullptr));
  }
  return out;
}

inline Rollout rollout(const PolicyNet& net, const Instance& inst, int m, DecodeMode mode, Rng& rng,
                       NormMode norm = NormMode::Infer) {
  return rollout_batch(net, {inst}, mode, rng, norm, m).front();
}

// Greedy inference rollout without recording.
inline Rollout greedy_rollout(const PolicyNet& net, const Instance& inst, int m = 0) {
  NoGradGuard guard;
  Rng unused(0);
  return rollout(net, inst, m > 0 ? m : inst.m, DecodeMode::Greedy, unused);
}

// Re-evaluates a recorded action sequence under the policy.
inline Rollout replay_rollout(const PolicyNet& net, const Instance& inst, int m,
                              const std::vector<std::vector<int>>& actions, NormMode norm = NormMode::Infer) {
  Rng unused(0);
  std::vector<std::vector<std::vector<int>>> rep{actions};
  return rollout_batch(net, {inst}, DecodeMode::Sample, unused, norm, m, &rep).front();
}

// ---------------------------------------------------------------------------
// Solution dump

inline nlohmann::json solution_to_json(const Solution& sol, const Instance& inst) {
  nlohmann::json j;
  j["routes"] = sol.routes;
  j["reward"] = total_reward(sol, inst);
  std::vector<double> durations;
  for (const auto& r : sol.routes) durations.push_back(route_duration(r, inst));
  j["duration_per_agent"] = durations;
  j["t_max"] = inst.t_max;
  return j;
}

inline Solution solution_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("routes") || !j["routes"].is_array())
    throw SchemaError("solution must be an object with a 'routes' array");
  Solution s;
  for (const auto& r : j["routes"]) {
    if (!r.is_array()) throw SchemaError("each route must be an array of node indices");
    s.routes.push_back(r.get<Route>());
  }
  return s;
}

}  // namespace topforge
