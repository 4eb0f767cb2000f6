// Generates one small instance and solves it with every solver.

#include <iostream>

#include "topforge/topforge.hpp"

int main() {
  using namespace topforge;

  GenConfig gen;
  gen.n = 8;
  gen.m = 2;
  gen.t_max = 2.0;
  gen.seed = 42;
  const Instance inst = generate_instance(gen, 0);

  NetConfig net_cfg;
  net_cfg.hidden_dim = 32;
  net_cfg.num_blocks = 2;
  net_cfg.num_heads = 4;
  const PolicyNet net(net_cfg, 7);

  Rng rng(3);
  const Rollout policy = greedy_rollout(net, inst);
  const Solution heuristic = greedy_heuristic(inst, inst.m);
  const Solution optimum = exhaustive_optimal(inst, inst.m);
  const Rollout random = random_rollout(inst, inst.m, rng);

  auto show = [&](const char* name, const Solution& sol) {
    std::cout << name << ": " << solution_to_json(sol, inst).dump() << '\n';
  };
  show("untrained policy", policy.solution);
  show("greedy heuristic", heuristic);
  show("random", random.solution);
  show("optimum", optimum);
}
