#pragma once

// Command-line front end: gen | train | eval | bench | solve.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
// TOPFORGE_THREADS caps the worker count of parallel commands.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "topforge/baselines.hpp"
#include "topforge/core.hpp"
#include "topforge/env.hpp"
#include "topforge/errors.hpp"
#include "topforge/instance_gen.hpp"
#include "topforge/policy.hpp"
#include "topforge/trainer.hpp"

namespace topforge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Loads a policy from a training directory (state.json + policy.topf).
inline PolicyNet load_policy(const std::filesystem::path& dir) {
  std::ifstream in(dir / "state.json");
  if (!in) throw std::runtime_error("'" + dir.string() + "' is not a checkpoint directory (no state.json)");
  const TrainConfig cfg = config_from_json(nlohmann::json::parse(in).at("config"));
  PolicyNet net(cfg.net);
  net.load(dir / "policy.topf");
  return net;
}

namespace detail {

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

inline std::string fmt(double v, int precision = 10) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

template <typename F>
double time_ms(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  GenConfig gen;
  int count = 0;
  std::string out;
};

inline int cmd_gen(const GenArgs& a, std::ostream& out) {
  if (a.count < 1) throw UsageError("--count must be >= 1");
  if (a.out.empty()) throw UsageError("--out is required");
  a.gen.validate();
  save_dataset(generate_dataset(a.gen, static_cast<std::size_t>(a.count)), a.out);
  out << "wrote " << a.count << " instances (n=" << a.gen.n << ", m=" << a.gen.m << ", t_max=" << a.gen.t_max
      << ", prizes=" << to_string(a.gen.prize_scheme) << ", seed=" << a.gen.seed << ") to " << a.out << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;  // key = value file
  std::string out;     // checkpoint directory
  std::string resume;  // continue from this checkpoint directory
  int epochs = 0;      // overrides config when > 0
  std::string validation;  // optional dataset; generated from the config otherwise
  bool quiet = false;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  std::optional<Trainer> trainer;
  std::filesystem::path dir;
  if (!a.resume.empty()) {
    dir = a.out.empty() ? std::filesystem::path(a.resume) : std::filesystem::path(a.out);
    trainer.emplace(Trainer::resume(a.resume));
  } else {
    if (a.config.empty()) throw UsageError("train needs --config (or --resume)");
    if (a.out.empty()) throw UsageError("--out is required");
    TrainConfig cfg = load_train_config(a.config);
    if (a.epochs > 0) cfg.epochs = a.epochs;
    cfg.validate();
    dir = a.out;
    trainer.emplace(cfg);
  }
  if (a.epochs > 0) trainer->mutable_config().epochs = a.epochs;
  const TrainConfig& cfg = trainer->config();

  std::vector<Instance> val;
  if (!a.validation.empty()) {
    val = load_dataset(a.validation);
  } else {
    GenConfig vg = cfg.gen;
    vg.seed = derive_seed(cfg.gen.seed, 0x76616c6964ULL);
    val = generate_dataset(vg, static_cast<std::size_t>(cfg.validation_size));
  }
  const std::size_t workers = worker_count();
  std::filesystem::create_directories(dir);
  if (trainer->epochs_done() == 0) {
    const double initial = validate(trainer->net(), val, workers);
    if (!a.quiet) out << "epoch 0 validation " << detail::fmt(initial, 6) << '\n';
  }
  while (trainer->epochs_done() < cfg.epochs) {
    const EpochStats st = trainer->run_epoch();
    Trainer::append_stats(dir / "stats.csv", st);
    const double v = validate(trainer->net(), val, workers);
    if (!a.quiet)
      out << "epoch " << trainer->epochs_done() << " sampled " << detail::fmt(st.mean_sampled, 6) << " greedy "
          << detail::fmt(st.mean_greedy, 6) << " loss " << detail::fmt(st.mean_loss, 6) << " grad "
          << detail::fmt(st.grad_norm, 4) << " validation " << detail::fmt(v, 6) << " (" << detail::fmt(st.seconds, 3)
          << " s)\n";
    if (trainer->epochs_done() % cfg.checkpoint_every == 0 || trainer->epochs_done() == cfg.epochs)
      trainer->save(dir);
  }
  trainer->save(dir);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string data;
  std::string checkpoint;  // enables the transformer solver
  std::vector<std::string> solvers;  // empty: every applicable solver
  std::string out;         // CSV path; stdout when empty
  std::string dump;        // optional JSON-lines solution dump
  std::string prize_label = "unspecified";
  std::uint64_t seed = 0;
  int workers = 1;
};

struct SolverResult {
  Solution solution;
  double ms = 0.0;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (a.data.empty()) throw UsageError("--data is required");
  const std::vector<Instance> data = load_dataset(a.data);
  if (data.empty()) throw std::runtime_error("dataset '" + a.data + "' is empty");
  std::optional<PolicyNet> net;
  if (!a.checkpoint.empty()) net.emplace(load_policy(a.checkpoint));

  std::vector<std::string> solvers = a.solvers;
  const bool small = std::all_of(data.begin(), data.end(),
                                 [](const Instance& i) { return static_cast<int>(i.n()) <= kExhaustiveMaxRegions; });
  if (solvers.empty()) {
    if (net) solvers.push_back("transformer");
    solvers.insert(solvers.end(), {"greedy", "random"});
    if (small) solvers.push_back("oracle");
  }

  std::ofstream dump_file;
  if (!a.dump.empty()) dump_file.open(a.dump, std::ios::trunc);
  std::ofstream csv_file;
  if (!a.out.empty()) csv_file.open(a.out, std::ios::trunc);
  std::ostream& csv = a.out.empty() ? out : csv_file;
  csv << "solver,n,m,tmax,prize_scheme,mean_reward,mean_nodes,p50_ms,p95_ms\n";

  const std::size_t workers = worker_count(static_cast<std::size_t>(std::max(a.workers, 1)));
  for (const std::string& name : solvers) {
    if (name == "transformer" && !net) throw UsageError("solver 'transformer' needs --checkpoint");
    if (name == "oracle" && !small) throw UsageError("solver 'oracle' needs n <= " + std::to_string(kExhaustiveMaxRegions));
    if (name != "transformer" && name != "greedy" && name != "random" && name != "oracle")
      throw UsageError("unknown solver '" + name + "'");
    std::vector<SolverResult> res(data.size());
    parallel_for(data.size(), workers, [&](std::size_t i) {
      const Instance& inst = data[i];
      Solution sol;
      const double ms = detail::time_ms([&] {
        if (name == "transformer") {
          sol = greedy_rollout(*net, inst).solution;
        } else if (name == "greedy") {
          sol = greedy_heuristic(inst, inst.m);
        } else if (name == "random") {
          Rng rng(a.seed, i);
          sol = random_rollout(inst, inst.m, rng).solution;
        } else {
          sol = exhaustive_optimal(inst, inst.m);
        }
      });
      res[i] = {std::move(sol), ms};
    });
    double reward = 0.0, nodes = 0.0;
    std::vector<double> ms;
    for (std::size_t i = 0; i < data.size(); ++i) {
      reward += total_reward(res[i].solution, data[i]);
      nodes += static_cast<double>(regions_visited(res[i].solution, data[i]));
      ms.push_back(res[i].ms);
      if (dump_file) {
        nlohmann::json j = solution_to_json(res[i].solution, data[i]);
        j["solver"] = name;
        j["index"] = i;
        dump_file << j.dump() << '\n';
      }
    }
    const double cnt = static_cast<double>(data.size());
    const Instance& head = data.front();
    csv << name << ',' << head.n() << ',' << head.m << ',' << detail::fmt(head.t_max) << ',' << a.prize_label << ','
        << detail::fmt(reward / cnt, 12) << ',' << detail::fmt(nodes / cnt, 12) << ','
        << detail::fmt(detail::percentile(ms, 0.5), 6) << ',' << detail::fmt(detail::percentile(ms, 0.95), 6) << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  std::string checkpoint;  // random-initialized network when empty
  NetConfig net;
  int count = 50;
  int batch = 0;       // batch-N mode size; 0 uses count
  int repeats = 3;
  std::uint64_t seed = 0;
  std::string out;
  std::vector<std::string> sizes{"small", "medium", "large"};
};

struct BenchRow {
  std::string config;
  int n = 0, m = 0;
  std::string mode;
  int batch = 0;
  double mean_ms = 0.0, p50_ms = 0.0, p95_ms = 0.0;
};

inline GenConfig bench_scenario(const std::string& size, std::uint64_t seed) {
  GenConfig g;
  g.t_max = 2.0;
  g.seed = seed;
  if (size == "small") g.n = 20, g.m = 2;
  else if (size == "medium") g.n = 50, g.m = 3;
  else if (size == "large") g.n = 100, g.m = 5;
  else throw UsageError("unknown bench size '" + size + "' (expected small|medium|large)");
  return g;
}

// Wall time of greedy rollouts only: instances are generated and the model
// is built before the clock starts.
inline std::vector<BenchRow> run_bench(const BenchArgs& a) {
  if (a.count < 1 || a.repeats < 1) throw UsageError("--count and --repeats must be >= 1");
  std::optional<PolicyNet> net;
  if (!a.checkpoint.empty()) net.emplace(load_policy(a.checkpoint));
  else net.emplace(a.net, a.seed);
  std::vector<BenchRow> rows;
  for (const std::string& size : a.sizes) {
    const GenConfig g = bench_scenario(size, a.seed);
    const auto data = generate_dataset(g, static_cast<std::size_t>(a.count));
    (void)greedy_rollout(*net, data.front());  // warm-up

    std::vector<double> single;
    for (const auto& inst : data) single.push_back(detail::time_ms([&] { (void)greedy_rollout(*net, inst); }));
    double mean = 0.0;
    for (double v : single) mean += v;
    rows.push_back({size, g.n, g.m, "batch1", 1, mean / static_cast<double>(single.size()),
                    detail::percentile(single, 0.5), detail::percentile(single, 0.95)});

    const std::size_t bsz = static_cast<std::size_t>(a.batch > 0 ? std::min(a.batch, a.count) : a.count);
    std::vector<Instance> chunk(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(bsz));
    std::vector<double> per_instance;
    for (int r = 0; r < a.repeats; ++r) {
      NoGradGuard guard;
      Rng rng(0);
      const double ms = detail::time_ms([&] { (void)rollout_batch(*net, chunk, DecodeMode::Greedy, rng); });
      per_instance.push_back(ms / static_cast<double>(bsz));
    }
    double bmean = 0.0;
    for (double v : per_instance) bmean += v;
    rows.push_back({size, g.n, g.m, "batchN", static_cast<int>(bsz), bmean / static_cast<double>(per_instance.size()),
                    detail::percentile(per_instance, 0.5), detail::percentile(per_instance, 0.95)});
  }
  return rows;
}

inline int cmd_bench(const BenchArgs& a, std::ostream& out) {
  const auto rows = run_bench(a);
  std::ofstream file;
  if (!a.out.empty()) file.open(a.out, std::ios::trunc);
  std::ostream& csv = a.out.empty() ? out : file;
  csv << "config,n,m,mode,batch,mean_ms,p50_ms,p95_ms\n";
  for (const auto& r : rows)
    csv << r.config << ',' << r.n << ',' << r.m << ',' << r.mode << ',' << r.batch << ',' << detail::fmt(r.mean_ms, 6)
        << ',' << detail::fmt(r.p50_ms, 6) << ',' << detail::fmt(r.p95_ms, 6) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// solve

struct SolveArgs {
  std::string instance = "-";  // path or '-' for stdin
  std::string solver = "greedy";
  std::string checkpoint;
  int m = 0;  // overrides the instance's fleet size when > 0
  std::uint64_t seed = 0;
};

inline int cmd_solve(const SolveArgs& a, std::istream& in, std::ostream& out) {
  nlohmann::json j;
  try {
    if (a.instance == "-") {
      j = nlohmann::json::parse(in);
    } else {
      std::ifstream f(a.instance);
      if (!f) throw std::runtime_error("cannot read instance '" + a.instance + "'");
      j = nlohmann::json::parse(f);
    }
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(e.what(), 1);
  }
  const Instance inst = instance_from_json(j);
  const int m = a.m > 0 ? a.m : inst.m;
  Solution sol;
  if (a.solver == "greedy") {
    sol = greedy_heuristic(inst, m);
  } else if (a.solver == "oracle") {
    sol = exhaustive_optimal(inst, m);
  } else if (a.solver == "random") {
    Rng rng(a.seed);
    sol = random_rollout(inst, m, rng).solution;
  } else if (a.solver == "transformer") {
    if (a.checkpoint.empty()) throw UsageError("solver 'transformer' needs --checkpoint");
    const PolicyNet net = load_policy(a.checkpoint);
    sol = greedy_rollout(net, inst, m).solution;
  } else {
    throw UsageError("unknown solver '" + a.solver + "'");
  }
  out << solution_to_json(sol, inst).dump() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::istream& in = std::cin, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Team orienteering toolkit: instances, attention policy training, evaluation"};
  app.require_subcommand(1);

  GenArgs gen;
  std::string gen_scheme = "constant";
  bool two_depots = false;
  auto* g = app.add_subcommand("gen", "Generate a JSON-lines instance dataset");
  g->add_option("--n", gen.gen.n, "Regions per instance")->required();
  g->add_option("--m", gen.gen.m, "Agents")->required();
  g->add_option("--tmax", gen.gen.t_max, "Time budget per agent")->required();
  g->add_option("--count", gen.count, "Number of instances")->required();
  g->add_option("--seed", gen.gen.seed, "Generator seed");
  g->add_option("--prizes", gen_scheme, "constant|uniform|distance");
  g->add_flag("--two-depots", two_depots, "Draw a separate end depot");
  g->add_option("--out", gen.out, "Output .jsonl path")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train the attention policy");
  t->add_option("--config", train.config, "key = value config file");
  t->add_option("--out", train.out, "Checkpoint directory");
  t->add_option("--resume", train.resume, "Resume from a checkpoint directory");
  t->add_option("--epochs", train.epochs, "Total epochs (overrides config)");
  t->add_option("--validation", train.validation, "Validation dataset (.jsonl)");
  t->add_flag("--quiet", train.quiet, "No per-epoch output");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate solvers on a dataset");
  e->add_option("--data", eval.data, "Dataset (.jsonl)")->required();
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory for the transformer solver");
  e->add_option("--solvers", eval.solvers, "Subset of transformer,greedy,random,oracle")->delimiter(',');
  e->add_option("--out", eval.out, "CSV output path (default stdout)");
  e->add_option("--dump", eval.dump, "Write every solution as JSON lines");
  e->add_option("--prize-label", eval.prize_label, "Value of the prize_scheme CSV column");
  e->add_option("--seed", eval.seed, "Seed of the random solver");
  e->add_option("--workers", eval.workers, "Parallel workers");

  BenchArgs bench;
  std::string bench_norm = "batch";
  auto* b = app.add_subcommand("bench", "Greedy rollout latency on small/medium/large scenarios");
  b->add_option("--checkpoint", bench.checkpoint, "Checkpoint directory (random weights when omitted)");
  b->add_option("--hidden", bench.net.hidden_dim, "Hidden size of a random-weight network");
  b->add_option("--blocks", bench.net.num_blocks, "Encoder blocks of a random-weight network");
  b->add_option("--heads", bench.net.num_heads, "Attention heads of a random-weight network");
  b->add_option("--norm", bench_norm, "batch|layer");
  b->add_option("--count", bench.count, "Instances per scenario");
  b->add_option("--batch", bench.batch, "Batch size of the batch-N mode (default: count)");
  b->add_option("--repeats", bench.repeats, "Repeats of the batch-N mode");
  b->add_option("--sizes", bench.sizes, "Scenarios to run")->delimiter(',');
  b->add_option("--seed", bench.seed, "Instance and weight seed");
  b->add_option("--out", bench.out, "CSV output path (default stdout)");

  SolveArgs solve;
  auto* s = app.add_subcommand("solve", "Solve one instance JSON and print the solution JSON");
  s->add_option("--instance", solve.instance, "Instance JSON path, '-' for stdin");
  s->add_option("--solver", solve.solver, "greedy|oracle|random|transformer");
  s->add_option("--checkpoint", solve.checkpoint, "Checkpoint directory for the transformer solver");
  s->add_option("--m", solve.m, "Override the fleet size");
  s->add_option("--seed", solve.seed, "Seed of the random solver");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    return app.exit(pe, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*g) {
      gen.gen.prize_scheme = parse_prize_scheme(gen_scheme);
      gen.gen.single_depot = !two_depots;
      return cmd_gen(gen, out);
    }
    if (*t) return cmd_train(train, out);
    if (*e) return cmd_eval(eval, out);
    if (*b) {
      bench.net.encoder_norm = parse_norm_kind(bench_norm);
      bench.net.validate();
      return cmd_bench(bench, out);
    }
    if (*s) return cmd_solve(solve, in, out);
  } catch (const UsageError& ex) {
    err << "usage error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const NonFiniteLoss& ex) {
    err << "training diverged: " << ex.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace topforge::cli
