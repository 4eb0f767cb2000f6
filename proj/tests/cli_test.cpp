#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "topforge/cli.hpp"

using namespace topforge;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args, const std::string& input = "") {
  args.insert(args.begin(), "topforge");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::istringstream in(input);
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), in, out, err);
  return {code, out.str(), err.str()};
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "topforge_cli_test" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string f; std::getline(is, f, sep);) out.push_back(f);
  return out;
}

// solver -> column -> value
std::map<std::string, std::map<std::string, std::string>> parse_csv(const std::string& text) {
  const auto rows = lines_of(text);
  std::map<std::string, std::map<std::string, std::string>> out;
  const auto header = split(rows.at(0), ',');
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto f = split(rows[r], ',');
    EXPECT_EQ(f.size(), header.size()) << rows[r];
    for (std::size_t c = 0; c < header.size() && c < f.size(); ++c) out[f[0]][header[c]] = f[c];
  }
  return out;
}

std::string gen_dataset(const std::filesystem::path& dir, const std::string& prizes, int count = 30) {
  const auto path = (dir / ("d_" + prizes + ".jsonl")).string();
  const Result r = run_cli({"gen", "--n", "6", "--m", "2", "--tmax", "2", "--count", std::to_string(count), "--seed",
                            "7", "--prizes", prizes, "--out", path});
  EXPECT_EQ(r.code, 0) << r.err;
  return path;
}

}  // namespace

TEST(CliGen, WritesRequestedLinesDeterministically) {
  const auto dir = temp_dir("gen");
  const auto a = (dir / "a.jsonl").string(), b = (dir / "b.jsonl").string();
  const std::vector<std::string> common{"gen", "--n", "20", "--m", "2", "--tmax", "2", "--count", "1000", "--seed", "7"};
  auto args = common;
  args.insert(args.end(), {"--out", a});
  const Result r = run_cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("wrote 1000 instances"), std::string::npos);
  args = common;
  args.insert(args.end(), {"--out", b});
  ASSERT_EQ(run_cli(args).code, 0);
  EXPECT_EQ(lines_of(slurp(a)).size(), 1000u);
  EXPECT_EQ(slurp(a), slurp(b));
}

TEST(CliGen, UsageErrors) {
  const auto out = (temp_dir("genbad") / "x.jsonl").string();
  EXPECT_EQ(run_cli({"gen", "--n", "6", "--m", "2", "--tmax", "2", "--count", "0", "--out", out}).code, 1);
  EXPECT_EQ(run_cli({"gen", "--n", "6", "--m", "2", "--tmax", "2", "--count", "3", "--prizes", "gold", "--out", out}).code,
            1);
  EXPECT_EQ(run_cli({"gen", "--n", "6"}).code, 1);
  EXPECT_EQ(run_cli({}).code, 1);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 1);
}

TEST(CliHelp, ExitsZero) {
  const Result r = run_cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("gen"), std::string::npos);
}

TEST(CliEval, ConstantPrizesNodesEqualRewardAndOracleDominates) {
  const auto dir = temp_dir("eval");
  const auto data = gen_dataset(dir, "constant");
  const Result r = run_cli({"eval", "--data", data, "--seed", "3", "--prize-label", "constant"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines_of(r.out).at(0), "solver,n,m,tmax,prize_scheme,mean_reward,mean_nodes,p50_ms,p95_ms");
  const auto csv = parse_csv(r.out);
  ASSERT_EQ(csv.size(), 3u);  // greedy, random, oracle
  const double oracle = std::stod(csv.at("oracle").at("mean_reward"));
  for (const auto& [solver, row] : csv) {
    EXPECT_EQ(row.at("mean_nodes"), row.at("mean_reward")) << solver;
    EXPECT_EQ(row.at("n"), "6");
    EXPECT_EQ(row.at("m"), "2");
    EXPECT_EQ(row.at("tmax"), "2");
    EXPECT_EQ(row.at("prize_scheme"), "constant");
    EXPECT_LE(std::stod(row.at("mean_reward")), oracle) << solver;
    EXPECT_GE(std::stod(row.at("p95_ms")), std::stod(row.at("p50_ms")));
  }
}

TEST(CliEval, DeterministicAndReproducibleFromDump) {
  const auto dir = temp_dir("evaldump");
  const auto data = gen_dataset(dir, "uniform");
  const auto dump = (dir / "dump.jsonl").string();
  const auto csv1 = (dir / "r1.csv").string(), csv2 = (dir / "r2.csv").string();
  ASSERT_EQ(run_cli({"eval", "--data", data, "--seed", "5", "--out", csv1, "--dump", dump}).code, 0);
  ASSERT_EQ(run_cli({"eval", "--data", data, "--seed", "5", "--out", csv2, "--workers", "3"}).code, 0);
  const auto a = parse_csv(slurp(csv1)), b = parse_csv(slurp(csv2));
  for (const auto& [solver, row] : a) {
    EXPECT_EQ(row.at("mean_reward"), b.at(solver).at("mean_reward")) << solver;
    EXPECT_EQ(row.at("mean_nodes"), b.at(solver).at("mean_nodes")) << solver;
  }

  const auto instances = load_dataset(data);
  std::map<std::string, double> sums;
  std::size_t rows = 0;
  for (const auto& line : lines_of(slurp(dump))) {
    const auto j = nlohmann::json::parse(line);
    const Instance& inst = instances.at(j.at("index").get<std::size_t>());
    const Solution sol = solution_from_json(j);
    ASSERT_TRUE(check_feasibility(sol, inst).ok);
    sums[j.at("solver").get<std::string>()] += total_reward(sol, inst);
    ++rows;
  }
  EXPECT_EQ(rows, 3 * instances.size());
  for (const auto& [solver, s] : sums)
    EXPECT_NEAR(s / static_cast<double>(instances.size()), std::stod(a.at(solver).at("mean_reward")), 1e-10) << solver;
}

TEST(CliEval, Errors) {
  const auto dir = temp_dir("evalbad");
  const auto data = gen_dataset(dir, "constant", 3);
  EXPECT_EQ(run_cli({"eval", "--data", data, "--solvers", "transformer"}).code, 1);
  EXPECT_EQ(run_cli({"eval", "--data", data, "--solvers", "magic"}).code, 1);
  EXPECT_EQ(run_cli({"eval", "--data", (dir / "missing.jsonl").string()}).code, 2);
  EXPECT_EQ(run_cli({"eval", "--data", data, "--checkpoint", (dir / "nockpt").string()}).code, 2);
}

TEST(CliTrain, SmokeRunImprovesResumesAndEvaluates) {
  const auto dir = temp_dir("train");
  const auto cfg = dir / "smoke.cfg";
  std::ofstream(cfg) << "batch_size = 100\ninstances_per_epoch = 1000\nepochs = 4\nprize_scheme = constant\n"
                        "validation_size = 100\nseed = 3\n";
  const auto ckpt = (dir / "ckpt").string();
  const Result r = run_cli({"train", "--config", cfg.string(), "--out", ckpt});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto out = lines_of(r.out);
  ASSERT_EQ(out.size(), 5u);
  const auto initial = std::stod(split(out.front(), ' ').back());
  const auto last = split(out.back(), ' ');
  const double final_val = std::stod(last.at(last.size() - 3));
  EXPECT_GT(final_val, initial);

  const Result more = run_cli({"train", "--resume", ckpt, "--epochs", "5"});
  ASSERT_EQ(more.code, 0) << more.err;
  ASSERT_EQ(lines_of(more.out).size(), 1u);
  EXPECT_EQ(lines_of(more.out)[0].rfind("epoch 5 ", 0), 0u);
  EXPECT_EQ(lines_of(slurp(std::filesystem::path(ckpt) / "stats.csv")).size(), 6u);

  const auto data = gen_dataset(dir, "constant", 10);
  const Result ev = run_cli({"eval", "--data", data, "--checkpoint", ckpt, "--solvers", "transformer,oracle"});
  ASSERT_EQ(ev.code, 0) << ev.err;
  const auto csv = parse_csv(ev.out);
  EXPECT_LE(std::stod(csv.at("transformer").at("mean_reward")), std::stod(csv.at("oracle").at("mean_reward")));
}

TEST(CliTrain, ConfigErrorsBeforeWork) {
  const auto dir = temp_dir("trainbad");
  const auto cfg = dir / "bad.cfg";
  std::ofstream(cfg) << "hidden_dim = 18\nnum_heads = 4\n";
  const auto ckpt = dir / "ckpt";
  const Result r = run_cli({"train", "--config", cfg.string(), "--out", ckpt.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("not divisible"), std::string::npos);
  EXPECT_FALSE(std::filesystem::exists(ckpt));
  EXPECT_EQ(run_cli({"train", "--out", ckpt.string()}).code, 1);
  EXPECT_EQ(run_cli({"train", "--config", (dir / "none.cfg").string(), "--out", ckpt.string()}).code, 1);
}

TEST(CliSolve, ReadsStdinAndPrintsFeasibleSolution) {
  GenConfig g;
  g.n = 6;
  g.seed = 4;
  const Instance inst = generate_instance(g, 0);
  const std::string json = instance_to_json(inst).dump();
  for (const std::string solver : {"greedy", "oracle", "random"}) {
    const Result r = run_cli({"solve", "--solver", solver, "--seed", "2"}, json);
    ASSERT_EQ(r.code, 0) << solver << ": " << r.err;
    const Solution sol = solution_from_json(nlohmann::json::parse(r.out));
    EXPECT_TRUE(check_feasibility(sol, inst).ok) << solver;
  }
  const Result o = run_cli({"solve", "--solver", "oracle"}, json);
  EXPECT_EQ(solution_from_json(nlohmann::json::parse(o.out)).routes, exhaustive_optimal(inst, inst.m).routes);
  EXPECT_EQ(run_cli({"solve"}, "{not json").code, 2);
  EXPECT_EQ(run_cli({"solve", "--solver", "magic"}, json).code, 1);
  EXPECT_EQ(run_cli({"solve", "--solver", "transformer"}, json).code, 1);
}

TEST(CliBench, RowsAndMonotoneWork) {
  cli::BenchArgs a;
  a.net.hidden_dim = 16;
  a.net.num_blocks = 1;
  a.net.num_heads = 2;
  a.count = 4;
  a.repeats = 2;
  a.sizes = {"small", "large"};
  const auto rows = cli::run_bench(a);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].mode, "batch1");
  EXPECT_EQ(rows[1].mode, "batchN");
  EXPECT_EQ(rows[1].batch, 4);
  EXPECT_EQ(rows[2].n, 100);
  EXPECT_EQ(rows[2].m, 5);
  EXPECT_LT(rows[0].p50_ms, rows[2].p50_ms);
  for (const auto& r : rows) EXPECT_GE(r.p95_ms, r.p50_ms);

  const Result r = run_cli({"bench", "--hidden", "16", "--heads", "2", "--blocks", "1", "--count", "2", "--sizes",
                            "small"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines_of(r.out).at(0), "config,n,m,mode,batch,mean_ms,p50_ms,p95_ms");
  EXPECT_EQ(lines_of(r.out).size(), 3u);
  EXPECT_EQ(run_cli({"bench", "--sizes", "huge"}).code, 1);
  EXPECT_EQ(run_cli({"bench", "--hidden", "10", "--heads", "4"}).code, 1);
}
