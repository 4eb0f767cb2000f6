#pragma once

// REINFORCE training with a greedy-rollout baseline and Adam.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "topforge/archive.hpp"
#include "topforge/env.hpp"
#include "topforge/errors.hpp"
#include "topforge/instance_gen.hpp"
#include "topforge/policy.hpp"
#include "topforge/random.hpp"
#include "topforge/tensor.hpp"

namespace topforge {

struct TrainConfig {
  int batch_size = 256;
  int instances_per_epoch = 50'000;
  int epochs = 100;
  double learning_rate = 1e-4;
  double max_grad_norm = 1.0;  // 0 disables clipping
  NetConfig net;
  GenConfig gen;
  int checkpoint_every = 1;
  int validation_size = 1'000;
  std::uint64_t seed = 1;  // drives parameter init and sampling; gen.seed drives instances

  void validate() const {
    if (batch_size < 1 || instances_per_epoch < 1 || epochs < 1 || checkpoint_every < 1 || validation_size < 1)
      throw ConfigError("batch_size, instances_per_epoch, epochs, checkpoint_every and validation_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("learning_rate must be a non-negative finite number");
    if (!(max_grad_norm >= 0.0)) throw ConfigError("max_grad_norm must be >= 0");
    net.validate();
    gen.validate();
  }
};

// Desk-scale defaults: small graphs and a small network that train in
// minutes on one CPU core.
inline TrainConfig desk_config() {
  TrainConfig c;
  c.batch_size = 100;
  c.instances_per_epoch = 2'000;
  c.epochs = 20;
  c.learning_rate = 1e-3;
  c.net.hidden_dim = 16;
  c.net.num_blocks = 2;
  c.net.num_heads = 4;
  c.gen.n = 6;
  c.gen.m = 2;
  c.gen.t_max = 2.0;
  c.validation_size = 200;
  return c;
}

// Settings of the published experiments (n = 20, m = 2, t_max = 2).
inline TrainConfig paper_config() {
  TrainConfig c;
  c.batch_size = 512;
  c.instances_per_epoch = 1'280'000;
  c.epochs = 100;
  c.learning_rate = 1e-4;
  c.gen.n = 20;
  c.gen.m = 2;
  c.gen.t_max = 2.0;
  c.validation_size = 10'000;
  return c;
}

// ---------------------------------------------------------------------------
// Config file: one "key = value" per line, '#' starts a comment.
//
//   batch_size, instances_per_epoch, epochs, learning_rate, max_grad_norm,
//   checkpoint_every, validation_size, seed,
//   hidden_dim, num_blocks, num_heads, logit_clip, encoder_norm (batch|layer),
//   n, m, t_max, prize_scheme (constant|uniform|distance), single_depot,
//   gen_seed

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  if (!(is >> out) || !(is >> std::ws).eof()) throw ConfigError("bad value '" + v + "' for key '" + key + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("bad boolean '" + v + "' for key '" + key + "'");
}

}  // namespace detail

inline void apply_config_value(TrainConfig& c, const std::string& key, const std::string& v) {
  using detail::parse_number;
  if (key == "batch_size") c.batch_size = parse_number<int>(key, v);
  else if (key == "instances_per_epoch") c.instances_per_epoch = parse_number<int>(key, v);
  else if (key == "epochs") c.epochs = parse_number<int>(key, v);
  else if (key == "learning_rate") c.learning_rate = parse_number<double>(key, v);
  else if (key == "max_grad_norm") c.max_grad_norm = parse_number<double>(key, v);
  else if (key == "checkpoint_every") c.checkpoint_every = parse_number<int>(key, v);
  else if (key == "validation_size") c.validation_size = parse_number<int>(key, v);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "hidden_dim") c.net.hidden_dim = parse_number<int>(key, v);
  else if (key == "num_blocks") c.net.num_blocks = parse_number<int>(key, v);
  else if (key == "num_heads") c.net.num_heads = parse_number<int>(key, v);
  else if (key == "logit_clip") c.net.logit_clip = parse_number<double>(key, v);
  else if (key == "encoder_norm") c.net.encoder_norm = parse_norm_kind(v);
  else if (key == "n") c.gen.n = parse_number<int>(key, v);
  else if (key == "m") c.gen.m = parse_number<int>(key, v);
  else if (key == "t_max") c.gen.t_max = parse_number<double>(key, v);
  else if (key == "prize_scheme") c.gen.prize_scheme = parse_prize_scheme(v);
  else if (key == "single_depot") c.gen.single_depot = detail::parse_bool(key, v);
  else if (key == "gen_seed") c.gen.seed = parse_number<std::uint64_t>(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

inline TrainConfig parse_train_config(std::istream& in, TrainConfig base = desk_config()) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    apply_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return base;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  return parse_train_config(in);
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
  return {
      {"batch_size", c.batch_size},
      {"instances_per_epoch", c.instances_per_epoch},
      {"epochs", c.epochs},
      {"learning_rate", c.learning_rate},
      {"max_grad_norm", c.max_grad_norm},
      {"checkpoint_every", c.checkpoint_every},
      {"validation_size", c.validation_size},
      {"seed", c.seed},
      {"hidden_dim", c.net.hidden_dim},
      {"num_blocks", c.net.num_blocks},
      {"num_heads", c.net.num_heads},
      {"logit_clip", c.net.logit_clip},
      {"encoder_norm", to_string(c.net.encoder_norm)},
      {"n", c.gen.n},
      {"m", c.gen.m},
      {"t_max", c.gen.t_max},
      {"prize_scheme", to_string(c.gen.prize_scheme)},
      {"single_depot", c.gen.single_depot},
      {"gen_seed", c.gen.seed},
  };
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c = desk_config();
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::string v = it.value().is_string() ? it.value().get<std::string>() : it.value().dump();
    apply_config_value(c, it.key(), v);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Adam

class Adam {
 public:
  struct Options {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(const std::vector<NamedTensor>& params, Options opt) : params_(params), opt_(opt) {
    for (const auto& p : params_) {
      m_.push_back(Tensor::zeros(p.tensor.shape()));
      v_.push_back(Tensor::zeros(p.tensor.shape()));
    }
  }

  void set_lr(double lr) { opt_.lr = lr; }
  std::uint64_t steps() const { return t_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor p = params_[i].tensor;
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      const auto g = p.grad();
      auto m = m_[i].mutable_data();
      auto v = v_[i].mutable_data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * g[j];
        v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        w[j] -= static_cast<real>(opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps));
      }
    }
  }

  void save(const std::filesystem::path& path) const {
    std::vector<NamedTensor> recs;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      recs.push_back({"adam.m." + params_[i].name, m_[i]});
      recs.push_back({"adam.v." + params_[i].name, v_[i]});
    }
    recs.push_back({"adam.step", Tensor::scalar(static_cast<real>(t_))});
    save_archive(recs, path);
  }

  void load(const std::filesystem::path& path) {
    std::map<std::string, Tensor> found;
    for (auto& r : load_archive(path)) found.emplace(r.name, r.tensor);
    auto take = [&](const std::string& name, Tensor& dst) {
      auto it = found.find(name);
      if (it == found.end()) throw SchemaError("optimizer state is missing '" + name + "'");
      if (it->second.shape() != dst.shape()) throw ShapeError("optimizer state '" + name + "' has the wrong shape");
      auto out = dst.mutable_data();
      std::copy(it->second.data().begin(), it->second.data().end(), out.begin());
    };
    for (std::size_t i = 0; i < params_.size(); ++i) {
      take("adam.m." + params_[i].name, m_[i]);
      take("adam.v." + params_[i].name, v_[i]);
    }
    auto it = found.find("adam.step");
    if (it == found.end()) throw SchemaError("optimizer state is missing 'adam.step'");
    t_ = static_cast<std::uint64_t>(it->second.item());
  }

 private:
  std::vector<NamedTensor> params_;
  Options opt_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Loss and baseline

// mean_b (L_b - b_b) * log_prob_b with cost L = -reward and baseline
// b = -baseline_reward; the baseline enters as a constant.
inline Tensor reinforce_loss(const std::vector<Rollout>& sampled, const std::vector<double>& baseline_rewards) {
  if (sampled.size() != baseline_rewards.size())
    throw ShapeError("reinforce_loss: " + std::to_string(sampled.size()) + " rollouts but " +
                     std::to_string(baseline_rewards.size()) + " baseline rewards");
  if (sampled.empty()) throw ShapeError("reinforce_loss: empty batch");
  const double inv = 1.0 / static_cast<double>(sampled.size());
  Tensor loss;
  for (std::size_t b = 0; b < sampled.size(); ++b) {
    const double advantage = (-sampled[b].reward) - (-baseline_rewards[b]);
    const Tensor& lp = sampled[b].log_prob_tensor;
    Tensor term = lp.defined() ? scale(lp, static_cast<real>(advantage * inv)) : Tensor::scalar(real(0));
    loss = loss.defined() ? add(loss, term) : term;
  }
  return loss;
}

inline std::size_t worker_count(std::size_t requested = 0) {
  std::size_t n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("TOPFORGE_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = std::min(n, static_cast<std::size_t>(cap));
  }
  return std::max<std::size_t>(n, 1);
}

// Calls fn(i) for i in [0, count) over up to `workers` threads.
inline void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::min(workers, count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Greedy inference reward of the current policy on each instance, without
// recording.
inline std::vector<double> greedy_baseline(const PolicyNet& net, const std::vector<Instance>& instances,
                                           std::size_t workers = 1) {
  std::vector<double> out(instances.size());
  parallel_for(instances.size(), workers, [&](std::size_t i) { out[i] = greedy_rollout(net, instances[i]).reward; });
  return out;
}

inline double validate(const PolicyNet& net, const std::vector<Instance>& dataset, std::size_t workers = 1) {
  if (dataset.empty()) throw InvalidArgument("validate: empty dataset");
  const auto rewards = greedy_baseline(net, dataset, workers);
  double s = 0.0;
  for (double r : rewards) s += r;
  return s / static_cast<double>(rewards.size());
}

// ---------------------------------------------------------------------------
// Epoch loop

struct EpochStats {
  int epoch = 0;
  double mean_sampled = 0.0;
  double mean_greedy = 0.0;
  double mean_loss = 0.0;
  double grad_norm = 0.0;  // mean pre-clipping norm over batches
  double seconds = 0.0;
};

struct NonFiniteLoss : std::runtime_error {
  NonFiniteLoss(const std::string& what, std::uint64_t batch_seed)
      : std::runtime_error(what), batch_seed(batch_seed) {}
  std::uint64_t batch_seed;
};

inline double grad_global_norm(const PolicyNet& net) {
  double s = 0.0;
  for (const auto& p : net.parameters())
    if (p.tensor.has_grad())
      for (real g : p.tensor.grad()) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

inline void clip_grad_norm(PolicyNet& net, double max_norm, double norm) {
  if (max_norm <= 0.0 || norm <= max_norm) return;
  const double f = max_norm / (norm + 1e-12);
  for (const auto& p : net.parameters()) {
    Tensor t = p.tensor;
    if (!t.has_grad()) continue;
    for (real& g : t.mutable_grad()) g = static_cast<real>(g * f);
  }
}

// One pass over instances_per_epoch fresh instances. Instance streams and
// sampling seeds depend only on (config seeds, epoch), so a resumed run
// repeats the same epoch exactly.
inline EpochStats train_epoch(PolicyNet& net, Adam& opt, const TrainConfig& cfg, int epoch) {
  const auto t0 = std::chrono::steady_clock::now();
  EpochStats st;
  st.epoch = epoch;
  const int batches = (cfg.instances_per_epoch + cfg.batch_size - 1) / cfg.batch_size;
  double reward_sum = 0.0, greedy_sum = 0.0, loss_sum = 0.0, norm_sum = 0.0;
  std::size_t count = 0;
  for (int b = 0; b < batches; ++b) {
    const int first = b * cfg.batch_size;
    const int size = std::min(cfg.batch_size, cfg.instances_per_epoch - first);
    const std::uint64_t stream0 =
        static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(cfg.instances_per_epoch) + first;
    const std::vector<Instance> batch = generate_dataset(cfg.gen, static_cast<std::size_t>(size), stream0);
    const std::uint64_t batch_seed = derive_seed(cfg.seed, stream0);
    Rng rng(batch_seed);

    net.zero_grad();
    std::vector<Rollout> sampled = rollout_batch(net, batch, DecodeMode::Sample, rng, NormMode::Train);
    const std::vector<double> base = greedy_baseline(net, batch);
    Tensor loss = reinforce_loss(sampled, base);
    if (!std::isfinite(loss.item()))
      throw NonFiniteLoss("non-finite loss in epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                              " (batch seed " + std::to_string(batch_seed) + ")",
                          batch_seed);
    loss.backward();
    const double norm = grad_global_norm(net);
    clip_grad_norm(net, cfg.max_grad_norm, norm);
    opt.step();

    for (std::size_t i = 0; i < sampled.size(); ++i) {
      reward_sum += sampled[i].reward;
      greedy_sum += base[i];
    }
    count += sampled.size();
    loss_sum += loss.item();
    norm_sum += norm;
  }
  st.mean_sampled = reward_sum / static_cast<double>(count);
  st.mean_greedy = greedy_sum / static_cast<double>(count);
  st.mean_loss = loss_sum / batches;
  st.grad_norm = norm_sum / batches;
  st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return st;
}

// ---------------------------------------------------------------------------
// Checkpointed training session
//
// A checkpoint directory holds:
//   policy.topf   parameters and running statistics
//   optim.topf    Adam moments and step count
//   state.json    {"config": {...}, "epoch": <last completed epoch>}
//   stats.csv     epoch,mean_sampled,mean_greedy,loss,grad_norm,seconds

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg)
      : cfg_((cfg.validate(), cfg)),
        net_(cfg_.net, cfg_.seed),
        opt_(net_.parameters(), Adam::Options{.lr = cfg_.learning_rate}) {}

  static Trainer resume(const std::filesystem::path& dir) {
    std::ifstream in(dir / "state.json");
    if (!in) throw std::runtime_error("no training state in '" + dir.string() + "'");
    nlohmann::json j = nlohmann::json::parse(in);
    Trainer t(config_from_json(j.at("config")));
    t.net_.load(dir / "policy.topf");
    t.opt_.load(dir / "optim.topf");
    t.epoch_ = j.at("epoch").get<int>();
    return t;
  }

  const TrainConfig& config() const { return cfg_; }
  TrainConfig& mutable_config() { return cfg_; }
  PolicyNet& net() { return net_; }
  const PolicyNet& net() const { return net_; }
  Adam& optimizer() { return opt_; }
  int epochs_done() const { return epoch_; }

  EpochStats run_epoch() {
    EpochStats st = train_epoch(net_, opt_, cfg_, epoch_);
    ++epoch_;
    return st;
  }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    net_.save(dir / "policy.topf");
    opt_.save(dir / "optim.topf");
    nlohmann::json j{{"config", config_to_json(cfg_)}, {"epoch", epoch_}};
    std::ofstream(dir / "state.json") << j.dump(2) << '\n';
  }

  static void append_stats(const std::filesystem::path& csv, const EpochStats& st) {
    const bool fresh = !std::filesystem::exists(csv);
    std::ofstream out(csv, std::ios::app);
    if (fresh) out << "epoch,mean_sampled,mean_greedy,loss,grad_norm,seconds\n";
    out << st.epoch << ',' << st.mean_sampled << ',' << st.mean_greedy << ',' << st.mean_loss << ','
        << st.grad_norm << ',' << st.seconds << '\n';
  }

 private:
  TrainConfig cfg_;
  PolicyNet net_;
  Adam opt_;
  int epoch_ = 0;
};

}  // namespace topforge
