#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "topforge/env.hpp"
#include "topforge/instance_gen.hpp"
#include "topforge/policy.hpp"

using namespace topforge;

namespace {

NetConfig small_config(NormKind norm = NormKind::Batch) {
  NetConfig c;
  c.hidden_dim = 16;
  c.num_blocks = 2;
  c.num_heads = 4;
  c.encoder_norm = norm;
  return c;
}

Instance sample_instance(std::size_t n, std::uint64_t seed, PrizeScheme scheme = PrizeScheme::Uniform) {
  GenConfig g;
  g.n = n;
  g.m = 2;
  g.seed = seed;
  g.prize_scheme = scheme;
  return generate_instance(g, 0);
}

// Gives the batch-norm buffers non-trivial values, as after training.
void perturb_running_stats(PolicyNet& net, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& b : net.buffers()) {
    Tensor t = b.tensor;
    const bool var = b.name.find("running_var") != std::string::npos;
    for (auto& v : t.mutable_data()) v = var ? rng.uniform(0.5, 2.0) : rng.uniform(-0.5, 0.5);
  }
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "topforge_policy_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

double max_row_permutation_deviation(const Tensor& a, const Tensor& b, const std::vector<std::size_t>& perm) {
  // b's row i corresponds to a's row perm[i].
  double worst = 0;
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t c = 0; c < a.cols(); ++c) worst = std::max(worst, std::abs(double(b.at(i, c) - a.at(perm[i], c))));
  return worst;
}

}  // namespace

TEST(NetConfig, Validation) {
  NetConfig c;
  EXPECT_NO_THROW(c.validate());
  c.num_blocks = 0;
  EXPECT_THROW(PolicyNet(c, 0), ConfigError);
  c = NetConfig{};
  c.num_heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = NetConfig{};
  c.logit_clip = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(PolicyNet, DefaultInputEmbeddingShape) {
  PolicyNet net(NetConfig{}, 1);
  const Instance inst = sample_instance(20, 3);
  const Tensor h = net.input_embedding(inst);
  EXPECT_EQ(h.shape(), (Shape{22, 128}));
}

TEST(PolicyNet, ParameterNames) {
  PolicyNet net(NetConfig{}, 1);
  std::vector<std::string> names;
  for (const auto& p : net.parameters()) names.push_back(p.name);
  for (const char* want : {"enc.block0.mha.wq", "enc.block2.norm2.gamma", "dec.ctx.agent.w", "dec.logit.wk",
                           "enc.embed.input.w"})
    EXPECT_NE(std::find(names.begin(), names.end(), want), names.end()) << want;
  EXPECT_EQ(std::find(names.begin(), names.end(), "enc.block3.mha.wq"), names.end());
}

TEST(PolicyNet, ZeroWeightsGiveZeroEmbedding) {
  PolicyNet net(small_config(), 1);
  for (const auto& p : net.parameters()) {
    Tensor t = p.tensor;
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), real(0));
  }
  const Tensor h = net.input_embedding(sample_instance(5, 2));
  for (real v : h.data()) EXPECT_EQ(v, 0.0);
}

TEST(PolicyNet, InputEmbeddingPermutesWithRegions) {
  PolicyNet net(small_config(), 4);
  const Instance inst = sample_instance(7, 5);
  const std::vector<std::size_t> order{3, 0, 6, 1, 5, 2, 4};
  Instance perm = inst;
  for (std::size_t i = 0; i < order.size(); ++i) {
    perm.coords[i] = inst.coords[order[i]];
    perm.prizes[i] = inst.prizes[order[i]];
  }
  const Tensor a = net.input_embedding(inst), b = net.input_embedding(perm);
  std::vector<std::size_t> rows{0};
  for (std::size_t i : order) rows.push_back(i + 1);
  rows.push_back(8);
  EXPECT_EQ(max_row_permutation_deviation(a, b, rows), 0.0);
}

TEST(PolicyNet, EncodePreservesShape) {
  PolicyNet net(small_config(), 2);
  const Tensor h = net.input_embedding(sample_instance(9, 1));
  EXPECT_EQ(net.encode(h, NormMode::Infer).shape(), h.shape());
  EXPECT_EQ(net.encode(h, NormMode::Train).shape(), h.shape());
}

TEST(PolicyNet, EncoderPermutationEquivariance) {
  for (NormKind norm : {NormKind::Batch, NormKind::Layer}) {
    for (NormMode mode : {NormMode::Infer, NormMode::Train}) {
      PolicyNet net(small_config(norm), 9);
      perturb_running_stats(net, 3);
      Rng rng(17);
      for (int trial = 0; trial < 10; ++trial) {
        const Instance inst = sample_instance(12, static_cast<std::uint64_t>(trial));
        const Tensor h = net.input_embedding(inst);
        std::vector<std::size_t> rows(h.rows());
        std::iota(rows.begin(), rows.end(), 0);
        for (std::size_t i = rows.size() - 2; i > 1; --i) std::swap(rows[i], rows[1 + rng.below(i)]);
        const Tensor a = net.encode(h, mode);
        const Tensor b = net.encode(gather(h, rows), mode);
        EXPECT_LE(max_row_permutation_deviation(a, b, rows), 1e-9);
      }
    }
  }
}

TEST(PolicyNet, TrainModeUpdatesRunningStatsInferModeDoesNot) {
  PolicyNet net(small_config(), 3);
  const Tensor h = net.input_embedding(sample_instance(6, 2));
  const Tensor mean0 = net.blocks()[0].norm1.stats.mean.detach();
  net.encode(h, NormMode::Infer);
  EXPECT_EQ(net.blocks()[0].norm1.stats.mean[0], mean0[0]);
  net.encode(h, NormMode::Train);
  EXPECT_NE(net.blocks()[0].norm1.stats.mean[0], mean0[0]);
}

TEST(PolicyNet, ContextEmbeddingRows) {
  PolicyNet net(small_config(), 5);
  const Instance inst = sample_instance(6, 8);
  const DecoderCache cache = net.prepare_decoder(net.embed_nodes(inst));
  FleetState st = init_state(inst, 3);
  const Tensor q0 = context_embedding(net, cache, st, inst);
  EXPECT_EQ(q0.shape(), (Shape{3, 16}));
  for (std::size_t c = 0; c < 16; ++c) {
    EXPECT_EQ(q0.at(0, c), q0.at(1, c));
    EXPECT_EQ(q0.at(1, c), q0.at(2, c));
  }
  // Agents 0 and 2 at the same node with the same time left.
  st = apply_actions(st, {1, 2, inst.end_node()}, inst);
  st.current_node[2] = st.current_node[0];
  st.t_left[2] = st.t_left[0];
  const Tensor q1 = context_embedding(net, cache, st, inst);
  for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(q1.at(0, c), q1.at(2, c));
}

TEST(PolicyNet, DecodeOnlyEndDepotAdmissible) {
  PolicyNet net(small_config(), 6);
  const Instance inst = sample_instance(5, 4);
  const DecoderCache cache = net.prepare_decoder(net.embed_nodes(inst));
  const FleetState st = init_state(inst, 2);
  Mask mask(2 * 7, 0);
  mask[6] = mask[13] = 1;
  const DecodeOutput out = net.decode_step(cache, context_embedding(net, cache, st, inst), mask);
  EXPECT_EQ(out.probs.at(0, 6), 1.0);
  EXPECT_EQ(out.probs.at(1, 6), 1.0);
}

TEST(PolicyNet, DecodeLogitsBoundedAndMaskedExactlyZero) {
  NetConfig cfg = small_config();
  PolicyNet net(cfg, 7);
  // Large weights in the logit projections push tanh into saturation.
  for (const auto& p : net.parameters())
    if (p.name.rfind("dec.logit", 0) == 0) {
      Tensor t = p.tensor;
      for (auto& v : t.mutable_data()) v *= 50;
    }
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Instance inst = sample_instance(8, static_cast<std::uint64_t>(trial));
    const DecoderCache cache = net.prepare_decoder(net.embed_nodes(inst));
    const FleetState st = init_state(inst, 2);
    Mask mask(2 * 10, 0);
    for (std::size_t k = 0; k < 2; ++k) {
      for (std::size_t j = 1; j < 10; ++j) mask[k * 10 + j] = rng.uniform() < 0.5;
      mask[k * 10 + 9] = 1;
    }
    const DecodeOutput out = net.decode_step(cache, context_embedding(net, cache, st, inst), mask);
    for (std::size_t k = 0; k < 2; ++k) {
      double s = 0;
      for (std::size_t j = 0; j < 10; ++j) {
        const real logit = out.logits.at(k, j), p = out.probs.at(k, j);
        if (mask[k * 10 + j]) {
          EXPECT_GE(logit, -cfg.logit_clip);
          EXPECT_LE(logit, cfg.logit_clip);
        } else {
          EXPECT_EQ(p, 0.0);
        }
        s += p;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(PolicyNet, UniformNodeEmbeddingsGiveUniformProbabilities) {
  PolicyNet net(small_config(), 8);
  const Instance inst = sample_instance(4, 1);
  Tensor h_node = Tensor::matrix(6, 16, std::vector<real>(96, real(0.3)));
  const DecoderCache cache = net.prepare_decoder(h_node);
  const FleetState st = init_state(inst, 2);
  const Mask mask{0, 1, 0, 1, 1, 0, 0, 1, 1, 1, 1, 1};
  const DecodeOutput out = net.decode_step(cache, context_embedding(net, cache, st, inst), mask);
  for (std::size_t j = 0; j < 6; ++j) {
    EXPECT_NEAR(out.probs.at(0, j), mask[j] ? 1.0 / 3.0 : 0.0, 1e-14);
    EXPECT_NEAR(out.probs.at(1, j), mask[6 + j] ? 1.0 / 5.0 : 0.0, 1e-14);
  }
}

TEST(PolicyNet, EmptyMaskRowIsInvalid) {
  PolicyNet net(small_config(), 6);
  const Instance inst = sample_instance(3, 4);
  const DecoderCache cache = net.prepare_decoder(net.embed_nodes(inst));
  const FleetState st = init_state(inst, 2);
  Mask mask(10, 0);
  mask[4] = 1;  // agent 0 only
  EXPECT_THROW(net.decode_step(cache, context_embedding(net, cache, st, inst), mask), InvalidMask);
}

TEST(PolicyNet, GreedyInferenceDeterministic) {
  PolicyNet a(small_config(), 11), b(small_config(), 11);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Instance inst = sample_instance(10, s);
    const Rollout r1 = greedy_rollout(a, inst, 2), r2 = greedy_rollout(b, inst, 2);
    EXPECT_EQ(r1.solution.routes, r2.solution.routes);
    EXPECT_EQ(r1.log_prob, r2.log_prob);
  }
}

TEST(PolicyNet, SaveLoadRoundTrip) {
  PolicyNet a(small_config(), 12);
  perturb_running_stats(a, 4);
  const auto path = temp_path("net.topf");
  a.save(path);
  PolicyNet b(small_config(), 99);
  b.load(path);
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    for (std::size_t j = 0; j < a.parameters()[i].tensor.numel(); ++j)
      EXPECT_EQ(a.parameters()[i].tensor[j], b.parameters()[i].tensor[j]);
  const Instance inst = sample_instance(8, 3);
  EXPECT_EQ(greedy_rollout(a, inst, 2).solution.routes, greedy_rollout(b, inst, 2).solution.routes);
}

TEST(PolicyNet, LoadValidatesNamesAndShapes) {
  PolicyNet a(small_config(), 12);
  const auto path = temp_path("small.topf");
  a.save(path);
  NetConfig bigger = small_config();
  bigger.hidden_dim = 32;
  PolicyNet b(bigger, 1);
  EXPECT_THROW(b.load(path), ShapeError);
  NetConfig deeper = small_config();
  deeper.num_blocks = 3;
  PolicyNet c(deeper, 1);
  EXPECT_THROW(c.load(path), SchemaError);
}

// Training-mode batch norm makes a few directions exactly invariant (biases
// feeding a normalization, key biases under softmax), so this compares with a
// combined absolute and relative bound instead of the pure relative measure.
TEST(PolicyGradient, TrainModeBackwardMatchesCentralDifferences) {
  NetConfig cfg;
  cfg.hidden_dim = 8;
  cfg.num_blocks = 1;
  cfg.num_heads = 2;
  PolicyNet net(cfg, 21);
  const Instance inst = sample_instance(4, 21);
  Rng rng(21);
  const Rollout fixed = rollout(net, inst, 2, DecodeMode::Sample, rng, NormMode::Train);
  ASSERT_GT(fixed.free_actions, 0u);
  auto f = [&] { return replay_rollout(net, inst, 2, fixed.actions, NormMode::Train).log_prob_tensor; };
  net.zero_grad();
  f().backward();
  const real h = real(1e-5);
  NoGradGuard guard;
  for (const auto& p : net.parameters()) {
    Tensor t = p.tensor;
    const std::vector<real> analytic(t.grad().begin(), t.grad().end());
    auto xs = t.mutable_data();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const real orig = xs[i];
      xs[i] = orig + h;
      const real fp = f().item();
      xs[i] = orig - h;
      const real fm = f().item();
      xs[i] = orig;
      const real numeric = (fp - fm) / (2 * h);
      EXPECT_NEAR(analytic[i], numeric, 1e-9 + 1e-5 * std::abs(numeric)) << p.name << "[" << i << "]";
    }
  }
}
