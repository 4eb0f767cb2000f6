#pragma once

// Centralized multi-agent attention policy.
//
// Encoder: per-token input embedding over n+2 tokens (start depot, regions,
// end depot) followed by N blocks of
//     h <- Norm(h + MHA(h, h, h))
//     h <- Norm(h + Linear(h))
// Decoder, per fleet step: a query row per agent built from the mean region
// embedding and the agent's [time left, x, y]; masked multi-head attention
// over the node embeddings; clipped single-head compatibilities
// C * tanh(q k^T / sqrt(d)) as logits; masked row softmax.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "topforge/archive.hpp"
#include "topforge/core.hpp"
#include "topforge/errors.hpp"
#include "topforge/random.hpp"
#include "topforge/tensor.hpp"

namespace topforge {

enum class NormKind { Batch, Layer };

inline const char* to_string(NormKind k) { return k == NormKind::Batch ? "batch" : "layer"; }

inline NormKind parse_norm_kind(const std::string& s) {
  if (s == "batch") return NormKind::Batch;
  if (s == "layer") return NormKind::Layer;
  throw ConfigError("unknown encoder norm '" + s + "' (expected batch|layer)");
}

struct NetConfig {
  int hidden_dim = 128;
  int num_blocks = 3;
  int num_heads = 8;
  double logit_clip = 10.0;
  NormKind encoder_norm = NormKind::Batch;

  void validate() const {
    if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
    if (num_heads < 1) throw ConfigError("num_heads must be >= 1");
    if (hidden_dim % num_heads != 0)
      throw ConfigError("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by num_heads " +
                        std::to_string(num_heads));
    if (num_blocks < 1) throw ConfigError("num_blocks must be >= 1");
    if (!(logit_clip > 0.0)) throw ConfigError("logit_clip must be positive");
  }

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

// Train mode normalizes with batch statistics and updates the running
// statistics; infer mode uses the frozen running statistics.
enum class NormMode { Train, Infer };

// Per-instance tensors the decoder reuses at every step.
struct DecoderCache {
  Tensor h_node;    // (n+2) x d
  Tensor keys;      // multi-head attention keys
  Tensor values;    // multi-head attention values
  Tensor logit_keys;
  Tensor context;   // 1 x d projected mean region embedding
};

// Output of one decoding step for the whole fleet.
struct DecodeOutput {
  Tensor logits;  // m x (n+2), clipped, masked entries at kMaskedValue
  Tensor probs;   // m x (n+2), masked entries exactly zero
};

class PolicyNet {
 public:
  struct Linear {
    Tensor w, b;
  };
  struct Attention {
    Linear q, k, v, o;
  };
  struct Norm {
    Tensor gamma, beta;
    RunningStats stats;
  };
  struct Block {
    Attention mha;
    Norm norm1;
    Linear ff;
    Norm norm2;
  };

  explicit PolicyNet(NetConfig cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed, 0x706f6c696379ULL);
    const std::size_t d = static_cast<std::size_t>(cfg_.hidden_dim);

    embed_start_ = make_linear("enc.embed.start", 2, d, rng);
    embed_region_ = make_linear("enc.embed.region", 3, d, rng);
    embed_end_ = make_linear("enc.embed.end", 2, d, rng);
    embed_input_ = make_linear("enc.embed.input", 3 * d, d, rng);
    for (int u = 0; u < cfg_.num_blocks; ++u) {
      const std::string p = "enc.block" + std::to_string(u);
      Block b;
      b.mha = make_attention(p + ".mha", d, rng);
      b.norm1 = make_norm(p + ".norm1", d);
      b.ff = make_linear(p + ".ff", d, d, rng);
      b.norm2 = make_norm(p + ".norm2", d);
      blocks_.push_back(std::move(b));
    }
    dec_context_ = make_linear("dec.ctx.context", d, d, rng);
    dec_agent_w_ = make_weight("dec.ctx.agent.w", 3, d, 3, rng);
    dec_mha_ = make_attention("dec.mha", d, rng);
    logit_wq_ = make_weight("dec.logit.wq", d, d, d, rng);
    logit_wk_ = make_weight("dec.logit.wk", d, d, d, rng);
  }

  PolicyNet(const PolicyNet&) = delete;
  PolicyNet& operator=(const PolicyNet&) = delete;
  PolicyNet(PolicyNet&&) = default;
  PolicyNet& operator=(PolicyNet&&) = default;

  const NetConfig& config() const { return cfg_; }
  std::size_t hidden() const { return static_cast<std::size_t>(cfg_.hidden_dim); }

  // Trainable tensors in a fixed order. Handles share storage with the net.
  const std::vector<NamedTensor>& parameters() const { return params_; }
  // Non-trainable state (batch-norm running statistics).
  const std::vector<NamedTensor>& buffers() const { return buffers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // Copies every parameter and buffer value from another net of equal shape.
  void copy_from(const PolicyNet& other) {
    if (!(other.cfg_ == cfg_)) throw ShapeError("copy_from: network configurations differ");
    auto copy = [](const std::vector<NamedTensor>& src, std::vector<NamedTensor>& dst) {
      for (std::size_t i = 0; i < src.size(); ++i) {
        auto out = dst[i].tensor.mutable_data();
        std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), out.begin());
      }
    };
    copy(other.params_, params_);
    copy(other.buffers_, buffers_);
  }

  void save(const std::filesystem::path& path) const {
    std::vector<NamedTensor> all = params_;
    all.insert(all.end(), buffers_.begin(), buffers_.end());
    save_archive(all, path);
  }

  // Loads values into this net; every expected name must be present with
  // the expected shape.
  void load(const std::filesystem::path& path) {
    std::map<std::string, Tensor> found;
    for (auto& rec : load_archive(path)) found.emplace(rec.name, rec.tensor);
    auto fill = [&](std::vector<NamedTensor>& dst) {
      for (auto& rec : dst) {
        auto it = found.find(rec.name);
        if (it == found.end()) throw SchemaError("checkpoint is missing parameter '" + rec.name + "'");
        if (it->second.shape() != rec.tensor.shape())
          throw ShapeError("checkpoint parameter '" + rec.name + "' has shape " + shape_str(it->second.shape()) +
                           ", expected " + shape_str(rec.tensor.shape()));
        auto out = rec.tensor.mutable_data();
        std::copy(it->second.data().begin(), it->second.data().end(), out.begin());
      }
    };
    fill(params_);
    fill(buffers_);
  }

  // -------------------------------------------------------------------------
  // Encoder

  // Token features: row 0 is the start depot, rows 1..n the regions, row n+1
  // the end depot.
  Tensor input_embedding(const Instance& inst) const {
    const std::size_t n = inst.n();
    Tensor start = Tensor::matrix(1, 2, {inst.depot_start.x, inst.depot_start.y});
    Tensor end = Tensor::matrix(1, 2, {inst.depot_end.x, inst.depot_end.y});
    std::vector<real> feats(n * 3);
    for (std::size_t i = 0; i < n; ++i) {
      feats[3 * i] = inst.coords[i].x;
      feats[3 * i + 1] = inst.coords[i].y;
      feats[3 * i + 2] = inst.prizes[i];
    }
    Tensor h_s = apply(embed_start_, start);
    Tensor h_e = apply(embed_end_, end);
    Tensor h_p = apply(embed_region_, Tensor::matrix(n, 3, std::move(feats)));
    std::vector<std::size_t> zeros(n, 0);
    Tensor joined = concat({gather(h_s, zeros), h_p, gather(h_e, zeros)});
    Tensor regions = apply(embed_input_, joined);
    return concat_rows({h_s, regions, h_e});
  }

  // Runs the encoder blocks over one instance's tokens.
  Tensor encode(const Tensor& h_input, NormMode mode) const { return encode_batch({h_input}, mode).front(); }

  // Encodes several instances together; normalization statistics in train
  // mode span all their tokens, attention stays within each instance.
  std::vector<Tensor> encode_batch(const std::vector<Tensor>& inputs, NormMode mode) const {
    if (inputs.empty()) return {};
    std::vector<std::pair<std::size_t, std::size_t>> segs;
    std::size_t off = 0;
    for (const auto& t : inputs) {
      if (t.cols() != hidden())
        throw ShapeError("encode: expected " + std::to_string(hidden()) + " columns, got " + shape_str(t.shape()));
      segs.push_back({off, t.rows()});
      off += t.rows();
    }
    Tensor h = inputs.size() == 1 ? inputs.front() : concat_rows(inputs);
    for (const auto& blk : blocks_) {
      h = normalize(blk.norm1, add(h, self_attention(blk.mha, h, segs)), mode);
      h = normalize(blk.norm2, add(h, apply(blk.ff, h)), mode);
    }
    if (inputs.size() == 1) return {h};
    std::vector<Tensor> out;
    out.reserve(segs.size());
    for (auto [o, len] : segs) out.push_back(slice_rows(h, o, len));
    return out;
  }

  // Infer-mode forward of the encoder, no recording.
  Tensor embed_nodes(const Instance& inst) const {
    NoGradGuard guard;
    return encode(input_embedding(inst), NormMode::Infer);
  }

  // -------------------------------------------------------------------------
  // Decoder

  DecoderCache prepare_decoder(const Tensor& h_node) const {
    const std::size_t n_nodes = h_node.rows();
    if (n_nodes < 3) throw ShapeError("decoder needs at least one region token");
    DecoderCache c;
    c.h_node = h_node;
    c.keys = apply(dec_mha_.k, h_node);
    c.values = apply(dec_mha_.v, h_node);
    c.logit_keys = matmul(h_node, logit_wk_);
    c.context = apply(dec_context_, mean(slice_rows(h_node, 1, n_nodes - 2), 0));
    return c;
  }

  // agent_features: m x 3 rows of [time left, x, y] of each agent's last node.
  Tensor context_embedding(const DecoderCache& cache, const Tensor& agent_features) const {
    if (agent_features.cols() != 3 || agent_features.rank() != 2)
      throw ShapeError("context_embedding: agent features must be m x 3, got " + shape_str(agent_features.shape()));
    return add(matmul(agent_features, dec_agent_w_), cache.context);
  }

  // admissible: m x (n+2) flags, row-major. Every row must admit a node.
  DecodeOutput decode_step(const DecoderCache& cache, const Tensor& query, const Mask& admissible) const {
    const std::size_t m = query.rows(), t = cache.h_node.rows();
    if (admissible.size() != m * t)
      throw ShapeError("decode_step: mask has " + std::to_string(admissible.size()) + " entries, expected " +
                       std::to_string(m * t));
    Mask fill(admissible.size());
    for (std::size_t i = 0; i < fill.size(); ++i) fill[i] = !admissible[i];
    for (std::size_t k = 0; k < m; ++k) {
      bool any = false;
      for (std::size_t j = 0; j < t; ++j) any = any || admissible[k * t + j];
      if (!any) throw InvalidMask("decode_step: agent " + std::to_string(k) + " has no admissible node");
    }
    Tensor q = apply(dec_mha_.q, query);
    Tensor glimpse = apply(dec_mha_.o, heads_attention(q, cache.keys, cache.values, &fill));
    Tensor compat = scale(matmul(matmul(glimpse, logit_wq_), transpose(cache.logit_keys)),
                          real(1) / std::sqrt(static_cast<real>(hidden())));
    DecodeOutput out;
    out.logits = masked_fill(scale(tanh(compat), static_cast<real>(cfg_.logit_clip)), fill, kMaskedValue);
    out.probs = softmax(out.logits);
    return out;
  }

  // Direct access for tests and tooling.
  const std::vector<Block>& blocks() const { return blocks_; }

 private:
  Tensor& register_param(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    params_.push_back({name, t});
    return params_.back().tensor;
  }

  Tensor make_weight(const std::string& name, std::size_t in, std::size_t out, std::size_t fan_in, Rng& rng) {
    const real bound = real(1) / std::sqrt(static_cast<real>(fan_in));
    std::vector<real> v(in * out);
    for (auto& x : v) x = static_cast<real>(rng.uniform(-bound, bound));
    return register_param(name, Tensor::matrix(in, out, std::move(v)));
  }

  Linear make_linear(const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
    Linear l;
    l.w = make_weight(prefix + ".w", in, out, in, rng);
    const real bound = real(1) / std::sqrt(static_cast<real>(in));
    std::vector<real> b(out);
    for (auto& x : b) x = static_cast<real>(rng.uniform(-bound, bound));
    l.b = register_param(prefix + ".b", Tensor::vector(std::move(b)));
    return l;
  }

  Attention make_attention(const std::string& prefix, std::size_t d, Rng& rng) {
    Attention a;
    a.q = make_linear_named(prefix, "q", d, rng);
    a.k = make_linear_named(prefix, "k", d, rng);
    a.v = make_linear_named(prefix, "v", d, rng);
    a.o = make_linear_named(prefix, "o", d, rng);
    return a;
  }

  // Attention projections are named <prefix>.w<x> / <prefix>.b<x>.
  Linear make_linear_named(const std::string& prefix, const std::string& x, std::size_t d, Rng& rng) {
    Linear l;
    l.w = make_weight(prefix + ".w" + x, d, d, d, rng);
    const real bound = real(1) / std::sqrt(static_cast<real>(d));
    std::vector<real> b(d);
    for (auto& v : b) v = static_cast<real>(rng.uniform(-bound, bound));
    l.b = register_param(prefix + ".b" + x, Tensor::vector(std::move(b)));
    return l;
  }

  Norm make_norm(const std::string& prefix, std::size_t d) {
    Norm nm;
    nm.gamma = register_param(prefix + ".gamma", Tensor::full({d}, real(1)));
    nm.beta = register_param(prefix + ".beta", Tensor::zeros({d}));
    if (cfg_.encoder_norm == NormKind::Batch) {
      nm.stats.mean = Tensor::zeros({d});
      nm.stats.var = Tensor::full({d}, real(1));
      buffers_.push_back({prefix + ".running_mean", nm.stats.mean});
      buffers_.push_back({prefix + ".running_var", nm.stats.var});
    }
    return nm;
  }

  static Tensor apply(const Linear& l, const Tensor& x) { return linear(x, l.w, l.b); }

  // Train mode writes the running statistics through the shared handles.
  Tensor normalize(const Norm& nm, const Tensor& x, NormMode mode) const {
    if (cfg_.encoder_norm == NormKind::Layer) return layer_norm(x, nm.gamma, nm.beta, kNormEps);
    RunningStats stats = nm.stats;
    return batch_norm(x, nm.gamma, nm.beta, stats, mode == NormMode::Train);
  }

  // Scaled dot-product attention split over heads; fill marks key positions
  // excluded for each query row.
  Tensor heads_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Mask* fill) const {
    const std::size_t heads = static_cast<std::size_t>(cfg_.num_heads);
    const std::size_t dh = hidden() / heads;
    const real norm = real(1) / std::sqrt(static_cast<real>(dh));
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
      Tensor kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
      Tensor vh = heads == 1 ? v : slice_cols(v, h * dh, dh);
      Tensor scores = scale(matmul(qh, transpose(kh)), norm);
      if (fill) scores = masked_fill(scores, *fill, kMaskedValue);
      outs.push_back(matmul(softmax(scores), vh));
    }
    return heads == 1 ? outs.front() : concat(outs);
  }

  Tensor self_attention(const Attention& att, const Tensor& x,
                        const std::vector<std::pair<std::size_t, std::size_t>>& segs) const {
    Tensor q = apply(att.q, x), k = apply(att.k, x), v = apply(att.v, x);
    Tensor mixed;
    if (segs.size() == 1) {
      mixed = heads_attention(q, k, v, nullptr);
    } else {
      std::vector<Tensor> parts;
      parts.reserve(segs.size());
      for (auto [o, len] : segs)
        parts.push_back(heads_attention(slice_rows(q, o, len), slice_rows(k, o, len), slice_rows(v, o, len), nullptr));
      mixed = concat_rows(parts);
    }
    return apply(att.o, mixed);
  }

  NetConfig cfg_;
  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
  Linear embed_start_, embed_region_, embed_end_, embed_input_;
  std::vector<Block> blocks_;
  Linear dec_context_;
  Tensor dec_agent_w_;
  Attention dec_mha_;
  Tensor logit_wq_, logit_wk_;
};

}  // namespace topforge
