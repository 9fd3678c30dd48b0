#pragma once

// Causal pre-norm transformer decoder whose every feed-forward block is an
// MoE layer. Visual positions of the input sequence take their hidden state
// from resampled visual tokens instead of the embedding table.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mmoe/config.hpp"
#include "mmoe/moe.hpp"
#include "mmoe/nn.hpp"
#include "mmoe/ops.hpp"

namespace mmoe {

inline constexpr std::int64_t kIgnoreIndex = -100;

struct TokenSequence {
  std::vector<std::int64_t> token_ids;
  std::vector<Modality> modality;
  std::vector<std::int64_t> positions;
  // Optional per-position flag: 1 if the token may serve as a prediction
  // target. Empty means every text position is a target.
  std::vector<std::uint8_t> loss_mask;

  std::size_t size() const { return token_ids.size(); }

  std::size_t visual_count() const {
    std::size_t n = 0;
    for (auto m : modality) n += (m == Modality::Visual);
    return n;
  }

  void validate() const {
    if (modality.size() != token_ids.size() || positions.size() != token_ids.size())
      throw ShapeError("token sequence: ids, modality and positions differ in length");
    if (!loss_mask.empty() && loss_mask.size() != token_ids.size())
      throw ShapeError("token sequence: loss mask length differs");
    for (std::size_t i = 1; i < positions.size(); ++i)
      if (positions[i] <= positions[i - 1])
        throw std::invalid_argument("token sequence: positions must be strictly increasing");
  }

  static TokenSequence text(std::vector<std::int64_t> ids) {
    TokenSequence s;
    s.modality.assign(ids.size(), Modality::Text);
    s.positions.resize(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) s.positions[i] = static_cast<std::int64_t>(i);
    s.token_ids = std::move(ids);
    return s;
  }
};

// Next-token targets: position t predicts token t+1 when that token is text
// (and allowed by the loss mask); everything else is ignored.
inline std::vector<std::int64_t> lm_targets(const TokenSequence& seq) {
  std::vector<std::int64_t> tg(seq.size(), kIgnoreIndex);
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
    const bool text = seq.modality[t + 1] == Modality::Text;
    const bool allowed = seq.loss_mask.empty() || seq.loss_mask[t + 1];
    if (text && allowed) tg[t] = seq.token_ids[t + 1];
  }
  return tg;
}

inline Tensor rope_apply(const Tensor& vectors, std::span<const std::int64_t> positions, double base) {
  return rope(vectors, positions, base);
}

// Wavelength (in positions) of rotary frequency index i.
inline double rope_wavelength(std::size_t i, std::size_t head_dim, double base) {
  return 2.0 * std::numbers::pi *
         std::pow(base, 2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
}

// Scaled dot-product attention over already-projected q[Tq x H*hd],
// k/v[Tk x H*hd]. With `causal`, query row r sees key rows <= r.
// Non-empty `q_positions` enables rotary embedding of q and k per head.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   std::size_t n_heads, bool causal,
                                   std::span<const std::int64_t> q_positions = {},
                                   std::span<const std::int64_t> k_positions = {},
                                   double rope_base = 0.0) {
  const std::size_t width = q.cols();
  if (k.cols() != width || v.cols() != width || width % n_heads != 0)
    throw ShapeError("attention: projection widths disagree");
  const std::size_t hd = width / n_heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    auto qh = slice_cols(q, h * hd, (h + 1) * hd);
    auto kh = slice_cols(k, h * hd, (h + 1) * hd);
    auto vh = slice_cols(v, h * hd, (h + 1) * hd);
    if (!q_positions.empty()) {
      qh = rope(qh, q_positions, rope_base);
      kh = rope(kh, k_positions, rope_base);
    }
    auto scores = scale(matmul(qh, transpose(kh)), inv);
    auto p = causal ? causal_softmax(scores) : softmax(scores, 1);
    heads.push_back(matmul(p, vh));
  }
  return n_heads == 1 ? heads[0] : concat_cols(heads);
}

struct CausalSelfAttention {
  std::size_t n_heads = 1;
  Tensor wq, wk, wv, wo;  // [d x d]

  static CausalSelfAttention init(Rng& rng, std::size_t d, std::size_t n_heads) {
    CausalSelfAttention a;
    a.n_heads = n_heads;
    a.wq = init_linear(rng, d, d);
    a.wk = init_linear(rng, d, d);
    a.wv = init_linear(rng, d, d);
    a.wo = init_linear(rng, d, d);
    return a;
  }

  Tensor operator()(const Tensor& x, std::span<const std::int64_t> positions, double rope_base) const {
    auto q = matmul(x, wq);
    auto k = matmul(x, wk);
    auto v = matmul(x, wv);
    return matmul(multi_head_attention(q, k, v, n_heads, true, positions, positions, rope_base), wo);
  }

  void collect(const std::string& prefix, ParamSet& ps) const {
    ps.add(prefix + ".wq", wq);
    ps.add(prefix + ".wk", wk);
    ps.add(prefix + ".wv", wv);
    ps.add(prefix + ".wo", wo);
  }
};

struct DecoderOutput {
  Tensor logits;  // [T x V]
  std::vector<MoEOutput> moe;  // one per layer
  std::vector<RoutingRecord> records() const {
    std::vector<RoutingRecord> r;
    for (const auto& m : moe) r.push_back(m.record);
    return r;
  }
};

class Decoder {
 public:
  struct Layer {
    Tensor attn_norm;
    CausalSelfAttention attn;
    Tensor ffn_norm;
    MoELayer moe;
  };

  Decoder() = default;

  Decoder(const DecoderConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    const auto d = config.hidden_dim;
    embedding_ = init_matrix(rng, config.vocab_size, d, 1.0 / std::sqrt(static_cast<double>(d)));
    if (!config.tie_embeddings) unembedding_ = init_linear(rng, d, config.vocab_size);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      Layer layer;
      layer.attn_norm = init_ones(d);
      layer.attn = CausalSelfAttention::init(rng, d, config.n_heads);
      layer.ffn_norm = init_ones(d);
      layer.moe = MoELayer(config.moe, d, rng);
      layers_.push_back(std::move(layer));
    }
    final_norm_ = init_ones(d);
  }

  const DecoderConfig& config() const { return config_; }

  // Stage transitions change context window and RoPE base; weights untouched.
  void reconfigure(std::size_t context_length, double rope_base) {
    DecoderConfig c = config_;
    c.context_length = context_length;
    c.rope_base = rope_base;
    c.validate();
    config_ = c;
  }

  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  const Tensor& embedding() const { return embedding_; }

  // Causal self-attention sublayer of `layer` on hidden[T x d].
  Tensor attention(std::size_t layer, const Tensor& hidden,
                   std::span<const std::int64_t> positions) const {
    if (hidden.rows() > config_.context_length)
      throw std::length_error("attention: sequence of " + std::to_string(hidden.rows()) +
                              " exceeds context length " + std::to_string(config_.context_length));
    return layers_.at(layer).attn(hidden, positions, config_.rope_base);
  }

  DecoderOutput forward(const TokenSequence& seq, const std::vector<Tensor>& visual_tokens = {}) const {
    seq.validate();
    const std::size_t t = seq.size();
    if (t == 0) throw std::invalid_argument("decoder: empty sequence");
    if (t > config_.context_length)
      throw std::length_error("decoder: sequence of " + std::to_string(t) +
                              " exceeds context length " + std::to_string(config_.context_length));
    auto hidden = embed(seq, visual_tokens);
    DecoderOutput out;
    out.moe.reserve(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      hidden = add(hidden, layer.attn(rms_norm(hidden, layer.attn_norm), seq.positions, config_.rope_base));
      auto m = layer.moe.forward(rms_norm(hidden, layer.ffn_norm), seq.modality, l);
      hidden = add(hidden, m.output);
      out.moe.push_back(std::move(m));
    }
    hidden = rms_norm(hidden, final_norm_);
    out.logits = config_.tie_embeddings ? matmul(hidden, transpose(embedding_))
                                        : matmul(hidden, unembedding_);
    return out;
  }

  void collect(ParamSet& ps) const {
    ps.add("embedding", embedding_);
    if (!config_.tie_embeddings) ps.add("unembedding", unembedding_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const std::string p = "layers." + std::to_string(l);
      ps.add(p + ".attn_norm", layers_[l].attn_norm);
      layers_[l].attn.collect(p + ".attn", ps);
      ps.add(p + ".ffn_norm", layers_[l].ffn_norm);
      layers_[l].moe.collect(p + ".moe", ps);
    }
    ps.add("final_norm", final_norm_);
  }

 private:
  Tensor embed(const TokenSequence& seq, const std::vector<Tensor>& visual_tokens) const {
    const std::size_t t = seq.size(), d = config_.hidden_dim;
    std::vector<std::size_t> ids(t);
    for (std::size_t i = 0; i < t; ++i) {
      if (seq.modality[i] == Modality::Visual) continue;
      const auto id = seq.token_ids[i];
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
        throw std::out_of_range("decoder: token id " + std::to_string(id) + " outside vocabulary");
      ids[i] = static_cast<std::size_t>(id);
    }
    auto text = gather_rows(embedding_, ids);
    const std::size_t need = seq.visual_count();
    if (need == 0) return text;
    std::size_t have = 0;
    for (const auto& v : visual_tokens) {
      if (v.dim() != 2 || v.cols() != d)
        throw ShapeError("decoder: visual token block " + shape_str(v.shape()) +
                         " does not match hidden_dim " + std::to_string(d));
      have += v.rows();
    }
    if (have != need)
      throw std::invalid_argument("decoder: " + std::to_string(need) + " visual positions but " +
                                  std::to_string(have) + " visual token vectors");
    std::vector<Tensor> parts{text};
    parts.insert(parts.end(), visual_tokens.begin(), visual_tokens.end());
    auto pool = concat_rows(parts);
    std::vector<std::size_t> pick(t);
    std::size_t next_visual = t;
    for (std::size_t i = 0; i < t; ++i)
      pick[i] = seq.modality[i] == Modality::Visual ? next_visual++ : i;
    return gather_rows(pool, pick);
  }

  DecoderConfig config_;
  Tensor embedding_;
  Tensor unembedding_;
  std::vector<Layer> layers_;
  Tensor final_norm_;
};

inline Tensor lm_loss(const Tensor& logits, const TokenSequence& seq) {
  auto tg = lm_targets(seq);
  return cross_entropy(logits, tg, kIgnoreIndex);
}

}  // namespace mmoe
