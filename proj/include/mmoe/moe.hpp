#pragma once

// Fine-grained mixture-of-experts feed-forward layer.
//
// Each token is processed by every shared expert plus the top_k routed
// experts chosen by a softmax router. Selected router probabilities are
// renormalized to sum to one and weight the routed expert outputs; shared
// experts are added with weight one. Dispatch is dropless.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mmoe/binary_io.hpp"
#include "mmoe/config.hpp"
#include "mmoe/nn.hpp"
#include "mmoe/ops.hpp"

namespace mmoe {

enum class Modality : std::uint8_t { Text = 0, Visual = 1 };

inline const char* to_string(Modality m) { return m == Modality::Text ? "text" : "visual"; }

struct TokenRoute {
  std::vector<std::size_t> selected;  // routed expert indices, descending probability
  std::vector<double> weights;        // renormalized probabilities of `selected`
  std::vector<double> probs;          // full softmax over routed experts
  Modality modality = Modality::Text;
};

struct RoutingRecord {
  std::size_t layer_index = 0;
  std::size_t n_routed = 0;
  std::size_t top_k = 0;
  std::vector<TokenRoute> tokens;

  bool empty() const { return tokens.empty(); }
  std::size_t size() const { return tokens.size(); }
};

struct AuxLossReport {
  double balance_loss = 0.0;
  double z_loss = 0.0;
  std::vector<double> group_fraction;     // f_g
  std::vector<double> group_probability;  // P_g
};

namespace detail {

inline std::vector<double> softmax_row(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

// Top-k of `probs`, larger first, ties broken toward the lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> probs, std::size_t k) {
  std::vector<std::size_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (probs[a] != probs[b]) return probs[a] > probs[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

inline TokenRoute route_token(std::vector<double> probs, std::size_t top_k, Modality m) {
  TokenRoute tr;
  tr.selected = top_k_indices(probs, top_k);
  double s = 0.0;
  for (auto e : tr.selected) s += probs[e];
  for (auto e : tr.selected) tr.weights.push_back(probs[e] / s);
  tr.probs = std::move(probs);
  tr.modality = m;
  return tr;
}

}  // namespace detail

// Routes every row of router_logits[T x n_routed]. `modalities` may be empty
// (all text) or hold one tag per token.
inline RoutingRecord route(const Tensor& router_logits, const MoEConfig& config,
                           std::span<const Modality> modalities = {},
                           std::size_t layer_index = 0) {
  if (config.top_k > config.n_routed)
    throw ConfigError("route: top_k " + std::to_string(config.top_k) + " exceeds n_routed " +
                      std::to_string(config.n_routed));
  if (router_logits.dim() != 2 || router_logits.cols() != config.n_routed)
    throw ShapeError("route: expected [T x " + std::to_string(config.n_routed) + "] logits, got " +
                     shape_str(router_logits.shape()));
  const std::size_t t = router_logits.rows(), n = config.n_routed;
  if (!modalities.empty() && modalities.size() != t)
    throw ShapeError("route: modality tags do not match token count");
  RoutingRecord rec{layer_index, n, config.top_k, {}};
  rec.tokens.reserve(t);
  auto data = router_logits.data();
  for (std::size_t r = 0; r < t; ++r) {
    auto probs = detail::softmax_row(data.subspan(r * n, n));
    rec.tokens.push_back(detail::route_token(std::move(probs), config.top_k,
                                             modalities.empty() ? Modality::Text : modalities[r]));
  }
  return rec;
}

// Group-relaxed load-balancing loss G * sum_g f_g * P_g over contiguous groups
// of config.group_size routed experts.
inline AuxLossReport load_balance_loss(const RoutingRecord& record, const MoEConfig& config) {
  if (record.empty()) throw std::invalid_argument("load_balance_loss: empty routing record");
  if (record.n_routed != config.n_routed || config.n_routed % config.group_size != 0)
    throw ConfigError("load_balance_loss: record/config expert counts disagree");
  const std::size_t groups = config.n_groups();
  AuxLossReport rep;
  rep.group_fraction.assign(groups, 0.0);
  rep.group_probability.assign(groups, 0.0);
  std::size_t assignments = 0;
  for (const auto& tok : record.tokens) {
    for (auto e : tok.selected) rep.group_fraction[e / config.group_size] += 1.0;
    assignments += tok.selected.size();
    for (std::size_t e = 0; e < tok.probs.size(); ++e)
      rep.group_probability[e / config.group_size] += tok.probs[e];
  }
  const double t = static_cast<double>(record.size());
  double loss = 0.0;
  for (std::size_t g = 0; g < groups; ++g) {
    rep.group_fraction[g] /= static_cast<double>(assignments);
    rep.group_probability[g] /= t;
    loss += rep.group_fraction[g] * rep.group_probability[g];
  }
  rep.balance_loss = static_cast<double>(groups) * loss;
  return rep;
}

// Differentiable form of the balance loss: f_g is a constant of the discrete
// routing; gradients reach the router only through P_g.
inline Tensor balance_loss_tensor(const Tensor& probs, const RoutingRecord& record,
                                  const MoEConfig& config) {
  auto rep = load_balance_loss(record, config);
  const std::size_t t = probs.rows(), n = probs.cols();
  const double groups = static_cast<double>(config.n_groups());
  std::vector<double> coef(t * n);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t e = 0; e < n; ++e)
      coef[r * n + e] = groups * rep.group_fraction[e / config.group_size] / static_cast<double>(t);
  return sum(mul(probs, Tensor::from({t, n}, std::move(coef))));
}

// Mean over tokens of the squared log-partition of the router logits.
inline Tensor z_loss_tensor(const Tensor& router_logits) {
  auto lse = logsumexp_rows(router_logits);
  return mean(mul(lse, lse));
}

inline double z_loss(const Tensor& router_logits) {
  if (router_logits.dim() != 2) throw ShapeError("z_loss: expected [T x n] logits");
  return z_loss_tensor(router_logits.detach()).item();
}

// One FFN expert: gated (silu(x Wg) * (x Wu)) Wd, or plain silu(x W1) W2.
struct Expert {
  ExpertKind kind = ExpertKind::Gated;
  Tensor w_gate;  // [d x e]  (plain: input projection)
  Tensor w_up;    // [d x e]  (unused for plain)
  Tensor w_down;  // [e x d]

  static Expert init(Rng& rng, std::size_t d, std::size_t e, ExpertKind kind) {
    Expert x;
    x.kind = kind;
    x.w_gate = init_linear(rng, d, e);
    if (kind == ExpertKind::Gated) x.w_up = init_linear(rng, d, e);
    x.w_down = init_linear(rng, e, d);
    return x;
  }

  Tensor operator()(const Tensor& x) const {
    auto h = silu(matmul(x, w_gate));
    if (kind == ExpertKind::Gated) h = mul(h, matmul(x, w_up));
    return matmul(h, w_down);
  }

  void collect(const std::string& prefix, ParamSet& ps) const {
    ps.add(prefix + ".w_gate", w_gate);
    if (kind == ExpertKind::Gated) ps.add(prefix + ".w_up", w_up);
    ps.add(prefix + ".w_down", w_down);
  }
};

struct MoEOutput {
  Tensor output;        // [T x d]
  RoutingRecord record;
  Tensor router_logits;  // [T x n_routed]
  Tensor router_probs;   // [T x n_routed]
};

class MoELayer {
 public:
  MoELayer() = default;

  MoELayer(const MoEConfig& config, std::size_t hidden_dim, Rng& rng)
      : config_(config), hidden_dim_(hidden_dim) {
    config_.validate();
    router_ = init_linear(rng, hidden_dim, config.n_routed);
    for (std::size_t i = 0; i < config.n_shared; ++i)
      shared_.push_back(Expert::init(rng, hidden_dim, config.expert_ffn_dim, config.expert_kind));
    for (std::size_t i = 0; i < config.n_routed; ++i)
      routed_.push_back(Expert::init(rng, hidden_dim, config.expert_ffn_dim, config.expert_kind));
  }

  const MoEConfig& config() const { return config_; }
  Tensor& router() { return router_; }
  const Tensor& router() const { return router_; }
  std::vector<Expert>& routed() { return routed_; }
  const std::vector<Expert>& routed() const { return routed_; }
  std::vector<Expert>& shared() { return shared_; }
  const std::vector<Expert>& shared() const { return shared_; }

  MoEOutput forward(const Tensor& hidden, std::span<const Modality> modalities = {},
                    std::size_t layer_index = 0) const {
    if (hidden.dim() != 2 || hidden.cols() != hidden_dim_)
      throw ShapeError("moe_forward: hidden " + shape_str(hidden.shape()) + " vs hidden_dim " +
                       std::to_string(hidden_dim_));
    const std::size_t t = hidden.rows(), n = config_.n_routed, k = config_.top_k;
    MoEOutput out;
    out.router_logits = matmul(hidden, router_);
    out.router_probs = softmax(out.router_logits, 1);
    out.record = RoutingRecord{layer_index, n, k, {}};
    out.record.tokens.reserve(t);
    for (std::size_t r = 0; r < t; ++r) {
      auto p = out.router_probs.data().subspan(r * n, n);
      out.record.tokens.push_back(detail::route_token(
          {p.begin(), p.end()}, k, modalities.empty() ? Modality::Text : modalities[r]));
    }

    std::vector<std::size_t> flat;
    flat.reserve(t * k);
    for (std::size_t r = 0; r < t; ++r)
      for (auto e : out.record.tokens[r].selected) flat.push_back(r * n + e);
    auto weights = normalize_rows(reshape(take(out.router_probs, flat), {t, k}));

    Tensor acc = Tensor::zeros({t, hidden_dim_});
    for (const auto& ex : shared_) acc = add(acc, ex(hidden));
    std::vector<std::vector<std::size_t>> rows(n), slots(n);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t s = 0; s < k; ++s) {
        const auto e = out.record.tokens[r].selected[s];
        rows[e].push_back(r);
        slots[e].push_back(r * k + s);
      }
    for (std::size_t e = 0; e < n; ++e) {
      if (rows[e].empty()) continue;
      auto y = routed_[e](gather_rows(hidden, rows[e]));
      y = scale_rows(y, take(weights, slots[e]));
      acc = index_add_rows(acc, rows[e], y);
    }
    out.output = acc;
    return out;
  }

  void collect(const std::string& prefix, ParamSet& ps) const {
    ps.add(prefix + ".router", router_);
    for (std::size_t i = 0; i < shared_.size(); ++i)
      shared_[i].collect(prefix + ".shared." + std::to_string(i), ps);
    for (std::size_t i = 0; i < routed_.size(); ++i)
      routed_[i].collect(prefix + ".routed." + std::to_string(i), ps);
  }

 private:
  MoEConfig config_;
  std::size_t hidden_dim_ = 0;
  Tensor router_;
  std::vector<Expert> shared_;
  std::vector<Expert> routed_;
};

// Binary routing trace: "MMOETRC1", u32 version, u32 n_routed, u32 top_k,
// then one entry per token: u32 layer, u32 token index, u8 modality,
// top_k x u32 expert index, top_k x f64 weight. All little-endian.
inline constexpr char kTraceMagic[8] = {'M', 'M', 'O', 'E', 'T', 'R', 'C', '1'};
inline constexpr std::uint32_t kTraceVersion = 1;

struct TraceEntry {
  std::uint32_t layer = 0;
  std::uint32_t token = 0;
  Modality modality = Modality::Text;
  std::vector<std::uint32_t> experts;
  std::vector<double> weights;
};

class TraceWriter {
 public:
  TraceWriter(const std::string& path, std::size_t n_routed, std::size_t top_k)
      : os_(path, std::ios::binary), top_k_(top_k) {
    if (!os_) throw std::runtime_error("cannot open trace file for writing: " + path);
    os_.write(kTraceMagic, 8);
    bin::put_u32(os_, kTraceVersion);
    bin::put_u32(os_, static_cast<std::uint32_t>(n_routed));
    bin::put_u32(os_, static_cast<std::uint32_t>(top_k));
  }

  void write(const RoutingRecord& rec) {
    if (rec.top_k != top_k_) throw std::invalid_argument("trace: record top_k differs from header");
    for (std::size_t t = 0; t < rec.tokens.size(); ++t) {
      const auto& tok = rec.tokens[t];
      bin::put_u32(os_, static_cast<std::uint32_t>(rec.layer_index));
      bin::put_u32(os_, static_cast<std::uint32_t>(t));
      bin::put_u8(os_, static_cast<std::uint8_t>(tok.modality));
      for (auto e : tok.selected) bin::put_u32(os_, static_cast<std::uint32_t>(e));
      for (auto w : tok.weights) bin::put_f64(os_, w);
    }
    if (!os_) throw std::runtime_error("trace: write failed");
  }

  void flush() { os_.flush(); }

 private:
  std::ofstream os_;
  std::size_t top_k_;
};

struct Trace {
  std::uint32_t n_routed = 0;
  std::uint32_t top_k = 0;
  std::vector<TraceEntry> entries;
};

inline Trace read_trace(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open trace file: " + path);
  char magic[8];
  bin::get_exact(is, magic, 8, "trace magic");
  if (!std::equal(magic, magic + 8, kTraceMagic)) throw FormatError("not a routing trace: " + path);
  const auto version = bin::get_u32(is, "trace version");
  if (version != kTraceVersion)
    throw FormatError("unsupported trace version " + std::to_string(version));
  Trace tr;
  tr.n_routed = bin::get_u32(is, "trace header");
  tr.top_k = bin::get_u32(is, "trace header");
  while (is.peek() != std::char_traits<char>::eof()) {
    TraceEntry e;
    e.layer = bin::get_u32(is, "trace entry");
    e.token = bin::get_u32(is, "trace entry");
    const auto m = bin::get_u8(is, "trace entry");
    if (m > 1) throw FormatError("trace: bad modality tag");
    e.modality = static_cast<Modality>(m);
    for (std::uint32_t i = 0; i < tr.top_k; ++i) e.experts.push_back(bin::get_u32(is, "trace entry"));
    for (std::uint32_t i = 0; i < tr.top_k; ++i) e.weights.push_back(bin::get_f64(is, "trace entry"));
    tr.entries.push_back(std::move(e));
  }
  return tr;
}

}  // namespace mmoe
