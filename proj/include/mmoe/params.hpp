#pragma once

// Parameter dry run: counts derived from configuration alone, no allocation.

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mmoe/config.hpp"

namespace mmoe {

struct ParameterReport {
  // Component -> parameter count. Keys: embeddings, unembedding, attention,
  // router, shared_experts, routed_experts, norms, vision.
  std::map<std::string, std::uint64_t> items;
  std::uint64_t total = 0;
  // Per-token activated parameters. Embedding and unembedding tables are
  // excluded: a token touches one embedding row, and the tables are reported
  // separately.
  std::uint64_t activated_text = 0;
  // activated_text plus the full vision encoder.
  std::uint64_t activated_visual = 0;
  std::vector<std::string> assumptions;

  std::uint64_t item(const std::string& k) const {
    auto it = items.find(k);
    return it == items.end() ? 0 : it->second;
  }
};

inline std::uint64_t count_vision_parameters(const VisionConfig& v) {
  const std::uint64_t w = v.vit_dim, f = v.vit_ffn_dim;
  std::uint64_t n = 0;
  n += v.patch_dim() * w + w;          // patch embedding
  n += 2 * v.max_grid * w;             // row + column position tables
  const std::uint64_t per_layer = 2 * w                // two norms
                                  + 4 * w * w + 4 * w  // q, k, v, o with bias
                                  + w * f + f + f * w + w;  // MLP
  n += per_layer * v.vit_layers;
  n += w;                              // final norm
  // Resampler: learned queries, cross-attention, FFN to decoder width.
  n += (v.n_queries_base + v.n_queries_high_extra) * w;
  n += 4 * w * w + 4 * w;
  n += w * v.resampler_ffn_dim + v.resampler_ffn_dim;
  n += v.resampler_ffn_dim * v.output_dim + v.output_dim;
  return n;
}

inline ParameterReport count_parameters(const DecoderConfig& d,
                                        const std::optional<VisionConfig>& vision = std::nullopt) {
  const std::uint64_t h = d.hidden_dim, layers = d.n_layers;
  const auto& m = d.moe;
  const std::uint64_t per_expert = m.matrices_per_expert() * h * m.expert_ffn_dim;

  ParameterReport r;
  r.items["embeddings"] = d.vocab_size * h;
  r.items["unembedding"] = d.tie_embeddings ? 0 : d.vocab_size * h;
  r.items["attention"] = layers * 4 * h * h;
  r.items["router"] = layers * h * m.n_routed;
  r.items["shared_experts"] = layers * m.n_shared * per_expert;
  r.items["routed_experts"] = layers * m.n_routed * per_expert;
  r.items["norms"] = layers * 2 * h + h;
  r.items["vision"] = vision ? count_vision_parameters(*vision) : 0;

  for (const auto& [k, v] : r.items)
    if (k != "vision") r.total += v;
  r.activated_text = r.items["attention"] + r.items["router"] + r.items["shared_experts"] +
                     layers * m.top_k * per_expert + r.items["norms"];
  r.activated_visual = r.activated_text + r.items["vision"];

  std::ostringstream os;
  os << "vocab_size=" << d.vocab_size << (d.tie_embeddings ? " (tied input/output embeddings)" : " (untied embeddings)");
  r.assumptions.push_back(os.str());
  r.assumptions.push_back("attention heads=" + std::to_string(d.n_heads) + " x head_dim=" +
                          std::to_string(d.head_dim) + ", no biases, 4*d*d per layer");
  r.assumptions.push_back(std::string("expert ffn=") + to_string(m.expert_kind) +
                          ", every layer is MoE");
  r.assumptions.push_back("activated counts exclude embedding/unembedding tables");
  return r;
}

inline std::string format_count(std::uint64_t n) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  if (n >= 1000000000ULL) os << static_cast<double>(n) / 1e9 << "B";
  else if (n >= 1000000ULL) os << static_cast<double>(n) / 1e6 << "M";
  else if (n >= 1000ULL) os << static_cast<double>(n) / 1e3 << "K";
  else os << n;
  return os.str();
}

// Human-readable report.
inline std::string to_text(const ParameterReport& r, const std::string& title) {
  std::ostringstream os;
  os << "== " << title << " ==\n";
  for (const auto& [k, v] : r.items) {
    os << "  " << k;
    for (std::size_t i = k.size(); i < 16; ++i) os << ' ';
    os << v << "  (" << format_count(v) << ")\n";
  }
  os << "  total decoder     " << r.total << "  (" << format_count(r.total) << ")\n";
  os << "  activated/text    " << r.activated_text << "  (" << format_count(r.activated_text) << ")\n";
  os << "  activated/visual  " << r.activated_visual << "  (" << format_count(r.activated_visual) << ")\n";
  for (const auto& a : r.assumptions) os << "  assumption: " << a << "\n";
  return os.str();
}

// Flat key=value map, one entry per line, sorted by key.
inline std::string to_kv(const ParameterReport& r) {
  std::map<std::string, std::uint64_t> flat(r.items.begin(), r.items.end());
  flat["total"] = r.total;
  flat["activated_text"] = r.activated_text;
  flat["activated_visual"] = r.activated_visual;
  std::ostringstream os;
  for (const auto& [k, v] : flat) os << k << '=' << v << '\n';
  return os.str();
}

inline std::map<std::string, std::uint64_t> parse_kv(const std::string& text) {
  std::map<std::string, std::uint64_t> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("parameter map: malformed line '" + line + "'");
    out[line.substr(0, eq)] = std::stoull(line.substr(eq + 1));
  }
  return out;
}

}  // namespace mmoe
