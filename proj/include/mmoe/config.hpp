#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace mmoe {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ExpertKind { Gated, Plain };

// Fine-grained MoE feed-forward block. Routed experts are partitioned into
// contiguous groups of `group_size` for the load-balancing loss.
struct MoEConfig {
  std::size_t n_routed = 64;
  std::size_t n_shared = 2;
  std::size_t top_k = 6;
  std::size_t expert_ffn_dim = 1664;
  std::size_t group_size = 8;
  ExpertKind expert_kind = ExpertKind::Gated;

  std::size_t n_groups() const { return n_routed / group_size; }

  void validate() const {
    if (n_routed == 0 || top_k == 0 || expert_ffn_dim == 0 || group_size == 0)
      throw ConfigError("moe: n_routed, top_k, expert_ffn_dim and group_size must be positive");
    if (top_k > n_routed)
      throw ConfigError("moe: top_k " + std::to_string(top_k) + " exceeds n_routed " +
                        std::to_string(n_routed));
    if (n_routed % group_size != 0)
      throw ConfigError("moe: n_routed " + std::to_string(n_routed) +
                        " not divisible by group_size " + std::to_string(group_size));
  }

  // Weight matrices per expert: gate, up and down for the gated unit.
  std::size_t matrices_per_expert() const { return expert_kind == ExpertKind::Gated ? 3 : 2; }
};

struct DecoderConfig {
  std::size_t hidden_dim = 2560;
  std::size_t n_layers = 28;
  std::size_t n_heads = 20;
  std::size_t head_dim = 128;
  std::size_t vocab_size = 100000;
  std::size_t context_length = 8192;
  double rope_base = 100000.0;
  bool tie_embeddings = true;
  MoEConfig moe;

  void validate() const {
    if (hidden_dim == 0 || n_heads == 0 || head_dim == 0 || vocab_size == 0)
      throw ConfigError("decoder: dimensions must be positive");
    if (n_heads * head_dim != hidden_dim)
      throw ConfigError("decoder: n_heads * head_dim (" + std::to_string(n_heads * head_dim) +
                        ") != hidden_dim (" + std::to_string(hidden_dim) + ")");
    if (head_dim % 2 != 0) throw ConfigError("decoder: head_dim must be even for rotary embeddings");
    if (context_length < 1) throw ConfigError("decoder: context_length must be >= 1");
    if (!(rope_base > 0.0)) throw ConfigError("decoder: rope_base must be positive");
    moe.validate();
  }
};

struct VisionConfig {
  std::size_t patch_size = 14;
  std::size_t vit_dim = 64;
  std::size_t vit_layers = 2;
  std::size_t vit_heads = 4;
  std::size_t vit_ffn_dim = 256;
  // Largest patch grid edge supported by the learned 2-D position tables.
  std::size_t max_grid = 70;
  std::size_t n_queries_base = 128;
  std::size_t n_queries_high_extra = 128;
  std::size_t resampler_ffn_dim = 256;
  std::size_t output_dim = 64;

  std::size_t patch_dim() const { return patch_size * patch_size * 3; }

  void validate() const {
    if (patch_size == 0 || vit_dim == 0 || vit_layers == 0 || vit_heads == 0 || vit_ffn_dim == 0 ||
        max_grid == 0 || n_queries_base == 0 || resampler_ffn_dim == 0 || output_dim == 0)
      throw ConfigError("vision: dimensions must be positive");
    if (vit_dim % vit_heads != 0) throw ConfigError("vision: vit_dim not divisible by vit_heads");
  }
};

struct ModelConfig {
  DecoderConfig decoder;
  VisionConfig vision;

  void validate() const {
    decoder.validate();
    vision.validate();
    if (vision.output_dim != decoder.hidden_dim)
      throw ConfigError("vision output_dim must equal decoder hidden_dim");
  }
};

// Reference-scale architecture, used only for parameter dry runs. Head geometry,
// vocabulary and embedding tying are assumptions; the vision tower mirrors a
// SigLIP-SO400M-sized ViT.
inline ModelConfig paper_preset() {
  ModelConfig c;
  c.decoder = DecoderConfig{};
  c.vision.patch_size = 14;
  c.vision.vit_dim = 1152;
  c.vision.vit_layers = 27;
  c.vision.vit_heads = 16;
  c.vision.vit_ffn_dim = 4304;
  c.vision.max_grid = 70;
  c.vision.n_queries_base = 128;
  c.vision.n_queries_high_extra = 128;
  c.vision.resampler_ffn_dim = 4608;
  c.vision.output_dim = c.decoder.hidden_dim;
  return c;
}

// Small model that trains in minutes on one CPU core.
inline ModelConfig desk_preset() {
  ModelConfig c;
  auto& d = c.decoder;
  d.hidden_dim = 64;
  d.n_layers = 2;
  d.n_heads = 4;
  d.head_dim = 16;
  d.vocab_size = 260;
  d.context_length = 256;
  d.rope_base = 100000.0;
  d.tie_embeddings = true;
  d.moe.n_routed = 8;
  d.moe.n_shared = 1;
  d.moe.top_k = 2;
  d.moe.expert_ffn_dim = 64;
  d.moe.group_size = 4;
  c.vision.patch_size = 35;
  c.vision.vit_dim = 64;
  c.vision.vit_layers = 2;
  c.vision.vit_heads = 4;
  c.vision.vit_ffn_dim = 128;
  c.vision.max_grid = 28;
  c.vision.n_queries_base = 16;
  c.vision.n_queries_high_extra = 16;
  c.vision.resampler_ffn_dim = 128;
  c.vision.output_dim = d.hidden_dim;
  return c;
}

inline const char* to_string(ExpertKind k) { return k == ExpertKind::Gated ? "gated" : "plain"; }

inline ExpertKind expert_kind_from_string(const std::string& s) {
  if (s == "gated") return ExpertKind::Gated;
  if (s == "plain") return ExpertKind::Plain;
  throw ConfigError("unknown expert kind '" + s + "'");
}

inline nlohmann::json to_json(const ModelConfig& c) {
  const auto& d = c.decoder;
  const auto& m = d.moe;
  const auto& v = c.vision;
  return {
      {"decoder",
       {{"hidden_dim", d.hidden_dim},
        {"n_layers", d.n_layers},
        {"n_heads", d.n_heads},
        {"head_dim", d.head_dim},
        {"vocab_size", d.vocab_size},
        {"context_length", d.context_length},
        {"rope_base", d.rope_base},
        {"tie_embeddings", d.tie_embeddings},
        {"moe",
         {{"n_routed", m.n_routed},
          {"n_shared", m.n_shared},
          {"top_k", m.top_k},
          {"expert_ffn_dim", m.expert_ffn_dim},
          {"group_size", m.group_size},
          {"expert_kind", to_string(m.expert_kind)}}}}},
      {"vision",
       {{"patch_size", v.patch_size},
        {"vit_dim", v.vit_dim},
        {"vit_layers", v.vit_layers},
        {"vit_heads", v.vit_heads},
        {"vit_ffn_dim", v.vit_ffn_dim},
        {"max_grid", v.max_grid},
        {"n_queries_base", v.n_queries_base},
        {"n_queries_high_extra", v.n_queries_high_extra},
        {"resampler_ffn_dim", v.resampler_ffn_dim},
        {"output_dim", v.output_dim}}}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  const auto& d = j.at("decoder");
  c.decoder.hidden_dim = d.at("hidden_dim");
  c.decoder.n_layers = d.at("n_layers");
  c.decoder.n_heads = d.at("n_heads");
  c.decoder.head_dim = d.at("head_dim");
  c.decoder.vocab_size = d.at("vocab_size");
  c.decoder.context_length = d.at("context_length");
  c.decoder.rope_base = d.at("rope_base");
  c.decoder.tie_embeddings = d.at("tie_embeddings");
  const auto& m = d.at("moe");
  c.decoder.moe.n_routed = m.at("n_routed");
  c.decoder.moe.n_shared = m.at("n_shared");
  c.decoder.moe.top_k = m.at("top_k");
  c.decoder.moe.expert_ffn_dim = m.at("expert_ffn_dim");
  c.decoder.moe.group_size = m.at("group_size");
  c.decoder.moe.expert_kind = expert_kind_from_string(m.at("expert_kind"));
  const auto& v = j.at("vision");
  c.vision.patch_size = v.at("patch_size");
  c.vision.vit_dim = v.at("vit_dim");
  c.vision.vit_layers = v.at("vit_layers");
  c.vision.vit_heads = v.at("vit_heads");
  c.vision.vit_ffn_dim = v.at("vit_ffn_dim");
  c.vision.max_grid = v.at("max_grid");
  c.vision.n_queries_base = v.at("n_queries_base");
  c.vision.n_queries_high_extra = v.at("n_queries_high_extra");
  c.vision.resampler_ffn_dim = v.at("resampler_ffn_dim");
  c.vision.output_dim = v.at("output_dim");
  return c;
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Hash of the architecture only. Stage-dependent fields (context length and
// RoPE base) are excluded so checkpoints move between training stages.
inline std::uint64_t architecture_hash(const ModelConfig& c) {
  auto j = to_json(c);
  j["decoder"].erase("context_length");
  j["decoder"].erase("rope_base");
  return fnv1a64(j.dump());
}

}  // namespace mmoe
