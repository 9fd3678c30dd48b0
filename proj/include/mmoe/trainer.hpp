#pragma once

// Staged training driver: stage configuration, Adam, loss mixing, stage data
// assembly, the training loop with a divergence guard, and checkpoints.
//
// Checkpoint file: "MMOECKPT", u64 header size, JSON header
//   {format_version, config, stage, step, architecture_hash, parameters:
//    [{name, shape}], has_optimizer, optimizer_step, payload_bytes,
//    payload_fnv1a64}
// then the payload: every parameter as little-endian f64 in header order,
// followed (if has_optimizer) by all first moments, then all second moments,
// in the same order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmoe/binary_io.hpp"
#include "mmoe/config.hpp"
#include "mmoe/data/clustering.hpp"
#include "mmoe/data/corpus.hpp"
#include "mmoe/data/interleaved.hpp"
#include "mmoe/data/packing.hpp"
#include "mmoe/decoder.hpp"
#include "mmoe/moe.hpp"
#include "mmoe/nn.hpp"
#include "mmoe/random.hpp"
#include "mmoe/vision.hpp"

namespace mmoe {

enum class StageTag { LanguagePretrain, MultimodalPretrain, LongContext, PostTrain };

inline const char* to_string(StageTag s) {
  switch (s) {
    case StageTag::LanguagePretrain: return "language-pretrain";
    case StageTag::MultimodalPretrain: return "multimodal-pretrain";
    case StageTag::LongContext: return "long-context";
    default: return "post-train";
  }
}

inline StageTag stage_tag_from_string(const std::string& s) {
  for (auto t : {StageTag::LanguagePretrain, StageTag::MultimodalPretrain, StageTag::LongContext,
                 StageTag::PostTrain})
    if (s == to_string(t)) return t;
  throw std::invalid_argument("unknown stage '" + s + "'");
}

inline constexpr double kLongContextRopeBase = 5e6;

struct LrSchedule {
  enum class Decay { Cosine, Linear, Constant };
  double peak = 3e-3;
  std::size_t warmup_steps = 10;
  Decay decay = Decay::Cosine;
  double final_fraction = 0.1;

  // `progress` is the consumed fraction of the stage budget.
  double at(std::size_t step, double progress) const {
    if (step < warmup_steps) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    progress = std::clamp(progress, 0.0, 1.0);
    double shape = 1.0;
    if (decay == Decay::Cosine) shape = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    else if (decay == Decay::Linear) shape = 1.0 - progress;
    return peak * (final_fraction + (1.0 - final_fraction) * shape);
  }
};

inline const char* to_string(LrSchedule::Decay d) {
  switch (d) {
    case LrSchedule::Decay::Cosine: return "cosine";
    case LrSchedule::Decay::Linear: return "linear";
    default: return "constant";
  }
}

struct StageConfig {
  StageTag stage = StageTag::LanguagePretrain;
  std::size_t context_length = 128;
  double rope_base = 1e5;
  std::uint64_t token_budget = 0;
  std::size_t max_steps = 0;  // 0: budget only
  std::map<SourceTag, double> mixture;
  double balance_coef = 0.01;
  double z_coef = 0.001;
  LrSchedule lr;
  double grad_clip = 1.0;  // global norm; 0 disables
  bool train_vision = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (context_length < 2) throw ConfigError("stage: context_length must be at least 2");
    if (!(rope_base > 0)) throw ConfigError("stage: rope_base must be positive");
    if (balance_coef < 0 || z_coef < 0) throw ConfigError("stage: loss coefficients must be nonnegative");
    if (!(lr.peak >= 0)) throw ConfigError("stage: learning rate must be nonnegative");
    double total = 0;
    for (const auto& [_, w] : mixture) {
      if (w < 0) throw ConfigError("stage: mixture weights must be nonnegative");
      total += w;
    }
    if (token_budget > 0 && total <= 0) throw ConfigError("stage: empty data mixture");
    if (stage == StageTag::LongContext && rope_base != kLongContextRopeBase)
      throw ConfigError("stage: long-context stage requires rope_base 5e6");
  }
};

// Stage order is fixed; context never shrinks through the long-context stage,
// which must also extend the context of the stages before it.
inline void validate_stage_sequence(const std::vector<StageConfig>& stages) {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    stages[i].validate();
    if (i > 0 && static_cast<int>(stages[i].stage) <= static_cast<int>(stages[i - 1].stage))
      throw ConfigError(std::string("stage order violated: ") + to_string(stages[i].stage) + " after " +
                        to_string(stages[i - 1].stage));
    if (i > 0 && stages[i].stage <= StageTag::LongContext &&
        stages[i].context_length < stages[i - 1].context_length)
      throw ConfigError(std::string("context_length decreases at ") + to_string(stages[i].stage));
    if (stages[i].stage == StageTag::LongContext)
      for (std::size_t j = 0; j < i; ++j)
        if (stages[j].context_length >= stages[i].context_length)
          throw ConfigError("long-context stage must extend the context of earlier stages");
  }
}

inline std::vector<StageConfig> default_stages(const ModelConfig& model) {
  const std::size_t base = model.decoder.context_length;
  const double rope = model.decoder.rope_base;
  std::vector<StageConfig> s(4);
  s[0].stage = StageTag::LanguagePretrain;
  s[0].context_length = base;
  s[0].rope_base = rope;
  s[0].token_budget = 1000000;
  s[0].mixture = {{SourceTag::Language, 1.0}};
  s[0].train_vision = false;

  s[1].stage = StageTag::MultimodalPretrain;
  s[1].context_length = base;
  s[1].rope_base = rope;
  s[1].token_budget = 500000;
  s[1].mixture = {{SourceTag::WebInterleaved, 0.3}, {SourceTag::Caption, 0.4}, {SourceTag::Language, 0.3}};

  s[2].stage = StageTag::LongContext;
  s[2].context_length = 4 * base;
  s[2].rope_base = kLongContextRopeBase;
  s[2].token_budget = 200000;
  s[2].mixture = {{SourceTag::Caption, 0.5}, {SourceTag::VideoQA, 0.2}, {SourceTag::Language, 0.3}};
  s[2].lr.peak = 1e-3;

  s[3].stage = StageTag::PostTrain;
  s[3].context_length = 4 * base;
  s[3].rope_base = kLongContextRopeBase;
  s[3].token_budget = 100000;
  s[3].mixture = {{SourceTag::DocumentQA, 0.4}, {SourceTag::VideoQA, 0.3}, {SourceTag::Language, 0.3}};
  s[3].lr.peak = 1e-3;
  s[3].lr.decay = LrSchedule::Decay::Linear;
  s[3].lr.final_fraction = 1e-3;
  for (std::size_t i = 0; i < s.size(); ++i) s[i].seed = i;
  return s;
}

inline double total_loss(double lm, double balance, double z, const StageConfig& stage) {
  if (!std::isfinite(lm) || !std::isfinite(balance) || !std::isfinite(z))
    throw NumericError("total_loss: non-finite component");
  return lm + stage.balance_coef * balance + stage.z_coef * z;
}

// ---------------------------------------------------------------------------

struct Model {
  ModelConfig config;
  Decoder decoder;
  VisionEncoder vision;

  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
    config.validate();
    Rng rng(seed);
    decoder = Decoder(config.decoder, rng);
    vision = VisionEncoder(config.vision, rng);
  }

  ParamSet decoder_parameters() const {
    ParamSet ps;
    decoder.collect(ps);
    return ps;
  }

  ParamSet vision_parameters() const {
    ParamSet ps;
    vision.collect(ps);
    return ps;
  }

  // Decoder first, then vision; this order defines the checkpoint layout.
  ParamSet parameters() const {
    ParamSet ps;
    decoder.collect(ps);
    vision.collect(ps);
    return ps;
  }

  void apply_stage(const StageConfig& stage) {
    decoder.reconfigure(stage.context_length, stage.rope_base);
    config.decoder.context_length = stage.context_length;
    config.decoder.rope_base = stage.rope_base;
  }

  // Visual tokens for every image of a pack, checked against its placeholders.
  std::vector<Tensor> encode_images(const PackedSequence& pack, const Corpus* corpus) const {
    std::vector<Tensor> out;
    if (pack.image_refs.empty()) return out;
    if (!corpus) throw std::invalid_argument("pack references images but no corpus was given");
    for (std::size_t i = 0; i < pack.image_refs.size(); ++i) {
      auto t = vision.encode(corpus->image(pack.image_refs[i]).image);
      if (t.rows() != pack.image_token_counts.at(i))
        throw std::invalid_argument("image '" + pack.image_refs[i] + "' yields " + std::to_string(t.rows()) +
                                    " visual tokens, pack reserves " +
                                    std::to_string(pack.image_token_counts[i]));
      out.push_back(std::move(t));
    }
    return out;
  }

  DecoderOutput forward(const PackedSequence& pack, const Corpus* corpus = nullptr) const {
    return decoder.forward(pack.to_sequence(), encode_images(pack, corpus));
  }
};

// Adam with bias correction and optional decoupled weight decay (default off).
struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;

  static OptimizerState for_params(const ParamSet& ps) {
    OptimizerState s;
    for (const auto& [_, t] : ps.items()) {
      s.m.emplace_back(t.numel(), 0.0);
      s.v.emplace_back(t.numel(), 0.0);
    }
    return s;
  }

  void check_shapes(const ParamSet& ps) const {
    if (m.size() != ps.size() || v.size() != ps.size())
      throw std::invalid_argument("optimizer state has " + std::to_string(m.size()) + " slots for " +
                                  std::to_string(ps.size()) + " parameters");
    for (std::size_t i = 0; i < ps.size(); ++i)
      if (m[i].size() != ps.items()[i].second.numel() || v[i].size() != m[i].size())
        throw std::invalid_argument("optimizer state shape mismatch at " + ps.items()[i].first);
  }

  // Updates every trainable parameter that received a gradient.
  void apply(ParamSet& ps, double lr) {
    check_shapes(ps);
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto t = ps.items()[i].second;
      if (!t.requires_grad() || !t.has_grad()) continue;
      auto g = t.grad();
      auto w = t.mutable_data();
      auto& mi = m[i];
      auto& vi = v[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        mi[j] = beta1 * mi[j] + (1.0 - beta1) * g[j];
        vi[j] = beta2 * vi[j] + (1.0 - beta2) * g[j] * g[j];
        const double upd = (mi[j] / c1) / (std::sqrt(vi[j] / c2) + eps);
        w[j] -= lr * (upd + weight_decay * w[j]);
      }
    }
  }
};

// Global gradient norm clipping; returns the norm before clipping.
inline double clip_grad_norm(ParamSet& ps, double max_norm) {
  double sq = 0;
  for (const auto& [_, t] : ps.items())
    if (t.has_grad())
      for (double g : t.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& [_, t] : ps.items())
      if (t.has_grad())
        for (double& g : t.node()->grad) g *= f;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Stage data.

class MissingDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataOptions {
  double cut_threshold = kDefaultCutThreshold;
  double min_interleaved_score = 0.3;
  std::size_t threads = 1;
};

struct StageData {
  std::map<SourceTag, std::vector<PackedSequence>> packs;
  std::size_t total_tokens() const {
    std::size_t n = 0;
    for (const auto& [_, v] : packs)
      for (const auto& p : v) n += p.total_length();
    return n;
  }
};

inline std::vector<Document> documents_with_tag(const Corpus& corpus, SourceTag tag) {
  std::vector<Document> out;
  for (const auto& d : corpus.documents)
    if (d.source_tag == tag) out.push_back(d);
  return out;
}

inline StageData build_stage_data(const Corpus& corpus, const StageConfig& stage, const ModelConfig& model,
                                  const DataOptions& opt = {}) {
  StageData data;
  const auto& vcfg = model.vision;
  ImageTokenCount image_tokens = [&](const std::string& ref) {
    const auto& img = corpus.image(ref).image;
    return visual_token_count(img.height, img.width, vcfg);
  };
  BagOfWordsOracle oracle;
  for (const auto& [tag, weight] : stage.mixture) {
    if (weight <= 0) continue;
    auto docs = documents_with_tag(corpus, tag);
    if (docs.empty())
      throw MissingDataError(std::string("stage ") + to_string(stage.stage) + " needs source tag '" +
                             to_string(tag) + "' but the corpus has none");
    auto& out = data.packs[tag];
    if (tag == SourceTag::Language) {
      std::vector<std::string> texts;
      for (const auto& d : docs) texts.push_back(d.text());
      out = pack_sequences(docs, mst_cluster(texts, oracle, opt.cut_threshold), stage.context_length);
      continue;
    }
    if (tag == SourceTag::WebInterleaved) {
      std::vector<Document> kept;
      for (const auto& r : filter_corpus(corpus, oracle, opt.min_interleaved_score, opt.threads))
        if (r.keep) kept.push_back(reposition_images(r.document, corpus, oracle));
      if (kept.empty())
        throw MissingDataError("every web-interleaved document was rejected by the quality filter");
      docs = std::move(kept);
    }
    if (tag == SourceTag::Caption && stage.stage == StageTag::LongContext) {
      std::vector<LongPair> pairs;
      for (const auto& d : docs) {
        std::string ref, caption;
        for (const auto& s : d.segments) (s.is_image() ? ref : caption) = s.value;
        if (!ref.empty()) pairs.push_back({ref, image_tokens(ref), caption});
      }
      for (std::size_t i = 0; i < pairs.size();) {
        std::vector<LongPair> rest(pairs.begin() + static_cast<std::ptrdiff_t>(i), pairs.end());
        auto seq = build_long_synthetic(rest, stage.context_length);
        i += seq.image_refs.size();
        seq.truncated_tokens = 0;
        out.push_back(std::move(seq));
      }
      continue;
    }
    ClusterAssignment one{std::vector<std::size_t>(docs.size(), 0), 1};
    out = pack_sequences(docs, one, stage.context_length, image_tokens);
  }
  return data;
}

// ---------------------------------------------------------------------------
// Checkpoints.

inline constexpr std::uint64_t kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  std::optional<OptimizerState> optimizer;
  std::string stage;
  std::uint64_t step = 0;
};

inline void save_checkpoint(const std::string& path, const Model& model, const OptimizerState* opt,
                            const std::string& stage, std::uint64_t step) {
  const auto ps = model.parameters();
  if (opt) opt->check_shapes(ps);
  std::string payload;
  payload.reserve(ps.total_numel() * 8 * (opt ? 3 : 1));
  for (const auto& [_, t] : ps.items())
    for (double x : t.data()) bin::append_f64(payload, x);
  if (opt) {
    for (const auto& mi : opt->m)
      for (double x : mi) bin::append_f64(payload, x);
    for (const auto& vi : opt->v)
      for (double x : vi) bin::append_f64(payload, x);
  }
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, t] : ps.items()) params.push_back({{"name", name}, {"shape", t.shape()}});
  nlohmann::json header = {{"format_version", kCheckpointVersion},
                           {"config", to_json(model.config)},
                           {"stage", stage},
                           {"step", step},
                           {"architecture_hash", architecture_hash(model.config)},
                           {"parameters", params},
                           {"has_optimizer", opt != nullptr},
                           {"optimizer_step", opt ? opt->step : 0},
                           {"payload_bytes", payload.size()},
                           {"payload_fnv1a64", fnv1a64(payload)}};
  const std::string h = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  os.write("MMOECKPT", 8);
  bin::put_u64(os, h.size());
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path);
}

// Reads and verifies the whole file before building anything. With
// `expected`, a different architecture is refused.
inline Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
  const std::string bytes = read_file_bytes(path);
  if (bytes.size() < 16 || bytes.compare(0, 8, "MMOECKPT") != 0) throw FormatError("not a checkpoint: " + path);
  const std::uint64_t hsize = bin::load_u64(bytes.data() + 8);
  if (hsize > bytes.size() - 16) throw FormatError("truncated checkpoint header: " + path);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(16, hsize));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
  }
  const auto version = h.value("format_version", std::uint64_t{0});
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint format_version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const ModelConfig cfg = model_config_from_json(h.at("config"));
  const std::uint64_t hash = h.at("architecture_hash");
  if (hash != architecture_hash(cfg)) throw FormatError("checkpoint header hash does not match its config");
  if (expected && architecture_hash(*expected) != hash)
    throw ConfigError("checkpoint architecture differs from the requested model configuration");
  const std::uint64_t payload_bytes = h.at("payload_bytes");
  const std::size_t start = 16 + hsize;
  if (bytes.size() - start != payload_bytes)
    throw FormatError("checkpoint payload is " + std::to_string(bytes.size() - start) + " bytes, header says " +
                      std::to_string(payload_bytes) + " (truncated or padded file)");
  const std::string_view payload(bytes.data() + start, payload_bytes);
  if (fnv1a64(payload) != h.at("payload_fnv1a64").get<std::uint64_t>())
    throw FormatError("checkpoint payload checksum mismatch");

  Checkpoint ck;
  ck.model = Model(cfg, 0);
  ck.stage = h.at("stage");
  ck.step = h.at("step");
  auto ps = ck.model.parameters();
  const auto& listed = h.at("parameters");
  if (listed.size() != ps.size()) throw FormatError("checkpoint parameter list does not match the model");
  const bool has_opt = h.at("has_optimizer");
  if (payload_bytes != ps.total_numel() * 8 * (has_opt ? 3 : 1))
    throw FormatError("checkpoint payload size does not match the model");
  const char* p = payload.data();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto t = ps.items()[i].second;
    if (listed[i].at("name") != ps.items()[i].first || listed[i].at("shape").get<Shape>() != t.shape())
      throw FormatError("checkpoint parameter " + std::to_string(i) + " does not match the model layout");
    for (double& x : t.mutable_data()) {
      x = bin::load_f64(p);
      p += 8;
    }
  }
  if (has_opt) {
    auto opt = OptimizerState::for_params(ps);
    opt.step = h.at("optimizer_step");
    for (auto& mi : opt.m)
      for (double& x : mi) x = bin::load_f64(p), p += 8;
    for (auto& vi : opt.v)
      for (double& x : vi) x = bin::load_f64(p), p += 8;
    ck.optimizer = std::move(opt);
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Training loop.

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepRecord {
  std::size_t step = 0;
  std::uint64_t tokens = 0;
  double lr = 0, lm = 0, balance = 0, z = 0, total = 0, grad_norm = 0;
};

struct StageReport {
  StageTag stage = StageTag::LanguagePretrain;
  std::size_t steps = 0;
  std::uint64_t tokens = 0;
  std::size_t context_length = 0;
  double rope_base = 0;
  bool vision_trainable = false;
  std::vector<StepRecord> curve;
  // [layer][expert] -> top-k assignments over the stage, split by modality.
  std::vector<std::vector<std::uint64_t>> text_assignments, visual_assignments;
  std::string checkpoint_path;
  std::string trace_path;

  double initial_loss() const { return curve.empty() ? 0.0 : curve.front().lm; }
  double final_loss() const { return curve.empty() ? 0.0 : curve.back().lm; }
};

inline nlohmann::json to_json(const StageReport& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& s : r.curve)
    curve.push_back({{"step", s.step}, {"tokens", s.tokens}, {"lr", s.lr}, {"lm", s.lm}, {"balance", s.balance},
                     {"z", s.z}, {"total", s.total}, {"grad_norm", s.grad_norm}});
  return {{"stage", to_string(r.stage)},
          {"steps", r.steps},
          {"tokens", r.tokens},
          {"context_length", r.context_length},
          {"rope_base", r.rope_base},
          {"vision_trainable", r.vision_trainable},
          {"initial_loss", r.initial_loss()},
          {"final_loss", r.final_loss()},
          {"curve", curve},
          {"routing", {{"text_assignments", r.text_assignments}, {"visual_assignments", r.visual_assignments}}},
          {"checkpoint", r.checkpoint_path},
          {"trace", r.trace_path}};
}

struct TrainOptions {
  std::string checkpoint_path;  // empty: no checkpoint
  std::string trace_path;       // empty: no routing trace
  std::size_t trace_every = 1;
  const Corpus* corpus = nullptr;  // image source for packs with visual tokens
  std::function<void(const StepRecord&)> on_step;
};

// Per-step loss pieces, left on the tape for backward.
struct StepLoss {
  Tensor total, lm, balance, z;
  DecoderOutput output;
};

inline StepLoss compute_loss(const Model& model, const PackedSequence& pack, const StageConfig& stage,
                             const Corpus* corpus) {
  StepLoss s;
  s.output = model.forward(pack, corpus);
  s.lm = lm_loss(s.output.logits, pack.to_sequence());
  const auto& mc = model.config.decoder.moe;
  const double inv_layers = 1.0 / static_cast<double>(s.output.moe.size());
  Tensor bal, zl;
  for (const auto& m : s.output.moe) {
    auto b = balance_loss_tensor(m.router_probs, m.record, mc);
    auto z = z_loss_tensor(m.router_logits);
    bal = bal.defined() ? add(bal, b) : b;
    zl = zl.defined() ? add(zl, z) : z;
  }
  s.balance = scale(bal, inv_layers);
  s.z = scale(zl, inv_layers);
  s.total = add(add(s.lm, scale(s.balance, stage.balance_coef)), scale(s.z, stage.z_coef));
  return s;
}

inline StageReport train_stage(Model& model, OptimizerState& opt, const StageConfig& stage, const StageData& data,
                               const TrainOptions& options = {}) {
  stage.validate();
  model.apply_stage(stage);
  auto all = model.parameters();
  opt.check_shapes(all);
  model.decoder_parameters().set_trainable(true);
  model.vision_parameters().set_trainable(stage.train_vision);

  StageReport report;
  report.stage = stage.stage;
  report.context_length = stage.context_length;
  report.rope_base = stage.rope_base;
  report.vision_trainable = stage.train_vision;
  const auto& mc = model.config.decoder.moe;
  report.text_assignments.assign(model.config.decoder.n_layers, std::vector<std::uint64_t>(mc.n_routed, 0));
  report.visual_assignments = report.text_assignments;

  std::vector<SourceTag> tags;
  std::vector<double> weights;
  for (const auto& [tag, w] : stage.mixture)
    if (w > 0 && stage.token_budget > 0) {
      auto it = data.packs.find(tag);
      if (it == data.packs.end() || it->second.empty())
        throw MissingDataError(std::string("no packed data for source tag '") + to_string(tag) + "'");
      tags.push_back(tag);
      weights.push_back(w);
    }
  double weight_sum = 0;
  for (double w : weights) weight_sum += w;

  std::optional<TraceWriter> trace;
  if (!options.trace_path.empty()) {
    trace.emplace(options.trace_path, mc.n_routed, mc.top_k);
    report.trace_path = options.trace_path;
  }

  Rng rng(stage.seed);
  std::vector<std::vector<double>> last_good;
  auto snapshot = [&]() {
    last_good.clear();
    for (const auto& [_, t] : all.items()) last_good.emplace_back(t.data().begin(), t.data().end());
  };
  auto restore = [&]() {
    for (std::size_t i = 0; i < all.size(); ++i) {
      auto t = all.items()[i].second;
      std::copy(last_good[i].begin(), last_good[i].end(), t.mutable_data().begin());
    }
  };

  while (report.tokens < stage.token_budget && (stage.max_steps == 0 || report.steps < stage.max_steps)) {
    double pick = rng.uniform() * weight_sum;
    std::size_t ti = 0;
    while (ti + 1 < tags.size() && pick >= weights[ti]) pick -= weights[ti++];
    const auto& pool = data.packs.at(tags[ti]);
    const auto& pack = pool[rng.below(pool.size())];

    snapshot();
    StepRecord rec;
    rec.step = report.steps;
    try {
      GradTape tape;
      all.zero_grad();
      auto loss = compute_loss(model, pack, stage, options.corpus);
      rec.lm = loss.lm.item();
      rec.balance = loss.balance.item();
      rec.z = loss.z.item();
      rec.total = total_loss(rec.lm, rec.balance, rec.z, stage);
      tape.backward(loss.total);
      rec.grad_norm = clip_grad_norm(all, stage.grad_clip);
      rec.lr = stage.lr.at(report.steps, static_cast<double>(report.tokens) /
                                             static_cast<double>(std::max<std::uint64_t>(1, stage.token_budget)));
      opt.apply(all, rec.lr);
      for (const auto& [_, t] : all.items()) t.check_finite("optimizer update");
      for (const auto& m : loss.output.moe) {
        for (const auto& tok : m.record.tokens)
          for (auto e : tok.selected)
            (tok.modality == Modality::Visual ? report.visual_assignments : report.text_assignments)[m.record.layer_index][e]++;
        if (trace && report.steps % std::max<std::size_t>(1, options.trace_every) == 0) trace->write(m.record);
      }
    } catch (const NumericError& e) {
      restore();
      all.zero_grad();
      if (!options.checkpoint_path.empty())
        save_checkpoint(options.checkpoint_path, model, &opt, to_string(stage.stage), report.steps);
      throw DivergenceError(std::string("training diverged at step ") + std::to_string(report.steps) + " (" +
                            e.what() + "); parameters restored to the last good step");
    }
    all.zero_grad();
    report.tokens += pack.total_length();
    rec.tokens = report.tokens;
    ++report.steps;
    report.curve.push_back(rec);
    if (options.on_step) options.on_step(rec);
  }
  if (trace) trace->flush();
  if (!options.checkpoint_path.empty()) {
    save_checkpoint(options.checkpoint_path, model, &opt, to_string(stage.stage), report.steps);
    report.checkpoint_path = options.checkpoint_path;
  }
  return report;
}

}  // namespace mmoe
