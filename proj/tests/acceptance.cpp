// Acceptance runner: one PASS/FAIL line per criterion, exit 1 on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <numeric>
#include <set>

#include "grad_cases.hpp"

using namespace mmoe;
using namespace mmoe::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::printf("[%s] %2d %-28s %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// ---------------------------------------------------------------- 1

void parameter_counts() {
  const auto t0 = Clock::now();
  const auto run = run_parameter_report();
  const double dt = seconds_since(t0);
  std::cout << to_text(run);
  const auto& p = run.paper;
  const bool total_ok = std::abs(static_cast<double>(p.total) - 24.9e9) <= 0.05 * 24.9e9;
  const bool text_ok = std::abs(static_cast<double>(p.activated_text) - 3.5e9) <= 0.05 * 3.5e9;
  const bool vision_ok = p.activated_visual - p.activated_text == p.item("vision");
  report(1, "parameter counts",
         total_ok && text_ok && vision_ok && !p.assumptions.empty() && run.all_pass() && dt < 1.0,
         fmt("total %.4g (24.9e9 +-5%%), activated/text %.4g (3.5e9 +-5%%), %.3fs < 1s", static_cast<double>(p.total),
             static_cast<double>(p.activated_text), dt) +
             ", visual minus text equals vision total " + (vision_ok ? "yes" : "NO"));
}

// ---------------------------------------------------------------- 2

void gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_name;
  std::size_t runs = 0;
  for (const auto& c : all_grad_cases())
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const double e = c.run(seed).rel_error;
      ++runs;
      if (!(e <= worst)) {
        worst = e;
        worst_name = c.name;
      }
    }
  const double dt = seconds_since(t0);
  report(2, "gradient suite", worst < 1e-4 && dt < 120,
         fmt("%.0f cases x 10 seeds, max rel error %.2e < 1e-4", static_cast<double>(runs / 10), worst) + " (" +
             worst_name + ")" + fmt(", %.1fs < 120s", dt));
}

// ---------------------------------------------------------------- 3

Tensor dense_oracle(const MoELayer& layer, const Tensor& x, const RoutingRecord& rec) {
  const std::size_t t = x.rows(), d = x.cols();
  std::vector<double> out(t * d, 0.0);
  for (const auto& ex : layer.shared()) {
    auto y = ex(x);
    for (std::size_t i = 0; i < y.numel(); ++i) out[i] += y[i];
  }
  for (std::size_t e = 0; e < layer.routed().size(); ++e) {
    auto y = layer.routed()[e](x);
    for (std::size_t r = 0; r < t; ++r) {
      double w = 0;
      const auto& tok = rec.tokens[r];
      for (std::size_t s = 0; s < tok.selected.size(); ++s)
        if (tok.selected[s] == e) w = tok.weights[s];
      for (std::size_t j = 0; j < d; ++j) out[r * d + j] += w * y.at(r, j);
    }
  }
  return Tensor::from({t, d}, out);
}

void routing_invariants() {
  MoEConfig cfg;
  Rng rng(1);
  const auto rec = route(random_tensor(rng, {10000, cfg.n_routed}, 2.0), cfg);
  bool six = true;
  double worst_sum = 0;
  for (const auto& tok : rec.tokens) {
    six = six && tok.selected.size() == 6 && std::set<std::size_t>(tok.selected.begin(), tok.selected.end()).size() == 6;
    double ws = 0;
    for (double w : tok.weights) ws += w;
    worst_sum = std::max(worst_sum, std::abs(ws - 1.0));
  }
  const bool shared = cfg.n_shared == 2;

  const auto a = route(Tensor::full({2, 64}, 0.25), cfg), b = route(Tensor::full({2, 64}, 0.25), cfg);
  const std::vector<std::size_t> low = {0, 1, 2, 3, 4, 5};
  const bool ties = a.tokens[0].selected == low && a.tokens[1].selected == low && b.tokens[0].selected == low;

  double worst_dense = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r(seed);
    MoEConfig c;
    c.n_routed = 2 + 2 * r.below(4);
    c.n_shared = r.below(3);
    c.top_k = 1 + r.below(2);
    c.expert_ffn_dim = 5;
    c.group_size = 2;
    if (seed % 3 == 0) c.expert_kind = ExpertKind::Plain;
    const std::size_t d = 3 + r.below(4), t = 1 + r.below(7);
    MoELayer layer(c, d, r);
    auto x = random_tensor(r, {t, d});
    auto out = layer.forward(x);
    auto ref = dense_oracle(layer, x, out.record);
    for (std::size_t i = 0; i < ref.numel(); ++i) worst_dense = std::max(worst_dense, std::abs(out.output[i] - ref[i]));
  }
  report(3, "routing invariants", six && shared && worst_sum <= 1e-9 && ties && worst_dense <= 1e-10,
         std::string("10k tokens: 6 routed distinct ") + (six ? "yes" : "NO") + ", 2 shared " +
             (shared ? "yes" : "NO") + fmt(", |sum w - 1| max %.1e <= 1e-9", worst_sum) + ", ties to lowest " +
             (ties ? "yes" : "NO") + fmt(", dense oracle max diff %.1e <= 1e-10", worst_dense));
}

// ---------------------------------------------------------------- 4

RoutingRecord handmade_record(std::size_t n, std::size_t k, const std::vector<std::vector<std::size_t>>& sel,
                              const std::vector<std::vector<double>>& probs) {
  RoutingRecord rec{0, n, k, {}};
  for (std::size_t i = 0; i < sel.size(); ++i) {
    TokenRoute tr;
    tr.selected = sel[i];
    tr.weights.assign(k, 1.0 / static_cast<double>(k));
    tr.probs = probs[i];
    rec.tokens.push_back(tr);
  }
  return rec;
}

void auxiliary_losses() {
  MoEConfig full;
  std::vector<std::vector<std::size_t>> spread;
  std::vector<std::vector<double>> flat;
  for (std::size_t t = 0; t < 64; ++t) {
    std::vector<std::size_t> s;
    for (std::size_t j = 0; j < 6; ++j) s.push_back((t * 6 + j) % 64);
    spread.push_back(s);
    flat.emplace_back(64, 1.0 / 64);
  }
  const double uniform = load_balance_loss(handmade_record(64, 6, spread, flat), full).balance_loss;

  std::vector<double> group0(64, 0.0);
  for (std::size_t e = 0; e < 8; ++e) group0[e] = 1.0 / 8;
  const double collapsed =
      load_balance_loss(handmade_record(64, 6, {{0, 1, 2, 3, 4, 5}, {2, 3, 4, 5, 6, 7}}, {group0, group0}), full)
          .balance_loss;

  const double z = z_loss(Tensor::zeros({4, 64}));
  const double ln64sq = std::log(64.0) * std::log(64.0);

  std::vector<double> a(8, 0.0), b(8, 0.0);
  a[0] = a[1] = 0.5;
  b[4] = b[5] = 0.5;
  const auto rec = handmade_record(8, 2, {{0, 1}, {4, 5}, {0, 1}, {4, 5}}, {a, b, a, b});
  MoEConfig grouped, per_expert;
  grouped.n_routed = per_expert.n_routed = 8;
  grouped.top_k = per_expert.top_k = 2;
  grouped.group_size = 4;
  per_expert.group_size = 1;
  const double g = load_balance_loss(rec, grouped).balance_loss, e = load_balance_loss(rec, per_expert).balance_loss;

  const bool pass = std::abs(uniform - 1.0) <= 1e-6 && std::abs(collapsed - 8.0) <= 1e-6 &&
                    std::abs(z - ln64sq) <= 1e-6 && std::abs(g - 1.0) <= 1e-6 && e > 1.0;
  report(4, "auxiliary losses", pass,
         fmt("uniform %.9f (1 +-1e-6), collapse %.9f (G=8 +-1e-6), z %.9f ((ln 64)^2 +-1e-6)", uniform, collapsed, z) +
             fmt(", grouped %.6f == 1 vs per-expert %.6f > 1", g, e));
}

// ---------------------------------------------------------------- 5

void vision_token_law() {
  const auto v = paper_preset().vision;
  Rng rng(4);
  std::size_t bad = 0, counts[3] = {0, 0, 0}, roundtrip_bad = 0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t h = 1 + rng.below(3000), w = 1 + rng.below(3000);
    const auto d = tier_image(h, w);
    const auto n = visual_token_count(h, w, v);
    std::size_t want = 256u * ((h + 979) / 980) * ((w + 979) / 980);
    if (d.tier == Tier::Medium) want = 128;
    if (d.tier == Tier::High) want = 256;
    bad += n != want;
    ++counts[static_cast<int>(d.tier)];

    const std::size_t ph = 14 * (1 + rng.below(8)), pw = 14 * (1 + rng.below(8));
    ImageInput img = ImageInput::blank(ph, pw);
    for (auto& p : img.pixels) p = rng.uniform();
    roundtrip_bad += !(unpatchify(patchify(img, 14)) == img);
  }
  report(5, "vision token-count law", bad == 0 && roundtrip_bad == 0,
         fmt("50 sizes (medium %.0f, high %.0f, ultra %.0f): %.0f mismatches", static_cast<double>(counts[0]),
             static_cast<double>(counts[1]), static_cast<double>(counts[2]), static_cast<double>(bad)) +
             fmt(", patchify round-trip failures %.0f", static_cast<double>(roundtrip_bad)));
}

// ---------------------------------------------------------------- 6

class TableOracle : public SimilarityOracle {
 public:
  void set(const std::string& a, const std::string& b, double s) {
    table_[{a, b}] = s;
    table_[{b, a}] = s;
  }
  double score(std::string_view a, std::string_view b) const override {
    if (a == b) return 1.0;
    auto it = table_.find({std::string(a), std::string(b)});
    return it == table_.end() ? 0.0 : it->second;
  }

 private:
  std::map<std::pair<std::string, std::string>, double> table_;
};

// Lightest labeled tree by Prufer enumeration.
std::vector<WeightedEdge> brute_force_mst(std::size_t n, const std::vector<std::vector<double>>& w) {
  if (n == 1) return {};
  std::vector<std::size_t> seq(n - 2, 0);
  std::vector<WeightedEdge> best;
  double best_w = 1e300;
  while (true) {
    std::vector<std::size_t> degree(n, 1);
    for (auto s : seq) ++degree[s];
    std::vector<WeightedEdge> tree;
    double total = 0;
    for (auto s : seq) {
      std::size_t leaf = 0;
      while (degree[leaf] != 1) ++leaf;
      tree.push_back({std::min(leaf, s), std::max(leaf, s), w[leaf][s]});
      total += w[leaf][s];
      --degree[leaf];
      --degree[s];
    }
    std::size_t u = n, v = n;
    for (std::size_t i = 0; i < n; ++i)
      if (degree[i] == 1) (u == n ? u : v) = i;
    tree.push_back({u, v, w[u][v]});
    total += w[u][v];
    if (total < best_w) {
      best_w = total;
      best = tree;
    }
    std::size_t k = 0;
    while (k < seq.size() && ++seq[k] == n) seq[k++] = 0;
    if (k == seq.size()) break;
  }
  return best;
}

std::vector<std::size_t> cut_components(std::size_t n, const std::vector<WeightedEdge>& tree, double threshold) {
  std::vector<std::size_t> label(n);
  std::iota(label.begin(), label.end(), std::size_t{0});
  for (bool changed = true; changed;) {
    changed = false;
    for (const auto& e : tree) {
      if (e.weight > 1.0 - threshold) continue;
      const auto m = std::min(label[e.i], label[e.j]);
      if (label[e.i] != m || label[e.j] != m) {
        const auto li = label[e.i], lj = label[e.j];
        for (auto& l : label)
          if (l == li || l == lj) l = m;
        changed = true;
      }
    }
  }
  return label;
}

bool same_partition(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j)
      if ((a[i] == a[j]) != (b[i] == b[j])) return false;
  return true;
}

void data_pipeline() {
  std::size_t mst_bad = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t n = 1 + rng.below(8);
    std::vector<std::string> items;
    for (std::size_t i = 0; i < n; ++i) items.push_back("item" + std::to_string(i));
    TableOracle o;
    std::vector<std::vector<double>> w(n, std::vector<double>(n, 0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double s = rng.uniform(-1, 1);
        o.set(items[i], items[j], s);
        w[i][j] = w[j][i] = 1.0 - s;
      }
    const auto brute = brute_force_mst(n, w);
    double tw = 0, bw = 0;
    for (const auto& e : minimum_spanning_tree(n, similarity_edges(items, o))) tw += e.weight;
    for (const auto& e : brute) bw += e.weight;
    const double threshold = rng.uniform(-1, 1);
    mst_bad += std::abs(tw - bw) > 1e-12 ||
               !same_partition(mst_cluster(items, o, threshold).labels, cut_components(n, brute, threshold));
  }

  CorpusSpec spec;
  spec.seed = 7;
  const auto corpus = generate_toy_corpus(spec);
  const auto docs = documents_with_tag(corpus, SourceTag::Language);
  std::vector<std::string> texts;
  for (const auto& d : docs) texts.push_back(d.text());
  BagOfWordsOracle bow;
  const auto clusters = mst_cluster(texts, bow, kDefaultCutThreshold);
  std::map<std::uint64_t, std::size_t> cluster_of;
  std::size_t corpus_tokens = 0;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    cluster_of[docs[i].doc_id] = clusters.labels[i];
    corpus_tokens += tokenize_document(docs[i]).size() + 1;
  }
  std::size_t pure = 0, packed = 0, truncated = 0, total = 0;
  for (std::size_t ctx : {64u, 128u, 256u}) {
    const auto packs = pack_sequences(docs, clusters, ctx);
    for (const auto& p : packs) {
      std::set<std::size_t> cs;
      for (auto id : p.member_doc_ids) cs.insert(cluster_of.at(id));
      pure += cs.size() == 1 && p.total_length() <= ctx;
      packed += p.total_length();
      truncated += p.truncated_tokens;
    }
    total += packs.size();
  }
  const bool conserved = packed + truncated == 3 * corpus_tokens;

  std::size_t idem_bad = 0;
  const auto once = filter_corpus(corpus, bow, 0.3, 1);
  Corpus kept = corpus;
  kept.documents.clear();
  for (const auto& r : once)
    if (r.keep) kept.documents.push_back(reposition_images(r.document, corpus, bow));
  for (const auto& r : filter_corpus(kept, bow, 0.3, 1)) {
    idem_bad += !r.keep;
    idem_bad += !(reposition_images(r.document, kept, bow) == r.document);
  }
  for (const auto& d : kept.documents) idem_bad += !(filter_interleaved(d, kept, bow, 0.3).document == d);

  report(6, "data pipeline", mst_bad == 0 && pure == total && conserved && idem_bad == 0 && !kept.documents.empty(),
         fmt("MST+cut vs brute force: %.0f/100 mismatches; purity %.0f/%.0f packs", static_cast<double>(mst_bad),
             static_cast<double>(pure), static_cast<double>(total)) +
             ", tokens conserved " + (conserved ? "yes" : "NO") +
             fmt("; filter/reposition idempotence failures %.0f over %.0f docs", static_cast<double>(idem_bad),
                 static_cast<double>(kept.documents.size())));
}

// ---------------------------------------------------------------- 7

ModelConfig copy_model_config() {
  ModelConfig c;
  c.decoder.hidden_dim = 64;
  c.decoder.n_layers = 2;
  c.decoder.n_heads = 4;
  c.decoder.head_dim = 16;
  c.decoder.vocab_size = ByteTokenizer::kVocabSize;
  c.decoder.context_length = 128;
  c.decoder.rope_base = 1e5;
  c.decoder.moe.n_routed = 8;
  c.decoder.moe.n_shared = 1;
  c.decoder.moe.top_k = 2;
  c.decoder.moe.group_size = 4;
  c.decoder.moe.expert_ffn_dim = 64;
  c.vision = micro_vision_config(64);
  return c;
}

StageConfig copy_stage() {
  StageConfig s;
  s.stage = StageTag::LanguagePretrain;
  s.context_length = 128;
  s.rope_base = 1e5;
  s.token_budget = 1ull << 40;
  s.max_steps = 300;
  s.mixture = {{SourceTag::Language, 1.0}};
  s.train_vision = false;
  s.lr.peak = 3e-3;
  s.lr.warmup_steps = 20;
  s.seed = 1;
  return s;
}

void toy_training() {
  const auto t0 = Clock::now();
  const auto cfg = copy_model_config();
  const auto stage = copy_stage();
  const auto corpus = generate_copy_corpus(1, 400);
  DataOptions dopt;
  dopt.cut_threshold = -1.0;
  const auto data = build_stage_data(corpus, stage, cfg, dopt);
  auto run = [&] {
    Model m(cfg, 1);
    auto opt = OptimizerState::for_params(m.parameters());
    return train_stage(m, opt, stage, data);
  };
  const auto a = run();
  const double one_run = seconds_since(t0);
  const auto b = run();
  const double dt = seconds_since(t0);
  bool same = a.curve.size() == b.curve.size();
  for (std::size_t i = 0; same && i < a.curve.size(); ++i) same = a.curve[i].lm == b.curve[i].lm;
  const double ratio = a.final_loss() / a.initial_loss();
  report(7, "toy copy-task training", a.steps == 300 && ratio < 0.5 && same && one_run < 300,
         fmt("lm loss %.4f -> %.4f (ratio %.3f < 0.5) in 300 steps, %.1fs/run < 300s", a.initial_loss(),
             a.final_loss(), ratio, one_run) +
             ", repeat run bitwise equal " + (same ? "yes" : "NO") + fmt(" (%.1fs total)", dt));
}

// ---------------------------------------------------------------- 8

void specialization_pipeline() {
  MoEConfig cfg;
  const std::size_t layers = 2, tokens = 10000;
  ActivationCounter counter(layers, cfg.n_routed, "natural-image");
  Rng rng(8);
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<Modality> mods(tokens);
    auto logits = random_tensor(rng, {tokens, cfg.n_routed});
    auto d = logits.mutable_data();
    for (std::size_t t = 0; t < tokens; ++t) {
      mods[t] = t % 2 ? Modality::Visual : Modality::Text;
      if (mods[t] == Modality::Text) d[t * cfg.n_routed] = -1e3;
    }
    counter.record(route(logits, cfg, mods, l));
  }
  const auto m = compute_specialization(counter);
  bool capped = true;
  double worst = 0, worst_sum = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    double sv = 0, st = 0;
    for (std::size_t e = 0; e < cfg.n_routed; ++e) {
      const auto& c = m.at("natural-image", l, e);
      sv += c.r_v;
      st += c.r_t;
      if (e == 0) capped = capped && c.specialization == kDefaultSpecializationCap;
      else worst = std::max(worst, std::abs(c.specialization - 1.0));
    }
    worst_sum = std::max({worst_sum, std::abs(sv - 1.0), std::abs(st - 1.0)});
  }
  const auto back = parse_specialization_csv(specialization_csv(m));
  const bool parse_ok = back.cells == m.cells;
  report(8, "specialization pipeline", capped && worst <= 0.2 && worst_sum <= 1e-9 && parse_ok,
         std::string("expert 0 at cap 50 ") + (capped ? "yes" : "NO") +
             fmt(", unbiased experts max |s - 1| %.3f <= 0.2, rate sums off by %.1e <= 1e-9", worst, worst_sum) +
             ", CSV parse-back equal " + (parse_ok ? "yes" : "NO"));
}

// ---------------------------------------------------------------- 9

void niah_harness() {
  RetrievalOracle oracle;
  const auto a = run_niah(oracle, default_niah_lengths(), default_niah_depths(), 2, 17);
  const auto b = run_niah(oracle, default_niah_lengths(), default_niah_depths(), 2, 17);
  bool all_one = true;
  for (const auto& c : a.cells) all_one = all_one && c.accuracy() == 1.0;
  const bool same = to_json(a).dump() == to_json(b).dump() && eval_grid_csv(a) == eval_grid_csv(b);
  report(9, "NIAH harness validity", all_one && same && a.overall_accuracy() == 1.0,
         fmt("oracle accuracy %.4f on %.0f cells (lengths 512..4096 x depths 0..1)", a.overall_accuracy(),
             static_cast<double>(a.cells.size())) +
             ", report deterministic " + (same ? "yes" : "NO"));
}

// ---------------------------------------------------------------- 10

void long_context_reconfiguration() {
  auto cfg = tiny_model_config();
  cfg.decoder.context_length = 64;
  cfg.decoder.rope_base = 1e5;
  const auto stages = default_stages(cfg);
  const auto& s2 = stages.at(static_cast<std::size_t>(StageTag::MultimodalPretrain));
  const auto& s3 = stages.at(static_cast<std::size_t>(StageTag::LongContext));
  Model m(cfg, 3);
  m.apply_stage(s2);
  const auto path = (scratch_dir("acceptance_long") / "stage2.ckpt").string();
  save_checkpoint(path, m, nullptr, to_string(s2.stage), 0);
  auto ck = load_checkpoint(path, &cfg);
  const double base_before = ck.model.config.decoder.rope_base;
  const auto ctx_before = ck.model.config.decoder.context_length;
  ck.model.apply_stage(s3);
  const double base = ck.model.config.decoder.rope_base;
  const auto ctx = ck.model.config.decoder.context_length;

  Rng rng(10);
  auto q = random_tensor(rng, {1, 16}), k = random_tensor(rng, {1, 16});
  auto score = [&](std::int64_t pa, std::int64_t pb) {
    const std::vector<std::int64_t> a = {pa}, b = {pb};
    const auto x = rope_apply(q, a, base), y = rope_apply(k, b, base);
    double s = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) s += x[i] * y[i];
    return s;
  };
  double worst = 0;
  for (int i = 0; i < 200; ++i) {
    const auto p1 = static_cast<std::int64_t>(rng.below(ctx)), p2 = static_cast<std::int64_t>(rng.below(ctx));
    const auto shift = static_cast<std::int64_t>(rng.below(ctx));
    worst = std::max(worst, std::abs(score(p1, p2) - score(p1 + shift, p2 + shift)));
  }
  report(10, "long-context reconfiguration", base_before == 1e5 && base == 5e6 && ctx > ctx_before && worst <= 1e-9,
         fmt("rope_base %.0e -> %.0e, context %.0f -> %.0f", base_before, base, static_cast<double>(ctx_before),
             static_cast<double>(ctx)) +
             fmt(", RoPE shift invariance max diff %.1e <= 1e-9", worst));
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  const std::vector<void (*)()> criteria = {parameter_counts, gradient_suite,     routing_invariants,
                                            auxiliary_losses, vision_token_law,   data_pipeline,
                                            toy_training,     specialization_pipeline, niah_harness,
                                            long_context_reconfiguration};
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    try {
      criteria[i]();
    } catch (const std::exception& e) {
      report(static_cast<int>(i + 1), "exception", false, e.what());
    }
  }
  std::printf("%d of %zu criteria failed, %.1fs\n", failures, criteria.size(), seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
