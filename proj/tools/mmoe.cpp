// mmoe: corpus generation, packing, staged training, routing analysis and
// evaluation from one executable.
//
// Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mmoe/mmoe.hpp"

namespace fs = std::filesystem;
using namespace mmoe;

namespace {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };
Level g_level = Level::Info;

void log(Level lv, const std::string& msg) {
  static const char* names[] = {"error", "warn", "info", "debug"};
  if (lv <= g_level) std::cerr << "[" << names[static_cast<int>(lv)] << "] " << msg << "\n";
}

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::uint64_t seed = 0;
  std::string out;
  std::size_t threads = 1;
  std::string log_level = "info";
};

fs::path require_out(const Globals& g, const char* cmd) {
  if (g.out.empty()) throw UsageError(std::string(cmd) + ": --out is required");
  fs::create_directories(g.out);
  return g.out;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
  if (!os) throw std::runtime_error("failed writing " + p.string());
}

std::unique_ptr<SimilarityOracle> make_oracle(const std::string& embeddings) {
  if (embeddings.empty()) return std::make_unique<BagOfWordsOracle>();
  return std::make_unique<EmbeddingFileOracle>(embeddings);
}

// --- gen-corpus -------------------------------------------------------------

struct GenArgs {
  CorpusSpec spec;
};

void cmd_gen_corpus(const Globals& g, GenArgs a) {
  const auto out = require_out(g, "gen-corpus");
  a.spec.seed = g.seed;
  if (a.spec.min_image_edge == 0 || a.spec.max_image_edge < a.spec.min_image_edge)
    throw UsageError("gen-corpus: need 0 < --min-image-edge <= --max-image-edge");
  auto corpus = generate_toy_corpus(a.spec);
  if (fs::exists(out / "images")) fs::remove_all(out / "images");
  write_corpus(corpus, out);
  std::set<std::string> topics;
  for (const auto& d : corpus.documents)
    if (!d.topic.empty()) topics.insert(d.topic);
  std::cout << "wrote " << corpus.documents.size() << " documents, " << corpus.images.size() << " images, "
            << topics.size() << " topic tags to " << out.string() << "\n";
}

// --- pack -------------------------------------------------------------------

struct PackArgs {
  std::string corpus;
  std::size_t context_len = 128;
  double cut_threshold = kDefaultCutThreshold;
  std::string embeddings;
};

void cmd_pack(const Globals& g, const PackArgs& a) {
  const auto out = require_out(g, "pack");
  if (a.cut_threshold < -1.0 || a.cut_threshold > 1.0) throw UsageError("pack: --cut-threshold must lie in [-1, 1]");
  const auto corpus = read_corpus(a.corpus);
  auto docs = documents_with_tag(corpus, SourceTag::Language);
  if (docs.empty()) throw std::runtime_error("pack: corpus has no language documents");
  std::vector<std::string> texts;
  for (const auto& d : docs) texts.push_back(d.text());
  const auto oracle = make_oracle(a.embeddings);
  const auto clusters = mst_cluster(texts, *oracle, a.cut_threshold);
  const auto packs = pack_sequences(docs, clusters, a.context_len);
  write_packs((out / "packs.bin").string(), packs, a.context_len);

  std::size_t corpus_tokens = 0, packed = 0, truncated = 0, longest = 0, impure = 0;
  for (const auto& d : docs) corpus_tokens += tokenize_document(d).size() + 1;
  std::map<std::uint64_t, std::size_t> doc_cluster;
  for (std::size_t i = 0; i < docs.size(); ++i) doc_cluster[docs[i].doc_id] = clusters.labels[i];
  for (const auto& p : packs) {
    packed += p.total_length();
    truncated += p.truncated_tokens;
    longest = std::max(longest, p.total_length());
    std::set<std::size_t> cs;
    for (auto id : p.member_doc_ids) cs.insert(doc_cluster.at(id));
    impure += cs.size() != 1;
  }
  nlohmann::json report = {{"documents", docs.size()},      {"clusters", clusters.n_clusters},
                           {"packs", packs.size()},         {"context_length", a.context_len},
                           {"longest_pack", longest},       {"packed_tokens", packed},
                           {"truncated_tokens", truncated}, {"corpus_tokens", corpus_tokens},
                           {"impure_packs", impure},        {"cut_threshold", a.cut_threshold}};
  write_file(out / "pack_report.json", report.dump(2) + "\n");
  std::cout << "packs: " << packs.size() << " from " << docs.size() << " documents in " << clusters.n_clusters
            << " clusters\n"
            << "longest pack: " << longest << " / context " << a.context_len << "\n"
            << "purity: " << (packs.size() - impure) << "/" << packs.size() << " packs hold a single cluster ("
            << (impure == 0 ? "clusters per pack == 1" : "IMPURE") << ")\n"
            << "tokens: packed " << packed << " + truncated " << truncated << " = corpus " << corpus_tokens << "\n";
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string stage;
  std::string corpus;
  std::string resume;
  std::optional<std::uint64_t> budget;
  std::size_t max_steps = 0;
  std::optional<double> lr;
  std::size_t trace_every = 10;
};

void cmd_train(const Globals& g, const TrainArgs& a) {
  const auto out = require_out(g, "train");
  const auto tag = stage_tag_from_string(a.stage);
  Model model;
  std::optional<OptimizerState> opt;
  if (!a.resume.empty()) {
    auto ck = load_checkpoint(a.resume);
    log(Level::Info, "resuming from " + a.resume + " (stage " + ck.stage + ", step " + std::to_string(ck.step) + ")");
    model = std::move(ck.model);
    opt = std::move(ck.optimizer);
  } else {
    model = Model(desk_preset(), g.seed);
  }
  if (!opt) opt = OptimizerState::for_params(model.parameters());

  // Stage geometry follows the desk preset.
  auto stages = default_stages(desk_preset());
  StageConfig stage = stages.at(static_cast<std::size_t>(tag));
  stage.seed = g.seed + static_cast<std::uint64_t>(tag);
  if (a.budget) stage.token_budget = *a.budget;
  stage.max_steps = a.max_steps;
  if (a.lr) stage.lr.peak = *a.lr;

  StageData data;
  std::optional<Corpus> corpus;
  if (stage.token_budget > 0) {
    if (a.corpus.empty()) throw UsageError("train: --corpus is required unless --budget 0");
    corpus = read_corpus(a.corpus);
    DataOptions dopt;
    dopt.threads = g.threads;
    data = build_stage_data(*corpus, stage, model.config, dopt);
    log(Level::Info, "stage data: " + std::to_string(data.total_tokens()) + " packed tokens");
  }

  const std::string base = (out / a.stage).string();
  TrainOptions topt;
  topt.checkpoint_path = base + ".ckpt";
  topt.trace_path = base + ".trace";
  topt.trace_every = a.trace_every;
  topt.corpus = corpus ? &*corpus : nullptr;
  topt.on_step = [](const StepRecord& r) {
    if (r.step % 25 == 0)
      log(Level::Debug, "step " + std::to_string(r.step) + " lm " + std::to_string(r.lm) + " lr " + std::to_string(r.lr));
  };
  const auto report = train_stage(model, *opt, stage, data, topt);
  write_file(base + ".report.json", to_json(report).dump(2) + "\n");
  std::cout << "stage " << a.stage << ": " << report.steps << " steps, " << report.tokens << " tokens, context "
            << report.context_length << ", rope_base " << report.rope_base << "\n";
  if (!report.curve.empty())
    std::cout << "lm loss " << report.initial_loss() << " -> " << report.final_loss() << "\n";
  std::cout << "checkpoint " << topt.checkpoint_path << "\n";
}

// --- analyze ----------------------------------------------------------------

struct AnalyzeArgs {
  std::vector<std::string> traces;
  std::vector<std::string> domains;
  std::string checkpoint;
  std::string corpus;
  double cap = kDefaultSpecializationCap;
  std::size_t max_docs = 0;
};

void cmd_analyze(const Globals& g, const AnalyzeArgs& a) {
  const auto out = require_out(g, "analyze");
  if (!(a.cap > 0)) throw UsageError("analyze: --cap must be positive");
  std::vector<ActivationCounter> counters;
  if (!a.traces.empty()) {
    if (!a.domains.empty() && a.domains.size() != a.traces.size())
      throw UsageError("analyze: give one --domain per --trace or none");
    std::map<std::string, std::size_t> at;
    for (std::size_t i = 0; i < a.traces.size(); ++i) {
      const std::string domain = a.domains.empty() ? "natural-image" : a.domains[i];
      auto c = replay_trace(read_trace(a.traces[i]), domain);
      auto it = at.find(domain);
      if (it == at.end()) {
        at[domain] = counters.size();
        counters.push_back(std::move(c));
      } else {
        counters[it->second].merge(c);
      }
    }
  } else if (!a.checkpoint.empty()) {
    if (a.corpus.empty()) throw UsageError("analyze: --checkpoint needs --corpus");
    const auto ck = load_checkpoint(a.checkpoint);
    const auto corpus = read_corpus(a.corpus);
    counters = probe_routing(ck.model, corpus, a.max_docs);
  } else {
    throw UsageError("analyze: give --trace or --checkpoint with --corpus");
  }
  const auto m = compute_specialization(counters, a.cap);
  export_heatmap(m, (out / "specialization").string());
  for (const auto& f : m.flagged)
    log(Level::Warn, f.domain + " layer " + std::to_string(f.layer) + " not reported: " + f.reason);
  std::cout << "wrote " << m.cells.size() << " rows to " << (out / "specialization.csv").string() << " and "
            << (out / "specialization.svg").string() << "\n";
}

// --- eval-niah --------------------------------------------------------------

struct NiahArgs {
  std::vector<std::size_t> lengths = default_niah_lengths();
  std::vector<double> depths = default_niah_depths();
  std::size_t cases_per_cell = 4;
  std::string solver = "oracle";
  std::string checkpoint;
};

void cmd_eval_niah(const Globals& g, const NiahArgs& a) {
  for (double d : a.depths)
    if (d < 0 || d > 1) throw UsageError("eval-niah: depths must lie in [0, 1]");
  std::unique_ptr<NIAHSolver> solver;
  std::optional<Checkpoint> ck;
  if (a.solver == "oracle") {
    solver = std::make_unique<RetrievalOracle>();
  } else if (a.solver == "random") {
    solver = std::make_unique<RandomBaseline>(g.seed);
  } else {
    if (a.checkpoint.empty()) throw UsageError("eval-niah: --solver model needs --checkpoint");
    ck = load_checkpoint(a.checkpoint);
    solver = std::make_unique<DecoderSolver>(ck->model.decoder);
  }
  const auto report = run_niah(*solver, a.lengths, a.depths, a.cases_per_cell, g.seed);
  const auto csv = eval_grid_csv(report);
  if (!g.out.empty()) {
    fs::create_directories(g.out);
    write_file(fs::path(g.out) / "niah.json", to_json(report).dump(2) + "\n");
    write_file(fs::path(g.out) / "niah.csv", csv);
  }
  std::cout << "solver " << report.solver << ", overall accuracy " << report.overall_accuracy() << "\n" << csv;
}

// --- params -----------------------------------------------------------------

int cmd_params(const Globals& g) {
  const auto run = run_parameter_report();
  const auto text = to_text(run);
  std::cout << text;
  if (!g.out.empty()) {
    fs::create_directories(g.out);
    write_file(fs::path(g.out) / "params.txt", text);
    write_file(fs::path(g.out) / "params_paper.kv", to_kv(run.paper));
    write_file(fs::path(g.out) / "params_desk.kv", to_kv(run.desk));
  }
  return run.all_pass() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal mixture-of-experts toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "INI config file; [section] names match subcommands, flags override");

  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--threads", g.threads, "Worker threads for filtering and evaluation")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--log-level", g.log_level, "error, warn, info or debug")
      ->check(CLI::IsMember({"error", "warn", "info", "debug"}))
      ->capture_default_str();

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-corpus", "Generate the synthetic corpus");
  gen_cmd->add_option("--clusters", gen.spec.clusters, "Planted language topics")->capture_default_str();
  gen_cmd->add_option("--docs-per-cluster", gen.spec.docs_per_cluster)->capture_default_str();
  gen_cmd->add_option("--sentences-per-doc", gen.spec.sentences_per_doc)->capture_default_str();
  gen_cmd->add_option("--captions", gen.spec.caption_docs)->capture_default_str();
  gen_cmd->add_option("--interleaved", gen.spec.interleaved_docs)->capture_default_str();
  gen_cmd->add_option("--document-qa", gen.spec.document_qa_docs)->capture_default_str();
  gen_cmd->add_option("--video-qa", gen.spec.video_qa_docs)->capture_default_str();
  gen_cmd->add_option("--copy-docs", gen.spec.copy_docs, "Copy-task documents")->capture_default_str();
  gen_cmd->add_option("--min-image-edge", gen.spec.min_image_edge)->capture_default_str();
  gen_cmd->add_option("--max-image-edge", gen.spec.max_image_edge)->capture_default_str();

  PackArgs pack;
  auto* pack_cmd = app.add_subcommand("pack", "Cluster language documents and pack them");
  pack_cmd->add_option("--corpus", pack.corpus, "Corpus directory")->required();
  pack_cmd->add_option("--context-len", pack.context_len)->check(CLI::Range(2, 1 << 20))->capture_default_str();
  pack_cmd->add_option("--cut-threshold", pack.cut_threshold)->capture_default_str();
  pack_cmd->add_option("--embeddings", pack.embeddings, "JSON-lines embedding file instead of bag-of-words");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Run one training stage");
  train_cmd->add_option("--stage", train.stage)
      ->required()
      ->check(CLI::IsMember({"language-pretrain", "multimodal-pretrain", "long-context", "post-train"}));
  train_cmd->add_option("--corpus", train.corpus, "Corpus directory");
  train_cmd->add_option("--resume", train.resume, "Checkpoint to continue from");
  train_cmd->add_option("--budget", train.budget, "Token budget override");
  train_cmd->add_option("--max-steps", train.max_steps, "Step cap (0: none)")->capture_default_str();
  train_cmd->add_option("--lr", train.lr, "Peak learning rate override");
  train_cmd->add_option("--trace-every", train.trace_every, "Write routing records every N steps")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  AnalyzeArgs analyze;
  auto* analyze_cmd = app.add_subcommand("analyze", "Expert specialization heatmaps");
  analyze_cmd->add_option("--trace", analyze.traces, "Routing trace file (repeatable)");
  analyze_cmd->add_option("--domain", analyze.domains, "Domain of each trace")
      ->check(CLI::IsMember(specialization_domains()));
  analyze_cmd->add_option("--checkpoint", analyze.checkpoint, "Probe this model instead of reading traces");
  analyze_cmd->add_option("--corpus", analyze.corpus, "Corpus for --checkpoint probing");
  analyze_cmd->add_option("--max-docs", analyze.max_docs, "Per-domain document cap when probing")->capture_default_str();
  analyze_cmd->add_option("--cap", analyze.cap)->capture_default_str();

  NiahArgs niah;
  auto* niah_cmd = app.add_subcommand("eval-niah", "Needle-in-a-haystack grid");
  niah_cmd->add_option("--lengths", niah.lengths)->delimiter(',')->capture_default_str();
  niah_cmd->add_option("--depths", niah.depths)->delimiter(',')->capture_default_str();
  niah_cmd->add_option("--cases-per-cell", niah.cases_per_cell)->check(CLI::PositiveNumber)->capture_default_str();
  niah_cmd->add_option("--solver", niah.solver)->check(CLI::IsMember({"oracle", "random", "model"}))->capture_default_str();
  niah_cmd->add_option("--checkpoint", niah.checkpoint);

  auto* params_cmd = app.add_subcommand("params", "Parameter dry run for the reference-scale and desk presets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  g_level = g.log_level == "error" ? Level::Error
            : g.log_level == "warn" ? Level::Warn
            : g.log_level == "debug" ? Level::Debug
                                     : Level::Info;
  try {
    if (*gen_cmd) cmd_gen_corpus(g, gen);
    else if (*pack_cmd) cmd_pack(g, pack);
    else if (*train_cmd) cmd_train(g, train);
    else if (*analyze_cmd) cmd_analyze(g, analyze);
    else if (*niah_cmd) cmd_eval_niah(g, niah);
    else if (*params_cmd) return cmd_params(g);
  } catch (const UsageError& e) {
    log(Level::Error, e.what());
    return 2;
  } catch (const std::exception& e) {
    log(Level::Error, e.what());
    return 1;
  }
  return 0;
}
