#pragma once

// Needle-in-a-haystack generation and scoring, and the parameter report
// runner over the architecture presets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmoe/config.hpp"
#include "mmoe/data/tokenizer.hpp"
#include "mmoe/decoder.hpp"
#include "mmoe/params.hpp"
#include "mmoe/random.hpp"

namespace mmoe {

// Answer vocabulary; disjoint from the filler vocabulary.
inline const std::vector<std::string>& niah_values() {
  static const std::vector<std::string> v = {"amber",  "cobalt", "crimson", "indigo", "jade",   "ivory",
                                             "ochre",  "saffron", "teal",   "umber",  "violet", "scarlet",
                                             "silver", "copper", "olive",   "maroon"};
  return v;
}

namespace detail {

inline const std::vector<std::string>& niah_filler_words() {
  static const std::vector<std::string> w = {
      "the", "a", "river", "hill", "town", "farmer", "market", "bridge", "road", "winter", "summer", "old",
      "quiet", "small", "walked", "crossed", "saw", "built", "near", "over", "along", "morning", "evening",
      "people", "bread", "stone", "window", "garden", "many", "few", "again", "slowly"};
  return w;
}

inline std::string niah_filler(Rng& rng, std::size_t n) {
  const auto& w = niah_filler_words();
  std::string s;
  while (s.size() < n) {
    const std::size_t words = 5 + rng.below(6);
    for (std::size_t i = 0; i < words; ++i) {
      s += w[rng.below(w.size())];
      s.push_back(i + 1 == words ? '.' : ' ');
    }
    s.push_back(' ');
  }
  s.resize(n);
  return s;
}

inline std::string niah_key(Rng& rng) {
  static const char* alphabet = "ABCDEFGHJKLMNPQRSTUVWXYZ23456789";
  std::string k;
  for (int i = 0; i < 6; ++i) k.push_back(alphabet[rng.below(32)]);
  return k;
}

}  // namespace detail

inline std::string niah_needle(const std::string& key, const std::string& value) {
  return "the secret code for " + key + " is " + value + ". ";
}

inline std::string niah_question(const std::string& key) {
  return "\nquestion: what is the secret code for " + key + "? answer: ";
}

struct NIAHCase {
  std::size_t length = 0;  // prompt length in tokens: context plus question
  double depth = 0;
  std::uint64_t seed = 0;
  std::string context;
  std::string question;
  std::string key;
  std::string value;
  std::size_t needle_start = 0;
  std::size_t needle_length = 0;

  std::string prompt() const { return context + question; }
  bool operator==(const NIAHCase&) const = default;
};

// The needle starts at floor(depth * (context - needle)) so depth 0 opens the
// context and depth 1 ends right before the question.
inline NIAHCase generate_niah(std::size_t length, double depth, std::uint64_t seed) {
  if (!(depth >= 0.0 && depth <= 1.0)) throw std::invalid_argument("generate_niah: depth must lie in [0, 1]");
  Rng rng(seed);
  NIAHCase c;
  c.length = length;
  c.depth = depth;
  c.seed = seed;
  c.key = detail::niah_key(rng);
  c.value = niah_values()[rng.below(niah_values().size())];
  c.question = niah_question(c.key);
  const std::string needle = niah_needle(c.key, c.value);
  if (length < needle.size() + c.question.size())
    throw std::invalid_argument("generate_niah: length " + std::to_string(length) + " cannot hold needle and question (" +
                                std::to_string(needle.size() + c.question.size()) + " tokens)");
  const std::size_t context_len = length - c.question.size();
  const std::size_t slack = context_len - needle.size();
  c.needle_start = static_cast<std::size_t>(std::floor(depth * static_cast<double>(slack)));
  c.needle_length = needle.size();
  const std::string filler = detail::niah_filler(rng, slack);
  c.context = filler.substr(0, c.needle_start) + needle + filler.substr(c.needle_start);
  return c;
}

class NIAHSolver {
 public:
  virtual ~NIAHSolver() = default;
  virtual std::string name() const = 0;
  virtual std::string answer(const NIAHCase& c) = 0;
};

// Non-neural string matcher: finds "code for <key> is " in the context.
class RetrievalOracle : public NIAHSolver {
 public:
  std::string name() const override { return "retrieval-oracle"; }
  std::string answer(const NIAHCase& c) override {
    const std::string probe = "code for " + c.key + " is ";
    const auto at = c.context.find(probe);
    if (at == std::string::npos) return "";
    const auto start = at + probe.size();
    const auto end = c.context.find('.', start);
    return c.context.substr(start, end == std::string::npos ? std::string::npos : end - start);
  }
};

// Uniform guess over the answer vocabulary.
class RandomBaseline : public NIAHSolver {
 public:
  explicit RandomBaseline(std::uint64_t seed) : rng_(seed) {}
  std::string name() const override { return "random-baseline"; }
  std::string answer(const NIAHCase&) override { return niah_values()[rng_.below(niah_values().size())]; }

 private:
  Rng rng_;
};

// Greedy (argmax) byte decoding from a decoder for as many tokens as the
// expected value has.
class DecoderSolver : public NIAHSolver {
 public:
  explicit DecoderSolver(const Decoder& decoder) : decoder_(decoder) {}
  std::string name() const override { return "model"; }
  std::string answer(const NIAHCase& c) override {
    auto ids = ByteTokenizer::encode(c.prompt());
    const std::size_t needed = ids.size() + c.value.size() - 1;
    if (needed > decoder_.config().context_length)
      throw std::length_error("model context " + std::to_string(decoder_.config().context_length) +
                              " is shorter than the case (" + std::to_string(needed) + " tokens)");
    std::string out;
    for (std::size_t i = 0; i < c.value.size(); ++i) {
      auto logits = decoder_.forward(TokenSequence::text(ids)).logits;
      const std::size_t v = logits.cols(), last = logits.rows() - 1;
      std::size_t best = 0;
      for (std::size_t j = 1; j < v; ++j)
        if (logits.at(last, j) > logits.at(last, best)) best = j;
      ids.push_back(static_cast<std::int64_t>(best));
      out += ByteTokenizer::decode({static_cast<std::int64_t>(best)});
    }
    return out;
  }

 private:
  const Decoder& decoder_;
};

struct NIAHTranscript {
  std::size_t length = 0;
  double depth = 0;
  std::uint64_t seed = 0;
  std::string key, expected, got;
  bool correct = false;
};

struct NIAHCell {
  std::size_t length = 0;
  double depth = 0;
  std::size_t cases = 0;
  std::size_t correct = 0;
  double accuracy() const { return cases ? static_cast<double>(correct) / static_cast<double>(cases) : 0.0; }
};

struct EvalReport {
  std::string solver;
  std::vector<std::size_t> lengths;
  std::vector<double> depths;
  std::vector<NIAHCell> cells;  // row-major over lengths x depths
  std::vector<NIAHTranscript> transcripts;

  const NIAHCell& cell(std::size_t li, std::size_t di) const { return cells.at(li * depths.size() + di); }
  double overall_accuracy() const {
    std::size_t n = 0, ok = 0;
    for (const auto& c : cells) n += c.cases, ok += c.correct;
    return n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0;
  }
};

inline const std::vector<std::size_t>& default_niah_lengths() {
  static const std::vector<std::size_t> l = {512, 1024, 2048, 4096};
  return l;
}

inline const std::vector<double>& default_niah_depths() {
  static const std::vector<double> d = {0.0, 0.25, 0.5, 0.75, 1.0};
  return d;
}

// Seed of case r in cell (li, di); stable across grid shapes of equal size.
inline std::uint64_t niah_case_seed(std::uint64_t seed, std::size_t li, std::size_t di, std::size_t r) {
  return fnv1a64(std::to_string(seed) + "/" + std::to_string(li) + "/" + std::to_string(di) + "/" + std::to_string(r));
}

inline EvalReport score_niah(NIAHSolver& solver, const std::vector<NIAHCase>& cases,
                             const std::vector<std::size_t>& lengths, const std::vector<double>& depths) {
  if (cases.empty()) throw std::invalid_argument("score_niah: no cases");
  EvalReport r;
  r.solver = solver.name();
  r.lengths = lengths;
  r.depths = depths;
  for (auto l : lengths)
    for (auto d : depths) r.cells.push_back({l, d, 0, 0});
  for (const auto& c : cases) {
    const auto li = std::find(lengths.begin(), lengths.end(), c.length) - lengths.begin();
    const auto di = std::find(depths.begin(), depths.end(), c.depth) - depths.begin();
    if (static_cast<std::size_t>(li) == lengths.size() || static_cast<std::size_t>(di) == depths.size())
      throw std::invalid_argument("score_niah: case outside the grid");
    NIAHTranscript t{c.length, c.depth, c.seed, c.key, c.value, solver.answer(c), false};
    t.correct = t.got == t.expected;
    auto& cell = r.cells[static_cast<std::size_t>(li) * depths.size() + static_cast<std::size_t>(di)];
    ++cell.cases;
    cell.correct += t.correct;
    r.transcripts.push_back(std::move(t));
  }
  return r;
}

inline std::vector<NIAHCase> generate_niah_grid(const std::vector<std::size_t>& lengths, const std::vector<double>& depths,
                                                std::size_t per_cell, std::uint64_t seed) {
  std::vector<NIAHCase> cases;
  for (std::size_t li = 0; li < lengths.size(); ++li)
    for (std::size_t di = 0; di < depths.size(); ++di)
      for (std::size_t r = 0; r < per_cell; ++r)
        cases.push_back(generate_niah(lengths[li], depths[di], niah_case_seed(seed, li, di, r)));
  return cases;
}

inline EvalReport run_niah(NIAHSolver& solver, const std::vector<std::size_t>& lengths, const std::vector<double>& depths,
                           std::size_t per_cell, std::uint64_t seed) {
  return score_niah(solver, generate_niah_grid(lengths, depths, per_cell, seed), lengths, depths);
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json cells = nlohmann::json::array(), tr = nlohmann::json::array();
  for (const auto& c : r.cells)
    cells.push_back({{"length", c.length}, {"depth", c.depth}, {"cases", c.cases}, {"correct", c.correct},
                     {"accuracy", c.accuracy()}});
  for (const auto& t : r.transcripts)
    tr.push_back({{"length", t.length}, {"depth", t.depth}, {"seed", t.seed}, {"key", t.key},
                  {"expected", t.expected}, {"got", t.got}, {"correct", t.correct}});
  return {{"solver", r.solver}, {"lengths", r.lengths}, {"depths", r.depths}, {"cells", cells},
          {"overall_accuracy", r.overall_accuracy()}, {"transcripts", tr}};
}

// Rows are context lengths, columns depths.
inline std::string eval_grid_csv(const EvalReport& r) {
  std::string out = "length";
  char buf[32];
  for (double d : r.depths) {
    std::snprintf(buf, sizeof buf, ",depth_%.2f", d);
    out += buf;
  }
  out += "\n";
  for (std::size_t li = 0; li < r.lengths.size(); ++li) {
    out += std::to_string(r.lengths[li]);
    for (std::size_t di = 0; di < r.depths.size(); ++di) {
      std::snprintf(buf, sizeof buf, ",%.4f", r.cell(li, di).accuracy());
      out += buf;
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter report runner.

inline constexpr double kPaperTotalParams = 24.9e9;
inline constexpr double kPaperActivatedText = 3.5e9;
inline constexpr double kParamTolerance = 0.05;

struct ParameterCheck {
  std::string name;
  double expected = 0, actual = 0;
  bool pass = false;
};

struct ParameterRun {
  ParameterReport paper, desk;
  std::vector<ParameterCheck> checks;
  bool all_pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const ParameterCheck& c) { return c.pass; });
  }
};

inline ParameterRun run_parameter_report(const ModelConfig& paper = paper_preset(),
                                         const ModelConfig& desk = desk_preset()) {
  paper.validate();
  desk.validate();
  ParameterRun run;
  run.paper = count_parameters(paper.decoder, paper.vision);
  run.desk = count_parameters(desk.decoder, desk.vision);
  auto within = [](double actual, double expected) {
    return std::abs(actual - expected) <= kParamTolerance * expected;
  };
  const double total = static_cast<double>(run.paper.total);
  const double act = static_cast<double>(run.paper.activated_text);
  run.checks.push_back({"total within 5% of 24.9B", kPaperTotalParams, total, within(total, kPaperTotalParams)});
  run.checks.push_back({"activated/text within 5% of 3.5B", kPaperActivatedText, act, within(act, kPaperActivatedText)});
  for (const auto* r : {&run.paper, &run.desk}) {
    const double diff = static_cast<double>(r->activated_visual - r->activated_text);
    const double vis = static_cast<double>(r->item("vision"));
    run.checks.push_back({std::string(r == &run.paper ? "paper" : "desk") + " activated/visual - activated/text == vision",
                          vis, diff, r->activated_visual - r->activated_text == r->item("vision")});
  }
  return run;
}

inline std::string to_text(const ParameterRun& run) {
  std::string out = to_text(run.paper, "paper preset") + to_text(run.desk, "desk preset");
  char buf[160];
  for (const auto& c : run.checks) {
    std::snprintf(buf, sizeof buf, "check %-50s %s (actual %.6g, expected %.6g)\n", c.name.c_str(),
                  c.pass ? "PASS" : "FAIL", c.actual, c.expected);
    out += buf;
  }
  return out;
}

}  // namespace mmoe
