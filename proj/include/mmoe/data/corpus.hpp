#pragma once

// Documents, the on-disk corpus store, and a seeded generator for a
// desk-scale synthetic corpus with planted structure.
//
// Store layout (directory):
//   corpus.json     {"format_version": 1, "documents": n, "images": m}
//   manifest.jsonl  one document per line:
//                   {"doc_id", "source_tag", "topic", "segments": [{"text"} | {"image"}]}
//   images.jsonl    one image per line: {"ref", "descriptor"}
//   images/<ref>    binary PPM (P6)

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmoe/random.hpp"
#include "mmoe/vision.hpp"

namespace mmoe {

enum class SourceTag { WebInterleaved, Caption, DocumentQA, VideoQA, Language };

inline const char* to_string(SourceTag t) {
  switch (t) {
    case SourceTag::WebInterleaved: return "web-interleaved";
    case SourceTag::Caption: return "caption";
    case SourceTag::DocumentQA: return "document-qa";
    case SourceTag::VideoQA: return "video-qa";
    default: return "language";
  }
}

inline SourceTag source_tag_from_string(const std::string& s) {
  for (auto t : {SourceTag::WebInterleaved, SourceTag::Caption, SourceTag::DocumentQA,
                 SourceTag::VideoQA, SourceTag::Language})
    if (s == to_string(t)) return t;
  throw std::invalid_argument("unknown source tag '" + s + "'");
}

struct Segment {
  enum class Kind { Text, Image };
  Kind kind = Kind::Text;
  std::string value;  // sentence text or image reference

  static Segment text(std::string s) { return {Kind::Text, std::move(s)}; }
  static Segment image(std::string ref) { return {Kind::Image, std::move(ref)}; }
  bool is_text() const { return kind == Kind::Text; }
  bool is_image() const { return kind == Kind::Image; }
  bool operator==(const Segment&) const = default;
};

struct Document {
  std::uint64_t doc_id = 0;
  SourceTag source_tag = SourceTag::Language;
  std::string topic;  // planted topic for generated language documents, else empty
  std::vector<Segment> segments;

  std::size_t image_count() const {
    return static_cast<std::size_t>(std::count_if(segments.begin(), segments.end(),
                                                   [](const Segment& s) { return s.is_image(); }));
  }

  // Text segments joined by single spaces.
  std::string text() const {
    std::string out;
    for (const auto& s : segments)
      if (s.is_text()) {
        if (!out.empty()) out.push_back(' ');
        out += s.value;
      }
    return out;
  }

  bool operator==(const Document&) const = default;
};

class UnresolvedImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoredImage {
  ImageInput image;
  std::string descriptor;  // text standing in for image semantics when scoring
};

struct Corpus {
  std::vector<Document> documents;
  std::map<std::string, StoredImage> images;

  const StoredImage& image(const std::string& ref) const {
    auto it = images.find(ref);
    if (it == images.end()) throw UnresolvedImageError("unresolvable image reference '" + ref + "'");
    return it->second;
  }

  std::vector<const Document*> with_tag(SourceTag tag) const {
    std::vector<const Document*> out;
    for (const auto& d : documents)
      if (d.source_tag == tag) out.push_back(&d);
    return out;
  }
};

inline nlohmann::json to_json(const Document& d) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : d.segments)
    segs.push_back(s.is_text() ? nlohmann::json{{"text", s.value}} : nlohmann::json{{"image", s.value}});
  return {{"doc_id", d.doc_id}, {"source_tag", to_string(d.source_tag)}, {"topic", d.topic}, {"segments", segs}};
}

inline Document document_from_json(const nlohmann::json& j) {
  Document d;
  d.doc_id = j.at("doc_id");
  d.source_tag = source_tag_from_string(j.at("source_tag"));
  d.topic = j.value("topic", "");
  for (const auto& s : j.at("segments")) {
    if (s.contains("text")) d.segments.push_back(Segment::text(s.at("text")));
    else if (s.contains("image")) d.segments.push_back(Segment::image(s.at("image")));
    else throw std::invalid_argument("manifest: segment without text or image");
  }
  if (d.segments.empty()) throw std::invalid_argument("manifest: document " + std::to_string(d.doc_id) + " is empty");
  return d;
}

inline constexpr std::uint64_t kCorpusFormatVersion = 1;

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  {
    std::ofstream meta(dir / "corpus.json", std::ios::binary);
    meta << nlohmann::json{{"format_version", kCorpusFormatVersion},
                           {"documents", corpus.documents.size()},
                           {"images", corpus.images.size()}}
                .dump()
         << '\n';
    if (!meta) throw std::runtime_error("cannot write corpus in " + dir.string());
  }
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
  for (const auto& d : corpus.documents) manifest << to_json(d).dump() << '\n';
  std::ofstream meta(dir / "images.jsonl", std::ios::binary);
  for (const auto& [ref, img] : corpus.images) {
    meta << nlohmann::json{{"ref", ref}, {"descriptor", img.descriptor}}.dump() << '\n';
    write_ppm(img.image, (dir / "images" / ref).string());
  }
  if (!manifest || !meta) throw std::runtime_error("failed writing corpus to " + dir.string());
}

inline Corpus read_corpus(const std::filesystem::path& dir) {
  {
    std::ifstream meta(dir / "corpus.json");
    if (!meta) throw std::runtime_error("no corpus.json in " + dir.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("corpus.json is not JSON: " + std::string(e.what()));
    }
    const auto version = j.value("format_version", std::uint64_t{0});
    if (version != kCorpusFormatVersion)
      throw FormatError("corpus format_version " + std::to_string(version) + " unsupported (expected " +
                        std::to_string(kCorpusFormatVersion) + ")");
  }
  Corpus c;
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw std::runtime_error("no manifest.jsonl in " + dir.string());
  std::string line;
  while (std::getline(manifest, line))
    if (!line.empty()) c.documents.push_back(document_from_json(nlohmann::json::parse(line)));
  std::ifstream meta(dir / "images.jsonl");
  while (meta && std::getline(meta, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    const std::string ref = j.at("ref");
    c.images[ref] = {read_ppm((dir / "images" / ref).string()), j.at("descriptor")};
  }
  std::sort(c.documents.begin(), c.documents.end(),
            [](const Document& a, const Document& b) { return a.doc_id < b.doc_id; });
  return c;
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation.

struct CorpusSpec {
  std::uint64_t seed = 0;
  std::size_t clusters = 3;  // planted language topics
  std::size_t docs_per_cluster = 8;
  std::size_t sentences_per_doc = 4;
  std::size_t words_per_sentence = 10;
  std::size_t caption_docs = 12;
  std::size_t interleaved_docs = 6;
  std::size_t document_qa_docs = 4;
  std::size_t video_qa_docs = 3;
  std::size_t frames_per_video = 3;
  std::size_t copy_docs = 0;
  std::size_t copy_length = 12;
  std::size_t copy_alphabet = 8;
  std::size_t min_image_edge = 20;
  std::size_t max_image_edge = 48;
};

namespace detail {

struct Color {
  const char* name;
  double r, g, b;
};

inline const std::vector<Color>& palette() {
  static const std::vector<Color> p = {{"red", 0.9, 0.1, 0.1},    {"green", 0.1, 0.8, 0.2},
                                       {"blue", 0.1, 0.2, 0.9},   {"yellow", 0.95, 0.9, 0.1},
                                       {"purple", 0.6, 0.2, 0.7}, {"orange", 1.0, 0.55, 0.0},
                                       {"white", 1.0, 1.0, 1.0},  {"black", 0.0, 0.0, 0.0}};
  return p;
}

inline const std::vector<std::string>& shapes() {
  static const std::vector<std::string> s = {"square", "circle", "triangle", "cross"};
  return s;
}

inline const std::vector<std::string>& function_words() {
  static const std::vector<std::string> w = {"the", "a", "of", "and", "with", "in"};
  return w;
}

inline std::vector<std::string> topic_words(std::size_t topic) {
  static const std::vector<std::pair<std::string, std::vector<std::string>>> themes = {
      {"astronomy", {"star", "orbit", "planet", "comet", "galaxy", "nebula", "telescope", "moon", "solar", "eclipse", "meteor", "cosmos"}},
      {"cooking", {"flour", "oven", "butter", "recipe", "simmer", "garlic", "saucepan", "bake", "spice", "dough", "roast", "broth"}},
      {"sailing", {"hull", "mast", "anchor", "harbor", "keel", "rudder", "tide", "sailor", "deck", "breeze", "voyage", "knot"}},
      {"music", {"melody", "chord", "rhythm", "violin", "tempo", "sonata", "piano", "harmony", "drum", "lyric", "octave", "choir"}},
      {"geology", {"basalt", "fault", "magma", "quartz", "sediment", "crust", "erosion", "granite", "fossil", "mineral", "lava", "strata"}},
      {"botany", {"petal", "root", "seedling", "pollen", "stem", "leaf", "orchid", "fern", "blossom", "sprout", "bark", "moss"}},
  };
  if (topic < themes.size()) return themes[topic].second;
  std::vector<std::string> w;
  for (std::size_t j = 0; j < 12; ++j) w.push_back("t" + std::to_string(topic) + "w" + std::to_string(j));
  return w;
}

inline std::string topic_name(std::size_t topic) {
  static const std::vector<std::string> names = {"astronomy", "cooking", "sailing", "music", "geology", "botany"};
  return topic < names.size() ? names[topic] : "topic" + std::to_string(topic);
}

inline std::string topic_sentence(Rng& rng, std::size_t topic, std::size_t words) {
  const auto vocab = topic_words(topic);
  const auto& fw = function_words();
  std::string s;
  for (std::size_t i = 0; i < words; ++i) {
    if (i) s.push_back(' ');
    if (rng.uniform() < 0.3) s += fw[rng.below(fw.size())];
    else s += vocab[rng.below(vocab.size())];
  }
  s.push_back('.');
  return s;
}

// Snap to the 8-bit grid so images survive a PPM round trip exactly.
inline double quantize(double v) { return std::round(v * 255.0) / 255.0; }

struct DrawnShape {
  ImageInput image;
  std::string color, shape, background;
};

inline DrawnShape draw_shape(Rng& rng, std::size_t h, std::size_t w) {
  const auto& pal = palette();
  const auto fg_i = rng.below(pal.size());
  auto bg_i = rng.below(pal.size() - 1);
  if (bg_i >= fg_i) ++bg_i;
  const auto& fg = pal[fg_i];
  const auto& bg = pal[bg_i];
  const auto& shape = shapes()[rng.below(shapes().size())];
  DrawnShape out{ImageInput::blank(h, w), fg.name, shape, bg.name};
  const double cy = static_cast<double>(h) / 2.0, cx = static_cast<double>(w) / 2.0;
  const double rad = static_cast<double>(std::min(h, w)) * 0.35;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
      bool inside = false;
      if (shape == "square") inside = std::abs(dy) <= rad && std::abs(dx) <= rad;
      else if (shape == "circle") inside = dy * dy + dx * dx <= rad * rad;
      else if (shape == "triangle") inside = dy >= -rad && dy <= rad && std::abs(dx) <= (dy + rad) / 2.0;
      else inside = (std::abs(dy) <= rad / 3 && std::abs(dx) <= rad) || (std::abs(dx) <= rad / 3 && std::abs(dy) <= rad);
      const Color& c = inside ? fg : bg;
      out.image.at(y, x, 0) = quantize(c.r);
      out.image.at(y, x, 1) = quantize(c.g);
      out.image.at(y, x, 2) = quantize(c.b);
    }
  return out;
}

inline ImageInput draw_document_page(std::size_t h, std::size_t w, std::size_t lines) {
  ImageInput img = ImageInput::blank(h, w, 1.0);
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t y = (l + 1) * h / (lines + 1);
    for (std::size_t x = w / 8; x < w - w / 8; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = 0.0;
  }
  return img;
}

}  // namespace detail

inline std::string shape_caption(const std::string& color, const std::string& shape, const std::string& bg) {
  return "a " + color + " " + shape + " on a " + bg + " background.";
}

// Deterministic synthetic corpus. Language documents carry planted topics
// (one vocabulary per topic); images are drawn shapes whose captions state
// the drawn color and shape.
inline Corpus generate_toy_corpus(const CorpusSpec& spec) {
  Rng rng(spec.seed);
  Corpus c;
  std::uint64_t next_id = 0;
  std::size_t next_img = 0;
  auto edge = [&]() { return spec.min_image_edge + rng.below(spec.max_image_edge - spec.min_image_edge + 1); };
  auto new_ref = [&]() {
    char buf[32];
    std::snprintf(buf, sizeof buf, "img_%06zu.ppm", next_img++);
    return std::string(buf);
  };
  struct Captioned {
    std::string ref, caption;
  };
  auto new_shape_image = [&]() {
    auto d = detail::draw_shape(rng, edge(), edge());
    Captioned out{new_ref(), shape_caption(d.color, d.shape, d.background)};
    c.images[out.ref] = {std::move(d.image), d.color + " " + d.shape + " " + d.background + " background"};
    return out;
  };

  // Language documents, interleaved across topics so clusters are not contiguous.
  for (std::size_t i = 0; i < spec.docs_per_cluster; ++i)
    for (std::size_t t = 0; t < spec.clusters; ++t) {
      Document d{next_id++, SourceTag::Language, detail::topic_name(t), {}};
      for (std::size_t s = 0; s < spec.sentences_per_doc; ++s)
        d.segments.push_back(Segment::text(detail::topic_sentence(rng, t, spec.words_per_sentence)));
      c.documents.push_back(std::move(d));
    }

  for (std::size_t i = 0; i < spec.caption_docs; ++i) {
    auto img = new_shape_image();
    c.documents.push_back({next_id++, SourceTag::Caption, "", {Segment::image(img.ref), Segment::text(img.caption)}});
  }

  // Interleaved pages cycle through three layouts: an image placed after its
  // caption (repositioning target), a page with a byte-duplicate image, and a
  // page whose images match none of its text (filtering target).
  for (std::size_t i = 0; i < spec.interleaved_docs; ++i) {
    const std::size_t topic = spec.clusters ? i % spec.clusters : 0;
    Document d{next_id++, SourceTag::WebInterleaved, "", {}};
    auto a = new_shape_image();
    auto b = new_shape_image();
    auto filler = [&]() { return Segment::text(detail::topic_sentence(rng, topic, spec.words_per_sentence)); };
    switch (i % 3) {
      case 0:
        d.segments = {Segment::text(a.caption), filler(), Segment::image(a.ref), filler(),
                      Segment::image(b.ref), Segment::text(b.caption)};
        break;
      case 1: {
        const std::string dup = new_ref();
        c.images[dup] = c.images.at(a.ref);
        d.segments = {Segment::image(a.ref), Segment::text(a.caption), filler(), Segment::image(dup),
                      Segment::image(b.ref), Segment::text(b.caption)};
        break;
      }
      default:
        d.segments = {filler(), Segment::image(a.ref), filler(), Segment::image(b.ref), filler()};
        break;
    }
    c.documents.push_back(std::move(d));
  }

  for (std::size_t i = 0; i < spec.document_qa_docs; ++i) {
    const std::size_t lines = 1 + rng.below(6);
    const std::string ref = new_ref();
    c.images[ref] = {detail::draw_document_page(edge(), edge(), lines),
                     "document page with " + std::to_string(lines) + " lines"};
    c.documents.push_back({next_id++, SourceTag::DocumentQA, "",
                           {Segment::image(ref), Segment::text("question: how many lines are on the page?"),
                            Segment::text("answer: " + std::to_string(lines) + ".")}});
  }

  for (std::size_t i = 0; i < spec.video_qa_docs; ++i) {
    Document d{next_id++, SourceTag::VideoQA, "", {}};
    const auto first = detail::draw_shape(rng, edge(), edge());
    for (std::size_t f = 0; f < spec.frames_per_video; ++f) {
      const std::string ref = new_ref();
      c.images[ref] = {first.image, first.color + " " + first.shape + " video frame " + std::to_string(f)};
      d.segments.push_back(Segment::image(ref));
    }
    d.segments.push_back(Segment::text("question: what shape appears in the video?"));
    d.segments.push_back(Segment::text("answer: a " + first.color + " " + first.shape + "."));
    c.documents.push_back(std::move(d));
  }

  for (std::size_t i = 0; i < spec.copy_docs; ++i) {
    std::string s;
    for (std::size_t k = 0; k < spec.copy_length; ++k)
      s.push_back(static_cast<char>('a' + rng.below(spec.copy_alphabet)));
    c.documents.push_back({next_id++, SourceTag::Language, "copy", {Segment::text(s + "=" + s)}});
  }
  return c;
}

// Copy-task corpus only: each document is "<random string>=<same string>".
inline Corpus generate_copy_corpus(std::uint64_t seed, std::size_t docs, std::size_t length = 12,
                                   std::size_t alphabet = 8) {
  CorpusSpec spec;
  spec.seed = seed;
  spec.clusters = 0;
  spec.docs_per_cluster = 0;
  spec.caption_docs = spec.interleaved_docs = spec.document_qa_docs = spec.video_qa_docs = 0;
  spec.copy_docs = docs;
  spec.copy_length = length;
  spec.copy_alphabet = alphabet;
  return generate_toy_corpus(spec);
}

}  // namespace mmoe
