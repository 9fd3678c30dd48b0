#pragma once

// Quality filtering and image repositioning for interleaved image-text pages.
// An image is compared to a sentence through its stored descriptor.

#include <algorithm>
#include <exception>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mmoe/data/corpus.hpp"
#include "mmoe/data/similarity.hpp"

namespace mmoe {

inline constexpr const char* kReasonKept = "ok";
inline constexpr const char* kReasonLowScore = "low-overall-score";

struct FilterResult {
  bool keep = false;
  std::string reason;
  double overall_score = 0;
  Document document;  // input with byte-duplicate images removed
  std::vector<std::string> removed_duplicates;
};

inline double image_sentence_score(const Corpus& corpus, const SimilarityOracle& oracle,
                                   const std::string& image_ref, const std::string& sentence) {
  return oracle.score(corpus.image(image_ref).descriptor, sentence);
}

// Drops every image whose PPM bytes equal an earlier image in the document,
// then scores the page as the mean over images of the best sentence score.
inline FilterResult filter_interleaved(const Document& doc, const Corpus& corpus, const SimilarityOracle& oracle,
                                       double min_score) {
  if (doc.image_count() == 0)
    throw std::invalid_argument("filter_interleaved: document " + std::to_string(doc.doc_id) + " has no images");
  FilterResult r;
  r.document = doc;
  r.document.segments.clear();
  std::set<std::string> seen;
  for (const auto& seg : doc.segments) {
    if (seg.is_image() && !seen.insert(encode_ppm(corpus.image(seg.value).image)).second) {
      r.removed_duplicates.push_back(seg.value);
      continue;
    }
    r.document.segments.push_back(seg);
  }
  std::vector<const std::string*> sentences;
  for (const auto& seg : r.document.segments)
    if (seg.is_text()) sentences.push_back(&seg.value);
  double total = 0;
  std::size_t images = 0;
  for (const auto& seg : r.document.segments) {
    if (!seg.is_image()) continue;
    double best = -1.0;
    for (const auto* s : sentences) best = std::max(best, image_sentence_score(corpus, oracle, seg.value, *s));
    total += best;
    ++images;
  }
  r.overall_score = total / static_cast<double>(images);
  r.keep = r.overall_score >= min_score;
  r.reason = r.keep ? kReasonKept : kReasonLowScore;
  return r;
}

// Single left-to-right pass over the original images. Each image moves to
// just before the best-scoring preceding sentence (earliest on ties) when that
// score strictly beats the next sentence after the image; a missing next
// sentence always loses. Text order never changes.
inline Document reposition_images(const Document& doc, const Corpus& corpus, const SimilarityOracle& oracle) {
  Document out = doc;
  auto& segs = out.segments;
  // ident[i]: occurrence number of the image now at segment i.
  std::vector<std::size_t> ident(segs.size(), std::numeric_limits<std::size_t>::max());
  std::size_t images = 0;
  for (std::size_t i = 0; i < segs.size(); ++i)
    if (segs[i].is_image()) ident[i] = images++;

  for (std::size_t n = 0; n < images; ++n) {
    const auto p = static_cast<std::size_t>(std::find(ident.begin(), ident.end(), n) - ident.begin());
    const std::string& ref = segs[p].value;
    std::size_t best_at = segs.size();
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < p; ++i) {
      if (!segs[i].is_text()) continue;
      const double s = image_sentence_score(corpus, oracle, ref, segs[i].value);
      if (s > best) {
        best = s;
        best_at = i;
      }
    }
    if (best_at == segs.size()) continue;
    double next = -std::numeric_limits<double>::infinity();
    for (std::size_t i = p + 1; i < segs.size(); ++i)
      if (segs[i].is_text()) {
        next = image_sentence_score(corpus, oracle, ref, segs[i].value);
        break;
      }
    if (!(best > next)) continue;
    Segment moved = segs[p];
    segs.erase(segs.begin() + static_cast<std::ptrdiff_t>(p));
    ident.erase(ident.begin() + static_cast<std::ptrdiff_t>(p));
    segs.insert(segs.begin() + static_cast<std::ptrdiff_t>(best_at), moved);
    ident.insert(ident.begin() + static_cast<std::ptrdiff_t>(best_at), n);
  }
  return out;
}

// Filters every web-interleaved document, in parallel over documents. Results
// follow the corpus order regardless of thread count.
inline std::vector<FilterResult> filter_corpus(const Corpus& corpus, const SimilarityOracle& oracle,
                                               double min_score, std::size_t threads = 1) {
  std::vector<const Document*> docs;
  for (const auto& d : corpus.documents)
    if (d.source_tag == SourceTag::WebInterleaved && d.image_count() > 0) docs.push_back(&d);
  std::vector<FilterResult> out(docs.size());
  threads = std::max<std::size_t>(1, std::min(threads, docs.size()));
  std::vector<std::exception_ptr> errors(threads);
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t i = w; i < docs.size(); i += threads) out[i] = filter_interleaved(*docs[i], corpus, oracle, min_score);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace mmoe
