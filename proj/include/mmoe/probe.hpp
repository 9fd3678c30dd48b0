#pragma once

// Routing statistics of a model on corpus documents, grouped by image domain.

#include <string>
#include <vector>

#include "mmoe/analyzer.hpp"
#include "mmoe/data/packing.hpp"
#include "mmoe/trainer.hpp"

namespace mmoe {

// natural-image: caption and web pages; video: video QA; pdf-like: document QA.
inline std::string domain_of(SourceTag tag) {
  switch (tag) {
    case SourceTag::Caption:
    case SourceTag::WebInterleaved: return "natural-image";
    case SourceTag::VideoQA: return "video";
    case SourceTag::DocumentQA: return "pdf-like";
    default: return "";
  }
}

// One counter per domain present in the corpus, in specialization_domains()
// order. Documents longer than the model context are skipped.
inline std::vector<ActivationCounter> probe_routing(const Model& model, const Corpus& corpus,
                                                    std::size_t max_docs_per_domain = 0) {
  const auto& dc = model.config.decoder;
  ImageTokenCount image_tokens = [&](const std::string& ref) {
    const auto& img = corpus.image(ref).image;
    return visual_token_count(img.height, img.width, model.config.vision);
  };
  std::vector<ActivationCounter> out;
  for (const auto& domain : specialization_domains()) {
    ActivationCounter counter(dc.n_layers, dc.moe.n_routed, domain);
    std::size_t used = 0;
    for (const auto& doc : corpus.documents) {
      if (domain_of(doc.source_tag) != domain) continue;
      if (max_docs_per_domain && used >= max_docs_per_domain) break;
      auto t = tokenize_document(doc, image_tokens);
      if (t.size() == 0 || t.size() > dc.context_length) continue;
      PackedSequence p;
      p.token_ids = t.ids;
      p.modality = t.modality;
      p.image_refs = t.image_refs;
      p.image_token_counts = t.image_token_counts;
      for (const auto& m : model.forward(p, &corpus).moe) counter.record(m.record);
      ++used;
    }
    if (used > 0) out.push_back(std::move(counter));
  }
  return out;
}

}  // namespace mmoe
