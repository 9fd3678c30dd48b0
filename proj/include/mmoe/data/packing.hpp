#pragma once

// Context-bounded packing of documents into training sequences, the packed
// file format, and synthetic long multi-image sequences.
//
// Pack file: "MMOEPACK", u64 header size, JSON header
// {format_version, context_length, pack_count, token_count}, then per pack:
//   u64 cluster_id, u64 n_members, n x u64 doc ids,
//   u64 n_truncated, n x u64 doc ids, u64 truncated_tokens,
//   u64 n_images, per image: u64 token count, u64 ref size, ref bytes,
//   u64 length, u8 has_mask, per token: u32 id, u8 modality[, u8 mask].

#include <cstdint>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmoe/binary_io.hpp"
#include "mmoe/data/clustering.hpp"
#include "mmoe/data/corpus.hpp"
#include "mmoe/data/tokenizer.hpp"
#include "mmoe/decoder.hpp"

namespace mmoe {

inline constexpr std::uint64_t kPackFormatVersion = 1;

// Number of visual placeholder tokens an image reference expands to.
using ImageTokenCount = std::function<std::size_t(const std::string&)>;

struct PackedSequence {
  std::vector<std::int64_t> token_ids;
  std::vector<Modality> modality;
  std::vector<std::uint8_t> loss_mask;  // empty: every text token is a target
  std::vector<std::uint64_t> member_doc_ids;
  std::size_t cluster_id = 0;
  std::vector<std::uint64_t> truncated_doc_ids;
  std::size_t truncated_tokens = 0;
  std::vector<std::string> image_refs;          // in order of appearance
  std::vector<std::size_t> image_token_counts;  // placeholder run per image

  std::size_t total_length() const { return token_ids.size(); }

  TokenSequence to_sequence() const {
    TokenSequence s;
    s.token_ids = token_ids;
    s.modality = modality;
    s.loss_mask = loss_mask;
    s.positions.resize(token_ids.size());
    for (std::size_t i = 0; i < token_ids.size(); ++i) s.positions[i] = static_cast<std::int64_t>(i);
    return s;
  }

  bool operator==(const PackedSequence&) const = default;
};

struct TokenizedDocument {
  std::uint64_t doc_id = 0;
  std::vector<std::int64_t> ids;
  std::vector<Modality> modality;
  std::vector<std::string> image_refs;
  std::vector<std::size_t> image_token_counts;
  std::size_t size() const { return ids.size(); }
};

// Text segments become bytes joined by spaces; images become placeholder runs
// when `image_tokens` is set and are skipped otherwise.
inline TokenizedDocument tokenize_document(const Document& doc, const ImageTokenCount& image_tokens = {}) {
  TokenizedDocument t;
  t.doc_id = doc.doc_id;
  bool prev_text = false;
  for (const auto& seg : doc.segments) {
    if (seg.is_text()) {
      if (prev_text) {
        t.ids.push_back(' ');
        t.modality.push_back(Modality::Text);
      }
      for (auto id : ByteTokenizer::encode(seg.value)) {
        t.ids.push_back(id);
        t.modality.push_back(Modality::Text);
      }
      prev_text = true;
    } else if (image_tokens) {
      const std::size_t n = image_tokens(seg.value);
      t.ids.insert(t.ids.end(), n, ByteTokenizer::kImage);
      t.modality.insert(t.modality.end(), n, Modality::Visual);
      t.image_refs.push_back(seg.value);
      t.image_token_counts.push_back(n);
      prev_text = false;
    }
  }
  return t;
}

namespace detail {

// Cuts a document to `limit` tokens, dropping any image run the cut would split.
inline void truncate_document(TokenizedDocument& t, std::size_t limit) {
  if (t.size() <= limit) return;
  std::size_t keep = 0, img = 0;
  while (keep < t.size()) {
    const std::size_t step = t.modality[keep] == Modality::Visual ? t.image_token_counts[img] : 1;
    if (keep + step > limit) break;
    if (t.modality[keep] == Modality::Visual) ++img;
    keep += step;
  }
  t.ids.resize(keep);
  t.modality.resize(keep);
  t.image_refs.resize(img);
  t.image_token_counts.resize(img);
}

}  // namespace detail

// Greedy first-fit within each cluster, documents visited in order. Each
// document costs its length plus one separator. Packs are emitted in order of
// creation, so they are sorted by first member.
inline std::vector<PackedSequence> pack_sequences(const std::vector<Document>& docs,
                                                  const ClusterAssignment& clusters,
                                                  std::size_t context_length,
                                                  const ImageTokenCount& image_tokens = {}) {
  if (docs.empty()) throw std::invalid_argument("pack_sequences: empty corpus");
  if (clusters.labels.size() != docs.size())
    throw std::invalid_argument("pack_sequences: cluster labels do not match document count");
  if (context_length < 2) throw std::invalid_argument("pack_sequences: context_length must be at least 2");

  std::vector<PackedSequence> packs;
  std::vector<std::vector<std::size_t>> open(clusters.n_clusters);
  for (std::size_t d = 0; d < docs.size(); ++d) {
    auto t = tokenize_document(docs[d], image_tokens);
    const std::size_t cluster = clusters.labels[d];
    std::size_t lost = 0;
    const bool truncated = t.size() + 1 > context_length;
    if (truncated) {
      const std::size_t before = t.size();
      detail::truncate_document(t, context_length - 1);
      lost = before - t.size();
    }
    const std::size_t cost = t.size() + 1;
    PackedSequence* target = nullptr;
    for (auto idx : open.at(cluster))
      if (packs[idx].total_length() + cost <= context_length) {
        target = &packs[idx];
        break;
      }
    if (!target) {
      open[cluster].push_back(packs.size());
      packs.emplace_back();
      target = &packs.back();
      target->cluster_id = cluster;
    }
    target->token_ids.insert(target->token_ids.end(), t.ids.begin(), t.ids.end());
    target->modality.insert(target->modality.end(), t.modality.begin(), t.modality.end());
    target->token_ids.push_back(ByteTokenizer::kSep);
    target->modality.push_back(Modality::Text);
    target->member_doc_ids.push_back(t.doc_id);
    target->image_refs.insert(target->image_refs.end(), t.image_refs.begin(), t.image_refs.end());
    target->image_token_counts.insert(target->image_token_counts.end(), t.image_token_counts.begin(),
                                      t.image_token_counts.end());
    if (truncated) {
      target->truncated_doc_ids.push_back(t.doc_id);
      target->truncated_tokens += lost;
    }
  }
  return packs;
}

struct LongPair {
  std::string image_ref;
  std::size_t visual_tokens = 0;
  std::string caption;
};

// All image placeholders first, then all captions (each closed by a
// separator); only caption tokens are targets. Keeps the longest prefix of
// whole pairs that fits.
inline PackedSequence build_long_synthetic(const std::vector<LongPair>& pairs, std::size_t context_length) {
  if (pairs.empty()) throw std::invalid_argument("build_long_synthetic: no pairs");
  std::size_t used = 0, keep = 0;
  for (const auto& p : pairs) {
    const std::size_t cost = p.visual_tokens + p.caption.size() + 1;
    if (used + cost > context_length) break;
    used += cost;
    ++keep;
  }
  if (keep == 0)
    throw std::length_error("build_long_synthetic: first pair needs " +
                            std::to_string(pairs[0].visual_tokens + pairs[0].caption.size() + 1) +
                            " tokens, context is " + std::to_string(context_length));
  PackedSequence s;
  for (std::size_t i = 0; i < keep; ++i) {
    s.token_ids.insert(s.token_ids.end(), pairs[i].visual_tokens, ByteTokenizer::kImage);
    s.modality.insert(s.modality.end(), pairs[i].visual_tokens, Modality::Visual);
    s.loss_mask.insert(s.loss_mask.end(), pairs[i].visual_tokens, 0);
    s.image_refs.push_back(pairs[i].image_ref);
    s.image_token_counts.push_back(pairs[i].visual_tokens);
  }
  for (std::size_t i = 0; i < keep; ++i) {
    for (auto id : ByteTokenizer::encode(pairs[i].caption)) {
      s.token_ids.push_back(id);
      s.modality.push_back(Modality::Text);
      s.loss_mask.push_back(1);
    }
    s.token_ids.push_back(ByteTokenizer::kSep);
    s.modality.push_back(Modality::Text);
    s.loss_mask.push_back(0);
  }
  for (std::size_t i = keep; i < pairs.size(); ++i)
    s.truncated_tokens += pairs[i].visual_tokens + pairs[i].caption.size() + 1;
  return s;
}

// ---------------------------------------------------------------------------

struct PackFile {
  std::size_t context_length = 0;
  std::vector<PackedSequence> packs;
};

inline void write_packs(const std::string& path, const std::vector<PackedSequence>& packs,
                        std::size_t context_length) {
  std::size_t tokens = 0;
  for (const auto& p : packs) tokens += p.total_length();
  const std::string header = nlohmann::json{{"format_version", kPackFormatVersion},
                                            {"context_length", context_length},
                                            {"pack_count", packs.size()},
                                            {"token_count", tokens}}
                                 .dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write pack file: " + path);
  os.write("MMOEPACK", 8);
  bin::put_u64(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  auto put_ids = [&](const std::vector<std::uint64_t>& v) {
    bin::put_u64(os, v.size());
    for (auto x : v) bin::put_u64(os, x);
  };
  for (const auto& p : packs) {
    bin::put_u64(os, p.cluster_id);
    put_ids(p.member_doc_ids);
    put_ids(p.truncated_doc_ids);
    bin::put_u64(os, p.truncated_tokens);
    bin::put_u64(os, p.image_refs.size());
    for (std::size_t i = 0; i < p.image_refs.size(); ++i) {
      bin::put_u64(os, p.image_token_counts.at(i));
      bin::put_u64(os, p.image_refs[i].size());
      os.write(p.image_refs[i].data(), static_cast<std::streamsize>(p.image_refs[i].size()));
    }
    bin::put_u64(os, p.total_length());
    bin::put_u8(os, p.loss_mask.empty() ? 0 : 1);
    for (std::size_t i = 0; i < p.total_length(); ++i) {
      bin::put_u32(os, static_cast<std::uint32_t>(p.token_ids[i]));
      bin::put_u8(os, p.modality[i] == Modality::Visual ? 1 : 0);
      if (!p.loss_mask.empty()) bin::put_u8(os, p.loss_mask[i]);
    }
  }
  if (!os) throw std::runtime_error("failed writing pack file: " + path);
}

inline PackFile read_packs(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open pack file: " + path);
  char magic[8];
  bin::get_exact(is, magic, 8, "pack magic");
  if (std::string(magic, 8) != "MMOEPACK") throw FormatError("not a pack file: " + path);
  const auto hsize = bin::get_u64(is, "pack header size");
  if (hsize > (1u << 20)) throw FormatError("pack header too large");
  std::string header(hsize, '\0');
  bin::get_exact(is, header.data(), hsize, "pack header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("pack header is not JSON: ") + e.what());
  }
  const auto version = h.value("format_version", std::uint64_t{0});
  if (version != kPackFormatVersion)
    throw FormatError("pack file format_version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kPackFormatVersion) + ")");
  PackFile f;
  f.context_length = h.at("context_length");
  const std::size_t count = h.at("pack_count");
  auto get_ids = [&](const char* what) {
    std::vector<std::uint64_t> v(bin::get_u64(is, what));
    for (auto& x : v) x = bin::get_u64(is, what);
    return v;
  };
  for (std::size_t n = 0; n < count; ++n) {
    PackedSequence p;
    p.cluster_id = bin::get_u64(is, "pack cluster");
    p.member_doc_ids = get_ids("pack members");
    p.truncated_doc_ids = get_ids("pack truncations");
    p.truncated_tokens = bin::get_u64(is, "pack truncated tokens");
    const auto n_images = bin::get_u64(is, "pack image count");
    for (std::uint64_t i = 0; i < n_images; ++i) {
      p.image_token_counts.push_back(bin::get_u64(is, "image token count"));
      std::string ref(bin::get_u64(is, "image ref size"), '\0');
      bin::get_exact(is, ref.data(), ref.size(), "image ref");
      p.image_refs.push_back(std::move(ref));
    }
    const auto len = bin::get_u64(is, "pack length");
    if (len > f.context_length) throw FormatError("pack longer than context_length");
    const bool has_mask = bin::get_u8(is, "pack mask flag") != 0;
    for (std::uint64_t i = 0; i < len; ++i) {
      p.token_ids.push_back(bin::get_u32(is, "token id"));
      p.modality.push_back(bin::get_u8(is, "token modality") ? Modality::Visual : Modality::Text);
      if (has_mask) p.loss_mask.push_back(bin::get_u8(is, "token mask"));
    }
    f.packs.push_back(std::move(p));
  }
  return f;
}

}  // namespace mmoe
