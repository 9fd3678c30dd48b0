#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace mmoe {

// Byte-level tokenizer: ids 0..255 are raw bytes, followed by a few specials.
struct ByteTokenizer {
  static constexpr std::int64_t kBos = 256;
  static constexpr std::int64_t kSep = 257;
  static constexpr std::int64_t kImage = 258;  // visual-token placeholder
  static constexpr std::int64_t kPad = 259;
  static constexpr std::size_t kVocabSize = 260;

  static std::vector<std::int64_t> encode(std::string_view text) {
    std::vector<std::int64_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(c);
    return ids;
  }

  static std::string decode(const std::vector<std::int64_t>& ids) {
    std::string s;
    for (auto id : ids)
      if (id >= 0 && id < 256) s.push_back(static_cast<char>(id));
    return s;
  }
};

}  // namespace mmoe
