#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace mmoe {

// Symmetric similarity in [-1, 1] with score(a, a) == 1.
class SimilarityOracle {
 public:
  virtual ~SimilarityOracle() = default;
  virtual double score(std::string_view a, std::string_view b) const = 0;
};

// Lowercased alphanumeric word counts.
inline std::map<std::string, double> bag_of_words(std::string_view text) {
  std::map<std::string, double> bag;
  std::string word;
  auto flush = [&]() {
    if (!word.empty()) bag[word] += 1.0;
    word.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c)) word.push_back(static_cast<char>(std::tolower(c)));
    else flush();
  }
  flush();
  return bag;
}

class BagOfWordsOracle : public SimilarityOracle {
 public:
  double score(std::string_view a, std::string_view b) const override {
    if (a == b) return 1.0;
    const auto ba = bag_of_words(a), bb = bag_of_words(b);
    double dot = 0, na = 0, nb = 0;
    for (const auto& [w, c] : ba) {
      na += c * c;
      auto it = bb.find(w);
      if (it != bb.end()) dot += c * it->second;
    }
    for (const auto& [w, c] : bb) nb += c * c;
    if (na == 0 || nb == 0) return 0.0;
    return dot / std::sqrt(na * nb);
  }
};

// Cosine similarity of precomputed vectors, loaded from JSON lines of the
// form {"text": ..., "vector": [...]}.
class EmbeddingFileOracle : public SimilarityOracle {
 public:
  explicit EmbeddingFileOracle(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open embedding file: " + path);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line);
      add(j.at("text").get<std::string>(), j.at("vector").get<std::vector<double>>());
    }
  }

  EmbeddingFileOracle() = default;

  void add(std::string text, std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("embedding for '" + text + "' is empty");
    if (dim_ == 0) dim_ = v.size();
    if (v.size() != dim_)
      throw std::invalid_argument("embedding for '" + text + "' has dimension " + std::to_string(v.size()) +
                                  ", expected " + std::to_string(dim_));
    double n = 0;
    for (double x : v) n += x * x;
    if (n == 0) throw std::invalid_argument("embedding for '" + text + "' is the zero vector");
    n = std::sqrt(n);
    for (double& x : v) x /= n;
    vectors_[std::move(text)] = std::move(v);
  }

  std::size_t size() const { return vectors_.size(); }

  double score(std::string_view a, std::string_view b) const override {
    if (a == b) return 1.0;
    const auto& va = lookup(a);
    const auto& vb = lookup(b);
    double dot = 0;
    for (std::size_t i = 0; i < dim_; ++i) dot += va[i] * vb[i];
    return std::max(-1.0, std::min(1.0, dot));
  }

 private:
  const std::vector<double>& lookup(std::string_view s) const {
    auto it = vectors_.find(std::string(s));
    if (it == vectors_.end()) throw std::out_of_range("no embedding for '" + std::string(s) + "'");
    return it->second;
  }

  std::size_t dim_ = 0;
  std::unordered_map<std::string, std::vector<double>> vectors_;
};

}  // namespace mmoe
