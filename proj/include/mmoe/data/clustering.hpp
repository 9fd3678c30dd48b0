#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "mmoe/data/similarity.hpp"

namespace mmoe {

inline constexpr double kDefaultCutThreshold = 0.5;

struct WeightedEdge {
  std::size_t i = 0, j = 0;  // i < j
  double weight = 0;
  bool operator==(const WeightedEdge&) const = default;
};

struct ClusterAssignment {
  std::vector<std::size_t> labels;  // item -> cluster, numbered by first occurrence
  std::size_t n_clusters = 0;

  std::vector<std::vector<std::size_t>> members() const {
    std::vector<std::vector<std::size_t>> m(n_clusters);
    for (std::size_t i = 0; i < labels.size(); ++i) m[labels[i]].push_back(i);
    return m;
  }
};

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n), rank_(n, 0) { std::iota(parent_.begin(), parent_.end(), 0); }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  bool unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    if (rank_[a] == rank_[b]) ++rank_[a];
    return true;
  }

 private:
  std::vector<std::size_t> parent_;
  std::vector<std::size_t> rank_;
};

// Complete graph over the items with weight 1 - score.
inline std::vector<WeightedEdge> similarity_edges(const std::vector<std::string>& items,
                                                  const SimilarityOracle& oracle) {
  std::vector<WeightedEdge> edges;
  edges.reserve(items.size() * (items.size() - (items.empty() ? 0 : 1)) / 2);
  for (std::size_t i = 0; i < items.size(); ++i)
    for (std::size_t j = i + 1; j < items.size(); ++j)
      edges.push_back({i, j, 1.0 - oracle.score(items[i], items[j])});
  return edges;
}

// Kruskal; equal weights resolve toward the lexicographically lower (i, j).
inline std::vector<WeightedEdge> minimum_spanning_tree(std::size_t n, std::vector<WeightedEdge> edges) {
  std::sort(edges.begin(), edges.end(), [](const WeightedEdge& a, const WeightedEdge& b) {
    return std::tie(a.weight, a.i, a.j) < std::tie(b.weight, b.i, b.j);
  });
  DisjointSets ds(n);
  std::vector<WeightedEdge> tree;
  for (const auto& e : edges) {
    if (ds.unite(e.i, e.j)) tree.push_back(e);
    if (tree.size() + 1 == n) break;
  }
  return tree;
}

// Components after dropping tree edges heavier than 1 - cut_threshold.
inline ClusterAssignment components_after_cut(std::size_t n, const std::vector<WeightedEdge>& tree,
                                              double cut_threshold) {
  DisjointSets ds(n);
  const double max_weight = 1.0 - cut_threshold;
  for (const auto& e : tree)
    if (!(e.weight > max_weight)) ds.unite(e.i, e.j);
  ClusterAssignment out;
  out.labels.assign(n, 0);
  std::vector<std::size_t> root_label(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = ds.find(i);
    if (root_label[r] == n) root_label[r] = out.n_clusters++;
    out.labels[i] = root_label[r];
  }
  return out;
}

inline ClusterAssignment mst_cluster(const std::vector<std::string>& items, const SimilarityOracle& oracle,
                                     double cut_threshold = kDefaultCutThreshold) {
  if (items.empty()) throw std::invalid_argument("mst_cluster: no items");
  if (!(cut_threshold >= -1.0 && cut_threshold <= 1.0))
    throw std::invalid_argument("mst_cluster: threshold must lie in [-1, 1]");
  const auto tree = minimum_spanning_tree(items.size(), similarity_edges(items, oracle));
  return components_after_cut(items.size(), tree, cut_threshold);
}

}  // namespace mmoe
