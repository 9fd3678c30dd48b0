#pragma once

// Parameter bookkeeping shared by the decoder and vision modules.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mmoe/ops.hpp"
#include "mmoe/random.hpp"

namespace mmoe {

// Named trainable tensors in a fixed, documented order (the order modules
// register them). Checkpoints serialize parameters in this order.
class ParamSet {
 public:
  void add(std::string name, Tensor t) { items_.emplace_back(std::move(name), std::move(t)); }

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
  }

  void set_trainable(bool trainable) {
    for (auto& [_, t] : items_) t.set_requires_grad(trainable);
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

inline Tensor init_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  return Tensor::from({rows, cols}, rng.normals(rows * cols, stddev), true);
}

// Fan-in scaled normal initialization for a [in x out] projection.
inline Tensor init_linear(Rng& rng, std::size_t in, std::size_t out) {
  return init_matrix(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in)));
}

inline Tensor init_ones(std::size_t n) { return Tensor::full({n}, 1.0, true); }
inline Tensor init_zeros(std::size_t n) { return Tensor::zeros({n}, true); }

}  // namespace mmoe
