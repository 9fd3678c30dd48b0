#pragma once

// Dense float64 tensor with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a node holding shape, data and (optionally)
// an accumulated gradient. Operations performed while a GradTape is active on
// the current thread, and having at least one input that requires a gradient,
// are appended to that tape together with their backward rule. Replaying the
// tape in reverse populates gradients on every leaf that requires one.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mmoe {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

class GradTape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  // Id of the tape that produced this node; 0 for leaves and untracked values.
  std::uint64_t tape_id = 0;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw ShapeError("shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    Tensor t(std::move(node));
    t.check_finite("tensor construction");
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  static Tensor eye(std::size_t n) {
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
    return from({n, n}, std::move(d));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const double> data() const { return node_->data; }
  // Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_data() { return node_->data; }

  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const {
    return node_->data[r * node_->shape.back() + c];
  }
  double item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Independent copy without gradient tracking.
  Tensor detach() const { return from(shape(), node_->data); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  void check_finite(const char* where) const {
    for (double v : node_->data)
      if (!std::isfinite(v))
        throw NumericError(std::string("non-finite value produced by ") + where);
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Ordered record of differentiable operations for one forward pass.
//
// Constructing a tape makes it the active tape of the calling thread until it
// is destroyed (tapes nest; the innermost wins). Each tape supports exactly one
// backward pass; reset() discards the recording so the tape can be reused.
class GradTape {
 public:
  using BackwardFn = std::function<void(std::span<const double> out_grad)>;

  GradTape() : id_(next_id()), previous_(current_slot()) { current_slot() = this; }
  ~GradTape() { current_slot() = previous_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* current() { return current_slot(); }

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  void record(const Tensor& out, BackwardFn fn) {
    if (consumed_) throw GradError("recording onto a tape after backward; call reset() first");
    out.node()->tape_id = id_;
    entries_.push_back({out.node(), std::move(fn)});
  }

  // Propagates d(loss)/d(x) into every reachable node requiring a gradient.
  // Leaf gradients accumulate across tapes until Tensor::zero_grad().
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw GradError("backward requires a scalar loss");
    if (consumed_) throw GradError("backward called twice on the same tape without reset");
    if (loss.node()->tape_id != id_)
      throw GradError("loss is detached from this tape");
    consumed_ = true;
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      auto& node = *it->out;
      if (node.grad.size() != node.data.size()) continue;  // not on any path to loss
      it->backward(node.grad);
    }
  }

  void reset() {
    entries_.clear();
    consumed_ = false;
  }

 private:
  struct Entry {
    std::shared_ptr<detail::Node> out;
    BackwardFn backward;
  };

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }
  static GradTape*& current_slot() {
    thread_local GradTape* slot = nullptr;
    return slot;
  }

  std::uint64_t id_;
  GradTape* previous_;
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

}  // namespace mmoe
