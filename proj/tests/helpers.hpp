#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "mmoe/mmoe.hpp"

namespace mmoe::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double stddev = 1.0) {
  const auto n = shape_numel(shape);
  return Tensor::from(std::move(shape), rng.normals(n, stddev));
}

struct GradCheck {
  double rel_error = 0;
  std::size_t checked = 0;
};

// Tape gradients of the scalar f() against central differences over the
// elements of `inputs`. Error is norm-wise: |g_tape - g_fd| / max(|g_tape|, |g_fd|).
// With max_per_input > 0 only that many evenly spaced elements per input are probed.
inline GradCheck check_gradients(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                 std::size_t max_per_input = 0, double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    GradTape tape;
    tape.backward(f());
  }
  double diff2 = 0, a2 = 0, n2 = 0;
  GradCheck out;
  for (auto& t : inputs) {
    std::vector<double> tape_grad(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), tape_grad.begin());
    const std::size_t n = t.numel();
    const std::size_t stride = max_per_input && n > max_per_input ? n / max_per_input : 1;
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < n; i += stride) {
      const double x0 = d[i];
      d[i] = x0 + h;
      const double fp = f().item();
      d[i] = x0 - h;
      const double fm = f().item();
      d[i] = x0;
      const double fd = (fp - fm) / (2 * h);
      diff2 += (fd - tape_grad[i]) * (fd - tape_grad[i]);
      a2 += tape_grad[i] * tape_grad[i];
      n2 += fd * fd;
      ++out.checked;
    }
    t.zero_grad();
  }
  out.rel_error = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-300});
  return out;
}

// Fixed random projection to a scalar, so every output element carries a
// distinct weight.
inline Tensor project(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return sum(mul(y, random_tensor(rng, y.shape())));
}

inline DecoderConfig tiny_decoder_config() {
  DecoderConfig d;
  d.hidden_dim = 8;
  d.n_layers = 2;
  d.n_heads = 2;
  d.head_dim = 4;
  d.vocab_size = 16;
  d.context_length = 32;
  d.rope_base = 1e4;
  d.moe.n_routed = 4;
  d.moe.n_shared = 1;
  d.moe.top_k = 2;
  d.moe.expert_ffn_dim = 6;
  d.moe.group_size = 2;
  return d;
}

inline VisionConfig micro_vision_config(std::size_t output_dim = 8) {
  VisionConfig v;
  v.patch_size = 2;
  v.vit_dim = 8;
  v.vit_layers = 1;
  v.vit_heads = 2;
  v.vit_ffn_dim = 8;
  v.max_grid = 8;
  v.n_queries_base = 3;
  v.n_queries_high_extra = 2;
  v.resampler_ffn_dim = 8;
  v.output_dim = output_dim;
  return v;
}

inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.decoder = tiny_decoder_config();
  c.vision = micro_vision_config(c.decoder.hidden_dim);
  return c;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mmoe_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Golden values: "<n>\n" followed by one %.17g value per line. Setting
// MMOE_UPDATE_GOLDEN=1 rewrites the file instead of reading it.
inline std::vector<double> golden(const std::string& name, const std::vector<double>& current) {
  const std::filesystem::path path = std::filesystem::path(MMOE_GOLDEN_DIR) / name;
  if (const char* u = std::getenv("MMOE_UPDATE_GOLDEN"); u && std::string(u) == "1") {
    std::ofstream os(path);
    os << current.size() << "\n";
    char buf[40];
    for (double v : current) {
      std::snprintf(buf, sizeof buf, "%.17g\n", v);
      os << buf;
    }
  }
  std::ifstream is(path);
  if (!is) throw std::runtime_error("missing golden file " + path.string());
  std::size_t n = 0;
  is >> n;
  std::vector<double> v(n);
  for (auto& x : v) is >> x;
  return v;
}

}  // namespace mmoe::testing
