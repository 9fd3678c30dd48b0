#pragma once

// Visual encoder: resolution tiering, native-aspect patchification, a small
// bidirectional ViT, and a cross-attention resampler that emits a fixed
// number of decoder-width visual tokens per (sub-)image.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "mmoe/binary_io.hpp"
#include "mmoe/config.hpp"
#include "mmoe/decoder.hpp"
#include "mmoe/nn.hpp"
#include "mmoe/ops.hpp"

namespace mmoe {

inline constexpr std::size_t kMediumLongEdge = 490;
inline constexpr std::size_t kHighLongEdge = 980;

// RGB image, row-major, interleaved channels, values in [0, 1].
struct ImageInput {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  static ImageInput blank(std::size_t h, std::size_t w, double value = 0.0) {
    return {h, w, std::vector<double>(h * w * 3, value)};
  }

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

  void validate() const {
    if (height == 0 || width == 0) throw std::invalid_argument("image: dimensions must be positive");
    if (pixels.size() != height * width * 3)
      throw std::invalid_argument("image: pixel count does not match " + std::to_string(height) +
                                  "x" + std::to_string(width) + "x3");
  }

  bool operator==(const ImageInput&) const = default;
};

enum class Tier { Medium, High, Ultra };

inline const char* to_string(Tier t) {
  switch (t) {
    case Tier::Medium: return "medium";
    case Tier::High: return "high";
    default: return "ultra";
  }
}

struct TierDecision {
  Tier tier = Tier::Medium;
  std::size_t target_long_edge = kMediumLongEdge;
  // Resized size for medium/high; for ultra, the original size.
  std::size_t height = 0;
  std::size_t width = 0;
  // Ultra only: tile grid (row-major), each tile later resized to high tier.
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;

  std::size_t tile_count() const { return tier == Tier::Ultra ? grid_rows * grid_cols : 0; }
};

// Long edge -> target, short edge scaled by the same factor and rounded to the
// nearest multiple of `patch` (half rounds up), never below one patch.
inline std::pair<std::size_t, std::size_t> resize_to_long_edge(std::size_t h, std::size_t w,
                                                              std::size_t target, std::size_t patch) {
  if (h == 0 || w == 0 || patch == 0) throw std::invalid_argument("resize: zero dimension");
  const std::size_t lng = std::max(h, w), shrt = std::min(h, w);
  const std::size_t num = 2 * shrt * target + lng * patch;
  std::size_t units = num / (2 * lng * patch);
  units = std::max<std::size_t>(units, 1);
  const std::size_t short_out = units * patch;
  return h >= w ? std::pair{target, short_out} : std::pair{short_out, target};
}

inline TierDecision tier_image(std::size_t h, std::size_t w, std::size_t patch = 14) {
  if (h == 0 || w == 0) throw std::invalid_argument("tier_image: dimensions must be positive");
  const std::size_t lng = std::max(h, w);
  TierDecision d;
  if (lng <= kMediumLongEdge) {
    d.tier = Tier::Medium;
    d.target_long_edge = kMediumLongEdge;
  } else if (lng <= kHighLongEdge) {
    d.tier = Tier::High;
    d.target_long_edge = kHighLongEdge;
  } else {
    d.tier = Tier::Ultra;
    d.target_long_edge = kHighLongEdge;
    d.height = h;
    d.width = w;
    d.grid_rows = (h + kHighLongEdge - 1) / kHighLongEdge;
    d.grid_cols = (w + kHighLongEdge - 1) / kHighLongEdge;
    return d;
  }
  std::tie(d.height, d.width) = resize_to_long_edge(h, w, d.target_long_edge, patch);
  return d;
}

// Bilinear resampling with pixel-center alignment.
inline ImageInput resize_bilinear(const ImageInput& img, std::size_t h, std::size_t w) {
  img.validate();
  if (h == img.height && w == img.width) return img;
  ImageInput out = ImageInput::blank(h, w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(w);
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = img.at(y0, x0, c) * (1 - tx) + img.at(y0, x1, c) * tx;
        const double bot = img.at(y1, x0, c) * (1 - tx) + img.at(y1, x1, c) * tx;
        out.at(y, x, c) = top * (1 - ty) + bot * ty;
      }
    }
  }
  return out;
}

inline ImageInput crop(const ImageInput& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  ImageInput out = ImageInput::blank(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
  return out;
}

// Splits an ultra-resolution image on a ceil(h/980) x ceil(w/980) grid of
// near-equal, non-overlapping tiles in row-major order.
inline std::vector<ImageInput> decompose_ultra(const ImageInput& img) {
  img.validate();
  if (std::max(img.height, img.width) <= kHighLongEdge)
    throw std::invalid_argument("decompose_ultra: long edge must exceed " + std::to_string(kHighLongEdge));
  const std::size_t rows = (img.height + kHighLongEdge - 1) / kHighLongEdge;
  const std::size_t cols = (img.width + kHighLongEdge - 1) / kHighLongEdge;
  std::vector<ImageInput> tiles;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t y0 = r * img.height / rows, y1 = (r + 1) * img.height / rows;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t x0 = c * img.width / cols, x1 = (c + 1) * img.width / cols;
      tiles.push_back(crop(img, y0, x0, y1 - y0, x1 - x0));
    }
  }
  return tiles;
}

struct PatchSequence {
  Tensor patches;  // [N x p*p*3], per patch ordered (dy, dx, channel)
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  std::size_t patch_size = 0;
  // (row, col) of each patch; lets callers reorder patches with positions attached.
  std::vector<std::size_t> row_index;
  std::vector<std::size_t> col_index;

  std::size_t size() const { return row_index.size(); }
};

inline PatchSequence patchify(const ImageInput& img, std::size_t p) {
  img.validate();
  if (p == 0 || img.height % p != 0 || img.width % p != 0)
    throw std::invalid_argument("patchify: " + std::to_string(img.height) + "x" +
                                std::to_string(img.width) + " is not a multiple of patch size " +
                                std::to_string(p));
  PatchSequence s;
  s.patch_size = p;
  s.grid_rows = img.height / p;
  s.grid_cols = img.width / p;
  const std::size_t n = s.grid_rows * s.grid_cols, pd = p * p * 3;
  std::vector<double> data(n * pd);
  for (std::size_t r = 0; r < s.grid_rows; ++r)
    for (std::size_t c = 0; c < s.grid_cols; ++c) {
      double* dst = data.data() + (r * s.grid_cols + c) * pd;
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t ch = 0; ch < 3; ++ch) *dst++ = img.at(r * p + dy, c * p + dx, ch);
      s.row_index.push_back(r);
      s.col_index.push_back(c);
    }
  s.patches = Tensor::from({n, pd}, std::move(data));
  return s;
}

inline ImageInput unpatchify(const PatchSequence& s) {
  const std::size_t p = s.patch_size, pd = p * p * 3;
  ImageInput img = ImageInput::blank(s.grid_rows * p, s.grid_cols * p);
  auto data = s.patches.data();
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double* src = data.data() + i * pd;
    const std::size_t r = s.row_index[i], c = s.col_index[i];
    for (std::size_t dy = 0; dy < p; ++dy)
      for (std::size_t dx = 0; dx < p; ++dx)
        for (std::size_t ch = 0; ch < 3; ++ch) img.at(r * p + dy, c * p + dx, ch) = *src++;
  }
  return img;
}

// Number of visual tokens the resampler emits for an image of this size.
inline std::size_t visual_token_count(std::size_t h, std::size_t w, const VisionConfig& v) {
  const auto d = tier_image(h, w, v.patch_size);
  const std::size_t high = v.n_queries_base + v.n_queries_high_extra;
  switch (d.tier) {
    case Tier::Medium: return v.n_queries_base;
    case Tier::High: return high;
    default: return high * d.tile_count();
  }
}

// Bidirectional ViT over a variable-length patch sequence with additive
// learned row/column position embeddings.
class VisionTransformer {
 public:
  struct Block {
    Tensor norm1, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor norm2, w1, b1, w2, b2;
  };

  VisionTransformer() = default;

  VisionTransformer(const VisionConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const auto w = cfg.vit_dim;
    patch_w_ = init_linear(rng, cfg.patch_dim(), w);
    patch_b_ = init_zeros(w);
    row_pos_ = init_matrix(rng, cfg.max_grid, w, 0.02);
    col_pos_ = init_matrix(rng, cfg.max_grid, w, 0.02);
    for (std::size_t l = 0; l < cfg.vit_layers; ++l) {
      Block b;
      b.norm1 = init_ones(w);
      b.wq = init_linear(rng, w, w);
      b.bq = init_zeros(w);
      b.wk = init_linear(rng, w, w);
      b.bk = init_zeros(w);
      b.wv = init_linear(rng, w, w);
      b.bv = init_zeros(w);
      b.wo = init_linear(rng, w, w);
      b.bo = init_zeros(w);
      b.norm2 = init_ones(w);
      b.w1 = init_linear(rng, w, cfg.vit_ffn_dim);
      b.b1 = init_zeros(cfg.vit_ffn_dim);
      b.w2 = init_linear(rng, cfg.vit_ffn_dim, w);
      b.b2 = init_zeros(w);
      blocks_.push_back(std::move(b));
    }
    final_norm_ = init_ones(w);
  }

  Tensor forward(const PatchSequence& seq) const {
    if (seq.patches.cols() != cfg_.patch_dim())
      throw ShapeError("vit: patch dim " + std::to_string(seq.patches.cols()) + " vs config " +
                       std::to_string(cfg_.patch_dim()));
    for (std::size_t i = 0; i < seq.size(); ++i)
      if (seq.row_index[i] >= cfg_.max_grid || seq.col_index[i] >= cfg_.max_grid)
        throw std::out_of_range("vit: patch grid exceeds max_grid " + std::to_string(cfg_.max_grid));
    auto x = add_bias(matmul(seq.patches, patch_w_), patch_b_);
    x = add(x, add(gather_rows(row_pos_, seq.row_index), gather_rows(col_pos_, seq.col_index)));
    for (const auto& b : blocks_) {
      auto h = rms_norm(x, b.norm1);
      auto q = add_bias(matmul(h, b.wq), b.bq);
      auto k = add_bias(matmul(h, b.wk), b.bk);
      auto v = add_bias(matmul(h, b.wv), b.bv);
      auto att = multi_head_attention(q, k, v, cfg_.vit_heads, false);
      x = add(x, add_bias(matmul(att, b.wo), b.bo));
      h = rms_norm(x, b.norm2);
      x = add(x, add_bias(matmul(silu(add_bias(matmul(h, b.w1), b.b1)), b.w2), b.b2));
    }
    return rms_norm(x, final_norm_);
  }

  void collect(const std::string& prefix, ParamSet& ps) const {
    ps.add(prefix + ".patch_w", patch_w_);
    ps.add(prefix + ".patch_b", patch_b_);
    ps.add(prefix + ".row_pos", row_pos_);
    ps.add(prefix + ".col_pos", col_pos_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const auto& b = blocks_[l];
      const std::string p = prefix + ".blocks." + std::to_string(l);
      for (auto& [n, t] : std::vector<std::pair<const char*, const Tensor*>>{
               {"norm1", &b.norm1}, {"wq", &b.wq}, {"bq", &b.bq}, {"wk", &b.wk}, {"bk", &b.bk},
               {"wv", &b.wv}, {"bv", &b.bv}, {"wo", &b.wo}, {"bo", &b.bo}, {"norm2", &b.norm2},
               {"w1", &b.w1}, {"b1", &b.b1}, {"w2", &b.w2}, {"b2", &b.b2}})
        ps.add(p + "." + n, *t);
    }
    ps.add(prefix + ".final_norm", final_norm_);
  }

 private:
  VisionConfig cfg_;
  Tensor patch_w_, patch_b_, row_pos_, col_pos_;
  std::vector<Block> blocks_;
  Tensor final_norm_;
};

// Single cross-attention layer with learned queries, followed by an FFN that
// maps to decoder width. Medium images use the base queries; high-resolution
// images (and ultra tiles) use base followed by extra queries.
class Resampler {
 public:
  Resampler() = default;

  Resampler(const VisionConfig& cfg, Rng& rng) : cfg_(cfg) {
    const auto w = cfg.vit_dim;
    queries_base_ = init_matrix(rng, cfg.n_queries_base, w, 1.0);
    if (cfg.n_queries_high_extra > 0)
      queries_extra_ = init_matrix(rng, cfg.n_queries_high_extra, w, 1.0);
    wq_ = init_linear(rng, w, w);
    bq_ = init_zeros(w);
    wk_ = init_linear(rng, w, w);
    bk_ = init_zeros(w);
    wv_ = init_linear(rng, w, w);
    bv_ = init_zeros(w);
    wo_ = init_linear(rng, w, w);
    bo_ = init_zeros(w);
    w1_ = init_linear(rng, w, cfg.resampler_ffn_dim);
    b1_ = init_zeros(cfg.resampler_ffn_dim);
    w2_ = init_linear(rng, cfg.resampler_ffn_dim, cfg.output_dim);
    b2_ = init_zeros(cfg.output_dim);
  }

  std::size_t query_count(Tier tier) const {
    if (tier == Tier::Ultra)
      throw std::invalid_argument("resample: ultra images must be decomposed into high-tier tiles first");
    return tier == Tier::Medium ? cfg_.n_queries_base : cfg_.n_queries_base + cfg_.n_queries_high_extra;
  }

  Tensor forward(const Tensor& embeddings, Tier tier) const {
    const std::size_t nq = query_count(tier);
    if (embeddings.dim() != 2 || embeddings.cols() != cfg_.vit_dim)
      throw ShapeError("resample: embeddings " + shape_str(embeddings.shape()) + " vs vit_dim " +
                       std::to_string(cfg_.vit_dim));
    Tensor queries = nq == cfg_.n_queries_base ? queries_base_ : concat_rows({queries_base_, queries_extra_});
    auto q = add_bias(matmul(queries, wq_), bq_);
    auto k = add_bias(matmul(embeddings, wk_), bk_);
    auto v = add_bias(matmul(embeddings, wv_), bv_);
    auto att = add_bias(matmul(multi_head_attention(q, k, v, cfg_.vit_heads, false), wo_), bo_);
    return ffn(att);
  }

  Tensor ffn(const Tensor& x) const {
    return add_bias(matmul(silu(add_bias(matmul(x, w1_), b1_)), w2_), b2_);
  }

  // Value path of the cross-attention for one embedding set, without mixing.
  Tensor value_projection(const Tensor& embeddings) const {
    return add_bias(matmul(add_bias(matmul(embeddings, wv_), bv_), wo_), bo_);
  }

  void collect(const std::string& prefix, ParamSet& ps) const {
    ps.add(prefix + ".queries_base", queries_base_);
    if (queries_extra_.defined()) ps.add(prefix + ".queries_extra", queries_extra_);
    ps.add(prefix + ".wq", wq_);
    ps.add(prefix + ".bq", bq_);
    ps.add(prefix + ".wk", wk_);
    ps.add(prefix + ".bk", bk_);
    ps.add(prefix + ".wv", wv_);
    ps.add(prefix + ".bv", bv_);
    ps.add(prefix + ".wo", wo_);
    ps.add(prefix + ".bo", bo_);
    ps.add(prefix + ".w1", w1_);
    ps.add(prefix + ".b1", b1_);
    ps.add(prefix + ".w2", w2_);
    ps.add(prefix + ".b2", b2_);
  }

 private:
  VisionConfig cfg_;
  Tensor queries_base_, queries_extra_;
  Tensor wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
  Tensor w1_, b1_, w2_, b2_;
};

class VisionEncoder {
 public:
  VisionEncoder() = default;
  VisionEncoder(const VisionConfig& cfg, Rng& rng) : cfg_(cfg), vit_(cfg, rng), resampler_(cfg, rng) {}

  const VisionConfig& config() const { return cfg_; }
  const VisionTransformer& vit() const { return vit_; }
  const Resampler& resampler() const { return resampler_; }

  // Visual tokens [Q x output_dim] for one image of any size.
  Tensor encode(const ImageInput& img) const {
    img.validate();
    const auto d = tier_image(img.height, img.width, cfg_.patch_size);
    if (d.tier != Tier::Ultra) return encode_resized(resize_bilinear(img, d.height, d.width), d.tier);
    std::vector<Tensor> parts;
    for (const auto& tile : decompose_ultra(img)) {
      auto [h, w] = resize_to_long_edge(tile.height, tile.width, kHighLongEdge, cfg_.patch_size);
      parts.push_back(encode_resized(resize_bilinear(tile, h, w), Tier::High));
    }
    return concat_rows(parts);
  }

  Tensor encode_resized(const ImageInput& img, Tier tier) const {
    return resampler_.forward(vit_.forward(patchify(img, cfg_.patch_size)), tier);
  }

  void collect(ParamSet& ps) const {
    vit_.collect("vision.vit", ps);
    resampler_.collect("vision.resampler", ps);
  }

 private:
  VisionConfig cfg_;
  VisionTransformer vit_;
  Resampler resampler_;
};

// Binary PPM (P6, maxval 255).
inline std::string encode_ppm(const ImageInput& img) {
  img.validate();
  std::string out = "P6\n" + std::to_string(img.width) + ' ' + std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + img.pixels.size());
  for (double v : img.pixels)
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  return out;
}

inline void write_ppm(const ImageInput& img, const std::string& path) {
  const auto bytes = encode_ppm(img);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write image: " + path);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("failed writing image: " + path);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline ImageInput decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else break;
    }
    std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != "P6") throw FormatError("ppm: missing P6 magic");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw FormatError("ppm: malformed header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw FormatError("ppm: unsupported header");
  ++pos;  // single whitespace before raster
  if (bytes.size() < pos + w * h * 3) throw FormatError("ppm: truncated raster");
  ImageInput img = ImageInput::blank(h, w);
  for (std::size_t i = 0; i < w * h * 3; ++i)
    img.pixels[i] = static_cast<double>(static_cast<unsigned char>(bytes[pos + i])) / static_cast<double>(maxval);
  return img;
}

inline ImageInput read_ppm(const std::string& path) { return decode_ppm(read_file_bytes(path)); }

}  // namespace mmoe
