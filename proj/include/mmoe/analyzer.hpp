#pragma once

// Expert modality-specialization statistics from routing records or traces,
// with CSV and SVG heatmap export.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmoe/binary_io.hpp"
#include "mmoe/moe.hpp"

namespace mmoe {

inline constexpr double kDefaultSpecializationCap = 50.0;

inline const std::vector<std::string>& specialization_domains() {
  static const std::vector<std::string> d = {"natural-image", "video", "pdf-like"};
  return d;
}

// Top-k assignment counts per (layer, expert), split by modality. Shared
// experts never appear: they are not routed.
class ActivationCounter {
 public:
  ActivationCounter() = default;
  ActivationCounter(std::size_t n_layers, std::size_t n_experts, std::string domain = "natural-image")
      : n_layers_(n_layers), n_experts_(n_experts), domain_(std::move(domain)),
        visual_(n_layers * n_experts, 0), text_(n_layers * n_experts, 0) {}

  std::size_t n_layers() const { return n_layers_; }
  std::size_t n_experts() const { return n_experts_; }
  const std::string& domain() const { return domain_; }

  void add(std::size_t layer, std::size_t expert, Modality m, std::uint64_t n = 1) {
    if (layer >= n_layers_ || expert >= n_experts_)
      throw std::out_of_range("activation counter: (layer " + std::to_string(layer) + ", expert " +
                              std::to_string(expert) + ") outside " + std::to_string(n_layers_) + "x" +
                              std::to_string(n_experts_));
    (m == Modality::Visual ? visual_ : text_)[layer * n_experts_ + expert] += n;
  }

  void record(const RoutingRecord& rec) {
    if (rec.layer_index >= n_layers_) throw std::out_of_range("activation counter: layer out of range");
    for (const auto& tok : rec.tokens)
      for (auto e : tok.selected)
        if (e >= n_experts_) throw std::out_of_range("activation counter: expert out of range");
    for (const auto& tok : rec.tokens)
      for (auto e : tok.selected) add(rec.layer_index, e, tok.modality);
  }

  void record(const TraceEntry& entry) {
    for (auto e : entry.experts)
      if (entry.layer >= n_layers_ || e >= n_experts_) throw std::out_of_range("activation counter: trace entry out of range");
    for (auto e : entry.experts) add(entry.layer, e, entry.modality);
  }

  void merge(const ActivationCounter& other) {
    if (other.n_layers_ != n_layers_ || other.n_experts_ != n_experts_ || other.domain_ != domain_)
      throw std::invalid_argument("activation counter: merging counters of different shape or domain");
    for (std::size_t i = 0; i < visual_.size(); ++i) {
      visual_[i] += other.visual_[i];
      text_[i] += other.text_[i];
    }
  }

  std::uint64_t visual(std::size_t layer, std::size_t expert) const { return visual_.at(layer * n_experts_ + expert); }
  std::uint64_t text(std::size_t layer, std::size_t expert) const { return text_.at(layer * n_experts_ + expert); }

  std::uint64_t visual_total(std::size_t layer) const { return total(visual_, layer); }
  std::uint64_t text_total(std::size_t layer) const { return total(text_, layer); }

  bool operator==(const ActivationCounter&) const = default;

 private:
  std::uint64_t total(const std::vector<std::uint64_t>& v, std::size_t layer) const {
    std::uint64_t s = 0;
    for (std::size_t e = 0; e < n_experts_; ++e) s += v.at(layer * n_experts_ + e);
    return s;
  }

  std::size_t n_layers_ = 0;
  std::size_t n_experts_ = 0;
  std::string domain_;
  std::vector<std::uint64_t> visual_;
  std::vector<std::uint64_t> text_;
};

inline void record_routing(ActivationCounter& counter, const RoutingRecord& record) { counter.record(record); }

// Counter from a trace file's entries. The layer count comes from the trace
// unless given.
inline ActivationCounter replay_trace(const Trace& trace, const std::string& domain = "natural-image",
                                      std::size_t n_layers = 0) {
  if (n_layers == 0)
    for (const auto& e : trace.entries) n_layers = std::max<std::size_t>(n_layers, e.layer + 1);
  ActivationCounter c(n_layers, trace.n_routed, domain);
  for (const auto& e : trace.entries) c.record(e);
  return c;
}

struct SpecializationCell {
  std::size_t layer = 0;
  std::size_t expert = 0;
  std::string domain;
  double r_v = 0;
  double r_t = 0;
  double specialization = 0;
  bool operator==(const SpecializationCell&) const = default;
};

struct FlaggedLayer {
  std::string domain;
  std::size_t layer = 0;
  std::string reason;
  bool operator==(const FlaggedLayer&) const = default;
};

struct SpecializationMatrix {
  double cap = kDefaultSpecializationCap;
  std::vector<SpecializationCell> cells;  // ordered by domain, layer, expert
  std::vector<FlaggedLayer> flagged;      // layers left out for lack of tokens

  const SpecializationCell& at(const std::string& domain, std::size_t layer, std::size_t expert) const {
    for (const auto& c : cells)
      if (c.domain == domain && c.layer == layer && c.expert == expert) return c;
    throw std::out_of_range("specialization: no cell for " + domain + " layer " + std::to_string(layer) +
                            " expert " + std::to_string(expert));
  }

  std::vector<std::string> domains() const {
    std::vector<std::string> d;
    for (const auto& c : cells)
      if (std::find(d.begin(), d.end(), c.domain) == d.end()) d.push_back(c.domain);
    return d;
  }

  bool operator==(const SpecializationMatrix&) const = default;
};

inline double specialization_ratio(double r_v, double r_t, double cap) {
  if (r_t == 0) return r_v > 0 ? cap : 0.0;
  return std::min(r_v / r_t, cap);
}

inline void append_specialization(SpecializationMatrix& m, const ActivationCounter& counter) {
  for (std::size_t l = 0; l < counter.n_layers(); ++l) {
    const auto vt = counter.visual_total(l), tt = counter.text_total(l);
    if (vt == 0 || tt == 0) {
      m.flagged.push_back({counter.domain(), l, vt == 0 ? "no visual tokens" : "no text tokens"});
      continue;
    }
    for (std::size_t e = 0; e < counter.n_experts(); ++e) {
      SpecializationCell c;
      c.layer = l;
      c.expert = e;
      c.domain = counter.domain();
      c.r_v = static_cast<double>(counter.visual(l, e)) / static_cast<double>(vt);
      c.r_t = static_cast<double>(counter.text(l, e)) / static_cast<double>(tt);
      c.specialization = specialization_ratio(c.r_v, c.r_t, m.cap);
      m.cells.push_back(std::move(c));
    }
  }
}

inline SpecializationMatrix compute_specialization(const ActivationCounter& counter,
                                                   double cap = kDefaultSpecializationCap) {
  if (!(cap > 0)) throw std::invalid_argument("specialization cap must be positive");
  SpecializationMatrix m;
  m.cap = cap;
  append_specialization(m, counter);
  return m;
}

inline SpecializationMatrix compute_specialization(const std::vector<ActivationCounter>& per_domain,
                                                   double cap = kDefaultSpecializationCap) {
  if (!(cap > 0)) throw std::invalid_argument("specialization cap must be positive");
  SpecializationMatrix m;
  m.cap = cap;
  for (const auto& c : per_domain) append_specialization(m, c);
  return m;
}

// ---------------------------------------------------------------------------
// Export.

namespace detail {

inline std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fixed(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
  if (!os) throw std::runtime_error("failed writing " + path);
}

}  // namespace detail

inline std::string specialization_csv(const SpecializationMatrix& m) {
  std::string out = "layer,expert,domain,R_v,R_t,specialization\n";
  for (const auto& c : m.cells)
    out += std::to_string(c.layer) + "," + std::to_string(c.expert) + "," + c.domain + "," + detail::exact(c.r_v) +
           "," + detail::exact(c.r_t) + "," + detail::exact(c.specialization) + "\n";
  return out;
}

inline SpecializationMatrix parse_specialization_csv(const std::string& text,
                                                     double cap = kDefaultSpecializationCap) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "layer,expert,domain,R_v,R_t,specialization")
    throw FormatError("specialization CSV: unexpected header");
  SpecializationMatrix m;
  m.cap = cap;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (f.size() != 6) throw FormatError("specialization CSV: line " + std::to_string(lineno) + " has " +
                                         std::to_string(f.size()) + " fields");
    try {
      m.cells.push_back({std::stoul(f[0]), std::stoul(f[1]), f[2], std::stod(f[3]), std::stod(f[4]), std::stod(f[5])});
    } catch (const std::logic_error&) {
      throw FormatError("specialization CSV: malformed number on line " + std::to_string(lineno));
    }
  }
  return m;
}

// Linear white -> dark red ramp over [0, cap].
inline std::string heat_color(double value, double cap) {
  const double t = std::clamp(value / cap, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(255.0 - t * (255.0 - 140.0)));
  const int g = static_cast<int>(std::lround(255.0 * (1.0 - t)));
  const int b = static_cast<int>(std::lround(255.0 * (1.0 - t)));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

inline std::string specialization_svg(const SpecializationMatrix& m) {
  if (m.cells.empty() && m.flagged.empty()) throw std::invalid_argument("specialization SVG: empty matrix");
  constexpr int kCell = 18, kCols = 8, kLabel = 150, kGap = 14;
  std::size_t max_expert = 0;
  for (const auto& c : m.cells) max_expert = std::max(max_expert, c.expert + 1);
  const int cols = static_cast<int>(std::min<std::size_t>(kCols, std::max<std::size_t>(1, max_expert)));
  const int rows_per_layer = static_cast<int>((std::max<std::size_t>(1, max_expert) + kCols - 1) / kCols);

  // (domain, layer) blocks in cell order, then flagged ones.
  std::vector<std::pair<std::string, std::size_t>> blocks;
  for (const auto& c : m.cells)
    if (blocks.empty() || blocks.back() != std::pair{c.domain, c.layer}) blocks.emplace_back(c.domain, c.layer);

  std::ostringstream body;
  int y = 40;
  for (const auto& [domain, layer] : blocks) {
    body << "<text x=\"4\" y=\"" << y + 13 << "\" font-size=\"12\">" << domain << " layer " << layer << "</text>\n";
    for (const auto& c : m.cells) {
      if (c.domain != domain || c.layer != layer) continue;
      const int cx = kLabel + static_cast<int>(c.expert % kCols) * kCell;
      const int cy = y + static_cast<int>(c.expert / kCols) * kCell;
      body << "<rect x=\"" << cx << "\" y=\"" << cy << "\" width=\"" << kCell << "\" height=\"" << kCell
           << "\" fill=\"" << heat_color(c.specialization, m.cap) << "\" stroke=\"#999\" stroke-width=\"0.5\">"
           << "<title>expert " << c.expert << ": " << detail::fixed(c.specialization, 3) << "</title></rect>\n";
    }
    y += rows_per_layer * kCell + kGap;
  }
  for (const auto& f : m.flagged) {
    body << "<text x=\"4\" y=\"" << y + 13 << "\" font-size=\"12\" fill=\"#888\">" << f.domain << " layer "
         << f.layer << ": not reported (" << f.reason << ")</text>\n";
    y += kCell + kGap;
  }
  const int legend_y = y + 4, legend_w = 200;
  const int width = std::max(kLabel + cols * kCell, kLabel + legend_w) + 20;
  const int height = legend_y + 40;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"monospace\">\n";
  os << "<text x=\"4\" y=\"18\" font-size=\"14\">visual specialization R_v/R_t (capped at "
     << detail::fixed(m.cap, 0) << ")</text>\n";
  os << body.str();
  os << "<defs><linearGradient id=\"ramp\"><stop offset=\"0\" stop-color=\"" << heat_color(0, m.cap)
     << "\"/><stop offset=\"1\" stop-color=\"" << heat_color(m.cap, m.cap) << "\"/></linearGradient></defs>\n";
  os << "<rect x=\"" << kLabel << "\" y=\"" << legend_y << "\" width=\"" << legend_w
     << "\" height=\"12\" fill=\"url(#ramp)\" stroke=\"#999\"/>\n";
  os << "<text x=\"4\" y=\"" << legend_y + 11 << "\" font-size=\"12\">legend</text>\n";
  os << "<text x=\"" << kLabel << "\" y=\"" << legend_y + 28 << "\" font-size=\"11\">0</text>\n";
  os << "<text x=\"" << kLabel + legend_w - 16 << "\" y=\"" << legend_y + 28 << "\" font-size=\"11\">"
     << detail::fixed(m.cap, 0) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

// Writes <prefix>.csv and <prefix>.svg.
inline void export_heatmap(const SpecializationMatrix& m, const std::string& prefix) {
  if (m.cells.empty() && m.flagged.empty()) throw std::invalid_argument("export_heatmap: empty matrix");
  detail::write_text(prefix + ".csv", specialization_csv(m));
  detail::write_text(prefix + ".svg", specialization_svg(m));
}

}  // namespace mmoe
