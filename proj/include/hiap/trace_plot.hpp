// Gate-trace CSV parsing and SVG rendering: one heatmap panel per gate family
// (rows = layers, columns = snapshots) and a final-snapshot barcode.
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hiap/gating.hpp"
#include "hiap/trainer.hpp"

namespace hiap {

class TraceParseError : public FormatError {
 public:
  TraceParseError(const std::string& origin, std::size_t line, const std::string& why)
      : FormatError(origin + ":" + std::to_string(line) + ": " + why), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct TraceData {
  std::vector<std::size_t> steps;  // snapshot steps, ascending
  std::size_t layers = 0;
  std::vector<GateTraceRecord> records;

  /// cell[family][snapshot][layer] = mean probability (NaN when absent)
  std::map<GateFamily, std::vector<std::vector<double>>> cells;
  std::map<GateFamily, std::vector<std::vector<std::size_t>>> counts;
};

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename U>
bool parse_number(std::string_view s, U& out) {
  if constexpr (std::is_floating_point_v<U>) {
    // from_chars for double is available in libstdc++ 11
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size() && std::isfinite(out);
  } else {
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size() && !s.empty();
  }
}

inline bool parse_family(std::string_view s, GateFamily& f) {
  for (auto fam : kGateFamilies)
    if (s == family_name(fam)) {
      f = fam;
      return true;
    }
  return false;
}

}  // namespace detail

inline TraceData parse_trace(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  TraceData data;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!header_seen) {
      if (line != kTraceHeader) throw TraceParseError(origin, lineno, "expected header '" + std::string(kTraceHeader) + "'");
      header_seen = true;
      continue;
    }
    const auto f = detail::split_csv(line);
    if (f.size() != 7)
      throw TraceParseError(origin, lineno, "expected 7 fields, found " + std::to_string(f.size()));
    GateTraceRecord r;
    if (!detail::parse_number(f[0], r.step)) throw TraceParseError(origin, lineno, "bad step");
    if (!detail::parse_number(f[1], r.layer)) throw TraceParseError(origin, lineno, "bad layer");
    if (!detail::parse_family(f[2], r.family)) throw TraceParseError(origin, lineno, "unknown gate family '" + std::string(f[2]) + "'");
    if (f[3] != "-") {
      std::size_t start = 0;
      const std::string_view idx = f[3];
      while (true) {
        const auto pos = idx.find(':', start);
        std::size_t v = 0;
        if (!detail::parse_number(idx.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start), v))
          throw TraceParseError(origin, lineno, "bad index '" + std::string(idx) + "'");
        r.index.push_back(v);
        if (pos == std::string_view::npos) break;
        start = pos + 1;
      }
    }
    const std::size_t expect_idx = r.family == GateFamily::block ? 0 : r.family == GateFamily::dim ? 2 : 1;
    if (r.index.size() != expect_idx)
      throw TraceParseError(origin, lineno, "index '" + std::string(f[3]) + "' does not fit family " + family_name(r.family));
    if (!detail::parse_number(f[4], r.probability) || r.probability < 0 || r.probability > 1)
      throw TraceParseError(origin, lineno, "probability must be a number in [0, 1]");
    if (!detail::parse_number(f[5], r.tau)) throw TraceParseError(origin, lineno, "bad tau");
    if (!detail::parse_number(f[6], r.cost_fraction)) throw TraceParseError(origin, lineno, "bad cost_fraction");
    data.records.push_back(std::move(r));
  }
  if (!header_seen) throw TraceParseError(origin, std::max<std::size_t>(lineno, 1), "empty trace");
  if (data.records.empty()) throw TraceParseError(origin, lineno, "trace has no data rows");

  for (const auto& r : data.records) {
    data.steps.push_back(r.step);
    data.layers = std::max(data.layers, r.layer + 1);
  }
  std::sort(data.steps.begin(), data.steps.end());
  data.steps.erase(std::unique(data.steps.begin(), data.steps.end()), data.steps.end());
  for (auto fam : kGateFamilies) {
    data.cells[fam].assign(data.steps.size(), std::vector<double>(data.layers, 0.0));
    data.counts[fam].assign(data.steps.size(), std::vector<std::size_t>(data.layers, 0));
  }
  for (const auto& r : data.records) {
    const auto col = static_cast<std::size_t>(std::lower_bound(data.steps.begin(), data.steps.end(), r.step) - data.steps.begin());
    data.cells[r.family][col][r.layer] += r.probability;
    ++data.counts[r.family][col][r.layer];
  }
  for (auto fam : kGateFamilies)
    for (std::size_t c = 0; c < data.steps.size(); ++c)
      for (std::size_t l = 0; l < data.layers; ++l) {
        const auto n = data.counts[fam][c][l];
        data.cells[fam][c][l] = n ? data.cells[fam][c][l] / static_cast<double>(n) : std::nan("");
      }
  return data;
}

/// White at 0, dark blue at 1.
inline std::string shade(double v) {
  v = std::clamp(v, 0.0, 1.0);
  auto mix = [&](int lo, int hi) { return static_cast<int>(std::lround(lo + (hi - lo) * v)); };
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", mix(255, 8), mix(255, 48), mix(255, 107));
  return buf;
}

inline std::string render_trace_svg(const TraceData& data) {
  constexpr int cell_w = 14, cell_h = 14, margin = 40, gap = 30, label_w = 60;
  const int cols = static_cast<int>(data.steps.size()), rows = static_cast<int>(data.layers);
  const int panel_w = cols * cell_w;
  const int panels_h = rows * cell_h;

  // final-snapshot barcode: every gate hardened at 0.5, in trace order per layer
  const std::size_t last = data.steps.back();
  std::vector<std::vector<const GateTraceRecord*>> bars(data.layers);
  for (const auto& r : data.records)
    if (r.step == last) bars[r.layer].push_back(&r);
  std::size_t bar_len = 0;
  for (const auto& b : bars) bar_len = std::max(bar_len, b.size());
  constexpr int bar_h = 10;
  const double bar_span = 4.0 * (panel_w + gap) - gap;
  const double bar_cell = bar_len ? std::max(1.0, bar_span / static_cast<double>(bar_len)) : 1.0;
  const int width = std::max(margin * 2 + label_w + 4 * (panel_w + gap),
                             margin * 2 + label_w + static_cast<int>(std::ceil(bar_cell * static_cast<double>(bar_len))));
  const int bar_top = margin + 20 + panels_h + gap + 20;
  const int height = bar_top + rows * bar_h + margin;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\" viewBox=\"0 0 "
     << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
  int x0 = margin + label_w;
  for (auto fam : kGateFamilies) {
    os << "<g class=\"panel\" data-family=\"" << family_name(fam) << "\">\n";
    os << "<text x=\"" << x0 << "\" y=\"" << margin + 12 << "\">" << family_name(fam) << "</text>\n";
    const auto& cells = data.cells.at(fam);
    for (int c = 0; c < cols; ++c)
      for (int l = 0; l < rows; ++l) {
        const double v = cells[static_cast<std::size_t>(c)][static_cast<std::size_t>(l)];
        const bool absent = std::isnan(v);
        char val[32];
        std::snprintf(val, sizeof(val), "%.4f", absent ? 0.0 : v);
        os << "<rect class=\"cell\" data-family=\"" << family_name(fam) << "\" data-layer=\"" << l << "\" data-col=\"" << c
           << "\" data-step=\"" << data.steps[static_cast<std::size_t>(c)] << "\" data-value=\"" << (absent ? "nan" : val)
           << "\" x=\"" << x0 + c * cell_w << "\" y=\"" << margin + 20 + l * cell_h << "\" width=\"" << cell_w
           << "\" height=\"" << cell_h << "\" fill=\"" << (absent ? "#dddddd" : shade(v)) << "\"/>\n";
      }
    os << "</g>\n";
    x0 += panel_w + gap;
  }
  for (int l = 0; l < rows; ++l)
    os << "<text x=\"" << margin << "\" y=\"" << margin + 20 + l * cell_h + 11 << "\">layer " << l + 1 << "</text>\n";

  os << "<g class=\"barcode\" data-step=\"" << last << "\">\n";
  os << "<text x=\"" << margin + label_w << "\" y=\"" << bar_top - 6 << "\">final architecture (step " << last
     << ")</text>\n";
  for (std::size_t l = 0; l < bars.size(); ++l) {
    for (std::size_t i = 0; i < bars[l].size(); ++i) {
      const bool on = bars[l][i]->probability > 0.5;
      char xbuf[32], wbuf[32];
      std::snprintf(xbuf, sizeof(xbuf), "%.2f", margin + label_w + bar_cell * static_cast<double>(i));
      std::snprintf(wbuf, sizeof(wbuf), "%.2f", bar_cell);
      os << "<rect class=\"bar\" data-layer=\"" << l << "\" data-family=\"" << family_name(bars[l][i]->family)
         << "\" x=\"" << xbuf << "\" y=\"" << bar_top + static_cast<int>(l) * bar_h << "\" width=\"" << wbuf
         << "\" height=\"" << bar_h - 1 << "\" fill=\"" << (on ? "#000000" : "#ffffff") << "\"/>\n";
    }
  }
  os << "</g>\n</svg>\n";
  return os.str();
}

}  // namespace hiap
