#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

namespace runstop::svg {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string text_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

// Plot canvas with a linear data-to-pixel map.
class Canvas {
 public:
  Canvas(int width, int height, double x0, double x1, double y0, double y1, int margin_left = 60)
      : w_(width), h_(height), ml_(margin_left), x0_(x0), x1_(x1), y0_(y0), y1_(y1) {
    if (x1_ <= x0_) x1_ = x0_ + 1;
    if (y1_ <= y0_) y1_ = y0_ + 1;
  }

  double px(double x) const { return ml_ + (x - x0_) / (x1_ - x0_) * (w_ - ml_ - mr_); }
  double py(double y) const { return h_ - mb_ - (y - y0_) / (y1_ - y0_) * (h_ - mt_ - mb_); }

  void line(double xa, double ya, double xb, double yb, const std::string& style) {
    body_ << "<line x1=\"" << num(px(xa)) << "\" y1=\"" << num(py(ya)) << "\" x2=\"" << num(px(xb))
          << "\" y2=\"" << num(py(yb)) << "\" style=\"" << style << "\"/>\n";
  }
  void rect(double xa, double ya, double xb, double yb, const std::string& style) {
    const double l = std::min(px(xa), px(xb)), r = std::max(px(xa), px(xb));
    const double t = std::min(py(ya), py(yb)), b = std::max(py(ya), py(yb));
    body_ << "<rect x=\"" << num(l) << "\" y=\"" << num(t) << "\" width=\"" << num(r - l)
          << "\" height=\"" << num(b - t) << "\" style=\"" << style << "\"/>\n";
  }
  void circle(double x, double y, double r, const std::string& style) {
    body_ << "<circle cx=\"" << num(px(x)) << "\" cy=\"" << num(py(y)) << "\" r=\"" << num(r)
          << "\" style=\"" << style << "\"/>\n";
  }
  void polygon(const std::vector<std::pair<double, double>>& pts, const std::string& style) {
    body_ << "<polygon points=\"";
    for (auto [x, y] : pts) body_ << num(px(x)) << ',' << num(py(y)) << ' ';
    body_ << "\" style=\"" << style << "\"/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& style) {
    body_ << "<polyline points=\"";
    for (auto [x, y] : pts) body_ << num(px(x)) << ',' << num(py(y)) << ' ';
    body_ << "\" style=\"fill:none;" << style << "\"/>\n";
  }
  void text_px(double x, double y, const std::string& s, const std::string& anchor = "start",
               int size = 11) {
    body_ << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" font-size=\"" << size
          << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\">" << text_escape(s)
          << "</text>\n";
  }
  void title(const std::string& s) { text_px(w_ / 2.0, 18, s, "middle", 14); }
  void x_axis(const std::string& label, int ticks = 5) {
    line(x0_, y0_, x1_, y0_, "stroke:black");
    for (int i = 0; i <= ticks; ++i) {
      const double x = x0_ + (x1_ - x0_) * i / ticks;
      text_px(px(x), h_ - mb_ + 15, num(x), "middle", 10);
    }
    text_px((ml_ + w_ - mr_) / 2.0, h_ - 8, label, "middle");
  }
  void y_axis(const std::string& label, int ticks = 5) {
    line(x0_, y0_, x0_, y1_, "stroke:black");
    for (int i = 0; i <= ticks; ++i) {
      const double y = y0_ + (y1_ - y0_) * i / ticks;
      text_px(ml_ - 4, py(y) + 3, num(y), "end", 10);
    }
    body_ << "<text transform=\"translate(12," << num(h_ / 2.0)
          << ") rotate(-90)\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"middle\">"
          << text_escape(label) << "</text>\n";
  }

  std::string str() const {
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_ << "\" height=\"" << h_
      << "\" viewBox=\"0 0 " << w_ << ' ' << h_ << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << body_.str() << "</svg>\n";
    return o.str();
  }

  int margin_left() const { return ml_; }

 private:
  int w_, h_, ml_, mr_ = 20, mt_ = 30, mb_ = 40;
  double x0_, x1_, y0_, y1_;
  std::ostringstream body_;
};

struct LoveRow {
  std::string label;
  double before, after;
};

// Standardized bias before and after matching with the ±0.2 band.
inline std::string love_plot(const std::vector<LoveRow>& rows, double band = 0.2) {
  double lim = band * 1.5;
  for (const auto& r : rows) {
    if (std::isfinite(r.before)) lim = std::max(lim, std::abs(r.before));
    if (std::isfinite(r.after)) lim = std::max(lim, std::abs(r.after));
  }
  lim *= 1.1;
  const int h = 60 + 22 * static_cast<int>(rows.size());
  Canvas c(640, h, -lim, lim, 0, static_cast<double>(rows.size()) + 0.5, 170);
  c.title("Standardized bias before and after matching");
  c.rect(-band, 0, band, rows.size() + 0.5, "fill:#eeeeee;stroke:none");
  c.line(0, 0, 0, rows.size() + 0.5, "stroke:#888888;stroke-dasharray:3,3");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double y = rows.size() - i;
    c.text_px(c.margin_left() - 6, c.py(y) + 4, rows[i].label, "end");
    if (std::isfinite(rows[i].before)) c.circle(rows[i].before, y, 4, "fill:none;stroke:#c0392b");
    if (std::isfinite(rows[i].after)) c.circle(rows[i].after, y, 4, "fill:#2c3e50");
  }
  c.x_axis("standardized bias (open: unmatched, filled: matched)");
  return c.str();
}

struct Series {
  std::string label;
  std::vector<double> values;
  std::string color;
};

// Overlaid density histograms with optional dashed mean lines.
inline std::string histogram(const std::string& title, const std::string& xlabel,
                             const std::vector<Series>& series, int bins = 30,
                             bool mean_lines = false) {
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& s : series)
    for (double v : s.values)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi <= lo) hi = lo + 1;
  const double bw = (hi - lo) / bins;
  std::vector<std::vector<double>> dens;
  double ymax = 0;
  for (const auto& s : series) {
    std::vector<double> d(bins, 0.0);
    for (double v : s.values)
      if (std::isfinite(v)) d[std::min(bins - 1, static_cast<int>((v - lo) / bw))] += 1;
    for (double& x : d) {
      x = s.values.empty() ? 0 : x / (s.values.size() * bw);
      ymax = std::max(ymax, x);
    }
    dens.push_back(std::move(d));
  }
  Canvas c(640, 360, lo, hi, 0, ymax * 1.1 + 1e-12);
  c.title(title);
  for (std::size_t k = 0; k < series.size(); ++k) {
    for (int b = 0; b < bins; ++b)
      c.rect(lo + b * bw, 0, lo + (b + 1) * bw, dens[k][b],
             "fill:" + series[k].color + ";fill-opacity:0.4;stroke:" + series[k].color);
    c.text_px(c.px(hi) - 4, 40 + 14.0 * k, series[k].label, "end");
    if (mean_lines && !series[k].values.empty()) {
      double m = 0;
      for (double v : series[k].values) m += v;
      m /= series[k].values.size();
      c.line(m, 0, m, ymax * 1.1, "stroke:" + series[k].color + ";stroke-dasharray:5,3;stroke-width:2");
    }
  }
  c.x_axis(xlabel);
  c.y_axis("density");
  return c.str();
}

struct Interval {
  std::string label;
  double estimate, lo, hi;
  bool highlight = false;
};

// Point estimates with interval whiskers, one row per label.
inline std::string forest_plot(const std::string& title, const std::string& xlabel,
                               const std::vector<Interval>& rows) {
  double a = 0, b = 0;
  for (const auto& r : rows) {
    if (std::isfinite(r.lo)) a = std::min(a, r.lo);
    if (std::isfinite(r.hi)) b = std::max(b, r.hi);
    a = std::min(a, r.estimate);
    b = std::max(b, r.estimate);
  }
  const double pad = 0.05 * (b - a + 1e-9);
  const int h = 60 + 18 * static_cast<int>(rows.size());
  Canvas c(640, h, a - pad, b + pad, 0, rows.size() + 0.5, 170);
  c.title(title);
  c.line(0, 0, 0, rows.size() + 0.5, "stroke:#888888;stroke-dasharray:3,3");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double y = rows.size() - i;
    const std::string col = rows[i].highlight ? "#c0392b" : "#2c3e50";
    c.text_px(c.margin_left() - 6, c.py(y) + 4, rows[i].label, "end");
    if (std::isfinite(rows[i].lo) && std::isfinite(rows[i].hi))
      c.line(rows[i].lo, y, rows[i].hi, y, "stroke:" + col);
    c.circle(rows[i].estimate, y, 3.5, "fill:" + col);
  }
  c.x_axis(xlabel);
  return c.str();
}

struct BandPoint {
  double gamma, pe_lo, pe_hi, ci_lo, ci_hi;
};

// Sensitivity bands: point-estimate band inside the confidence band.
inline std::string band_plot(const std::vector<BandPoint>& pts, double gamma_star) {
  if (pts.empty()) return Canvas(640, 360, 0, 1, 0, 1).str();
  double lo = 0, hi = 0;
  for (const auto& p : pts) {
    if (std::isfinite(p.ci_lo)) lo = std::min(lo, p.ci_lo);
    if (std::isfinite(p.ci_hi)) hi = std::max(hi, p.ci_hi);
  }
  Canvas c(640, 360, pts.front().gamma, pts.back().gamma, lo, hi + 1e-9);
  c.title("Sensitivity of the effect to hidden bias");
  std::vector<std::pair<double, double>> ci, pe;
  for (const auto& p : pts) ci.emplace_back(p.gamma, p.ci_hi), pe.emplace_back(p.gamma, p.pe_hi);
  for (auto it = pts.rbegin(); it != pts.rend(); ++it)
    ci.emplace_back(it->gamma, it->ci_lo), pe.emplace_back(it->gamma, it->pe_lo);
  c.polygon(ci, "fill:#aed6f1;stroke:none");
  c.polygon(pe, "fill:#2e86c1;stroke:none");
  c.line(pts.front().gamma, 0, pts.back().gamma, 0, "stroke:black;stroke-dasharray:4,3");
  if (std::isfinite(gamma_star))
    c.line(gamma_star, lo, gamma_star, hi, "stroke:#c0392b;stroke-dasharray:2,2");
  c.x_axis("Gamma");
  c.y_axis("effect");
  return c.str();
}

}  // namespace runstop::svg
