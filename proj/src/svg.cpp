#include "muonseg/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "muonseg/error.hpp"

namespace muonseg::svg {
namespace {

constexpr double kWidth = 640, kHeight = 400, kLeft = 70, kRight = 160, kTop = 40, kBottom = 50;

const std::vector<std::string> kSeriesColors{"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                             "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string header(double w, double h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) +
         "\" viewBox=\"0 0 " + num(w) + " " + num(h) +
         "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" "
         "fill=\"white\"/>\n";
}

std::string text(double x, double y, const std::string& s, const char* anchor = "start",
                 int size = 12) {
  return "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" text-anchor=\"" + anchor +
         "\" font-size=\"" + std::to_string(size) + "\">" + escape(s) + "</text>\n";
}

struct Range {
  double lo, hi;
  double map(double v, double a, double b) const {
    return hi == lo ? (a + b) / 2 : a + (v - lo) / (hi - lo) * (b - a);
  }
};

std::string axes(const Range& xr, const Range& yr, const std::string& title, const std::string& xl,
                 const std::string& yl, bool x_ticks) {
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  std::string s = text(kWidth / 2 - kRight / 2 + kLeft / 2, 22, title, "middle", 14);
  s += "<line x1=\"" + num(x0) + "\" y1=\"" + num(y0) + "\" x2=\"" + num(x1) + "\" y2=\"" + num(y0) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(x0) + "\" y1=\"" + num(y0) + "\" x2=\"" + num(x0) + "\" y2=\"" + num(y1) +
       "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = yr.lo + (yr.hi - yr.lo) * i / 4.0;
    const double y = yr.map(v, y0, y1);
    s += "<line x1=\"" + num(x0 - 4) + "\" y1=\"" + num(y) + "\" x2=\"" + num(x1) + "\" y2=\"" +
         num(y) + "\" stroke=\"#ddd\"/>\n";
    s += text(x0 - 6, y + 4, tick(v), "end");
    if (x_ticks) {
      const double xv = xr.lo + (xr.hi - xr.lo) * i / 4.0;
      s += text(xr.map(xv, x0, x1), y0 + 16, tick(xv), "middle");
    }
  }
  s += text((x0 + x1) / 2, kHeight - 12, xl, "middle");
  s += "<text transform=\"translate(16," + num((y0 + y1) / 2) +
       ") rotate(-90)\" text-anchor=\"middle\">" + escape(yl) + "</text>\n";
  return s;
}

std::string legend(const std::vector<std::string>& names) {
  std::string s;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double y = kTop + 10 + 18.0 * static_cast<double>(i);
    s += "<rect x=\"" + num(kWidth - kRight + 12) + "\" y=\"" + num(y - 9) +
         "\" width=\"10\" height=\"10\" fill=\"" + kSeriesColors[i % kSeriesColors.size()] + "\"/>\n";
    s += text(kWidth - kRight + 28, y, names[i]);
  }
  return s;
}

}  // namespace

std::string escape(const std::string& in) {
  std::string out;
  for (char c : in) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string line_chart(const std::string& title, const std::string& x_label,
                       const std::string& y_label, const std::vector<Series>& series) {
  Range xr{INFINITY, -INFINITY}, yr{INFINITY, -INFINITY};
  for (const Series& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      xr.lo = std::min(xr.lo, s.x[i]);
      xr.hi = std::max(xr.hi, s.x[i]);
      yr.lo = std::min(yr.lo, s.y[i]);
      yr.hi = std::max(yr.hi, s.y[i]);
    }
  }
  if (!std::isfinite(xr.lo)) xr = {0, 1};
  if (!std::isfinite(yr.lo)) yr = {0, 1};
  yr.lo = std::min(yr.lo, 0.0);
  std::string out = header(kWidth, kHeight) + axes(xr, yr, title, x_label, y_label, true);
  std::vector<std::string> names;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Series& s = series[k];
    names.push_back(s.name);
    std::string pts;
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      pts += num(xr.map(s.x[i], kLeft, kWidth - kRight)) + "," +
             num(yr.map(s.y[i], kHeight - kBottom, kTop)) + " ";
    }
    out += "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" +
           kSeriesColors[k % kSeriesColors.size()] + "\" points=\"" + pts + "\"/>\n";
  }
  return out + legend(names) + "</svg>\n";
}

std::string grouped_bar_chart(const std::string& title, const std::string& y_label,
                              const std::vector<std::string>& series_names,
                              const std::vector<BarGroup>& groups) {
  Range yr{0.0, 0.0};
  for (const BarGroup& g : groups) {
    for (double v : g.values) {
      if (std::isfinite(v)) yr.hi = std::max(yr.hi, v);
    }
  }
  if (yr.hi <= 0.0) yr.hi = 1.0;
  std::string out = header(kWidth, kHeight) + axes({0, 1}, yr, title, "", y_label, false);
  const double plot_w = kWidth - kRight - kLeft;
  const double group_w = groups.empty() ? plot_w : plot_w / static_cast<double>(groups.size());
  const double n = std::max<double>(1.0, static_cast<double>(series_names.size()));
  const double bar_w = group_w * 0.8 / n;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = kLeft + group_w * static_cast<double>(g) + group_w * 0.1;
    for (std::size_t k = 0; k < groups[g].values.size(); ++k) {
      const double v = std::isfinite(groups[g].values[k]) ? groups[g].values[k] : 0.0;
      const double y = yr.map(v, kHeight - kBottom, kTop);
      out += "<rect x=\"" + num(gx + bar_w * static_cast<double>(k)) + "\" y=\"" + num(y) +
             "\" width=\"" + num(bar_w) + "\" height=\"" + num(kHeight - kBottom - y) + "\" fill=\"" +
             kSeriesColors[k % kSeriesColors.size()] + "\"><title>" + escape(tick(v)) +
             "</title></rect>\n";
    }
    out += text(gx + group_w * 0.4, kHeight - kBottom + 16, groups[g].label, "middle");
  }
  return out + legend(series_names) + "</svg>\n";
}

std::string panels(const std::vector<Panel>& ps, const std::vector<std::string>& palette,
                   const std::vector<std::string>& legend_names) {
  constexpr double cell = 12, gap = 30, top = 40;
  double width = gap;
  double height = 0;
  for (const Panel& p : ps) {
    width += p.width * cell + gap;
    height = std::max(height, p.height * cell);
  }
  const double legend_h = 20.0 * static_cast<double>((legend_names.size() + 5) / 6);
  std::string out = header(width, top + height + 20 + legend_h);
  double x0 = gap;
  for (const Panel& p : ps) {
    out += text(x0 + p.width * cell / 2, 24, p.title, "middle", 14);
    out += "<rect x=\"" + num(x0) + "\" y=\"" + num(top) + "\" width=\"" + num(p.width * cell) +
           "\" height=\"" + num(p.height * cell) + "\" fill=\"none\" stroke=\"#999\"/>\n";
    for (int y = 0; y < p.height; ++y) {
      for (int x = 0; x < p.width; ++x) {
        const int c = p.cells[static_cast<std::size_t>(y) * p.width + x];
        if (c < 0) continue;
        // Image rows run top-down, grid y runs bottom-up.
        out += "<rect class=\"c" + std::to_string(c) + "\" x=\"" + num(x0 + x * cell) + "\" y=\"" +
               num(top + (p.height - 1 - y) * cell) + "\" width=\"" + num(cell) + "\" height=\"" +
               num(cell) + "\" fill=\"" + palette[static_cast<std::size_t>(c)] + "\"/>\n";
      }
    }
    x0 += p.width * cell + gap;
  }
  for (std::size_t i = 0; i < legend_names.size(); ++i) {
    const double lx = gap + 110.0 * static_cast<double>(i % 6);
    const double ly = top + height + 20 + 20.0 * static_cast<double>(i / 6);
    out += "<rect x=\"" + num(lx) + "\" y=\"" + num(ly - 10) + "\" width=\"10\" height=\"10\" fill=\"" +
           palette[i] + "\"/>\n";
    out += text(lx + 14, ly, legend_names[i]);
  }
  return out + "</svg>\n";
}

const std::vector<std::string>& class_palette() {
  static const std::vector<std::string> palette{"#d9d9d9", "#ff9900", "#e41a1c", "#984ea3",
                                                "#ffd700", "#4d4d4d", "#000000"};
  return palette;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("cannot open " + path.string() + " for writing");
  out << content;
  if (!out) throw RuntimeError("failed writing " + path.string());
}

}  // namespace muonseg::svg
