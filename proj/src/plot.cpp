#include "segfetch/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace segfetch::plot {

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 60;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
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

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void settle() {
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    }
  }
};

class Canvas {
 public:
  Canvas(const Axes& axes, Range x, Range y) : x_(x), y_(y) {
    out_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(kWidth) << "\" height=\""
         << num(kHeight) << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
         << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
         << text(kWidth / 2, 22, axes.title, "middle", 14)
         << text(kLeft + plot_w() / 2, kHeight - 15, axes.x_label, "middle")
         << "<text transform=\"translate(18," << num(kTop + plot_h() / 2)
         << ") rotate(-90)\" text-anchor=\"middle\">" << escape(axes.y_label) << "</text>\n"
         << "<rect x=\"" << num(kLeft) << "\" y=\"" << num(kTop) << "\" width=\"" << num(plot_w())
         << "\" height=\"" << num(plot_h()) << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double v = y_.lo + (y_.hi - y_.lo) * i / 4.0;
      out_ << text(kLeft - 6, py(v) + 4, num(v), "end");
    }
  }

  static double plot_w() { return kWidth - kLeft - kRight; }
  static double plot_h() { return kHeight - kTop - kBottom; }
  double px(double v) const { return kLeft + (v - x_.lo) / (x_.hi - x_.lo) * plot_w(); }
  double py(double v) const { return kTop + plot_h() - (v - y_.lo) / (y_.hi - y_.lo) * plot_h(); }

  static std::string text(double x, double y, const std::string& s, const char* anchor, int size = 12) {
    std::ostringstream o;
    o << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" text-anchor=\"" << anchor
      << "\" font-size=\"" << size << "\">" << escape(s) << "</text>\n";
    return o.str();
  }

  void legend(std::size_t i, const std::string& name) {
    const double y = kTop + 10 + 18 * static_cast<double>(i);
    out_ << "<rect x=\"" << num(kWidth - kRight + 10) << "\" y=\"" << num(y - 9) << "\" width=\"10\" height=\"10\" fill=\""
         << kPalette[i % 8] << "\"/>\n"
         << text(kWidth - kRight + 26, y, name, "start");
  }

  std::ostringstream& raw() { return out_; }
  std::string finish() {
    out_ << "</svg>\n";
    return out_.str();
  }

 private:
  Range x_, y_;
  std::ostringstream out_;
};

}  // namespace

std::string line_chart(const Axes& axes, const std::vector<Series>& series) {
  Range xr, yr;
  for (const auto& s : series) {
    for (double v : s.x) xr.add(v);
    for (double v : s.y) yr.add(v);
  }
  xr.settle();
  yr.add(0.0);
  yr.settle();
  Canvas c(axes, xr, yr);
  for (int i = 0; i <= 4; ++i) {
    const double v = xr.lo + (xr.hi - xr.lo) * i / 4.0;
    c.raw() << Canvas::text(c.px(v), kTop + Canvas::plot_h() + 16, num(v), "middle");
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    c.raw() << "<polyline fill=\"none\" stroke=\"" << kPalette[k % 8] << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) {
        c.raw() << num(c.px(s.x[i])) << ',' << num(c.py(s.y[i])) << ' ';
      }
    }
    c.raw() << "\"/>\n";
    c.legend(k, s.name);
  }
  return c.finish();
}

std::string bar_chart(const Axes& axes, const std::vector<std::string>& groups,
                      const std::vector<Bar>& bars) {
  Range xr{0.0, static_cast<double>(std::max<std::size_t>(bars.size(), 1))};
  Range yr;
  yr.add(0.0);
  for (const auto& b : bars) {
    for (double v : b.values) yr.add(v);
  }
  yr.settle();
  Canvas c(axes, xr, yr);
  const double cluster = Canvas::plot_w() / xr.hi;
  const double width = cluster * 0.8 / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double x0 = kLeft + cluster * static_cast<double>(i) + cluster * 0.1;
    for (std::size_t g = 0; g < bars[i].values.size() && g < groups.size(); ++g) {
      const double v = bars[i].values[g];
      if (!std::isfinite(v)) continue;
      const double top = c.py(std::max(v, 0.0));
      c.raw() << "<rect x=\"" << num(x0 + width * static_cast<double>(g)) << "\" y=\"" << num(top)
              << "\" width=\"" << num(width) << "\" height=\"" << num(c.py(0.0) - top) << "\" fill=\""
              << kPalette[g % 8] << "\"/>\n";
    }
    c.raw() << Canvas::text(x0 + cluster * 0.4, kTop + Canvas::plot_h() + 16, bars[i].label, "middle");
  }
  for (std::size_t g = 0; g < groups.size(); ++g) c.legend(g, groups[g]);
  return c.finish();
}

}  // namespace segfetch::plot
