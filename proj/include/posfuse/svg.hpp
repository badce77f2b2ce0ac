#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

namespace posfuse::svg {

inline std::string fmt(double v, int precision = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline constexpr const char* kPalette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52",
                                           "#8172b3", "#937860"};

struct Frame {
  double width = 640, height = 400;
  double left = 70, right = 20, top = 50, bottom = 70;
  double plot_w() const { return width - left - right; }
  double plot_h() const { return height - top - bottom; }
};

// Value range padded to include zero and a 10% margin.
inline std::pair<double, double> axis_range(const std::vector<double>& vals) {
  double lo = 0.0, hi = 0.0;
  for (double v : vals) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi - lo < 1e-12) hi = lo + 1.0;
  const double pad = 0.1 * (hi - lo);
  return {lo < 0 ? lo - pad : 0.0, hi > 0 ? hi + pad : 0.0};
}

class Document {
 public:
  explicit Document(Frame f, const std::string& title) : f_(f) {
    out_ = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
           "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
           fmt(f.width, 0) + "\" height=\"" + fmt(f.height, 0) + "\" viewBox=\"0 0 " +
           fmt(f.width, 0) + " " + fmt(f.height, 0) + "\">\n" +
           "<rect x=\"0\" y=\"0\" width=\"" + fmt(f.width, 0) + "\" height=\"" +
           fmt(f.height, 0) + "\" fill=\"white\"/>\n";
    text(f.width / 2, 28, title, "middle", 16);
  }

  void text(double x, double y, const std::string& s, const char* anchor = "start",
            int size = 12) {
    out_ += "<text x=\"" + fmt(x) + "\" y=\"" + fmt(y) + "\" font-family=\"sans-serif\" font-size=\"" +
            std::to_string(size) + "\" text-anchor=\"" + anchor + "\">" + escape(s) + "</text>\n";
  }

  void line(double x1, double y1, double x2, double y2, const std::string& cls,
            const char* stroke = "black") {
    out_ += "<line class=\"" + cls + "\" x1=\"" + fmt(x1) + "\" y1=\"" + fmt(y1) + "\" x2=\"" +
            fmt(x2) + "\" y2=\"" + fmt(y2) + "\" stroke=\"" + stroke + "\"/>\n";
  }

  void bar(double x, double y, double w, double h, const char* fill, const std::string& tip) {
    out_ += "<rect class=\"bar\" x=\"" + fmt(x) + "\" y=\"" + fmt(y) + "\" width=\"" + fmt(w) +
            "\" height=\"" + fmt(h) + "\" fill=\"" + fill + "\"><title>" + escape(tip) +
            "</title></rect>\n";
  }

  std::string finish() { return out_ + "</svg>\n"; }

 private:
  Frame f_;
  std::string out_;
};

// Y axis with ticks; returns a value -> pixel mapping.
template <typename Doc>
auto draw_axis(Doc& doc, const Frame& f, double lo, double hi, const std::string& ylabel,
               int precision) {
  auto y_of = [=](double v) { return f.top + (hi - v) / (hi - lo) * f.plot_h(); };
  doc.line(f.left, f.top, f.left, f.top + f.plot_h(), "axis");
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0;
    doc.line(f.left - 4, y_of(v), f.left, y_of(v), "tick");
    doc.text(f.left - 6, y_of(v) + 4, fmt(v, precision), "end", 10);
  }
  doc.text(16, f.top - 12, ylabel, "start", 11);
  return y_of;
}

// One bar per label; a zero line separates positive and negative values.
inline std::string bar_chart(const std::string& title, const std::vector<std::string>& labels,
                             const std::vector<double>& values, const std::string& ylabel,
                             int precision = 3) {
  Frame f;
  Document doc(f, title);
  const auto [lo, hi] = axis_range(values);
  auto y_of = draw_axis(doc, f, lo, hi, ylabel, precision);
  const double zero = y_of(0.0);
  const double slot = f.plot_w() / std::max<std::size_t>(1, values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x = f.left + slot * i + slot * 0.15;
    const double y = y_of(values[i]);
    doc.bar(x, std::min(y, zero), slot * 0.7, std::abs(zero - y), kPalette[0],
            labels[i] + ": " + fmt(values[i], 4));
    doc.text(x + slot * 0.35, f.top + f.plot_h() + 18, labels[i], "middle", 11);
  }
  doc.line(f.left, zero, f.left + f.plot_w(), zero, "zero");
  return doc.finish();
}

// groups x series matrix of values drawn as clustered bars with a legend.
inline std::string grouped_bar_chart(const std::string& title,
                                     const std::vector<std::string>& groups,
                                     const std::vector<std::string>& series,
                                     const std::vector<std::vector<double>>& values,
                                     const std::string& ylabel, int precision = 3) {
  Frame f;
  f.right = 140;
  Document doc(f, title);
  std::vector<double> flat;
  for (const auto& row : values) flat.insert(flat.end(), row.begin(), row.end());
  const auto [lo, hi] = axis_range(flat);
  auto y_of = draw_axis(doc, f, lo, hi, ylabel, precision);
  const double zero = y_of(0.0);
  const double slot = f.plot_w() / std::max<std::size_t>(1, groups.size());
  const double bw = slot * 0.8 / std::max<std::size_t>(1, series.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = values[g][s];
      if (std::isnan(v)) continue;
      const double x = f.left + slot * g + slot * 0.1 + bw * s;
      const double y = y_of(v);
      doc.bar(x, std::min(y, zero), bw, std::abs(zero - y), kPalette[s % 6],
              groups[g] + " / " + series[s] + ": " + fmt(v, 4));
    }
    doc.text(f.left + slot * (g + 0.5), f.top + f.plot_h() + 18, groups[g], "middle", 11);
  }
  doc.line(f.left, zero, f.left + f.plot_w(), zero, "zero");
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double y = f.top + 16.0 * s;
    doc.bar(f.width - f.right + 12, y, 10, 10, kPalette[s % 6], series[s]);
    doc.text(f.width - f.right + 28, y + 9, series[s], "start", 11);
  }
  return doc.finish();
}

}  // namespace posfuse::svg
