#include "klflow/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace klflow {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Axis {
  bool log = false;
  double lo = 0.0;
  double hi = 1.0;
  double px0 = 0.0;
  double px1 = 1.0;

  bool usable(double v) const { return std::isfinite(v) && (!log || v > 0.0); }
  double t(double v) const { return log ? std::log10(v) : v; }
  double map(double v) const { return px0 + (t(v) - lo) / (hi - lo) * (px1 - px0); }

  void fit(double a, double b) {
    lo = a;
    hi = b;
    if (!(hi > lo)) {
      const double pad = std::max(std::abs(lo) * 0.05, 0.5);
      lo -= pad;
      hi += pad;
    } else if (!log) {
      const double pad = 0.04 * (hi - lo);
      lo -= pad;
      hi += pad;
    }
  }

  // Tick positions in data units.
  std::vector<double> ticks() const {
    std::vector<double> out;
    if (log) {
      for (double e = std::floor(lo); e <= std::ceil(hi); e += 1.0) {
        if (e >= lo - 1e-9 && e <= hi + 1e-9) out.push_back(std::pow(10.0, e));
      }
      if (out.size() >= 2) return out;
      out.clear();
      for (int i = 0; i <= 4; ++i) out.push_back(std::pow(10.0, lo + (hi - lo) * i / 4.0));
      return out;
    }
    const double raw = (hi - lo) / 5.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double m : {1.0, 2.0, 5.0, 10.0}) {
      if (m * mag >= raw) {
        step = m * mag;
        break;
      }
    }
    for (double v = std::ceil(lo / step) * step; v <= hi + 1e-12; v += step) {
      out.push_back(std::abs(v) < 1e-12 * step ? 0.0 : v);
    }
    return out;
  }
};

}  // namespace

std::string render_svg(const ChartSpec& spec) {
  const double left = 70, right = 170, top = 40, bottom = 55;
  Axis ax{spec.log_x, 0, 1, left, spec.width - right};
  Axis ay{spec.log_y, 0, 1, spec.height - bottom, top};

  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : spec.series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!ax.usable(s.x[i]) || !ay.usable(s.y[i])) continue;
      x0 = std::min(x0, ax.t(s.x[i]));
      x1 = std::max(x1, ax.t(s.x[i]));
      double lo = s.y[i], hi = s.y[i];
      if (i < s.err.size() && std::isfinite(s.err[i])) {
        lo -= s.err[i];
        hi += s.err[i];
      }
      if (ay.usable(lo)) y0 = std::min(y0, ay.t(lo));
      if (ay.usable(hi)) y1 = std::max(y1, ay.t(hi));
      y0 = std::min(y0, ay.t(s.y[i]));
      y1 = std::max(y1, ay.t(s.y[i]));
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1;
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  ax.fit(x0, x1);
  ay.fit(y0, y1);

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << spec.width << "\" height=\"" << spec.height
    << "\" viewBox=\"0 0 " << spec.width << ' ' << spec.height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << num(spec.width / 2 - right / 2 + left / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
    << esc(spec.title) << "</text>\n";

  // Grid and ticks.
  for (double v : ax.ticks()) {
    const double px = ax.map(v);
    o << "<line x1=\"" << num(px) << "\" y1=\"" << num(top) << "\" x2=\"" << num(px) << "\" y2=\""
      << num(spec.height - bottom) << "\" stroke=\"#e5e5e5\"/>\n";
    o << "<text x=\"" << num(px) << "\" y=\"" << num(spec.height - bottom + 16) << "\" text-anchor=\"middle\">"
      << tick_label(v) << "</text>\n";
  }
  for (double v : ay.ticks()) {
    const double py = ay.map(v);
    o << "<line x1=\"" << num(left) << "\" y1=\"" << num(py) << "\" x2=\"" << num(spec.width - right) << "\" y2=\""
      << num(py) << "\" stroke=\"#e5e5e5\"/>\n";
    o << "<text x=\"" << num(left - 6) << "\" y=\"" << num(py + 4) << "\" text-anchor=\"end\">" << tick_label(v)
      << "</text>\n";
  }
  o << "<rect x=\"" << num(left) << "\" y=\"" << num(top) << "\" width=\"" << num(spec.width - left - right)
    << "\" height=\"" << num(spec.height - top - bottom) << "\" fill=\"none\" stroke=\"black\"/>\n";
  o << "<text x=\"" << num((left + spec.width - right) / 2) << "\" y=\"" << num(spec.height - 14)
    << "\" text-anchor=\"middle\">" << esc(spec.x_label) << (spec.log_x ? " (log)" : "") << "</text>\n";
  o << "<text transform=\"translate(16," << num((top + spec.height - bottom) / 2)
    << ") rotate(-90)\" text-anchor=\"middle\">" << esc(spec.y_label) << (spec.log_y ? " (log)" : "") << "</text>\n";

  for (std::size_t si = 0; si < spec.series.size(); ++si) {
    const auto& s = spec.series[si];
    const char* color = kPalette[si % std::size(kPalette)];
    const std::size_t n = std::min(s.x.size(), s.y.size());

    // Band: polygon over each run of usable points.
    if (!s.err.empty()) {
      std::size_t i = 0;
      while (i < n) {
        std::vector<std::size_t> run;
        for (; i < n; ++i) {
          const bool ok = i < s.err.size() && ax.usable(s.x[i]) && ay.usable(s.y[i] - s.err[i]) &&
                          ay.usable(s.y[i] + s.err[i]);
          if (!ok) break;
          run.push_back(i);
        }
        ++i;
        if (run.size() < 2) continue;
        o << "<polygon fill=\"" << color << "\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
        for (std::size_t j : run) o << num(ax.map(s.x[j])) << ',' << num(ay.map(s.y[j] + s.err[j])) << ' ';
        for (auto it = run.rbegin(); it != run.rend(); ++it) {
          o << num(ax.map(s.x[*it])) << ',' << num(ay.map(s.y[*it] - s.err[*it])) << ' ';
        }
        o << "\"/>\n";
      }
    }

    std::string pts;
    auto flush = [&] {
      if (!pts.empty()) {
        o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"" << pts << "\"/>\n";
      }
      pts.clear();
    };
    for (std::size_t i = 0; i < n; ++i) {
      if (!ax.usable(s.x[i]) || !ay.usable(s.y[i])) {
        flush();
        continue;
      }
      const std::string p = num(ax.map(s.x[i])) + "," + num(ay.map(s.y[i]));
      pts += p + ' ';
      o << "<circle cx=\"" << num(ax.map(s.x[i])) << "\" cy=\"" << num(ay.map(s.y[i])) << "\" r=\"2\" fill=\""
        << color << "\"/>\n";
    }
    flush();

    const double ly = top + 10 + 20.0 * static_cast<double>(si);
    const double lx = spec.width - right + 14;
    o << "<line x1=\"" << num(lx) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(lx + 22) << "\" y2=\"" << num(ly)
      << "\" stroke=\"" << color << "\" stroke-width=\"2.5\"/>\n";
    o << "<text x=\"" << num(lx + 28) << "\" y=\"" << num(ly + 4) << "\">" << esc(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace klflow
