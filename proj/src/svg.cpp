#include "harvest/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace harvest::svg {

namespace {

constexpr double kWidth = 640.0, kHeight = 440.0;
constexpr double kLeft = 70.0, kRight = 150.0, kTop = 40.0, kBottom = 60.0;

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void pad() {
    if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
    if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
    const double m = 0.05 * (hi - lo);
    lo -= m;
    hi += m;
  }
};

std::string num(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

class Frame {
 public:
  Frame(const Axes& axes, const std::vector<Series>& series) : axes_(axes) {
    for (const auto& s : series)
      for (const auto& [x, y] : s.points) {
        xr_.add(x);
        yr_.add(y);
      }
    xr_.pad();
    yr_.pad();
  }
  double px(double x) const { return kLeft + (x - xr_.lo) / (xr_.hi - xr_.lo) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - yr_.lo) / (yr_.hi - yr_.lo) * (kHeight - kTop - kBottom); }

  void open(std::ostringstream& os) const {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(axes_.title)
       << "</text>\n";
    const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
    os << "<rect x=\"" << x0 << "\" y=\"" << y1 << "\" width=\"" << x1 - x0 << "\" height=\"" << y0 - y1
       << "\" fill=\"none\" stroke=\"#333\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double xv = xr_.lo + i * (xr_.hi - xr_.lo) / 4, yv = yr_.lo + i * (yr_.hi - yr_.lo) / 4;
      os << "<text x=\"" << px(xv) << "\" y=\"" << y0 + 16 << "\" text-anchor=\"middle\">" << num(xv) << "</text>\n";
      os << "<text x=\"" << x0 - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv) << "</text>\n";
      os << "<line x1=\"" << px(xv) << "\" y1=\"" << y0 << "\" x2=\"" << px(xv) << "\" y2=\"" << y1
         << "\" stroke=\"#eee\"/>\n";
      os << "<line x1=\"" << x0 << "\" y1=\"" << py(yv) << "\" x2=\"" << x1 << "\" y2=\"" << py(yv)
         << "\" stroke=\"#eee\"/>\n";
    }
    os << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << kHeight - 18 << "\" text-anchor=\"middle\">"
       << escape(axes_.x_label) << "</text>\n";
    os << "<text x=\"18\" y=\"" << (y0 + y1) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
       << (y0 + y1) / 2 << ")\">" << escape(axes_.y_label) << "</text>\n";
  }

  static void legend(std::ostringstream& os, const std::vector<Series>& series) {
    double y = kTop + 10;
    for (const auto& s : series) {
      if (s.label.empty()) continue;
      os << "<circle cx=\"" << kWidth - kRight + 16 << "\" cy=\"" << y << "\" r=\"5\" fill=\""
         << (s.hollow ? "none" : s.color) << "\" stroke=\"" << s.color << "\"/>\n";
      os << "<text x=\"" << kWidth - kRight + 26 << "\" y=\"" << y + 4 << "\">" << escape(s.label) << "</text>\n";
      y += 18;
    }
  }

 private:
  Axes axes_;
  Range xr_, yr_;
};

}  // namespace

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
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

std::string scatter_plot(const Axes& axes, const std::vector<Series>& series) {
  const Frame f(axes, series);
  std::ostringstream os;
  f.open(os);
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      os << "<circle cx=\"" << f.px(x) << "\" cy=\"" << f.py(y) << "\" r=\"4\" fill=\""
         << (s.hollow ? "none" : s.color) << "\" stroke=\"" << s.color << "\"/>\n";
    }
  }
  Frame::legend(os, series);
  os << "</svg>\n";
  return os.str();
}

std::string line_plot(const Axes& axes, const std::vector<Series>& series) {
  const Frame f(axes, series);
  std::ostringstream os;
  f.open(os);
  for (const auto& s : series) {
    if (s.points.empty()) continue;
    os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : s.points) os << f.px(x) << ',' << f.py(y) << ' ';
    os << "\"/>\n";
  }
  Frame::legend(os, series);
  os << "</svg>\n";
  return os.str();
}

std::string heatmap(const std::string& title, const ad::Matrix& values, const std::vector<std::string>& row_labels,
                    const std::vector<std::string>& col_labels) {
  const double cell = 28.0, left = 60.0, top = 60.0;
  const double w = left + cell * values.cols() + 20, h = top + cell * values.rows() + 20;
  const double hi = values.size() ? std::max(values.maxCoeff(), 1e-12) : 1.0;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << escape(title) << "</text>\n";
  for (Eigen::Index c = 0; c < values.cols(); ++c) {
    const std::string label = c < static_cast<Eigen::Index>(col_labels.size()) ? col_labels[c] : std::to_string(c);
    const double x = left + cell * c + cell / 2;
    os << "<text x=\"" << x << "\" y=\"" << top - 6 << "\" text-anchor=\"start\" transform=\"rotate(-45 " << x << ' '
       << top - 6 << ")\">" << escape(label) << "</text>\n";
  }
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    const std::string label = r < static_cast<Eigen::Index>(row_labels.size()) ? row_labels[r] : std::to_string(r);
    os << "<text x=\"" << left - 6 << "\" y=\"" << top + cell * r + cell / 2 + 4 << "\" text-anchor=\"end\">"
       << escape(label) << "</text>\n";
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      const double t = std::clamp(values(r, c) / hi, 0.0, 1.0);
      const int shade = static_cast<int>(std::lround(255 * (1.0 - t)));
      os << "<rect x=\"" << left + cell * c << "\" y=\"" << top + cell * r << "\" width=\"" << cell << "\" height=\""
         << cell << "\" fill=\"rgb(" << shade << ',' << shade << ",255)\" stroke=\"#ccc\"><title>" << num(values(r, c))
         << "</title></rect>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

std::string map_overlay(const world::Scenario& scenario, const std::vector<world::Cell>& path) {
  const world::CityMap& map = scenario.map;
  const double cell = std::clamp(600.0 / std::max(map.width(), map.length()), 6.0, 40.0);
  const double w = cell * map.width(), h = cell * map.length();
  const double top_height = std::max(map.max_height(), 1e-9);
  auto cx = [&](int x) { return cell * x + cell / 2; };
  auto cy = [&](int y) { return h - (cell * y + cell / 2); };  // y grows northwards
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"#f7f7f7\"/>\n";
  for (int x = 0; x < map.width(); ++x) {
    for (int y = 0; y < map.length(); ++y) {
      const double e = map.height(x, y);
      if (e <= 0.0) continue;
      const int shade = static_cast<int>(std::lround(200 - 120 * e / top_height));
      os << "<rect x=\"" << cell * x << "\" y=\"" << h - cell * (y + 1) << "\" width=\"" << cell << "\" height=\""
         << cell << "\" fill=\"rgb(" << shade << ',' << shade << ',' << shade << ")\"/>\n";
    }
  }
  const auto s = map.start(), f = map.terminal();
  os << "<rect x=\"" << cell * s.x << "\" y=\"" << h - cell * (s.y + 1) << "\" width=\"" << cell << "\" height=\""
     << cell << "\" fill=\"#2ca02c\" opacity=\"0.6\"/>\n";
  os << "<rect x=\"" << cell * f.x << "\" y=\"" << h - cell * (f.y + 1) << "\" width=\"" << cell << "\" height=\""
     << cell << "\" fill=\"#d62728\" opacity=\"0.6\"/>\n";
  for (const auto& d : scenario.devices) {
    os << "<circle cx=\"" << cx(d.position.x) << "\" cy=\"" << cy(d.position.y) << "\" r=\"" << cell / 3
       << "\" fill=\"#1f77b4\"/>\n";
  }
  if (!path.empty()) {
    os << "<polyline fill=\"none\" stroke=\"#ff7f0e\" stroke-width=\"" << std::max(1.5, cell / 6) << "\" points=\"";
    for (const auto& c : path) os << cx(c.x) << ',' << cy(c.y) << ' ';
    os << "\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

}  // namespace harvest::svg
