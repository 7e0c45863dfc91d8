#include "seqpo/svg_plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "seqpo/errors.hpp"

namespace seqpo {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace

void LinePlot::add_series(std::string name, std::vector<double> xs,
                          std::vector<double> ys) {
  if (xs.size() != ys.size())
    throw InputError("plot series x and y lengths differ");
  series_.push_back(Series{std::move(name), std::move(xs), std::move(ys)});
}

std::string LinePlot::render(int width, int height) const {
  const double ml = 64, mr = 16, mt = 36, mb = 48;
  const double pw = width - ml - mr, ph = height - mt - mb;

  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool any = false;
  for (const Series& s : series_) {
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
      if (!any) {
        xmin = xmax = s.xs[i];
        ymin = ymax = s.ys[i];
        any = true;
      } else {
        xmin = std::min(xmin, s.xs[i]);
        xmax = std::max(xmax, s.xs[i]);
        ymin = std::min(ymin, s.ys[i]);
        ymax = std::max(ymax, s.ys[i]);
      }
    }
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return mt + ph - (y - ymin) / (ymax - ymin) * ph; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " "
      << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"14\">" << escape(title_)
      << "</text>\n";

  // axes and ticks
  svg << "<g stroke=\"#333\" stroke-width=\"1\" fill=\"none\">";
  svg << "<path d=\"M" << ml << " " << mt << " L" << ml << " " << mt + ph
      << " L" << ml + pw << " " << mt + ph << "\"/></g>\n";
  const int ticks = 5;
  svg << "<g font-family=\"sans-serif\" font-size=\"10\" fill=\"#333\">\n";
  for (int i = 0; i <= ticks; ++i) {
    const double xv = xmin + (xmax - xmin) * i / ticks;
    const double yv = ymin + (ymax - ymin) * i / ticks;
    svg << "<line x1=\"" << px(xv) << "\" y1=\"" << mt + ph << "\" x2=\""
        << px(xv) << "\" y2=\"" << mt + ph + 4
        << "\" stroke=\"#333\" stroke-width=\"1\"/>";
    svg << "<text x=\"" << px(xv) << "\" y=\"" << mt + ph + 16
        << "\" text-anchor=\"middle\">" << fmt(xv) << "</text>\n";
    svg << "<line x1=\"" << ml - 4 << "\" y1=\"" << py(yv) << "\" x2=\"" << ml
        << "\" y2=\"" << py(yv) << "\" stroke=\"#333\" stroke-width=\"1\"/>";
    svg << "<text x=\"" << ml - 8 << "\" y=\"" << py(yv) + 3
        << "\" text-anchor=\"end\">" << fmt(yv) << "</text>\n";
  }
  svg << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 8
      << "\" text-anchor=\"middle\" font-size=\"12\">" << escape(x_label_)
      << "</text>\n";
  svg << "<text x=\"14\" y=\"" << mt + ph / 2
      << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
      << mt + ph / 2 << ")\">" << escape(y_label_) << "</text>\n";
  svg << "</g>\n";

  for (std::size_t k = 0; k < series_.size(); ++k) {
    const Series& s = series_[k];
    const char* color = kPalette[k % (sizeof(kPalette) / sizeof(kPalette[0]))];
    svg << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
      svg << px(s.xs[i]) << "," << py(s.ys[i]) << " ";
    }
    svg << "\"/>\n";
    const double ly = mt + 14 + 14 * static_cast<double>(k);
    svg << "<line x1=\"" << ml + pw - 130 << "\" y1=\"" << ly << "\" x2=\""
        << ml + pw - 110 << "\" y2=\"" << ly << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"/>";
    svg << "<text x=\"" << ml + pw - 104 << "\" y=\"" << ly + 3
        << "\" font-family=\"sans-serif\" font-size=\"10\">" << escape(s.name)
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void LinePlot::write(const std::string& path, int width, int height) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write plot file " + path);
  out << render(width, height);
}

}  // namespace seqpo
