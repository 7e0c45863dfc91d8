#pragma once

#include <string>
#include <vector>

namespace seqpo {

// Minimal line-plot writer emitting standalone SVG. Enough for metric curves;
// not a general plotting library.
class LinePlot {
 public:
  LinePlot(std::string title, std::string x_label, std::string y_label)
      : title_(std::move(title)),
        x_label_(std::move(x_label)),
        y_label_(std::move(y_label)) {}

  void add_series(std::string name, std::vector<double> xs,
                  std::vector<double> ys);

  std::string render(int width = 760, int height = 480) const;
  void write(const std::string& path, int width = 760, int height = 480) const;

 private:
  struct Series {
    std::string name;
    std::vector<double> xs, ys;
  };

  std::string title_, x_label_, y_label_;
  std::vector<Series> series_;
};

}  // namespace seqpo
