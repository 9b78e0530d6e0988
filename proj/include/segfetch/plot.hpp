#pragma once

#include <string>
#include <vector>

namespace segfetch::plot {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Axes {
  std::string title;
  std::string x_label;
  std::string y_label;
};

/// Standalone SVG documents. Output depends only on the arguments.
std::string line_chart(const Axes& axes, const std::vector<Series>& series);

struct Bar {
  std::string label;
  std::vector<double> values;  // one per group
};

/// Grouped bars: one cluster per Bar, one colored bar per group name.
std::string bar_chart(const Axes& axes, const std::vector<std::string>& groups,
                      const std::vector<Bar>& bars);

}  // namespace segfetch::plot
