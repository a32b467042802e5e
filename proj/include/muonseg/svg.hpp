#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

// Minimal SVG chart writers for the reports.
namespace muonseg::svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

std::string line_chart(const std::string& title, const std::string& x_label,
                       const std::string& y_label, const std::vector<Series>& series);

struct BarGroup {
  std::string label;
  std::vector<double> values;  // one per series
};

std::string grouped_bar_chart(const std::string& title, const std::string& y_label,
                              const std::vector<std::string>& series_names,
                              const std::vector<BarGroup>& groups);

// Grids of colour indices drawn side by side, one titled panel each.
struct Panel {
  std::string title;
  int width = 0;
  int height = 0;
  std::vector<int> cells;  // row-major, y rows; -1 = blank
};

std::string panels(const std::vector<Panel>& panels, const std::vector<std::string>& palette,
                   const std::vector<std::string>& legend);

// Fixed colours of the six label classes, then the error colour.
const std::vector<std::string>& class_palette();

std::string escape(const std::string& text);
void write_file(const std::filesystem::path& path, const std::string& content);

}  // namespace muonseg::svg
