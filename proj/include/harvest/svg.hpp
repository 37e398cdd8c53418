#pragma once

// Dependency-free SVG figures: scatter and line plots, labelled heatmaps and
// city-map overlays.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "harvest/autodiff.hpp"
#include "harvest/world.hpp"

namespace harvest::svg {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
  std::string color = "#1f77b4";
  /// Hollow markers (used for dominated points).
  bool hollow = false;
};

struct Axes {
  std::string title;
  std::string x_label;
  std::string y_label;
};

std::string scatter_plot(const Axes& axes, const std::vector<Series>& series);
std::string line_plot(const Axes& axes, const std::vector<Series>& series);
std::string heatmap(const std::string& title, const ad::Matrix& values, const std::vector<std::string>& row_labels,
                    const std::vector<std::string>& col_labels);
/// Buildings shaded by height, start (green) / terminal (red), devices (blue)
/// and the path as a polyline.
std::string map_overlay(const world::Scenario& scenario, const std::vector<world::Cell>& path);

std::string escape(const std::string& text);
void write_file(const std::filesystem::path& path, const std::string& content);

}  // namespace harvest::svg
