#pragma once

#include <vector>

#include "docgeo/grid.hpp"

namespace docgeo {

/// A textline: centre polyline (pixels), horizontal length and stroke
/// thickness.
struct Textline {
  std::vector<Point> points;
  double length = 0.0;
  double thickness = 1.0;
  bool operator==(const Textline&) const = default;
};

using TextlineSet = std::vector<Textline>;

/// Bounding box in inclusive pixel coordinates.
struct BBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool operator==(const BBox&) const = default;
};

double horizontal_extent(const std::vector<Point>& points);

}  // namespace docgeo
