#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "docgeo/error.hpp"

namespace docgeo {

/// Dense row-major H×W×C raster with interleaved channels.
template <class T>
struct Grid {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<T> data;

  Grid() = default;
  Grid(int h, int w, int c = 1, T fill = T{})
      : height(h), width(w), channels(c),
        data(static_cast<std::size_t>(h) * w * c, fill) {
    require(h >= 0 && w >= 0 && c >= 1, ErrorCode::InvalidArgument,
            "grid dimensions must be non-negative");
  }

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Grid& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  std::size_t index(int y, int x, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  T& at(int y, int x, int c = 0) { return data[index(y, x, c)]; }
  const T& at(int y, int x, int c = 0) const { return data[index(y, x, c)]; }

  bool operator==(const Grid&) const = default;
};

/// Image intensities in [0,1]; 1 (gray) or 3 (RGB) channels.
using Image = Grid<double>;
/// Binary mask with values {0,1}.
using Mask = Grid<std::uint8_t>;

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

Image to_gray(const Image& img);
Image clamp01(Image img);
Image resize_bilinear(const Image& img, int height, int width);
Mask resize_nearest(const Mask& mask, int height, int width);

}  // namespace docgeo
