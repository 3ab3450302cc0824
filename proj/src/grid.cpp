#include "docgeo/grid.hpp"

#include <algorithm>
#include <cmath>

namespace docgeo {

Image to_gray(const Image& img) {
  if (img.channels == 1) return img;
  require(img.channels == 3, ErrorCode::ShapeMismatch, "to_gray expects 1 or 3 channels");
  Image out(img.height, img.width, 1);
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    const double* rgb = &img.data[p * 3];
    out.data[p] = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
  }
  return out;
}

Image clamp01(Image img) {
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

namespace {

struct AxisWeights {
  std::vector<int> i0, i1;
  std::vector<double> w1;
};

// Pixel-center aligned sampling positions (same convention as OpenCV's
// INTER_LINEAR resize).
AxisWeights axis_weights(int src, int dst) {
  AxisWeights a;
  a.i0.resize(dst);
  a.i1.resize(dst);
  a.w1.resize(dst);
  const double scale = static_cast<double>(src) / dst;
  for (int i = 0; i < dst; ++i) {
    double s = std::clamp((i + 0.5) * scale - 0.5, 0.0, static_cast<double>(src - 1));
    int lo = static_cast<int>(std::floor(s));
    int hi = std::min(lo + 1, src - 1);
    a.i0[i] = lo;
    a.i1[i] = hi;
    a.w1[i] = s - lo;
  }
  return a;
}

}  // namespace

Image resize_bilinear(const Image& img, int height, int width) {
  require(height > 0 && width > 0 && !img.empty(), ErrorCode::InvalidArgument,
          "resize_bilinear: invalid size");
  if (height == img.height && width == img.width) return img;
  const AxisWeights ay = axis_weights(img.height, height);
  const AxisWeights ax = axis_weights(img.width, width);
  Image out(height, width, img.channels);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        double top = img.at(ay.i0[y], ax.i0[x], c) * (1 - ax.w1[x]) +
                     img.at(ay.i0[y], ax.i1[x], c) * ax.w1[x];
        double bot = img.at(ay.i1[y], ax.i0[x], c) * (1 - ax.w1[x]) +
                     img.at(ay.i1[y], ax.i1[x], c) * ax.w1[x];
        out.at(y, x, c) = top * (1 - ay.w1[y]) + bot * ay.w1[y];
      }
    }
  }
  return out;
}

Mask resize_nearest(const Mask& mask, int height, int width) {
  require(height > 0 && width > 0 && !mask.empty(), ErrorCode::InvalidArgument,
          "resize_nearest: invalid size");
  Mask out(height, width, mask.channels);
  for (int y = 0; y < height; ++y) {
    int sy = std::min(mask.height - 1, static_cast<int>((y + 0.5) * mask.height / height));
    for (int x = 0; x < width; ++x) {
      int sx = std::min(mask.width - 1, static_cast<int>((x + 0.5) * mask.width / width));
      for (int c = 0; c < mask.channels; ++c) out.at(y, x, c) = mask.at(sy, sx, c);
    }
  }
  return out;
}

}  // namespace docgeo
