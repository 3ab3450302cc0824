#include "docgeo/annotate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace docgeo::annotate {

Mask binarize_adaptive(const Image& gray, int window, double offset) {
  require(gray.channels == 1, ErrorCode::InvalidArgument, "binarize_adaptive expects one channel");
  require(window >= 3 && window % 2 == 1, ErrorCode::InvalidArgument,
          "adaptive window must be odd and >= 3, got " + std::to_string(window));
  const int h = gray.height, w = gray.width, r = window / 2;
  const double sigma = 0.3 * ((window - 1) * 0.5 - 1) + 0.8;
  std::vector<double> k(window);
  double ks = 0.0;
  for (int i = 0; i < window; ++i) ks += k[i] = std::exp(-(i - r) * (i - r) / (2 * sigma * sigma));
  for (double& v : k) v /= ks;

  Image tmp(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * gray.at(y, std::clamp(x + i, 0, w - 1));
      tmp.at(y, x) = s;
    }
  Mask out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp.at(std::clamp(y + i, 0, h - 1), x);
      out.at(y, x) = gray.at(y, x) < s - offset ? 1 : 0;
    }
  return out;
}

Mask dilate_horizontal(const Mask& bin, int kernel_len) {
  require(kernel_len >= 1 && kernel_len % 2 == 1, ErrorCode::InvalidArgument,
          "dilation kernel must be odd and >= 1, got " + std::to_string(kernel_len));
  const int r = kernel_len / 2;
  Mask out(bin.height, bin.width);
  for (int y = 0; y < bin.height; ++y) {
    int last = std::numeric_limits<int>::min() / 2;  // last foreground x at or before x
    for (int x = 0; x < bin.width + r; ++x) {
      if (x < bin.width && bin.at(y, x)) last = x;
      int t = x - r;
      if (t >= 0 && x - last <= 2 * r) out.at(y, t) = 1;
    }
  }
  return out;
}

std::vector<BBox> connected_components(const Mask& bin) {
  const int h = bin.height, w = bin.width;
  std::vector<int> label(bin.pixels(), -1);
  std::vector<BBox> boxes;
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!bin.at(y, x) || label[bin.index(y, x)] >= 0) continue;
      const int id = static_cast<int>(boxes.size());
      BBox b{x, y, x, y};
      label[bin.index(y, x)] = id;
      stack.assign(1, {y, x});
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        b.x0 = std::min(b.x0, cx);
        b.x1 = std::max(b.x1, cx);
        b.y0 = std::min(b.y0, cy);
        b.y1 = std::max(b.y1, cy);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            std::size_t i = bin.index(ny, nx);
            if (bin.data[i] && label[i] < 0) {
              label[i] = id;
              stack.push_back({ny, nx});
            }
          }
      }
      boxes.push_back(b);
    }
  return boxes;
}

std::vector<BBox> filter_boxes(const std::vector<BBox>& boxes, int height, int width,
                               const AnnotateOptions& opt) {
  std::vector<BBox> out;
  for (const BBox& b : boxes) {
    const double bw = b.x1 - b.x0 + 1, bh = b.y1 - b.y0 + 1;
    if (bw / bh < opt.min_aspect) continue;
    if (bh < opt.min_height || bh > opt.max_height_frac * height) continue;
    if (bw < opt.min_width_frac * width) continue;
    out.push_back(b);
  }
  return out;
}

TextlineSet boxes_to_centerlines(const std::vector<BBox>& boxes) {
  TextlineSet lines;
  for (const BBox& b : boxes) {
    Textline line;
    const double yc = (b.y0 + b.y1) / 2.0;
    for (int x = b.x0; x <= b.x1; x += 4) line.points.push_back({static_cast<double>(x), yc});
    line.length = b.width();
    line.thickness = b.height();
    lines.push_back(std::move(line));
  }
  return lines;
}

TextlineSet detect_lines(const Image& rectified, const AnnotateOptions& opt) {
  const Mask bin = binarize_adaptive(to_gray(rectified), opt.window, opt.offset);
  std::vector<BBox> boxes = connected_components(dilate_horizontal(bin, opt.kernel));
  // Undo the horizontal growth of the dilation so boxes hug the ink.
  const int r = opt.kernel / 2;
  for (BBox& b : boxes) {
    if (b.x1 - b.x0 >= 2 * r) {
      b.x0 = std::min(b.x0 + r, rectified.width - 1);
      b.x1 = std::max(b.x1 - r, b.x0);
    }
  }
  return boxes_to_centerlines(filter_boxes(boxes, rectified.height, rectified.width, opt));
}

TextlineSet annotate_distorted(const Image& rectified, const WarpField& gt_flow,
                               const AnnotateOptions& opt) {
  validate(gt_flow);
  require(rectified.height == gt_flow.height && rectified.width == gt_flow.width,
          ErrorCode::ShapeMismatch, "rectified image and flow differ in size");
  TextlineSet lines = detect_lines(rectified, opt);
  const CoordMap c = flow_to_coords(gt_flow);
  for (Textline& line : lines) {
    double scale = 0.0;
    for (const Point& p : line.points) {
      Point px0 = eval_coords(c, p.x - 0.5, p.y), px1 = eval_coords(c, p.x + 0.5, p.y);
      Point py0 = eval_coords(c, p.x, p.y - 0.5), py1 = eval_coords(c, p.x, p.y + 0.5);
      double det = (px1.x - px0.x) * (py1.y - py0.y) - (px1.y - px0.y) * (py1.x - py0.x);
      scale += std::sqrt(std::abs(det));
    }
    line.thickness *= scale / static_cast<double>(line.points.size());
    line.points = map_points_through_flow(line.points, gt_flow);
    line.length = horizontal_extent(line.points);
  }
  return lines;
}

double point_polyline_distance(Point p, const std::vector<Point>& line) {
  require(!line.empty(), ErrorCode::InvalidArgument, "empty polyline");
  double best = std::hypot(p.x - line[0].x, p.y - line[0].y);
  for (std::size_t i = 1; i < line.size(); ++i) {
    const Point a = line[i - 1], b = line[i];
    const double vx = b.x - a.x, vy = b.y - a.y, len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    best = std::min(best, std::hypot(p.x - a.x - t * vx, p.y - a.y - t * vy));
  }
  return best;
}

Mask rasterize_lines(const TextlineSet& lines, int height, int width) {
  Mask m(height, width);
  for (const Textline& line : lines) {
    if (line.points.empty()) continue;
    const double r = line.thickness / 2.0;
    double x0 = line.points[0].x, x1 = x0, y0 = line.points[0].y, y1 = y0;
    for (const Point& p : line.points) {
      x0 = std::min(x0, p.x);
      x1 = std::max(x1, p.x);
      y0 = std::min(y0, p.y);
      y1 = std::max(y1, p.y);
    }
    const int ya = std::max(0, static_cast<int>(std::floor(y0 - r))),
              yb = std::min(height - 1, static_cast<int>(std::ceil(y1 + r)));
    const int xa = std::max(0, static_cast<int>(std::floor(x0 - r))),
              xb = std::min(width - 1, static_cast<int>(std::ceil(x1 + r)));
    for (int y = ya; y <= yb; ++y)
      for (int x = xa; x <= xb; ++x)
        if (!m.at(y, x) && point_polyline_distance({double(x), double(y)}, line.points) <= r)
          m.at(y, x) = 1;
  }
  return m;
}

AnnotationScore score_annotation(const TextlineSet& detected, const TextlineSet& reference,
                                 double tol) {
  AnnotationScore s;
  s.total = static_cast<int>(reference.size());
  std::vector<double> errors;
  for (const Textline& ref : reference) {
    int covered = 0;
    for (const Point& p : ref.points) {
      double best = std::numeric_limits<double>::infinity();
      for (const Textline& d : detected)
        if (!d.points.empty()) best = std::min(best, point_polyline_distance(p, d.points));
      if (best <= tol) {
        ++covered;
        errors.push_back(best);
      }
    }
    if (!ref.points.empty() && 2 * covered >= static_cast<int>(ref.points.size())) ++s.matched;
  }
  s.recall = s.total ? static_cast<double>(s.matched) / s.total : 1.0;
  if (!errors.empty()) {
    auto mid = errors.begin() + errors.size() / 2;
    std::nth_element(errors.begin(), mid, errors.end());
    s.median_error = *mid;
  }
  return s;
}

}  // namespace docgeo::annotate
