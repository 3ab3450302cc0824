#include "docgeo/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace docgeo {

void validate(const WarpField& f) {
  require(f.height >= 1 && f.width >= 1, ErrorCode::InvalidArgument,
          "warp field must have positive dimensions");
  const std::size_t n = static_cast<std::size_t>(f.height) * f.width;
  require(f.dx.size() == n && f.dy.size() == n, ErrorCode::ShapeMismatch,
          "warp field component size does not match height*width");
  for (std::size_t i = 0; i < n; ++i) {
    require(std::isfinite(f.dx[i]) && std::isfinite(f.dy[i]), ErrorCode::InvalidArgument,
            "warp field contains non-finite values");
  }
}

WarpField identity_flow(int height, int width) {
  require(height >= 1 && width >= 1, ErrorCode::InvalidArgument,
          "identity_flow: dimensions must be >= 1");
  const std::size_t n = static_cast<std::size_t>(height) * width;
  return WarpField{height, width, std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f)};
}

CoordMap identity_coords(int height, int width) {
  require(height >= 1 && width >= 1, ErrorCode::InvalidArgument,
          "identity_coords: dimensions must be >= 1");
  CoordMap m{height, width, {}, {}};
  m.x.resize(static_cast<std::size_t>(height) * width);
  m.y.resize(m.x.size());
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      m.x[m.index(i, j)] = j;
      m.y[m.index(i, j)] = i;
    }
  }
  return m;
}

CoordMap flow_to_coords(const WarpField& f) {
  validate(f);
  CoordMap m = identity_coords(f.height, f.width);
  for (std::size_t k = 0; k < m.x.size(); ++k) {
    m.x[k] += f.dx[k];
    m.y[k] += f.dy[k];
  }
  return m;
}

WarpField coords_to_flow(const CoordMap& m) {
  WarpField f = identity_flow(m.height, m.width);
  for (int i = 0; i < m.height; ++i) {
    for (int j = 0; j < m.width; ++j) {
      const std::size_t k = m.index(i, j);
      f.dx[k] = static_cast<float>(m.x[k] - j);
      f.dy[k] = static_cast<float>(m.y[k] - i);
    }
  }
  return f;
}

double sample_bilinear(const Image& img, double x, double y, int c, BorderPolicy border) {
  const int w = img.width;
  const int h = img.height;
  if (border == BorderPolicy::Clamp) {
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double ax = x - x0;
    const double ay = y - y0;
    const double top = img.at(y0, x0, c) * (1 - ax) + img.at(y0, x1, c) * ax;
    const double bot = img.at(y1, x0, c) * (1 - ax) + img.at(y1, x1, c) * ax;
    return top * (1 - ay) + bot * ay;
  }
  const double fx = std::floor(x);
  const double fy = std::floor(y);
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  const double ax = x - fx;
  const double ay = y - fy;
  auto px = [&](int yy, int xx) -> double {
    if (xx < 0 || yy < 0 || xx >= w || yy >= h) return 0.0;
    return img.at(yy, xx, c);
  };
  const double top = px(y0, x0) * (1 - ax) + px(y0, x0 + 1) * ax;
  const double bot = px(y0 + 1, x0) * (1 - ax) + px(y0 + 1, x0 + 1) * ax;
  return top * (1 - ay) + bot * ay;
}

Image apply_flow(const Image& src, const WarpField& f, BorderPolicy border) {
  validate(f);
  require(!src.empty(), ErrorCode::InvalidArgument, "apply_flow: empty source image");
  Image out(f.height, f.width, src.channels);
  for (int i = 0; i < f.height; ++i) {
    for (int j = 0; j < f.width; ++j) {
      const std::size_t k = f.index(i, j);
      const double sx = j + static_cast<double>(f.dx[k]);
      const double sy = i + static_cast<double>(f.dy[k]);
      for (int c = 0; c < src.channels; ++c) out.at(i, j, c) = sample_bilinear(src, sx, sy, c, border);
    }
  }
  return out;
}

Point eval_coords(const CoordMap& m, double x, double y) {
  auto cell = [](double v, int n, int& lo, double& t) {
    if (n == 1) {
      lo = 0;
      t = 0.0;
      return;
    }
    lo = std::clamp(static_cast<int>(std::floor(v)), 0, n - 2);
    t = v - lo;  // outside [0,1] extrapolates linearly
  };
  int x0, y0;
  double tx, ty;
  cell(x, m.width, x0, tx);
  cell(y, m.height, y0, ty);
  const int x1 = std::min(x0 + 1, m.width - 1);
  const int y1 = std::min(y0 + 1, m.height - 1);
  auto lerp2 = [&](const std::vector<double>& v) {
    const double top = v[m.index(y0, x0)] * (1 - tx) + v[m.index(y0, x1)] * tx;
    const double bot = v[m.index(y1, x0)] * (1 - tx) + v[m.index(y1, x1)] * tx;
    return top * (1 - ty) + bot * ty;
  };
  return {lerp2(m.x), lerp2(m.y)};
}

namespace {

double norm(Point p) { return std::hypot(p.x, p.y); }

struct Solve {
  Point g;
  double residual;
  int iterations;
};

Solve solve_one(const PointMap& h, Point t, Point g, const InversionOptions& opt) {
  constexpr double kStep = 1e-2;
  Point hg = h(g);
  Point r{hg.x - t.x, hg.y - t.y};
  double res = norm(r);
  int it = 0;
  while (res > opt.tol && it < opt.max_iter) {
    ++it;
    const Point hxp = h({g.x + kStep, g.y});
    const Point hxm = h({g.x - kStep, g.y});
    const Point hyp = h({g.x, g.y + kStep});
    const Point hym = h({g.x, g.y - kStep});
    const double j00 = (hxp.x - hxm.x) / (2 * kStep);
    const double j10 = (hxp.y - hxm.y) / (2 * kStep);
    const double j01 = (hyp.x - hym.x) / (2 * kStep);
    const double j11 = (hyp.y - hym.y) / (2 * kStep);
    const double det = j00 * j11 - j01 * j10;
    bool accepted = false;
    if (std::abs(det) > 1e-12) {
      const Point step{(j11 * r.x - j01 * r.y) / det, (-j10 * r.x + j00 * r.y) / det};
      const Point gn{g.x - step.x, g.y - step.y};
      const Point hn = h(gn);
      const Point rn{hn.x - t.x, hn.y - t.y};
      const double resn = norm(rn);
      if (std::isfinite(resn) && resn < res) {
        g = gn;
        r = rn;
        res = resn;
        accepted = true;
      }
    }
    if (!accepted) {
      g = {g.x - opt.damping * r.x, g.y - opt.damping * r.y};
      hg = h(g);
      r = {hg.x - t.x, hg.y - t.y};
      res = norm(r);
    }
  }
  return {g, res, it};
}

void report_failure(double worst, Point where) {
  std::ostringstream msg;
  msg << "invert_map did not converge: worst residual " << worst << " px at target (" << where.x
      << ", " << where.y << ")";
  fail(ErrorCode::NotConverged, msg.str());
}

}  // namespace

std::vector<Point> invert_points(const PointMap& h, std::span<const Point> targets,
                                 const InversionOptions& opt, double* max_residual,
                                 int* max_iterations_used) {
  std::vector<Point> out(targets.size());
  double worst = 0.0;
  int worst_it = 0;
  Point worst_at{};
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const Solve s = solve_one(h, targets[k], targets[k], opt);
    out[k] = s.g;
    if (!(s.residual <= worst)) {
      worst = s.residual;
      worst_at = targets[k];
    }
    worst_it = std::max(worst_it, s.iterations);
  }
  if (!(worst <= opt.tol)) report_failure(worst, worst_at);
  if (max_residual) *max_residual = worst;
  if (max_iterations_used) *max_iterations_used = worst_it;
  return out;
}

InversionResult invert_map(const PointMap& h, int height, int width, const InversionOptions& opt) {
  require(height >= 1 && width >= 1, ErrorCode::InvalidArgument,
          "invert_map: dimensions must be >= 1");
  InversionResult result{identity_coords(height, width), 0.0, 0};
  CoordMap& g = result.map;
  Point worst_at{};
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      const Point t{static_cast<double>(j), static_cast<double>(i)};
      // Targets that are already fixed points keep their exact coordinates;
      // everything else warm-starts from the left (or upper) neighbour.
      Solve s = solve_one(h, t, t, InversionOptions{opt.tol, 0, opt.damping});
      if (s.residual > opt.tol && (i > 0 || j > 0)) {
        s = solve_one(h, t, j > 0 ? g.at(i, j - 1) : g.at(i - 1, j), opt);
      }
      if (s.residual > opt.tol) s = solve_one(h, t, t, opt);
      g.x[g.index(i, j)] = s.g.x;
      g.y[g.index(i, j)] = s.g.y;
      if (!(s.residual <= result.max_residual)) {
        result.max_residual = s.residual;
        worst_at = t;
      }
      result.max_iterations_used = std::max(result.max_iterations_used, s.iterations);
    }
  }
  if (!(result.max_residual <= opt.tol)) report_failure(result.max_residual, worst_at);
  return result;
}

InversionResult invert_map(const CoordMap& h, const InversionOptions& opt) {
  require(h.x.size() == static_cast<std::size_t>(h.height) * h.width && h.y.size() == h.x.size(),
          ErrorCode::ShapeMismatch, "invert_map: coordinate map size mismatch");
  return invert_map([&h](Point p) { return eval_coords(h, p.x, p.y); }, h.height, h.width, opt);
}

std::vector<Point> map_points_through_flow(std::span<const Point> points, const WarpField& f) {
  validate(f);
  std::vector<Point> out;
  out.reserve(points.size());
  for (const Point& p : points) {
    require(std::isfinite(p.x) && std::isfinite(p.y) && p.x >= 0 && p.y >= 0 &&
                p.x <= f.width - 1 && p.y <= f.height - 1,
            ErrorCode::OutOfRange, "map_points_through_flow: point outside the field");
    const int x0 = std::min(static_cast<int>(std::floor(p.x)), std::max(f.width - 2, 0));
    const int y0 = std::min(static_cast<int>(std::floor(p.y)), std::max(f.height - 2, 0));
    const int x1 = std::min(x0 + 1, f.width - 1);
    const int y1 = std::min(y0 + 1, f.height - 1);
    const double ax = p.x - x0;
    const double ay = p.y - y0;
    auto lerp = [&](const std::vector<float>& v) {
      const double top = v[f.index(y0, x0)] * (1 - ax) + v[f.index(y0, x1)] * ax;
      const double bot = v[f.index(y1, x0)] * (1 - ax) + v[f.index(y1, x1)] * ax;
      return top * (1 - ay) + bot * ay;
    };
    out.push_back({p.x + lerp(f.dx), p.y + lerp(f.dy)});
  }
  return out;
}

}  // namespace docgeo
