#pragma once

#include <functional>
#include <span>
#include <vector>

#include "docgeo/grid.hpp"

namespace docgeo {

/// Dense backward displacement field on the rectified grid, in pixels.
/// Rectified pixel (row i, col j) samples the source at
/// (x, y) = (j + dx(i,j), i + dy(i,j)).
struct WarpField {
  int height = 0;
  int width = 0;
  std::vector<float> dx;
  std::vector<float> dy;

  std::size_t index(int y, int x) const { return static_cast<std::size_t>(y) * width + x; }
  bool operator==(const WarpField&) const = default;
};

/// Absolute form of a WarpField: coord(i,j) = (j,i) + (dx,dy).
struct CoordMap {
  int height = 0;
  int width = 0;
  std::vector<double> x;
  std::vector<double> y;

  std::size_t index(int row, int col) const { return static_cast<std::size_t>(row) * width + col; }
  Point at(int row, int col) const { return {x[index(row, col)], y[index(row, col)]}; }
};

enum class BorderPolicy { Clamp, Zero };

void validate(const WarpField& f);

WarpField identity_flow(int height, int width);
CoordMap identity_coords(int height, int width);
CoordMap flow_to_coords(const WarpField& f);
WarpField coords_to_flow(const CoordMap& m);

/// Bilinear sample of channel c at a continuous position. Integer positions
/// return the stored value exactly.
double sample_bilinear(const Image& img, double x, double y, int c,
                       BorderPolicy border = BorderPolicy::Clamp);

/// Backward warp: output has the field's dimensions.
Image apply_flow(const Image& src, const WarpField& f,
                 BorderPolicy border = BorderPolicy::Clamp);

/// Evaluates a dense CoordMap at a continuous position, extrapolating
/// linearly beyond the grid.
Point eval_coords(const CoordMap& m, double x, double y);

struct InversionOptions {
  double tol = 1e-3;
  int max_iter = 50;
  double damping = 0.5;
};

struct InversionResult {
  CoordMap map;
  double max_residual = 0.0;
  int max_iterations_used = 0;
};

using PointMap = std::function<Point(Point)>;

/// Solves h(g(t)) = t for every target t. Newton steps with a finite
/// difference Jacobian; falls back to the damped fixed-point step
/// g <- g - damping * (h(g) - t) when a Newton step does not reduce the
/// residual. Throws NotConverged with the worst residual.
std::vector<Point> invert_points(const PointMap& h, std::span<const Point> targets,
                                 const InversionOptions& opt, double* max_residual = nullptr,
                                 int* max_iterations_used = nullptr);

/// Inverse of an analytic map, sampled on an H×W grid.
InversionResult invert_map(const PointMap& h, int height, int width,
                           const InversionOptions& opt = {});

/// Inverse of a dense map on its own grid.
InversionResult invert_map(const CoordMap& h, const InversionOptions& opt = {});

/// (x,y) + f(x,y) with bilinear lookup of f. Points must lie in
/// [0,W-1]x[0,H-1].
std::vector<Point> map_points_through_flow(std::span<const Point> points, const WarpField& f);

}  // namespace docgeo
