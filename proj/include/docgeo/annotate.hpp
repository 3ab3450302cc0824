#pragma once

#include "docgeo/geometry.hpp"
#include "docgeo/textline.hpp"

namespace docgeo::annotate {

struct AnnotateOptions {
  int window = 15;
  double offset = 0.05;
  int kernel = 9;
  double min_aspect = 3.0;
  int min_height = 2;
  double max_height_frac = 0.05;
  double min_width_frac = 0.03;
};

/// Foreground (1) where value < Gaussian-weighted local mean - offset.
/// Replicated borders; sigma follows 0.3 * ((window - 1) / 2 - 1) + 0.8.
Mask binarize_adaptive(const Image& gray, int window = 15, double offset = 0.05);

/// Dilation with a 1 x kernel_len structuring element.
Mask dilate_horizontal(const Mask& bin, int kernel_len = 9);

/// 8-connected components, ordered by the raster position of each
/// component's first pixel.
std::vector<BBox> connected_components(const Mask& bin);

/// Box sizes are measured in pixels (x1 - x0 + 1, y1 - y0 + 1).
std::vector<BBox> filter_boxes(const std::vector<BBox>& boxes, int height, int width,
                               const AnnotateOptions& opt = {});

/// One horizontal polyline per box at y = (y0 + y1) / 2, points every 4 px
/// from x0, thickness y1 - y0.
TextlineSet boxes_to_centerlines(const std::vector<BBox>& boxes);

/// Horizontal lines in the rectified image, before mapping.
TextlineSet detect_lines(const Image& rectified, const AnnotateOptions& opt = {});

/// Detects lines in the rectified image and maps them into the distorted
/// image through the backward flow. Thickness is scaled by the local area
/// change of the map.
TextlineSet annotate_distorted(const Image& rectified, const WarpField& gt_flow,
                               const AnnotateOptions& opt = {});

/// Pixels whose centre lies within thickness / 2 of a polyline.
Mask rasterize_lines(const TextlineSet& lines, int height, int width);

double point_polyline_distance(Point p, const std::vector<Point>& line);

struct AnnotationScore {
  double recall = 0.0;
  double median_error = 0.0;  // over covered reference points, px
  int matched = 0;
  int total = 0;
};

/// A reference point is covered when some detected polyline lies within
/// `tol` of it; a reference line is recalled when at least half its points
/// are covered.
AnnotationScore score_annotation(const TextlineSet& detected, const TextlineSet& reference,
                                 double tol = 3.0);

}  // namespace docgeo::annotate
