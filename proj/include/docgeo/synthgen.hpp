#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "docgeo/formats.hpp"
#include "docgeo/geometry.hpp"
#include "docgeo/textline.hpp"

namespace docgeo::synthgen {

enum class DeformationKind { Curl, Fold, Flat, Crumple };

std::string kind_name(DeformationKind kind);
DeformationKind kind_from_name(const std::string& name);

/// Proportions of curl / fold / flat / crumple samples.
struct DeformationMix {
  double curl = 0.4;
  double fold = 0.4;
  double flat = 0.1;
  double crumple = 0.1;
};

struct Bump {
  double cx = 0.5, cy = 0.5, sigma = 0.2, height = 0.0;
};

/// Parametric page deformation. Surface coordinates are normalized so the
/// flat page spans [0,1]^2; the image projection is oblique
/// (u,v) = (X + tilt_x Z, Y + tilt_y Z) followed by a similarity-like
/// placement in pixels.
struct DeformationParams {
  DeformationKind kind = DeformationKind::Flat;
  std::uint64_t seed = 0;
  double amplitude = 0.0;  // fraction of page width, in [0, 0.35]

  double curl_center = 0.5;
  double curl_sign = 1.0;

  double fold_angle = 0.0;  // radians, direction of the fold-line normal
  double fold_a = 0.5;
  double fold_b = 0.5;

  std::vector<Bump> bumps;

  double tilt_x = 0.0;
  double tilt_y = 0.0;
  double scale = 1.0;
  double rotation = 0.0;  // radians
  double shear = 0.0;
  double offset_x = 0.0;  // fraction of image width
  double offset_y = 0.0;  // fraction of image height
};

constexpr double kMaxAmplitude = 0.35;
/// Z is stored as 0.5 + Z in CoordMap3D.
constexpr double kZOffset = 0.5;

void validate(const DeformationParams& params);

/// White page with glyph-textured dark bars. Deterministic in seed.
struct FlatPage {
  Image image;
  TextlineSet lines;
};
FlatPage make_flat_page(std::uint64_t seed, int height, int width);

/// Draws a kind from `mix` and parameters within bounds; draws whose
/// forward map is not invertible on the page are rejected and redrawn.
DeformationParams sample_deformation(std::uint64_t seed, const DeformationMix& mix = {});

/// Surface point (X,Y,Z) for normalized page coordinates (a,b).
std::array<double, 3> surface_point(const DeformationParams& params, double a, double b);

/// Analytic forward map: flat pixel -> distorted pixel.
PointMap forward_map(const DeformationParams& params, int height, int width);

struct DeformationMaps {
  CoordMap forward;    // on the flat grid
  WarpField gt_flow;   // forward - identity, on the rectified (flat) grid
  CoordMap inverse;    // on the distorted grid: distorted pixel -> flat pixel
  Mask page_mask;      // distorted pixels covered by the page
  CoordMap3D coords;   // per distorted pixel, zero outside the page
  double inversion_residual = 0.0;
};

/// Minimum Jacobian determinant of the forward map over the page
/// (finite differences on a regular grid).
double min_jacobian_determinant(const DeformationParams& params, int height, int width, int samples = 65);

DeformationMaps deformation_to_maps(const DeformationParams& params, int height, int width);

Image make_background(std::uint64_t seed, int height, int width);

struct DistortedSample {
  Image distorted;
  Image flat;
  WarpField gt_flow;
  CoordMap3D gt_coords;
  Mask gt_mask;
  TextlineSet gt_lines;
  DeformationParams params;
  double inversion_residual = 0.0;
};

DistortedSample render_sample(const Image& flat, const TextlineSet& lines,
                              const DeformationParams& params, const Image& background);

/// Full generator for one seed: page, deformation and background streams
/// are derived from the seed.
DistortedSample generate_sample(std::uint64_t seed, int height, int width,
                                const DeformationMix& mix = {});

/// Rectified pixels whose sampling footprint lies fully on the page.
Mask rectified_page_region(const DistortedSample& sample);

/// Sample directory IO (img.png, flat.png, mask.png, flow.dgwf, coords.dg3d,
/// lines.jsonl, meta.json).
void write_sample(const std::filesystem::path& dir, const DistortedSample& sample);
DistortedSample read_sample(const std::filesystem::path& dir);

std::string params_to_json(const DeformationParams& params);
DeformationParams params_from_json(const std::string& text);

/// Stateless seed derivation (splitmix64).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace docgeo::synthgen
