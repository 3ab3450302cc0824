#include "docgeo/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "json.hpp"

#include "docgeo/rng.hpp"

namespace docgeo::synthgen {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string kind_name(DeformationKind kind) {
  switch (kind) {
    case DeformationKind::Curl: return "curl";
    case DeformationKind::Fold: return "fold";
    case DeformationKind::Flat: return "flat";
    case DeformationKind::Crumple: return "crumple";
  }
  return "flat";
}

DeformationKind kind_from_name(const std::string& name) {
  if (name == "curl") return DeformationKind::Curl;
  if (name == "fold") return DeformationKind::Fold;
  if (name == "flat") return DeformationKind::Flat;
  if (name == "crumple") return DeformationKind::Crumple;
  fail(ErrorCode::InvalidArgument, "unknown deformation kind: " + name);
}

void validate(const DeformationParams& p) {
  require(p.amplitude >= 0.0 && p.amplitude <= kMaxAmplitude, ErrorCode::InvalidArgument,
          "deformation amplitude must lie in [0, 0.35]");
  require(p.scale > 0.0 && p.scale <= 1.0, ErrorCode::InvalidArgument, "placement scale must lie in (0, 1]");
  if (p.kind == DeformationKind::Flat) {
    require(p.amplitude == 0.0, ErrorCode::InvalidArgument, "flat deformation must have amplitude 0");
  }
  if (p.kind == DeformationKind::Curl) {
    require(p.curl_center > 0.0 && p.curl_center < 1.0, ErrorCode::InvalidArgument,
            "curl centre must lie inside the page");
  }
}

// ---------------------------------------------------------------------------
// Flat page

FlatPage make_flat_page(std::uint64_t seed, int height, int width) {
  require(height >= 64 && width >= 64, ErrorCode::InvalidArgument, "make_flat_page: dimensions must be >= 64");
  Rng rng(derive_seed(seed, 1));
  const double s = std::min(height, width) / 256.0;

  FlatPage page;
  page.image = Image(height, width, 3);
  double tint[3];
  for (double& t : tint) t = rng.uniform(0.93, 1.0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double n = rng.uniform(-0.02, 0.02);
      for (int c = 0; c < 3; ++c) page.image.at(y, x, c) = std::clamp(tint[c] + n, 0.9, 1.0);
    }
  }

  int thickness = std::max(2, static_cast<int>(std::lround(s * rng.uniform(3.0, 6.0))));
  int gap = std::max(3, static_cast<int>(std::lround(thickness * rng.uniform(1.0, 2.0))));
  const int margin_y = static_cast<int>(std::lround(0.08 * height));
  const int margin_x = static_cast<int>(std::lround(0.08 * width));
  const int avail = height - 2 * margin_y;
  auto max_lines = [&] { return (avail + gap) / (thickness + gap); };
  while (max_lines() < 8 && gap > 3) --gap;
  while (max_lines() < 8 && thickness > 2) --thickness;
  const int n = std::min(rng.uniform_int(8, 20), max_lines());
  const int pitch_min = thickness + gap;
  const int pitch_max = std::max(pitch_min, (avail - thickness) / std::max(n - 1, 1));
  const int pitch = rng.uniform_int(pitch_min, std::min(pitch_max, pitch_min * 3));
  const int top = margin_y + rng.uniform_int(0, std::max(0, avail - (n - 1) * pitch - thickness));

  const int x_limit = width - margin_x - 1;
  for (int li = 0; li < n; ++li) {
    const int r0 = top + li * pitch;
    const int x_start = margin_x + rng.uniform_int(0, static_cast<int>(std::lround(0.03 * width)));
    const double frac = rng.uniform() < 0.25 ? rng.uniform(0.45, 0.9) : 1.0;
    const int x_stop = std::max(x_start + 8, x_start + static_cast<int>(frac * (x_limit - x_start)));
    int cur = x_start;
    int x_end = x_start;
    while (cur <= x_stop) {
      const int word_len = std::max(3, static_cast<int>(std::lround(s * rng.uniform(6.0, 28.0))));
      const int word_end = std::min(cur + word_len - 1, x_stop);
      int gx = cur;
      while (gx <= word_end) {
        const int glyph_w = std::max(2, static_cast<int>(std::lround(s * rng.uniform(3.0, 5.0))));
        const int glyph_end = std::min(gx + glyph_w - 1, word_end);
        const double ink = rng.uniform(0.05, 0.25);
        for (int x = gx; x <= glyph_end; ++x) {
          for (int y = r0; y < r0 + thickness; ++y) {
            for (int c = 0; c < 3; ++c) page.image.at(y, x, c) = ink;
          }
        }
        x_end = std::max(x_end, glyph_end);
        gx = glyph_end + (rng.uniform() < 0.6 ? 2 : 1);
      }
      cur = word_end + 1 + std::max(2, static_cast<int>(std::lround(s * rng.uniform(4.0, 7.0))));
    }
    Textline line;
    line.thickness = thickness;
    const double yc = r0 + (thickness - 1) / 2.0;
    for (int x = x_start; x <= x_end; x += 4) line.points.push_back({static_cast<double>(x), yc});
    line.length = x_end - x_start;
    page.lines.push_back(std::move(line));
  }
  return page;
}

// ---------------------------------------------------------------------------
// Deformation sampling

DeformationParams sample_deformation(std::uint64_t seed, const DeformationMix& mix) {
  const double total = mix.curl + mix.fold + mix.flat + mix.crumple;
  require(mix.curl >= 0 && mix.fold >= 0 && mix.flat >= 0 && mix.crumple >= 0 &&
              std::abs(total - 1.0) <= 1e-6,
          ErrorCode::InvalidArgument, "deformation mix must be non-negative and sum to 1");

  Rng kind_rng(derive_seed(seed, 100));
  const double u = kind_rng.uniform();
  DeformationKind kind = DeformationKind::Crumple;
  if (u < mix.curl) {
    kind = DeformationKind::Curl;
  } else if (u < mix.curl + mix.fold) {
    kind = DeformationKind::Fold;
  } else if (u < mix.curl + mix.fold + mix.flat) {
    kind = DeformationKind::Flat;
  } else if (mix.crumple == 0.0) {
    // Only reachable through rounding when the mix sums to 1 - tiny.
    kind = mix.flat > 0 ? DeformationKind::Flat : (mix.fold > 0 ? DeformationKind::Fold : DeformationKind::Curl);
  }

  for (int attempt = 0; attempt < 64; ++attempt) {
    Rng rng(derive_seed(seed, 101 + attempt));
    DeformationParams p;
    p.kind = kind;
    p.seed = seed;
    if (kind == DeformationKind::Flat) return p;

    switch (kind) {
      case DeformationKind::Curl:
        p.amplitude = rng.uniform(0.08, 0.3);
        p.curl_center = rng.uniform(0.3, 0.7);
        p.curl_sign = rng.sign();
        break;
      case DeformationKind::Fold:
        p.amplitude = rng.uniform(0.05, 0.2);
        p.fold_angle = rng.uniform(-0.6, 0.6) + (rng.uniform() < 0.3 ? std::numbers::pi / 2 : 0.0);
        p.fold_a = rng.uniform(0.3, 0.7);
        p.fold_b = rng.uniform(0.3, 0.7);
        break;
      case DeformationKind::Crumple: {
        p.amplitude = rng.uniform(0.04, 0.12);
        const int nb = rng.uniform_int(5, 9);
        for (int k = 0; k < nb; ++k) {
          Bump b;
          b.cx = rng.uniform();
          b.cy = rng.uniform();
          b.sigma = rng.uniform(0.1, 0.25);
          b.height = rng.uniform(-1.0, 1.0) * p.amplitude;
          p.bumps.push_back(b);
        }
        break;
      }
      case DeformationKind::Flat: break;
    }
    p.tilt_x = rng.uniform(-0.3, 0.3);
    p.tilt_y = rng.sign() * rng.uniform(0.2, 0.6);
    p.scale = rng.uniform(0.78, 0.86);
    p.rotation = rng.uniform(-0.06, 0.06);
    p.shear = rng.uniform(-0.03, 0.03);
    p.offset_x = rng.uniform(-0.03, 0.03);
    p.offset_y = rng.uniform(-0.03, 0.03);
    if (min_jacobian_determinant(p, 256, 256, 33) > 0.25 * p.scale * p.scale) return p;
  }
  fail(ErrorCode::NotConverged, "sample_deformation: no invertible draw after 64 attempts");
}

// ---------------------------------------------------------------------------
// Surface and projection

namespace {

constexpr double kFoldSoftness = 0.02;

double curl_curvature(const DeformationParams& p) {
  const double d = std::max(p.curl_center, 1.0 - p.curl_center);
  const double kmax = std::numbers::pi / (2 * d);
  auto height = [d](double k) { return (1 - std::cos(k * d)) / k; };
  if (p.amplitude <= 0.0) return 1e-9;
  if (height(kmax) <= p.amplitude) return kmax;
  double lo = 1e-9, hi = kmax;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    (height(mid) < p.amplitude ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

struct Surface {
  DeformationParams p;
  double kappa = 0.0;

  explicit Surface(const DeformationParams& params) : p(params) {
    if (p.kind == DeformationKind::Curl) kappa = curl_curvature(p);
  }

  std::array<double, 3> operator()(double a, double b) const {
    switch (p.kind) {
      case DeformationKind::Flat: return {a, b, 0.0};
      case DeformationKind::Curl: {
        // Cylinder with arc-length preserving X, continued along the tangent
        // outside the page.
        const double ac = std::clamp(a, 0.0, 1.0);
        const double th = kappa * (ac - p.curl_center);
        const double x = p.curl_center + std::sin(th) / kappa + std::cos(th) * (a - ac);
        const double z = p.curl_sign * ((1 - std::cos(th)) / kappa + std::sin(th) * (a - ac));
        return {x, b, z};
      }
      case DeformationKind::Fold: {
        const double d = (a - p.fold_a) * std::cos(p.fold_angle) + (b - p.fold_b) * std::sin(p.fold_angle);
        const double ridge = std::sqrt(d * d + kFoldSoftness * kFoldSoftness) - kFoldSoftness;
        return {a, b, p.amplitude * (1 - 2 * ridge)};
      }
      case DeformationKind::Crumple: {
        double z = 0.0;
        for (const Bump& bump : p.bumps) {
          const double r2 = (a - bump.cx) * (a - bump.cx) + (b - bump.cy) * (b - bump.cy);
          z += bump.height * std::exp(-r2 / (2 * bump.sigma * bump.sigma));
        }
        return {a, b, z};
      }
    }
    return {a, b, 0.0};
  }

  std::array<double, 2> project(double a, double b) const {
    const auto s = (*this)(a, b);
    return {s[0] + p.tilt_x * s[2], s[1] + p.tilt_y * s[2]};
  }
};

struct Projector {
  Surface surface;
  int height, width;
  double cu = 0.5, cv = 0.5, extent = 1.0;
  double m00 = 1, m01 = 0, m10 = 0, m11 = 1;

  Projector(const DeformationParams& params, int h, int w) : surface(params), height(h), width(w) {
    double umin = 1e9, umax = -1e9, vmin = 1e9, vmax = -1e9;
    constexpr int kGrid = 17;
    for (int i = 0; i < kGrid; ++i) {
      for (int j = 0; j < kGrid; ++j) {
        const auto uv = surface.project(j / double(kGrid - 1), i / double(kGrid - 1));
        umin = std::min(umin, uv[0]);
        umax = std::max(umax, uv[0]);
        vmin = std::min(vmin, uv[1]);
        vmax = std::max(vmax, uv[1]);
      }
    }
    cu = 0.5 * (umin + umax);
    cv = 0.5 * (vmin + vmax);
    extent = std::max({umax - umin, vmax - vmin, 1e-6});
    const double c = std::cos(params.rotation), s = std::sin(params.rotation);
    const double k = params.scale / extent;
    // k * R(rotation) * [[1, shear], [0, 1]]
    m00 = k * c;
    m01 = k * (c * params.shear - s);
    m10 = k * s;
    m11 = k * (s * params.shear + c);
  }

  Point operator()(Point flat) const {
    const double a = flat.x / (width - 1);
    const double b = flat.y / (height - 1);
    const auto uv = surface.project(a, b);
    const double du = (uv[0] - cu) * (width - 1);
    const double dv = (uv[1] - cv) * (height - 1);
    const double& p_off_x = surface.p.offset_x;
    const double& p_off_y = surface.p.offset_y;
    return {(width - 1) / 2.0 + p_off_x * width + m00 * du + m01 * dv,
            (height - 1) / 2.0 + p_off_y * height + m10 * du + m11 * dv};
  }
};

}  // namespace

std::array<double, 3> surface_point(const DeformationParams& params, double a, double b) {
  return Surface(params)(a, b);
}

PointMap forward_map(const DeformationParams& params, int height, int width) {
  validate(params);
  require(height >= 2 && width >= 2, ErrorCode::InvalidArgument, "forward_map: dimensions must be >= 2");
  if (params.kind == DeformationKind::Flat) return [](Point p) { return p; };
  return Projector(params, height, width);
}

double min_jacobian_determinant(const DeformationParams& params, int height, int width, int samples) {
  const PointMap h = forward_map(params, height, width);
  double worst = 1e300;
  const double step = 0.25;
  // The page plus a 25% apron, which covers every background pixel's preimage.
  for (int i = 0; i < samples; ++i) {
    for (int j = 0; j < samples; ++j) {
      const double x = (-0.25 + 1.5 * j / (samples - 1)) * (width - 1);
      const double y = (-0.25 + 1.5 * i / (samples - 1)) * (height - 1);
      const Point xp = h({x + step, y}), xm = h({x - step, y});
      const Point yp = h({x, y + step}), ym = h({x, y - step});
      const double j00 = (xp.x - xm.x) / (2 * step), j10 = (xp.y - xm.y) / (2 * step);
      const double j01 = (yp.x - ym.x) / (2 * step), j11 = (yp.y - ym.y) / (2 * step);
      worst = std::min(worst, j00 * j11 - j01 * j10);
    }
  }
  return worst;
}

DeformationMaps deformation_to_maps(const DeformationParams& params, int height, int width) {
  validate(params);
  require(height >= 2 && width >= 2, ErrorCode::InvalidArgument, "deformation_to_maps: dimensions must be >= 2");
  DeformationMaps maps;
  maps.page_mask = Mask(height, width, 1, 0);
  maps.coords = CoordMap3D(height, width, 3, 0.0f);
  const Surface surface(params);

  if (params.kind == DeformationKind::Flat) {
    maps.forward = identity_coords(height, width);
    maps.gt_flow = identity_flow(height, width);
    maps.inverse = maps.forward;
    std::fill(maps.page_mask.data.begin(), maps.page_mask.data.end(), 1);
  } else {
    require(min_jacobian_determinant(params, height, width) > 0.0, ErrorCode::InvalidArgument,
            "deformation is not invertible (non-positive Jacobian)");
    const PointMap h = forward_map(params, height, width);
    maps.forward = identity_coords(height, width);
    for (int i = 0; i < height; ++i) {
      for (int j = 0; j < width; ++j) {
        const Point q = h({double(j), double(i)});
        maps.forward.x[maps.forward.index(i, j)] = q.x;
        maps.forward.y[maps.forward.index(i, j)] = q.y;
      }
    }
    maps.gt_flow = coords_to_flow(maps.forward);
    InversionResult inv = invert_map(h, height, width, InversionOptions{});
    maps.inverse = std::move(inv.map);
    maps.inversion_residual = inv.max_residual;
    for (int i = 0; i < height; ++i) {
      for (int j = 0; j < width; ++j) {
        const Point g = maps.inverse.at(i, j);
        if (g.x >= -0.5 && g.x <= width - 0.5 && g.y >= -0.5 && g.y <= height - 0.5) {
          maps.page_mask.at(i, j) = 1;
        }
      }
    }
  }

  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      if (!maps.page_mask.at(i, j)) continue;
      const Point g = maps.inverse.at(i, j);
      const auto s = surface(g.x / (width - 1), g.y / (height - 1));
      maps.coords.at(i, j, 0) = static_cast<float>(std::clamp(s[0], 0.0, 1.0));
      maps.coords.at(i, j, 1) = static_cast<float>(std::clamp(s[1], 0.0, 1.0));
      maps.coords.at(i, j, 2) = static_cast<float>(std::clamp(kZOffset + s[2], 0.0, 1.0));
    }
  }
  return maps;
}

// ---------------------------------------------------------------------------
// Backgrounds and rendering

Image make_background(std::uint64_t seed, int height, int width) {
  Rng rng(derive_seed(seed, 2));
  Image bg(height, width, 3);
  double base[3];
  for (double& b : base) b = rng.uniform(0.05, 0.8);
  const int style = rng.uniform_int(0, 2);
  struct Blob {
    double x, y, r, col[3];
  };
  std::vector<Blob> blobs;
  if (style == 1) {
    const int nb = rng.uniform_int(4, 8);
    for (int k = 0; k < nb; ++k) {
      Blob b{rng.uniform(0, width), rng.uniform(0, height), rng.uniform(0.1, 0.4) * std::max(height, width), {}};
      for (double& c : b.col) c = rng.uniform(-0.3, 0.3);
      blobs.push_back(b);
    }
  }
  const double period = rng.uniform(6.0, 20.0);
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double stripe = rng.uniform(0.05, 0.2);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double noise = rng.uniform(-0.05, 0.05);
      for (int c = 0; c < 3; ++c) {
        double v = base[c] + noise;
        if (style == 1) {
          for (const Blob& b : blobs) {
            const double r2 = ((x - b.x) * (x - b.x) + (y - b.y) * (y - b.y)) / (b.r * b.r);
            v += b.col[c] * std::exp(-r2);
          }
        } else if (style == 2) {
          const double t = (x * std::cos(angle) + y * std::sin(angle)) / period;
          v += stripe * (std::sin(2 * std::numbers::pi * t) > 0 ? 1.0 : -1.0);
        }
        bg.at(y, x, c) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return bg;
}

DistortedSample render_sample(const Image& flat, const TextlineSet& lines, const DeformationParams& params,
                              const Image& background) {
  require(flat.channels == 3, ErrorCode::ShapeMismatch, "render_sample: flat page must be RGB");
  require(background.channels == 3 && background.height >= flat.height && background.width >= flat.width,
          ErrorCode::ShapeMismatch, "render_sample: background must be RGB and at least as large as the page");
  const int h = flat.height;
  const int w = flat.width;
  DeformationMaps maps = deformation_to_maps(params, h, w);

  DistortedSample s;
  s.flat = flat;
  s.params = params;
  s.distorted = Image(h, w, 3);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      if (maps.page_mask.at(i, j)) {
        const Point g = maps.inverse.at(i, j);
        for (int c = 0; c < 3; ++c) s.distorted.at(i, j, c) = sample_bilinear(flat, g.x, g.y, c);
      } else {
        for (int c = 0; c < 3; ++c) s.distorted.at(i, j, c) = background.at(i, j, c);
      }
    }
  }
  const PointMap fwd = forward_map(params, h, w);
  const double thickness_scale = params.kind == DeformationKind::Flat ? 1.0 : params.scale;
  for (const Textline& line : lines) {
    Textline mapped;
    mapped.length = line.length;
    mapped.thickness = line.thickness * thickness_scale;
    for (const Point& p : line.points) mapped.points.push_back(fwd(p));
    s.gt_lines.push_back(std::move(mapped));
  }
  s.gt_flow = std::move(maps.gt_flow);
  s.gt_coords = std::move(maps.coords);
  s.gt_mask = std::move(maps.page_mask);
  s.inversion_residual = maps.inversion_residual;
  return s;
}

DistortedSample generate_sample(std::uint64_t seed, int height, int width, const DeformationMix& mix) {
  FlatPage page = make_flat_page(derive_seed(seed, 10), height, width);
  const DeformationParams params = sample_deformation(derive_seed(seed, 11), mix);
  const Image bg = make_background(derive_seed(seed, 12), height, width);
  DistortedSample s = render_sample(page.image, page.lines, params, bg);
  s.params.seed = seed;
  return s;
}

Mask rectified_page_region(const DistortedSample& sample) {
  const WarpField& f = sample.gt_flow;
  Mask region(f.height, f.width, 1, 0);
  const Mask& m = sample.gt_mask;
  auto on_page = [&](int y, int x) {
    x = std::clamp(x, 0, m.width - 1);
    y = std::clamp(y, 0, m.height - 1);
    return m.at(y, x) != 0;
  };
  for (int i = 0; i < f.height; ++i) {
    for (int j = 0; j < f.width; ++j) {
      const double x = j + f.dx[f.index(i, j)];
      const double y = i + f.dy[f.index(i, j)];
      const int x0 = static_cast<int>(std::floor(x));
      const int y0 = static_cast<int>(std::floor(y));
      region.at(i, j) = on_page(y0, x0) && on_page(y0, x0 + 1) && on_page(y0 + 1, x0) && on_page(y0 + 1, x0 + 1);
    }
  }
  return region;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

nlohmann::json params_json(const DeformationParams& p) {
  nlohmann::json j;
  j["kind"] = kind_name(p.kind);
  j["seed"] = p.seed;
  j["amplitude"] = p.amplitude;
  j["curl_center"] = p.curl_center;
  j["curl_sign"] = p.curl_sign;
  j["fold_angle"] = p.fold_angle;
  j["fold_a"] = p.fold_a;
  j["fold_b"] = p.fold_b;
  j["bumps"] = nlohmann::json::array();
  for (const Bump& b : p.bumps) j["bumps"].push_back({b.cx, b.cy, b.sigma, b.height});
  j["tilt_x"] = p.tilt_x;
  j["tilt_y"] = p.tilt_y;
  j["scale"] = p.scale;
  j["rotation"] = p.rotation;
  j["shear"] = p.shear;
  j["offset_x"] = p.offset_x;
  j["offset_y"] = p.offset_y;
  return j;
}

DeformationParams params_from(const nlohmann::json& j) {
  DeformationParams p;
  p.kind = kind_from_name(j.at("kind").get<std::string>());
  p.seed = j.at("seed").get<std::uint64_t>();
  p.amplitude = j.at("amplitude").get<double>();
  p.curl_center = j.at("curl_center").get<double>();
  p.curl_sign = j.at("curl_sign").get<double>();
  p.fold_angle = j.at("fold_angle").get<double>();
  p.fold_a = j.at("fold_a").get<double>();
  p.fold_b = j.at("fold_b").get<double>();
  for (const auto& b : j.at("bumps")) p.bumps.push_back({b[0], b[1], b[2], b[3]});
  p.tilt_x = j.at("tilt_x").get<double>();
  p.tilt_y = j.at("tilt_y").get<double>();
  p.scale = j.at("scale").get<double>();
  p.rotation = j.at("rotation").get<double>();
  p.shear = j.at("shear").get<double>();
  p.offset_x = j.at("offset_x").get<double>();
  p.offset_y = j.at("offset_y").get<double>();
  return p;
}

}  // namespace

std::string params_to_json(const DeformationParams& params) { return params_json(params).dump(); }

DeformationParams params_from_json(const std::string& text) {
  try {
    return params_from(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("bad deformation params: ") + e.what());
  }
}

void write_sample(const std::filesystem::path& dir, const DistortedSample& s) {
  std::filesystem::create_directories(dir);
  formats::write_png(dir / "img.png", s.distorted);
  formats::write_png(dir / "flat.png", s.flat);
  formats::write_mask_png(dir / "mask.png", s.gt_mask);
  formats::write_warp_field(dir / "flow.dgwf", s.gt_flow);
  formats::write_coord_map(dir / "coords.dg3d", s.gt_coords);
  formats::write_lines(dir / "lines.jsonl", s.gt_lines);
  nlohmann::json meta;
  meta["seed"] = s.params.seed;
  meta["height"] = s.flat.height;
  meta["width"] = s.flat.width;
  meta["params"] = params_json(s.params);
  meta["inversion_residual"] = s.inversion_residual;
  meta["coords_convention"] = {
      {"X", "arc-length page coordinate across the width, [0,1]"},
      {"Y", "page coordinate down the height, [0,1]"},
      {"Z", "surface height (fraction of page width) + 0.5, clamped to [0,1]"},
      {"background", 0.0}};
  meta["flow_convention"] = "backward: rectified (row i, col j) samples img.png at (j + dx, i + dy)";
  formats::write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");
}

DistortedSample read_sample(const std::filesystem::path& dir) {
  DistortedSample s;
  s.distorted = formats::read_png(dir / "img.png");
  s.flat = formats::read_png(dir / "flat.png");
  s.gt_mask = formats::read_mask_png(dir / "mask.png");
  s.gt_flow = formats::read_warp_field(dir / "flow.dgwf");
  if (std::filesystem::exists(dir / "coords.dg3d")) s.gt_coords = formats::read_coord_map(dir / "coords.dg3d");
  if (std::filesystem::exists(dir / "lines.jsonl")) s.gt_lines = formats::read_lines(dir / "lines.jsonl");
  const auto meta = nlohmann::json::parse(formats::read_text(dir / "meta.json"), nullptr, false);
  require(!meta.is_discarded(), ErrorCode::Format, "bad meta.json in " + dir.string());
  s.params = params_from(meta.at("params"));
  s.inversion_residual = meta.value("inversion_residual", 0.0);
  return s;
}

}  // namespace docgeo::synthgen
