#include <array>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "docgeo/formats.hpp"
#include "docgeo/synthgen.hpp"

using namespace docgeo;
using namespace docgeo::synthgen;

namespace fs = std::filesystem;

TEST_CASE("make_flat_page is deterministic") {
  const FlatPage a = make_flat_page(0, 256, 256);
  const FlatPage b = make_flat_page(0, 256, 256);
  CHECK(a.image == b.image);
  CHECK(a.lines == b.lines);
  const FlatPage c = make_flat_page(1, 256, 256);
  CHECK_FALSE(a.image == c.image);
  CHECK_THROWS_AS(make_flat_page(0, 63, 256), Error);
}

TEST_CASE("make_flat_page strokes are dark and the page is bright") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const int H = seed % 2 ? 128 : 256, W = seed % 3 ? 256 : 192;
    const FlatPage page = make_flat_page(seed, H, W);
    REQUIRE(page.lines.size() >= 8);
    REQUIRE(page.lines.size() <= 20);
    Mask band(H, W, 1, 0);
    for (const Textline& line : page.lines) {
      REQUIRE(line.points.size() >= 2);
      const double half = (line.thickness - 1) / 2.0;
      const int y0 = static_cast<int>(std::lround(line.points[0].y - half));
      const int y1 = static_cast<int>(std::lround(line.points[0].y + half));
      const int x0 = static_cast<int>(line.points.front().x);
      const int x1 = x0 + static_cast<int>(line.length);
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) band.at(y, x) = 1;
      // The line starts and ends on ink.
      CHECK(page.image.at(y0, x0, 0) <= 0.3);
      CHECK(page.image.at(y1, x1, 0) <= 0.3);
    }
    int dark = 0;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        for (int c = 0; c < 3; ++c) {
          const double v = page.image.at(y, x, c);
          if (!band.at(y, x)) {
            CHECK(v >= 0.9);
          } else {
            CHECK((v <= 0.3 || v >= 0.9));
            dark += v <= 0.3;
          }
        }
      }
    }
    CHECK(dark > 0);
  }
}

TEST_CASE("sample_deformation honours the mix") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    CHECK(sample_deformation(seed, {1, 0, 0, 0}).kind == DeformationKind::Curl);
  }
  CHECK_THROWS_AS(sample_deformation(0, {0.5, 0.5, 0.5, 0}), Error);
  CHECK_THROWS_AS(sample_deformation(0, {1.2, -0.2, 0, 0}), Error);

  std::array<int, 4> counts{};
  const int n = 10000;
  for (int seed = 0; seed < n; ++seed) {
    const DeformationParams p = sample_deformation(static_cast<std::uint64_t>(seed));
    counts[static_cast<int>(p.kind)]++;
    CHECK(p.amplitude >= 0.0);
    CHECK(p.amplitude <= kMaxAmplitude);
    if (p.kind == DeformationKind::Flat) CHECK(p.amplitude == 0.0);
  }
  // Enum order: curl, fold, flat, crumple.
  const std::array<double, 4> expected{0.4, 0.4, 0.1, 0.1};
  for (int k = 0; k < 4; ++k) CHECK(std::abs(counts[k] / double(n) - expected[k]) <= 0.03);
}

TEST_CASE("flat deformation gives the identity flow and a constant Z") {
  DeformationParams flat;
  const DeformationMaps maps = deformation_to_maps(flat, 64, 80);
  CHECK(maps.gt_flow == identity_flow(64, 80));
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 80; ++j) CHECK(maps.coords.at(i, j, 2) == static_cast<float>(kZOffset));
}

TEST_CASE("curl amplitude increases the maximal horizontal displacement") {
  DeformationParams p = sample_deformation(3, {1, 0, 0, 0});
  p.tilt_x = 0.0;
  double prev = -1.0;
  for (double amp : {0.05, 0.15, 0.25, 0.3}) {
    p.amplitude = amp;
    const DeformationMaps maps = deformation_to_maps(p, 96, 96);
    double max_dx = 0.0;
    for (float v : maps.gt_flow.dx) max_dx = std::max(max_dx, static_cast<double>(std::abs(v)));
    CHECK(max_dx > prev);
    prev = max_dx;
  }
}

TEST_CASE("forward maps have a positive Jacobian on every grid point") {
  for (std::uint64_t seed = 0; seed < 24; ++seed) {
    const DeformationParams p = sample_deformation(seed);
    const DeformationMaps maps = deformation_to_maps(p, 64, 64);
    const CoordMap& h = maps.forward;
    for (int i = 0; i < 64; ++i) {
      for (int j = 0; j < 64; ++j) {
        // One-sided differences at the border.
        const int jl = std::max(j - 1, 0), jr = std::min(j + 1, 63);
        const int iu = std::max(i - 1, 0), id = std::min(i + 1, 63);
        const double j00 = (h.at(i, jr).x - h.at(i, jl).x) / (jr - jl);
        const double j10 = (h.at(i, jr).y - h.at(i, jl).y) / (jr - jl);
        const double j01 = (h.at(id, j).x - h.at(iu, j).x) / (id - iu);
        const double j11 = (h.at(id, j).y - h.at(iu, j).y) / (id - iu);
        CHECK(j00 * j11 - j01 * j10 > 0.0);
      }
    }
  }
}

TEST_CASE("render_sample with flat params reproduces the page") {
  const FlatPage page = make_flat_page(5, 96, 96);
  const Image bg = make_background(5, 96, 96);
  const DistortedSample s = render_sample(page.image, page.lines, DeformationParams{}, bg);
  CHECK(s.distorted == page.image);
  for (auto v : s.gt_mask.data) CHECK(v == 1);
  CHECK(s.gt_lines == page.lines);
}

TEST_CASE("rendered samples are self-consistent") {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const DistortedSample s = generate_sample(seed, 128, 128);
    CHECK(s.inversion_residual <= 1e-3);
    // Lines mapped into the distorted image lie on the page.
    for (const Textline& line : s.gt_lines) {
      for (const Point& p : line.points) {
        const int x = static_cast<int>(std::lround(p.x)), y = static_cast<int>(std::lround(p.y));
        REQUIRE(x >= 0);
        REQUIRE(y >= 0);
        REQUIRE(x < 128);
        REQUIRE(y < 128);
        CHECK(s.gt_mask.at(y, x) == 1);
      }
    }
    // 3D coordinates: in range, zero off the page, no tearing.
    for (int i = 0; i < 128; ++i) {
      for (int j = 0; j < 128; ++j) {
        for (int c = 0; c < 3; ++c) {
          const float v = s.gt_coords.at(i, j, c);
          CHECK(v >= 0.0f);
          CHECK(v <= 1.0f);
          if (!s.gt_mask.at(i, j)) CHECK(v == 0.0f);
          if (j + 1 < 128 && s.gt_mask.at(i, j) && s.gt_mask.at(i, j + 1)) {
            CHECK(std::abs(s.gt_coords.at(i, j + 1, c) - v) < 0.05f);
          }
        }
      }
    }
    // Rectifying with the ground-truth flow recovers the page.
    const Image rect = apply_flow(s.distorted, s.gt_flow);
    const Mask region = rectified_page_region(s);
    double err = 0.0, raw = 0.0;
    int n = 0;
    for (int i = 0; i < 128; ++i)
      for (int j = 0; j < 128; ++j)
        if (region.at(i, j)) {
          err += std::abs(rect.at(i, j, 0) - s.flat.at(i, j, 0));
          raw += std::abs(s.distorted.at(i, j, 0) - s.flat.at(i, j, 0));
          ++n;
        }
    CHECK(n > 128 * 128 * 0.9);
    CHECK(err / n < 0.1);
    if (s.params.kind != DeformationKind::Flat) CHECK(err < 0.6 * raw);
  }
}

TEST_CASE("sample directories round-trip and are deterministic") {
  const fs::path root = fs::temp_directory_path() / "docgeo_test_synthgen";
  fs::remove_all(root);
  const DistortedSample s = generate_sample(42, 96, 96);
  write_sample(root / "a", s);
  write_sample(root / "b", generate_sample(42, 96, 96));
  for (const char* name : {"img.png", "flat.png", "mask.png", "flow.dgwf", "coords.dg3d", "lines.jsonl", "meta.json"}) {
    CHECK(formats::read_file(root / "a" / name) == formats::read_file(root / "b" / name));
  }
  const DistortedSample r = read_sample(root / "a");
  CHECK(r.gt_flow == s.gt_flow);
  CHECK(r.gt_coords == s.gt_coords);
  CHECK(r.gt_mask == s.gt_mask);
  CHECK(r.params.kind == s.params.kind);
  CHECK(r.params.amplitude == s.params.amplitude);
  CHECK(r.gt_lines == s.gt_lines);
  fs::remove_all(root);
}
