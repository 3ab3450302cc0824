#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "docgeo/annotate.hpp"
#include "docgeo/rng.hpp"
#include "docgeo/synthgen.hpp"

using namespace docgeo;
using namespace docgeo::annotate;

namespace {

Mask random_blobs(int h, int w, std::uint64_t seed, double p) {
  Rng rng(seed);
  Mask m(h, w);
  for (auto& v : m.data) v = rng.uniform() < p;
  return m;
}

Mask dilate_oracle(const Mask& m, int k) {
  Mask out(m.height, m.width);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      for (int d = -k / 2; d <= k / 2; ++d)
        if (x + d >= 0 && x + d < m.width && m.at(y, x + d)) out.at(y, x) = 1;
  return out;
}

// Recursive flood fill; boxes sorted by anchor.
void fill(const Mask& m, std::vector<int>& seen, int y, int x, BBox& b) {
  if (y < 0 || y >= m.height || x < 0 || x >= m.width) return;
  if (!m.at(y, x) || seen[m.index(y, x)]) return;
  seen[m.index(y, x)] = 1;
  b = {std::min(b.x0, x), std::min(b.y0, y), std::max(b.x1, x), std::max(b.y1, y)};
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) fill(m, seen, y + dy, x + dx, b);
}

std::vector<BBox> cc_oracle(const Mask& m) {
  std::vector<int> seen(m.pixels(), 0);
  std::vector<BBox> out;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(y, x) && !seen[m.index(y, x)]) {
        BBox b{x, y, x, y};
        fill(m, seen, y, x, b);
        out.push_back(b);
      }
  return out;
}

}  // namespace

TEST_CASE("binarize_adaptive") {
  Image flat(40, 40, 1, 0.8);
  for (auto v : binarize_adaptive(flat).data) CHECK(v == 0);

  Image bar(40, 60, 1, 1.0);
  for (int y = 18; y < 22; ++y)
    for (int x = 10; x < 50; ++x) bar.at(y, x) = 0.0;
  Mask m = binarize_adaptive(bar, 15, 0.05);
  // Direct 2D evaluation with replicated borders.
  const double sigma = 0.3 * (7 - 1) + 0.8;
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 60; ++x) {
      double s = 0.0, ws = 0.0;
      for (int u = -7; u <= 7; ++u)
        for (int v = -7; v <= 7; ++v) {
          double w = std::exp(-(u * u + v * v) / (2 * sigma * sigma));
          s += w * bar.at(std::clamp(y + u, 0, 39), std::clamp(x + v, 0, 59));
          ws += w;
        }
      CHECK(m.at(y, x) == (bar.at(y, x) < s / ws - 0.05 ? 1 : 0));
    }
  for (int y = 18; y < 22; ++y)
    for (int x = 10; x < 50; ++x) CHECK(m.at(y, x) == 1);

  CHECK_THROWS_AS(binarize_adaptive(bar, 14, 0.05), Error);
  CHECK_THROWS_AS(binarize_adaptive(Image(10, 10, 3), 15, 0.05), Error);
}

TEST_CASE("dilate_horizontal") {
  Mask m = random_blobs(20, 33, 1, 0.05);
  CHECK(dilate_horizontal(m, 1) == m);
  Mask one(3, 20);
  one.at(1, 10) = 1;
  Mask d = dilate_horizontal(one, 5);
  for (int x = 0; x < 20; ++x) CHECK(d.at(1, x) == (x >= 8 && x <= 12));
  Mask two(1, 20);
  two.at(0, 5) = two.at(0, 9) = 1;
  d = dilate_horizontal(two, 5);
  for (int x = 3; x <= 11; ++x) CHECK(d.at(0, x) == 1);
  for (int k : {3, 5, 9, 15}) CHECK(dilate_horizontal(m, k) == dilate_oracle(m, k));
  CHECK_THROWS_AS(dilate_horizontal(m, 4), Error);
  CHECK_THROWS_AS(dilate_horizontal(m, 0), Error);
}

TEST_CASE("connected_components") {
  CHECK(connected_components(Mask(10, 10)).empty());
  Mask r(20, 30);
  for (int y = 2; y <= 5; ++y)
    for (int x = 3; x <= 10; ++x) r.at(y, x) = 1;
  for (int y = 9; y <= 15; ++y)
    for (int x = 12; x <= 25; ++x) r.at(y, x) = 1;
  auto boxes = connected_components(r);
  REQUIRE(boxes.size() == 2);
  CHECK(boxes[0] == BBox{3, 2, 10, 5});
  CHECK(boxes[1] == BBox{12, 9, 25, 15});

  Mask diag(3, 3);
  diag.at(0, 0) = diag.at(1, 1) = diag.at(2, 2) = 1;
  CHECK(connected_components(diag).size() == 1);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Mask m = random_blobs(40, 50, seed + 100, 0.3);
    CHECK(connected_components(m) == cc_oracle(m));
  }
}

TEST_CASE("filter_boxes") {
  CHECK(filter_boxes({}, 256, 256).empty());
  CHECK(filter_boxes({BBox{0, 0, 49, 49}}, 256, 256).empty());
  CHECK(filter_boxes({BBox{10, 10, 109, 14}}, 256, 256).size() == 1);
  Rng rng(3);
  std::vector<BBox> boxes;
  for (int i = 0; i < 500; ++i) {
    int x0 = static_cast<int>(rng.uniform_int(0, 200)), y0 = static_cast<int>(rng.uniform_int(0, 200));
    boxes.push_back({x0, y0, x0 + static_cast<int>(rng.uniform_int(0, 55)),
                     y0 + static_cast<int>(rng.uniform_int(0, 20))});
  }
  auto kept = filter_boxes(boxes, 256, 256);
  CHECK(kept.size() <= boxes.size());
  CHECK_FALSE(kept.empty());
  for (const BBox& b : kept) {
    double w = b.x1 - b.x0 + 1, h = b.y1 - b.y0 + 1;
    CHECK(w / h >= 3.0);
    CHECK(h >= 2);
    CHECK(h <= 0.05 * 256);
    CHECK(w >= 0.03 * 256);
  }
}

TEST_CASE("boxes_to_centerlines") {
  CHECK(boxes_to_centerlines({}).empty());
  auto lines = boxes_to_centerlines({BBox{10, 20, 110, 26}});
  REQUIRE(lines.size() == 1);
  CHECK(lines[0].points.front() == Point{10, 23});
  CHECK(lines[0].points.back() == Point{110, 23});
  CHECK(lines[0].points.size() == 100 / 4 + 1);
  CHECK(lines[0].thickness == 6);
  CHECK(lines[0].length == 100);
  for (int w = 0; w < 30; ++w)
    CHECK(boxes_to_centerlines({BBox{3, 0, 3 + w, 4}})[0].points.size() ==
          static_cast<std::size_t>(w / 4 + 1));
}

TEST_CASE("rasterize_lines") {
  for (auto v : rasterize_lines({}, 10, 10).data) CHECK(v == 0);
  Textline l;
  l.points = {{5, 10}, {25, 10}};
  l.thickness = 3;
  Mask m = rasterize_lines({l}, 30, 40);
  for (int y = 0; y < 30; ++y) CHECK(m.at(y, 15) == (y >= 9 && y <= 11));

  // Brute force: dense samples along each segment, stamping discs.
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    Textline a;
    for (int k = 0; k < 4; ++k) a.points.push_back({rng.uniform(-5, 45), rng.uniform(-5, 35)});
    a.thickness = rng.uniform(1, 6);
    Mask got = rasterize_lines({a}, 30, 40);
    int count = 0;
    for (int y = 0; y < 30; ++y)
      for (int x = 0; x < 40; ++x) {
        double best = 1e9;
        for (std::size_t s = 1; s < a.points.size(); ++s)
          for (int q = 0; q <= 4000; ++q) {
            double u = q / 4000.0;
            double px = a.points[s - 1].x + u * (a.points[s].x - a.points[s - 1].x);
            double py = a.points[s - 1].y + u * (a.points[s].y - a.points[s - 1].y);
            best = std::min(best, std::hypot(px - x, py - y));
          }
        // Skip pixels too close to the boundary for the sampled oracle.
        if (std::abs(best - a.thickness / 2) < 0.02) continue;
        CHECK(got.at(y, x) == (best <= a.thickness / 2));
        count += best <= a.thickness / 2;
      }
    CHECK(count > 0);
  }
}

TEST_CASE("annotation of flat pages") {
  Image blank(128, 128, 3, 0.95);
  CHECK(annotate_distorted(blank, identity_flow(128, 128)).empty());

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto page = synthgen::make_flat_page(seed, 256, 256);
    TextlineSet found = annotate_distorted(page.image, identity_flow(256, 256));
    for (const Textline& l : found) {
      std::vector<double> ys;
      for (const Point& p : l.points) ys.push_back(p.y);
      std::nth_element(ys.begin(), ys.begin() + ys.size() / 2, ys.end());
      double med = ys[ys.size() / 2];
      for (const Point& p : l.points) CHECK(std::abs(p.y - med) <= 0.5);
    }
    AnnotationScore s = score_annotation(found, page.lines);
    CHECK(s.recall >= 0.8);
    CHECK(s.median_error <= 2.0);
  }
}

TEST_CASE("annotation through distortion") {
  std::vector<double> recalls;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    auto s = synthgen::generate_sample(seed, 256, 256);
    Image rect = apply_flow(s.distorted, s.gt_flow);
    TextlineSet found = annotate_distorted(rect, s.gt_flow);
    TextlineSet again = annotate_distorted(rect, s.gt_flow);
    CHECK(found == again);
    AnnotationScore sc = score_annotation(found, s.gt_lines);
    CHECK(sc.recall >= 0.8);
    CHECK(sc.median_error <= 2.0);
  }
}

TEST_CASE("score_annotation") {
  Textline a;
  a.points = {{0, 0}, {10, 0}, {20, 0}};
  Textline b = a;
  for (auto& p : b.points) p.y += 1.0;
  AnnotationScore s = score_annotation({b}, {a});
  CHECK(s.recall == 1.0);
  CHECK(s.median_error == doctest::Approx(1.0));
  s = score_annotation({}, {a});
  CHECK(s.recall == 0.0);
  for (auto& p : b.points) p.y += 10.0;
  CHECK(score_annotation({b}, {a}).recall == 0.0);
}
