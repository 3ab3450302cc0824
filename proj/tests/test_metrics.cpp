#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>

#include "docgeo/metrics.hpp"
#include "docgeo/rng.hpp"
#include "docgeo/synthgen.hpp"

using namespace docgeo;
using namespace docgeo::metrics;

namespace {

Image random_image(int h, int w, std::uint64_t seed, int c = 1) {
  Rng rng(seed);
  Image img(h, w, c);
  // Smooth-ish content so the pyramid levels carry structure.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k)
        img.at(y, x, k) = 0.5 + 0.25 * std::sin(0.11 * x + 0.07 * y + k) +
                          0.2 * (rng.uniform() - 0.5);
  return img;
}

Image add_noise(const Image& img, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  Image out = img;
  for (double& v : out.data) v = std::clamp(v + sigma * rng.normal(), 0.0, 1.0);
  return out;
}

// Plain recursive Levenshtein with memo.
int lev_oracle(const std::u32string& a, const std::u32string& b) {
  std::map<std::pair<std::size_t, std::size_t>, int> memo;
  std::function<int(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> int {
    if (i == a.size()) return static_cast<int>(b.size() - j);
    if (j == b.size()) return static_cast<int>(a.size() - i);
    auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    int r = std::min({go(i + 1, j) + 1, go(i, j + 1) + 1, go(i + 1, j + 1) + (a[i] != b[j])});
    memo[key] = r;
    return r;
  };
  return go(0, 0);
}

std::u32string random_string(Rng& rng, int max_len) {
  std::u32string s;
  int n = static_cast<int>(rng.uniform_int(0, max_len));
  for (int i = 0; i < n; ++i) s.push_back(U'a' + static_cast<char32_t>(rng.uniform_int(0, 3)));
  return s;
}

}  // namespace

TEST_CASE("resize_to_area") {
  Image a(748, 800);
  Image r = resize_to_area(a);
  CHECK(r.height == 748);
  CHECK(r.width == 800);
  Image b(374, 400);
  r = resize_to_area(b);
  CHECK(r.height == 748);
  CHECK(r.width == 800);
  Image c(300, 517);
  r = resize_to_area(c);
  CHECK(std::abs(r.height * static_cast<double>(r.width) - kEvalArea) / kEvalArea < 0.005);
  CHECK(std::abs(static_cast<double>(r.width) / r.height - 517.0 / 300.0) < 0.01);
}

TEST_CASE("ssim basics") {
  Image x = random_image(64, 64, 1);
  CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
  Image y = add_noise(x, 0.1, 2);
  CHECK(std::abs(ssim(x, y) - ssim(y, x)) < 1e-9);
  CHECK(ssim(x, y) < 1.0);

  Image cb(32, 32), inv(32, 32);
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j) {
      cb.at(i, j) = (i + j) % 2;
      inv.at(i, j) = 1.0 - cb.at(i, j);
    }
  CHECK(ssim(cb, inv) < 0.1);
  CHECK_THROWS_AS(ssim(x, Image(64, 63)), Error);
  CHECK_THROWS_AS(ssim(Image(8, 8), Image(8, 8)), Error);
}

TEST_CASE("ssim matches a direct windowed computation") {
  Image a = random_image(15, 13, 3), b = add_noise(a, 0.2, 4);
  // Direct 2D window sums at every valid position.
  double sigma = 1.5, total = 0.0;
  double w[11][11], ws = 0.0;
  for (int u = 0; u < 11; ++u)
    for (int v = 0; v < 11; ++v) ws += w[u][v] = std::exp(-((u - 5) * (u - 5) + (v - 5) * (v - 5)) / (2 * sigma * sigma));
  int count = 0;
  for (int y = 0; y + 11 <= 15; ++y)
    for (int x = 0; x + 11 <= 13; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int u = 0; u < 11; ++u)
        for (int v = 0; v < 11; ++v) {
          double k = w[u][v] / ws, p = a.at(y + u, x + v), q = b.at(y + u, x + v);
          ma += k * p;
          mb += k * q;
          saa += k * p * p;
          sbb += k * q * q;
          sab += k * p * q;
        }
      double c1 = 1e-4, c2 = 9e-4;
      total += (2 * ma * mb + c1) * (2 * (sab - ma * mb) + c2) /
               ((ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2));
      ++count;
    }
  CHECK(ssim(a, b) == doctest::Approx(total / count).epsilon(1e-10));
}

TEST_CASE("ms_ssim") {
  double sum = 0.0;
  for (double w : kMsSsimWeights) sum += w;
  CHECK(std::abs(sum - 1.0001) < 1e-12);
  CHECK(kMsSsimWeights[0] == 0.0448);
  CHECK(kMsSsimWeights[4] == 0.1333);

  Image x = random_image(192, 200, 5, 3);
  MsSsimResult r = ms_ssim_detailed(x, x);
  CHECK(r.levels == 5);
  CHECK(std::abs(r.value - 1.0) <= 1e-9);

  double s05 = ms_ssim(x, add_noise(x, 0.05, 6));
  double s10 = ms_ssim(x, add_noise(x, 0.10, 6));
  CHECK(s05 < 1.0);
  CHECK(s10 < s05);
  CHECK(s10 >= 0.0);

  // Small images drop the coarse levels.
  Image small = random_image(48, 48, 7);
  r = ms_ssim_detailed(small, add_noise(small, 0.05, 8));
  CHECK(r.levels == 3);
  CHECK(r.value >= 0.0);
  CHECK(r.value <= 1.0);
  CHECK_THROWS_AS(ms_ssim(Image(10, 10), Image(10, 10)), Error);
}

TEST_CASE("ms_ssim stays in [0,1] on synthetic samples") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto s = synthgen::generate_sample(seed, 192, 192);
    double v = ms_ssim(s.distorted, s.flat);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("local distortion") {
  CoordMap id = identity_coords(20, 30);
  CHECK(local_distortion(id) == 0.0);
  CoordMap shift = id;
  for (auto& v : shift.x) v += 3.0;
  for (auto& v : shift.y) v += 4.0;
  CHECK(local_distortion(shift) == 5.0);

  Rng rng(9);
  CoordMap rnd = id;
  double direct = 0.0;
  Mask valid(20, 30);
  int n = 0;
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 30; ++j) {
      double dx = rng.uniform(-4, 4), dy = rng.uniform(-4, 4);
      rnd.x[rnd.index(i, j)] += dx;
      rnd.y[rnd.index(i, j)] += dy;
      if ((i + j) % 3) {
        valid.at(i, j) = 1;
        direct += std::sqrt(dx * dx + dy * dy);
        ++n;
      }
    }
  CHECK(local_distortion(rnd, valid) == doctest::Approx(direct / n).epsilon(1e-12));
  CHECK_THROWS_AS(local_distortion(id, Mask(20, 30)), Error);
}

TEST_CASE("matches from ground-truth flows give zero distortion") {
  auto s = synthgen::generate_sample(3, 96, 96);
  FlowMatch m = matches_from_flows(s.gt_flow, s.gt_flow);
  CHECK(local_distortion(m.matches, m.valid) < 1e-3);

  // pred(p) = gt(p + (2,0)): ref pixel q is found at q - (2,0).
  CoordMap gc = flow_to_coords(s.gt_flow), pc = gc;
  for (int i = 0; i < 96; ++i)
    for (int j = 0; j < 96; ++j) {
      Point p = eval_coords(gc, j + 2.0, i);
      pc.x[pc.index(i, j)] = p.x;
      pc.y[pc.index(i, j)] = p.y;
    }
  m = matches_from_flows(s.gt_flow, coords_to_flow(pc));
  for (int i = 0; i < 96; ++i)
    for (int j = 0; j < 2; ++j) m.valid.at(i, j) = 0;
  CHECK(local_distortion(m.matches, m.valid) == doctest::Approx(2.0).epsilon(1e-3));
}

TEST_CASE("dense_match") {
  auto s = synthgen::generate_sample(11, 128, 128);
  const Image& ref = s.flat;

  DenseMatch self = dense_match(ref, ref);
  CHECK_FALSE(self.degenerate);
  std::vector<double> mags;
  for (int i = 0; i < 128; ++i)
    for (int j = 0; j < 128; ++j) {
      Point p = self.matches.at(i, j);
      mags.push_back(std::hypot(p.x - j, p.y - i));
    }
  std::nth_element(mags.begin(), mags.begin() + mags.size() / 2, mags.end());
  CHECK(mags[mags.size() / 2] <= 0.2);
  CHECK(self.matches.height == 128);
  CHECK(self.matches.width == 128);

  // rect(x) = ref(x - 2): ref pixel p appears at p + (2, 0).
  WarpField f = identity_flow(128, 128);
  for (auto& v : f.dx) v = -2.0f;
  Image shifted = apply_flow(ref, f);
  DenseMatch m = dense_match(ref, shifted);
  std::vector<double> ex;
  for (int i = 8; i < 120; ++i)
    for (int j = 8; j < 120; ++j) ex.push_back(m.matches.at(i, j).x - j);
  std::nth_element(ex.begin(), ex.begin() + ex.size() / 2, ex.end());
  CHECK(std::abs(ex[ex.size() / 2] - 2.0) <= 0.5);

  DenseMatch flat = dense_match(Image(64, 64, 1, 0.5), Image(64, 64, 1, 0.5));
  CHECK(flat.degenerate);
  CHECK(local_distortion(flat.matches) == 0.0);
}

TEST_CASE("dense_match recovers a smooth residual warp") {
  auto s = synthgen::generate_sample(21, 160, 160);
  const Image& ref = s.flat;
  WarpField f = identity_flow(160, 160);
  for (int i = 0; i < 160; ++i)
    for (int j = 0; j < 160; ++j) {
      f.dx[f.index(i, j)] = static_cast<float>(1.5 * std::sin(i / 30.0));
      f.dy[f.index(i, j)] = static_cast<float>(1.0 * std::cos(j / 25.0));
    }
  // rect(p) = ref(p + f(p)); a ref pixel q shows at p with p + f(p) = q.
  Image rect = apply_flow(ref, f);
  FlowMatch truth = matches_from_flows(identity_flow(160, 160), f);
  DenseMatch m = dense_match(ref, rect);
  std::vector<double> epe;
  for (int i = 6; i < 154; ++i)
    for (int j = 6; j < 154; ++j) {
      Point a = m.matches.at(i, j), b = truth.matches.at(i, j);
      epe.push_back(std::hypot(a.x - b.x, a.y - b.y));
    }
  std::nth_element(epe.begin(), epe.begin() + epe.size() / 2, epe.end());
  CHECK(epe[epe.size() / 2] <= 1.5);
}

TEST_CASE("edit distance") {
  CHECK(edit_distance(std::string(""), std::string("abc")) == EditCounts{3, 0, 3, 0});
  CHECK(edit_distance(std::string("kitten"), std::string("sitting")).ed == 3);
  CHECK(edit_distance(std::string("kitten"), std::string("sitting")) == EditCounts{3, 0, 1, 2});
  CHECK(edit_distance(std::string("héllo"), std::string("hello")).ed == 1);

  Rng rng(42);
  for (int t = 0; t < 1000; ++t) {
    auto a = random_string(rng, 12), b = random_string(rng, 12), c = random_string(rng, 12);
    EditCounts ab = edit_distance(a, b), ba = edit_distance(b, a);
    REQUIRE(ab.ed == lev_oracle(a, b));
    CHECK(ab.ed == ab.deletions + ab.insertions + ab.substitutions);
    CHECK(ab.deletions - ab.insertions == static_cast<int>(a.size()) - static_cast<int>(b.size()));
    CHECK(ba.ed == ab.ed);
    CHECK(ba.deletions == ab.insertions);
    CHECK(ba.insertions == ab.deletions);
    CHECK(ba.substitutions == ab.substitutions);
    CHECK(edit_distance(a, c).ed <= ab.ed + edit_distance(b, c).ed);
  }
}

TEST_CASE("cer") {
  CHECK(cer("hello world", "hello world") == 0.0);
  CHECK(cer("hello world", "hello word") == doctest::Approx(1.0 / 11.0).epsilon(1e-12));
  CHECK(cer("ab", "abxxxxxx") == 3.0);
  CHECK(cer("abc", "") == 1.0);
  CHECK_THROWS_AS(cer("", "x"), Error);
  for (const char* s : {"a", "Straße", "日本語テキスト", "x y z"}) CHECK(cer(s, s) == 0.0);
}

TEST_CASE("text normalization") {
  CHECK(normalize_text("  hello \t\n world  ") == "hello world");
  // e + combining acute composes to U+00E9.
  CHECK(normalize_text("e\xCC\x81") == "\xC3\xA9");
  CHECK(utf8_to_u32(normalize_text("e\xCC\x81")).size() == 1);
  CHECK(normalize_text("") == "");
}

TEST_CASE("ocr adapter") {
  namespace fs = std::filesystem;
  OcrResult missing = ocr_adapter("nonexistent.png", "/nonexistent/ocr-engine");
  CHECK_FALSE(missing.text.has_value());
  CHECK_FALSE(missing.reason.empty());

  fs::path dir = fs::temp_directory_path() / "docgeo_ocr_test";
  fs::create_directories(dir);
  fs::path script = dir / "fake_ocr.sh";
  {
    std::ofstream out(script);
    out << "#!/bin/sh\nprintf '  some   text\\n\\nfrom %s  \\n' \"$(basename \"$1\")\"\n";
  }
  fs::permissions(script, fs::perms::owner_all);
  fs::path img = dir / "page.png";
  std::ofstream(img) << "x";
  OcrResult a = ocr_adapter(img, script.string());
  OcrResult b = ocr_adapter(img, script.string());
  REQUIRE(a.text.has_value());
  CHECK(*a.text == "some text from page.png");
  CHECK(a.text == b.text);

  setenv("DOCGEO_OCR_BIN", script.c_str(), 1);
  CHECK(ocr_adapter(img).text == a.text);
  unsetenv("DOCGEO_OCR_BIN");
  CHECK_FALSE(ocr_adapter(img).text.has_value());
  fs::remove_all(dir);
}
