#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "docgeo/error.hpp"
#include "docgeo/segmenter.hpp"
#include "docgeo/synthgen.hpp"
#include "nn_check.hpp"

using namespace docgeo;
using namespace docgeo::segmenter;

namespace {

Image random_image(int h, int w, int c, Rng& rng) {
  Image img(h, w, c);
  for (double& v : img.data) v = rng.uniform();
  return img;
}

SegmenterConfig small() {
  SegmenterConfig c;
  c.work_size = 64;
  c.base = 8;
  return c;
}

}  // namespace

TEST_CASE("confidence range and shape") {
  Segmenter seg(small(), 1);
  Rng rng(2);
  const Image img = random_image(100, 70, 3, rng);
  const Image conf = segment_confidence(img, seg);
  CHECK(conf.height == 100);
  CHECK(conf.width == 70);
  CHECK(conf.channels == 1);
  for (double v : conf.data) CHECK((v > 0.0 && v < 1.0));
  CHECK_THROWS_AS(segment_confidence(random_image(64, 64, 1, rng), seg), Error);

  SegmenterConfig bad = small();
  bad.work_size = 60;
  CHECK_THROWS_AS(Segmenter(bad, 0), Error);
  bad = small();
  bad.tau = 1.0;
  CHECK_THROWS_AS(Segmenter(bad, 0), Error);
}

TEST_CASE("remove_background") {
  Rng rng(3);
  const Image img = random_image(12, 9, 3, rng);
  const Foreground all = remove_background(img, Image(12, 9, 1, 1.0));
  CHECK(all.image == img);
  const Foreground none = remove_background(img, Image(12, 9, 1, 0.0));
  for (double v : none.image.data) CHECK(v == 0.0);
  for (auto m : none.mask.data) CHECK(m == 0);

  Image conf(12, 9, 1);
  for (double& v : conf.data) v = rng.uniform();
  const Foreground f = remove_background(img, conf, 0.5);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 9; ++x) {
      CHECK(f.mask.at(y, x) == (conf.at(y, x) >= 0.5));
      for (int c = 0; c < 3; ++c) CHECK(f.image.at(y, x, c) == (f.mask.at(y, x) ? img.at(y, x, c) : 0.0));
    }
  Image fixed(12, 9, 1);
  for (std::size_t i = 0; i < fixed.size(); ++i) fixed.data[i] = f.mask.data[i];
  const Foreground again = remove_background(f.image, fixed, 0.5);
  CHECK(again.image == f.image);
  CHECK(again.mask == f.mask);
  CHECK_THROWS_AS(remove_background(img, Image(12, 8, 1, 1.0)), Error);
}

TEST_CASE("seg_loss") {
  const int n = 8;
  Mask ones(n, n, 1, 1);
  CHECK(seg_loss(Image(n, n, 1, 0.5), ones) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Rng rng(4);
  Mask y(n, n);
  for (auto& v : y.data) v = rng.uniform() < 0.4;
  Image exact(n, n, 1);
  for (std::size_t i = 0; i < y.size(); ++i) exact.data[i] = y.data[i];
  CHECK(seg_loss(exact, y) <= 1e-6);

  Image p(n, n, 1);
  for (double& v : p.data) v = rng.uniform(0.01, 0.99);
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i)
    acc -= y.data[i] ? std::log(p.data[i]) : std::log(1.0 - p.data[i]);
  CHECK(seg_loss(p, y) == doctest::Approx(acc / y.size()).epsilon(1e-12));

  nn::Tensor t = nn::Tensor::from({1, 1, n, n}, p.data, true);
  const std::vector<double> target(y.data.begin(), y.data.end());
  CHECK(nncheck::grad_error([&] { return seg_loss(t, target); }, {t}, 1e-6) <= 1e-4);
}

TEST_CASE("iou") {
  Mask a(4, 4), b(4, 4);
  CHECK(iou(a, b) == 1.0);
  a.at(0, 0) = a.at(0, 1) = 1;
  b.at(0, 1) = b.at(0, 2) = 1;
  CHECK(iou(a, b) == doctest::Approx(1.0 / 3.0));
  CHECK(iou(a, a) == 1.0);
  CHECK_THROWS_AS(iou(a, Mask(3, 4)), Error);
}

TEST_CASE("trained segmenter separates page from background") {
  const int size = 96;
  std::vector<SegSample> train, held;
  for (int i = 0; i < 48; ++i) {
    const auto s = synthgen::generate_sample(synthgen::derive_seed(70, i), size, size);
    train.push_back({s.distorted, s.gt_mask});
  }
  for (int i = 0; i < 8; ++i) {
    const auto s = synthgen::generate_sample(synthgen::derive_seed(71, i), size, size);
    held.push_back({s.distorted, s.gt_mask});
  }
  Segmenter seg(small(), 5);
  SegTrainConfig cfg;
  cfg.steps = 300;
  cfg.batch = 4;
  cfg.lr = 2e-3;
  const SegTrainResult r = train_segmenter(seg, train, cfg);
  REQUIRE(r.losses.size() >= 2);
  CHECK(r.losses.back().second < r.losses.front().second);

  double mean = 0.0;
  for (const SegSample& s : held) {
    const Foreground f = remove_background(s.image, segment_confidence(s.image, seg), seg.config().tau);
    mean += iou(f.mask, s.mask);
  }
  mean /= held.size();
  MESSAGE("held-out IoU " << mean);
  CHECK(mean >= 0.9);

  const auto path = std::filesystem::temp_directory_path() / "docgeo_seg_test.dgck";
  save_segmenter(path, seg);
  const Segmenter back = load_segmenter(path);
  CHECK(back.config().work_size == seg.config().work_size);
  const Image a = segment_confidence(held[0].image, seg), b = segment_confidence(held[0].image, back);
  CHECK(a == b);
  std::filesystem::remove(path);
}
