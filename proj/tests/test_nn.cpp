#include <doctest.h>

#include <filesystem>

#include "docgeo/geometry.hpp"
#include "docgeo/nn/ops.hpp"
#include "docgeo/nn/optim.hpp"
#include "nn_check.hpp"

using namespace docgeo;
using namespace docgeo::nn;
using nncheck::grad_error;
using nncheck::project;
using nncheck::randn;

TEST_CASE("graph basics") {
  Tensor a = Tensor::from({2}, {1.0, 2.0}, true);
  Tensor b = Tensor::from({2}, {3.0, -1.0}, true);
  Tensor y = sum(mul(add(a, b), a));  // sum((a+b)*a)
  CHECK(y.item() == doctest::Approx(4.0 + 2.0));
  y.backward();
  CHECK(a.grad()[0] == doctest::Approx(2 * 1.0 + 3.0));
  CHECK(a.grad()[1] == doctest::Approx(2 * 2.0 - 1.0));
  CHECK(b.grad()[0] == doctest::Approx(1.0));
  {
    NoGradGuard ng;
    Tensor z = mul(a, b);
    CHECK_FALSE(z.requires_grad());
    CHECK(z.node()->parents.empty());
  }
  CHECK(grad_enabled());
  CHECK_THROWS_AS(mul(a, Tensor::zeros({3})), Error);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), Error);
}

TEST_CASE("conv2d forward matches direct loops") {
  Rng rng(1);
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, {3, 2, 1}, {1, 1, 0}, {7, 2, 3}}) {
    Tensor x = randn({2, 3, 9, 8}, rng), w = randn({4, 3, k, k}, rng), b = randn({4}, rng);
    Tensor y = conv2d(x, w, b, stride, pad);
    const int ho = (9 + 2 * pad - k) / stride + 1, wo = (8 + 2 * pad - k) / stride + 1;
    REQUIRE(y.shape() == Shape{2, 4, ho, wo});
    double worst = 0.0;
    for (int s = 0; s < 2; ++s)
      for (int o = 0; o < 4; ++o)
        for (int i = 0; i < ho; ++i)
          for (int j = 0; j < wo; ++j) {
            double acc = b.data()[o];
            for (int c = 0; c < 3; ++c)
              for (int u = 0; u < k; ++u)
                for (int v = 0; v < k; ++v) {
                  int yy = i * stride - pad + u, xx = j * stride - pad + v;
                  if (yy < 0 || yy >= 9 || xx < 0 || xx >= 8) continue;
                  acc += w.data()[((o * 3 + c) * k + u) * k + v] * x.data()[((s * 3 + c) * 9 + yy) * 8 + xx];
                }
            worst = std::max(worst, std::abs(acc - y.data()[((s * 4 + o) * ho + i) * wo + j]));
          }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("gradients match finite differences") {
  Rng rng(2);
  SUBCASE("conv2d") {
    for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, {3, 2, 1}, {1, 1, 0}}) {
      Tensor x = randn({2, 2, 6, 5}, rng), w = randn({3, 2, k, k}, rng), b = randn({3}, rng);
      CHECK(grad_error([&] { return project(conv2d(x, w, b, stride, pad), 7); }, {x, w, b}) < 1e-6);
    }
  }
  SUBCASE("elementwise") {
    Tensor x = randn({3, 4}, rng), y = randn({3, 4}, rng), r = randn({4}, rng);
    CHECK(grad_error([&] { return project(sigmoid(mul(x, y)), 3); }, {x, y}) < 1e-6);
    CHECK(grad_error([&] { return project(relu(add(x, r)), 4); }, {x, r}) < 1e-6);
    CHECK(grad_error([&] { return mean(sub(x, scale(y, 0.3))); }, {x, y}) < 1e-6);
  }
  SUBCASE("pooling and resizing") {
    Tensor x = randn({1, 2, 6, 8}, rng);
    CHECK(grad_error([&] { return project(maxpool2(x), 5); }, {x}) < 1e-6);
    CHECK(grad_error([&] { return project(upsample_bilinear(x, 13, 11), 6); }, {x}) < 1e-6);
    CHECK(grad_error([&] { return project(upsample_bilinear(x, 3, 4), 6); }, {x}) < 1e-6);
  }
  SUBCASE("tokens, concat, linear, layer norm") {
    Tensor x = randn({2, 3, 2, 4}, rng), z = randn({2, 2, 2, 4}, rng);
    CHECK(grad_error([&] { return project(to_tokens(concat({x, z}, 1)), 8); }, {x, z}) < 1e-6);
    Tensor t = randn({2, 5, 6}, rng), w = randn({6, 4}, rng), b = randn({4}, rng);
    CHECK(grad_error([&] { return project(linear(t, w, b), 9); }, {t, w, b}) < 1e-6);
    CHECK(grad_error([&] { return project(from_tokens(t, 5, 1), 9); }, {t}) < 1e-6);
    Tensor g = randn({6}, rng), be = randn({6}, rng);
    CHECK(grad_error([&] { return project(layer_norm(t, g, be), 10); }, {t, g, be}) < 1e-6);
  }
  SUBCASE("attention") {
    Tensor q = randn({2, 5, 8}, rng), k = randn({2, 5, 8}, rng), v = randn({2, 5, 8}, rng);
    CHECK(grad_error([&] { return project(attention(q, k, v, 2), 11); }, {q, k, v}) < 1e-6);
  }
  SUBCASE("convex upsample") {
    Tensor f = randn({1, 2, 3, 4}, rng, 2.0), l = randn({1, 36, 3, 4}, rng);
    CHECK(grad_error([&] { return project(convex_upsample(f, l, 2), 12); }, {f, l}) < 1e-6);
  }
  SUBCASE("bilinear warp") {
    Tensor img = randn({1, 2, 16, 16}, rng), fl = randn({1, 2, 16, 16}, rng, 2.0);
    // Keep sample positions off the pixel lattice.
    for (double& v : fl.data())
      if (std::abs(v - std::round(v)) < 0.05) v += 0.1;
    CHECK(grad_error([&] { return project(warp_bilinear(img, fl), 13); }, {img, fl}, 1e-6) < 1e-3);
  }
  SUBCASE("losses") {
    Tensor p = randn({2, 3, 4, 4}, rng);
    std::vector<double> tgt(p.numel()), mask(2 * 16);
    for (double& v : tgt) v = rng.normal();
    for (double& v : mask) v = rng.uniform() < 0.6;
    CHECK(grad_error([&] { return l1_loss(p, tgt, mask); }, {p}) < 1e-6);
    Tensor logits = randn({2, 1, 4, 4}, rng);
    std::vector<double> y(logits.numel());
    for (double& v : y) v = rng.uniform() < 0.5;
    CHECK(grad_error([&] { return bce_loss(sigmoid(logits), y, mask); }, {logits}) < 1e-6);
  }
}

TEST_CASE("upsample_bilinear agrees with image resize") {
  Rng rng(4);
  Tensor x = randn({1, 1, 7, 5}, rng, 1.0, false);
  Image img(7, 5);
  img.data = to_vector(x.data());
  for (auto [h, w] : {std::pair{14, 10}, {21, 15}, {56, 40}}) {
    Tensor y = upsample_bilinear(x, h, w);
    Image r = resize_bilinear(img, h, w);
    double worst = 0.0;
    for (std::size_t i = 0; i < r.data.size(); ++i) worst = std::max(worst, std::abs(r.data[i] - y.data()[i]));
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("attention rows are distributions") {
  Rng rng(5);
  Tensor q = randn({2, 7, 12}, rng), k = randn({2, 7, 12}, rng);
  auto p = attention_weights(q, k, 3);
  for (std::size_t r = 0; r < p.size() / 7; ++r) {
    double s = 0.0;
    for (int j = 0; j < 7; ++j) {
      CHECK(p[r * 7 + j] >= 0.0);
      s += p[r * 7 + j];
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(attention_weights(q, k, 5), Error);
}

TEST_CASE("convex upsample") {
  Rng rng(6);
  for (int t = 0; t < 10; ++t) {
    Tensor f = randn({2, 2, 3, 5}, rng, 3.0, false), l = randn({2, 9 * 16, 3, 5}, rng, 2.0, false);
    Tensor y = convex_upsample(f, l, 4);
    auto oracle = nncheck::convex_upsample_oracle(f, l, 4);
    double worst = 0.0;
    for (std::size_t i = 0; i < oracle.size(); ++i) worst = std::max(worst, std::abs(oracle[i] - y.data()[i]));
    CHECK(worst <= 1e-12);
  }
  // Constant field stays constant for any logits, including at borders.
  Tensor c = Tensor::full({1, 2, 4, 4}, 1.75);
  Tensor l = randn({1, 9 * 64, 4, 4}, rng, 5.0, false);
  const Tensor up = convex_upsample(c, l, 8);
  for (double v : up.data()) CHECK(std::abs(v - 1.75) < 1e-12);
  // Saturated centre logit gives nearest-neighbour upsampling.
  Tensor f = randn({1, 1, 3, 3}, rng, 1.0, false);
  Tensor sat = Tensor::zeros({1, 9 * 4, 3, 3});
  for (int o = 0; o < 4; ++o)
    for (int p = 0; p < 9; ++p) sat.data()[(4 * 4 + o) * 9 + p] = 100.0;
  Tensor y = convex_upsample(f, sat, 2);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) CHECK(std::abs(y.data()[i * 6 + j] - f.data()[(i / 2) * 3 + j / 2]) < 1e-12);
  CHECK_THROWS_AS(convex_upsample(f, Tensor::zeros({1, 35, 3, 3}), 2), Error);
}

TEST_CASE("warp_bilinear matches apply_flow") {
  Rng rng(7);
  Image img(12, 10, 1);
  for (double& v : img.data) v = rng.uniform();
  WarpField wf = identity_flow(12, 10);
  for (auto& v : wf.dx) v = static_cast<float>(rng.uniform(-4, 4));
  for (auto& v : wf.dy) v = static_cast<float>(rng.uniform(-4, 4));
  Image ref = apply_flow(img, wf);
  Tensor ti = Tensor::from({1, 1, 12, 10}, img.data);
  std::vector<double> fl;
  for (float v : wf.dx) fl.push_back(v);
  for (float v : wf.dy) fl.push_back(v);
  Tensor y = warp_bilinear(ti, Tensor::from({1, 2, 12, 10}, fl));
  for (std::size_t i = 0; i < ref.data.size(); ++i) CHECK(std::abs(ref.data[i] - y.data()[i]) < 1e-9);
}

TEST_CASE("loss values") {
  Tensor p = Tensor::full({1, 1, 4, 4}, 0.5);
  std::vector<double> ones(16, 1.0);
  CHECK(bce_loss(p, ones).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  Tensor exact = Tensor::from({1, 1, 1, 4}, {0.0, 1.0, 1.0, 0.0});
  CHECK(bce_loss(exact, exact.data()).item() <= 1e-6);
  Tensor a = Tensor::zeros({1, 3, 2, 2});
  std::vector<double> off(12, 0.1);
  CHECK(l1_loss(a, off).item() == doctest::Approx(0.1).epsilon(1e-12));
  CHECK_THROWS_AS(l1_loss(a, off, std::vector<double>(4, 0.0)), Error);
}

TEST_CASE("AdamW step and checkpoints") {
  Tensor w = Tensor::from({2}, {1.0, -2.0}, true);
  AdamW opt({{"w", w}}, AdamWOptions{0.1, 0.9, 0.999, 1e-8, 0.01});
  w.grad() = {0.5, -0.25};
  opt.step();
  // First step: m_hat = g, v_hat = g^2, update = lr * sign(g) (up to eps).
  CHECK(w.data()[0] == doctest::Approx(1.0 - 0.1 * 0.01 * 1.0 - 0.1).epsilon(1e-7));
  CHECK(w.data()[1] == doctest::Approx(-2.0 + 0.1 * 0.01 * 2.0 + 0.1).epsilon(1e-7));

  auto path = std::filesystem::temp_directory_path() / "docgeo_ck_test.dgck";
  save_checkpoint(path, opt.params(), &opt, {{"note", "x"}});
  Tensor w2 = Tensor::zeros({2}, true);
  AdamW opt2({{"w", w2}}, AdamWOptions{0.1, 0.9, 0.999, 1e-8, 0.01});
  auto meta = load_checkpoint(path, opt2.params(), &opt2);
  CHECK(meta["note"] == "x");
  CHECK(w2.data() == w.data());
  CHECK(opt2.steps() == 1);
  CHECK(opt2.first_moments() == opt.first_moments());
  CHECK(opt2.second_moments() == opt.second_moments());
  w.grad() = {0.1, 0.2};
  w2.grad() = {0.1, 0.2};
  opt.step();
  opt2.step();
  CHECK(w.data() == w2.data());

  Tensor wrong = Tensor::zeros({3}, true);
  CHECK_THROWS_AS(load_checkpoint(path, {{"w", wrong}}), Error);
  std::filesystem::remove(path);
}
