#include "docgeo/nn/layers.hpp"

#include <cmath>

#include "docgeo/error.hpp"

namespace docgeo::nn {

Tensor ParamRegistry::normal(const std::string& name, const Shape& s, double stddev) {
  Tensor t = Tensor::zeros(s, true);
  for (double& v : t.data()) v = stddev * rng_.normal();
  params_.push_back({name, t});
  return t;
}

Tensor ParamRegistry::constant(const std::string& name, const Shape& s, double v) {
  Tensor t = Tensor::full(s, v, true);
  params_.push_back({name, t});
  return t;
}

Conv2d::Conv2d(ParamRegistry& reg, const std::string& name, int in, int out, int k, int stride_,
               double gain)
    : stride(stride_), pad(k / 2) {
  double sd = gain * std::sqrt(2.0 / (in * k * k));
  w = gain == 0.0 ? reg.constant(name + ".w", {out, in, k, k}, 0.0)
                  : reg.normal(name + ".w", {out, in, k, k}, sd);
  b = reg.constant(name + ".b", {out}, 0.0);
}

Linear::Linear(ParamRegistry& reg, const std::string& name, int in, int out, double gain) {
  w = reg.normal(name + ".w", {in, out}, gain * std::sqrt(1.0 / in));
  b = reg.constant(name + ".b", {out}, 0.0);
}

LayerNorm::LayerNorm(ParamRegistry& reg, const std::string& name, int width) {
  gamma = reg.constant(name + ".g", {width}, 1.0);
  beta = reg.constant(name + ".b", {width}, 0.0);
}

UNet::UNet(ParamRegistry& reg, const std::string& name, int in, int out, int base, int depth_,
           int feature_level, int feature_width)
    : depth(depth_) {
  require(depth >= 1 && base >= 1, ErrorCode::InvalidArgument, "UNet: bad depth/base");
  auto width = [base](int i) { return base << std::min(i, 3); };
  int c = in;
  for (int i = 0; i < depth; ++i) {
    const std::string p = name + ".down" + std::to_string(i);
    down.push_back({Conv2d(reg, p + ".a", c, width(i), 3), Conv2d(reg, p + ".b", width(i), width(i), 3)});
    c = width(i);
  }
  bottom = {Conv2d(reg, name + ".bottom.a", c, width(depth), 3),
            Conv2d(reg, name + ".bottom.b", width(depth), width(depth), 3)};
  c = width(depth);
  for (int i = depth - 1; i >= 0; --i) {
    const int level = depth - i;
    const int w = (level == feature_level && feature_width > 0) ? feature_width : width(i);
    const std::string p = name + ".up" + std::to_string(i);
    up.push_back({Conv2d(reg, p + ".a", c + width(i), w, 3), Conv2d(reg, p + ".b", w, w, 3)});
    c = w;
  }
  head = Conv2d(reg, name + ".head", c, out, 1);
}

UNet::Result UNet::operator()(const Tensor& x) const {
  require(x.dim(2) % (1 << depth) == 0 && x.dim(3) % (1 << depth) == 0, ErrorCode::ShapeMismatch,
          "UNet input must be divisible by 2^depth, got " + shape_str(x.shape()));
  std::vector<Tensor> skip;
  Tensor h = x;
  for (const Level& l : down) {
    h = relu(l.b(relu(l.a(h))));
    skip.push_back(h);
    h = maxpool2(h);
  }
  h = relu(bottom.b(relu(bottom.a(h))));
  Result r;
  for (std::size_t k = 0; k < up.size(); ++k) {
    const Tensor& s = skip[skip.size() - 1 - k];
    h = upsample_bilinear(h, s.dim(2), s.dim(3));
    Tensor sk = skips ? s : Tensor::zeros(s.shape());
    h = relu(up[k].b(relu(up[k].a(concat({h, sk}, 1)))));
    r.expansive.push_back(h);
  }
  r.logits = head(h);
  return r;
}

}  // namespace docgeo::nn
