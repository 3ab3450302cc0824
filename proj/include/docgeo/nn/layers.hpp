#pragma once

#include <string>

#include "docgeo/nn/ops.hpp"
#include "docgeo/nn/optim.hpp"
#include "docgeo/rng.hpp"

namespace docgeo::nn {

/// Collects named parameters while a network is built.
class ParamRegistry {
 public:
  explicit ParamRegistry(std::uint64_t seed) : rng_(seed) {}
  Tensor normal(const std::string& name, const Shape& s, double stddev);
  Tensor constant(const std::string& name, const Shape& s, double v);
  const ParamList& params() const { return params_; }
  Rng& rng() { return rng_; }

 private:
  Rng rng_;
  ParamList params_;
};

struct Conv2d {
  Tensor w, b;
  int stride = 1, pad = 0;
  Conv2d() = default;
  /// He-normal weights scaled by `gain`; zero bias.
  Conv2d(ParamRegistry& reg, const std::string& name, int in, int out, int k, int stride = 1,
         double gain = 1.0);
  Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct Linear {
  Tensor w, b;
  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& name, int in, int out, double gain = 1.0);
  Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
};

struct LayerNorm {
  Tensor gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamRegistry& reg, const std::string& name, int width);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

/// Encoder-decoder with skip connections: `depth` 2x2 max-pool stages, two
/// 3x3 convs per level, bilinear x2 upsampling in the expansive part.
struct UNet {
  struct Level {
    Conv2d a, b;
  };
  std::vector<Level> down, up;
  Level bottom;
  Conv2d head;
  int depth = 4;
  bool skips = true;

  UNet() = default;
  /// Width at level i is base * 2^min(i, 3); `feature_level` (counted from
  /// the bottom, 1 = first expansive level) can have its width overridden.
  UNet(ParamRegistry& reg, const std::string& name, int in, int out, int base, int depth,
       int feature_level = 0, int feature_width = 0);

  struct Result {
    Tensor logits;
    std::vector<Tensor> expansive;  // expansive[i] has resolution 1/2^(depth-1-i)
  };
  Result operator()(const Tensor& x) const;
};

}  // namespace docgeo::nn
