#pragma once

#include <filesystem>
#include <functional>

#include "docgeo/grid.hpp"
#include "docgeo/nn/layers.hpp"
#include "json.hpp"

namespace docgeo::segmenter {

using nn::Tensor;

struct SegmenterConfig {
  int work_size = 128;  // images are resized to work_size^2 for the network
  int base = 16;
  int depth = 4;
  double tau = 0.5;

  void validate() const;
  nlohmann::json to_json() const;
  static SegmenterConfig from_json(const nlohmann::json& j);
};

/// Foreground-document confidence network (encoder-decoder, sigmoid output).
class Segmenter {
 public:
  Segmenter(const SegmenterConfig& cfg, std::uint64_t seed);
  /// x: [N,3,S,S] with S = work_size; returns [N,1,S,S] in (0,1).
  Tensor forward(const Tensor& x) const;
  const SegmenterConfig& config() const { return cfg_; }
  SegmenterConfig& config() { return cfg_; }
  const nn::ParamList& params() const { return reg_.params(); }

 private:
  SegmenterConfig cfg_;
  nn::ParamRegistry reg_;
  nn::UNet net_;
};

/// Image [N,C,H,W] tensor from an image (planar copy).
Tensor image_tensor(const std::vector<const Image*>& imgs);

/// Per-pixel confidence at the input resolution (1 channel).
Image segment_confidence(const Image& img, const Segmenter& seg);

struct Foreground {
  Image image;
  Mask mask;
};
/// mask = confidence >= tau; background pixels set to exactly zero.
Foreground remove_background(const Image& img, const Image& confidence, double tau = 0.5);

/// Mean binary cross-entropy, probabilities clamped to [1e-7, 1 - 1e-7].
Tensor seg_loss(const Tensor& confidence, std::span<const double> gt);
double seg_loss(const Image& confidence, const Mask& gt);

double iou(const Mask& a, const Mask& b);

struct SegSample {
  Image image;
  Mask mask;
};

struct SegTrainConfig {
  int steps = 600;
  int batch = 4;
  double lr = 1e-4;
  double decay_at = 2.0 / 3.0;  // fraction of steps after which lr *= 0.1
  std::uint64_t seed = 0;
  int log_every = 50;
};

struct SegTrainResult {
  std::vector<std::pair<int, double>> losses;  // (step, batch loss)
};

SegTrainResult train_segmenter(Segmenter& seg, const std::vector<SegSample>& data,
                               const SegTrainConfig& cfg,
                               const std::function<void(int, double)>& on_log = {});

void save_segmenter(const std::filesystem::path& path, const Segmenter& seg);
Segmenter load_segmenter(const std::filesystem::path& path);

}  // namespace docgeo::segmenter
