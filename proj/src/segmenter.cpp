#include "docgeo/segmenter.hpp"

#include <cmath>
#include <numeric>

#include "docgeo/error.hpp"
#include "docgeo/nn/optim.hpp"
#include "docgeo/rng.hpp"
#include "docgeo/synthgen.hpp"

namespace docgeo::segmenter {

void SegmenterConfig::validate() const {
  require(depth >= 1 && depth <= 6 && base >= 1, ErrorCode::Config, "segmenter: bad depth/base");
  require(work_size > 0 && work_size % (1 << depth) == 0, ErrorCode::Config,
          "segmenter: work_size must be divisible by 2^depth");
  require(tau > 0.0 && tau < 1.0, ErrorCode::Config, "segmenter: tau must lie in (0,1)");
}

nlohmann::json SegmenterConfig::to_json() const {
  return {{"work_size", work_size}, {"base", base}, {"depth", depth}, {"tau", tau}};
}

SegmenterConfig SegmenterConfig::from_json(const nlohmann::json& j) {
  SegmenterConfig c;
  try {
    c.work_size = j.at("work_size");
    c.base = j.at("base");
    c.depth = j.at("depth");
    c.tau = j.at("tau");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Config, std::string("segmenter config: ") + e.what());
  }
  c.validate();
  return c;
}

Segmenter::Segmenter(const SegmenterConfig& cfg, std::uint64_t seed) : cfg_(cfg), reg_(seed) {
  cfg_.validate();
  net_ = nn::UNet(reg_, "seg.unet", 3, 1, cfg_.base, cfg_.depth);
}

Tensor Segmenter::forward(const Tensor& x) const {
  require(x.rank() == 4 && x.dim(1) == 3, ErrorCode::ShapeMismatch,
          "segmenter expects [N,3,S,S], got " + nn::shape_str(x.shape()));
  return nn::sigmoid(net_(nn::shift(x, -0.5)).logits);
}

Tensor image_tensor(const std::vector<const Image*>& imgs) {
  require(!imgs.empty(), ErrorCode::InvalidArgument, "no images");
  const Image& f = *imgs[0];
  const int c = f.channels, h = f.height, w = f.width;
  std::vector<double> v(imgs.size() * f.size());
  for (std::size_t s = 0; s < imgs.size(); ++s) {
    const Image& im = *imgs[s];
    require(im.same_shape(f), ErrorCode::ShapeMismatch, "batch images differ in shape");
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          v[((s * c + ch) * h + y) * w + x] = im.at(y, x, ch);
  }
  return Tensor::from({static_cast<int>(imgs.size()), c, h, w}, std::move(v));
}

Image segment_confidence(const Image& img, const Segmenter& seg) {
  require(img.channels == 3, ErrorCode::ShapeMismatch,
          "segment_confidence expects 3 channels, got " + std::to_string(img.channels));
  const int s = seg.config().work_size;
  Image small = (img.height == s && img.width == s) ? img : resize_bilinear(img, s, s);
  nn::NoGradGuard ng;
  Tensor p = seg.forward(image_tensor({&small}));
  Image conf(s, s, 1);
  conf.data.assign(p.data().begin(), p.data().end());
  if (img.height != s || img.width != s) conf = resize_bilinear(conf, img.height, img.width);
  return conf;
}

Foreground remove_background(const Image& img, const Image& confidence, double tau) {
  require(confidence.channels == 1 && confidence.height == img.height && confidence.width == img.width,
          ErrorCode::ShapeMismatch, "confidence map does not match the image");
  Foreground f{img, Mask(img.height, img.width)};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const bool fg = confidence.at(y, x) >= tau;
      f.mask.at(y, x) = fg;
      if (!fg)
        for (int c = 0; c < img.channels; ++c) f.image.at(y, x, c) = 0.0;
    }
  return f;
}

Tensor seg_loss(const Tensor& confidence, std::span<const double> gt) {
  return nn::bce_loss(confidence, gt);
}

double seg_loss(const Image& confidence, const Mask& gt) {
  require(confidence.channels == 1 && confidence.height == gt.height && confidence.width == gt.width,
          ErrorCode::ShapeMismatch, "seg_loss: shape mismatch");
  Tensor p = Tensor::from({1, 1, gt.height, gt.width}, confidence.data);
  std::vector<double> y(gt.data.begin(), gt.data.end());
  return seg_loss(p, y).item();
}

double iou(const Mask& a, const Mask& b) {
  require(a.same_shape(b), ErrorCode::ShapeMismatch, "iou: shape mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a.data[i] && b.data[i];
    uni += a.data[i] || b.data[i];
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

SegTrainResult train_segmenter(Segmenter& seg, const std::vector<SegSample>& data,
                               const SegTrainConfig& cfg,
                               const std::function<void(int, double)>& on_log) {
  require(!data.empty(), ErrorCode::MissingData, "segmenter training needs samples");
  require(cfg.steps >= 0 && cfg.batch >= 1, ErrorCode::Config, "segmenter: bad steps/batch");
  const int s = seg.config().work_size;
  std::vector<Image> imgs;
  std::vector<std::vector<double>> masks;
  for (const SegSample& d : data) {
    require(d.image.channels == 3 && d.mask.height == d.image.height && d.mask.width == d.image.width,
            ErrorCode::ShapeMismatch, "segmenter sample: image/mask mismatch");
    imgs.push_back(d.image.height == s && d.image.width == s ? d.image : resize_bilinear(d.image, s, s));
    Mask m = d.mask.height == s && d.mask.width == s ? d.mask : resize_nearest(d.mask, s, s);
    masks.emplace_back(m.data.begin(), m.data.end());
  }
  nn::AdamW opt(seg.params(), nn::AdamWOptions{cfg.lr, 0.9, 0.999, 1e-8, 0.0});
  SegTrainResult r;
  const int decay_step = static_cast<int>(std::lround(cfg.decay_at * cfg.steps));
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  int epoch = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    if (step == decay_step) opt.set_lr(cfg.lr * 0.1);
    std::vector<const Image*> batch;
    std::vector<double> y;
    for (int b = 0; b < cfg.batch; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        Rng rng(synthgen::derive_seed(cfg.seed, 1000 + epoch++));
        for (std::size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[rng.uniform_int(0, static_cast<int>(i) - 1)]);
        cursor = 0;
      }
      const std::size_t k = order[cursor++];
      batch.push_back(&imgs[k]);
      y.insert(y.end(), masks[k].begin(), masks[k].end());
    }
    nn::zero_grad(seg.params());
    Tensor loss = seg_loss(seg.forward(image_tensor(batch)), y);
    require(std::isfinite(loss.item()), ErrorCode::Diverged,
            "segmenter loss is not finite at step " + std::to_string(step));
    loss.backward();
    opt.step();
    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      r.losses.push_back({step, loss.item()});
      if (on_log) on_log(step, loss.item());
    }
  }
  return r;
}

void save_segmenter(const std::filesystem::path& path, const Segmenter& seg) {
  nn::save_checkpoint(path, seg.params(), nullptr, {{"kind", "segmenter"}, {"config", seg.config().to_json()}});
}

Segmenter load_segmenter(const std::filesystem::path& path) {
  nlohmann::json h = nn::read_checkpoint_header(path);
  require(h.at("meta").value("kind", "") == "segmenter", ErrorCode::Format,
          path.string() + " is not a segmenter checkpoint");
  Segmenter seg(SegmenterConfig::from_json(h["meta"].at("config")), 0);
  nn::load_checkpoint(path, seg.params());
  return seg;
}

}  // namespace docgeo::segmenter
