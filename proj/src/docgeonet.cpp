#include "docgeo/docgeonet.hpp"

#include <cmath>

#include "docgeo/error.hpp"

namespace docgeo::model {

using namespace docgeo::nn;

ModelConfig ModelConfig::full() { return ModelConfig{}; }

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.height = c.width = 128;
  c.channels = 32;
  c.tf_width = 64;
  c.heads = 4;
  c.encoder_layers = 2;
  c.fusion_layers = 2;
  c.zc_layer = 2;
  c.text_channels = 16;
  c.text_base = 8;
  return c;
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorCode::Config, m); };
  if (height <= 0 || width <= 0 || height % 16 || width % 16)
    bad("input size must be positive and divisible by 16, got " + std::to_string(height) + "x" +
        std::to_string(width));
  if (channels <= 0 || tf_width <= 0 || text_channels <= 0 || text_base <= 0 || ffn_mult <= 0)
    bad("widths must be positive");
  if (heads <= 0 || tf_width % heads) bad("tf_width must be divisible by heads");
  if (tf_width % 4) bad("tf_width must be divisible by 4 for positional encoding");
  if (encoder_layers < 1 || fusion_layers < 1) bad("layer counts must be >= 1");
  if (zc_layer < 1 || zc_layer > encoder_layers) bad("zc_layer must be within the encoder stack");
  if (alpha < 0 || beta < 0) bad("loss weights must be non-negative");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"height", height},
          {"width", width},
          {"channels", channels},
          {"tf_width", tf_width},
          {"heads", heads},
          {"encoder_layers", encoder_layers},
          {"fusion_layers", fusion_layers},
          {"zc_layer", zc_layer},
          {"text_channels", text_channels},
          {"text_base", text_base},
          {"ffn_mult", ffn_mult},
          {"alpha", alpha},
          {"beta", beta},
          {"use_se", use_se},
          {"use_te", use_te},
          {"text_skips", text_skips},
          {"upsample", upsample == Upsample::Learnable ? "learnable" : "bilinear"}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.height = j.at("height");
    c.width = j.at("width");
    c.channels = j.at("channels");
    c.tf_width = j.at("tf_width");
    c.heads = j.at("heads");
    c.encoder_layers = j.at("encoder_layers");
    c.fusion_layers = j.at("fusion_layers");
    c.zc_layer = j.at("zc_layer");
    c.text_channels = j.at("text_channels");
    c.text_base = j.at("text_base");
    c.ffn_mult = j.at("ffn_mult");
    c.alpha = j.at("alpha");
    c.beta = j.at("beta");
    c.use_se = j.at("use_se");
    c.use_te = j.at("use_te");
    c.text_skips = j.at("text_skips");
    const std::string up = j.at("upsample");
    require(up == "learnable" || up == "bilinear", ErrorCode::Config, "unknown upsample mode " + up);
    c.upsample = up == "learnable" ? Upsample::Learnable : Upsample::Bilinear;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Config, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor positional_encoding(int h, int w, int width) {
  require(h > 0 && w > 0, ErrorCode::InvalidArgument, "positional_encoding: empty grid");
  require(width > 0 && width % 4 == 0, ErrorCode::InvalidArgument,
          "positional_encoding: width must be a positive multiple of 4, got " + std::to_string(width));
  const int q = width / 4;
  std::vector<double> pe(static_cast<std::size_t>(h) * w * width);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double* row = pe.data() + (static_cast<std::size_t>(y) * w + x) * width;
      for (int i = 0; i < q; ++i) {
        const double om = std::pow(10000.0, -static_cast<double>(i) / q);
        row[i] = std::sin(y * om);
        row[q + i] = std::cos(y * om);
        row[2 * q + i] = std::sin(x * om);
        row[3 * q + i] = std::cos(x * om);
      }
    }
  return Tensor::from({h * w, width}, std::move(pe));
}

EncoderLayer::EncoderLayer(ParamRegistry& reg, const std::string& name, int width, int heads_,
                           int ffn_mult)
    : q(reg, name + ".q", width, width),
      k(reg, name + ".k", width, width),
      v(reg, name + ".v", width, width),
      o(reg, name + ".o", width, width),
      ff1(reg, name + ".ff1", width, ffn_mult * width, std::sqrt(2.0)),
      ff2(reg, name + ".ff2", ffn_mult * width, width),
      ln1(reg, name + ".ln1", width),
      ln2(reg, name + ".ln2", width),
      heads(heads_) {}

Tensor encoder_layer(const Tensor& x, const Tensor& pe, const EncoderLayer& l) {
  require(x.rank() == 3 && x.dim(2) == l.q.w.dim(0), ErrorCode::ShapeMismatch,
          "encoder_layer: token width " + shape_str(x.shape()) + " vs layer " +
              std::to_string(l.q.w.dim(0)));
  require(pe.shape() == Shape{x.dim(1), x.dim(2)}, ErrorCode::ShapeMismatch,
          "encoder_layer: positional encoding shape " + shape_str(pe.shape()));
  Tensor xp = add(x, pe);
  Tensor a = l.o(attention(l.q(xp), l.k(xp), l.v(x), l.heads));
  Tensor x1 = l.ln1(add(a, x));
  Tensor f = l.ff2(relu(l.ff1(x1)));
  return l.ln2(add(f, x1));
}

DocGeoNet::DocGeoNet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), reg_(seed) {
  cfg_.validate();
  const int C = cfg_.channels, Cw = cfg_.tf_width, Ct = cfg_.text_channels;
  stem_ = Conv2d(reg_, "se.stem", 3, C, 3, 2);
  const int strides[6] = {1, 1, 2, 1, 2, 1};
  for (int i = 0; i < 6; ++i) {
    const std::string p = "se.block" + std::to_string(i + 1);
    ResBlock b;
    b.c1 = Conv2d(reg_, p + ".c1", C, C, 3, strides[i]);
    b.c2 = Conv2d(reg_, p + ".c2", C, C, 3, 1, 0.25);
    b.project = strides[i] != 1;
    if (b.project) b.skip = Conv2d(reg_, p + ".skip", C, C, 1, strides[i]);
    blocks_.push_back(b);
  }
  if (cfg_.use_se) {
    se_in_ = Linear(reg_, "se.adapt_in", C, Cw);
    for (int i = 0; i < cfg_.encoder_layers; ++i)
      se_layers_.emplace_back(reg_, "se.layer" + std::to_string(i + 1), Cw, cfg_.heads, cfg_.ffn_mult);
    se_out_ = Linear(reg_, "se.adapt_out", Cw, C);
    head3d_ = Conv2d(reg_, "se.head3d", C, 3, 3);
  }
  if (cfg_.use_te) {
    text_net_ = UNet(reg_, "te.unet", 3, 1, cfg_.text_base, 4, 1, Ct);
    text_net_.skips = cfg_.text_skips;
  }
  fuse_in_ = Linear(reg_, "fuse.adapt_in", C + Ct, Cw);
  for (int i = 0; i < cfg_.fusion_layers; ++i)
    fuse_layers_.emplace_back(reg_, "fuse.layer" + std::to_string(i + 1), Cw, cfg_.heads, cfg_.ffn_mult);
  fuse_out_ = Linear(reg_, "fuse.adapt_out", Cw, C + Ct);
  flow1_ = Conv2d(reg_, "flow.c1", C + Ct, C, 3);
  flow2_ = Conv2d(reg_, "flow.c2", C, 2, 3, 1, 0.0);
  if (cfg_.upsample == Upsample::Learnable) {
    mask1_ = Conv2d(reg_, "mask.c1", C + Ct, C, 3);
    mask2_ = Conv2d(reg_, "mask.c2", C, 9 * 64, 1, 1, 0.25);
  }
  const int h = cfg_.height / 8, w = cfg_.width / 8;
  pe_se_ = positional_encoding(h, w, Cw);
  pe_fuse_ = pe_se_;
}

Tensor DocGeoNet::res_block(const ResBlock& b, const Tensor& x) const {
  Tensor y = b.c2(relu(b.c1(x)));
  return relu(add(y, b.project ? b.skip(x) : x));
}

ForwardOutputs DocGeoNet::forward(const Tensor& image) const {
  require(image.rank() == 4 && image.dim(1) == 3 && image.dim(2) == cfg_.height &&
              image.dim(3) == cfg_.width,
          ErrorCode::ShapeMismatch,
          "model expects [N,3," + std::to_string(cfg_.height) + "," + std::to_string(cfg_.width) +
              "], got " + shape_str(image.shape()));
  const int n = image.dim(0), h = cfg_.height / 8, w = cfg_.width / 8;
  ForwardOutputs out;
  Tensor x = shift(image, -0.5);

  Tensor z = relu(stem_(x));
  for (const ResBlock& b : blocks_) z = res_block(b, z);
  Tensor tokens = to_tokens(z);
  if (cfg_.use_se) {
    Tensor t = se_in_(tokens);
    for (int i = 0; i < cfg_.encoder_layers; ++i) {
      t = encoder_layer(t, pe_se_, se_layers_[i]);
      if (i + 1 == cfg_.zc_layer) out.z_c = se_out_(t);
    }
    Tensor last = cfg_.zc_layer == cfg_.encoder_layers ? out.z_c : se_out_(t);
    Tensor up = upsample_bilinear(from_tokens(last, h, w), cfg_.height, cfg_.width);
    out.coords = head3d_(up);
  } else {
    out.z_c = tokens;
  }

  if (cfg_.use_te) {
    UNet::Result r = text_net_(x);
    out.text = sigmoid(r.logits);
    out.z_t = to_tokens(r.expansive[0]);
  } else {
    out.z_t = Tensor::zeros({n, h * w, cfg_.text_channels});
  }

  Tensor f = fuse_in_(concat({out.z_c, out.z_t}, 2));
  for (const EncoderLayer& l : fuse_layers_) f = encoder_layer(f, pe_fuse_, l);
  out.z_o = fuse_out_(f);
  Tensor grid = from_tokens(out.z_o, h, w);
  out.flow_coarse = flow2_(relu(flow1_(grid)));
  if (cfg_.upsample == Upsample::Learnable) {
    Tensor logits = mask2_(relu(mask1_(grid)));
    out.flow = convex_upsample(out.flow_coarse, logits, 8);
  } else {
    out.flow = upsample_bilinear(out.flow_coarse, cfg_.height, cfg_.width);
  }
  return out;
}

Tensor loss_3d(const Tensor& coords, std::span<const double> target, std::span<const double> mask) {
  require(coords.rank() == 4 && coords.dim(1) == 3, ErrorCode::ShapeMismatch, "loss_3d expects [N,3,H,W]");
  return l1_loss(coords, target, mask);
}

Tensor loss_text(const Tensor& text, std::span<const double> target, std::span<const double> doc_mask) {
  require(text.rank() == 4 && text.dim(1) == 1, ErrorCode::ShapeMismatch, "loss_text expects [N,1,H,W]");
  return bce_loss(text, target, doc_mask);
}

Tensor loss_flow(const Tensor& flow, std::span<const double> target) {
  require(flow.rank() == 4 && flow.dim(1) == 2, ErrorCode::ShapeMismatch, "loss_flow expects [N,2,H,W]");
  return l1_loss(flow, target);
}

double total_loss(double l3d, double ltext, double lflow, double alpha, double beta) {
  return alpha * l3d + beta * ltext + lflow;
}

Tensor total_loss(const Tensor& l3d, const Tensor& ltext, const Tensor& lflow, double alpha,
                  double beta) {
  Tensor t = lflow;
  if (l3d.defined() && alpha != 0.0) t = add(t, scale(l3d, alpha));
  if (ltext.defined() && beta != 0.0) t = add(t, scale(ltext, beta));
  return t;
}

}  // namespace docgeo::model
