#pragma once

#include <cstdint>
#include <string>

#include "docgeo/nn/layers.hpp"
#include "json.hpp"

namespace docgeo::model {

using nn::Tensor;

enum class Upsample { Learnable, Bilinear };

struct ModelConfig {
  int height = 288;
  int width = 288;
  int channels = 128;       // C
  int tf_width = 256;       // C_w
  int heads = 8;            // M
  int encoder_layers = 6;
  int fusion_layers = 6;
  int zc_layer = 4;         // encoder layer whose output feeds the fusion
  int text_channels = 64;   // C_t
  int text_base = 16;       // textline UNet base width
  int ffn_mult = 2;
  double alpha = 0.2;
  double beta = 0.2;
  bool use_se = true;
  bool use_te = true;
  bool text_skips = true;
  Upsample upsample = Upsample::Learnable;

  static ModelConfig full();
  static ModelConfig toy();
  void validate() const;
  int tokens() const { return (height / 8) * (width / 8); }
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Sinusoidal 2D encoding [h*w, width]: the first half of the channels
/// encodes the row, the second the column; each half is sin then cos.
Tensor positional_encoding(int h, int w, int width);

struct EncoderLayer {
  nn::Linear q, k, v, o, ff1, ff2;
  nn::LayerNorm ln1, ln2;
  int heads = 1;
  EncoderLayer() = default;
  EncoderLayer(nn::ParamRegistry& reg, const std::string& name, int width, int heads, int ffn_mult);
};

/// Post-norm layer: x1 = LN(MA(x+pe, x+pe, x) + x); out = LN(FFN(x1) + x1).
/// pe is [L, width] and is added to queries and keys only.
Tensor encoder_layer(const Tensor& tokens, const Tensor& pe, const EncoderLayer& layer);

struct ForwardOutputs {
  Tensor coords;        // C_hat [N,3,H,W]; undefined without the structure encoder
  Tensor text;          // T_hat [N,1,H,W] in (0,1); undefined without the extractor
  Tensor z_c;           // [N,N_v,C]
  Tensor z_t;           // [N,N_v,C_t]
  Tensor z_o;           // [N,N_v,C+C_t]
  Tensor flow_coarse;   // f_o [N,2,H/8,W/8], full-resolution pixels
  Tensor flow;          // f_hat [N,2,H,W]
};

class DocGeoNet {
 public:
  DocGeoNet(const ModelConfig& cfg, std::uint64_t seed);

  /// image: [N,3,H,W] in [0,1].
  ForwardOutputs forward(const Tensor& image) const;

  const ModelConfig& config() const { return cfg_; }
  const nn::ParamList& params() const { return reg_.params(); }
  const std::vector<EncoderLayer>& encoder_layers() const { return se_layers_; }

 private:
  struct ResBlock {
    nn::Conv2d c1, c2, skip;
    bool project = false;
  };
  Tensor res_block(const ResBlock& b, const Tensor& x) const;

  ModelConfig cfg_;
  nn::ParamRegistry reg_;
  nn::Conv2d stem_;
  std::vector<ResBlock> blocks_;
  nn::Linear se_in_, se_out_;
  std::vector<EncoderLayer> se_layers_;
  nn::Conv2d head3d_;
  nn::UNet text_net_;
  nn::Linear fuse_in_, fuse_out_;
  std::vector<EncoderLayer> fuse_layers_;
  nn::Conv2d flow1_, flow2_, mask1_, mask2_;
  Tensor pe_se_, pe_fuse_;
};

/// Mean |C_hat - C_gt| over masked pixels and 3 channels.
Tensor loss_3d(const Tensor& coords, std::span<const double> target, std::span<const double> mask);
/// Mean BCE over document pixels.
Tensor loss_text(const Tensor& text, std::span<const double> target, std::span<const double> doc_mask);
/// Mean |f_hat - f_gt| over pixels and 2 channels.
Tensor loss_flow(const Tensor& flow, std::span<const double> target);

double total_loss(double l3d, double ltext, double lflow, double alpha, double beta);
Tensor total_loss(const Tensor& l3d, const Tensor& ltext, const Tensor& lflow, double alpha,
                  double beta);

}  // namespace docgeo::model
