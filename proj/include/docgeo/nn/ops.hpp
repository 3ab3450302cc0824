#pragma once

#include "docgeo/nn/tensor.hpp"

namespace docgeo::nn {

// Elementwise. `add` broadcasts b when its shape is a suffix of a's shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor shift(const Tensor& a, double c);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor reshape(const Tensor& x, const Shape& s);

/// x: [N,Ci,H,W], w: [Co,Ci,k,k], b: [Co] or undefined. Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1, int pad = 0);
Tensor maxpool2(const Tensor& x);
/// Bilinear resize of [N,C,H,W], half-pixel centres (align_corners = false).
Tensor upsample_bilinear(const Tensor& x, int height, int width);
Tensor concat(const std::vector<Tensor>& xs, int axis);

/// [N,C,H,W] -> [N,H*W,C] and back.
Tensor to_tokens(const Tensor& x);
Tensor from_tokens(const Tensor& t, int height, int width);

/// x: [...,Ci], w: [Ci,Co], b: [Co] or undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
/// Normalizes the last dimension.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Multi-head scaled dot-product attention on [N,L,D] inputs, D = heads * d.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);
/// Per-head attention probabilities [N,heads,L,L] (values only).
Buffer attention_weights(const Tensor& q, const Tensor& k, int heads);

/// Convex combination upsampling: flow [N,C,h,w], logits [N,9*f*f,h,w] ->
/// [N,C,h*f,w*f]. Channel k*f*f + dy*f + dx holds the logit of neighbour
/// k = (ky*3 + kx) for fine offset (dy,dx). Borders replicate the edge.
Tensor convex_upsample(const Tensor& flow, const Tensor& logits, int factor = 8);

/// Backward bilinear warp of img [N,C,H,W] by flow [N,2,H,W]; sample
/// positions outside the image use the nearest edge pixels.
Tensor warp_bilinear(const Tensor& img, const Tensor& flow);

/// Mean |pred - target| over elements whose pixel is set in `mask`
/// ([N,H,W], empty = all). pred/target are [N,C,H,W].
Tensor l1_loss(const Tensor& pred, std::span<const double> target,
               std::span<const double> mask = {});
/// Mean binary cross-entropy with p clamped to [eps, 1-eps].
Tensor bce_loss(const Tensor& p, std::span<const double> target,
                std::span<const double> mask = {}, double eps = 1e-7);

}  // namespace docgeo::nn
