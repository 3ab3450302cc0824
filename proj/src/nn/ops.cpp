#include "docgeo/nn/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "docgeo/error.hpp"

namespace docgeo::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<RowMat>;
using CMapR = Eigen::Map<const RowMat>;

void check(bool ok, const std::string& msg) { require(ok, ErrorCode::ShapeMismatch, msg); }

bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

template <class F, class G>
Tensor unary(const Tensor& x, F f, G df) {
  Buffer out(x.numel());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [x, df](Node& self) mutable {
    auto& g = x.grad();
    const auto& xv = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

void im2col(const double* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* col) {
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* dst = col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * ho * wo;
        const double* src = x + static_cast<std::size_t>(ci) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride - pad + ky;
          double* row = dst + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(row, row + wo, 0.0);
            continue;
          }
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride - pad + kx;
            row[ox] = (ix >= 0 && ix < w) ? src[static_cast<std::size_t>(iy) * w + ix] : 0.0;
          }
        }
      }
}

void col2im(const double* col, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* x) {
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* src = col + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * ho * wo;
        double* dst = x + static_cast<std::size_t>(ci) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w)
              dst[static_cast<std::size_t>(iy) * w + ix] += src[static_cast<std::size_t>(oy) * wo + ox];
          }
        }
      }
}

// Per-axis bilinear taps with half-pixel centres.
struct Taps {
  std::vector<int> i0, i1;
  Buffer w1;
};

Taps make_taps(int in, int out) {
  Taps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.w1.resize(out);
  double s = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = std::max(0.0, (o + 0.5) * s - 0.5);
    int a = std::min(static_cast<int>(std::floor(src)), in - 1);
    t.i0[o] = a;
    t.i1[o] = std::min(a + 1, in - 1);
    t.w1[o] = src - a;
  }
  return t;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    Buffer out(a.data());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [a, b](Node& self) mutable {
      for (const Tensor* t : {&a, &b})
        if (t->requires_grad()) {
          auto& g = t->grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
  }
  check(is_suffix(a.shape(), b.shape()),
        "add: cannot broadcast " + shape_str(b.shape()) + " to " + shape_str(a.shape()));
  const std::size_t inner = b.numel();
  Buffer out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i % inner];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b, inner](Node& self) mutable {
    if (a.requires_grad()) {
      auto& g = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b.requires_grad()) {
      auto& g = b.grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % inner] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](Node& self) mutable {
    if (a.requires_grad()) {
      auto& g = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      auto& g = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.data()[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor shift(const Tensor& a, double c) {
  return unary(a, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x,
               [](double v) {
                 return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
               },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({1}, {s}, {x}, [x](Node& self) mutable {
    for (double& g : x.grad()) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  check(x.numel() > 0, "mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, const Shape& s) {
  check(numel(s) == x.numel(), "reshape: element count mismatch");
  return make_result(s, x.data(), {x}, [x](Node& self) mutable {
    auto& g = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  check(x.rank() == 4 && w.rank() == 4, "conv2d expects 4D input and weight");
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0), k = w.dim(2);
  check(w.dim(1) == ci && w.dim(3) == k,
        "conv2d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  check(!b.defined() || (b.rank() == 1 && b.dim(0) == co), "conv2d: bias shape");
  require(stride >= 1 && pad >= 0, ErrorCode::InvalidArgument, "conv2d: bad stride/pad");
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  check(ho > 0 && wo > 0, "conv2d: input smaller than kernel");
  const int kk = ci * k * k, po = ho * wo;
  const bool direct = k == 1 && stride == 1 && pad == 0;

  Buffer out(static_cast<std::size_t>(n) * co * po);
  Buffer col(direct ? 0 : static_cast<std::size_t>(kk) * po);
  CMapR W(w.data().data(), co, kk);
  for (int s = 0; s < n; ++s) {
    const double* xs = x.data().data() + static_cast<std::size_t>(s) * ci * h * wd;
    if (!direct) im2col(xs, ci, h, wd, k, stride, pad, ho, wo, col.data());
    CMapR C(direct ? xs : col.data(), kk, po);
    MapR O(out.data() + static_cast<std::size_t>(s) * co * po, co, po);
    O.noalias() = W * C;
    if (b.defined()) O.colwise() += Eigen::Map<const Eigen::VectorXd>(b.data().data(), co);
  }
  Shape os{n, co, ho, wo};
  return make_result(os, std::move(out), {x, w, b},
                     [=](Node& self) mutable {
    Buffer col(direct ? 0 : static_cast<std::size_t>(kk) * po);
    Buffer dcol(direct ? 0 : static_cast<std::size_t>(kk) * po);
    CMapR W(w.data().data(), co, kk);
    for (int s = 0; s < n; ++s) {
      const double* xs = x.data().data() + static_cast<std::size_t>(s) * ci * h * wd;
      CMapR G(self.grad.data() + static_cast<std::size_t>(s) * co * po, co, po);
      if (w.requires_grad()) {
        if (!direct) im2col(xs, ci, h, wd, k, stride, pad, ho, wo, col.data());
        CMapR C(direct ? xs : col.data(), kk, po);
        MapR(w.grad().data(), co, kk).noalias() += G * C.transpose();
      }
      if (b.defined() && b.requires_grad())
        Eigen::Map<Eigen::VectorXd>(b.grad().data(), co) += G.rowwise().sum();
      if (x.requires_grad()) {
        double* gx = x.grad().data() + static_cast<std::size_t>(s) * ci * h * wd;
        if (direct) {
          MapR(gx, kk, po).noalias() += W.transpose() * G;
        } else {
          MapR(dcol.data(), kk, po).noalias() = W.transpose() * G;
          col2im(dcol.data(), ci, h, wd, k, stride, pad, ho, wo, gx);
        }
      }
    }
  });
}

Tensor maxpool2(const Tensor& x) {
  check(x.rank() == 4, "maxpool2 expects 4D input");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h / 2, wo = w / 2;
  check(ho > 0 && wo > 0, "maxpool2: input too small");
  Buffer out(static_cast<std::size_t>(n) * c * ho * wo);
  std::vector<std::size_t> arg(out.size());
  const auto& xv = x.data();
  std::size_t o = 0;
  for (int p = 0; p < n * c; ++p) {
    const std::size_t base = static_cast<std::size_t>(p) * h * w;
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx, ++o) {
        std::size_t best = base + static_cast<std::size_t>(2 * y) * w + 2 * xx;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            std::size_t i = base + static_cast<std::size_t>(2 * y + dy) * w + 2 * xx + dx;
            if (xv[i] > xv[best]) best = i;
          }
        out[o] = xv[best];
        arg[o] = best;
      }
  }
  return make_result({n, c, ho, wo}, std::move(out), {x}, [x, arg](Node& self) mutable {
    auto& g = x.grad();
    for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
  });
}

Tensor upsample_bilinear(const Tensor& x, int height, int width) {
  check(x.rank() == 4, "upsample_bilinear expects 4D input");
  require(height > 0 && width > 0, ErrorCode::InvalidArgument, "upsample_bilinear: bad size");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Taps ty = make_taps(h, height), tx = make_taps(w, width);
  Buffer out(static_cast<std::size_t>(n) * c * height * width);
  const auto& xv = x.data();
  for (int p = 0; p < n * c; ++p) {
    const double* src = xv.data() + static_cast<std::size_t>(p) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(p) * height * width;
    for (int oy = 0; oy < height; ++oy) {
      const double* r0 = src + static_cast<std::size_t>(ty.i0[oy]) * w;
      const double* r1 = src + static_cast<std::size_t>(ty.i1[oy]) * w;
      double wy = ty.w1[oy];
      for (int ox = 0; ox < width; ++ox) {
        double wx = tx.w1[ox];
        double top = r0[tx.i0[ox]] * (1 - wx) + r0[tx.i1[ox]] * wx;
        double bot = r1[tx.i0[ox]] * (1 - wx) + r1[tx.i1[ox]] * wx;
        dst[static_cast<std::size_t>(oy) * width + ox] = top * (1 - wy) + bot * wy;
      }
    }
  }
  return make_result({n, c, height, width}, std::move(out), {x},
                     [x, ty, tx, n, c, h, w, height, width](Node& self) mutable {
    auto& g = x.grad();
    for (int p = 0; p < n * c; ++p) {
      double* dst = g.data() + static_cast<std::size_t>(p) * h * w;
      const double* go = self.grad.data() + static_cast<std::size_t>(p) * height * width;
      for (int oy = 0; oy < height; ++oy) {
        double* r0 = dst + static_cast<std::size_t>(ty.i0[oy]) * w;
        double* r1 = dst + static_cast<std::size_t>(ty.i1[oy]) * w;
        double wy = ty.w1[oy];
        for (int ox = 0; ox < width; ++ox) {
          double v = go[static_cast<std::size_t>(oy) * width + ox], wx = tx.w1[ox];
          r0[tx.i0[ox]] += v * (1 - wy) * (1 - wx);
          r0[tx.i1[ox]] += v * (1 - wy) * wx;
          r1[tx.i0[ox]] += v * wy * (1 - wx);
          r1[tx.i1[ox]] += v * wy * wx;
        }
      }
    }
  });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  require(!xs.empty(), ErrorCode::InvalidArgument, "concat of nothing");
  const int r = xs[0].rank();
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, ErrorCode::OutOfRange, "concat axis out of range");
  Shape s = xs[0].shape();
  s[axis] = 0;
  for (const Tensor& t : xs) {
    check(t.rank() == r, "concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis) check(t.dim(d) == xs[0].dim(d), "concat: shape mismatch " + shape_str(t.shape()));
    s[axis] += t.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (int d = axis + 1; d < r; ++d) inner *= s[d];
  Buffer out(numel(s));
  std::size_t off = 0;
  std::vector<std::size_t> offs;
  for (const Tensor& t : xs) {
    const std::size_t chunk = static_cast<std::size_t>(t.dim(axis)) * inner;
    offs.push_back(off);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(t.data().data() + o * chunk, chunk,
                  out.data() + o * s[axis] * inner + off);
    off += chunk;
  }
  const std::size_t row = static_cast<std::size_t>(s[axis]) * inner;
  return make_result(s, std::move(out), xs, [xs, offs, outer, inner, axis, row](Node& self) mutable {
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (!xs[i].requires_grad()) continue;
      const std::size_t chunk = static_cast<std::size_t>(xs[i].dim(axis)) * inner;
      auto& g = xs[i].grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < chunk; ++j) g[o * chunk + j] += self.grad[o * row + offs[i] + j];
    }
  });
}

Tensor to_tokens(const Tensor& x) {
  check(x.rank() == 4, "to_tokens expects 4D input");
  const int n = x.dim(0), c = x.dim(1), l = x.dim(2) * x.dim(3);
  Buffer out(x.numel());
  for (int s = 0; s < n; ++s)
    MapR(out.data() + static_cast<std::size_t>(s) * l * c, l, c) =
        CMapR(x.data().data() + static_cast<std::size_t>(s) * l * c, c, l).transpose();
  return make_result({n, l, c}, std::move(out), {x}, [x, n, c, l](Node& self) mutable {
    auto& g = x.grad();
    for (int s = 0; s < n; ++s)
      MapR(g.data() + static_cast<std::size_t>(s) * l * c, c, l) +=
          CMapR(self.grad.data() + static_cast<std::size_t>(s) * l * c, l, c).transpose();
  });
}

Tensor from_tokens(const Tensor& t, int height, int width) {
  check(t.rank() == 3 && t.dim(1) == height * width, "from_tokens: token count mismatch");
  const int n = t.dim(0), c = t.dim(2), l = height * width;
  Buffer out(t.numel());
  for (int s = 0; s < n; ++s)
    MapR(out.data() + static_cast<std::size_t>(s) * l * c, c, l) =
        CMapR(t.data().data() + static_cast<std::size_t>(s) * l * c, l, c).transpose();
  return make_result({n, c, height, width}, std::move(out), {t}, [t, n, c, l](Node& self) mutable {
    auto& g = t.grad();
    for (int s = 0; s < n; ++s)
      MapR(g.data() + static_cast<std::size_t>(s) * l * c, l, c) +=
          CMapR(self.grad.data() + static_cast<std::size_t>(s) * l * c, c, l).transpose();
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check(w.rank() == 2 && x.rank() >= 1 && x.dim(-1) == w.dim(0),
        "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const int ci = w.dim(0), co = w.dim(1);
  check(!b.defined() || (b.rank() == 1 && b.dim(0) == co), "linear: bias shape");
  const int rows = static_cast<int>(x.numel() / ci);
  Shape s = x.shape();
  s.back() = co;
  Buffer out(static_cast<std::size_t>(rows) * co);
  MapR O(out.data(), rows, co);
  O.noalias() = CMapR(x.data().data(), rows, ci) * CMapR(w.data().data(), ci, co);
  if (b.defined()) O.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), co);
  return make_result(s, std::move(out), {x, w, b}, [x, w, b, rows, ci, co](Node& self) mutable {
    CMapR G(self.grad.data(), rows, co);
    if (w.requires_grad())
      MapR(w.grad().data(), ci, co).noalias() += CMapR(x.data().data(), rows, ci).transpose() * G;
    if (b.defined() && b.requires_grad())
      Eigen::Map<Eigen::RowVectorXd>(b.grad().data(), co) += G.colwise().sum();
    if (x.requires_grad())
      MapR(x.grad().data(), rows, ci).noalias() += G * CMapR(w.data().data(), ci, co).transpose();
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int c = x.dim(-1);
  check(gamma.numel() == static_cast<std::size_t>(c) && beta.numel() == static_cast<std::size_t>(c),
        "layer_norm: parameter width mismatch");
  const std::size_t rows = x.numel() / c;
  Buffer out(x.numel()), xhat(x.numel()), inv(rows);
  const auto& xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * c;
    double m = 0.0, v = 0.0;
    for (int j = 0; j < c; ++j) m += xr[j];
    m /= c;
    for (int j = 0; j < c; ++j) v += (xr[j] - m) * (xr[j] - m);
    v /= c;
    inv[r] = 1.0 / std::sqrt(v + eps);
    for (int j = 0; j < c; ++j) {
      double h = (xr[j] - m) * inv[r];
      xhat[r * c + j] = h;
      out[r * c + j] = h * gamma.data()[j] + beta.data()[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [x, gamma, beta, xhat, inv, rows, c](Node& self) mutable {
    const auto& gv = gamma.data();
    if (gamma.requires_grad() || beta.requires_grad()) {
      auto& gg = gamma.grad();
      auto& gb = beta.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < c; ++j) {
          gg[j] += self.grad[r * c + j] * xhat[r * c + j];
          gb[j] += self.grad[r * c + j];
        }
    }
    if (!x.requires_grad()) return;
    auto& gx = x.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double m1 = 0.0, m2 = 0.0;
      for (int j = 0; j < c; ++j) {
        double dh = self.grad[r * c + j] * gv[j];
        m1 += dh;
        m2 += dh * xhat[r * c + j];
      }
      m1 /= c;
      m2 /= c;
      for (int j = 0; j < c; ++j) {
        double dh = self.grad[r * c + j] * gv[j];
        gx[r * c + j] += inv[r] * (dh - m1 - xhat[r * c + j] * m2);
      }
    }
  });
}

namespace {

using StrideMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using StrideMapW = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

void softmax_rows(RowMat& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    double m = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - m).exp();
    s.row(i) /= s.row(i).sum();
  }
}

}  // namespace

Buffer attention_weights(const Tensor& q, const Tensor& k, int heads) {
  check(q.rank() == 3 && q.shape() == k.shape(), "attention: q/k shape mismatch");
  const int n = q.dim(0), l = q.dim(1), dm = q.dim(2);
  require(heads >= 1 && dm % heads == 0, ErrorCode::InvalidArgument,
          "attention: width not divisible by heads");
  const int d = dm / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));
  Buffer p(static_cast<std::size_t>(n) * heads * l * l);
  for (int s = 0; s < n; ++s)
    for (int hd = 0; hd < heads; ++hd) {
      const std::size_t off = static_cast<std::size_t>(s) * l * dm + hd * d;
      StrideMap Q(q.data().data() + off, l, d, Eigen::OuterStride<>(dm));
      StrideMap K(k.data().data() + off, l, d, Eigen::OuterStride<>(dm));
      RowMat S = (Q * K.transpose()) * sc;
      softmax_rows(S);
      MapR(p.data() + (static_cast<std::size_t>(s) * heads + hd) * l * l, l, l) = S;
    }
  return p;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  check(q.shape() == v.shape(), "attention: q/v shape mismatch");
  Buffer probs = attention_weights(q, k, heads);
  const int n = q.dim(0), l = q.dim(1), dm = q.dim(2), d = dm / heads;
  Buffer out(q.numel());
  for (int s = 0; s < n; ++s)
    for (int hd = 0; hd < heads; ++hd) {
      const std::size_t off = static_cast<std::size_t>(s) * l * dm + hd * d;
      CMapR P(probs.data() + (static_cast<std::size_t>(s) * heads + hd) * l * l, l, l);
      StrideMap V(v.data().data() + off, l, d, Eigen::OuterStride<>(dm));
      StrideMapW(out.data() + off, l, d, Eigen::OuterStride<>(dm)).noalias() = P * V;
    }
  return make_result(q.shape(), std::move(out), {q, k, v},
                     [q, k, v, probs, heads, n, l, dm, d](Node& self) mutable {
    const double sc = 1.0 / std::sqrt(static_cast<double>(d));
    for (int s = 0; s < n; ++s)
      for (int hd = 0; hd < heads; ++hd) {
        const std::size_t off = static_cast<std::size_t>(s) * l * dm + hd * d;
        CMapR P(probs.data() + (static_cast<std::size_t>(s) * heads + hd) * l * l, l, l);
        StrideMap G(self.grad.data() + off, l, d, Eigen::OuterStride<>(dm));
        StrideMap Q(q.data().data() + off, l, d, Eigen::OuterStride<>(dm));
        StrideMap K(k.data().data() + off, l, d, Eigen::OuterStride<>(dm));
        StrideMap V(v.data().data() + off, l, d, Eigen::OuterStride<>(dm));
        if (v.requires_grad())
          StrideMapW(v.grad().data() + off, l, d, Eigen::OuterStride<>(dm)).noalias() += P.transpose() * G;
        if (!q.requires_grad() && !k.requires_grad()) continue;
        RowMat dP = G * V.transpose();
        Eigen::VectorXd rs = (dP.array() * P.array()).rowwise().sum();
        RowMat dS = (P.array() * (dP.colwise() - rs).array()) * sc;
        if (q.requires_grad())
          StrideMapW(q.grad().data() + off, l, d, Eigen::OuterStride<>(dm)).noalias() += dS * K;
        if (k.requires_grad())
          StrideMapW(k.grad().data() + off, l, d, Eigen::OuterStride<>(dm)).noalias() += dS.transpose() * Q;
      }
  });
}

Tensor convex_upsample(const Tensor& flow, const Tensor& logits, int f) {
  check(flow.rank() == 4 && logits.rank() == 4, "convex_upsample expects 4D inputs");
  const int n = flow.dim(0), c = flow.dim(1), h = flow.dim(2), w = flow.dim(3);
  require(f >= 1, ErrorCode::InvalidArgument, "convex_upsample: factor must be positive");
  check(logits.dim(0) == n && logits.dim(1) == 9 * f * f && logits.dim(2) == h && logits.dim(3) == w,
        "convex_upsample: logits " + shape_str(logits.shape()) + " vs flow " + shape_str(flow.shape()));
  const int H = h * f, W = w * f;
  const std::size_t ff = static_cast<std::size_t>(f) * f, hw = static_cast<std::size_t>(h) * w;
  // Softmax weights, stored [n][9][f*f][h*w] like the logits.
  Buffer wts(logits.numel());
  const auto& lv = logits.data();
  for (int s = 0; s < n; ++s)
    for (std::size_t o = 0; o < ff; ++o)
      for (std::size_t p = 0; p < hw; ++p) {
        auto at = [&](int k) { return (static_cast<std::size_t>(s) * 9 + k) * ff * hw + o * hw + p; };
        double m = lv[at(0)];
        for (int k = 1; k < 9; ++k) m = std::max(m, lv[at(k)]);
        double z = 0.0;
        for (int k = 0; k < 9; ++k) z += wts[at(k)] = std::exp(lv[at(k)] - m);
        for (int k = 0; k < 9; ++k) wts[at(k)] /= z;
      }
  auto nbr = [h, w](int i, int j, int k) {
    int y = std::clamp(i + k / 3 - 1, 0, h - 1), x = std::clamp(j + k % 3 - 1, 0, w - 1);
    return static_cast<std::size_t>(y) * w + x;
  };
  Buffer out(static_cast<std::size_t>(n) * c * H * W, 0.0);
  const auto& fv = flow.data();
  for (int s = 0; s < n; ++s)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        for (int dy = 0; dy < f; ++dy)
          for (int dx = 0; dx < f; ++dx) {
            const std::size_t o = static_cast<std::size_t>(dy) * f + dx, p = static_cast<std::size_t>(i) * w + j;
            for (int ch = 0; ch < c; ++ch) {
              const double* fc = fv.data() + (static_cast<std::size_t>(s) * c + ch) * hw;
              double acc = 0.0;
              for (int k = 0; k < 9; ++k)
                acc += wts[(static_cast<std::size_t>(s) * 9 + k) * ff * hw + o * hw + p] * fc[nbr(i, j, k)];
              out[((static_cast<std::size_t>(s) * c + ch) * H + i * f + dy) * W + j * f + dx] = acc;
            }
          }
  return make_result({n, c, H, W}, std::move(out), {flow, logits},
                     [flow, logits, wts, nbr, n, c, h, w, f, H, W, ff, hw](Node& self) mutable {
    const auto& fv = flow.data();
    double* gf = flow.requires_grad() ? flow.grad().data() : nullptr;
    double* gl = logits.requires_grad() ? logits.grad().data() : nullptr;
    double gk[9];
    for (int s = 0; s < n; ++s)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          for (int dy = 0; dy < f; ++dy)
            for (int dx = 0; dx < f; ++dx) {
              const std::size_t o = static_cast<std::size_t>(dy) * f + dx, p = static_cast<std::size_t>(i) * w + j;
              std::fill(gk, gk + 9, 0.0);
              for (int ch = 0; ch < c; ++ch) {
                const std::size_t fo = (static_cast<std::size_t>(s) * c + ch) * hw;
                double g = self.grad[((static_cast<std::size_t>(s) * c + ch) * H + i * f + dy) * W + j * f + dx];
                for (int k = 0; k < 9; ++k) {
                  const std::size_t wi = (static_cast<std::size_t>(s) * 9 + k) * ff * hw + o * hw + p;
                  gk[k] += g * fv[fo + nbr(i, j, k)];
                  if (gf) gf[fo + nbr(i, j, k)] += g * wts[wi];
                }
              }
              if (!gl) continue;
              double dot = 0.0;
              for (int k = 0; k < 9; ++k) dot += wts[(static_cast<std::size_t>(s) * 9 + k) * ff * hw + o * hw + p] * gk[k];
              for (int k = 0; k < 9; ++k) {
                const std::size_t wi = (static_cast<std::size_t>(s) * 9 + k) * ff * hw + o * hw + p;
                gl[wi] += wts[wi] * (gk[k] - dot);
              }
            }
  });
}

Tensor warp_bilinear(const Tensor& img, const Tensor& flow) {
  check(img.rank() == 4 && flow.rank() == 4 && flow.dim(1) == 2 && flow.dim(0) == img.dim(0),
        "warp_bilinear: expects img [N,C,H,W] and flow [N,2,H',W']");
  const int n = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
  const int ho = flow.dim(2), wo = flow.dim(3);
  const std::size_t po = static_cast<std::size_t>(ho) * wo, pi = static_cast<std::size_t>(h) * w;
  struct Tap {
    std::size_t i00, i01, i10, i11;
    double ax, ay;
    bool inx, iny;  // position strictly inside the clamped range
  };
  std::vector<Tap> taps(static_cast<std::size_t>(n) * po);
  const auto& fv = flow.data();
  for (int s = 0; s < n; ++s)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        const std::size_t p = static_cast<std::size_t>(i) * wo + j;
        double x = j + fv[(static_cast<std::size_t>(s) * 2) * po + p];
        double y = i + fv[(static_cast<std::size_t>(s) * 2 + 1) * po + p];
        int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
        Tap t;
        t.ax = x - x0;
        t.ay = y - y0;
        int xa = std::clamp(x0, 0, w - 1), xb = std::clamp(x0 + 1, 0, w - 1);
        int ya = std::clamp(y0, 0, h - 1), yb = std::clamp(y0 + 1, 0, h - 1);
        t.inx = x0 >= 0 && x0 + 1 <= w - 1;
        t.iny = y0 >= 0 && y0 + 1 <= h - 1;
        t.i00 = static_cast<std::size_t>(ya) * w + xa;
        t.i01 = static_cast<std::size_t>(ya) * w + xb;
        t.i10 = static_cast<std::size_t>(yb) * w + xa;
        t.i11 = static_cast<std::size_t>(yb) * w + xb;
        taps[static_cast<std::size_t>(s) * po + p] = t;
      }
  Buffer out(static_cast<std::size_t>(n) * c * po);
  const auto& iv = img.data();
  for (int s = 0; s < n; ++s)
    for (int ch = 0; ch < c; ++ch) {
      const double* src = iv.data() + (static_cast<std::size_t>(s) * c + ch) * pi;
      double* dst = out.data() + (static_cast<std::size_t>(s) * c + ch) * po;
      for (std::size_t p = 0; p < po; ++p) {
        const Tap& t = taps[static_cast<std::size_t>(s) * po + p];
        dst[p] = (1 - t.ay) * ((1 - t.ax) * src[t.i00] + t.ax * src[t.i01]) +
                 t.ay * ((1 - t.ax) * src[t.i10] + t.ax * src[t.i11]);
      }
    }
  return make_result({n, c, ho, wo}, std::move(out), {img, flow},
                     [img, flow, taps, n, c, po, pi](Node& self) mutable {
    const auto& iv = img.data();
    double* gi = img.requires_grad() ? img.grad().data() : nullptr;
    double* gf = flow.requires_grad() ? flow.grad().data() : nullptr;
    for (int s = 0; s < n; ++s)
      for (int ch = 0; ch < c; ++ch) {
        const double* src = iv.data() + (static_cast<std::size_t>(s) * c + ch) * pi;
        const double* g = self.grad.data() + (static_cast<std::size_t>(s) * c + ch) * po;
        for (std::size_t p = 0; p < po; ++p) {
          const Tap& t = taps[static_cast<std::size_t>(s) * po + p];
          if (gi) {
            double* d = gi + (static_cast<std::size_t>(s) * c + ch) * pi;
            d[t.i00] += g[p] * (1 - t.ay) * (1 - t.ax);
            d[t.i01] += g[p] * (1 - t.ay) * t.ax;
            d[t.i10] += g[p] * t.ay * (1 - t.ax);
            d[t.i11] += g[p] * t.ay * t.ax;
          }
          if (gf) {
            double dx = (1 - t.ay) * (src[t.i01] - src[t.i00]) + t.ay * (src[t.i11] - src[t.i10]);
            double dy = (1 - t.ax) * (src[t.i10] - src[t.i00]) + t.ax * (src[t.i11] - src[t.i01]);
            gf[(static_cast<std::size_t>(s) * 2) * po + p] += g[p] * dx;
            gf[(static_cast<std::size_t>(s) * 2 + 1) * po + p] += g[p] * dy;
          }
        }
      }
  });
}

namespace {

// Expands a per-pixel [N,H,W] mask to the element weights of [N,C,H,W].
Buffer element_mask(const Tensor& pred, std::span<const double> mask, double& count) {
  check(pred.rank() == 4, "loss expects [N,C,H,W] predictions");
  const int n = pred.dim(0), c = pred.dim(1);
  const std::size_t hw = static_cast<std::size_t>(pred.dim(2)) * pred.dim(3);
  Buffer m(pred.numel(), 1.0);
  if (!mask.empty()) {
    check(mask.size() == static_cast<std::size_t>(n) * hw, "loss: mask size mismatch");
    for (int s = 0; s < n; ++s)
      for (int ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p)
          m[(static_cast<std::size_t>(s) * c + ch) * hw + p] = mask[static_cast<std::size_t>(s) * hw + p] != 0 ? 1.0 : 0.0;
  }
  count = 0.0;
  for (double v : m) count += v;
  require(count > 0, ErrorCode::MissingData, "loss over an empty mask");
  return m;
}

}  // namespace

Tensor l1_loss(const Tensor& pred, std::span<const double> target, std::span<const double> mask) {
  check(target.size() == pred.numel(), "l1_loss: target size mismatch");
  double count = 0.0;
  Buffer m = element_mask(pred, mask, count);
  double s = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) s += m[i] * std::abs(pred.data()[i] - target[i]);
  return make_result({1}, {s / count}, {pred}, [pred, target = Buffer(target.begin(), target.end()), m, count](Node& self) mutable {
    auto& g = pred.grad();
    const double k = self.grad[0] / count;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = pred.data()[i] - target[i];
      g[i] += m[i] * k * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
    }
  });
}

Tensor bce_loss(const Tensor& p, std::span<const double> target, std::span<const double> mask,
                double eps) {
  check(target.size() == p.numel(), "bce_loss: target size mismatch");
  double count = 0.0;
  Buffer m = element_mask(p, mask, count);
  double s = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] == 0.0) continue;
    double pc = std::clamp(p.data()[i], eps, 1.0 - eps), y = target[i];
    s -= y * std::log(pc) + (1 - y) * std::log(1 - pc);
  }
  return make_result({1}, {s / count}, {p}, [p, target = Buffer(target.begin(), target.end()), m, count, eps](Node& self) mutable {
    auto& g = p.grad();
    const double k = self.grad[0] / count;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double v = p.data()[i];
      if (m[i] == 0.0 || v < eps || v > 1.0 - eps) continue;
      g[i] += k * (v - target[i]) / (v * (1 - v));
    }
  });
}

}  // namespace docgeo::nn
