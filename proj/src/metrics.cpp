#include "docgeo/metrics.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

namespace docgeo::metrics {

Image resize_to_area(const Image& img, double area) {
  require(img.height > 0 && img.width > 0, ErrorCode::InvalidArgument, "empty image");
  require(area > 0, ErrorCode::InvalidArgument, "area must be positive");
  double s = std::sqrt(area / (static_cast<double>(img.height) * img.width));
  int h = std::max(1, static_cast<int>(std::lround(img.height * s)));
  int w = std::max(1, static_cast<int>(std::lround(img.width * s)));
  if (h == img.height && w == img.width) return img;
  return resize_bilinear(img, h, w);
}

namespace {

std::vector<double> gaussian_kernel(int n, double sigma) {
  std::vector<double> k(n);
  double c = (n - 1) / 2.0, sum = 0.0;
  for (int i = 0; i < n; ++i) {
    k[i] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable "valid" correlation of a single-channel plane.
std::vector<double> filter_valid(const std::vector<double>& src, int h, int w,
                                 const std::vector<double>& k) {
  int n = static_cast<int>(k.size());
  int oh = h - n + 1, ow = w - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y) {
    const double* row = &src[static_cast<std::size_t>(y) * w];
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * row[x + i];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[i] * tmp[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  }
  return out;
}

double ssim_gray(const Image& a, const Image& b, const SsimOptions& opt) {
  int h = a.height, w = a.width;
  auto k = gaussian_kernel(opt.window, opt.sigma);
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a.data[i] * a.data[i];
    bb[i] = b.data[i] * b.data[i];
    ab[i] = a.data[i] * b.data[i];
  }
  auto mu_a = filter_valid(a.data, h, w, k);
  auto mu_b = filter_valid(b.data, h, w, k);
  auto s_aa = filter_valid(aa, h, w, k);
  auto s_bb = filter_valid(bb, h, w, k);
  auto s_ab = filter_valid(ab, h, w, k);
  double c1 = opt.k1 * opt.k1, c2 = opt.k2 * opt.k2;
  double sum = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    double ma = mu_a[i], mb = mu_b[i];
    double va = s_aa[i] - ma * ma, vb = s_bb[i] - mb * mb, cov = s_ab[i] - ma * mb;
    sum += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return sum / static_cast<double>(mu_a.size());
}

// Burt-Adelson reduce with the [1 4 6 4 1]/16 kernel and symmetric borders.
Image reduce(const Image& g) {
  static constexpr double k[5] = {1 / 16.0, 4 / 16.0, 6 / 16.0, 4 / 16.0, 1 / 16.0};
  auto refl = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  int oh = (g.height + 1) / 2, ow = (g.width + 1) / 2;
  Image tmp(g.height, ow);
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < 5; ++i) s += k[i] * g.at(y, refl(2 * x + i - 2, g.width));
      tmp.at(y, x) = s;
    }
  Image out(oh, ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < 5; ++i) s += k[i] * tmp.at(refl(2 * y + i - 2, g.height), x);
      out.at(y, x) = s;
    }
  return out;
}

void check_pair(const Image& a, const Image& b) {
  require(a.same_shape(b), ErrorCode::ShapeMismatch, "images differ in shape");
  require(a.height > 0 && a.width > 0, ErrorCode::InvalidArgument, "empty image");
}

}  // namespace

double ssim(const Image& a, const Image& b, const SsimOptions& opt) {
  check_pair(a, b);
  require(opt.window >= 1 && opt.window % 2 == 1, ErrorCode::InvalidArgument,
          "SSIM window must be odd");
  require(std::min(a.height, a.width) >= opt.window, ErrorCode::InvalidArgument,
          "image smaller than the SSIM window");
  return ssim_gray(to_gray(a), to_gray(b), opt);
}

MsSsimResult ms_ssim_detailed(const Image& a, const Image& b, const SsimOptions& opt) {
  check_pair(a, b);
  require(std::min(a.height, a.width) >= opt.window, ErrorCode::InvalidArgument,
          "image smaller than the SSIM window (" + std::to_string(a.height) + "x" +
              std::to_string(a.width) + ")");
  Image ga = to_gray(a), gb = to_gray(b);
  MsSsimResult r;
  double num = 0.0, den = 0.0;
  for (std::size_t j = 0; j < kMsSsimWeights.size(); ++j) {
    if (j > 0) {
      ga = reduce(ga);
      gb = reduce(gb);
    }
    if (std::min(ga.height, ga.width) < opt.window) break;
    double s = ssim_gray(ga, gb, opt);
    r.per_level[j] = s;
    num += kMsSsimWeights[j] * std::max(0.0, s);
    den += kMsSsimWeights[j];
    r.levels = static_cast<int>(j) + 1;
  }
  r.value = std::clamp(num / den, 0.0, 1.0);
  return r;
}

double ms_ssim(const Image& a, const Image& b, const SsimOptions& opt) {
  return ms_ssim_detailed(a, b, opt).value;
}

double local_distortion(const CoordMap& m, const Mask& valid) {
  require(m.x.size() == static_cast<std::size_t>(m.height) * m.width && m.y.size() == static_cast<std::size_t>(m.height) * m.width, ErrorCode::ShapeMismatch,
          "match field size mismatch");
  bool masked = !valid.empty();
  if (masked)
    require(valid.height == m.height && valid.width == m.width, ErrorCode::ShapeMismatch,
            "mask does not match the match field");
  double sum = 0.0;
  std::size_t n = 0;
  for (int i = 0; i < m.height; ++i)
    for (int j = 0; j < m.width; ++j) {
      if (masked && !valid.at(i, j)) continue;
      sum += std::hypot(m.x[m.index(i, j)] - j, m.y[m.index(i, j)] - i);
      ++n;
    }
  require(n > 0, ErrorCode::MissingData, "no valid matches");
  return sum / static_cast<double>(n);
}

namespace {

struct PatchStats {
  std::vector<double> mean;
  std::vector<double> norm;  // sqrt of centred sum of squares
};

PatchStats patch_stats(const Image& g, int r) {
  PatchStats s;
  s.mean.resize(g.pixels());
  s.norm.resize(g.pixels());
  double n = (2.0 * r + 1) * (2.0 * r + 1);
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x) {
      double sum = 0.0, sq = 0.0;
      for (int v = -r; v <= r; ++v) {
        int yy = std::clamp(y + v, 0, g.height - 1);
        for (int u = -r; u <= r; ++u) {
          double p = g.at(yy, std::clamp(x + u, 0, g.width - 1));
          sum += p;
          sq += p * p;
        }
      }
      double mu = sum / n;
      s.mean[g.index(y, x)] = mu;
      s.norm[g.index(y, x)] = std::sqrt(std::max(0.0, sq - n * mu * mu));
    }
  return s;
}

double median9(double* v) {
  std::nth_element(v, v + 4, v + 9);
  return v[4];
}

void median_filter(std::vector<double>& f, int h, int w) {
  std::vector<double> out(f.size());
  double buf[9];
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int k = 0;
      for (int v = -1; v <= 1; ++v)
        for (int u = -1; u <= 1; ++u)
          buf[k++] = f[static_cast<std::size_t>(std::clamp(y + v, 0, h - 1)) * w +
                       std::clamp(x + u, 0, w - 1)];
      out[static_cast<std::size_t>(y) * w + x] = median9(buf);
    }
  f.swap(out);
}

double variance(const Image& g) {
  double m = std::accumulate(g.data.begin(), g.data.end(), 0.0) / g.data.size();
  double v = 0.0;
  for (double p : g.data) v += (p - m) * (p - m);
  return v / g.data.size();
}

void match_level(const Image& ref, const Image& rect, std::vector<double>& fx,
                 std::vector<double>& fy, const DenseMatchOptions& opt) {
  const int h = ref.height, w = ref.width, r = opt.patch_radius, R = opt.search_radius;
  const int side = 2 * R + 1;
  PatchStats sr = patch_stats(ref, r), st = patch_stats(rect, r);
  constexpr double kFlat = 1e-3;
  std::vector<double> cost(side * side);
  for (int it = 0; it < opt.iterations; ++it) {
    std::vector<double> nx(fx.size()), ny(fy.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double sx = 0.0, sy = 0.0;
        int n = 0;
        const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          int yy = y + dy[k], xx = x + dx[k];
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          sx += fx[static_cast<std::size_t>(yy) * w + xx];
          sy += fy[static_cast<std::size_t>(yy) * w + xx];
          ++n;
        }
        std::size_t i = static_cast<std::size_t>(y) * w + x;
        double bx = sx / n, by = sy / n;
        if (sr.norm[i] < kFlat) {
          nx[i] = bx;
          ny[i] = by;
          continue;
        }
        int cx = x + static_cast<int>(std::lround(fx[i]));
        int cy = y + static_cast<int>(std::lround(fy[i]));
        double best = 1e300;
        int bu = 0, bv = 0;
        for (int v = -R; v <= R; ++v)
          for (int u = -R; u <= R; ++u) {
            int qx = cx + u, qy = cy + v;
            double& c = cost[(v + R) * side + (u + R)];
            if (qx < 0 || qx >= w || qy < 0 || qy >= h) {
              c = 1e300;
              continue;
            }
            std::size_t q = static_cast<std::size_t>(qy) * w + qx;
            double ncc = 0.0;
            if (st.norm[q] >= kFlat) {
              double cross = 0.0;
              for (int b = -r; b <= r; ++b) {
                int y1 = std::clamp(y + b, 0, h - 1), y2 = std::clamp(qy + b, 0, h - 1);
                for (int a = -r; a <= r; ++a)
                  cross += ref.at(y1, std::clamp(x + a, 0, w - 1)) *
                           rect.at(y2, std::clamp(qx + a, 0, w - 1));
              }
              double n = (2.0 * r + 1) * (2.0 * r + 1);
              ncc = (cross - n * sr.mean[i] * st.mean[q]) / (sr.norm[i] * st.norm[q]);
            }
            double ddx = qx - x - bx, ddy = qy - y - by;
            c = (1.0 - ncc) + opt.smoothness * (ddx * ddx + ddy * ddy);
            if (c < best) {
              best = c;
              bu = u;
              bv = v;
            }
          }
        if (best >= 1e300) {
          nx[i] = bx;
          ny[i] = by;
          continue;
        }
        auto parabola = [](double cm, double c0, double cp) {
          double den = cm - 2 * c0 + cp;
          if (cm >= 1e300 || cp >= 1e300 || den <= 1e-12) return 0.0;
          return std::clamp(0.5 * (cm - cp) / den, -0.5, 0.5);
        };
        double ox = 0.0, oy = 0.0;
        if (bu > -R && bu < R)
          ox = parabola(cost[(bv + R) * side + bu + R - 1], best, cost[(bv + R) * side + bu + R + 1]);
        if (bv > -R && bv < R)
          oy = parabola(cost[(bv + R - 1) * side + bu + R], best, cost[(bv + R + 1) * side + bu + R]);
        nx[i] = cx + bu + ox - x;
        ny[i] = cy + bv + oy - y;
      }
    median_filter(nx, h, w);
    median_filter(ny, h, w);
    fx.swap(nx);
    fy.swap(ny);
  }
}

}  // namespace

DenseMatch dense_match(const Image& ref, const Image& rect, const DenseMatchOptions& opt) {
  check_pair(ref, rect);
  require(opt.patch_radius >= 1 && opt.search_radius >= 1 && opt.iterations >= 1,
          ErrorCode::InvalidArgument, "invalid dense match options");
  DenseMatch out;
  out.matches = identity_coords(ref.height, ref.width);
  std::vector<Image> pa{to_gray(ref)}, pb{to_gray(rect)};
  if (variance(pa[0]) < 1e-8 || variance(pb[0]) < 1e-8) {
    out.degenerate = true;
    return out;
  }
  while (std::min(pa.back().height, pa.back().width) / 2 >= opt.min_level_size) {
    pa.push_back(reduce(pa.back()));
    pb.push_back(reduce(pb.back()));
  }
  std::vector<double> fx, fy;
  for (int l = static_cast<int>(pa.size()) - 1; l >= 0; --l) {
    const Image& a = pa[l];
    if (fx.empty()) {
      fx.assign(a.pixels(), 0.0);
      fy.assign(a.pixels(), 0.0);
    } else {
      const Image& prev = pa[l + 1];
      Image f(prev.height, prev.width, 2);
      for (std::size_t i = 0; i < prev.pixels(); ++i) {
        f.data[2 * i] = fx[i];
        f.data[2 * i + 1] = fy[i];
      }
      Image up = resize_bilinear(f, a.height, a.width);
      double sx = static_cast<double>(a.width) / prev.width;
      double sy = static_cast<double>(a.height) / prev.height;
      fx.resize(a.pixels());
      fy.resize(a.pixels());
      for (std::size_t i = 0; i < a.pixels(); ++i) {
        fx[i] = up.data[2 * i] * sx;
        fy[i] = up.data[2 * i + 1] * sy;
      }
    }
    match_level(a, pb[l], fx, fy, opt);
  }
  for (int y = 0; y < ref.height; ++y)
    for (int x = 0; x < ref.width; ++x) {
      std::size_t i = out.matches.index(y, x);
      out.matches.x[i] = x + fx[i];
      out.matches.y[i] = y + fy[i];
    }
  return out;
}

FlowMatch matches_from_flows(const WarpField& gt, const WarpField& pred) {
  validate(gt);
  validate(pred);
  require(gt.height == pred.height && gt.width == pred.width, ErrorCode::ShapeMismatch,
          "flows differ in shape");
  CoordMap pc = flow_to_coords(pred);
  PointMap h = [&](Point p) { return eval_coords(pc, p.x, p.y); };
  FlowMatch out{identity_coords(gt.height, gt.width), Mask(gt.height, gt.width)};
  InversionOptions opt;
  for (int i = 0; i < gt.height; ++i)
    for (int j = 0; j < gt.width; ++j) {
      std::size_t k = gt.index(i, j);
      Point t{j + gt.dx[k], i + gt.dy[k]};
      try {
        auto p = invert_points(h, std::span<const Point>(&t, 1), opt);
        out.matches.x[k] = p[0].x;
        out.matches.y[k] = p[0].y;
        out.valid.at(i, j) = 1;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NotConverged) throw;
      }
    }
  return out;
}

EditCounts edit_distance(const std::u32string& a, const std::u32string& b) {
  const std::size_t n = a.size(), m = b.size();
  // (cost, substitutions) per cell, minimizing cost then maximizing substitutions.
  std::vector<int> cost((n + 1) * (m + 1)), subs((n + 1) * (m + 1), 0);
  auto at = [m](std::size_t i, std::size_t j) { return i * (m + 1) + j; };
  for (std::size_t i = 0; i <= n; ++i) cost[at(i, 0)] = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) cost[at(0, j)] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      bool same = a[i - 1] == b[j - 1];
      int c = cost[at(i - 1, j - 1)] + (same ? 0 : 1);
      int s = subs[at(i - 1, j - 1)] + (same ? 0 : 1);
      auto take = [&](int c2, int s2) {
        if (c2 < c || (c2 == c && s2 > s)) {
          c = c2;
          s = s2;
        }
      };
      take(cost[at(i - 1, j)] + 1, subs[at(i - 1, j)]);
      take(cost[at(i, j - 1)] + 1, subs[at(i, j - 1)]);
      cost[at(i, j)] = c;
      subs[at(i, j)] = s;
    }
  EditCounts r;
  r.ed = cost[at(n, m)];
  r.substitutions = subs[at(n, m)];
  int gap = r.ed - r.substitutions;
  int diff = static_cast<int>(n) - static_cast<int>(m);
  r.deletions = (gap + diff) / 2;
  r.insertions = (gap - diff) / 2;
  return r;
}

std::u32string utf8_to_u32(const std::string& s) {
  icu::UnicodeString us = icu::UnicodeString::fromUTF8(s);
  std::u32string out;
  out.reserve(us.length());
  for (int32_t i = 0; i < us.length(); i = us.moveIndex32(i, 1)) out.push_back(us.char32At(i));
  return out;
}

EditCounts edit_distance(const std::string& ref, const std::string& hyp) {
  return edit_distance(utf8_to_u32(ref), utf8_to_u32(hyp));
}

double cer(const std::string& ref, const std::string& hyp) {
  auto r = utf8_to_u32(ref);
  require(!r.empty(), ErrorCode::InvalidArgument, "CER needs a non-empty reference");
  auto e = edit_distance(r, utf8_to_u32(hyp));
  return static_cast<double>(e.deletions + e.insertions + e.substitutions) /
         static_cast<double>(r.size());
}

std::string normalize_text(const std::string& s) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  require(U_SUCCESS(status), ErrorCode::Config, "ICU NFC normalizer unavailable");
  icu::UnicodeString us = nfc->normalize(icu::UnicodeString::fromUTF8(s), status);
  require(U_SUCCESS(status), ErrorCode::InvalidArgument, "text normalization failed");
  icu::UnicodeString out;
  bool pending = false;
  for (int32_t i = 0; i < us.length(); i = us.moveIndex32(i, 1)) {
    UChar32 c = us.char32At(i);
    if (u_isUWhiteSpace(c)) {
      pending = out.length() > 0;
      continue;
    }
    if (pending) out.append(static_cast<UChar>(' '));
    pending = false;
    out.append(c);
  }
  std::string r;
  out.toUTF8String(r);
  return r;
}

OcrResult ocr_adapter(const std::filesystem::path& image_path, const std::string& engine) {
  OcrResult r;
  std::string bin = engine;
  if (bin.empty()) {
    const char* env = std::getenv("DOCGEO_OCR_BIN");
    if (env) bin = env;
  }
  if (bin.empty()) {
    r.reason = "OCR engine not configured (set DOCGEO_OCR_BIN)";
    return r;
  }
  if (access(bin.c_str(), X_OK) != 0) {
    r.reason = "OCR engine not executable: " + bin;
    return r;
  }
  if (!std::filesystem::exists(image_path)) {
    r.reason = "image not found: " + image_path.string();
    return r;
  }
  int fds[2];
  if (pipe(fds) != 0) {
    r.reason = "pipe failed";
    return r;
  }
  pid_t pid = fork();
  if (pid < 0) {
    close(fds[0]);
    close(fds[1]);
    r.reason = "fork failed";
    return r;
  }
  if (pid == 0) {
    dup2(fds[1], STDOUT_FILENO);
    close(fds[0]);
    close(fds[1]);
    if (FILE* devnull = std::fopen("/dev/null", "w")) dup2(fileno(devnull), STDERR_FILENO);
    std::string img = image_path.string();
    execl(bin.c_str(), bin.c_str(), img.c_str(), "stdout", static_cast<char*>(nullptr));
    _exit(127);
  }
  close(fds[1]);
  std::string text;
  char buf[4096];
  ssize_t n;
  while ((n = read(fds[0], buf, sizeof buf)) > 0) text.append(buf, static_cast<std::size_t>(n));
  close(fds[0]);
  int status = 0;
  waitpid(pid, &status, 0);
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    r.reason = "OCR engine failed with status " + std::to_string(WEXITSTATUS(status));
    return r;
  }
  r.text = normalize_text(text);
  return r;
}

}  // namespace docgeo::metrics
