#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>

#include "docgeo/geometry.hpp"

namespace docgeo::metrics {

constexpr double kEvalArea = 598400.0;
/// Per-level MS-SSIM weights, finest first.
constexpr std::array<double, 5> kMsSsimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

/// Scales both sides by sqrt(area / (H*W)) (bilinear).
Image resize_to_area(const Image& img, double area = kEvalArea);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Mean SSIM over all fully-contained Gaussian windows. Colour inputs are
/// converted to luminance first.
double ssim(const Image& a, const Image& b, const SsimOptions& opt = {});

struct MsSsimResult {
  double value = 0.0;
  int levels = 0;
  std::array<double, 5> per_level{};
};

/// Weighted combination of per-level SSIM over a 5-level dyadic pyramid
/// (Burt-Adelson reduce). Levels that no longer fit the window are dropped
/// and the remaining weights renormalized; `levels` records how many were used.
MsSsimResult ms_ssim_detailed(const Image& a, const Image& b, const SsimOptions& opt = {});
double ms_ssim(const Image& a, const Image& b, const SsimOptions& opt = {});

/// Mean of |match(p) - p| over valid pixels (all pixels when `valid` is empty).
double local_distortion(const CoordMap& matches, const Mask& valid = {});

struct DenseMatchOptions {
  int patch_radius = 3;
  int search_radius = 2;
  double smoothness = 0.05;
  int iterations = 2;
  int min_level_size = 24;
};

struct DenseMatch {
  CoordMap matches;    // ref pixel -> position in the rectified image
  bool degenerate = false;
};

/// Coarse-to-fine NCC matcher with a smoothness prior.
DenseMatch dense_match(const Image& ref, const Image& rect, const DenseMatchOptions& opt = {});

/// LD between a rectified image and its reference given the ground-truth and
/// predicted backward flows (both on the rectified grid, same source image).
/// Ref pixel q shows source point q + f_gt(q); its match in the rectified
/// image is the p with p + f_pred(p) = q + f_gt(q).
struct FlowMatch {
  CoordMap matches;
  Mask valid;
};
FlowMatch matches_from_flows(const WarpField& gt, const WarpField& pred);

struct EditCounts {
  int ed = 0;
  int deletions = 0;
  int insertions = 0;
  int substitutions = 0;
  bool operator==(const EditCounts&) const = default;
};

/// Unit-cost Levenshtein distance over Unicode code points with operation
/// counts. Among optimal alignments the one with the most substitutions is
/// reported, which makes the counts symmetric under swapping arguments.
EditCounts edit_distance(const std::u32string& ref, const std::u32string& hyp);
EditCounts edit_distance(const std::string& ref_utf8, const std::string& hyp_utf8);

/// (d + i + s) / N_c with N_c the number of reference code points.
double cer(const std::string& ref_utf8, const std::string& hyp_utf8);

std::u32string utf8_to_u32(const std::string& s);
/// NFC normalization followed by whitespace collapsing and trimming.
std::string normalize_text(const std::string& utf8);

struct OcrResult {
  std::optional<std::string> text;
  std::string reason;  // set when text is empty
};

/// Runs `<engine> <image> stdout` (the tesseract command-line convention),
/// with the engine taken from `engine` or DOCGEO_OCR_BIN.
OcrResult ocr_adapter(const std::filesystem::path& image_path, const std::string& engine = "");

}  // namespace docgeo::metrics
