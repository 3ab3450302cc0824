#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "docgeo/annotate.hpp"
#include "docgeo/metrics.hpp"
#include "docgeo/segmenter.hpp"
#include "docgeo/synthgen.hpp"
#include "docgeo/train.hpp"
#include "json.hpp"

namespace docgeo::cli {

namespace fs = std::filesystem;

std::string tool_version();

/// Receives progress lines from long-running commands (silent by default).
void set_logger(std::function<void(const std::string&)> fn);

/// SHA-256 (hex) of the canonical JSON dump.
std::string config_hash(const nlohmann::json& config);

/// UTC ISO-8601. With SOURCE_DATE_EPOCH set, that instant is used instead of
/// the clock so manifests of repeated runs are byte-identical.
std::string timestamp();

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::string started;
  std::string finished;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
};

/// Atomic write of `<dir>/<name>`.
void write_manifest(const fs::path& dir, const RunManifest& m,
                    const std::string& name = "manifest.json");

/// Comma separated ablation switches: no-se, no-te, no-3d, no-text,
/// bilinear, no-preprocess, no-skips.
void apply_ablate_flags(train::TrainConfig& cfg, const std::string& flags);

struct GenerateOptions {
  fs::path out;
  int n = 10;
  int height = 128;
  int width = 128;
  std::uint64_t seed = 0;
  synthgen::DeformationMix mix;
};
RunManifest cmd_generate(const GenerateOptions& opt);

struct AnnotateCmdOptions {
  fs::path data;
  annotate::AnnotateOptions detect;
  double tol = 3.0;
};
/// Per sample: generator lines move to lines_gen.jsonl (once), detected lines
/// go to lines.jsonl and their raster to textmask.png.
RunManifest cmd_annotate(const AnnotateCmdOptions& opt);

struct TrainSegOptions {
  fs::path data;      // sample directories; generated when empty
  fs::path val;
  fs::path out;
  int n = 200;
  int val_n = 16;
  int size = 128;
  segmenter::SegmenterConfig model;
  segmenter::SegTrainConfig train;
};
RunManifest cmd_train_seg(const TrainSegOptions& opt);

struct TrainCmdOptions {
  train::TrainConfig cfg;
  std::optional<fs::path> resume;
};
RunManifest cmd_train(const TrainCmdOptions& opt);

struct RectifyOptions {
  fs::path input;  // image, directory of images, or directory of samples
  fs::path model;
  fs::path seg;
  fs::path out;
  bool save_flow = false;
  bool preprocess = true;
  bool gt_mask = false;  // use mask.png of sample directories instead of the segmenter
  std::optional<double> tau;
};
RunManifest cmd_rectify(const RectifyOptions& opt);

struct EvalOptions {
  fs::path pred;
  fs::path gt;
  fs::path out;  // report.json
  bool csv = false;
  std::string ocr_engine;
  double area = metrics::kEvalArea;
};
/// {images: [{name, ms_ssim, ld, ed, cer, ...}], mean, config}
nlohmann::json cmd_eval(const EvalOptions& opt);

struct AblateOptions {
  train::TrainConfig base;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string matrix = "representation";  // or "components"
  fs::path out;
};
std::vector<train::AblationSpec> ablation_matrix(const std::string& name);
RunManifest cmd_ablate(const AblateOptions& opt);

struct ReportOptions {
  fs::path report;
  std::optional<fs::path> compare;
  fs::path out;
};
/// Writes summary.md and one SVG chart per metric; returns the file names.
std::vector<std::string> cmd_report(const ReportOptions& opt);

/// Bar chart; identical inputs give identical bytes.
std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<double>& values);

}  // namespace docgeo::cli
