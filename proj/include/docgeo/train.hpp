#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "docgeo/docgeonet.hpp"
#include "docgeo/synthgen.hpp"
#include "json.hpp"

namespace docgeo::train {

using nn::Tensor;

/// Jitter bounds: hue shift in turns, saturation and value as relative scale.
struct AugmentOptions {
  double hue = 0.03;
  double saturation = 0.2;
  double value = 0.2;
};

/// Colour jitter in HSV space. Zero bounds return the input unchanged.
Image augment_image(const Image& img, std::uint64_t seed, const AugmentOptions& opt = {});
/// Jitters the distorted image only; all ground truth is copied untouched.
synthgen::DistortedSample augment(const synthgen::DistortedSample& sample, std::uint64_t seed,
                                  const AugmentOptions& opt = {});

/// Float copy of one sample in network layout. Planar fields are CHW.
struct TrainSample {
  int height = 0;
  int width = 0;
  Grid<float> image;            // distorted, H×W×3
  std::vector<float> flow;      // [2,H,W]
  std::vector<float> coords;    // [3,H,W], empty if unavailable
  std::vector<float> mask;      // [H,W] page mask
  std::vector<float> text;      // [H,W] textline mask, empty if unavailable
  Grid<float> flat;             // reference page, may be empty

  bool has_coords() const { return !coords.empty(); }
  bool has_text() const { return !text.empty(); }
  Image distorted() const;
  WarpField gt_flow() const;
};

/// `text_mask` may be empty when the sample has no textline annotation.
TrainSample make_train_sample(const synthgen::DistortedSample& s, const Mask& text_mask);

/// Generates, annotates (textlines through the GT flow) and converts n
/// samples. Sample i uses derive_seed(seed, i).
std::vector<TrainSample> synthetic_dataset(std::uint64_t seed, int n, int height, int width,
                                           const synthgen::DeformationMix& mix = {});

/// Reads every sample directory under `root` (sorted by name). The textline
/// target is textmask.png when present.
std::vector<TrainSample> load_dataset(const std::filesystem::path& root);

struct TrainConfig {
  model::ModelConfig model = model::ModelConfig::toy();
  int batch = 2;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  int steps = 2000;
  int epochs = 0;  // when > 0 overrides steps
  int lr_decay_step = 0;
  double lr_decay_factor = 0.1;
  double grad_clip = 0.0;
  std::uint64_t seed = 0;
  bool supervise_3d = true;
  bool supervise_text = true;
  bool use_preprocessing = true;
  bool augment = true;
  AugmentOptions jitter;
  int log_every = 10;
  int val_every = 0;
  int checkpoint_every = 0;
  std::string out_dir;  // empty: no files are written

  int dataset_size = 500;
  int val_size = 32;
  std::uint64_t data_seed = 1;
  std::string train_dir;  // when set, load instead of generating
  std::string val_dir;

  void validate() const;
  int total_steps(std::size_t dataset_size) const;
  nlohmann::json to_json() const;
};

/// Flat `key = value` file; `#` starts a comment, `[section]` prefixes the
/// following keys with `section.`. Model keys use the `model.` prefix.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
/// Applies one key; throws Config on an unknown key or malformed value.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);

struct StepLog {
  int step = 0;
  double total = 0.0;
  double l3d = 0.0;
  double ltext = 0.0;
  double lflow = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct ValMetrics {
  int step = 0;
  double loss_flow = 0.0;
  double ld = 0.0;           // GT-matched local distortion of the prediction
  double ld_baseline = 0.0;  // same for the unrectified input
  double ms_ssim = 0.0;
  double ms_ssim_baseline = 0.0;
  int ms_ssim_levels = 0;
};

struct TrainLog {
  std::vector<StepLog> steps;
  std::vector<ValMetrics> validation;
  double wall_seconds = 0.0;
};

/// Model input [N,3,H,W]; with `use_mask` the page mask zeroes the background.
Tensor batch_images(const std::vector<const TrainSample*>& batch, bool use_mask,
                    const std::vector<Image>* jittered = nullptr);

/// Prediction for one image (inference mode).
WarpField predict_flow(const model::DocGeoNet& net, const Image& image, const Mask* mask = nullptr);

ValMetrics evaluate(const model::DocGeoNet& net, const std::vector<TrainSample>& val,
                    bool use_preprocessing);

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  std::function<void(const ValMetrics&)> on_validate;
};

/// Optimizes `net` on `data`. Batches and jitter depend only on (seed, step),
/// so a run resumed from a checkpoint continues identically. `resume_from`
/// restores parameters, optimizer moments and the step counter.
TrainLog train_loop(model::DocGeoNet& net, const std::vector<TrainSample>& data,
                    const std::vector<TrainSample>& val, const TrainConfig& cfg,
                    const std::optional<std::filesystem::path>& resume_from = std::nullopt,
                    const TrainHooks& hooks = {});

/// Sample indices of the batch used at `step`.
std::vector<std::size_t> batch_indices(std::uint64_t seed, int step, int batch, std::size_t n);

void save_model(const std::filesystem::path& path, const model::DocGeoNet& net,
                nn::AdamW* optimizer = nullptr, int step = 0);
model::DocGeoNet load_model(const std::filesystem::path& path);

struct AblationSpec {
  std::string name;
  bool use_se = true;
  bool use_te = true;
  bool supervise_3d = true;
  bool supervise_text = true;
  model::Upsample upsample = model::Upsample::Learnable;
  bool use_preprocessing = true;
};

/// The four rows of the representation ablation (3D x text supervision).
std::vector<AblationSpec> representation_matrix();

struct AblationRow {
  AblationSpec spec;
  std::uint64_t seed = 0;
  ValMetrics metrics;
  double initial_ld = 0.0;
  double initial_loss_flow = 0.0;
  double seconds = 0.0;
};

/// Trains each spec once per seed from the same base config and data.
std::vector<AblationRow> run_ablation_suite(const std::vector<AblationSpec>& matrix,
                                            const std::vector<std::uint64_t>& seeds,
                                            const TrainConfig& base,
                                            const std::vector<TrainSample>& data,
                                            const std::vector<TrainSample>& val,
                                            const std::function<void(const AblationRow&)>& on_row = {});

struct AblationSummary {
  AblationSpec spec;
  int runs = 0;
  double ms_ssim = 0.0;
  double ld = 0.0;
  double ld_std = 0.0;
};
std::vector<AblationSummary> summarize(const std::vector<AblationRow>& rows);

/// Markdown table: 3D | Text | MS-SSIM | LD, one line per spec (means over seeds).
std::string ablation_table(const std::vector<AblationSummary>& summary);
nlohmann::json ablation_json(const std::vector<AblationRow>& rows);

}  // namespace docgeo::train
