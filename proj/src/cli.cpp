#include "docgeo/cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <map>
#include <numeric>
#include <sstream>

#include "docgeo/error.hpp"
#include "docgeo/formats.hpp"
#include "docgeo/metrics.hpp"

namespace docgeo::cli {

using nlohmann::json;

namespace {

std::function<void(const std::string&)>& logger() {
  static std::function<void(const std::string&)> fn;
  return fn;
}

void log(const std::string& msg) {
  if (logger()) logger()(msg);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), ErrorCode::Io,
          "cannot create directory " + dir.string() + (ec ? ": " + ec.message() : ""));
}

std::vector<fs::path> sample_dirs(const fs::path& root, const char* required = "meta.json") {
  std::vector<fs::path> dirs;
  if (!fs::is_directory(root)) return dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / required)) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

std::vector<fs::path> png_files(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

std::string sample_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05d", i);
  return buf;
}

json mix_json(const synthgen::DeformationMix& m) {
  return {{"curl", m.curl}, {"fold", m.fold}, {"flat", m.flat}, {"crumple", m.crumple}};
}

std::pair<std::vector<train::TrainSample>, std::vector<train::TrainSample>> training_data(
    const train::TrainConfig& cfg) {
  const int h = cfg.model.height, w = cfg.model.width;
  std::vector<train::TrainSample> data, val;
  if (!cfg.train_dir.empty()) {
    data = train::load_dataset(cfg.train_dir);
  } else {
    log("generating " + std::to_string(cfg.dataset_size) + " training samples");
    data = train::synthetic_dataset(cfg.data_seed, cfg.dataset_size, h, w);
  }
  if (!cfg.val_dir.empty()) {
    val = train::load_dataset(cfg.val_dir);
  } else if (cfg.val_size > 0) {
    val = train::synthetic_dataset(synthgen::derive_seed(cfg.data_seed, 0x7a11da7e), cfg.val_size, h, w);
  }
  return {std::move(data), std::move(val)};
}

json metrics_json(const train::ValMetrics& m) {
  return {{"step", m.step},
          {"loss_flow", m.loss_flow},
          {"ld", m.ld},
          {"ld_baseline", m.ld_baseline},
          {"ms_ssim", m.ms_ssim},
          {"ms_ssim_baseline", m.ms_ssim_baseline}};
}

WarpField upscale_flow(const WarpField& f, int height, int width) {
  if (f.height == height && f.width == width) return f;
  Image planes(f.height, f.width, 2);
  for (std::size_t i = 0; i < f.dx.size(); ++i) {
    planes.data[2 * i] = f.dx[i];
    planes.data[2 * i + 1] = f.dy[i];
  }
  const Image big = resize_bilinear(planes, height, width);
  const double sx = static_cast<double>(width) / f.width, sy = static_cast<double>(height) / f.height;
  WarpField out{height, width, std::vector<float>(big.pixels()), std::vector<float>(big.pixels())};
  for (std::size_t i = 0; i < big.pixels(); ++i) {
    out.dx[i] = static_cast<float>(big.data[2 * i] * sx);
    out.dy[i] = static_cast<float>(big.data[2 * i + 1] * sy);
  }
  return out;
}

Image as_rgb(const Image& img) {
  if (img.channels == 3) return img;
  Image out(img.height, img.width, 3);
  for (std::size_t i = 0; i < img.pixels(); ++i)
    for (int c = 0; c < 3; ++c) out.data[i * 3 + c] = img.data[i];
  return out;
}

}  // namespace

void set_logger(std::function<void(const std::string&)> fn) { logger() = std::move(fn); }

std::string tool_version() { return DOCGEO_VERSION; }

std::string config_hash(const json& config) {
  const std::string s = config.dump();
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  require(EVP_Digest(s.data(), s.size(), md, &len, EVP_sha256(), nullptr) == 1, ErrorCode::Io,
          "sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string timestamp() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  if (const char* sde = std::getenv("SOURCE_DATE_EPOCH"); sde && *sde) {
    char* end = nullptr;
    const long long v = std::strtoll(sde, &end, 10);
    require(end && *end == '\0' && v >= 0, ErrorCode::Config, "SOURCE_DATE_EPOCH must be an integer");
    t = static_cast<std::time_t>(v);
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json RunManifest::to_json() const {
  return {{"command", command},
          {"config", config},
          {"config_hash", config_hash(config)},
          {"seed", seed},
          {"tool_version", tool_version()},
          {"inputs", inputs},
          {"outputs", outputs},
          {"started", started},
          {"finished", finished},
          {"extra", extra}};
}

void write_manifest(const fs::path& dir, const RunManifest& m, const std::string& name) {
  ensure_dir(dir);
  formats::write_file_atomic(dir / name, m.to_json().dump(2) + "\n");
}

void apply_ablate_flags(train::TrainConfig& cfg, const std::string& flags) {
  std::stringstream ss(flags);
  std::string f;
  while (std::getline(ss, f, ',')) {
    f.erase(0, f.find_first_not_of(" \t"));
    f.erase(f.find_last_not_of(" \t") + 1);
    if (f.empty()) continue;
    if (f == "no-se") cfg.model.use_se = false;
    else if (f == "no-te") cfg.model.use_te = false;
    else if (f == "no-3d") cfg.supervise_3d = false;
    else if (f == "no-text") cfg.supervise_text = false;
    else if (f == "bilinear") cfg.model.upsample = model::Upsample::Bilinear;
    else if (f == "no-preprocess") cfg.use_preprocessing = false;
    else if (f == "no-skips") cfg.model.text_skips = false;
    else fail(ErrorCode::Config, "unknown ablation flag '" + f + "'");
  }
}

// ---------------------------------------------------------------------------

RunManifest cmd_generate(const GenerateOptions& opt) {
  require(!opt.out.empty(), ErrorCode::InvalidArgument, "--out is required");
  require(opt.n >= 0, ErrorCode::InvalidArgument, "n must be >= 0");
  require(opt.height >= 64 && opt.width >= 64, ErrorCode::InvalidArgument, "size must be >= 64");
  const auto& m = opt.mix;
  require(m.curl >= 0 && m.fold >= 0 && m.flat >= 0 && m.crumple >= 0 &&
              m.curl + m.fold + m.flat + m.crumple > 0,
          ErrorCode::InvalidArgument, "mix weights must be non-negative with a positive sum");
  RunManifest man;
  man.command = "generate";
  man.started = timestamp();
  man.seed = opt.seed;
  man.config = {{"n", opt.n}, {"height", opt.height}, {"width", opt.width}, {"seed", opt.seed},
                {"mix", mix_json(m)}};
  ensure_dir(opt.out);
  std::map<std::string, int> kinds{{"curl", 0}, {"fold", 0}, {"flat", 0}, {"crumple", 0}};
  double worst = 0.0;
  for (int i = 0; i < opt.n; ++i) {
    const auto s = synthgen::generate_sample(synthgen::derive_seed(opt.seed, i), opt.height, opt.width, m);
    const std::string name = sample_name(i);
    synthgen::write_sample(opt.out / name, s);
    ++kinds[synthgen::kind_name(s.params.kind)];
    worst = std::max(worst, s.inversion_residual);
    man.outputs.push_back(name);
    if ((i + 1) % 50 == 0) log("generated " + std::to_string(i + 1) + "/" + std::to_string(opt.n));
  }
  man.extra = {{"kinds", kinds}, {"max_inversion_residual", worst}, {"layout", "img.png flat.png mask.png flow.dgwf coords.dg3d lines.jsonl meta.json"}};
  man.finished = timestamp();
  write_manifest(opt.out, man);
  return man;
}

RunManifest cmd_annotate(const AnnotateCmdOptions& opt) {
  const auto dirs = sample_dirs(opt.data);
  require(fs::is_directory(opt.data), ErrorCode::Io, "not a directory: " + opt.data.string());
  RunManifest man;
  man.command = "annotate";
  man.started = timestamp();
  const auto& d = opt.detect;
  man.config = {{"window", d.window}, {"offset", d.offset}, {"kernel", d.kernel},
                {"min_aspect", d.min_aspect}, {"min_height", d.min_height},
                {"max_height_frac", d.max_height_frac}, {"min_width_frac", d.min_width_frac},
                {"tol", opt.tol}};
  man.inputs.push_back(opt.data.string());
  int matched = 0, total = 0, lines = 0;
  std::vector<double> medians;
  json per = json::array();
  for (const fs::path& dir : dirs) {
    const Image flat = formats::read_png(dir / "flat.png");
    const WarpField flow = formats::read_warp_field(dir / "flow.dgwf");
    const Image img = formats::read_png(dir / "img.png");
    const TextlineSet det = annotate::annotate_distorted(flat, flow, opt.detect);
    if (!fs::exists(dir / "lines_gen.jsonl") && fs::exists(dir / "lines.jsonl"))
      fs::rename(dir / "lines.jsonl", dir / "lines_gen.jsonl");
    formats::write_lines(dir / "lines.jsonl", det);
    formats::write_mask_png(dir / "textmask.png", annotate::rasterize_lines(det, img.height, img.width));
    lines += static_cast<int>(det.size());
    json row = {{"name", dir.filename().string()}, {"lines", det.size()}};
    if (fs::exists(dir / "lines_gen.jsonl")) {
      const auto sc = annotate::score_annotation(det, formats::read_lines(dir / "lines_gen.jsonl"), opt.tol);
      matched += sc.matched;
      total += sc.total;
      if (sc.total > 0) medians.push_back(sc.median_error);
      row["recall"] = sc.recall;
      row["median_error"] = sc.median_error;
    }
    per.push_back(row);
    man.outputs.push_back(dir.filename().string() + "/lines.jsonl");
  }
  std::sort(medians.begin(), medians.end());
  man.extra = {{"samples", dirs.size()}, {"lines", lines}, {"per_sample", per}};
  if (total > 0) {
    man.extra["recall"] = static_cast<double>(matched) / total;
    man.extra["max_median_error"] = medians.back();
    man.extra["median_error"] = medians[medians.size() / 2];
  }
  man.finished = timestamp();
  write_manifest(opt.data, man, "manifest.annotate.json");
  return man;
}

RunManifest cmd_train_seg(const TrainSegOptions& opt) {
  require(!opt.out.empty(), ErrorCode::InvalidArgument, "--out is required");
  opt.model.validate();
  auto load = [&](const fs::path& root, int n, std::uint64_t stream) {
    std::vector<segmenter::SegSample> v;
    if (!root.empty()) {
      const auto dirs = sample_dirs(root, "mask.png");
      require(!dirs.empty(), ErrorCode::MissingData, "no samples with mask.png under " + root.string());
      for (const fs::path& d : dirs)
        v.push_back({formats::read_png(d / "img.png"), formats::read_mask_png(d / "mask.png")});
    } else {
      for (int i = 0; i < n; ++i) {
        const auto s = synthgen::generate_sample(
            synthgen::derive_seed(synthgen::derive_seed(opt.train.seed, stream), i), opt.size, opt.size);
        v.push_back({s.distorted, s.gt_mask});
      }
    }
    return v;
  };
  RunManifest man;
  man.command = "train-seg";
  man.started = timestamp();
  man.seed = opt.train.seed;
  man.config = {{"model", opt.model.to_json()},
                {"steps", opt.train.steps}, {"batch", opt.train.batch}, {"lr", opt.train.lr},
                {"decay_at", opt.train.decay_at}, {"seed", opt.train.seed},
                {"data", opt.data.string()}, {"val", opt.val.string()},
                {"n", opt.n}, {"val_n", opt.val_n}, {"size", opt.size}};
  const auto data = load(opt.data, opt.n, 1);
  const auto val = load(opt.val, opt.val_n, 2);
  require(!data.empty(), ErrorCode::MissingData, "segmenter training set is empty");
  if (!opt.data.empty()) man.inputs.push_back(opt.data.string());
  if (!opt.val.empty()) man.inputs.push_back(opt.val.string());

  segmenter::Segmenter seg(opt.model, opt.train.seed);
  const auto res = segmenter::train_segmenter(seg, data, opt.train, [](int step, double loss) {
    log("seg step " + std::to_string(step) + " loss " + fmt("%.5f", loss));
  });
  double mean_iou = 0.0;
  for (const auto& s : val) {
    const auto fg = segmenter::remove_background(s.image, segmenter::segment_confidence(s.image, seg),
                                                 seg.config().tau);
    mean_iou += segmenter::iou(fg.mask, s.mask);
  }
  if (!val.empty()) mean_iou /= val.size();
  ensure_dir(opt.out);
  segmenter::save_segmenter(opt.out / "segmenter.dgck", seg);
  man.outputs.push_back("segmenter.dgck");
  man.extra = {{"val_iou", val.empty() ? json(nullptr) : json(mean_iou)},
               {"final_loss", res.losses.empty() ? json(nullptr) : json(res.losses.back().second)}};
  man.finished = timestamp();
  write_manifest(opt.out, man);
  return man;
}

RunManifest cmd_train(const TrainCmdOptions& opt) {
  const train::TrainConfig& cfg = opt.cfg;
  cfg.validate();
  require(!cfg.out_dir.empty(), ErrorCode::InvalidArgument, "--out is required");
  if (opt.resume) require(fs::exists(*opt.resume), ErrorCode::Io, "checkpoint not found: " + opt.resume->string());
  ensure_dir(cfg.out_dir);
  RunManifest man;
  man.command = "train";
  man.started = timestamp();
  man.seed = cfg.seed;
  man.config = cfg.to_json();
  if (!cfg.train_dir.empty()) man.inputs.push_back(cfg.train_dir);
  if (!cfg.val_dir.empty()) man.inputs.push_back(cfg.val_dir);
  if (opt.resume) man.inputs.push_back(opt.resume->string());

  const auto [data, val] = training_data(cfg);
  model::DocGeoNet net(cfg.model, cfg.seed);
  train::TrainHooks hooks;
  hooks.on_step = [](const train::StepLog& s) {
    log("step " + std::to_string(s.step) + " total " + fmt("%.5f", s.total) + " flow " + fmt("%.5f", s.lflow) +
        " 3d " + fmt("%.5f", s.l3d) + " text " + fmt("%.5f", s.ltext) + " lr " + fmt("%.2e", s.lr));
  };
  hooks.on_validate = [](const train::ValMetrics& m) {
    log("val step " + std::to_string(m.step) + " loss_flow " + fmt("%.5f", m.loss_flow) + " ld " +
        fmt("%.4f", m.ld) + " (input " + fmt("%.4f", m.ld_baseline) + ") ms-ssim " + fmt("%.4f", m.ms_ssim));
  };
  const train::TrainLog tl = train::train_loop(net, data, val, cfg, opt.resume, hooks);
  man.outputs = {"model.dgck", "train_log.csv", "config.json", "summary.json"};
  if (!val.empty()) man.outputs.push_back("val_log.csv");
  man.extra = {{"train_samples", data.size()}, {"val_samples", val.size()}, {"wall_seconds", tl.wall_seconds},
               {"steps", cfg.total_steps(data.size())}};
  if (!tl.validation.empty()) {
    man.extra["initial"] = metrics_json(tl.validation.front());
    man.extra["final"] = metrics_json(tl.validation.back());
  }
  man.finished = timestamp();
  write_manifest(cfg.out_dir, man);
  return man;
}

RunManifest cmd_rectify(const RectifyOptions& opt) {
  require(!opt.out.empty(), ErrorCode::InvalidArgument, "--out is required");
  require(fs::exists(opt.model), ErrorCode::Io, "checkpoint not found: " + opt.model.string());
  require(fs::exists(opt.input), ErrorCode::Io, "input not found: " + opt.input.string());
  const bool use_seg = opt.preprocess && !opt.gt_mask;
  require(!use_seg || !opt.seg.empty(), ErrorCode::MissingData,
          "preprocessing needs --seg (or --gt-mask for sample directories, or --no-preprocess)");

  struct Item {
    std::string name;
    fs::path image;
    fs::path mask;
  };
  std::vector<Item> items;
  if (fs::is_regular_file(opt.input)) {
    items.push_back({opt.input.stem().string(), opt.input, opt.input.parent_path() / "mask.png"});
  } else {
    for (const fs::path& d : sample_dirs(opt.input, "img.png"))
      items.push_back({d.filename().string(), d / "img.png", d / "mask.png"});
    if (items.empty())
      for (const fs::path& p : png_files(opt.input)) items.push_back({p.stem().string(), p, {}});
  }
  require(!items.empty(), ErrorCode::MissingData, "no images under " + opt.input.string());

  const model::DocGeoNet net = train::load_model(opt.model);
  std::optional<segmenter::Segmenter> seg;
  if (use_seg) seg.emplace(segmenter::load_segmenter(opt.seg));
  const double tau = opt.tau.value_or(seg ? seg->config().tau : 0.5);
  require(tau > 0.0 && tau < 1.0, ErrorCode::InvalidArgument, "tau must lie in (0,1)");
  const int mh = net.config().height, mw = net.config().width;

  RunManifest man;
  man.command = "rectify";
  man.started = timestamp();
  man.config = {{"model", opt.model.string()}, {"seg", opt.seg.string()}, {"preprocess", opt.preprocess},
                {"gt_mask", opt.gt_mask}, {"tau", tau}, {"save_flow", opt.save_flow},
                {"model_config", net.config().to_json()}};
  man.inputs.push_back(opt.input.string());
  ensure_dir(opt.out);
  for (const Item& it : items) {
    const Image full = as_rgb(formats::read_png(it.image));
    const Image small = resize_bilinear(full, mh, mw);
    Mask mask;
    if (opt.preprocess) {
      if (opt.gt_mask) {
        require(!it.mask.empty() && fs::exists(it.mask), ErrorCode::MissingData,
                "--gt-mask needs mask.png next to " + it.image.string());
        mask = resize_nearest(formats::read_mask_png(it.mask), mh, mw);
      } else {
        mask = segmenter::remove_background(small, segmenter::segment_confidence(small, *seg), tau).mask;
      }
    }
    const WarpField f = upscale_flow(train::predict_flow(net, small, opt.preprocess ? &mask : nullptr),
                                     full.height, full.width);
    formats::write_png(opt.out / (it.name + ".png"), apply_flow(full, f));
    man.outputs.push_back(it.name + ".png");
    if (opt.save_flow) {
      formats::write_warp_field(opt.out / (it.name + ".dgwf"), f);
      man.outputs.push_back(it.name + ".dgwf");
    }
    log("rectified " + it.name);
  }
  man.finished = timestamp();
  write_manifest(opt.out, man);
  return man;
}

json cmd_eval(const EvalOptions& opt) {
  require(fs::is_directory(opt.pred), ErrorCode::Io, "prediction directory not found: " + opt.pred.string());
  require(fs::is_directory(opt.gt), ErrorCode::Io, "ground-truth directory not found: " + opt.gt.string());
  struct Pair {
    std::string name;
    fs::path ref;
    fs::path gt_flow;
    fs::path text;
  };
  std::vector<Pair> pairs;
  for (const fs::path& d : sample_dirs(opt.gt, "flat.png"))
    pairs.push_back({d.filename().string(), d / "flat.png", d / "flow.dgwf", d / "text.txt"});
  if (pairs.empty())
    for (const fs::path& p : png_files(opt.gt)) {
      fs::path txt = p;
      pairs.push_back({p.stem().string(), p, {}, txt.replace_extension(".txt")});
    }

  json images = json::array();
  double sum_ms = 0, sum_ld = 0, sum_ed = 0, sum_cer = 0;
  int n_ms = 0, n_ld = 0, n_text = 0;
  for (const Pair& p : pairs) {
    const fs::path pred = opt.pred / (p.name + ".png");
    require(fs::exists(pred), ErrorCode::MissingData, "missing prediction " + pred.string());
    const Image ref = as_rgb(formats::read_png(p.ref));
    Image rect = as_rgb(formats::read_png(pred));
    if (rect.height != ref.height || rect.width != ref.width) rect = resize_bilinear(rect, ref.height, ref.width);
    const Image ref_e = metrics::resize_to_area(ref, opt.area), rect_e = metrics::resize_to_area(rect, opt.area);
    json row = {{"name", p.name}};
    row["ms_ssim"] = metrics::ms_ssim(rect_e, ref_e);
    sum_ms += row["ms_ssim"].get<double>();
    ++n_ms;

    const fs::path pred_flow = opt.pred / (p.name + ".dgwf");
    if (!p.gt_flow.empty() && fs::exists(p.gt_flow) && fs::exists(pred_flow)) {
      const WarpField gt = formats::read_warp_field(p.gt_flow);
      const WarpField pf = formats::read_warp_field(pred_flow);
      require(gt.height == pf.height && gt.width == pf.width, ErrorCode::ShapeMismatch,
              "flow size mismatch for " + p.name);
      const auto fm = metrics::matches_from_flows(gt, pf);
      const double scale = std::sqrt(static_cast<double>(ref_e.pixels()) / ref.pixels());
      row["ld"] = metrics::local_distortion(fm.matches, fm.valid) * scale;
      row["ld_method"] = "gt_flow";
    } else {
      const auto dm = metrics::dense_match(to_gray(ref_e), to_gray(rect_e));
      row["ld"] = metrics::local_distortion(dm.matches);
      row["ld_method"] = dm.degenerate ? "dense_match_degenerate" : "dense_match";
    }
    sum_ld += row["ld"].get<double>();
    ++n_ld;

    row["ed"] = nullptr;
    row["cer"] = nullptr;
    if (!p.text.empty() && fs::exists(p.text)) {
      const auto ocr = metrics::ocr_adapter(pred, opt.ocr_engine);
      if (ocr.text) {
        const std::string ref_text = metrics::normalize_text(formats::read_text(p.text));
        const std::string hyp = metrics::normalize_text(*ocr.text);
        row["ed"] = metrics::edit_distance(ref_text, hyp).ed;
        row["cer"] = metrics::cer(ref_text, hyp);
        sum_ed += row["ed"].get<double>();
        sum_cer += row["cer"].get<double>();
        ++n_text;
      } else {
        row["text_reason"] = ocr.reason;
      }
    } else {
      row["text_reason"] = "no reference text (synthetic pages carry glyph texture, not characters)";
    }
    images.push_back(row);
  }
  auto mean = [](double s, int n) { return n ? json(s / n) : json(nullptr); };
  json report = {{"images", images},
                 {"mean", {{"ms_ssim", mean(sum_ms, n_ms)}, {"ld", mean(sum_ld, n_ld)},
                           {"ed", mean(sum_ed, n_text)}, {"cer", mean(sum_cer, n_text)}}},
                 {"config", {{"pred", opt.pred.string()}, {"gt", opt.gt.string()}, {"area", opt.area},
                             {"ms_ssim_weights", metrics::kMsSsimWeights},
                             {"ld_units", "pixels at the evaluation area"},
                             {"tool_version", tool_version()}}}};
  if (!opt.out.empty()) {
    if (opt.out.has_parent_path()) ensure_dir(opt.out.parent_path());
    formats::write_file_atomic(opt.out, report.dump(2) + "\n");
    if (opt.csv) {
      std::ostringstream o;
      o << "name,ms_ssim,ld,ed,cer\n";
      auto cell = [](const json& v) { return v.is_null() ? std::string() : fmt("%.6f", v.get<double>()); };
      for (const json& r : images)
        o << r["name"].get<std::string>() << ',' << cell(r["ms_ssim"]) << ',' << cell(r["ld"]) << ','
          << cell(r["ed"]) << ',' << cell(r["cer"]) << '\n';
      fs::path csv = opt.out;
      formats::write_file_atomic(csv.replace_extension(".csv"), o.str());
    }
  }
  return report;
}

std::vector<train::AblationSpec> ablation_matrix(const std::string& name) {
  if (name == "representation") return train::representation_matrix();
  if (name == "components") {
    train::AblationSpec full{"full"};
    train::AblationSpec no_se = full, no_te = full, bilinear = full, raw = full;
    no_se.name = "no-se";
    no_se.use_se = false;
    no_se.supervise_3d = false;
    no_te.name = "no-te";
    no_te.use_te = false;
    no_te.supervise_text = false;
    bilinear.name = "bilinear";
    bilinear.upsample = model::Upsample::Bilinear;
    raw.name = "no-preprocess";
    raw.use_preprocessing = false;
    return {full, no_se, no_te, bilinear, raw};
  }
  fail(ErrorCode::Config, "unknown ablation matrix '" + name + "' (representation, components)");
}

RunManifest cmd_ablate(const AblateOptions& opt) {
  require(!opt.out.empty(), ErrorCode::InvalidArgument, "--out is required");
  require(!opt.seeds.empty(), ErrorCode::InvalidArgument, "at least one seed is required");
  const auto matrix = ablation_matrix(opt.matrix);
  train::TrainConfig base = opt.base;
  base.out_dir.clear();
  base.validate();
  ensure_dir(opt.out);
  RunManifest man;
  man.command = "ablate";
  man.started = timestamp();
  man.seed = opt.seeds.front();
  man.config = {{"base", base.to_json()}, {"seeds", opt.seeds}, {"matrix", opt.matrix}};
  const auto [data, val] = training_data(base);
  std::vector<train::AblationRow> done;
  const auto rows = train::run_ablation_suite(matrix, opt.seeds, base, data, val, [&](const train::AblationRow& r) {
    done.push_back(r);
    log("ablation " + r.spec.name + " seed " + std::to_string(r.seed) + " ld " + fmt("%.4f", r.metrics.ld) +
        " ms-ssim " + fmt("%.4f", r.metrics.ms_ssim));
    formats::write_file_atomic(opt.out / "ablation.partial.json", train::ablation_json(done).dump() + "\n");
  });
  fs::remove(opt.out / "ablation.partial.json");
  const auto summary = train::summarize(rows);
  std::string table;
  if (opt.matrix == "representation") {
    table = train::ablation_table(summary);
  } else {
    table = "| variant | MS-SSIM | LD | runs |\n|:--|--:|--:|--:|\n";
    for (const auto& s : summary)
      table += "| " + s.spec.name + " | " + fmt("%.4f", s.ms_ssim) + " | " + fmt("%.3f", s.ld) + " ± " +
               fmt("%.3f", s.ld_std) + " | " + std::to_string(s.runs) + " |\n";
  }
  std::ostringstream csv;
  csv << "name,seed,ms_ssim,ld,ld_baseline,loss_flow,initial_ld,seconds\n";
  for (const auto& r : rows)
    csv << r.spec.name << ',' << r.seed << ',' << fmt("%.6f", r.metrics.ms_ssim) << ','
        << fmt("%.6f", r.metrics.ld) << ',' << fmt("%.6f", r.metrics.ld_baseline) << ','
        << fmt("%.6f", r.metrics.loss_flow) << ',' << fmt("%.6f", r.initial_ld) << ','
        << fmt("%.1f", r.seconds) << '\n';
  formats::write_file_atomic(opt.out / "ablation.json", train::ablation_json(rows).dump(2) + "\n");
  formats::write_file_atomic(opt.out / "ablation.md", table);
  formats::write_file_atomic(opt.out / "ablation.csv", csv.str());
  man.outputs = {"ablation.json", "ablation.md", "ablation.csv"};
  json means = json::object();
  for (const auto& s : summary) means[s.spec.name] = {{"ld", s.ld}, {"ld_std", s.ld_std}, {"ms_ssim", s.ms_ssim}};
  man.extra = {{"means", means}};
  man.finished = timestamp();
  write_manifest(opt.out, man);
  return man;
}

// ---------------------------------------------------------------------------
// report

std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& labels,
                          const std::vector<double>& values) {
  require(labels.size() == values.size(), ErrorCode::InvalidArgument, "labels and values differ in length");
  const int w = 640, h = 360, left = 60, right = 20, top = 40, bottom = 70;
  double vmax = 0.0;
  for (double v : values)
    if (std::isfinite(v)) vmax = std::max(vmax, v);
  if (vmax <= 0.0) vmax = 1.0;
  auto esc = [](const std::string& s) {
    std::string o;
    for (char c : s) {
      if (c == '<') o += "&lt;";
      else if (c == '>') o += "&gt;";
      else if (c == '&') o += "&amp;";
      else o += c;
    }
    return o;
  };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  o << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << esc(title) << "</text>\n";
  const int ph = h - top - bottom, pw = w - left - right;
  o << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
    << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = vmax * t / 4.0;
    const double y = top + ph - ph * t / 4.0;
    o << "<text x=\"" << left - 6 << "\" y=\"" << fmt("%.1f", y + 4) << "\" text-anchor=\"end\">"
      << fmt("%.4g", v) << "</text>\n";
  }
  const std::size_t n = values.size();
  if (n == 0)
    o << "<text x=\"" << w / 2 << "\" y=\"" << h / 2 << "\" text-anchor=\"middle\">no data</text>\n";
  const double slot = n ? static_cast<double>(pw) / n : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = std::isfinite(values[i]) ? std::max(0.0, values[i]) : 0.0;
    const double bh = ph * v / vmax;
    const double x = left + slot * i + slot * 0.1;
    o << "<rect x=\"" << fmt("%.2f", x) << "\" y=\"" << fmt("%.2f", top + ph - bh) << "\" width=\""
      << fmt("%.2f", slot * 0.8) << "\" height=\"" << fmt("%.2f", bh) << "\" fill=\"#4a78a8\"/>\n";
    if (n <= 40) {
      const double cx = left + slot * (i + 0.5);
      o << "<text x=\"" << fmt("%.2f", cx) << "\" y=\"" << top + ph + 12 << "\" text-anchor=\"end\" transform=\"rotate(-45 "
        << fmt("%.2f", cx) << ' ' << top + ph + 12 << ")\">" << esc(labels[i]) << "</text>\n";
    }
  }
  o << "</svg>\n";
  return o.str();
}

namespace {

std::string cell(const json& v, const char* f = "%.4f") {
  return v.is_number() ? fmt(f, v.get<double>()) : std::string("n/a");
}

json load_report(const fs::path& path) {
  const json j = json::parse(formats::read_text(path), nullptr, false);
  require(!j.is_discarded(), ErrorCode::Format, "malformed report " + path.string());
  const bool eval = j.is_object() && j.contains("images") && j["images"].is_array();
  const bool ablation = j.is_array();
  require(eval || ablation, ErrorCode::Format,
          "report " + path.string() + " is neither an eval report nor an ablation table");
  if (eval)
    for (const json& r : j["images"])
      require(r.is_object() && r.contains("name"), ErrorCode::Format, "report row without a name");
  if (ablation)
    for (const json& r : j)
      require(r.is_object() && r.contains("name") && r.contains("ld") && r.contains("ms_ssim"),
              ErrorCode::Format, "ablation row without name/ld/ms_ssim");
  return j;
}

// name -> (ms_ssim, ld) means
std::map<std::string, std::pair<double, double>> ablation_means(const json& rows, std::vector<std::string>& order) {
  std::map<std::string, std::pair<double, double>> sum;
  std::map<std::string, int> count;
  for (const json& r : rows) {
    const std::string name = r["name"];
    if (!count.count(name)) order.push_back(name);
    sum[name].first += r["ms_ssim"].get<double>();
    sum[name].second += r["ld"].get<double>();
    ++count[name];
  }
  for (auto& [k, v] : sum) {
    v.first /= count[k];
    v.second /= count[k];
  }
  return sum;
}

}  // namespace

std::vector<std::string> cmd_report(const ReportOptions& opt) {
  require(!opt.out.empty(), ErrorCode::InvalidArgument, "--out is required");
  const json rep = load_report(opt.report);
  std::optional<json> other;
  if (opt.compare) other = load_report(*opt.compare);
  require(!other || other->is_array() == rep.is_array(), ErrorCode::Format,
          "cannot compare an eval report with an ablation table");
  ensure_dir(opt.out);
  std::vector<std::string> files;
  std::ostringstream md;
  auto chart = [&](const std::string& file, const std::string& title, const std::vector<std::string>& labels,
                   const std::vector<double>& values) {
    formats::write_file_atomic(opt.out / file, svg_bar_chart(title, labels, values));
    files.push_back(file);
  };

  if (rep.is_object()) {
    const json& rows = rep["images"];
    md << "# Evaluation report\n\nrows: " << rows.size() << "\n\n";
    md << "| metric | mean |\n|:--|--:|\n";
    const json mean = rep.value("mean", json::object());
    for (const char* k : {"ms_ssim", "ld", "ed", "cer"}) md << "| " << k << " | " << cell(mean.value(k, json())) << " |\n";
    md << "\n| image | MS-SSIM | LD | ED | CER |\n|:--|--:|--:|--:|--:|\n";
    std::vector<std::string> labels;
    std::map<std::string, std::vector<double>> series;
    for (const json& r : rows) {
      labels.push_back(r["name"]);
      md << "| " << r["name"].get<std::string>();
      for (const char* k : {"ms_ssim", "ld", "ed", "cer"}) {
        const json v = r.value(k, json());
        md << " | " << cell(v);
        series[k].push_back(v.is_number() ? v.get<double>() : std::nan(""));
      }
      md << " |\n";
    }
    for (const char* k : {"ms_ssim", "ld", "ed", "cer"}) chart(std::string(k) + ".svg", k, labels, series[k]);
    if (other) {
      const json om = other->value("mean", json::object());
      md << "\n## Comparison with " << opt.compare->filename().string() << "\n\n";
      md << "| metric | this | other | delta |\n|:--|--:|--:|--:|\n";
      for (const char* k : {"ms_ssim", "ld", "ed", "cer"}) {
        const json a = mean.value(k, json()), b = om.value(k, json());
        md << "| " << k << " | " << cell(a) << " | " << cell(b) << " | "
           << (a.is_number() && b.is_number() ? fmt("%+.4f", b.get<double>() - a.get<double>()) : "n/a") << " |\n";
      }
    }
  } else {
    std::vector<std::string> order;
    const auto means = ablation_means(rep, order);
    md << "# Ablation report\n\nrows: " << rep.size() << "\n\n";
    md << "| variant | MS-SSIM | LD |\n|:--|--:|--:|\n";
    std::vector<double> ms, ld;
    for (const std::string& n : order) {
      const auto& m = means.at(n);
      md << "| " << n << " | " << fmt("%.4f", m.first) << " | " << fmt("%.4f", m.second) << " |\n";
      ms.push_back(m.first);
      ld.push_back(m.second);
    }
    chart("ms_ssim.svg", "MS-SSIM (mean over seeds)", order, ms);
    chart("ld.svg", "LD (mean over seeds)", order, ld);
    if (other) {
      std::vector<std::string> oo;
      const auto om = ablation_means(*other, oo);
      md << "\n## Comparison with " << opt.compare->filename().string() << "\n\n";
      md << "| variant | LD this | LD other | delta LD | delta MS-SSIM |\n|:--|--:|--:|--:|--:|\n";
      for (const std::string& n : order) {
        if (!om.count(n)) continue;
        const auto &a = means.at(n), &b = om.at(n);
        md << "| " << n << " | " << fmt("%.4f", a.second) << " | " << fmt("%.4f", b.second) << " | "
           << fmt("%+.4f", b.second - a.second) << " | " << fmt("%+.4f", b.first - a.first) << " |\n";
      }
    }
  }
  formats::write_file_atomic(opt.out / "summary.md", md.str());
  files.insert(files.begin(), "summary.md");
  return files;
}

}  // namespace docgeo::cli
