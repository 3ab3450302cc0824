#include "docgeo/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <opencv2/imgproc.hpp>

#include "docgeo/annotate.hpp"
#include "docgeo/error.hpp"
#include "docgeo/metrics.hpp"
#include "docgeo/nn/optim.hpp"
#include "docgeo/rng.hpp"

namespace docgeo::train {

namespace fs = std::filesystem;
using synthgen::derive_seed;
using synthgen::DistortedSample;

namespace {

constexpr std::uint64_t kBatchStream = 0x5eed0001;
constexpr std::uint64_t kJitterStream = 0x5eed0002;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
Grid<float> to_float(const Grid<T>& g) {
  Grid<float> f(g.height, g.width, g.channels);
  std::transform(g.data.begin(), g.data.end(), f.data.begin(),
                 [](T v) { return static_cast<float>(v); });
  return f;
}

Image to_double(const Grid<float>& g) {
  Image d(g.height, g.width, g.channels);
  std::copy(g.data.begin(), g.data.end(), d.data.begin());
  return d;
}

std::vector<double> gather(const std::vector<const TrainSample*>& batch,
                           const std::vector<float> TrainSample::*field) {
  std::vector<double> out;
  for (const TrainSample* s : batch) out.insert(out.end(), (s->*field).begin(), (s->*field).end());
  return out;
}

Mask page_mask(const TrainSample& s) {
  Mask m(s.height, s.width);
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = s.mask[i] > 0.5f;
  return m;
}

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
  out << line << '\n';
}

}  // namespace

Image augment_image(const Image& img, std::uint64_t seed, const AugmentOptions& opt) {
  require(img.channels == 3, ErrorCode::ShapeMismatch, "augment expects an RGB image");
  require(opt.hue >= 0 && opt.saturation >= 0 && opt.saturation < 1 && opt.value >= 0 && opt.value < 1,
          ErrorCode::Config, "augment: jitter bounds out of range");
  if (opt.hue == 0 && opt.saturation == 0 && opt.value == 0) return img;
  Rng rng(seed);
  const double dh = rng.uniform(-opt.hue, opt.hue) * 360.0;
  const double ks = rng.uniform(1 - opt.saturation, 1 + opt.saturation);
  const double kv = rng.uniform(1 - opt.value, 1 + opt.value);

  cv::Mat rgb(img.height, img.width, CV_32FC3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) rgb.at<cv::Vec3f>(y, x)[c] = static_cast<float>(img.at(y, x, c));
  cv::Mat hsv;
  cv::cvtColor(rgb, hsv, cv::COLOR_RGB2HSV);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      cv::Vec3f& p = hsv.at<cv::Vec3f>(y, x);
      p[0] = static_cast<float>(std::fmod(p[0] + dh + 360.0, 360.0));
      p[1] = static_cast<float>(std::clamp(p[1] * ks, 0.0, 1.0));
      p[2] = static_cast<float>(std::clamp(p[2] * kv, 0.0, 1.0));
    }
  cv::cvtColor(hsv, rgb, cv::COLOR_HSV2RGB);
  Image out(img.height, img.width, 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = std::clamp<double>(rgb.at<cv::Vec3f>(y, x)[c], 0.0, 1.0);
  return out;
}

DistortedSample augment(const DistortedSample& sample, std::uint64_t seed, const AugmentOptions& opt) {
  DistortedSample s = sample;
  s.distorted = augment_image(sample.distorted, seed, opt);
  return s;
}

Image TrainSample::distorted() const { return to_double(image); }

WarpField TrainSample::gt_flow() const {
  WarpField f{height, width, {}, {}};
  const std::size_t n = static_cast<std::size_t>(height) * width;
  f.dx.assign(flow.begin(), flow.begin() + n);
  f.dy.assign(flow.begin() + n, flow.end());
  return f;
}

TrainSample make_train_sample(const DistortedSample& s, const Mask& text_mask) {
  const int h = s.distorted.height, w = s.distorted.width;
  require(s.distorted.channels == 3, ErrorCode::ShapeMismatch, "training images must be RGB");
  require(s.gt_flow.height == h && s.gt_flow.width == w, ErrorCode::ShapeMismatch,
          "flow and image grids differ");
  require(s.gt_mask.height == h && s.gt_mask.width == w, ErrorCode::ShapeMismatch,
          "mask and image grids differ");
  TrainSample t;
  t.height = h;
  t.width = w;
  t.image = to_float(s.distorted);
  if (!s.flat.empty()) t.flat = to_float(s.flat);
  t.flow.reserve(2 * s.gt_flow.dx.size());
  t.flow.insert(t.flow.end(), s.gt_flow.dx.begin(), s.gt_flow.dx.end());
  t.flow.insert(t.flow.end(), s.gt_flow.dy.begin(), s.gt_flow.dy.end());
  t.mask.assign(s.gt_mask.data.begin(), s.gt_mask.data.end());
  if (!s.gt_coords.empty()) {
    require(s.gt_coords.height == h && s.gt_coords.width == w && s.gt_coords.channels == 3,
            ErrorCode::ShapeMismatch, "coordinate map and image grids differ");
    t.coords.resize(3 * static_cast<std::size_t>(h) * w);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) t.coords[(c * h + y) * w + x] = s.gt_coords.at(y, x, c);
  }
  if (!text_mask.empty()) {
    require(text_mask.height == h && text_mask.width == w, ErrorCode::ShapeMismatch,
            "textline mask and image grids differ");
    t.text.assign(text_mask.data.begin(), text_mask.data.end());
  }
  return t;
}

std::vector<TrainSample> synthetic_dataset(std::uint64_t seed, int n, int height, int width,
                                           const synthgen::DeformationMix& mix) {
  require(n >= 0, ErrorCode::InvalidArgument, "dataset size must be non-negative");
  std::vector<TrainSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    DistortedSample s = synthgen::generate_sample(derive_seed(seed, i), height, width, mix);
    const TextlineSet lines = annotate::annotate_distorted(s.flat, s.gt_flow);
    out.push_back(make_train_sample(s, annotate::rasterize_lines(lines, height, width)));
  }
  return out;
}

std::vector<TrainSample> load_dataset(const fs::path& root) {
  require(fs::is_directory(root), ErrorCode::Io, "dataset directory not found: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "meta.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  require(!dirs.empty(), ErrorCode::MissingData, "no samples under " + root.string());
  std::vector<TrainSample> out;
  for (const fs::path& d : dirs) {
    const DistortedSample s = synthgen::read_sample(d);
    Mask text;
    if (fs::exists(d / "textmask.png")) text = formats::read_mask_png(d / "textmask.png");
    out.push_back(make_train_sample(s, text));
  }
  return out;
}

// ---------------------------------------------------------------------------
// config

void TrainConfig::validate() const {
  model.validate();
  require(batch >= 1, ErrorCode::Config, "batch must be >= 1");
  require(lr > 0 && std::isfinite(lr), ErrorCode::Config, "lr must be positive");
  require(weight_decay >= 0, ErrorCode::Config, "weight_decay must be >= 0");
  require(steps >= 0 && epochs >= 0, ErrorCode::Config, "steps/epochs must be >= 0");
  require(lr_decay_step >= 0 && lr_decay_factor > 0, ErrorCode::Config, "bad lr decay");
  require(grad_clip >= 0, ErrorCode::Config, "grad_clip must be >= 0");
  require(log_every >= 0 && val_every >= 0 && checkpoint_every >= 0, ErrorCode::Config,
          "intervals must be >= 0");
  require(dataset_size >= 1 && val_size >= 0, ErrorCode::Config, "bad dataset sizes");
}

int TrainConfig::total_steps(std::size_t n) const {
  if (epochs == 0) return steps;
  return epochs * static_cast<int>((n + batch - 1) / batch);
}

nlohmann::json TrainConfig::to_json() const {
  return {{"model", model.to_json()},
          {"batch", batch},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"steps", steps},
          {"epochs", epochs},
          {"lr_decay_step", lr_decay_step},
          {"lr_decay_factor", lr_decay_factor},
          {"grad_clip", grad_clip},
          {"seed", seed},
          {"supervise_3d", supervise_3d},
          {"supervise_text", supervise_text},
          {"use_preprocessing", use_preprocessing},
          {"augment", augment},
          {"jitter", {{"hue", jitter.hue}, {"saturation", jitter.saturation}, {"value", jitter.value}}},
          {"log_every", log_every},
          {"val_every", val_every},
          {"checkpoint_every", checkpoint_every},
          {"out_dir", out_dir},
          {"dataset_size", dataset_size},
          {"val_size", val_size},
          {"data_seed", data_seed},
          {"train_dir", train_dir},
          {"val_dir", val_dir}};
}

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail(ErrorCode::Config, key + ": expected a boolean, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == v.size() && !v.empty(), ErrorCode::Config, key + ": expected a number, got '" + v + "'");
  return d;
}

long long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long i = 0;
  try {
    i = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == v.size() && !v.empty(), ErrorCode::Config, key + ": expected an integer, got '" + v + "'");
  return i;
}

std::string unquote(const std::string& v) {
  if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front())
    return v.substr(1, v.size() - 2);
  return v;
}

}  // namespace

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& raw) {
  const std::string v = unquote(raw);
  auto as_int = [&] { return static_cast<int>(parse_int(key, v)); };
  if (key == "model.preset") {
    require(v == "toy" || v == "full", ErrorCode::Config, "model.preset must be toy or full");
    cfg.model = v == "toy" ? model::ModelConfig::toy() : model::ModelConfig::full();
    return;
  }
  if (key.rfind("model.", 0) == 0) {
    const std::string field = key.substr(6);
    nlohmann::json j = cfg.model.to_json();
    require(j.contains(field), ErrorCode::Config, "unknown config key '" + key + "'");
    if (j[field].is_boolean())
      j[field] = parse_bool(key, v);
    else if (j[field].is_number_integer())
      j[field] = parse_int(key, v);
    else if (j[field].is_number())
      j[field] = parse_double(key, v);
    else
      j[field] = v;
    cfg.model = model::ModelConfig::from_json(j);
    return;
  }
  if (key == "batch") cfg.batch = as_int();
  else if (key == "lr") cfg.lr = parse_double(key, v);
  else if (key == "weight_decay") cfg.weight_decay = parse_double(key, v);
  else if (key == "steps") cfg.steps = as_int();
  else if (key == "epochs") cfg.epochs = as_int();
  else if (key == "lr_decay_step") cfg.lr_decay_step = as_int();
  else if (key == "lr_decay_factor") cfg.lr_decay_factor = parse_double(key, v);
  else if (key == "grad_clip") cfg.grad_clip = parse_double(key, v);
  else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "supervise_3d") cfg.supervise_3d = parse_bool(key, v);
  else if (key == "supervise_text") cfg.supervise_text = parse_bool(key, v);
  else if (key == "use_preprocessing") cfg.use_preprocessing = parse_bool(key, v);
  else if (key == "augment") cfg.augment = parse_bool(key, v);
  else if (key == "jitter.hue") cfg.jitter.hue = parse_double(key, v);
  else if (key == "jitter.saturation") cfg.jitter.saturation = parse_double(key, v);
  else if (key == "jitter.value") cfg.jitter.value = parse_double(key, v);
  else if (key == "log_every") cfg.log_every = as_int();
  else if (key == "val_every") cfg.val_every = as_int();
  else if (key == "checkpoint_every") cfg.checkpoint_every = as_int();
  else if (key == "out_dir") cfg.out_dir = v;
  else if (key == "dataset_size") cfg.dataset_size = as_int();
  else if (key == "val_size") cfg.val_size = as_int();
  else if (key == "data_seed") cfg.data_seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "train_dir") cfg.train_dir = v;
  else if (key == "val_dir") cfg.val_dir = v;
  else fail(ErrorCode::Config, "unknown config key '" + key + "'");
}

TrainConfig parse_config(const std::string& text, TrainConfig cfg) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      require(line.back() == ']', ErrorCode::Config, "line " + std::to_string(lineno) + ": bad section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::Config,
            "line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    set_config_value(cfg, key, trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const fs::path& path, TrainConfig base) {
  return parse_config(formats::read_text(path), std::move(base));
}

// ---------------------------------------------------------------------------
// loop

Tensor batch_images(const std::vector<const TrainSample*>& batch, bool use_mask,
                    const std::vector<Image>* jittered) {
  require(!batch.empty(), ErrorCode::InvalidArgument, "empty batch");
  const int h = batch[0]->height, w = batch[0]->width;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<double> v(batch.size() * 3 * hw);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const TrainSample& s = *batch[b];
    require(s.height == h && s.width == w, ErrorCode::ShapeMismatch, "batch samples differ in size");
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        double px = jittered ? (*jittered)[b].data[i * 3 + c] : s.image.data[i * 3 + c];
        if (use_mask) px *= s.mask[i];
        v[(b * 3 + c) * hw + i] = px;
      }
  }
  return Tensor::from({static_cast<int>(batch.size()), 3, h, w}, std::move(v));
}

WarpField predict_flow(const model::DocGeoNet& net, const Image& image, const Mask* mask) {
  const auto& mc = net.config();
  require(image.height == mc.height && image.width == mc.width && image.channels == 3,
          ErrorCode::ShapeMismatch,
          "model expects " + std::to_string(mc.height) + "x" + std::to_string(mc.width) + " RGB input");
  const std::size_t hw = image.pixels();
  std::vector<double> v(3 * hw);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      v[c * hw + i] = image.data[i * 3 + c] * (mask ? static_cast<double>(mask->data[i]) : 1.0);
  nn::NoGradGuard ng;
  const Tensor f = net.forward(Tensor::from({1, 3, image.height, image.width}, std::move(v))).flow;
  WarpField out{image.height, image.width, {}, {}};
  out.dx.assign(f.data().begin(), f.data().begin() + hw);
  out.dy.assign(f.data().begin() + hw, f.data().end());
  return out;
}

ValMetrics evaluate(const model::DocGeoNet& net, const std::vector<TrainSample>& val,
                    bool use_preprocessing) {
  require(!val.empty(), ErrorCode::MissingData, "validation set is empty");
  ValMetrics m;
  int with_flat = 0;
  for (const TrainSample& s : val) {
    const Image img = s.distorted();
    const Mask pm = page_mask(s);
    const WarpField pred = predict_flow(net, img, use_preprocessing ? &pm : nullptr);
    const WarpField gt = s.gt_flow();
    double l1 = 0;
    for (std::size_t i = 0; i < gt.dx.size(); ++i)
      l1 += std::abs(static_cast<double>(pred.dx[i]) - gt.dx[i]) + std::abs(static_cast<double>(pred.dy[i]) - gt.dy[i]);
    m.loss_flow += l1 / (2.0 * gt.dx.size());

    const auto fm = metrics::matches_from_flows(gt, pred);
    m.ld += metrics::local_distortion(fm.matches, fm.valid);
    const WarpField zero{gt.height, gt.width, std::vector<float>(gt.dx.size()), std::vector<float>(gt.dx.size())};
    const auto fb = metrics::matches_from_flows(gt, zero);
    m.ld_baseline += metrics::local_distortion(fb.matches, fb.valid);

    if (!s.flat.empty()) {
      const Image flat = to_double(s.flat);
      const auto r = metrics::ms_ssim_detailed(apply_flow(img, pred), flat);
      m.ms_ssim += r.value;
      m.ms_ssim_levels = r.levels;
      m.ms_ssim_baseline += metrics::ms_ssim(img, flat);
      ++with_flat;
    }
  }
  const double n = static_cast<double>(val.size());
  m.loss_flow /= n;
  m.ld /= n;
  m.ld_baseline /= n;
  if (with_flat) {
    m.ms_ssim /= with_flat;
    m.ms_ssim_baseline /= with_flat;
  }
  return m;
}

std::vector<std::size_t> batch_indices(std::uint64_t seed, int step, int batch, std::size_t n) {
  require(n > 0 && batch > 0 && step >= 0, ErrorCode::InvalidArgument, "batch_indices: bad arguments");
  std::vector<std::size_t> out;
  std::vector<std::size_t> perm;
  std::int64_t cached_epoch = -1;
  for (int b = 0; b < batch; ++b) {
    const std::uint64_t pos = static_cast<std::uint64_t>(step) * batch + b;
    const auto epoch = static_cast<std::int64_t>(pos / n);
    if (epoch != cached_epoch) {
      perm.resize(n);
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng(derive_seed(derive_seed(seed, kBatchStream), static_cast<std::uint64_t>(epoch)));
      for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_int(0, static_cast<int>(i) - 1)]);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % n]);
  }
  return out;
}

void save_model(const fs::path& path, const model::DocGeoNet& net, nn::AdamW* optimizer, int step) {
  nn::save_checkpoint(path, net.params(), optimizer,
                      {{"kind", "docgeonet"}, {"config", net.config().to_json()}, {"step", step}});
}

model::DocGeoNet load_model(const fs::path& path) {
  const nlohmann::json h = nn::read_checkpoint_header(path);
  require(h.at("meta").value("kind", "") == "docgeonet", ErrorCode::Format,
          path.string() + " is not a rectification checkpoint");
  model::DocGeoNet net(model::ModelConfig::from_json(h["meta"].at("config")), 0);
  nn::load_checkpoint(path, net.params());
  return net;
}

TrainLog train_loop(model::DocGeoNet& net, const std::vector<TrainSample>& data,
                    const std::vector<TrainSample>& val, const TrainConfig& cfg,
                    const std::optional<fs::path>& resume_from, const TrainHooks& hooks) {
  cfg.validate();
  require(!data.empty(), ErrorCode::MissingData, "training set is empty");
  const auto& mc = net.config();
  const bool want_3d = cfg.supervise_3d && mc.use_se && mc.alpha > 0;
  const bool want_text = cfg.supervise_text && mc.use_te && mc.beta > 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const TrainSample& s = data[i];
    require(s.height == mc.height && s.width == mc.width, ErrorCode::ShapeMismatch,
            "sample " + std::to_string(i) + " is " + std::to_string(s.height) + "x" +
                std::to_string(s.width) + ", model expects " + std::to_string(mc.height) + "x" +
                std::to_string(mc.width));
    require(!want_3d || s.has_coords(), ErrorCode::MissingData,
            "sample " + std::to_string(i) + " has no 3D coordinates but supervise_3d is on");
    require(!want_text || s.has_text(), ErrorCode::MissingData,
            "sample " + std::to_string(i) + " has no textline mask but supervise_text is on");
  }

  nn::AdamW opt(net.params(), nn::AdamWOptions{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  int start = 0;
  if (resume_from) {
    const nlohmann::json meta = nn::load_checkpoint(*resume_from, net.params(), &opt);
    start = meta.value("step", 0);
  }
  const int total = cfg.total_steps(data.size());
  const fs::path out = cfg.out_dir;
  if (!cfg.out_dir.empty()) {
    fs::create_directories(out);
    if (start == 0) {
      formats::write_file_atomic(out / "train_log.csv", std::string("step,total,l3d,ltext,lflow,lr,seconds\n"));
      formats::write_file_atomic(out / "val_log.csv",
                                 std::string("step,loss_flow,ld,ld_baseline,ms_ssim,ms_ssim_baseline\n"));
    }
    formats::write_file_atomic(out / "config.json", cfg.to_json().dump(2) + "\n");
  }

  TrainLog log;
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  auto validate_now = [&](int step) {
    if (val.empty()) return;
    ValMetrics m = evaluate(net, val, cfg.use_preprocessing);
    m.step = step;
    log.validation.push_back(m);
    if (!cfg.out_dir.empty()) {
      std::ostringstream line;
      line.precision(10);
      line << step << ',' << m.loss_flow << ',' << m.ld << ',' << m.ld_baseline << ',' << m.ms_ssim << ','
           << m.ms_ssim_baseline;
      append_line(out / "val_log.csv", line.str());
    }
    if (hooks.on_validate) hooks.on_validate(m);
  };
  if (cfg.val_every > 0 && start == 0) validate_now(0);

  for (int step = start; step < total; ++step) {
    opt.set_lr(cfg.lr_decay_step > 0 && step >= cfg.lr_decay_step ? cfg.lr * cfg.lr_decay_factor : cfg.lr);
    const auto idx = batch_indices(cfg.seed, step, cfg.batch, data.size());
    std::vector<const TrainSample*> batch;
    for (std::size_t k : idx) batch.push_back(&data[k]);
    std::vector<Image> jittered;
    if (cfg.augment) {
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::uint64_t js = derive_seed(derive_seed(cfg.seed, kJitterStream),
                                             static_cast<std::uint64_t>(step) * cfg.batch + b);
        jittered.push_back(augment_image(batch[b]->distorted(), js, cfg.jitter));
      }
    }
    const Tensor x = batch_images(batch, cfg.use_preprocessing, cfg.augment ? &jittered : nullptr);

    nn::zero_grad(net.params());
    const model::ForwardOutputs o = net.forward(x);
    const std::vector<double> mask = gather(batch, &TrainSample::mask);
    Tensor lflow = model::loss_flow(o.flow, gather(batch, &TrainSample::flow));
    Tensor l3d, ltext;
    if (want_3d) l3d = model::loss_3d(o.coords, gather(batch, &TrainSample::coords), mask);
    if (want_text) ltext = model::loss_text(o.text, gather(batch, &TrainSample::text), mask);
    Tensor loss = model::total_loss(l3d, ltext, lflow, want_3d ? mc.alpha : 0.0, want_text ? mc.beta : 0.0);

    StepLog sl;
    sl.step = step;
    sl.total = loss.item();
    sl.lflow = lflow.item();
    sl.l3d = want_3d ? l3d.item() : 0.0;
    sl.ltext = want_text ? ltext.item() : 0.0;
    sl.lr = opt.lr();
    if (!std::isfinite(sl.total)) {
      std::ostringstream msg;
      msg << "loss is not finite at step " << step << " (flow " << sl.lflow << ", 3d " << sl.l3d << ", text "
          << sl.ltext << ", lr " << sl.lr << ")";
      fail(ErrorCode::Diverged, msg.str());
    }
    loss.backward();
    if (cfg.grad_clip > 0) nn::clip_grad_norm(net.params(), cfg.grad_clip);
    opt.step();
    sl.seconds = elapsed();

    const int done = step + 1;
    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || done == total)) {
      log.steps.push_back(sl);
      if (!cfg.out_dir.empty()) {
        std::ostringstream line;
        line.precision(10);
        line << sl.step << ',' << sl.total << ',' << sl.l3d << ',' << sl.ltext << ',' << sl.lflow << ',' << sl.lr
             << ',' << sl.seconds;
        append_line(out / "train_log.csv", line.str());
      }
      if (hooks.on_step) hooks.on_step(sl);
    }
    if (cfg.val_every > 0 && (done % cfg.val_every == 0 || done == total)) validate_now(done);
    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 && (done % cfg.checkpoint_every == 0 || done == total)) {
      save_model(out / ("ckpt_" + std::to_string(done) + ".dgck"), net, &opt, done);
      save_model(out / "latest.dgck", net, &opt, done);
    }
  }
  log.wall_seconds = elapsed();

  if (!cfg.out_dir.empty()) {
    nlohmann::json summary = {{"steps", total}, {"wall_seconds", log.wall_seconds}};
    if (!log.steps.empty()) {
      const StepLog& l = log.steps.back();
      summary["final_loss"] = {{"total", l.total}, {"l3d", l.l3d}, {"ltext", l.ltext}, {"lflow", l.lflow}};
    }
    if (!log.validation.empty()) {
      const ValMetrics& v = log.validation.back();
      summary["validation"] = {{"loss_flow", v.loss_flow}, {"ld", v.ld}, {"ld_baseline", v.ld_baseline},
                               {"ms_ssim", v.ms_ssim}, {"ms_ssim_baseline", v.ms_ssim_baseline}};
    }
    formats::write_file_atomic(out / "summary.json", summary.dump(2) + "\n");
    save_model(out / "model.dgck", net, nullptr, total);
  }
  return log;
}

// ---------------------------------------------------------------------------
// ablation

std::vector<AblationSpec> representation_matrix() {
  return {{"none", true, true, false, false},
          {"3d", true, true, true, false},
          {"text", true, true, false, true},
          {"3d+text", true, true, true, true}};
}

std::vector<AblationRow> run_ablation_suite(const std::vector<AblationSpec>& matrix,
                                            const std::vector<std::uint64_t>& seeds, const TrainConfig& base,
                                            const std::vector<TrainSample>& data,
                                            const std::vector<TrainSample>& val,
                                            const std::function<void(const AblationRow&)>& on_row) {
  require(!val.empty(), ErrorCode::MissingData, "ablation needs a validation set");
  std::vector<AblationRow> rows;
  for (const AblationSpec& spec : matrix) {
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.seed = seed;
      cfg.model.use_se = spec.use_se;
      cfg.model.use_te = spec.use_te;
      cfg.model.upsample = spec.upsample;
      cfg.supervise_3d = spec.supervise_3d;
      cfg.supervise_text = spec.supervise_text;
      cfg.use_preprocessing = spec.use_preprocessing;
      cfg.val_every = 0;
      if (!base.out_dir.empty()) cfg.out_dir = (fs::path(base.out_dir) / (spec.name + "_seed" + std::to_string(seed))).string();
      model::DocGeoNet net(cfg.model, seed);
      AblationRow row;
      row.spec = spec;
      row.seed = seed;
      const ValMetrics init = evaluate(net, val, cfg.use_preprocessing);
      row.initial_ld = init.ld;
      row.initial_loss_flow = init.loss_flow;
      const TrainLog log = train_loop(net, data, val, cfg);
      row.metrics = evaluate(net, val, cfg.use_preprocessing);
      row.metrics.step = cfg.total_steps(data.size());
      row.seconds = log.wall_seconds;
      rows.push_back(row);
      if (on_row) on_row(row);
    }
  }
  return rows;
}

std::vector<AblationSummary> summarize(const std::vector<AblationRow>& rows) {
  std::vector<AblationSummary> out;
  for (const AblationRow& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const AblationSummary& s) { return s.spec.name == r.spec.name; });
    if (it == out.end()) {
      out.push_back({r.spec});
      it = out.end() - 1;
    }
    ++it->runs;
    it->ms_ssim += r.metrics.ms_ssim;
    it->ld += r.metrics.ld;
  }
  for (AblationSummary& s : out) {
    s.ms_ssim /= s.runs;
    s.ld /= s.runs;
    double var = 0;
    for (const AblationRow& r : rows)
      if (r.spec.name == s.spec.name) var += (r.metrics.ld - s.ld) * (r.metrics.ld - s.ld);
    s.ld_std = s.runs > 1 ? std::sqrt(var / (s.runs - 1)) : 0.0;
  }
  return out;
}

std::string ablation_table(const std::vector<AblationSummary>& summary) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o << "| 3D | Text | MS-SSIM | LD | runs |\n|:--:|:--:|--:|--:|--:|\n";
  for (const AblationSummary& s : summary) {
    o << "| " << (s.spec.supervise_3d ? "x" : " ") << " | " << (s.spec.supervise_text ? "x" : " ") << " | ";
    o.precision(4);
    o << s.ms_ssim << " | ";
    o.precision(3);
    o << s.ld << " ± " << s.ld_std << " | " << s.runs << " |\n";
  }
  return o.str();
}

nlohmann::json ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const AblationRow& r : rows)
    j.push_back({{"name", r.spec.name},
                 {"use_se", r.spec.use_se},
                 {"use_te", r.spec.use_te},
                 {"supervise_3d", r.spec.supervise_3d},
                 {"supervise_text", r.spec.supervise_text},
                 {"upsample", r.spec.upsample == model::Upsample::Learnable ? "learnable" : "bilinear"},
                 {"use_preprocessing", r.spec.use_preprocessing},
                 {"seed", r.seed},
                 {"ms_ssim", r.metrics.ms_ssim},
                 {"ld", r.metrics.ld},
                 {"ld_baseline", r.metrics.ld_baseline},
                 {"loss_flow", r.metrics.loss_flow},
                 {"initial_ld", r.initial_ld},
                 {"initial_loss_flow", r.initial_loss_flow},
                 {"seconds", r.seconds}});
  return j;
}

}  // namespace docgeo::train
