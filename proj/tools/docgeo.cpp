#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

#include "docgeo/cli.hpp"
#include "docgeo/error.hpp"

using namespace docgeo;
namespace fs = std::filesystem;

namespace {

int report_error(std::string_view code, const std::string& msg) {
  std::string one = msg;
  for (char& c : one)
    if (c == '\n' || c == '\r') c = ' ';
  std::cerr << "error: " << code << ": " << one << std::endl;
  return 2;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      std::size_t pos = 0;
      out.push_back(std::stoull(tok, &pos));
      require(pos == tok.size(), ErrorCode::InvalidArgument, "bad seed '" + tok + "'");
    } catch (const std::logic_error&) {
      fail(ErrorCode::InvalidArgument, "bad seed '" + tok + "'");
    }
  }
  return out;
}

struct TrainFlags {
  std::string config;
  std::string data;
  std::string val;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool toy = false;
  std::string ablate;
  std::vector<std::string> sets;
  int steps = -1;
  double lr = 0.0;
  int batch = 0;
};

void add_train_flags(CLI::App* app, TrainFlags& f) {
  app->add_option("--config", f.config, "key = value config file")->check(CLI::ExistingFile);
  app->add_option("--data", f.data, "training sample directory (generated when omitted)");
  app->add_option("--val", f.val, "validation sample directory");
  app->add_option("--out", f.out, "output directory")->required();
  app->add_option_function<std::uint64_t>("--seed", [&f](const std::uint64_t& s) { f.seed = s; f.seed_set = true; },
                                          "model and batch-order seed");
  app->add_flag("--toy", f.toy, "toy model preset");
  app->add_option("--ablate", f.ablate, "no-se,no-te,no-3d,no-text,bilinear,no-preprocess,no-skips");
  app->add_option("--set", f.sets, "extra config entries key=value");
  app->add_option("--steps", f.steps, "training steps");
  app->add_option("--lr", f.lr, "learning rate");
  app->add_option("--batch", f.batch, "batch size");
}

train::TrainConfig build_config(const TrainFlags& f) {
  train::TrainConfig cfg;
  if (!f.config.empty()) cfg = train::load_config(f.config, cfg);
  if (f.toy) train::set_config_value(cfg, "model.preset", "toy");
  for (const std::string& kv : f.sets) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos, ErrorCode::Config, "--set expects key=value, got '" + kv + "'");
    train::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!f.data.empty()) cfg.train_dir = f.data;
  if (!f.val.empty()) cfg.val_dir = f.val;
  if (f.seed_set) cfg.seed = f.seed;
  if (f.steps >= 0) {
    cfg.steps = f.steps;
    cfg.epochs = 0;
  }
  if (f.lr > 0) cfg.lr = f.lr;
  if (f.batch > 0) cfg.batch = f.batch;
  cli::apply_ablate_flags(cfg, f.ablate);
  cfg.out_dir = f.out;
  return cfg;
}

void print_manifest(const cli::RunManifest& m) {
  std::cout << m.command << ": " << m.outputs.size() << " outputs";
  if (!m.extra.empty()) std::cout << " " << m.extra.dump();
  std::cout << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Document image rectification lab"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", cli::tool_version());
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "suppress progress output");

  cli::GenerateOptions gen;
  std::string gen_out;
  double mix[4] = {0.4, 0.4, 0.1, 0.1};
  int gen_size = 0;
  auto* g = app.add_subcommand("generate", "write synthetic distorted/flat sample pairs");
  g->add_option("--out", gen_out, "dataset directory")->required();
  g->add_option("--n", gen.n, "number of samples");
  g->add_option("--seed", gen.seed, "generator seed");
  g->add_option("--size", gen_size, "square size (overrides --height/--width)");
  g->add_option("--height", gen.height, "image height");
  g->add_option("--width", gen.width, "image width");
  g->add_option("--mix-curl", mix[0]);
  g->add_option("--mix-fold", mix[1]);
  g->add_option("--mix-flat", mix[2]);
  g->add_option("--mix-crumple", mix[3]);

  cli::AnnotateCmdOptions ann;
  std::string ann_data;
  auto* a = app.add_subcommand("annotate", "detect textlines and map them into the distorted images");
  a->add_option("data", ann_data, "dataset directory")->required();
  a->add_option("--window", ann.detect.window, "binarization window");
  a->add_option("--offset", ann.detect.offset, "binarization offset");
  a->add_option("--kernel", ann.detect.kernel, "horizontal dilation length");
  a->add_option("--tol", ann.tol, "scoring tolerance in pixels");

  cli::TrainSegOptions seg;
  std::string seg_data, seg_val, seg_out;
  auto* s = app.add_subcommand("train-seg", "train the foreground page segmenter");
  s->add_option("--data", seg_data, "sample directory with img.png/mask.png (generated when omitted)");
  s->add_option("--val", seg_val, "held-out sample directory");
  s->add_option("--out", seg_out, "output directory")->required();
  s->add_option("--n", seg.n, "generated training samples");
  s->add_option("--val-n", seg.val_n, "generated held-out samples");
  s->add_option("--size", seg.size, "generated sample size");
  s->add_option("--steps", seg.train.steps);
  s->add_option("--batch", seg.train.batch);
  s->add_option("--lr", seg.train.lr);
  s->add_option("--seed", seg.train.seed);
  s->add_option("--work-size", seg.model.work_size, "network resolution");
  s->add_option("--base", seg.model.base, "base channel width");
  s->add_option("--tau", seg.model.tau, "foreground threshold stored with the model");

  TrainFlags tf;
  std::string resume;
  auto* t = app.add_subcommand("train", "train the rectification model");
  add_train_flags(t, tf);
  t->add_option("--resume", resume, "checkpoint to resume from");

  cli::RectifyOptions rec;
  std::string rec_in, rec_model, rec_seg, rec_out;
  double tau = -1.0;
  bool no_pre = false;
  auto* r = app.add_subcommand("rectify", "rectify an image or a directory of images");
  r->add_option("input", rec_in, "image, image directory or sample directory")->required();
  r->add_option("--model", rec_model, "model checkpoint")->required();
  r->add_option("--seg", rec_seg, "segmenter checkpoint");
  r->add_option("--out", rec_out, "output directory")->required();
  r->add_flag("--save-flow", rec.save_flow, "also write .dgwf flows");
  r->add_flag("--no-preprocess", no_pre, "skip background removal");
  r->add_flag("--gt-mask", rec.gt_mask, "use mask.png of sample directories for background removal");
  r->add_option("--tau", tau, "foreground threshold");

  cli::EvalOptions ev;
  std::string ev_pred, ev_gt, ev_out;
  auto* e = app.add_subcommand("eval", "score rectified images against references");
  e->add_option("--pred", ev_pred, "directory of <name>.png (and optional <name>.dgwf)")->required();
  e->add_option("--gt", ev_gt, "sample directory or directory of reference pngs")->required();
  e->add_option("--out", ev_out, "report.json path")->required();
  e->add_flag("--csv", ev.csv, "also write report.csv");
  e->add_option("--ocr", ev.ocr_engine, "OCR executable (default: DOCGEO_OCR_BIN)");

  TrainFlags af;
  cli::AblateOptions ab;
  std::string seeds = "0,1,2";
  auto* b = app.add_subcommand("ablate", "train an ablation matrix over several seeds");
  add_train_flags(b, af);
  b->add_option("--seeds", seeds, "comma separated seeds");
  b->add_option("--matrix", ab.matrix, "representation or components");

  cli::ReportOptions rep;
  std::string rep_in, rep_cmp, rep_out;
  auto* p = app.add_subcommand("report", "charts and markdown summary of a report");
  p->add_option("report", rep_in, "report.json or ablation.json")->required();
  p->add_option("--compare", rep_cmp, "second report for a delta table");
  p->add_option("--out", rep_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForVersion& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    return report_error("E_USAGE", ex.what());
  }

  if (!quiet) cli::set_logger([](const std::string& line) { std::cerr << line << std::endl; });

  try {
    if (*g) {
      gen.out = gen_out;
      if (gen_size > 0) gen.height = gen.width = gen_size;
      gen.mix = {mix[0], mix[1], mix[2], mix[3]};
      print_manifest(cli::cmd_generate(gen));
    } else if (*a) {
      ann.data = ann_data;
      print_manifest(cli::cmd_annotate(ann));
    } else if (*s) {
      seg.data = seg_data;
      seg.val = seg_val;
      seg.out = seg_out;
      print_manifest(cli::cmd_train_seg(seg));
    } else if (*t) {
      cli::TrainCmdOptions o;
      o.cfg = build_config(tf);
      if (!resume.empty()) o.resume = fs::path(resume);
      print_manifest(cli::cmd_train(o));
    } else if (*r) {
      rec.input = rec_in;
      rec.model = rec_model;
      rec.seg = rec_seg;
      rec.out = rec_out;
      rec.preprocess = !no_pre;
      if (tau >= 0) rec.tau = tau;
      print_manifest(cli::cmd_rectify(rec));
    } else if (*e) {
      ev.pred = ev_pred;
      ev.gt = ev_gt;
      ev.out = ev_out;
      const auto report = cli::cmd_eval(ev);
      std::cout << "eval: " << report["images"].size() << " images " << report["mean"].dump() << std::endl;
    } else if (*b) {
      ab.base = build_config(af);
      ab.out = af.out;
      ab.seeds = parse_seeds(seeds);
      const auto man = cli::cmd_ablate(ab);
      print_manifest(man);
      std::cout << formats::read_text(ab.out / "ablation.md");
    } else if (*p) {
      rep.report = rep_in;
      if (!rep_cmp.empty()) rep.compare = fs::path(rep_cmp);
      rep.out = rep_out;
      for (const auto& f : cli::cmd_report(rep)) std::cout << (rep.out / f).string() << "\n";
    }
  } catch (const Error& ex) {
    return report_error(error_code_name(ex.code()), ex.what());
  } catch (const fs::filesystem_error& ex) {
    return report_error("E_IO", ex.what());
  } catch (const nlohmann::json::exception& ex) {
    return report_error("E_FORMAT", ex.what());
  } catch (const std::exception& ex) {
    return report_error("E_INTERNAL", ex.what());
  }
  return 0;
}
