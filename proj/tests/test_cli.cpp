#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>

#include "docgeo/cli.hpp"
#include "docgeo/error.hpp"
#include "docgeo/formats.hpp"
#include "docgeo/metrics.hpp"

using namespace docgeo;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("docgeo_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) {
      const auto bytes = formats::read_file(e.path());
      out[fs::relative(e.path(), root).string()] = std::string(bytes.begin(), bytes.end());
    }
  return out;
}

train::TrainConfig tiny_config() {
  train::TrainConfig cfg;
  auto& m = cfg.model;
  m.height = m.width = 64;
  m.channels = 16;
  m.tf_width = 16;
  m.heads = 2;
  m.encoder_layers = 1;
  m.fusion_layers = 1;
  m.zc_layer = 1;
  m.text_channels = 8;
  m.text_base = 4;
  cfg.steps = 2;
  cfg.log_every = 0;
  cfg.dataset_size = 4;
  cfg.val_size = 2;
  return cfg;
}

}  // namespace

TEST_CASE("config hash and timestamps") {
  CHECK(cli::config_hash(json::object()) ==
        "44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a");
  CHECK(cli::config_hash({{"a", 1}}) != cli::config_hash({{"a", 2}}));
  setenv("SOURCE_DATE_EPOCH", "0", 1);
  CHECK(cli::timestamp() == "1970-01-01T00:00:00Z");
  setenv("SOURCE_DATE_EPOCH", "junk", 1);
  CHECK_THROWS_AS(cli::timestamp(), Error);
  unsetenv("SOURCE_DATE_EPOCH");
  CHECK(cli::timestamp().size() == 20);
}

TEST_CASE("generate is reproducible and records the kind histogram") {
  TempDir a("gen_a"), b("gen_b");
  setenv("SOURCE_DATE_EPOCH", "1700000000", 1);
  cli::GenerateOptions opt;
  opt.n = 10;
  opt.seed = 7;
  opt.height = opt.width = 64;
  opt.out = a.path;
  const auto man = cli::cmd_generate(opt);
  opt.out = b.path;
  cli::cmd_generate(opt);
  unsetenv("SOURCE_DATE_EPOCH");
  const auto ta = tree(a.path), tb = tree(b.path);
  CHECK(ta.size() == 10 * 7 + 1);
  CHECK(ta == tb);

  std::map<std::string, int> counted;
  for (int i = 0; i < 10; ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "%05d", i);
    const json meta = json::parse(formats::read_text(a.path / name / "meta.json"));
    ++counted[meta["params"]["kind"].get<std::string>()];
  }
  const json stored = json::parse(formats::read_text(a.path / "manifest.json"));
  int total = 0;
  for (const auto& [k, v] : stored["extra"]["kinds"].items()) {
    CHECK(v.get<int>() == counted[k]);
    total += v.get<int>();
  }
  CHECK(total == 10);
  CHECK(stored["config_hash"] == cli::config_hash(stored["config"]));
  CHECK(stored["command"] == "generate");
  CHECK(stored["seed"] == 7);
  CHECK(man.outputs.size() == 10);
}

TEST_CASE("generate edge cases") {
  TempDir d("gen_edge");
  cli::GenerateOptions opt;
  opt.n = 0;
  opt.out = d.path / "empty";
  cli::cmd_generate(opt);
  CHECK(tree(opt.out).size() == 1);
  CHECK(fs::exists(opt.out / "manifest.json"));

  opt.n = -1;
  CHECK_THROWS_AS(cli::cmd_generate(opt), Error);
  opt.n = 1;
  opt.mix = {0, 0, 0, 0};
  CHECK_THROWS_AS(cli::cmd_generate(opt), Error);
  opt.mix = {};
  std::ofstream(d.path / "file") << "x";
  opt.out = d.path / "file" / "sub";
  try {
    cli::cmd_generate(opt);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Io);
  }
}

TEST_CASE("annotate keeps generator lines and scores against them") {
  TempDir d("ann");
  cli::GenerateOptions g;
  g.n = 3;
  g.seed = 11;
  g.height = g.width = 96;
  g.out = d.path;
  cli::cmd_generate(g);
  const TextlineSet gen_lines = formats::read_lines(d.path / "00000" / "lines.jsonl");
  const auto man = cli::cmd_annotate({d.path, {}, 3.0});
  CHECK(formats::read_lines(d.path / "00000" / "lines_gen.jsonl") == gen_lines);
  CHECK(fs::exists(d.path / "00000" / "textmask.png"));
  CHECK(man.extra["recall"].get<double>() >= 0.8);
  // second run must not clobber the generator record
  cli::cmd_annotate({d.path, {}, 3.0});
  CHECK(formats::read_lines(d.path / "00000" / "lines_gen.jsonl") == gen_lines);
}

TEST_CASE("ablate flags") {
  train::TrainConfig cfg;
  cli::apply_ablate_flags(cfg, "no-se, no-text,bilinear,no-preprocess");
  CHECK_FALSE(cfg.model.use_se);
  CHECK(cfg.model.use_te);
  CHECK(cfg.supervise_3d);
  CHECK_FALSE(cfg.supervise_text);
  CHECK(cfg.model.upsample == model::Upsample::Bilinear);
  CHECK_FALSE(cfg.use_preprocessing);
  CHECK_THROWS_AS(cli::apply_ablate_flags(cfg, "no-such"), Error);
  CHECK(cli::ablation_matrix("representation").size() == 4);
  CHECK(cli::ablation_matrix("components").size() == 5);
  CHECK_THROWS_AS(cli::ablation_matrix("x"), Error);
}

TEST_CASE("train, rectify and eval pipeline") {
  TempDir d("pipe");
  cli::GenerateOptions g;
  g.n = 3;
  g.seed = 5;
  g.height = g.width = 64;
  g.out = d.path / "data";
  cli::cmd_generate(g);

  cli::TrainCmdOptions t;
  t.cfg = tiny_config();
  t.cfg.out_dir = (d.path / "run").string();
  const auto tm = cli::cmd_train(t);
  CHECK(fs::exists(d.path / "run" / "model.dgck"));
  CHECK(tm.extra["steps"] == 2);

  cli::RectifyOptions r;
  r.input = g.out;
  r.model = d.path / "run" / "model.dgck";
  r.out = d.path / "rect";
  CHECK_THROWS_AS(cli::cmd_rectify(r), Error);  // preprocessing without a segmenter
  r.gt_mask = true;
  r.save_flow = true;
  cli::cmd_rectify(r);
  for (const char* n : {"00000", "00001", "00002"}) {
    const Image out = formats::read_png(r.out / (std::string(n) + ".png"));
    CHECK(out.height == 64);
    CHECK(out.width == 64);
    const auto bytes = formats::read_file(r.out / (std::string(n) + ".dgwf"));
    const WarpField f = formats::decode_warp_field(bytes);
    CHECK(formats::encode_warp_field(f) == bytes);
    CHECK(f.height == 64);
  }

  // plain image directory, no preprocessing
  fs::create_directories(d.path / "imgs");
  for (const char* n : {"a", "b", "c"})
    fs::copy_file(g.out / "00001" / "img.png", d.path / "imgs" / (std::string(n) + ".png"));
  r.input = d.path / "imgs";
  r.out = d.path / "rect2";
  r.gt_mask = false;
  r.preprocess = false;
  r.save_flow = false;
  const auto rm = cli::cmd_rectify(r);
  CHECK(rm.outputs.size() == 3);
  CHECK(fs::exists(r.out / "c.png"));

  r.model = d.path / "missing.dgck";
  CHECK_THROWS_AS(cli::cmd_rectify(r), Error);

  cli::EvalOptions e;
  e.pred = d.path / "rect";
  e.gt = g.out;
  e.out = d.path / "ev" / "report.json";
  e.csv = true;
  const json rep = cli::cmd_eval(e);
  REQUIRE(rep["images"].size() == 3);
  for (const json& row : rep["images"]) {
    CHECK(row["ms_ssim"].get<double>() <= 1.0);
    CHECK(row["ld"].get<double>() >= 0.0);
    CHECK(row["ld_method"] == "gt_flow");
    CHECK(row["ed"].is_null());
    CHECK(row.contains("text_reason"));
  }
  CHECK(fs::exists(d.path / "ev" / "report.csv"));
  const json back = json::parse(formats::read_text(e.out));
  CHECK(back == rep);

  // the reference itself: perfect MS-SSIM, LD at the matcher's noise floor
  fs::create_directories(d.path / "same");
  fs::copy_file(g.out / "00002" / "flat.png", d.path / "same" / "00002.png");
  fs::create_directories(d.path / "gt1" / "00002");
  fs::copy_file(g.out / "00002" / "flat.png", d.path / "gt1" / "00002" / "flat.png");
  e.pred = d.path / "same";
  e.gt = d.path / "gt1";
  e.out.clear();
  const json self = cli::cmd_eval(e);
  CHECK(self["images"][0]["ms_ssim"].get<double>() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(self["images"][0]["ld_method"] == "dense_match");
  CHECK(self["images"][0]["ld"].get<double>() <= 0.5);

  e.pred = d.path / "imgs";
  e.gt = g.out;
  CHECK_THROWS_AS(cli::cmd_eval(e), Error);  // names do not match
}

TEST_CASE("report rendering") {
  TempDir d("rep");
  const json rep = {{"images", {{{"name", "a"}, {"ms_ssim", 0.5}, {"ld", 4.0}, {"ed", nullptr}, {"cer", nullptr}},
                                {{"name", "b"}, {"ms_ssim", 0.7}, {"ld", 2.0}, {"ed", nullptr}, {"cer", nullptr}}}},
                    {"mean", {{"ms_ssim", 0.6}, {"ld", 3.0}, {"ed", nullptr}, {"cer", nullptr}}}};
  json other = rep;
  other["mean"]["ld"] = 2.5;
  formats::write_file_atomic(d.path / "r1.json", rep.dump());
  formats::write_file_atomic(d.path / "r2.json", other.dump());

  cli::ReportOptions o{d.path / "r1.json", d.path / "r2.json", d.path / "out1"};
  const auto files = cli::cmd_report(o);
  CHECK(files.front() == "summary.md");
  const std::string md = formats::read_text(d.path / "out1" / "summary.md");
  CHECK(md.find("| ld | 3.0000 | 2.5000 | -0.5000 |") != std::string::npos);
  for (const auto& f : files) CHECK(fs::file_size(d.path / "out1" / f) > 0);
  o.out = d.path / "out2";
  cli::cmd_report(o);
  CHECK(tree(d.path / "out1") == tree(d.path / "out2"));

  formats::write_file_atomic(d.path / "empty.json", R"({"images": []})");
  cli::cmd_report({d.path / "empty.json", std::nullopt, d.path / "out3"});
  CHECK(formats::read_text(d.path / "out3" / "summary.md").find("rows: 0") != std::string::npos);

  const json abl = json::array({{{"name", "none"}, {"seed", 0}, {"ld", 3.0}, {"ms_ssim", 0.4}},
                                {{"name", "none"}, {"seed", 1}, {"ld", 5.0}, {"ms_ssim", 0.6}},
                                {{"name", "3d+text"}, {"seed", 0}, {"ld", 2.0}, {"ms_ssim", 0.7}}});
  formats::write_file_atomic(d.path / "abl.json", abl.dump());
  cli::cmd_report({d.path / "abl.json", std::nullopt, d.path / "out4"});
  const std::string amd = formats::read_text(d.path / "out4" / "summary.md");
  CHECK(amd.find("| none | 0.5000 | 4.0000 |") != std::string::npos);

  formats::write_file_atomic(d.path / "bad.json", "{not json");
  CHECK_THROWS_AS(cli::cmd_report({d.path / "bad.json", std::nullopt, d.path / "out5"}), Error);
  CHECK_THROWS_AS(cli::cmd_report({d.path / "r1.json", d.path / "abl.json", d.path / "out6"}), Error);
}

TEST_CASE("svg chart") {
  const std::string s = cli::svg_bar_chart("t<1>", {"a", "b"}, {1.0, 3.0});
  CHECK(s.find("t&lt;1&gt;") != std::string::npos);
  CHECK(s == cli::svg_bar_chart("t<1>", {"a", "b"}, {1.0, 3.0}));
  std::size_t bars = 0;
  for (std::size_t p = s.find("fill=\"#4a78a8\""); p != std::string::npos; p = s.find("fill=\"#4a78a8\"", p + 1)) ++bars;
  CHECK(bars == 2);
  CHECK_THROWS_AS(cli::svg_bar_chart("x", {"a"}, {}), Error);
}
