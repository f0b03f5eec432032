#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include "busaug/config.hpp"
#include "busaug/error.hpp"
#include "busaug/report.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace busaug;
using data::ClassLabel;

namespace {

eval::MetricsReport row(double acc, std::optional<double> fid) {
  eval::MetricsReport r;
  r.accuracy = acc;
  r.f1_macro = acc - 0.01;
  r.auc_roc_ovr_macro = 0.95;
  r.ppv_macro = acc - 0.02;
  r.recall_macro = acc;
  r.fid = fid;
  return r;
}

int exit_code(const std::string& args) {
  const std::string cmd = std::string(BUSAUG_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config defaults and overrides") {
  const config::ConfigTree empty = config::parse_config_text("");
  CHECK(empty == config::ConfigTree());
  const auto exp = config::to_experiment(empty);
  CHECK(exp.generate.strength == doctest::Approx(0.3));
  CHECK(exp.data.image_size == 64);
  CHECK(exp.diffusion.timesteps == 200);

  const auto set = config::to_experiment(config::parse_config_text("# tuned\ngenerate.strength = 0.45\nseed = 9\n"));
  CHECK(set.generate.strength == doctest::Approx(0.45));
  CHECK(set.seed == 9);

  CHECK_THROWS_AS(config::parse_config_text("generate.strength = 1.5"), ConfigError);
  CHECK_THROWS_AS(config::parse_config_text("generate.strenght = 0.3"), ConfigError);
  CHECK_THROWS_AS(config::parse_config_text("seed = banana"), ConfigError);
  CHECK_THROWS_AS(config::parse_config_text("diffusion.beta_min = 0.5\ndiffusion.beta_max = 0.1"), ConfigError);
  CHECK_THROWS_AS(config::parse_config(std::filesystem::path("/nonexistent/busaug.cfg")), ConfigError);
}

TEST_CASE("config echo round-trips") {
  config::ConfigTree tree;
  tree.set("generate.strength", "0.25");
  tree.set("diffusion.channels", "8,16");
  tree.set("ti.token", "<scan>");
  CHECK(config::parse_config_text(tree.echo()) == tree);
  CHECK(config::parse_config_text(config::ConfigTree().echo()) == config::ConfigTree());
  for (const auto& key : config::schema()) CHECK(tree.values().count(key.key) == 1);
}

TEST_CASE("results table") {
  std::vector<eval::MetricsReport> rows = {row(0.904, 99.0), row(0.880, 45.97), row(0.898, 38.34),
                                           row(0.880, 45.66), row(0.901, 37.18)};
  const auto out = report::render_report(rows);
  const std::string& md = out.markdown;
  CHECK(md.find("| Baseline (Original Images) | **0.904** |") != std::string::npos);
  CHECK(md.find("**37.18**") != std::string::npos);
  CHECK(md.find("99.00") == std::string::npos);
  // Baseline row ends with its FID placeholder.
  const auto base = md.find("| Baseline (Original Images) |");
  CHECK(md.substr(base, md.find('\n', base) - base).ends_with(" - |"));
  CHECK(out.json["rows"][0]["FID"].is_null());
  CHECK(std::count(md.begin(), md.end(), '\n') == 7);

  // Ties at display precision are all marked.
  rows[2].accuracy = 0.9041;
  rows[4].accuracy = 0.9039;
  const auto tied = report::render_report(rows).markdown;
  std::size_t bold = 0;
  for (auto p = tied.find("**0.904**"); p != std::string::npos; p = tied.find("**0.904**", p + 1)) ++bold;
  CHECK(bold == 3);

  rows.pop_back();
  CHECK_THROWS_AS(report::render_report(rows), DataError);
}

TEST_CASE("composite grid") {
  const std::vector<ClassLabel> labels(data::kAllLabels.begin(), data::kAllLabels.end());
  std::vector<report::GridColumn> cols;
  int k = 0;
  for (const char* name : {"REAL", "SD", "SD+I2I", "SD+TI", "SD+TI+I2I"}) {
    report::GridColumn col{name, {}};
    for (ClassLabel label : labels) col.cells[label].push_back(Image(8, 8, -0.9 + 0.1 * k++));
    cols.push_back(col);
  }
  const Image grid = report::compose_grid(cols, labels);
  // Every (label, method) image appears in full.
  for (int v = 0; v < k; ++v) {
    const double value = -0.9 + 0.1 * v;
    const auto n = std::count(grid.pixels.begin(), grid.pixels.end(), value);
    CHECK(n >= 64);
  }
  CHECK(bitwise_equal(grid, report::compose_grid(cols, labels)));

  const Image one = report::compose_grid({cols[0]}, {ClassLabel::kNormal});
  CHECK(one.width < grid.width);
  CHECK(one.height < grid.height);

  cols[3].cells[ClassLabel::kMalignant].clear();
  try {
    report::compose_grid(cols, labels);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("malignant") != std::string::npos);
    CHECK(std::string(e.what()).find("SD+TI") != std::string::npos);
  }
}

TEST_CASE("cli exit codes") {
  busaug::testing::TempDir dir("cli");
  CHECK(exit_code("--help") == 0);
  CHECK(exit_code("") == 1);
  CHECK(exit_code("no-such-command") == 1);
  CHECK(exit_code("run-arm --arm sd+ti --out " + (dir.path() / "a").string()) == 1);
  CHECK(exit_code("make-phantoms --set generate.strength=2 --out " + (dir.path() / "b").string()) == 2);
  std::ofstream(dir.path() / "bad.cfg") << "classifier.epochs = -3\n";
  CHECK(exit_code("make-phantoms --config " + (dir.path() / "bad.cfg").string() + " --out " +
                  (dir.path() / "c").string()) == 2);
  CHECK(exit_code("ingest-busi --root " + (dir.path() / "missing").string() + " --out " +
                  (dir.path() / "d").string()) == 3);
  CHECK(exit_code("make-phantoms --set data.benign=3 --set data.malignant=2 --set data.normal=2 "
                  "--set data.image_size=16 --out " + (dir.path() / "e").string()) == 0);
  CHECK(std::filesystem::exists(dir.path() / "e" / "data" / "manifest.jsonl"));
}
