// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

// busaug command-line tool.
//
//   busaug run-all --config exp.txt --seed 7 --out runs/demo
//   busaug run-arm --arm sd_img2img --out runs/demo
//   busaug report --run runs/demo
//
// Exit status: 0 ok, 1 usage, 2 config, 3 data, 4 runtime.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "busaug/adapters.hpp"
#include "busaug/config.hpp"
#include "busaug/data.hpp"
#include "busaug/diffusion.hpp"
#include "busaug/error.hpp"
#include "busaug/eval.hpp"
#include "busaug/pipeline.hpp"
#include "busaug/report.hpp"

namespace fs = std::filesystem;
using namespace busaug;

namespace {

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "experiment config file (key = value)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "root seed (overrides the config)");
  cmd->add_option("--out", o.out, "output directory (default: $BUSAUG_RUN_DIR or runs/, plus a timestamp)");
  cmd->add_option("--set", o.overrides, "extra config assignment key=value (repeatable)");
}

config::ExperimentConfig load_config(const CommonOptions& o) {
  config::ConfigTree tree = o.config_path.empty() ? config::ConfigTree() : config::parse_config(o.config_path);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    tree.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) tree.set("seed", std::to_string(*o.seed));
  return config::to_experiment(tree);
}

fs::path run_directory(const CommonOptions& o) {
  if (!o.out.empty()) return o.out;
  const char* env = std::getenv("BUSAUG_RUN_DIR");
  const fs::path root = env && *env ? fs::path(env) : fs::path("runs");
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
  return root / stamp;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw RuntimeError("cannot write '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string format_counts(const data::ClassCounts& c) {
  return "benign=" + std::to_string(c[0]) + " malignant=" + std::to_string(c[1]) + " normal=" + std::to_string(c[2]);
}

void print_metrics(const eval::MetricsReport& r) {
  std::printf("accuracy %.3f  f1 %.3f  auc %.3f  ppv %.3f  recall %.3f", r.accuracy, r.f1_macro,
              r.auc_roc_ovr_macro, r.ppv_macro, r.recall_macro);
  if (r.fid) std::printf("  fid %.2f", *r.fid);
  std::printf("\n");
}

/// Context over an existing run directory: its config echo, split dataset,
/// diffusion checkpoint and token, whichever exist.
std::unique_ptr<pipeline::ExperimentContext> open_run(const fs::path& run) {
  const config::ExperimentConfig cfg = config::to_experiment(config::parse_config(run / "config.txt"));
  auto ctx_ptr = std::make_unique<pipeline::ExperimentContext>(cfg);
  auto& ctx = *ctx_ptr;
  const fs::path manifest = run / "data" / "manifest.jsonl";
  if (!fs::exists(manifest)) throw DataError("run directory has no data/manifest.jsonl: " + run.string());
  ctx.set_dataset(data::read_manifest(manifest));
  for (auto arm : pipeline::kAllArms) {
    const fs::path ckpt = run / std::string(pipeline::to_string(arm)) / "checkpoints" / "diffusion.ckpt";
    if (fs::exists(ckpt)) {
      ctx.set_lora_checkpoint(diffusion::DiffusionCheckpoint::load(ckpt, cfg.diffusion.unet));
      break;
    }
  }
  for (auto arm : pipeline::kAllArms) {
    const fs::path token = run / std::string(pipeline::to_string(arm)) / "checkpoints" / "token.bin";
    if (fs::exists(token)) {
      ctx.set_token(adapters::load_token(token));
      break;
    }
  }
  return ctx_ptr;
}

data::ClassLabel label_option(const std::string& text) {
  try {
    return data::parse_label(text);
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid diffusion augmentation for breast-ultrasound-style images"};
  app.require_subcommand(1);
  CommonOptions common;

  auto* make_phantoms = app.add_subcommand("make-phantoms", "generate and split the phantom dataset");
  add_common(make_phantoms, common);

  std::string busi_root;
  auto* ingest = app.add_subcommand("ingest-busi", "ingest a BUSI directory and split it");
  add_common(ingest, common);
  ingest->add_option("--root", busi_root, "BUSI root with benign/ malignant/ normal/")->required();

  auto* train_diff = app.add_subcommand("train-diffusion", "pretrain the denoiser and LoRA fine-tune it");
  add_common(train_diff, common);

  std::string checkpoint_path;
  auto* train_ti = app.add_subcommand("train-ti", "learn the TI token on a LoRA checkpoint");
  add_common(train_ti, common);
  train_ti->add_option("--checkpoint", checkpoint_path, "diffusion checkpoint")->required()->check(CLI::ExistingFile);

  std::string token_path;
  std::string arm_name = "sd";
  std::string label_name;
  int count = 1;
  auto* generate = app.add_subcommand("generate", "hybrid text2img/img2img generation for one label");
  add_common(generate, common);
  generate->add_option("--checkpoint", checkpoint_path, "diffusion checkpoint")->required()->check(CLI::ExistingFile);
  generate->add_option("--token", token_path, "TI token file")->check(CLI::ExistingFile);
  generate->add_option("--arm", arm_name, "generation variant: sd, sd_img2img, sd_ti, sd_ti_img2img");
  generate->add_option("--label", label_name, "benign, malignant or normal")->required();
  generate->add_option("--count", count, "number of images")->check(CLI::NonNegativeNumber);

  std::string manifest_path;
  auto* augment = app.add_subcommand("augment", "balance a manifest's train split with synthetic images");
  add_common(augment, common);
  augment->add_option("--manifest", manifest_path, "input manifest")->required()->check(CLI::ExistingFile);
  augment->add_option("--checkpoint", checkpoint_path, "diffusion checkpoint")->required()->check(CLI::ExistingFile);
  augment->add_option("--token", token_path, "TI token file")->check(CLI::ExistingFile);
  augment->add_option("--arm", arm_name, "generation variant: sd, sd_img2img, sd_ti, sd_ti_img2img");

  auto* train_cls = app.add_subcommand("train-classifier", "train the classifier on a manifest's train split");
  add_common(train_cls, common);
  train_cls->add_option("--manifest", manifest_path, "manifest")->required()->check(CLI::ExistingFile);

  std::string classifier_path;
  std::string split_name = "val";
  auto* evaluate = app.add_subcommand("evaluate", "classification metrics on a manifest split");
  add_common(evaluate, common);
  evaluate->add_option("--classifier", classifier_path, "classifier file")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--manifest", manifest_path, "manifest")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--split", split_name, "train or val")->check(CLI::IsMember({"train", "val"}));

  auto* run_arm = app.add_subcommand("run-arm", "run one experiment arm");
  add_common(run_arm, common);
  run_arm->add_option("--arm", arm_name, "baseline, sd, sd_img2img, sd_ti or sd_ti_img2img")->required();

  auto* run_all = app.add_subcommand("run-all", "run all five arms and render the results table and grid");
  add_common(run_all, common);

  std::string run_path;
  auto* grid = app.add_subcommand("grid", "re-export the class x method image grid of a run");
  grid->add_option("--run", run_path, "run directory")->required()->check(CLI::ExistingDirectory);
  grid->add_option("--out", common.out, "output PNG (default: <run>/grid.png)");

  auto* report_cmd = app.add_subcommand("report", "render the results table from a run's arm reports");
  report_cmd->add_option("--run", run_path, "run directory")->required()->check(CLI::ExistingDirectory);
  report_cmd->add_option("--out", common.out, "also write the markdown table here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (make_phantoms->parsed() || ingest->parsed()) {
      if (ingest->parsed()) {
        common.overrides.push_back("data.source=busi");
        common.overrides.push_back("data.root=" + busi_root);
      }
      const auto cfg = load_config(common);
      const fs::path out = run_directory(common);
      pipeline::ExperimentContext ctx(cfg, out);
      const auto& m = ctx.dataset();
      for (const auto& w : m.warnings) std::cerr << "warning: " << w << "\n";
      std::printf("%s\n  train %s\n  val   %s\n", (out / "data" / "manifest.jsonl").string().c_str(),
                  format_counts(m.counts(data::Split::kTrain)).c_str(),
                  format_counts(m.counts(data::Split::kVal)).c_str());
    } else if (train_diff->parsed()) {
      const auto cfg = load_config(common);
      const fs::path out = run_directory(common);
      pipeline::ExperimentContext ctx(cfg, out);
      const auto& ckpt = ctx.lora_checkpoint();
      ckpt.save(out / "diffusion.ckpt");
      const nlohmann::json losses = {{"pretrain", ctx.pretrain_losses()}, {"lora", ckpt.epoch_losses}};
      write_text(out / "losses.json", losses.dump(2) + "\n");
      std::printf("%s\n", (out / "diffusion.ckpt").string().c_str());
    } else if (train_ti->parsed()) {
      const auto cfg = load_config(common);
      const fs::path out = run_directory(common);
      pipeline::ExperimentContext ctx(cfg, out);
      ctx.set_lora_checkpoint(diffusion::DiffusionCheckpoint::load(checkpoint_path, cfg.diffusion.unet));
      const auto& enc = ctx.ti_encoder();
      adapters::save_token(out / "token.bin", enc.token_embedding(cfg.ti.token));
      std::printf("%s\n", (out / "token.bin").string().c_str());
    } else if (generate->parsed() || augment->parsed()) {
      const auto arm = pipeline::parse_arm(arm_name);
      if (!pipeline::is_augmented(arm)) throw UsageError("--arm must be a generation variant, not baseline");
      const auto cfg = load_config(common);
      const fs::path out = run_directory(common);
      pipeline::ExperimentContext ctx(cfg, out);
      ctx.set_lora_checkpoint(diffusion::DiffusionCheckpoint::load(checkpoint_path, cfg.diffusion.unet));
      const auto gen = ctx.generation_config(arm);
      if (gen.use_ti) {
        if (token_path.empty()) throw UsageError("--arm " + arm_name + " needs --token");
        ctx.set_token(adapters::load_token(token_path));
      }
      const auto& enc = gen.use_ti ? ctx.ti_encoder() : ctx.merged_encoder();
      if (generate->parsed()) {
        const auto label = label_option(label_name);
        const auto images = pipeline::hybrid_generate(ctx.merged_model(), enc, ctx.schedule(), label, count, gen);
        nlohmann::json records = nlohmann::json::array();
        for (std::size_t i = 0; i < images.images.size(); ++i) {
          char name[96];
          std::snprintf(name, sizeof(name), "%s_%05llu.png", label_name.c_str(),
                        static_cast<unsigned long long>(images.records[i].seed));
          write_png(out / name, images.images[i]);
          records.push_back(images.records[i].to_json());
        }
        write_text(out / "records.json", records.dump(2) + "\n");
        std::printf("%zu images in %s\n", images.images.size(), out.string().c_str());
      } else {
        const data::Manifest input = data::read_manifest(manifest_path);
        auto result = pipeline::augment_manifest(input, ctx.merged_model(), enc, ctx.schedule(),
                                                 cfg.generate.target_per_class, gen, out / "images");
        result.run.arm = arm_name;
        data::write_manifest(out / "manifest.jsonl", result.manifest);
        write_text(out / "augmentation.json", result.run.to_json().dump(2) + "\n");
        std::printf("%s\n  train %s\n", (out / "manifest.jsonl").string().c_str(),
                    format_counts(result.manifest.counts(data::Split::kTrain)).c_str());
      }
    } else if (train_cls->parsed()) {
      const auto cfg = load_config(common);
      const fs::path out = run_directory(common);
      fs::create_directories(out);
      const auto model = eval::train_classifier(data::read_manifest(manifest_path), cfg.classifier);
      model.save(out / "classifier.bin");
      std::printf("%s\n", (out / "classifier.bin").string().c_str());
    } else if (evaluate->parsed()) {
      const fs::path out = run_directory(common);
      const auto model = eval::ClassifierModel::load(classifier_path);
      const auto split = split_name == "train" ? data::Split::kTrain : data::Split::kVal;
      const auto report = eval::evaluate_classifier(model, data::read_manifest(manifest_path), split);
      write_text(out / "report.json", report.to_json().dump(2) + "\n");
      print_metrics(report);
    } else if (run_arm->parsed()) {
      const auto arm = pipeline::parse_arm(arm_name);
      const auto cfg = load_config(common);
      pipeline::ExperimentContext ctx(cfg, run_directory(common));
      const auto result = pipeline::run_experiment(arm, ctx);
      std::printf("%s: ", std::string(pipeline::arm_title(arm)).c_str());
      print_metrics(result.report);
    } else if (run_all->parsed()) {
      const auto cfg = load_config(common);
      const fs::path out = run_directory(common);
      const auto result = pipeline::run_all(cfg, out);
      std::printf("%s\nrun directory: %s\n", result.table.c_str(), out.string().c_str());
    } else if (grid->parsed()) {
      auto ctx = open_run(run_path);
      const fs::path out = common.out.empty() ? fs::path(run_path) / "grid.png" : fs::path(common.out);
      report::export_grid(pipeline::grid_columns(*ctx), {data::kAllLabels.begin(), data::kAllLabels.end()}, out);
      std::printf("%s\n", out.string().c_str());
    } else if (report_cmd->parsed()) {
      std::vector<eval::MetricsReport> reports;
      for (auto arm : pipeline::kAllArms) {
        const fs::path p = fs::path(run_path) / std::string(pipeline::to_string(arm)) / "report.json";
        try {
          reports.push_back(eval::MetricsReport::from_json(nlohmann::json::parse(read_text(p))));
        } catch (const nlohmann::json::exception& e) {
          throw DataError("malformed report '" + p.string() + "': " + e.what());
        }
      }
      const auto rendered = report::render_report(reports);
      if (!common.out.empty()) write_text(common.out, rendered.markdown);
      std::printf("%s", rendered.markdown.c_str());
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kRuntime);
  }
  return 0;
}
