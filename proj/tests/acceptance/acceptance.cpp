// Acceptance checks: one PASS/FAIL line per criterion.
//
//   busaug_acceptance [--work DIR] [--only 1,2,...] [--report FILE]
//
// Criteria 8 and 9 drive the busaug CLI end to end; the sampler determinism
// check re-runs this binary in --sampler-digest mode as a separate process.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "CLI11.hpp"
#include "busaug/adapters.hpp"
#include "busaug/data.hpp"
#include "busaug/diffusion.hpp"
#include "busaug/eval.hpp"
#include "busaug/pipeline.hpp"
#include "helpers.hpp"
#include "json.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace busaug;
using busaug::testing::random_image;
using busaug::testing::random_vector;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

double rel_error(double numeric, double analytic) {
  return std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Runs a shell command, returning its exit status and captured stdout.
std::pair<int, std::string> run_command(const std::string& cmd) {
  std::string out;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {-1, out};
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) out += buf.data();
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

// 1 ------------------------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto start = Clock::now();
  const auto s = diffusion::make_schedule();
  const double h = 1e-5;

  diffusion::DenoiserModel model(busaug::testing::tiny_unet(), 21);
  const auto params = model.store().scalar_count();
  if (params > 500) return {false, "model has " + std::to_string(params) + " parameters"};
  Rng rng(4);
  for (auto& [name, p] : model.store())
    if (p.value.cwiseAbs().maxCoeff() == 0.0)
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = 0.3 * rng.normal();
  const std::vector<Image> batch{random_image(8, rng)};
  const std::vector<nn::Vector> conds{random_vector(4, rng)};
  const std::uint64_t seed = 77;

  model.store().zero_grad();
  (void)diffusion::denoising_loss_grad(model, batch, conds, s, seed);
  double worst_model = 0.0;
  for (auto& [name, p] : model.store()) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double orig = p.value.data()[i];
      p.value.data()[i] = orig + h;
      const double up = diffusion::denoising_loss(model, batch, conds, s, seed);
      p.value.data()[i] = orig - h;
      const double down = diffusion::denoising_loss(model, batch, conds, s, seed);
      p.value.data()[i] = orig;
      worst_model = std::max(worst_model, rel_error((up - down) / (2 * h), p.grad.data()[i]));
    }
  }

  // Textual-inversion embedding through the frozen encoder and denoiser.
  diffusion::DenoiserModel frozen(busaug::testing::tiny_unet(), 6);
  adapters::PromptEncoder enc(adapters::PromptEncoder::prompt_vocabulary(), {8, 4}, 5);
  enc.register_token("<ultrasound>", "image");
  const std::string param = adapters::PromptEncoder::token_param_name("<ultrasound>");
  const std::string prompt = "<ultrasound> image of a benign breast lesion";
  const std::vector<Image> ti_batch{random_image(8, rng)};
  nn::TrainableScope model_scope(frozen.store(), diffusion::select_nothing());
  nn::TrainableScope text_scope(enc.store(), [&](std::string_view n) { return n == param; });
  enc.store().zero_grad();
  adapters::EncodeCache cache;
  const std::vector<nn::Vector> ti_conds{enc.encode(prompt, &cache)};
  const auto lg = diffusion::denoising_loss_grad(frozen, ti_batch, ti_conds, s, 19);
  enc.backward(cache, lg.cond_grads[0]);
  const nn::Matrix analytic = enc.store().get(param).grad;
  auto loss_at = [&] {
    const std::vector<nn::Vector> c{enc.encode(prompt)};
    return diffusion::denoising_loss(frozen, ti_batch, c, s, 19);
  };
  double worst_ti = 0.0;
  nn::Matrix& v = enc.store().get(param).value;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double orig = v.data()[i];
    v.data()[i] = orig + h;
    const double up = loss_at();
    v.data()[i] = orig - h;
    const double down = loss_at();
    v.data()[i] = orig;
    worst_ti = std::max(worst_ti, rel_error((up - down) / (2 * h), analytic.data()[i]));
  }

  const double elapsed = seconds_since(start);
  const bool pass = worst_model < 1e-4 && worst_ti < 1e-4 && elapsed < 60.0;
  return {pass, std::to_string(params) + " params, max rel err loss " + fmt(worst_model) + ", TI " + fmt(worst_ti) +
                    ", " + fmt(elapsed) + " s"};
}

// 2 ------------------------------------------------------------------------------------------

bool is_adapter(const std::string& name) { return name.ends_with(".lora_A") || name.ends_with(".lora_B"); }

Outcome lora_contracts() {
  const auto start = Clock::now();
  diffusion::DenoiserModel base(busaug::testing::small_unet(16), 4);
  adapters::PromptEncoder enc = busaug::testing::small_encoder();

  diffusion::DenoiserModel adapted = base;
  adapters::PromptEncoder adapted_enc = enc;
  adapters::attach_lora(adapted, adapters::default_lora_targets(adapted), 2, 4.0, 1);
  adapters::attach_lora(adapted_enc, adapters::default_lora_targets(adapted_enc), 2, 4.0, 2);
  Rng rng(2);
  bool transparent = true;
  for (int trial = 0; trial < 20; ++trial) {
    const Image x = random_image(16, rng);
    const nn::Vector c = random_vector(8, rng);
    const int t = static_cast<int>(rng.uniform_int(1, 200));
    transparent = transparent && bitwise_equal(adapted.predict_eps(x, t, c), base.predict_eps(x, t, c));
  }
  const std::string p = "ultrasound image of a malignant breast lesion";
  const nn::Vector ca = adapted_enc.encode(p), cb = enc.encode(p);
  transparent = transparent && std::memcmp(ca.data(), cb.data(), sizeof(double) * ca.size()) == 0;

  const auto manifest = busaug::testing::phantom_split({6, 6, 6}, 16, 3);
  diffusion::TrainConfig tc;
  tc.epochs = 3;
  tc.learning_rate = 5e-3;
  tc.trainable_selector = diffusion::select_lora_only();
  tc.selector_description = "lora";
  const auto trained = diffusion::train_diffusion(adapted, manifest, adapted_enc, diffusion::make_schedule(), tc);
  bool frozen = true;
  bool moved = false;
  for (const auto& [name, prm] : adapted.store()) {
    const auto& after = trained.model.store().get(name).value;
    const bool same = prm.value.size() == after.size() &&
                      std::memcmp(prm.value.data(), after.data(), sizeof(double) * after.size()) == 0;
    if (is_adapter(name)) moved = moved || !same;
    else frozen = frozen && same;
  }
  for (const auto& [name, prm] : adapted_enc.store()) {
    if (is_adapter(name)) continue;
    const auto& after = trained.encoder.store().get(name).value;
    frozen = frozen && std::memcmp(prm.value.data(), after.data(), sizeof(double) * after.size()) == 0;
  }

  diffusion::DenoiserModel merged = trained.model;
  adapters::merge_lora(merged);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Image x = random_image(16, rng);
    const nn::Vector c = random_vector(8, rng);
    const int t = static_cast<int>(rng.uniform_int(1, 200));
    const Image u = trained.model.predict_eps(x, t, c);
    const Image m = merged.predict_eps(x, t, c);
    for (std::size_t i = 0; i < u.size(); ++i) worst = std::max(worst, std::abs(u.pixels[i] - m.pixels[i]));
  }

  const double elapsed = seconds_since(start);
  const bool pass = transparent && frozen && moved && worst < 1e-5 && elapsed < 60.0;
  return {pass, std::string("zero-init ") + (transparent ? "bit-exact" : "DIFFERS") + ", base " +
                    (frozen ? "unchanged" : "CHANGED") + (moved ? "" : ", adapters did not train") +
                    ", merge max diff " + fmt(worst) + ", " + fmt(elapsed) + " s"};
}

// 3 ------------------------------------------------------------------------------------------

/// Sampler outputs for a fixed model, prompt and seeds, as digests.
std::vector<std::string> sampler_digests() {
  const diffusion::DenoiserModel model(busaug::testing::small_unet(16), 8);
  const auto enc = busaug::testing::small_encoder();
  const auto s = diffusion::make_schedule();
  const nn::Vector c = enc.encode(data::prompt_for_label(data::ClassLabel::kBenign));
  std::vector<std::string> out;
  for (std::uint64_t seed : {1u, 2u, 12345u}) {
    const Image t2i = diffusion::text2img_sample(model, c, s, {50, 1.0}, seed);
    out.push_back(pipeline::image_digest(t2i));
    out.push_back(pipeline::image_digest(diffusion::img2img_sample(model, t2i, c, s, 0.3, {50, 1.0}, seed)));
  }
  return out;
}

Outcome sampler_boundaries(const std::string& self) {
  const diffusion::DenoiserModel model(busaug::testing::small_unet(16), 8);
  const auto enc = busaug::testing::small_encoder();
  const auto s = diffusion::make_schedule();
  Rng rng(5);
  bool identity = true, full = true;
  for (int trial = 0; trial < 5; ++trial) {
    const Image src = random_image(16, rng);
    const nn::Vector c = enc.encode(data::prompt_for_label(data::kAllLabels[trial % 3]));
    const std::uint64_t seed = rng.next_u64();
    identity = identity && bitwise_equal(diffusion::img2img_sample(model, src, c, s, 0.0, {50, 1.0}, seed), src);
    full = full && bitwise_equal(diffusion::img2img_sample(model, src, c, s, 1.0, {50, 1.0}, seed),
                                 diffusion::text2img_sample(model, c, s, {50, 1.0}, seed));
  }

  std::string local;
  for (const auto& d : sampler_digests()) local += d + "\n";
  const auto a = run_command("'" + self + "' --sampler-digest");
  const auto b = run_command("'" + self + "' --sampler-digest");
  const bool processes = a.first == 0 && b.first == 0 && a.second == b.second && a.second == local;

  return {identity && full && processes,
          std::string("strength 0 ") + (identity ? "identity" : "NOT identity") + ", strength 1 " +
              (full ? "== text2img" : "!= text2img") + ", two processes " +
              (processes ? "agree on 6 digests" : "DISAGREE")};
}

// 4 ------------------------------------------------------------------------------------------

eval::Matrix random_matrix(int rows, int cols, Rng& rng) {
  eval::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

Outcome fid_oracles() {
  Rng rng(3);
  double self = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto st = eval::fid_stats(random_matrix(40, 8, rng));
    self = std::max(self, eval::fid(st, st));
  }

  const eval::FIDStats a{eval::Vector::Zero(1), eval::Matrix::Identity(1, 1), 100};
  const eval::FIDStats b{eval::Vector::Constant(1, 2.0), eval::Matrix::Identity(1, 1), 100};
  const double uni = eval::fid(a, b);

  int bad_sqrt = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int d = static_cast<int>(rng.uniform_int(1, 32));
    const eval::Matrix x = random_matrix(d, static_cast<int>(rng.uniform_int(1, 2 * d)), rng);
    const eval::Matrix m = x * x.transpose();
    const eval::Matrix r = eval::matrix_sqrt_psd(m);
    if (!((r * r - m).cwiseAbs().maxCoeff() < 1e-6 * (1.0 + m.cwiseAbs().maxCoeff()))) ++bad_sqrt;
  }

  double rotation = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const int d = 6;
    const eval::Matrix fa = random_matrix(50, d, rng);
    const eval::Matrix fb = random_matrix(60, d, rng) * 1.5;
    Eigen::HouseholderQR<eval::Matrix> qr(random_matrix(d, d, rng));
    const eval::Matrix q = qr.householderQ();
    const double plain = eval::fid(eval::fid_stats(fa), eval::fid_stats(fb));
    const double rotated = eval::fid(eval::fid_stats(fa * q), eval::fid_stats(fb * q));
    rotation = std::max(rotation, std::abs(plain - rotated));
  }

  const bool pass = self < 1e-6 && std::abs(uni - 4.0) < 1e-6 && bad_sqrt == 0 && rotation < 1e-4;
  return {pass, "fid(s,s) max " + fmt(self) + ", univariate " + fmt(uni, 12) + ", sqrt failures " +
                    std::to_string(bad_sqrt) + "/100, rotation drift " + fmt(rotation)};
}

// 5 ------------------------------------------------------------------------------------------

Outcome metric_oracles() {
  Rng rng(2024);
  double count_err = 0.0, auc_err = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 40));
    eval::Matrix probs(n, 3);
    std::vector<int> labels(n);
    const bool coarse = trial % 2 == 0;
    for (int i = 0; i < n; ++i) {
      double sum = 0.0;
      for (int k = 0; k < 3; ++k) {
        probs(i, k) = coarse ? static_cast<double>(rng.uniform_int(0, 3)) : rng.uniform();
        sum += probs(i, k);
      }
      if (sum == 0.0) probs.row(i).setConstant(1.0 / 3.0);
      else probs.row(i) /= sum;
      labels[i] = static_cast<int>(rng.uniform_int(0, 2));
    }
    const auto r = eval::compute_metrics(probs, labels);
    const auto ref = busaug::testing::brute_force(probs, labels);
    count_err = std::max({count_err, std::abs(r.accuracy - ref.accuracy), std::abs(r.ppv_macro - ref.ppv),
                          std::abs(r.recall_macro - ref.recall), std::abs(r.f1_macro - ref.f1)});
    if (ref.auc_classes > 0) auc_err = std::max(auc_err, std::abs(r.auc_roc_ovr_macro - ref.auc));
  }
  return {count_err < 1e-9 && auc_err < 1e-6,
          "200 instances, counting max err " + fmt(count_err) + ", AUC max err " + fmt(auc_err)};
}

// 6, 7 -----------------------------------------------------------------------------------------

std::string counts_text(const data::ClassCounts& c) {
  return std::to_string(c[0]) + "/" + std::to_string(c[1]) + "/" + std::to_string(c[2]);
}

Outcome split_reproduction() {
  data::Manifest m;
  m.image_size = 8;
  const data::ClassCounts totals = {437, 210, 133};
  for (data::ClassLabel label : data::kAllLabels)
    for (int i = 0; i < totals[data::index_of(label)]; ++i) {
      data::Sample s;
      s.path = std::string(data::to_string(label)) + "_" + std::to_string(i) + ".png";
      s.label = label;
      s.prompt = data::prompt_for_label(label);
      m.samples.push_back(s);
    }
  const auto split = data::split_stratified(m, 0.8, 11);
  const auto train = split.counts(data::Split::kTrain);
  const auto val = split.counts(data::Split::kVal);
  const int total_train = train[0] + train[1] + train[2];
  const bool pass = train == data::ClassCounts{349, 168, 106} && val == data::ClassCounts{88, 42, 27} &&
                    total_train == 623;
  return {pass, "train " + counts_text(train) + " (" + std::to_string(total_train) + "), val " + counts_text(val)};
}

Outcome balancing_reproduction() {
  const busaug::testing::ZeroEpsilon model(8, 8);
  const auto enc = busaug::testing::small_encoder();
  const auto input = busaug::testing::blank_split({349, 168, 106}, {88, 42, 27}, 8);
  pipeline::GenerationConfig g;
  g.use_img2img = true;
  g.sampler_steps = 4;
  const auto out = pipeline::augment_manifest(input, model, enc, diffusion::make_schedule(), 350, g);

  auto val_keys = [](const data::Manifest& m) {
    std::multiset<std::string> keys;
    for (const auto& s : m.samples)
      if (s.split == data::Split::kVal) keys.insert(s.path + "|" + std::string(data::to_string(s.label)));
    return keys;
  };
  int synthetic = 0;
  for (const auto& s : out.manifest.samples) synthetic += s.synthetic;
  const auto train = out.manifest.counts(data::Split::kTrain);
  const bool val_same = val_keys(input) == val_keys(out.manifest) &&
                        input.counts(data::Split::kVal) == out.manifest.counts(data::Split::kVal);
  const bool pass = train == data::ClassCounts{350, 350, 350} && out.run.records.size() == 427 && synthetic == 427 &&
                    val_same;
  return {pass, "train " + counts_text(train) + ", " + std::to_string(out.run.records.size()) + " records, val " +
                    (val_same ? "unchanged" : "CHANGED")};
}

// 8, 9 -----------------------------------------------------------------------------------------

struct EndToEnd {
  fs::path first;
  fs::path second;
  double first_seconds = 0.0;
  int first_status = -1;
  int second_status = -1;
};

int run_all(const fs::path& out, double* seconds) {
  fs::remove_all(out);
  const auto start = Clock::now();
  const auto [status, text] =
      run_command(std::string("'") + BUSAUG_CLI_PATH + "' run-all --out '" + out.string() + "' 2>&1");
  if (seconds) *seconds = seconds_since(start);
  std::ofstream(out.string() + ".log") << text;
  return status;
}

Outcome table_directions(const EndToEnd& e2e) {
  if (e2e.first_status != 0) return {false, "run-all exited with " + std::to_string(e2e.first_status)};
  const auto j = nlohmann::json::parse(read_bytes(e2e.first / "report.json"));
  const auto& rows = j.at("rows");
  if (rows.size() != 5) return {false, "report has " + std::to_string(rows.size()) + " rows"};
  std::map<std::string, nlohmann::json> by_arm;
  for (const auto& r : rows) by_arm[r.at("arm").get<std::string>()] = r;
  auto fid = [&](const char* arm) { return by_arm.at(arm).at("FID").get<double>(); };
  auto acc = [&](const char* arm) { return by_arm.at(arm).at("Accuracy").get<double>(); };

  const bool fid_sd = fid("sd_img2img") < fid("sd");
  const bool fid_ti = fid("sd_ti_img2img") < fid("sd_ti");
  const double floor = acc("baseline") - 0.05;
  bool acc_ok = true;
  for (const char* arm : {"sd", "sd_img2img", "sd_ti", "sd_ti_img2img"}) acc_ok = acc_ok && acc(arm) >= floor;

  // Table shape: header, rule, five rows in arm order, baseline FID "-".
  std::istringstream md(read_bytes(e2e.first / "report.md"));
  std::vector<std::string> lines;
  for (std::string line; std::getline(md, line);) lines.push_back(line);
  bool shape = lines.size() == 7 && lines[0].starts_with("| Components |");
  for (std::size_t i = 0; shape && i < pipeline::kAllArms.size(); ++i) {
    const std::string title(pipeline::arm_title(pipeline::kAllArms[i]));
    const auto& line = lines[2 + i];
    shape = line.starts_with("| " + title + " |") && std::count(line.begin(), line.end(), '|') == 7;
  }
  shape = shape && lines[2].ends_with("| - |") && rows[0].at("FID").is_null();
  const bool budget = e2e.first_seconds <= 1800.0;

  std::ostringstream d;
  d.precision(4);
  d << "FID sd " << fid("sd") << " -> sd_img2img " << fid("sd_img2img") << ", sd_ti " << fid("sd_ti")
    << " -> sd_ti_img2img " << fid("sd_ti_img2img") << "; accuracy baseline " << acc("baseline") << ", sd "
    << acc("sd") << ", sd_img2img " << acc("sd_img2img") << ", sd_ti " << acc("sd_ti") << ", sd_ti_img2img "
    << acc("sd_ti_img2img") << "; table " << (shape ? "ok" : "MALFORMED") << "; " << std::lround(e2e.first_seconds)
    << " s";
  return {fid_sd && fid_ti && acc_ok && shape && budget, d.str()};
}

Outcome end_to_end_determinism(const EndToEnd& e2e) {
  if (e2e.first_status != 0 || e2e.second_status != 0) {
    return {false, "run-all exit codes " + std::to_string(e2e.first_status) + ", " +
                       std::to_string(e2e.second_status)};
  }
  auto list = [](const fs::path& root) {
    std::set<std::string> rel;
    for (const auto& entry : fs::recursive_directory_iterator(root))
      if (entry.is_regular_file()) rel.insert(fs::relative(entry.path(), root).generic_string());
    return rel;
  };
  const auto files_a = list(e2e.first);
  const auto files_b = list(e2e.second);
  int manifests = 0, reports = 0, grids = 0, other = 0;
  std::vector<std::string> differing;
  for (const auto& rel : files_a) {
    const fs::path name = fs::path(rel).filename();
    const bool key = name == "manifest.jsonl" || name == "report.json" || name == "report.md" || name == "grid.png";
    const bool same = files_b.count(rel) && read_bytes(e2e.first / rel) == read_bytes(e2e.second / rel);
    if (!same) differing.push_back(rel);
    if (!key) {
      ++other;
      continue;
    }
    if (name == "manifest.jsonl") ++manifests;
    else if (name == "grid.png") ++grids;
    else ++reports;
  }
  const bool pass = differing.empty() && files_a == files_b && grids == 1 && manifests >= 6 && reports >= 6;
  std::string detail = std::to_string(manifests) + " manifests, " + std::to_string(reports) + " reports, " +
                       std::to_string(grids) + " grid, " + std::to_string(other) + " other files compared";
  if (!differing.empty()) detail += "; first difference: " + differing.front();
  if (files_a != files_b) detail += "; file sets differ";
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"busaug acceptance checks"};
  bool digest_mode = false;
  std::string work = "acceptance_runs";
  std::vector<int> only;
  std::string report_path = "acceptance_report.txt";
  app.add_option("--report", report_path, "also write the PASS/FAIL lines here");
  app.add_flag("--sampler-digest", digest_mode, "print sampler output digests and exit");
  app.add_option("--work", work, "directory for the end-to-end runs");
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  if (digest_mode) {
    for (const auto& d : sampler_digests()) std::cout << d << "\n";
    return 0;
  }

  const std::string self = fs::canonical("/proc/self/exe").string();
  auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };

  EndToEnd e2e;
  if (wanted(8) || wanted(9)) {
    fs::create_directories(work);
    e2e.first = fs::absolute(work) / "run_a";
    e2e.second = fs::absolute(work) / "run_b";
    e2e.first_status = run_all(e2e.first, &e2e.first_seconds);
    if (wanted(9)) e2e.second_status = run_all(e2e.second, nullptr);
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradient_correctness},
      {"LoRA contracts", lora_contracts},
      {"sampler boundaries", [&] { return sampler_boundaries(self); }},
      {"FID oracle suite", fid_oracles},
      {"metric oracle suite", metric_oracles},
      {"split reproduction", split_reproduction},
      {"balancing reproduction", balancing_reproduction},
      {"directional table on phantoms", [&] { return table_directions(e2e); }},
      {"end-to-end determinism", [&] { return end_to_end_determinism(e2e); }},
  };

  std::ofstream report(report_path);
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int k = static_cast<int>(i) + 1;
    if (!wanted(k)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::ostringstream line;
    line << (o.pass ? "PASS" : "FAIL") << " [" << k << "] " << criteria[i].first << ": " << o.detail;
    std::cout << line.str() << std::endl;
    report << line.str() << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
