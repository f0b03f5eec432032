// Python bindings: numpy in, numpy out; library errors map to Python exceptions.

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "busaug/config.hpp"
#include "busaug/data.hpp"
#include "busaug/diffusion.hpp"
#include "busaug/error.hpp"
#include "busaug/eval.hpp"
#include "busaug/pipeline.hpp"
#include "busaug/report.hpp"

namespace py = pybind11;
using namespace busaug;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_numpy(const Image& im) {
  Array out({im.height, im.width});
  std::copy(im.pixels.begin(), im.pixels.end(), out.mutable_data());
  return out;
}

Image from_numpy(const Array& a) {
  if (a.ndim() != 2) throw DataError("expected a 2-D image array");
  Image im(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), im.pixels.begin());
  return im;
}

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_python(const py::handle& obj) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

config::ExperimentConfig experiment_config(const std::string& text) {
  return config::to_experiment(config::parse_config_text(text));
}

/// Owns an ExperimentContext so Python sees one object per run.
class Experiment {
 public:
  Experiment(const std::string& config_text, const std::string& run_dir)
      : ctx_(experiment_config(config_text), run_dir) {}

  py::dict counts() {
    const auto& m = ctx_.dataset();
    py::dict d;
    d["train"] = m.counts(data::Split::kTrain);
    d["val"] = m.counts(data::Split::kVal);
    return d;
  }

  py::object run_arm(const std::string& arm) {
    const pipeline::ArmResult r = pipeline::run_experiment(pipeline::parse_arm(arm), ctx_);
    return to_python(r.report.to_json());
  }

  py::list generate(const std::string& arm, const std::string& label, int count) {
    const auto a = pipeline::parse_arm(arm);
    if (!pipeline::is_augmented(a)) throw UsageError("the baseline arm does not generate images");
    const auto g = ctx_.generation_config(a);
    const auto& enc = g.use_ti ? ctx_.ti_encoder() : ctx_.merged_encoder();
    const auto out =
        pipeline::hybrid_generate(ctx_.merged_model(), enc, ctx_.schedule(), data::parse_label(label), count, g,
                                  &ctx_.cache());
    py::list images;
    for (const auto& im : out.images) images.append(to_numpy(im));
    return images;
  }

  py::list pretrain_losses() {
    ctx_.lora_checkpoint();
    return py::cast(ctx_.pretrain_losses());
  }

 private:
  pipeline::ExperimentContext ctx_;
};

}  // namespace

PYBIND11_MODULE(_busaug, m) {
  m.doc() = "Hybrid diffusion augmentation for breast ultrasound classification";

  auto base = py::register_exception<Error>(m, "BusaugError", PyExc_RuntimeError);
  py::register_exception<UsageError>(m, "UsageError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<RuntimeError>(m, "RuntimeError", base.ptr());

  m.def("parse_config", [](const std::string& text) { return config::parse_config_text(text).echo(); },
        py::arg("text") = "", "Validates a config and returns its canonical echo.");

  m.def(
      "make_schedule",
      [](int timesteps, double beta_min, double beta_max) {
        const auto s = diffusion::make_schedule(timesteps, beta_min, beta_max);
        return py::make_tuple(s.betas, s.alpha_bars);
      },
      py::arg("timesteps") = diffusion::kDefaultTimesteps, py::arg("beta_min") = diffusion::kDefaultBetaMin,
      py::arg("beta_max") = diffusion::kDefaultBetaMax, "(betas, alpha_bars) of the linear schedule.");
  m.def("ddim_timesteps", &diffusion::ddim_timesteps, py::arg("start"), py::arg("count"));

  m.def(
      "generate_phantom",
      [](const std::string& label, std::uint64_t seed, int image_size) {
        data::PhantomConfig pc;
        pc.image_size = image_size;
        const auto p = data::generate_phantom(data::parse_label(label), pc, seed);
        py::array_t<std::uint8_t> mask({image_size, image_size});
        std::copy(p.lesion_mask.begin(), p.lesion_mask.end(), mask.mutable_data());
        return py::make_tuple(to_numpy(p.image), mask);
      },
      py::arg("label"), py::arg("seed"), py::arg("image_size") = 64, "(image in [-1, 1], lesion mask).");

  m.def(
      "split_counts",
      [](const data::ClassCounts& counts, double train_fraction, std::uint64_t seed) {
        data::Manifest mf;
        for (data::ClassLabel label : data::kAllLabels)
          for (int i = 0; i < counts[data::index_of(label)]; ++i) {
            data::Sample s;
            s.path = std::string(data::to_string(label)) + "_" + std::to_string(i);
            s.label = label;
            s.prompt = data::prompt_for_label(label);
            mf.samples.push_back(s);
          }
        const auto split = data::split_stratified(mf, train_fraction, seed);
        return py::make_tuple(split.counts(data::Split::kTrain), split.counts(data::Split::kVal));
      },
      py::arg("counts"), py::arg("train_fraction") = 0.8, py::arg("seed") = 0,
      "Per-class (train, val) counts of a stratified split.");
  m.def("balance_plan", &data::balance_plan, py::arg("train_counts"), py::arg("target_per_class"));

  m.def(
      "fid",
      [](const eval::Matrix& a, const eval::Matrix& b) { return eval::fid(eval::fid_stats(a), eval::fid_stats(b)); },
      py::arg("features_a"), py::arg("features_b"), "FID between two (n, d) feature matrices.");
  m.def(
      "fid_stats",
      [](const eval::Matrix& f) {
        const auto s = eval::fid_stats(f);
        return py::make_tuple(s.mu, s.sigma);
      },
      py::arg("features"));
  m.def("matrix_sqrt_psd", &eval::matrix_sqrt_psd, py::arg("matrix"));
  m.def(
      "compute_metrics",
      [](const eval::Matrix& probs, const std::vector<int>& labels) {
        return to_python(eval::compute_metrics(probs, labels).to_json());
      },
      py::arg("probs"), py::arg("labels"), "Accuracy, macro PPV/recall/F1 and one-vs-rest AUC.");

  m.def(
      "render_report",
      [](const py::list& reports) {
        std::vector<eval::MetricsReport> rs;
        for (const auto& r : reports) rs.push_back(eval::MetricsReport::from_json(from_python(r)));
        return report::render_report(rs).markdown;
      },
      py::arg("reports"), "Markdown results table from five arm reports.");

  m.def(
      "run_all",
      [](const std::string& config_text, const std::string& run_dir) {
        const auto r = pipeline::run_all(experiment_config(config_text), run_dir);
        py::dict d;
        d["table"] = r.table;
        d["summary"] = to_python(r.table_json);
        py::list reports;
        for (const auto& arm : r.arms) reports.append(to_python(arm.report.to_json()));
        d["reports"] = reports;
        return d;
      },
      py::arg("config") = "", py::arg("run_dir") = "");

  py::class_<Experiment>(m, "Experiment")
      .def(py::init<const std::string&, const std::string&>(), py::arg("config") = "", py::arg("run_dir") = "")
      .def("counts", &Experiment::counts)
      .def("run_arm", &Experiment::run_arm, py::arg("arm"))
      .def("generate", &Experiment::generate, py::arg("arm"), py::arg("label"), py::arg("count"))
      .def("pretrain_losses", &Experiment::pretrain_losses);

  m.attr("ARMS") = py::make_tuple("baseline", "sd", "sd_img2img", "sd_ti", "sd_ti_img2img");
  m.attr("LABELS") = py::make_tuple("benign", "malignant", "normal");
}
