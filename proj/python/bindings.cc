#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "missfpt/archive.h"
#include "missfpt/config.h"
#include "missfpt/errors.h"
#include "missfpt/fft.h"
#include "missfpt/fpt.h"
#include "missfpt/train_eval.h"

namespace py = pybind11;
using namespace missfpt;

namespace {

ExperimentConfig ConfigFrom(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = json_text.empty() ? nlohmann::json::object() : nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return ExperimentConfigFromJson(j);
}

py::list Rows(const EvalReport& report) {
  py::list rows;
  for (const auto& r : report.rows) {
    py::dict d;
    d["label"] = r.label;
    d["kind"] = r.kind;
    d["miou"] = r.miou;
    d["class_iou"] = r.class_iou;
    rows.append(d);
  }
  return rows;
}

py::dict SceneDict(const Scene& s, const ModalitySpec& spec) {
  py::dict modalities;
  for (int i = 0; i < spec.size(); ++i) {
    const Image& img = s.modalities[size_t(i)];
    py::array_t<double> a({img.height, img.width, img.channels});
    std::copy(img.data.begin(), img.data.end(), a.mutable_data());
    modalities[py::str(spec.entry(i).name)] = a;
  }
  py::array_t<int> labels({s.labels.height, s.labels.width});
  std::copy(s.labels.data.begin(), s.labels.data.end(), labels.mutable_data());
  py::dict d;
  d["modalities"] = modalities;
  d["labels"] = labels;
  return d;
}

ModalitySpec SpecByName(const std::string& name) {
  if (name == "rgb_depth") return ModalitySpec::RgbDepth();
  if (name == "quad") return ModalitySpec::Quad();
  throw ConfigError("unknown modality spec: " + name + " (expected rgb_depth or quad)");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Missing-modality segmentation with Fourier prompt tuning (native core)";
  m.attr("__version__") = ToolVersion();

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<SpecError>(m, "SpecError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<AlignmentError>(m, "AlignmentError", base.ptr());
  auto io = py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<IntegrityError>(m, "IntegrityError", io.ptr());

  m.def("count_missing_conditions", &CountMissingConditions, py::arg("n_dense"), py::arg("m_sparse"));
  m.def(
      "condition_labels", [](const std::string& spec) {
        const ModalitySpec s = SpecByName(spec);
        std::vector<std::string> out;
        for (const auto& c : EnumerateConditions(s)) out.push_back(c.Label(s));
        return out;
      },
      py::arg("spec") = "rgb_depth", "Labels of every legal condition, complete first.");
  m.def(
      "sample_switch_masks",
      [](const std::string& spec, std::uint64_t seed, int count) {
        const ModalitySpec s = SpecByName(spec);
        Rng rng(seed);
        std::vector<std::string> out;
        for (int i = 0; i < count; ++i) out.push_back(SampleSwitchMask(s, rng).ToString(s));
        return out;
      },
      py::arg("spec"), py::arg("seed"), py::arg("count"));

  m.def(
      "real_fft", [](const std::vector<double>& x) { return RealFft(x); }, py::arg("x"));
  m.def(
      "real_fft_matrix",
      [](const Matrix& x, const std::string& axis) {
        if (axis == "channel") return RealFftMatrix(x, FftAxis::kChannel);
        if (axis == "token") return RealFftMatrix(x, FftAxis::kToken);
        if (axis == "both") return RealFftMatrix(x, FftAxis::kBoth);
        throw ConfigError("unknown fft axis: " + axis);
      },
      py::arg("x"), py::arg("axis") = "channel");
  m.def(
      "fourier_prompt_forward",
      [](const Matrix& prompts, const Matrix& features, const Matrix& w_q, const Matrix& w_k,
         const std::string& variant) {
        TokenBundle b{prompts, features, std::nullopt, 0};
        SpectralMode mode;
        mode.variant = ParsePromptSpace(variant);
        return FourierPromptForward(b, {w_q, w_k}, mode).prompts;
      },
      py::arg("prompts"), py::arg("features"), py::arg("w_q"), py::arg("w_k"), py::arg("variant") = "spectrum_spatial",
      "Refreshed prompt matrix; features are unchanged by construction.");

  m.def(
      "generate_scene",
      [](std::uint64_t seed, const std::string& spec) {
        const ModalitySpec s = SpecByName(spec);
        return SceneDict(GenerateScene(seed, {}, s), s);
      },
      py::arg("seed"), py::arg("spec") = "rgb_depth");

  m.def(
      "default_config", [] { return ToJson(ExperimentConfig{}).dump(); }, "Default experiment config as JSON text.");
  m.def(
      "config_hash", [](const std::string& json_text) { return ConfigHash(ConfigFrom(json_text)); },
      py::arg("config"));
  m.def(
      "parameter_counts",
      [](const std::string& json_text, const std::string& tuning) {
        const ExperimentConfig c = ConfigFrom(json_text);
        const auto part = PartitionParameters(ParameterShapes(c.modalities, c.backbone), ParseTuningMode(tuning));
        const ParameterCounts counts = CountParameters(part);
        py::dict d;
        d["frozen"] = counts.frozen;
        d["tunable"] = counts.tunable;
        d["tunable_fraction"] = counts.tunable_fraction;
        d["increment"] = TunableIncrement(part);
        return d;
      },
      py::arg("config") = "", py::arg("tuning") = "plus_fpt");

  m.def(
      "gradcheck",
      [](bool use_fpt, const std::vector<std::uint64_t>& seeds) {
        const GradcheckReport r = GradcheckSeeds(use_fpt, seeds);
        double worst = 0.0;
        for (const auto& t : r.tensors) worst = std::max(worst, t.max_rel_error);
        py::dict d;
        d["passed"] = r.passed();
        d["failures"] = r.failures;
        d["max_rel_error"] = worst;
        return d;
      },
      py::arg("use_fpt") = true, py::arg("seeds") = std::vector<std::uint64_t>{1, 2, 3});

  m.def(
      "generate_dataset",
      [](const std::filesystem::path& out, const std::string& json_text) {
        const ExperimentConfig c = ConfigFrom(json_text);
        if (!c.data.seed) throw ConfigError("data generation requires data.seed");
        py::gil_scoped_release release;
        WriteDataset(out, GenerateDataset(c.modalities, c.data.scene, c.data.scenes, *c.data.seed), ConfigHash(c));
      },
      py::arg("out"), py::arg("config"));
  m.def(
      "train",
      [](const std::filesystem::path& dataset, const std::filesystem::path& out, const std::string& json_text) {
        const ExperimentConfig c = ConfigFrom(json_text);
        std::vector<std::pair<int, double>> log;
        {
          py::gil_scoped_release release;
          const Dataset data = ReadDataset(dataset);
          if (!(data.spec == c.modalities)) throw ConfigError("dataset modalities differ from the config's");
          const TrainResult result = TrainFromScratch(c.modalities, c.backbone, data, c.train);
          WriteCheckpoint(out, result.model, c.train.tuning, ConfigHash(c));
          for (const auto& e : result.log) log.emplace_back(e.step, e.loss);
        }
        return log;
      },
      py::arg("dataset"), py::arg("out"), py::arg("config"), "Trains, writes a checkpoint, returns (step, loss).");
  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& dataset, const std::string& condition,
         double severity) {
        EvalReport report;
        {
          py::gil_scoped_release release;
          const Checkpoint ck = ReadCheckpoint(checkpoint);
          const Dataset data = ReadDataset(dataset);
          if (condition.empty()) {
            EvalConfig ec;
            ec.severity = severity;
            report = EvaluateMatrix(ck.model, data, ec);
          } else {
            report.rows.push_back(EvaluateCondition(ck.model, data, ParseCondition(data.spec, condition)));
          }
        }
        return Rows(report);
      },
      py::arg("checkpoint"), py::arg("dataset"), py::arg("condition") = "", py::arg("severity") = 0.5,
      "One condition, or the full matrix when no condition is given.");
}
