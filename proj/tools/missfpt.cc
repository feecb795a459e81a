// missfpt: generate-data, train, eval, verify, print-config.
//
// Exit codes: 0 success, 1 verification failure, 2 config error,
// 3 numeric failure, 4 I/O error.

#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <CLI11.hpp>

#include "missfpt/archive.h"
#include "missfpt/config.h"
#include "missfpt/errors.h"
#include "missfpt/fft.h"
#include "missfpt/train_eval.h"

namespace fs = std::filesystem;
using namespace missfpt;

namespace {

enum ExitCode { kOk = 0, kVerifyFailed = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

ExperimentConfig LoadOrDefault(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : LoadExperimentConfig(path);
}

void WriteText(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

void PrepareDir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// --------------------------------------------------------------------------

struct GenerateArgs {
  std::string config, out;
  std::optional<int> scenes;
  std::optional<std::uint64_t> seed;
};

int RunGenerate(const GenerateArgs& a) {
  ExperimentConfig c = LoadOrDefault(a.config);
  if (a.scenes) c.data.scenes = *a.scenes;
  if (a.seed) c.data.seed = *a.seed;
  if (!c.data.seed) throw ConfigError("data generation requires a seed (--seed or data.seed)");
  if (c.data.scenes < 1) throw ConfigError("data.scenes must be positive");
  c.Validate();
  const Dataset d = GenerateDataset(c.modalities, c.data.scene, c.data.scenes, *c.data.seed);
  WriteDataset(a.out, d, ConfigHash(c));
  std::printf("wrote %d scenes (seed %llu) to %s\n", c.data.scenes, static_cast<unsigned long long>(*c.data.seed),
              a.out.c_str());
  return kOk;
}

struct TrainArgs {
  std::string config, dataset, out, regime, tuning;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
};

int RunTrain(const TrainArgs& a) {
  ExperimentConfig c = LoadOrDefault(a.config);
  if (!a.regime.empty()) ParseRegime(a.regime, c.train);
  if (!a.tuning.empty()) c.train.tuning = ParseTuningMode(a.tuning);
  if (a.epochs) c.train.epochs = *a.epochs;
  if (a.seed) c.train.seed = *a.seed;
  if (!c.train.seed) throw ConfigError("training requires a seed (--seed or train.seed)");
  c.Validate();

  const Dataset data = ReadDataset(a.dataset);
  if (!(data.spec == c.modalities)) throw ConfigError("dataset modalities differ from the config's");
  const std::string hash = ConfigHash(c);
  const TrainResult result = TrainFromScratch(c.modalities, c.backbone, data, c.train);

  PrepareDir(a.out);
  WriteCheckpoint(a.out, result.model, c.train.tuning, hash);
  std::string log = "# tool_version=" + ToolVersion() + " config_hash=" + hash + "\nstep,loss,mask_bits\n";
  char buf[64];
  for (const auto& e : result.log) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,", e.step, e.loss);
    log += buf + e.mask_bits + "\n";
  }
  WriteText(fs::path(a.out) / "loss.csv", log);
  WriteText(fs::path(a.out) / "config.json", ToJson(c).dump(2) + "\n");
  std::printf("trained %zu steps (%s, %s), final loss %.6f, config %s\n", result.log.size(),
              ToString(c.train.regime).c_str(), ToString(c.train.tuning).c_str(),
              result.log.empty() ? 0.0 : result.log.back().loss, hash.c_str());
  return kOk;
}

struct EvalArgs {
  std::string config, checkpoint, dataset, out, condition;
  bool matrix = false;
  bool failures = false;
  std::optional<double> severity;
  std::optional<std::uint64_t> seed;
};

int RunEval(const EvalArgs& a) {
  EvalConfig ec = a.config.empty() ? EvalConfig{} : LoadExperimentConfig(a.config).eval;
  if (a.severity) ec.severity = *a.severity;
  if (a.seed) ec.seed = *a.seed;
  if (!(ec.severity > 0.0 && ec.severity <= 1.0)) throw ConfigError("severity must be in (0, 1]");

  const Checkpoint ck = ReadCheckpoint(a.checkpoint);
  const Dataset data = ReadDataset(a.dataset);
  if (!(data.spec == ck.model.spec())) throw ConfigError("dataset modalities differ from the checkpoint's");

  EvalReport report;
  report.num_classes = ck.model.config().num_classes;
  report.config_hash = ck.config_hash;
  if (!a.condition.empty()) {
    report.rows.push_back(EvaluateCondition(ck.model, data, ParseCondition(data.spec, a.condition)));
  }
  if (a.matrix) {
    ec.failures = ec.failures || a.failures;
    for (auto& row : EvaluateMatrix(ck.model, data, ec).rows) report.rows.push_back(std::move(row));
  } else if (a.failures) {
    for (FailureKind kind : kAllFailureKinds) {
      if (auto f = DefaultFailure(kind, ec.severity, data.spec)) {
        report.rows.push_back(EvaluateFailure(ck.model, data, *f, ec.seed));
      }
    }
  }
  if (report.rows.empty()) report.rows.push_back(EvaluateCondition(ck.model, data, EnumerateConditions(data.spec)[0]));

  const std::string table = ReportTable(report);
  if (!a.out.empty()) {
    PrepareDir(a.out);
    WriteText(fs::path(a.out) / "report.csv", ReportCsv(report));
    WriteText(fs::path(a.out) / "report.txt", table);
  }
  std::fputs(table.c_str(), stdout);
  return kOk;
}

// --------------------------------------------------------------------------
// verify: the invariant suite.

bool Check(bool ok, const std::string& name, const std::string& detail) {
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  return ok;
}

bool VerifyFft() {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> length(1, 64);
  std::normal_distribution<double> normal;
  double err = 0.0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> x(static_cast<size_t>(length(rng)));
    for (double& v : x) v = normal(rng);
    const auto n = static_cast<int>(x.size());
    const std::vector<double> re = RealFft(x);
    const std::vector<double> back = InverseFftRoundtrip(x);
    for (int k = 0; k < n; ++k) {
      double naive = 0.0;
      for (int j = 0; j < n; ++j) naive += x[size_t(j)] * std::cos(2.0 * std::numbers::pi * j * k / n);
      err = std::max({err, std::abs(re[size_t(k)] - naive), std::abs(back[size_t(k)] - x[size_t(k)])});
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "1000 vectors, max error %.2e", err);
  return Check(err < 1e-10, "fft oracle", buf);
}

bool VerifyMasks() {
  const ModalitySpec spec = ModalitySpec::Quad();
  Rng rng(2);
  int complete_dense = 0, sparse = 0, empty = 0;
  constexpr int kDraws = 100000;
  for (int i = 0; i < kDraws; ++i) {
    const SwitchMask m = SampleSwitchMask(spec, rng);
    complete_dense += (m.bits() & 3u) == 3u;
    empty += (m.bits() & 3u) == 0u;
    sparse += m.test(2);
  }
  const double p = complete_dense / double(kDraws), s = sparse / double(kDraws);
  char buf[96];
  std::snprintf(buf, sizeof(buf), "P(dense complete)=%.4f P(sparse on)=%.4f", p, s);
  return Check(empty == 0 && std::abs(p - 0.5) <= 0.01 && std::abs(s - 0.5) <= 0.01, "mask distribution", buf);
}

bool VerifyGradients(bool wrong_sign) {
  GradcheckOptions options;
  if (wrong_sign) {
    options.mutate_analytic = [](TensorMap& grads) {
      for (auto& [name, g] : grads) {
        if (name.ends_with(".w_down")) g = -g;
      }
    };
  }
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  bool ok = true;
  for (bool use_fpt : {true, false}) {
    const GradcheckReport r = GradcheckSeeds(use_fpt, seeds, options);
    double worst = 0.0;
    for (const auto& t : r.tensors) worst = std::max(worst, t.max_rel_error);
    std::string detail = std::to_string(r.tensors.size()) + " tensors x 5 seeds, worst relative error ";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2e", worst);
    detail += buf;
    if (!r.failures.empty()) detail += "; first failure: " + r.failures.front();
    ok &= Check(r.passed(), use_fpt ? "gradcheck (fpt)" : "gradcheck (adapter)", detail);
  }
  return ok;
}

bool VerifyRoundTrips() {
  const fs::path dir = fs::temp_directory_path() / ("missfpt_verify_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  const Dataset d = GenerateDataset(ModalitySpec::Quad(), {}, 3, 11);
  WriteDataset(dir / "data", d, "verify");
  const Dataset back = ReadDataset(dir / "data");
  bool ok = back.spec == d.spec && back.scenes.size() == d.scenes.size();
  for (size_t i = 0; ok && i < d.scenes.size(); ++i) ok = back.scenes[i] == d.scenes[i];

  BackboneConfig c;
  c.depth = 2;
  c.d_model = 16;
  c.heads = 2;
  c.bottleneck = 8;
  const Model m(ModalitySpec::Quad(), c, 5);
  WriteCheckpoint(dir / "ckpt", m, TuningMode::kPlusFpt, "verify");
  const Checkpoint ck = ReadCheckpoint(dir / "ckpt");
  ok = ok && ck.model.params() == m.params() && ck.model.spec() == m.spec();
  fs::remove_all(dir);
  return Check(ok, "round-trips", "dataset and checkpoint bitwise");
}

int RunVerify(const std::string& fault) {
  if (!fault.empty() && fault != "wrong-sign") throw ConfigError("unknown fault: " + fault);
  bool ok = VerifyFft();
  ok &= VerifyMasks();
  ok &= VerifyGradients(fault == "wrong-sign");
  ok &= VerifyRoundTrips();
  std::printf("%s\n", ok ? "verify: all checks passed" : "verify: FAILED");
  return ok ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Missing-modality segmentation with Fourier prompt tuning"};
  app.set_version_flag("--version", ToolVersion());
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate-data", "Generate a synthetic dataset");
  g->add_option("--config", gen.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  g->add_option("--out,--dataset", gen.out, "Output dataset directory")->required();
  g->add_option("--scenes", gen.scenes, "Scene count (overrides data.scenes)");
  g->add_option("--seed", gen.seed, "Base seed (overrides data.seed)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model and write a checkpoint");
  t->add_option("--config", tr.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  t->add_option("--dataset", tr.dataset, "Training dataset directory")->required();
  t->add_option("--out", tr.out, "Checkpoint directory")->required();
  t->add_option("--regime", tr.regime, "complete | mms | fixed_ratio[:ratio]");
  t->add_option("--tuning", tr.tuning, "full | decoder_only | plus_fpt | plus_adapter");
  t->add_option("--epochs", tr.epochs, "Epoch count");
  t->add_option("--seed", tr.seed, "Training seed (overrides train.seed)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--config", ev.config, "Experiment config; only the eval section is used")->check(CLI::ExistingFile);
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory")->required();
  e->add_option("--dataset", ev.dataset, "Evaluation dataset directory")->required();
  e->add_option("--out", ev.out, "Report directory (report.csv, report.txt)");
  e->add_option("--condition", ev.condition, "Present modalities, e.g. \"R,D\" or \"depth\"");
  e->add_flag("--matrix", ev.matrix, "Every missing condition plus every failure kind");
  e->add_flag("--failures", ev.failures, "Sensor-failure rows");
  e->add_option("--severity", ev.severity, "Failure severity in (0, 1]");
  e->add_option("--seed", ev.seed, "Failure-injection seed");

  std::string fault;
  auto* v = app.add_subcommand("verify", "Run the invariant suite");
  v->add_option("--inject-fault", fault, "Corrupt a gradient to prove the suite fails (wrong-sign)");

  auto* p = app.add_subcommand("print-config", "Print the default experiment config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*g) return RunGenerate(gen);
    if (*t) return RunTrain(tr);
    if (*e) return RunEval(ev);
    if (*v) return RunVerify(fault);
    if (*p) {
      std::cout << ToJson(ExperimentConfig{}).dump(2) << "\n";
      return kOk;
    }
  } catch (const NumericError& err) {
    std::fprintf(stderr, "numeric error: %s\n", err.what());
    return kNumeric;
  } catch (const IoError& err) {
    std::fprintf(stderr, "i/o error: %s\n", err.what());
    return kIo;
  } catch (const Error& err) {
    std::fprintf(stderr, "config error: %s\n", err.what());
    return kConfig;
  }
  return kOk;
}
