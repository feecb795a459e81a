// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
// failure. `--only 1,2,7` restricts the run to selected criteria.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "missfpt/backbone.h"
#include "missfpt/data.h"
#include "missfpt/errors.h"
#include "missfpt/fft.h"
#include "missfpt/fpt.h"
#include "missfpt/modality.h"
#include "missfpt/train_eval.h"

namespace missfpt {
namespace {

FILE* g_log = nullptr;

// Writes to stdout and, when --log is given, to the log file.
void Say(const std::string& text) {
  std::fputs(text.c_str(), stdout);
  std::fflush(stdout);
  if (g_log) {
    std::fputs(text.c_str(), g_log);
    std::fflush(g_log);
  }
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string Fmt(const char* format, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), format, a, b, c);
  return buf;
}

double Points(double miou) { return 100.0 * miou; }

double Mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------

Outcome ConditionCounting() {
  if (CountMissingConditions(2, 2) != 12) return {false, "C(2,2) != 12"};
  for (int n = 1; n <= 5; ++n) {
    for (int m = 0; m <= 5; ++m) {
      std::uint64_t brute = 0;
      for (std::uint64_t bits = 0; bits < (1ULL << (n + m)); ++bits) {
        if ((bits & ((1ULL << n) - 1)) != 0) ++brute;
      }
      if (CountMissingConditions(n, m) != brute) {
        return {false, "mismatch at n=" + std::to_string(n) + " m=" + std::to_string(m)};
      }
      std::vector<ModalityEntry> entries;
      for (int i = 0; i < n; ++i) entries.push_back({"d" + std::to_string(i), ModalityKind::kDense, 1});
      for (int i = 0; i < m; ++i) entries.push_back({"s" + std::to_string(i), ModalityKind::kSparse, 1});
      if (EnumerateConditions(ModalitySpec(entries)).size() != brute) {
        return {false, "enumeration size mismatch at n=" + std::to_string(n) + " m=" + std::to_string(m)};
      }
    }
  }
  return {true, "C(2,2)=12; brute force agrees for n<=5, m<=5"};
}

Outcome SwitchDistribution() {
  const ModalitySpec spec = ModalitySpec::Quad();
  Rng rng(20240501);
  constexpr int kDraws = 100000;
  std::map<int, int> dense;
  int sparse[2] = {0, 0};
  for (int i = 0; i < kDraws; ++i) {
    const SwitchMask mask = SampleSwitchMask(spec, rng);
    ++dense[static_cast<int>(mask.bits() & 3u)];
    sparse[0] += mask.test(2);
    sparse[1] += mask.test(3);
  }
  const double p11 = dense[3] / double(kDraws);
  const double p10 = dense[1] / double(kDraws);  // rgb only
  const double p01 = dense[2] / double(kDraws);  // depth only
  const double s0 = sparse[0] / double(kDraws);
  const double s1 = sparse[1] / double(kDraws);
  const bool ok = dense[0] == 0 && std::abs(p11 - 0.5) <= 0.01 && std::abs(p10 - 0.25) <= 0.01 &&
                  std::abs(p01 - 0.25) <= 0.01 && std::abs(s0 - 0.5) <= 0.01 && std::abs(s1 - 0.5) <= 0.01;
  return {ok, Fmt("P(11)=%.4f P(10)=%.4f P(01)=%.4f", p11, p10, p01) + Fmt(" sparse=%.4f,%.4f", s0, s1)};
}

Outcome FftCorrectness() {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> length(1, 64);
  std::normal_distribution<double> normal;
  double dft_err = 0.0, sym_err = 0.0, trip_err = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const int n = length(rng);
    std::vector<double> x(static_cast<size_t>(n));
    for (double& v : x) v = normal(rng);
    const std::vector<double> re = RealFft(x);
    std::vector<Complex> xc(x.begin(), x.end());
    const std::vector<Complex> spectrum = Fft(xc);
    for (int k = 0; k < n; ++k) {
      Complex naive = 0.0;
      for (int j = 0; j < n; ++j) {
        naive += x[size_t(j)] * std::polar(1.0, -2.0 * std::numbers::pi * double(j) * double(k) / double(n));
      }
      dft_err = std::max({dft_err, std::abs(re[size_t(k)] - naive.real()), std::abs(spectrum[size_t(k)] - naive)});
      sym_err = std::max(sym_err, std::abs(spectrum[size_t(k)] - std::conj(spectrum[size_t((n - k) % n)])));
    }
    const std::vector<double> back = InverseFftRoundtrip(x);
    for (int j = 0; j < n; ++j) trip_err = std::max(trip_err, std::abs(back[size_t(j)] - x[size_t(j)]));
  }
  const bool ok = dft_err < 1e-10 && sym_err < 1e-10 && trip_err < 1e-10;
  return {ok, Fmt("max errors: dft %.2e, symmetry %.2e, round-trip %.2e", dft_err, sym_err, trip_err)};
}

Outcome PromptStructure() {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal;
  auto random = [&](Eigen::Index r, Eigen::Index c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
  };
  double row_err = 0.0;
  int cases = 0;
  for (PromptSpace variant : {PromptSpace::kSpectrumSpatial, PromptSpace::kSpectrumOnly, PromptSpace::kSpatialOnly}) {
    for (FftAxis axis : {FftAxis::kChannel, FftAxis::kToken, FftAxis::kBoth}) {
      for (int trial = 0; trial < 5; ++trial, ++cases) {
        const SpectralMode mode{variant, axis};
        const Eigen::Index d = 6 + trial;
        TokenBundle b;
        b.prompts = random(3 + trial, d);
        b.features = random(5 + 2 * trial, d);
        if (trial % 2 == 0) b.cls = random(1, d);
        FourierPromptParams params{random(d, d), random(d, d)};

        const TokenBundle out = FourierPromptForward(b, params, mode);
        if (out.prompts.rows() != b.prompts.rows() || out.prompts.cols() != d) return {false, "prompt shape changed"};
        if (out.features != b.features) return {false, "features altered"};
        if (out.cls.has_value() != b.cls.has_value() || (b.cls && *out.cls != *b.cls)) return {false, "cls altered"};
        const Matrix a = PromptAttentionWeights(b, params, mode);
        row_err = std::max(row_err, (a.rowwise().sum().array() - 1.0).abs().maxCoeff());

        for (bool keep_fft : {true, false}) {
          const TokenBundle free = ParameterFreePromptAttention(b, mode, keep_fft);
          const TokenBundle ident =
              FourierPromptForward(b, FourierPromptParams::Identity(d), ParameterFreeMode(mode, keep_fft));
          if (free.prompts != ident.prompts) return {false, "parameter-free differs from identity weights"};
        }
      }
    }
  }
  return {row_err < 1e-9, std::to_string(cases) + " bundles; max |row sum - 1| = " + Fmt("%.2e", row_err)};
}

Outcome GradientCorrectness() {
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 1; s <= 20; ++s) seeds.push_back(s);
  std::ostringstream detail;
  bool ok = true;
  std::set<std::string> checked;
  double worst = 0.0;
  for (bool use_fpt : {true, false}) {
    const GradcheckReport report = GradcheckSeeds(use_fpt, seeds);
    for (const auto& f : report.failures) {
      ok = false;
      detail << f << "; ";
    }
    for (const auto& t : report.tensors) {
      if (!t.tunable) continue;
      worst = std::max(worst, t.max_rel_error);
      const std::string leaf = t.name.substr(t.name.rfind('.') + 1);
      checked.insert(t.name.rfind("decoder", 0) == 0 ? "decoder" : leaf);
    }
  }
  for (const char* required : {"prompts", "w_q", "w_k", "w_down", "w_up", "scale", "decoder"}) {
    if (!checked.count(required)) {
      ok = false;
      detail << "no check for " << required << "; ";
    }
  }
  detail << "20 seeds x {fpt, adapter}; worst relative error " << Fmt("%.2e", worst);
  return {ok, detail.str()};
}

Outcome FrozenBackbone() {
  const ModalitySpec spec = ModalitySpec::RgbDepth();
  const Dataset data = GenerateDataset(spec, {}, 20, 3001);
  const BackboneConfig backbone;
  for (TuningMode tuning : {TuningMode::kDecoderOnly, TuningMode::kPlusFpt, TuningMode::kPlusAdapter}) {
    for (Regime regime : {Regime::kComplete, Regime::kMms, Regime::kFixedRatio}) {
      TrainConfig tc;
      tc.regime = regime;
      tc.tuning = tuning;
      tc.epochs = 1;
      tc.batch_size = 2;
      tc.seed = 5;
      const Model init(spec, backbone, 5);
      const TrainResult result = Train(init, data, tc);
      const std::string tag = ToString(tuning) + "/" + ToString(regime);
      if (result.log.size() != 10) return {false, tag + ": expected 10 steps"};
      const ParameterPartition partition = PartitionParameters(init, tuning);
      for (const auto& [name, count] : partition.frozen) {
        if (result.model.param(name) != init.param(name)) return {false, tag + ": frozen tensor " + name + " moved"};
      }
      bool moved = false;
      for (const auto& [name, count] : partition.tunable) moved |= result.model.param(name) != init.param(name);
      if (!moved) return {false, tag + ": no tunable tensor moved"};
      if (regime == Regime::kComplete && (result.masks_sampled != 0 || !result.mask_history.empty())) {
        return {false, tag + ": complete regime sampled a mask"};
      }
    }
  }
  return {true, "3 tunings x 3 regimes, 10 steps each; frozen tensors bit-identical; complete sampled 0 masks"};
}

Outcome ParameterAccounting() {
  const ModalitySpec spec = ModalitySpec::RgbDepth();
  BackboneConfig fpt = BackboneConfig::FullScale();
  BackboneConfig adapter = fpt;
  adapter.use_fpt = false;
  adapter.bottleneck = 64;
  const ParameterPartition fpt_part = PartitionParameters(ParameterShapes(spec, fpt), TuningMode::kPlusFpt);
  const ParameterPartition adapter_part =
      PartitionParameters(ParameterShapes(spec, adapter), TuningMode::kPlusAdapter);
  const std::int64_t fpt_inc = TunableIncrement(fpt_part);
  const std::int64_t adapter_inc = TunableIncrement(adapter_part);
  const ParameterCounts counts = CountParameters(fpt_part);
  const double fraction = 100.0 * counts.tunable_fraction;
  const bool ok = fpt_inc < adapter_inc && fraction >= 0.8 && fraction <= 1.6;
  return {ok, Fmt("increment fpt %.3fM < adapter %.3fM; tunable fraction %.3f%%", fpt_inc / 1e6, adapter_inc / 1e6,
                  fraction)};
}

// ---------------------------------------------------------------------------
// Training-based criteria share one dataset pair and reuse models.

struct TrainingSetup {
  ModalitySpec spec = ModalitySpec::RgbDepth();
  Dataset train;
  Dataset eval;
  BackboneConfig backbone;
  TrainConfig base;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::map<std::pair<int, std::uint64_t>, Model> mms_models;  // (variant, seed)

  TrainingSetup() {
    train = GenerateDataset(spec, {}, 200, 100000);
    eval = GenerateDataset(spec, {}, 50, 200000);
    base.tuning = TuningMode::kPlusFpt;
    base.epochs = 30;
  }

  Model TrainOne(const BackboneConfig& b, const TrainConfig& t) {
    const auto start = std::chrono::steady_clock::now();
    Model model = TrainFromScratch(spec, b, train, t).model;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    Say("  trained " + ToString(t.regime) + "/" + ToString(b.spectral.variant) + " seed " + std::to_string(*t.seed) +
        Fmt(" in %.0f s\n", secs));
    return model;
  }

  Model Mms(const BackboneConfig& b, const TrainConfig& t) {
    const auto key = std::make_pair(static_cast<int>(b.spectral.variant), *t.seed);
    auto it = mms_models.find(key);
    if (it == mms_models.end()) it = mms_models.emplace(key, TrainOne(b, t)).first;
    return it->second;
  }
};

Outcome MmsRobustness(TrainingSetup& s) {
  std::vector<MissingCondition> columns{EnumerateConditions(s.spec).front()};
  std::vector<std::string> names{"complete"};
  for (const auto& c : EnumerateConditions(s.spec)) {
    if (c.mask.count() == c.mask.width() - 1) {
      columns.push_back(c);
      names.push_back("-" + s.spec.entry(std::countr_zero(~c.mask.bits())).name);
    }
  }
  std::vector<std::vector<double>> mms(columns.size()), complete(columns.size());
  for (std::uint64_t seed : s.seeds) {
    TrainConfig t = s.base;
    t.seed = seed;
    t.regime = Regime::kMms;
    const Model a = s.Mms(s.backbone, t);
    t.regime = Regime::kComplete;
    const Model b = s.TrainOne(s.backbone, t);
    for (size_t c = 0; c < columns.size(); ++c) {
      mms[c].push_back(Points(EvaluateCondition(a, s.eval, columns[c]).miou));
      complete[c].push_back(Points(EvaluateCondition(b, s.eval, columns[c]).miou));
    }
  }
  std::ostringstream detail;
  bool ok = std::abs(Mean(mms[0]) - Mean(complete[0])) <= 3.0;
  for (size_t c = 0; c < columns.size(); ++c) {
    const double gap = Mean(mms[c]) - Mean(complete[c]);
    if (c > 0) ok &= gap >= 5.0;
    detail << names[c] << Fmt(": mms %.1f vs complete %.1f (%+.1f); ", Mean(mms[c]), Mean(complete[c]), gap);
  }
  return {ok, detail.str()};
}

Outcome AblationOrdering(TrainingSetup& s) {
  TrainConfig t = s.base;
  t.regime = Regime::kMms;
  const AblationReport report = RunAblation(
      s.train, s.eval, s.backbone, t, s.seeds,
      [&](const BackboneConfig& b, const TrainConfig& tc) { return s.Mms(b, tc); });
  Say(report.Table());
  const double full = Points(report.row(PromptSpace::kSpectrumSpatial).cells[0].mean);
  bool ok = true;
  std::ostringstream detail;
  detail << Fmt("complete: spectrum+spatial %.2f", full);
  for (PromptSpace single : {PromptSpace::kSpectrumOnly, PromptSpace::kSpatialOnly}) {
    const double other = Points(report.row(single).cells[0].mean);
    detail << ", " << ToString(single) << Fmt(" %.2f", other);
    if (full < other) {
      if (other - full <= 0.5) {
        detail << " (tie within 0.5)";
      } else {
        ok = false;
      }
    }
  }
  return {ok, detail.str()};
}

Outcome FailureMatrix() {
  const ModalitySpec spec = ModalitySpec::Quad();
  BackboneConfig c;
  c.depth = 2;
  c.d_model = 16;
  c.heads = 2;
  c.bottleneck = 8;
  c.prompt_count = 4;
  const Model model(spec, c, 9);
  const Dataset data = GenerateDataset(spec, {}, 4, 4001);
  const EvalReport report = EvaluateMatrix(model, data, {});
  int conditions = 0, failures = 0;
  for (const auto& row : report.rows) (row.kind == "condition" ? conditions : failures)++;
  if (conditions != 12 || failures != 5) {
    return {false, "rows: " + std::to_string(conditions) + " conditions, " + std::to_string(failures) + " failures"};
  }
  for (const Scene& scene : data.scenes) {
    for (FailureKind kind : kAllFailureKinds) {
      for (double severity : {0.1, 0.5, 1.0}) {
        Rng rng(SceneSeed(17, int(kind)));
        const Scene out = InjectFailure(scene, *DefaultFailure(kind, severity, spec), spec, rng);
        if (out.labels != scene.labels) return {false, "labels altered by " + ShortName(kind)};
      }
    }
    Rng rng(1);
    for (double severity : {1e-12, 1e-6, 1e-3}) {
      if (InjectFailure(scene, {FailureKind::kMotionBlur, severity, "rgb"}, spec, rng) != scene) {
        return {false, "vanishing blur is not the identity"};
      }
    }
  }
  return {true, "12 condition rows + 5 failure rows; labels untouched; vanishing blur is the identity"};
}

}  // namespace
}  // namespace missfpt

int main(int argc, char** argv) {
  using namespace missfpt;
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "criteria to run")->delimiter(',')->check(CLI::Range(1, 10));
  std::string log_path;
  app.add_option("--log", log_path, "also write the report to this file");
  CLI11_PARSE(app, argc, argv);
  if (!log_path.empty()) {
    g_log = std::fopen(log_path.c_str(), "w");
    if (!g_log) {
      std::fprintf(stderr, "cannot open %s\n", log_path.c_str());
      return 2;
    }
  }

  std::unique_ptr<TrainingSetup> setup;
  auto training = [&]() -> TrainingSetup& {
    if (!setup) setup = std::make_unique<TrainingSetup>();
    return *setup;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"condition counting", ConditionCounting},
      {"switch mask distribution", SwitchDistribution},
      {"fft correctness", FftCorrectness},
      {"prompt structure", PromptStructure},
      {"gradient correctness", GradientCorrectness},
      {"frozen backbone", FrozenBackbone},
      {"parameter accounting", ParameterAccounting},
      {"mms robustness", [&] { return MmsRobustness(training()); }},
      {"ablation ordering", [&] { return AblationOrdering(training()); }},
      {"failure matrix", FailureMatrix},
  };

  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = criteria[i].second();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    Say(std::string(outcome.pass ? "PASS" : "FAIL") + " criterion " + std::to_string(id) + " (" + criteria[i].first +
        "): " + outcome.detail + Fmt(" [%.1f s]\n", secs));
    failed += outcome.pass ? 0 : 1;
  }
  Say(failed == 0 ? "acceptance: all criteria passed\n" : "acceptance: " + std::to_string(failed) + " criteria failed\n");
  if (g_log) std::fclose(g_log);
  return failed == 0 ? 0 : 1;
}
