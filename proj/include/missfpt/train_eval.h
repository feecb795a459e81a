#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "missfpt/backbone.h"
#include "missfpt/data.h"
#include "missfpt/modality.h"

namespace missfpt {

// How modality presence is decided during training.
enum class Regime {
  kComplete,    // every modality always present; no mask is ever drawn
  kMms,         // one SwitchMask per batch
  kFixedRatio,  // static per-sample conditions assigned before training
};

struct TrainConfig {
  Regime regime = Regime::kMms;
  double missing_ratio = 0.7;  // fixed_ratio only
  TuningMode tuning = TuningMode::kPlusFpt;
  int epochs = 30;
  int batch_size = 2;
  double learning_rate = 2e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_steps = 0;
  std::optional<std::uint64_t> seed;  // mandatory for Train
};

// Accepts "complete", "mms", "fixed_ratio" and "fixed_ratio:<ratio>".
void ParseRegime(std::string_view text, TrainConfig& config);
std::string ToString(Regime regime);

struct TrainLogEntry {
  int step = 0;
  double loss = 0.0;
  std::string mask_bits;  // "11|10"; per-sample masks joined by ';' for fixed_ratio
};

struct TrainResult {
  Model model;
  std::vector<TrainLogEntry> log;
  int masks_sampled = 0;
  std::vector<std::uint64_t> mask_history;  // raw bits of every sampled mask
};

// Decoupled-weight-decay Adam over the tunable partition only. Deterministic
// given config.seed. Throws ConfigError without a seed, NumericError with
// the step index on a non-finite loss.
TrainResult Train(Model model, const Dataset& dataset, const TrainConfig& config);

// Builds the model from (spec, backbone, seed) and trains it.
TrainResult TrainFromScratch(const ModalitySpec& spec, const BackboneConfig& backbone, const Dataset& dataset,
                             const TrainConfig& config);

// ---------------------------------------------------------------------------
// Metrics.

// Rows are ground truth, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void Add(int truth, int prediction, std::int64_t count = 1);
  void Add(const LabelMap& truth, const LabelMap& prediction);
  void Merge(const ConfusionMatrix& other);

  int num_classes() const { return k_; }
  std::int64_t at(int truth, int prediction) const {
    return counts_[static_cast<size_t>(truth) * static_cast<size_t>(k_) + static_cast<size_t>(prediction)];
  }
  std::int64_t total() const;

  // TP / (TP + FP + FN) per class; nullopt where the union is empty.
  std::vector<std::optional<double>> PerClassIou() const;

 private:
  int k_;
  std::vector<std::int64_t> counts_;
};

// Mean IoU over classes with a non-empty union. Throws NumericError for an
// all-zero matrix.
double ComputeMiou(const ConfusionMatrix& cm);

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalConfig {
  bool failures = true;
  double severity = 0.5;
  std::uint64_t seed = 0;  // failure-injection stream
};

struct EvalRow {
  std::string label;  // "R,D" or "MB@0.5"
  std::string kind;   // "condition" or "failure"
  double miou = 0.0;
  std::vector<double> class_iou;  // NaN where excluded
  ConfusionMatrix confusion{1};
};

struct EvalReport {
  std::vector<EvalRow> rows;
  int num_classes = 0;
  std::string config_hash;

  double mean_miou() const;
  const EvalRow* find(std::string_view label) const;
};

EvalRow EvaluateCondition(const Model& model, const Dataset& dataset, const MissingCondition& condition);
EvalRow EvaluateFailure(const Model& model, const Dataset& dataset, const FailureSpec& failure, std::uint64_t seed);

// Every condition of EnumerateConditions, then every failure kind that has
// a target modality in the spec. Throws AlignmentError when the dataset's
// modality spec differs from the model's.
EvalReport EvaluateMatrix(const Model& model, const Dataset& dataset, const EvalConfig& config);

std::string ReportCsv(const EvalReport& report);
std::string ReportTable(const EvalReport& report);

// ---------------------------------------------------------------------------
// Gradient verification.

struct GradcheckOptions {
  double step = 1e-6;
  double tolerance = 1e-5;
  // Test hook: lets a caller corrupt the analytic gradients before they are
  // compared, to prove the check can fail.
  std::function<void(TensorMap&)> mutate_analytic;
};

struct GradcheckTensor {
  std::string name;
  bool tunable = false;
  // max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-8)
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckTensor> tensors;
  std::vector<std::string> failures;
  bool passed() const { return failures.empty(); }
};

// Tiny double-precision configuration used by the gradient checks:
// 8x8 image, patch 4, d=8, r=6, 3 prompts, two blocks.
BackboneConfig MicroConfig(bool use_fpt);

// Random micro model whose zero-initialized tensors are perturbed, and whose
// embeddings and attention are spread out, so every tunable gradient is well
// above the finite-difference noise floor.
Model PerturbedMicroModel(const ModalitySpec& spec, const BackboneConfig& config, std::uint64_t seed);

// Central differences against LossAndGradients for every tunable tensor;
// frozen tensors must receive no gradient at all.
GradcheckReport GradcheckSuite(const Model& model, const Scene& sample, TuningMode tuning,
                               const GradcheckOptions& options = {});

// GradcheckSuite over a perturbed micro model and a generated sample per seed.
GradcheckReport GradcheckSeeds(bool use_fpt, std::span<const std::uint64_t> seeds,
                               const GradcheckOptions& options = {});

// ---------------------------------------------------------------------------
// Prompt-space ablation.

struct AblationCell {
  std::vector<double> per_seed;
  double mean = 0.0;
  double stddev = 0.0;
};

struct AblationRow {
  PromptSpace variant = PromptSpace::kSpectrumSpatial;
  std::vector<AblationCell> cells;  // one per column
};

struct AblationReport {
  std::vector<std::string> columns;  // complete first, then one-dense-missing conditions
  std::vector<AblationRow> rows;     // spectrum_only, spatial_only, spectrum_spatial
  std::vector<std::uint64_t> seeds;

  const AblationRow& row(PromptSpace variant) const;
  std::string Table() const;
  std::string Csv() const;
};

using Trainer = std::function<Model(const BackboneConfig&, const TrainConfig&)>;

// Trains one model per (variant, seed) with everything else fixed and
// evaluates it on the complete condition and each single-dense-missing
// condition. `trainer` defaults to TrainFromScratch on `train`.
AblationReport RunAblation(const Dataset& train, const Dataset& eval, const BackboneConfig& base,
                           const TrainConfig& base_train, std::span<const std::uint64_t> seeds,
                           const Trainer& trainer = nullptr);

std::string ToString(PromptSpace variant);
PromptSpace ParsePromptSpace(std::string_view text);  // throws ConfigError

}  // namespace missfpt
