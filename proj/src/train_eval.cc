#include "missfpt/train_eval.h"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "missfpt/archive.h"
#include "missfpt/errors.h"
#include "missfpt/hash.h"

namespace missfpt {
namespace {

struct AdamState {
  TensorMap first;
  TensorMap second;
  int step = 0;
};

void AdamWStep(TensorMap& params, const TensorMap& grads, AdamState& state, const TrainConfig& c) {
  ++state.step;
  double lr = c.learning_rate;
  if (c.warmup_steps > 0) lr *= std::min(1.0, static_cast<double>(state.step) / c.warmup_steps);
  const double bias1 = 1.0 - std::pow(c.beta1, state.step);
  const double bias2 = 1.0 - std::pow(c.beta2, state.step);
  for (const auto& [name, g] : grads) {
    Matrix& p = params.at(name);
    auto [m_it, m_new] = state.first.try_emplace(name, Matrix::Zero(g.rows(), g.cols()));
    auto [v_it, v_new] = state.second.try_emplace(name, Matrix::Zero(g.rows(), g.cols()));
    Matrix& m = m_it->second;
    Matrix& v = v_it->second;
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    p.array() -= lr * ((m.array() / bias1) / ((v.array() / bias2).sqrt() + c.adam_eps) + c.weight_decay * p.array());
  }
}

std::string FormatPercent(double v, int precision = 2) {
  if (std::isnan(v)) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << 100.0 * v;
  return os.str();
}

std::string FormatSeverity(double s) {
  std::ostringstream os;
  os << s;
  return os.str();
}

EvalRow RowFromConfusion(std::string label, std::string kind, const ConfusionMatrix& cm) {
  EvalRow row;
  row.label = std::move(label);
  row.kind = std::move(kind);
  row.miou = ComputeMiou(cm);
  for (const auto& iou : cm.PerClassIou()) row.class_iou.push_back(iou.value_or(std::numeric_limits<double>::quiet_NaN()));
  row.confusion = cm;
  return row;
}

void RequireSameSpec(const Model& model, const Dataset& dataset) {
  if (!(model.spec() == dataset.spec)) throw AlignmentError("dataset modalities do not match the model's modality spec");
}

}  // namespace

void ParseRegime(std::string_view text, TrainConfig& config) {
  if (text == "complete") {
    config.regime = Regime::kComplete;
  } else if (text == "mms") {
    config.regime = Regime::kMms;
  } else if (text == "fixed_ratio") {
    config.regime = Regime::kFixedRatio;
  } else if (text.substr(0, 12) == "fixed_ratio:") {
    config.regime = Regime::kFixedRatio;
    const std::string value(text.substr(12));
    size_t used = 0;
    double ratio = 0.0;
    try {
      ratio = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != value.size() || value.empty() || !(ratio >= 0.0 && ratio <= 1.0)) {
      throw ConfigError("fixed_ratio needs a ratio in [0, 1], got '" + value + "'");
    }
    config.missing_ratio = ratio;
  } else {
    throw ConfigError("unknown regime: '" + std::string(text) + "'");
  }
}

std::string ToString(Regime regime) {
  switch (regime) {
    case Regime::kComplete: return "complete";
    case Regime::kMms: return "mms";
    case Regime::kFixedRatio: return "fixed_ratio";
  }
  return "?";
}

TrainResult Train(Model model, const Dataset& dataset, const TrainConfig& config) {
  if (!config.seed) throw ConfigError("training requires an explicit seed");
  if (dataset.scenes.empty()) throw ConfigError("training dataset is empty");
  if (config.batch_size < 1) throw ConfigError("batch_size must be positive");
  RequireSameSpec(model, dataset);

  const ModalitySpec spec = model.spec();
  const DropoutMode dropout = model.config().dropout_mode;
  const ParameterPartition partition = PartitionParameters(model, config.tuning);
  Rng rng(SplitMix64(*config.seed ^ 0x6d6d732d747261ULL));

  std::vector<MissingCondition> fixed;
  if (config.regime == Regime::kFixedRatio) {
    fixed = AssignFixedMissingRatio(static_cast<int>(dataset.scenes.size()), config.missing_ratio, spec, rng);
  }
  const std::string all_on = SwitchMask::AllOn(spec.size()).ToString(spec);

  TrainResult result{std::move(model), {}, 0, {}};
  AdamState adam;
  std::vector<int> order(dataset.scenes.size());
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
      std::optional<SwitchMask> batch_mask;
      std::string bits;
      if (config.regime == Regime::kMms) {
        batch_mask = SampleSwitchMask(spec, rng);
        ++result.masks_sampled;
        result.mask_history.push_back(batch_mask->bits());
        bits = batch_mask->ToString(spec);
      } else if (config.regime == Regime::kComplete) {
        bits = all_on;
      }

      TensorMap grads;
      double loss_sum = 0.0;
      for (size_t b = start; b < end; ++b) {
        const int idx = order[b];
        const Scene& scene = dataset.scenes[static_cast<size_t>(idx)];
        try {
          if (config.regime == Regime::kComplete) {
            loss_sum += LossAndGradients(result.model, scene, partition, grads);
          } else {
            const SwitchMask& mask = batch_mask ? *batch_mask : fixed[static_cast<size_t>(idx)].mask;
            if (!batch_mask) bits += (bits.empty() ? "" : ";") + mask.ToString(spec);
            loss_sum += LossAndGradients(result.model, ApplyModalityDropout(scene, mask, dropout, spec), partition,
                                         grads);
          }
        } catch (const NumericError& e) {
          throw NumericError("step " + std::to_string(step) + ": " + e.what());
        }
      }
      const double n = static_cast<double>(end - start);
      const double loss = loss_sum / n;
      if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
      for (auto& [_, g] : grads) g /= n;
      AdamWStep(result.model.params(), grads, adam, config);
      result.log.push_back({step, loss, bits});
      ++step;
    }
  }
  return result;
}

TrainResult TrainFromScratch(const ModalitySpec& spec, const BackboneConfig& backbone, const Dataset& dataset,
                             const TrainConfig& config) {
  if (!config.seed) throw ConfigError("training requires an explicit seed");
  return Train(Model(spec, backbone, *config.seed), dataset, config);
}

// ---------------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
  if (num_classes < 1) throw ShapeError("confusion matrix needs at least one class");
  counts_.assign(static_cast<size_t>(k_) * static_cast<size_t>(k_), 0);
}

void ConfusionMatrix::Add(int truth, int prediction, std::int64_t count) {
  if (truth < 0 || truth >= k_ || prediction < 0 || prediction >= k_) throw ShapeError("class index out of range");
  if (count < 0) throw ShapeError("negative confusion count");
  counts_[static_cast<size_t>(truth) * static_cast<size_t>(k_) + static_cast<size_t>(prediction)] += count;
}

void ConfusionMatrix::Add(const LabelMap& truth, const LabelMap& prediction) {
  if (truth.height != prediction.height || truth.width != prediction.width) {
    throw ShapeError("prediction and ground truth sizes differ");
  }
  for (size_t i = 0; i < truth.data.size(); ++i) Add(truth.data[i], prediction.data[i]);
}

void ConfusionMatrix::Merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw ShapeError("cannot merge confusion matrices of different size");
  for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0}); }

std::vector<std::optional<double>> ConfusionMatrix::PerClassIou() const {
  std::vector<std::optional<double>> out(static_cast<size_t>(k_));
  for (int c = 0; c < k_; ++c) {
    const std::int64_t tp = at(c, c);
    std::int64_t row = 0, col = 0;
    for (int j = 0; j < k_; ++j) {
      row += at(c, j);
      col += at(j, c);
    }
    const std::int64_t uni = row + col - tp;
    if (uni > 0) out[static_cast<size_t>(c)] = static_cast<double>(tp) / static_cast<double>(uni);
  }
  return out;
}

double ComputeMiou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw NumericError("mIoU is undefined for an empty confusion matrix");
  double sum = 0.0;
  int counted = 0;
  for (const auto& iou : cm.PerClassIou()) {
    if (!iou) continue;
    sum += *iou;
    ++counted;
  }
  return sum / counted;
}

// ---------------------------------------------------------------------------

double EvalReport::mean_miou() const {
  if (rows.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (const auto& r : rows) s += r.miou;
  return s / static_cast<double>(rows.size());
}

const EvalRow* EvalReport::find(std::string_view label) const {
  for (const auto& r : rows) {
    if (r.label == label) return &r;
  }
  return nullptr;
}

EvalRow EvaluateCondition(const Model& model, const Dataset& dataset, const MissingCondition& condition) {
  RequireSameSpec(model, dataset);
  if (condition.mask.width() != model.spec().size()) throw AlignmentError("condition does not match the modality spec");
  ConfusionMatrix cm(model.config().num_classes);
  for (const Scene& scene : dataset.scenes) {
    const Scene input = condition.complete()
                            ? scene
                            : ApplyModalityDropout(scene, condition.mask, model.config().dropout_mode, model.spec());
    cm.Add(scene.labels, Predict(model, input));
  }
  return RowFromConfusion(condition.Label(model.spec()), "condition", cm);
}

EvalRow EvaluateFailure(const Model& model, const Dataset& dataset, const FailureSpec& failure, std::uint64_t seed) {
  RequireSameSpec(model, dataset);
  ConfusionMatrix cm(model.config().num_classes);
  const std::uint64_t stream = seed ^ Fnv1a64(LongName(failure.kind));
  for (size_t i = 0; i < dataset.scenes.size(); ++i) {
    Rng rng(SplitMix64(stream + i));
    const Scene& scene = dataset.scenes[i];
    cm.Add(scene.labels, Predict(model, InjectFailure(scene, failure, model.spec(), rng)));
  }
  return RowFromConfusion(ShortName(failure.kind) + "@" + FormatSeverity(failure.severity), "failure", cm);
}

EvalReport EvaluateMatrix(const Model& model, const Dataset& dataset, const EvalConfig& config) {
  RequireSameSpec(model, dataset);
  if (dataset.scenes.empty()) throw ConfigError("evaluation dataset is empty");
  EvalReport report;
  report.num_classes = model.config().num_classes;
  for (const auto& condition : EnumerateConditions(model.spec())) {
    report.rows.push_back(EvaluateCondition(model, dataset, condition));
  }
  if (config.failures) {
    for (FailureKind kind : kAllFailureKinds) {
      if (auto failure = DefaultFailure(kind, config.severity, model.spec())) {
        report.rows.push_back(EvaluateFailure(model, dataset, *failure, config.seed));
      }
    }
  }
  return report;
}

std::string ReportCsv(const EvalReport& report) {
  std::ostringstream os;
  os << "# tool_version=" << ToolVersion() << " config_hash=" << report.config_hash << "\n";
  os << "label,kind,miou";
  for (int k = 0; k < report.num_classes; ++k) os << ",iou_" << k;
  os << "\n";
  os << std::setprecision(10);
  for (const auto& r : report.rows) {
    os << '"' << r.label << '"' << "," << r.kind << "," << r.miou;
    for (double v : r.class_iou) {
      os << ",";
      if (!std::isnan(v)) os << v;
    }
    os << "\n";
  }
  os << "mean,summary," << report.mean_miou() << "\n";
  return os.str();
}

std::string ReportTable(const EvalReport& report) {
  std::ostringstream os;
  os << "# tool_version=" << ToolVersion() << " config_hash=" << report.config_hash << "\n";
  size_t label_width = 9;
  for (const auto& r : report.rows) label_width = std::max(label_width, r.label.size());
  os << std::left << std::setw(static_cast<int>(label_width)) << "condition" << "  " << std::setw(9) << "kind"
     << std::right << std::setw(8) << "mIoU";
  for (int k = 0; k < report.num_classes; ++k) os << std::setw(8) << ("c" + std::to_string(k));
  os << "\n";
  for (const auto& r : report.rows) {
    os << std::left << std::setw(static_cast<int>(label_width)) << r.label << "  " << std::setw(9) << r.kind
       << std::right << std::setw(8) << FormatPercent(r.miou);
    for (double v : r.class_iou) os << std::setw(8) << FormatPercent(v);
    os << "\n";
  }
  os << std::left << std::setw(static_cast<int>(label_width)) << "mean" << "  " << std::setw(9) << "" << std::right
     << std::setw(8) << FormatPercent(report.mean_miou()) << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------

BackboneConfig MicroConfig(bool use_fpt) {
  BackboneConfig c;
  c.depth = 2;
  c.d_model = 8;
  c.heads = 2;
  c.mlp_hidden = 16;
  c.patch_size = 4;
  c.prompt_count = 3;
  c.bottleneck = 6;
  c.fpt_blocks = 1;
  c.num_classes = 3;
  c.image_height = 8;
  c.image_width = 8;
  c.use_fpt = use_fpt;
  return c;
}

Model PerturbedMicroModel(const ModalitySpec& spec, const BackboneConfig& config, std::uint64_t seed) {
  Model model(spec, config, seed);
  Rng rng(SplitMix64(seed ^ 0x70657274ULL));
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& [name, t] : model.params()) {
    if (name.rfind("decoder.", 0) == 0) {
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
    } else if (name.ends_with(".w_up")) {
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = 3.0 * u(rng);
    } else if (name.ends_with(".pos") || name.ends_with(".modality")) {
      t *= 10.0;
    } else if (name.ends_with("attn.w_qkv")) {
      t *= 3.0;
    } else if (name.ends_with(".scale")) {
      t(0, 0) = 0.7 + 0.2 * u(rng);
    } else if (name.ends_with(".gamma") || name.ends_with(".beta")) {
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += 0.2 * u(rng);
    }
  }
  return model;
}

GradcheckReport GradcheckSuite(const Model& model, const Scene& sample, TuningMode tuning,
                               const GradcheckOptions& options) {
  const ParameterPartition partition = PartitionParameters(model, tuning);
  TensorMap analytic;
  LossAndGradients(model, sample, partition, analytic);
  if (options.mutate_analytic) options.mutate_analytic(analytic);

  GradcheckReport report;
  for (const auto& [name, _] : partition.frozen) {
    GradcheckTensor t{name, false, 0.0, 0.0};
    if (auto it = analytic.find(name); it != analytic.end()) {
      t.max_abs_grad = it->second.cwiseAbs().maxCoeff();
      report.failures.push_back(name + " (frozen tensor received a gradient)");
    }
    report.tensors.push_back(t);
  }

  Model probe = model;
  for (const auto& [name, _] : partition.tunable) {
    Matrix& p = probe.params().at(name);
    const Matrix zeros = Matrix::Zero(p.rows(), p.cols());
    const auto it = analytic.find(name);
    const Matrix& a = it != analytic.end() ? it->second : zeros;
    Matrix numeric(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double orig = p.data()[i];
      p.data()[i] = orig + options.step;
      const double plus = Loss(probe, sample);
      p.data()[i] = orig - options.step;
      const double minus = Loss(probe, sample);
      p.data()[i] = orig;
      numeric.data()[i] = (plus - minus) / (2.0 * options.step);
    }
    const double scale = std::max({a.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-8});
    GradcheckTensor t{name, true, (a - numeric).cwiseAbs().maxCoeff() / scale, a.cwiseAbs().maxCoeff()};
    if (!(t.max_rel_error < options.tolerance)) {
      std::ostringstream os;
      os << name << " (relative error " << std::scientific << t.max_rel_error << ")";
      report.failures.push_back(os.str());
    }
    report.tensors.push_back(t);
  }
  return report;
}

GradcheckReport GradcheckSeeds(bool use_fpt, std::span<const std::uint64_t> seeds, const GradcheckOptions& options) {
  const ModalitySpec spec = ModalitySpec::RgbDepth();
  const BackboneConfig config = MicroConfig(use_fpt);
  SceneConfig scene_config;
  scene_config.height = config.image_height;
  scene_config.width = config.image_width;
  scene_config.num_classes = config.num_classes;

  GradcheckReport merged;
  std::map<std::string, size_t> index;
  for (std::uint64_t seed : seeds) {
    const Model model = PerturbedMicroModel(spec, config, seed);
    Scene sample = GenerateScene(seed, scene_config, spec);
    Rng rng(SplitMix64(seed ^ 0x6c6162656c73ULL));
    std::uniform_int_distribution<int> label(0, config.num_classes - 1);
    for (auto& v : sample.labels.data) v = label(rng);

    const auto tuning = use_fpt ? TuningMode::kPlusFpt : TuningMode::kPlusAdapter;
    const GradcheckReport r = GradcheckSuite(model, sample, tuning, options);
    for (const auto& t : r.tensors) {
      auto [it, inserted] = index.try_emplace(t.name, merged.tensors.size());
      if (inserted) {
        merged.tensors.push_back(t);
      } else {
        auto& m = merged.tensors[it->second];
        m.max_rel_error = std::max(m.max_rel_error, t.max_rel_error);
        m.max_abs_grad = std::max(m.max_abs_grad, t.max_abs_grad);
      }
    }
    for (const auto& f : r.failures) merged.failures.push_back("seed " + std::to_string(seed) + ": " + f);
  }
  return merged;
}

// ---------------------------------------------------------------------------

std::string ToString(PromptSpace variant) {
  switch (variant) {
    case PromptSpace::kSpectrumSpatial: return "spectrum_spatial";
    case PromptSpace::kSpectrumOnly: return "spectrum_only";
    case PromptSpace::kSpatialOnly: return "spatial_only";
  }
  return "?";
}

PromptSpace ParsePromptSpace(std::string_view text) {
  if (text == "spectrum_spatial") return PromptSpace::kSpectrumSpatial;
  if (text == "spectrum_only") return PromptSpace::kSpectrumOnly;
  if (text == "spatial_only") return PromptSpace::kSpatialOnly;
  throw ConfigError("unknown prompt space: '" + std::string(text) + "'");
}

const AblationRow& AblationReport::row(PromptSpace variant) const {
  for (const auto& r : rows) {
    if (r.variant == variant) return r;
  }
  throw ConfigError("ablation report has no row for " + ToString(variant));
}

std::string AblationReport::Table() const {
  std::ostringstream os;
  os << std::left << std::setw(10) << "Spectrum" << std::setw(12) << "Spatiality";
  for (const auto& c : columns) os << std::right << std::setw(16) << c;
  os << "\n";
  for (const auto& r : rows) {
    const bool spectrum = r.variant != PromptSpace::kSpatialOnly;
    const bool spatial = r.variant != PromptSpace::kSpectrumOnly;
    os << std::left << std::setw(10) << (spectrum ? "x" : "") << std::setw(12) << (spatial ? "x" : "");
    for (const auto& cell : r.cells) {
      std::ostringstream v;
      v << FormatPercent(cell.mean) << " +/- " << FormatPercent(cell.stddev);
      os << std::right << std::setw(16) << v.str();
    }
    os << "\n";
  }
  return os.str();
}

std::string AblationReport::Csv() const {
  std::ostringstream os;
  os << "# tool_version=" << ToolVersion() << " seeds=" << seeds.size() << "\n";
  os << "variant";
  for (const auto& c : columns) os << ",\"" << c << " mean\",\"" << c << " std\"";
  os << "\n" << std::setprecision(10);
  for (const auto& r : rows) {
    os << ToString(r.variant);
    for (const auto& cell : r.cells) os << "," << cell.mean << "," << cell.stddev;
    os << "\n";
  }
  return os.str();
}

AblationReport RunAblation(const Dataset& train, const Dataset& eval, const BackboneConfig& base,
                           const TrainConfig& base_train, std::span<const std::uint64_t> seeds,
                           const Trainer& trainer) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  const ModalitySpec& spec = train.spec;
  const auto all = EnumerateConditions(spec);

  // Complete, then each condition missing exactly one dense modality.
  std::vector<MissingCondition> columns{all.front()};
  for (int i = 0; i < spec.size(); ++i) {
    if (!spec.is_dense(i) || spec.dense_count() < 2) continue;
    SwitchMask mask = SwitchMask::AllOn(spec.size());
    mask.set(i, false);
    for (const auto& c : all) {
      if (c.mask == mask) columns.push_back(c);
    }
  }

  AblationReport report;
  report.seeds.assign(seeds.begin(), seeds.end());
  for (size_t c = 0; c < columns.size(); ++c) {
    report.columns.push_back(c == 0 ? columns[c].Label(spec) : "-" + spec.entry(static_cast<int>(
                                                                        std::countr_zero(~columns[c].mask.bits()))).name);
  }

  Trainer train_one = trainer;
  if (!train_one) {
    train_one = [&](const BackboneConfig& b, const TrainConfig& t) {
      return TrainFromScratch(spec, b, train, t).model;
    };
  }

  for (PromptSpace variant : {PromptSpace::kSpectrumOnly, PromptSpace::kSpatialOnly, PromptSpace::kSpectrumSpatial}) {
    AblationRow row;
    row.variant = variant;
    row.cells.resize(columns.size());
    BackboneConfig config = base;
    config.spectral.variant = variant;
    for (std::uint64_t seed : seeds) {
      TrainConfig tc = base_train;
      tc.seed = seed;
      const Model model = train_one(config, tc);
      for (size_t c = 0; c < columns.size(); ++c) {
        row.cells[c].per_seed.push_back(EvaluateCondition(model, eval, columns[c]).miou);
      }
    }
    for (auto& cell : row.cells) {
      const double n = static_cast<double>(cell.per_seed.size());
      cell.mean = std::accumulate(cell.per_seed.begin(), cell.per_seed.end(), 0.0) / n;
      double ss = 0.0;
      for (double v : cell.per_seed) ss += (v - cell.mean) * (v - cell.mean);
      cell.stddev = cell.per_seed.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace missfpt
