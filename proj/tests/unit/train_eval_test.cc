#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "missfpt/config.h"
#include "missfpt/errors.h"
#include "missfpt/train_eval.h"

namespace missfpt {
namespace {

SceneConfig MicroScenes(const BackboneConfig& c) {
  SceneConfig s;
  s.height = c.image_height;
  s.width = c.image_width;
  s.num_classes = c.num_classes;
  s.min_shapes = 1;
  s.max_shapes = 2;
  return s;
}

TrainConfig QuickTrain(Regime regime, TuningMode tuning, int epochs = 1) {
  TrainConfig t;
  t.regime = regime;
  t.tuning = tuning;
  t.epochs = epochs;
  t.seed = 5;
  return t;
}

TEST(ParseRegime, Forms) {
  TrainConfig t;
  ParseRegime("complete", t);
  EXPECT_EQ(t.regime, Regime::kComplete);
  ParseRegime("fixed_ratio:0.25", t);
  EXPECT_EQ(t.regime, Regime::kFixedRatio);
  EXPECT_EQ(t.missing_ratio, 0.25);
  ParseRegime("mms", t);
  EXPECT_EQ(t.regime, Regime::kMms);
  EXPECT_THROW(ParseRegime("fixed_ratio:1.5", t), ConfigError);
  EXPECT_THROW(ParseRegime("fixed_ratio:abc", t), ConfigError);
  EXPECT_THROW(ParseRegime("random", t), ConfigError);
}

TEST(Train, ZeroEpochsKeepsInitialization) {
  const auto spec = ModalitySpec::RgbDepth();
  const BackboneConfig c = MicroConfig(true);
  const Dataset d = GenerateDataset(spec, MicroScenes(c), 4, 1);
  const Model init(spec, c, 5);
  const TrainResult r = Train(init, d, QuickTrain(Regime::kMms, TuningMode::kPlusFpt, 0));
  EXPECT_EQ(r.model.params(), init.params());
  EXPECT_TRUE(r.log.empty());
}

TEST(Train, DeterministicGivenSeed) {
  const auto spec = ModalitySpec::RgbDepth();
  const BackboneConfig c = MicroConfig(true);
  const Dataset d = GenerateDataset(spec, MicroScenes(c), 6, 1);
  const auto cfg = QuickTrain(Regime::kMms, TuningMode::kPlusFpt, 2);
  const TrainResult a = TrainFromScratch(spec, c, d, cfg);
  const TrainResult b = TrainFromScratch(spec, c, d, cfg);
  ASSERT_EQ(a.log.size(), 6u);
  for (size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].loss, b.log[i].loss);
    EXPECT_EQ(a.log[i].mask_bits, b.log[i].mask_bits);
  }
  EXPECT_EQ(a.model.params(), b.model.params());
}

TEST(Train, FrozenTensorsBitIdentical) {
  const auto spec = ModalitySpec::RgbDepth();
  const BackboneConfig c = MicroConfig(true);
  const Dataset d = GenerateDataset(spec, MicroScenes(c), 20, 2);
  for (auto tuning : {TuningMode::kDecoderOnly, TuningMode::kPlusFpt, TuningMode::kPlusAdapter}) {
    for (auto regime : {Regime::kComplete, Regime::kMms, Regime::kFixedRatio}) {
      const Model init(spec, c, 3);
      const TrainResult r = Train(init, d, QuickTrain(regime, tuning));
      ASSERT_EQ(r.log.size(), 10u);
      const auto part = PartitionParameters(init, tuning);
      for (const auto& [name, _] : part.frozen) EXPECT_EQ(r.model.param(name), init.param(name)) << name;
      bool moved = false;
      for (const auto& [name, _] : part.tunable) moved |= r.model.param(name) != init.param(name);
      EXPECT_TRUE(moved);
    }
  }
}

TEST(Train, CompleteRegimeSamplesNoMask) {
  const auto spec = ModalitySpec::RgbDepth();
  const BackboneConfig c = MicroConfig(false);
  const Dataset d = GenerateDataset(spec, MicroScenes(c), 6, 2);
  const TrainResult r = TrainFromScratch(spec, c, d, QuickTrain(Regime::kComplete, TuningMode::kPlusAdapter, 2));
  EXPECT_EQ(r.masks_sampled, 0);
  EXPECT_TRUE(r.mask_history.empty());
  for (const auto& e : r.log) EXPECT_EQ(e.mask_bits, "11|");
  const TrainResult m = TrainFromScratch(spec, c, d, QuickTrain(Regime::kMms, TuningMode::kPlusAdapter, 2));
  EXPECT_EQ(m.masks_sampled, 6);
}

TEST(Train, MmsVisitsMostConditions) {
  const auto spec = ModalitySpec::Quad();
  const BackboneConfig c = MicroConfig(true);
  const Dataset d = GenerateDataset(spec, MicroScenes(c), 200, 3);
  TrainConfig t = QuickTrain(Regime::kMms, TuningMode::kDecoderOnly);
  t.batch_size = 1;
  const TrainResult r = TrainFromScratch(spec, c, d, t);
  ASSERT_EQ(r.masks_sampled, 200);
  const std::set<std::uint64_t> seen(r.mask_history.begin(), r.mask_history.end());
  EXPECT_GE(seen.size(), 10u);
  for (auto bits : seen) EXPECT_TRUE(bits & 3u);
}

TEST(Train, FixedRatioLogsPerSampleMasks) {
  const auto spec = ModalitySpec::RgbDepth();
  const BackboneConfig c = MicroConfig(true);
  const Dataset d = GenerateDataset(spec, MicroScenes(c), 4, 2);
  const TrainResult r = TrainFromScratch(spec, c, d, QuickTrain(Regime::kFixedRatio, TuningMode::kPlusFpt));
  EXPECT_EQ(r.masks_sampled, 0);
  for (const auto& e : r.log) EXPECT_EQ(std::count(e.mask_bits.begin(), e.mask_bits.end(), ';'), 1);
}

TEST(Train, Errors) {
  const auto spec = ModalitySpec::RgbDepth();
  const BackboneConfig c = MicroConfig(true);
  const Dataset d = GenerateDataset(spec, MicroScenes(c), 4, 2);
  TrainConfig t = QuickTrain(Regime::kMms, TuningMode::kPlusFpt);
  t.seed.reset();
  EXPECT_THROW(TrainFromScratch(spec, c, d, t), ConfigError);
  EXPECT_THROW(TrainFromScratch(ModalitySpec::Quad(), c, d, QuickTrain(Regime::kMms, TuningMode::kPlusFpt)),
               AlignmentError);
  Model broken(spec, c, 1);
  broken.params().at("block0.mlp.w1")(0, 0) = std::nan("");
  try {
    Train(broken, d, QuickTrain(Regime::kMms, TuningMode::kPlusFpt));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------

TEST(Miou, PerfectDiagonal) {
  ConfusionMatrix cm(3);
  cm.Add(0, 0, 5);
  cm.Add(1, 1, 2);
  cm.Add(2, 2, 9);
  EXPECT_EQ(ComputeMiou(cm), 1.0);
}

TEST(Miou, ConstantPredictionOnBalancedTwoClass) {
  // 50 pixels of each class, all predicted 0: IoU0 = 50/100, IoU1 = 0/50.
  ConfusionMatrix cm(2);
  cm.Add(0, 0, 50);
  cm.Add(1, 0, 50);
  const auto iou = cm.PerClassIou();
  EXPECT_EQ(*iou[0], 0.5);
  EXPECT_EQ(*iou[1], 0.0);
  EXPECT_EQ(ComputeMiou(cm), 0.25);
}

TEST(Miou, ZeroUnionClassesExcluded) {
  ConfusionMatrix cm(3);
  cm.Add(0, 0, 3);
  cm.Add(1, 0, 1);
  EXPECT_FALSE(cm.PerClassIou()[2].has_value());
  EXPECT_DOUBLE_EQ(ComputeMiou(cm), (0.75 + 0.0) / 2.0);
}

TEST(Miou, EmptyMatrixThrows) {
  EXPECT_THROW(ComputeMiou(ConfusionMatrix(4)), NumericError);
  ConfusionMatrix cm(2);
  EXPECT_THROW(cm.Add(2, 0), ShapeError);
  EXPECT_THROW(cm.Merge(ConfusionMatrix(3)), ShapeError);
}

TEST(Miou, PropertiesOnRandomMatrices) {
  Rng rng(9);
  std::uniform_int_distribution<int> count(0, 20);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + trial % 5;
    ConfusionMatrix cm(k);
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) cm.Add(i, j, count(rng));
    }
    if (cm.total() == 0) continue;
    const double base = ComputeMiou(cm);
    EXPECT_GE(base, 0.0);
    EXPECT_LE(base, 1.0);

    // Consistent relabelling leaves mIoU unchanged (up to summation order).
    std::vector<int> perm(static_cast<size_t>(k));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    ConfusionMatrix permuted(k);
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) permuted.Add(perm[size_t(i)], perm[size_t(j)], cm.at(i, j));
    }
    EXPECT_NEAR(ComputeMiou(permuted), base, 1e-12);

    // More correct pixels never lower the score.
    ConfusionMatrix better = cm;
    better.Add(trial % k, trial % k, 1 + count(rng));
    EXPECT_GE(ComputeMiou(better), base - 1e-15);
  }
}

// ---------------------------------------------------------------------------

TEST(EvaluateMatrix, RowCounts) {
  const BackboneConfig base = MicroConfig(true);
  {
    const auto spec = ModalitySpec::Quad();
    const Model m(spec, base, 1);
    const Dataset d = GenerateDataset(spec, MicroScenes(base), 3, 4);
    const EvalReport r = EvaluateMatrix(m, d, {});
    ASSERT_EQ(r.rows.size(), 12u + 5u);
    for (size_t i = 0; i < 12; ++i) EXPECT_EQ(r.rows[i].kind, "condition");
    for (size_t i = 12; i < 17; ++i) EXPECT_EQ(r.rows[i].kind, "failure");
    EXPECT_EQ(r.rows[12].label, "MB@0.5");
    double mean = 0.0;
    for (const auto& row : r.rows) mean += row.miou / 17.0;
    EXPECT_NEAR(r.mean_miou(), mean, 1e-12);
  }
  {
    const auto spec = ModalitySpec::RgbDepth();
    const Model m(spec, base, 1);
    const Dataset d = GenerateDataset(spec, MicroScenes(base), 3, 4);
    EXPECT_EQ(EvaluateMatrix(m, d, {}).rows.size(), 3u + 3u);
    EXPECT_EQ(EvaluateMatrix(m, d, {false, 0.5, 0}).rows.size(), 3u);
  }
}

TEST(EvaluateMatrix, CompleteRowEqualsDirectEvaluation) {
  const auto spec = ModalitySpec::RgbDepth();
  const BackboneConfig c = MicroConfig(true);
  const Model m = PerturbedMicroModel(spec, c, 2);
  const Dataset d = GenerateDataset(spec, MicroScenes(c), 5, 4);
  const EvalReport r = EvaluateMatrix(m, d, {});
  const EvalRow direct = EvaluateCondition(m, d, EnumerateConditions(spec)[0]);
  EXPECT_EQ(r.rows[0].miou, direct.miou);
  EXPECT_EQ(r.rows[0].label, "R,D");
  const EvalRow* found = r.find("D");
  ASSERT_NE(found, nullptr);
  EXPECT_EQ(found->miou, EvaluateCondition(m, d, ParseCondition(spec, "D")).miou);
}

TEST(EvaluateMatrix, FailureRowsDeterministic) {
  const auto spec = ModalitySpec::Quad();
  const BackboneConfig c = MicroConfig(true);
  const Model m = PerturbedMicroModel(spec, c, 2);
  const Dataset d = GenerateDataset(spec, MicroScenes(c), 4, 4);
  const auto a = EvaluateMatrix(m, d, {true, 0.5, 3});
  const auto b = EvaluateMatrix(m, d, {true, 0.5, 3});
  for (size_t i = 0; i < a.rows.size(); ++i) EXPECT_EQ(a.rows[i].miou, b.rows[i].miou);
}

TEST(EvaluateMatrix, SpecMismatchThrows) {
  const BackboneConfig c = MicroConfig(true);
  const Model m(ModalitySpec::RgbDepth(), c, 1);
  const Dataset d = GenerateDataset(ModalitySpec::Quad(), MicroScenes(c), 2, 4);
  EXPECT_THROW(EvaluateMatrix(m, d, {}), AlignmentError);
}

TEST(Reports, EmbedHashAndVersion) {
  const auto spec = ModalitySpec::RgbDepth();
  const BackboneConfig c = MicroConfig(true);
  const Model m(spec, c, 1);
  EvalReport r = EvaluateMatrix(m, GenerateDataset(spec, MicroScenes(c), 2, 4), {});
  r.config_hash = "0123456789abcdef";
  const std::string csv = ReportCsv(r);
  EXPECT_NE(csv.find("config_hash=0123456789abcdef"), std::string::npos);
  EXPECT_NE(csv.find("tool_version=" + std::string(MISSFPT_TEST_VERSION)), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2 + 6 + 1);
  EXPECT_NE(ReportTable(r).find("R,D"), std::string::npos);
}

// ---------------------------------------------------------------------------

TEST(Gradcheck, AdapterAndFptModelsPass) {
  const std::uint64_t seeds[] = {1, 2, 3};
  for (bool fpt : {false, true}) {
    const GradcheckReport r = GradcheckSeeds(fpt, seeds);
    for (const auto& f : r.failures) ADD_FAILURE() << f;
    for (const auto& t : r.tensors) {
      if (!t.tunable) EXPECT_EQ(t.max_abs_grad, 0.0) << t.name;
      if (t.tunable) EXPECT_GT(t.max_abs_grad, 0.0) << t.name;
    }
  }
}

TEST(Gradcheck, WrongSignMutationFails) {
  const std::uint64_t seeds[] = {1};
  GradcheckOptions opts;
  opts.mutate_analytic = [](TensorMap& g) { g.at("adapter.block0.w_down") *= -1.0; };
  const GradcheckReport r = GradcheckSeeds(true, seeds, opts);
  ASSERT_FALSE(r.passed());
  EXPECT_NE(r.failures.front().find("adapter.block0.w_down"), std::string::npos);
}

TEST(Gradcheck, FrozenGradientIsFlagged) {
  const auto spec = ModalitySpec::RgbDepth();
  const BackboneConfig c = MicroConfig(true);
  const Model m = PerturbedMicroModel(spec, c, 1);
  const Scene s = GenerateScene(1, MicroScenes(c), spec);
  GradcheckOptions opts;
  opts.mutate_analytic = [](TensorMap& g) { g["block0.mlp.w1"] = Matrix::Ones(8, 16); };
  const GradcheckReport r = GradcheckSuite(m, s, TuningMode::kDecoderOnly, opts);
  ASSERT_EQ(r.failures.size(), 1u);
  EXPECT_NE(r.failures[0].find("block0.mlp.w1"), std::string::npos);
}

TEST(RunAblation, ThreeRowsDifferingOnlyInVariant) {
  const auto spec = ModalitySpec::RgbDepth();
  const BackboneConfig c = MicroConfig(true);
  const Dataset d = GenerateDataset(spec, MicroScenes(c), 2, 4);
  std::vector<BackboneConfig> seen;
  std::vector<std::uint64_t> seeds_seen;
  const Trainer stub = [&](const BackboneConfig& b, const TrainConfig& t) {
    seen.push_back(b);
    seeds_seen.push_back(*t.seed);
    return PerturbedMicroModel(spec, b, *t.seed);
  };
  const std::uint64_t seeds[] = {4, 5, 6};
  const AblationReport r = RunAblation(d, d, c, QuickTrain(Regime::kMms, TuningMode::kPlusFpt), seeds, stub);
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_EQ(r.columns, std::vector<std::string>({"R,D", "-rgb", "-depth"}));
  ASSERT_EQ(seen.size(), 9u);
  for (size_t i = 0; i < seen.size(); ++i) {
    BackboneConfig normalized = seen[i];
    normalized.spectral.variant = c.spectral.variant;
    EXPECT_EQ(ToJson(normalized).dump(), ToJson(c).dump());
    EXPECT_EQ(seeds_seen[i], seeds[i % 3]);
  }
  EXPECT_EQ(r.rows[0].variant, PromptSpace::kSpectrumOnly);
  EXPECT_EQ(r.rows[2].variant, PromptSpace::kSpectrumSpatial);
  for (const auto& row : r.rows) {
    ASSERT_EQ(row.cells.size(), 3u);
    for (const auto& cell : row.cells) {
      ASSERT_EQ(cell.per_seed.size(), 3u);
      const double mean = (cell.per_seed[0] + cell.per_seed[1] + cell.per_seed[2]) / 3.0;
      EXPECT_NEAR(cell.mean, mean, 1e-15);
      double ss = 0.0;
      for (double v : cell.per_seed) ss += (v - mean) * (v - mean);
      EXPECT_NEAR(cell.stddev, std::sqrt(ss / 2.0), 1e-15);
    }
  }
  EXPECT_NE(r.Table().find("Spectrum"), std::string::npos);
}

}  // namespace
}  // namespace missfpt
