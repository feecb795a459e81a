#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "missfpt/config.h"
#include "missfpt/errors.h"

namespace missfpt {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

TEST(ExperimentConfig, DefaultsRoundTrip) {
  const ExperimentConfig c;
  const ExperimentConfig back = ExperimentConfigFromJson(ToJson(c));
  EXPECT_EQ(ToJson(back), ToJson(c));
  EXPECT_EQ(ConfigHash(back), ConfigHash(c));
  EXPECT_EQ(ConfigHash(c).size(), 16u);
}

TEST(ExperimentConfig, EmptyDocumentUsesDefaults) {
  EXPECT_EQ(ToJson(ExperimentConfigFromJson(json::object())), ToJson(ExperimentConfig{}));
}

TEST(ExperimentConfig, FieldsAreRead) {
  const json j = {{"modalities",
                   {{{"name", "rgb"}, {"kind", "dense"}, {"channels", 3}},
                    {{"name", "depth"}, {"kind", "dense"}, {"channels", 1}},
                    {{"name", "lidar"}, {"kind", "sparse"}, {"channels", 1}}}},
                  {"backbone", {{"depth", 2}, {"prompt_space", "spatial_only"}, {"fft_axis", "both"}}},
                  {"train", {{"regime", "fixed_ratio:0.7"}, {"tuning", "decoder_only"}, {"seed", 3}}},
                  {"data", {{"scenes", 10}, {"seed", 7}}},
                  {"eval", {{"severity", 0.25}}}};
  const ExperimentConfig c = ExperimentConfigFromJson(j);
  EXPECT_EQ(c.modalities.size(), 3);
  EXPECT_FALSE(c.modalities.is_dense(2));
  EXPECT_EQ(c.backbone.depth, 2);
  EXPECT_EQ(c.backbone.spectral.variant, PromptSpace::kSpatialOnly);
  EXPECT_EQ(c.backbone.spectral.fft_axis, FftAxis::kBoth);
  EXPECT_EQ(c.train.regime, Regime::kFixedRatio);
  EXPECT_EQ(c.train.missing_ratio, 0.7);
  EXPECT_EQ(c.train.tuning, TuningMode::kDecoderOnly);
  EXPECT_EQ(c.train.seed, 3u);
  EXPECT_EQ(c.data.scenes, 10);
  EXPECT_EQ(c.data.seed, 7u);
  EXPECT_EQ(c.eval.severity, 0.25);
  EXPECT_EQ(ToJson(ExperimentConfigFromJson(ToJson(c))), ToJson(c));
}

TEST(ExperimentConfig, UnknownKeysRejected) {
  EXPECT_THROW(ExperimentConfigFromJson({{"extra", 1}}), ConfigError);
  EXPECT_THROW(ExperimentConfigFromJson({{"backbone", {{"dpeth", 3}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfigFromJson({{"train", {{"lr", 0.1}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfigFromJson({{"data", {{"colour", 1}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfigFromJson({{"eval", {{"fail", true}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfigFromJson({{"modalities", {{{"name", "rgb"}, {"chans", 3}}}}}), ConfigError);
}

TEST(ExperimentConfig, BadValuesRejected) {
  EXPECT_THROW(ExperimentConfigFromJson({{"backbone", {{"depth", "four"}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfigFromJson({{"backbone", {{"heads", 3}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfigFromJson({{"train", {{"regime", "sometimes"}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfigFromJson({{"train", {{"tuning", "lora"}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfigFromJson({{"eval", {{"severity", 0}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfigFromJson({{"data", {{"height", 32}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfigFromJson({{"modalities", json::array()}}), ConfigError);
  EXPECT_THROW(ExperimentConfigFromJson(json::array()), ConfigError);
}

TEST(ConfigHash, ChangesWithContent) {
  ExperimentConfig a, b;
  b.train.learning_rate = 1e-3;
  EXPECT_NE(ConfigHash(a), ConfigHash(b));
  b.train.learning_rate = a.train.learning_rate;
  EXPECT_EQ(ConfigHash(a), ConfigHash(b));
}

TEST(LoadExperimentConfig, FileErrors) {
  const fs::path dir = fs::temp_directory_path() / "missfpt_config_test";
  fs::create_directories(dir);
  EXPECT_THROW(LoadExperimentConfig(dir / "absent.json"), IoError);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(LoadExperimentConfig(dir / "bad.json"), ConfigError);
  std::ofstream(dir / "good.json") << R"({"train": {"seed": 1}})";
  EXPECT_EQ(LoadExperimentConfig(dir / "good.json").train.seed, 1u);
  fs::remove_all(dir);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const fs::path dir = fs::temp_directory_path() / "missfpt_ckpt_test";
  fs::remove_all(dir);
  BackboneConfig c;
  c.depth = 2;
  c.spectral.fft_axis = FftAxis::kToken;
  const Model m(ModalitySpec::Quad(), c, 17);
  WriteCheckpoint(dir, m, TuningMode::kPlusAdapter, "feedface");
  const Checkpoint ck = ReadCheckpoint(dir);
  EXPECT_EQ(ck.model.params(), m.params());
  EXPECT_EQ(ck.model.spec(), m.spec());
  EXPECT_EQ(ToJson(ck.model.config()), ToJson(c));
  EXPECT_EQ(ck.tuning, TuningMode::kPlusAdapter);
  EXPECT_EQ(ck.config_hash, "feedface");
  EXPECT_EQ(ck.tool_version, MISSFPT_TEST_VERSION);

  fs::resize_file(dir / "weights.bin", fs::file_size(dir / "weights.bin") - 1);
  EXPECT_THROW(ReadCheckpoint(dir), IntegrityError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace missfpt
