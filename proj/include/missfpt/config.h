#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "missfpt/backbone.h"
#include "missfpt/data.h"
#include "missfpt/modality.h"
#include "missfpt/train_eval.h"

namespace missfpt {

struct DataConfig {
  int scenes = 200;
  std::optional<std::uint64_t> seed;  // mandatory for generation
  SceneConfig scene;
};

// One experiment document with five sections. Every field has a default;
// unknown keys anywhere are rejected with ConfigError.
//
//   {
//     "modalities": [{"name": "rgb", "kind": "dense", "channels": 3}, ...],
//     "backbone":   {"depth": 4, "d_model": 64, ...},
//     "train":      {"regime": "mms", "seed": 1, ...},
//     "data":       {"scenes": 200, "seed": 7, "height": 64, ...},
//     "eval":       {"failures": true, "severity": 0.5, "seed": 0}
//   }
struct ExperimentConfig {
  ModalitySpec modalities = ModalitySpec::RgbDepth();
  BackboneConfig backbone;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;

  // Cross-section checks (image size and class count agree). ConfigError.
  void Validate() const;
};

nlohmann::json ToJson(const ModalitySpec& spec);
nlohmann::json ToJson(const BackboneConfig& config);
nlohmann::json ToJson(const SceneConfig& config);
nlohmann::json ToJson(const TrainConfig& config);
nlohmann::json ToJson(const DataConfig& config);
nlohmann::json ToJson(const EvalConfig& config);
nlohmann::json ToJson(const ExperimentConfig& config);

ModalitySpec ModalitySpecFromJson(const nlohmann::json& j);
BackboneConfig BackboneConfigFromJson(const nlohmann::json& j);
SceneConfig SceneConfigFromJson(const nlohmann::json& j);
TrainConfig TrainConfigFromJson(const nlohmann::json& j);
DataConfig DataConfigFromJson(const nlohmann::json& j);
EvalConfig EvalConfigFromJson(const nlohmann::json& j);
ExperimentConfig ExperimentConfigFromJson(const nlohmann::json& j);

// Reads and validates a config file. ConfigError on bad content, IoError
// when the file cannot be read.
ExperimentConfig LoadExperimentConfig(const std::filesystem::path& path);

// FNV-1a of the canonical (sorted-key) JSON dump, as 16 hex digits.
std::string ConfigHash(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + weights.bin in one directory.

struct Checkpoint {
  Model model;
  TuningMode tuning = TuningMode::kPlusFpt;
  std::string config_hash;
  std::string tool_version;
};

void WriteCheckpoint(const std::filesystem::path& dir, const Model& model, TuningMode tuning,
                     const std::string& config_hash);
Checkpoint ReadCheckpoint(const std::filesystem::path& dir);

}  // namespace missfpt
