#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "missfpt/modality.h"
#include "missfpt/tensor.h"

namespace missfpt {

struct SceneConfig {
  int height = 64;
  int width = 64;
  int num_classes = 5;
  int min_shapes = 2;
  int max_shapes = 5;
  double rgb_noise = 0.05;
  double depth_noise = 0.02;

  void Validate() const;  // throws SpecError
  bool operator==(const SceneConfig&) const = default;
};

// Renders random shapes (class = shape type, 0 = background) into every
// modality of `spec`. Supported modality names: rgb, depth, lidar, event.
// Pure function of (seed, config, spec).
Scene GenerateScene(std::uint64_t seed, const SceneConfig& config, const ModalitySpec& spec);

// Fraction of non-zero entries of an image.
double NonzeroFraction(const Image& image);

enum class FailureKind { kMotionBlur, kOverExposure, kUnderExposure, kLidarJitter, kEventLowRes };

inline constexpr FailureKind kAllFailureKinds[] = {FailureKind::kMotionBlur, FailureKind::kOverExposure,
                                                   FailureKind::kUnderExposure, FailureKind::kLidarJitter,
                                                   FailureKind::kEventLowRes};

std::string ShortName(FailureKind kind);  // MB, OE, UE, LJ, EL
std::string LongName(FailureKind kind);   // motion_blur, ...
FailureKind ParseFailureKind(std::string_view text);  // either form; throws ConfigError

struct FailureSpec {
  FailureKind kind = FailureKind::kMotionBlur;
  double severity = 0.5;  // (0, 1]
  std::string target_modality;
};

// Picks the default target for `kind` in `spec` (the 3-channel dense
// image for blur and exposure, "lidar" / "event" for the sparse kinds).
std::optional<FailureSpec> DefaultFailure(FailureKind kind, double severity, const ModalitySpec& spec);

// Applies one sensor-level corruption to the target modality. Labels and
// other modalities are untouched. Throws SpecError for incompatible kinds,
// unknown targets or severities outside (0, 1].
//
//   motion_blur     box blur of length ceil(9 s) along a random axis
//   over_exposure   clip(x (1 + 3 s), 0, 1)
//   under_exposure  x (1 - 0.9 s)
//   lidar_jitter    points moved by N(0, 3 s) px offsets, values perturbed
//   event_low_res   decimate by 2^ceil(2 s), nearest-neighbour upsample
Scene InjectFailure(const Scene& scene, const FailureSpec& failure, const ModalitySpec& spec, Rng& rng);

struct Dataset {
  ModalitySpec spec = ModalitySpec::RgbDepth();
  SceneConfig scene_config;
  std::uint64_t base_seed = 0;
  std::vector<Scene> scenes;
};

std::uint64_t SceneSeed(std::uint64_t base_seed, int index);

Dataset GenerateDataset(const ModalitySpec& spec, const SceneConfig& config, int count, std::uint64_t base_seed);

// Directory layout: index.json (manifest, seeds, configs) + data.bin.
void WriteDataset(const std::filesystem::path& dir, const Dataset& dataset, const std::string& config_hash = "");
Dataset ReadDataset(const std::filesystem::path& dir);

}  // namespace missfpt
