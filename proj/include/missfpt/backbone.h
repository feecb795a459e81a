#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "missfpt/fpt.h"
#include "missfpt/modality.h"
#include "missfpt/tensor.h"

namespace missfpt {

struct BackboneConfig {
  int depth = 4;
  int d_model = 64;
  int heads = 4;
  int mlp_hidden = 0;  // 0 -> 4 * d_model
  int patch_size = 8;
  int prompt_count = 8;
  int bottleneck = 48;
  int fpt_blocks = -1;  // -1 -> ceil(depth / 3)
  int num_classes = 5;
  int image_height = 64;
  int image_width = 64;
  bool use_adapter = true;
  bool use_fpt = true;
  bool late_block_fft = true;
  SpectralMode spectral;
  DropoutMode dropout_mode = DropoutMode::kZeroFill;

  int resolved_fpt_blocks() const;
  int mlp_width() const { return mlp_hidden > 0 ? mlp_hidden : 4 * d_model; }
  int grid_height() const { return image_height / patch_size; }
  int grid_width() const { return image_width / patch_size; }
  int tokens_per_modality() const { return grid_height() * grid_width(); }
  bool has_prompt_mixer() const { return use_adapter && use_fpt && prompt_count > 0; }

  // Throws SpecError on inconsistent settings.
  void Validate() const;

  // ViT-B sized backbone over two 768 x 768 inputs with patch 16.
  static BackboneConfig FullScale(int num_classes = 25);
};

enum class TuningMode { kFull, kDecoderOnly, kPlusFpt, kPlusAdapter };

TuningMode ParseTuningMode(std::string_view text);  // throws ConfigError
std::string ToString(TuningMode mode);

// Frozen / tunable split of the parameter names, with element counts.
struct ParameterPartition {
  std::map<std::string, std::int64_t> frozen;
  std::map<std::string, std::int64_t> tunable;

  bool is_tunable(const std::string& name) const { return tunable.count(name) > 0; }
};

struct ParameterCounts {
  std::int64_t frozen = 0;
  std::int64_t tunable = 0;
  double tunable_fraction = 0.0;
};

// Every tensor the architecture owns, by name.
ShapeMap ParameterShapes(const ModalitySpec& spec, const BackboneConfig& config);

ParameterPartition PartitionParameters(const ShapeMap& shapes, TuningMode mode);
ParameterCounts CountParameters(const ParameterPartition& partition);
// Tunable count excluding the decoder head.
std::int64_t TunableIncrement(const ParameterPartition& partition);

class Model {
 public:
  // Random initialization; each tensor draws from its own stream derived
  // from (seed, name), so architectures that share a tensor name share its
  // initial value.
  Model(ModalitySpec spec, BackboneConfig config, std::uint64_t seed);
  // Adopts existing parameters; shapes must match the architecture.
  Model(ModalitySpec spec, BackboneConfig config, TensorMap params);

  const ModalitySpec& spec() const { return spec_; }
  const BackboneConfig& config() const { return config_; }
  TensorMap& params() { return params_; }
  const TensorMap& params() const { return params_; }
  const Matrix& param(const std::string& name) const;

  // Bilinear (half-pixel) upsampling from the patch grid, (H*W) x G.
  const Matrix& upsample() const { return upsample_; }

 private:
  ModalitySpec spec_;
  BackboneConfig config_;
  TensorMap params_;
  Matrix upsample_;
};

ParameterPartition PartitionParameters(const Model& model, TuningMode mode);

// Per-modality linear patch projection + modality and position embeddings;
// prompts in front, the class token last. Omitted modalities contribute no
// tokens. Throws ShapeError when the image is not divisible by the patch.
TokenBundle PatchEmbed(const Model& model, const Scene& sample);

// Pre-norm transformer blocks with parallel adapters. Throws NumericError
// naming the block when activations become non-finite.
TokenBundle Encode(const Model& model, const TokenBundle& bundle);

// Feature tokens -> final norm -> mean over modality groups -> linear head
// -> bilinear upsampling. Returns (H*W) x K scores.
Matrix Decode(const Model& model, const TokenBundle& bundle);

// Argmax per pixel; ties go to the lowest class index.
LabelMap ArgmaxClasses(const Matrix& scores, int height, int width);

LabelMap Predict(const Model& model, const Scene& sample);

// Mean pixel-wise cross-entropy of the model on one sample.
double Loss(const Model& model, const Scene& sample);

// Loss plus gradients. Gradients of tunable tensors are added into `grads`
// (missing entries are created); frozen tensors are never touched.
double LossAndGradients(const Model& model, const Scene& sample, const ParameterPartition& partition,
                        TensorMap& grads);

}  // namespace missfpt
