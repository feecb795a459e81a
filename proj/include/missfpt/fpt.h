#pragma once

#include <optional>

#include "missfpt/fft.h"
#include "missfpt/tensor.h"

namespace missfpt {

// Which spaces the prompt tokens are tuned in.
enum class PromptSpace {
  kSpectrumSpatial,  // Re(FFT) of the prompts, attended against spatial features
  kSpectrumOnly,     // the keys are transformed as well
  kSpatialOnly,      // no FFT; plain cross-attention prompt refresh
};

struct SpectralMode {
  PromptSpace variant = PromptSpace::kSpectrumSpatial;
  FftAxis fft_axis = FftAxis::kChannel;
  bool operator==(const SpectralMode&) const = default;
};

// One layer's token stream split into prompts, feature tokens and an
// optional class token. All parts share the channel width.
struct TokenBundle {
  Matrix prompts;   // N_q x d
  Matrix features;  // N_kv x d
  std::optional<RowVector> cls;
  int layer_index = 0;

  Eigen::Index width() const { return prompts.cols(); }
  Eigen::Index total_tokens() const { return prompts.rows() + features.rows() + (cls ? 1 : 0); }
};

struct FourierPromptParams {
  Matrix w_q;  // r x r channel mixer for the prompt spectrum
  Matrix w_k;  // r x r channel mixer for the keys

  static FourierPromptParams Identity(Eigen::Index width);
};

struct FourierPromptGrads {
  Matrix prompts;
  Matrix features;
  std::optional<RowVector> cls;
  Matrix w_q;
  Matrix w_k;
};

// Row-wise softmax((Qf W_Q)(K W_K)^T / sqrt(r)) for the bundle, where Qf is
// the (possibly transformed) prompt matrix and K the (possibly transformed)
// feature matrix. Throws ShapeError / NumericError.
Matrix PromptAttentionWeights(const TokenBundle& bundle, const FourierPromptParams& params,
                              const SpectralMode& mode);

// Replaces the prompts with attention-weighted feature tokens; features and
// cls are returned untouched.
TokenBundle FourierPromptForward(const TokenBundle& bundle, const FourierPromptParams& params,
                                 const SpectralMode& mode);

// Gradients of FourierPromptForward given the gradient w.r.t. every part of
// its output bundle. Feature and cls gradients include the pass-through.
FourierPromptGrads FourierPromptBackward(const TokenBundle& bundle, const FourierPromptParams& params,
                                         const SpectralMode& mode, const TokenBundle& upstream);

// Same computation with W_Q = W_K = I. With keep_fft = false the FFT step is
// dropped as well (spatial-only attention).
TokenBundle ParameterFreePromptAttention(const TokenBundle& bundle, const SpectralMode& mode,
                                         bool keep_fft = true);

// Mode actually used by the parameter-free layer.
SpectralMode ParameterFreeMode(const SpectralMode& mode, bool keep_fft);

// ---------------------------------------------------------------------------
// Adapter bottleneck hosting the prompt mixer.

enum class PromptMixer { kNone, kLearnable, kParameterFree };

struct AdapterParams {
  Matrix w_down;  // d x r
  Matrix w_up;    // r x d
  double scale = 0.1;
  std::optional<FourierPromptParams> fpt;
};

// Row layout of a stacked token stream: [prompts; features; cls].
struct TokenSplit {
  int prompts = 0;
  int features = 0;
  bool has_cls = false;

  int total() const { return prompts + features + (has_cls ? 1 : 0); }
};

struct AdapterOptions {
  PromptMixer mixer = PromptMixer::kNone;
  SpectralMode mode;
  bool late_block_fft = true;  // parameter-free mixer keeps the FFT
};

// Intermediate values needed by AdapterBackward.
struct AdapterCache {
  Matrix down;       // x W_down
  Matrix mixed;      // `down` with the prompt rows refreshed
  Matrix activated;  // gelu(mixed)
  Matrix branch;     // activated W_up
};

struct AdapterGrads {
  Matrix tokens;
  Matrix w_down;
  Matrix w_up;
  double scale = 0.0;
  std::optional<FourierPromptGrads> fpt;
};

// tokens + scale * gelu(mix(tokens W_down)) W_up, where mix refreshes the
// prompt rows through the Fourier prompt attention at bottleneck width.
Matrix AdapterForward(const Matrix& tokens, const AdapterParams& params, const TokenSplit& split,
                      const AdapterOptions& options, AdapterCache* cache = nullptr);

AdapterGrads AdapterBackward(const Matrix& tokens, const AdapterParams& params, const TokenSplit& split,
                             const AdapterOptions& options, const AdapterCache& cache,
                             const Matrix& upstream);

// Split / join helpers for stacked token streams.
TokenBundle SplitTokens(const Matrix& tokens, const TokenSplit& split, int layer_index = 0);
Matrix JoinTokens(const TokenBundle& bundle);

// Activation used in the bottleneck and the block MLP (erf GELU).
double Gelu(double x);
double GeluGrad(double x);

}  // namespace missfpt
