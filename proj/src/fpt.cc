#include "missfpt/fpt.h"

#include <cmath>
#include <numbers>
#include <string>

#include "missfpt/errors.h"

namespace missfpt {
namespace {

struct AttentionTerms {
  Matrix query_spec;  // Qf
  Matrix key_spec;    // Kf
  Matrix query_mixed; // Qf W_Q
  Matrix key_mixed;   // Kf W_K
  Matrix attention;   // softmax rows
};

void CheckBundle(const TokenBundle& bundle, const FourierPromptParams& params) {
  const auto r = bundle.prompts.cols();
  if (bundle.prompts.rows() < 1 || bundle.features.rows() < 1) {
    throw ShapeError("prompt attention needs at least one prompt and one feature token");
  }
  if (bundle.features.cols() != r || (bundle.cls && bundle.cls->cols() != r)) {
    throw ShapeError("token bundle parts have different channel widths");
  }
  if (params.w_q.rows() != r || params.w_q.cols() != r || params.w_k.rows() != r || params.w_k.cols() != r) {
    throw ShapeError("channel mixers must be " + std::to_string(r) + " x " + std::to_string(r));
  }
  if (!bundle.prompts.allFinite() || !bundle.features.allFinite() || !params.w_q.allFinite() ||
      !params.w_k.allFinite()) {
    throw NumericError("non-finite input to prompt attention");
  }
}

void SoftmaxRowsInPlace(Matrix& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    auto row = s.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp();
    row /= row.sum();
  }
}

AttentionTerms ComputeAttention(const TokenBundle& bundle, const FourierPromptParams& params,
                                const SpectralMode& mode) {
  CheckBundle(bundle, params);
  AttentionTerms t;
  t.query_spec = mode.variant == PromptSpace::kSpatialOnly ? bundle.prompts
                                                           : RealFftMatrix(bundle.prompts, mode.fft_axis);
  t.key_spec = mode.variant == PromptSpace::kSpectrumOnly ? RealFftMatrix(bundle.features, mode.fft_axis)
                                                          : bundle.features;
  t.query_mixed = t.query_spec * params.w_q;
  t.key_mixed = t.key_spec * params.w_k;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(bundle.width()));
  t.attention = (t.query_mixed * t.key_mixed.transpose()) * inv_sqrt;
  SoftmaxRowsInPlace(t.attention);
  return t;
}

}  // namespace

FourierPromptParams FourierPromptParams::Identity(Eigen::Index width) {
  return {Matrix::Identity(width, width), Matrix::Identity(width, width)};
}

Matrix PromptAttentionWeights(const TokenBundle& bundle, const FourierPromptParams& params,
                              const SpectralMode& mode) {
  return ComputeAttention(bundle, params, mode).attention;
}

TokenBundle FourierPromptForward(const TokenBundle& bundle, const FourierPromptParams& params,
                                 const SpectralMode& mode) {
  const auto terms = ComputeAttention(bundle, params, mode);
  TokenBundle out;
  out.prompts = terms.attention * bundle.features;
  out.features = bundle.features;
  out.cls = bundle.cls;
  out.layer_index = bundle.layer_index;
  return out;
}

FourierPromptGrads FourierPromptBackward(const TokenBundle& bundle, const FourierPromptParams& params,
                                         const SpectralMode& mode, const TokenBundle& upstream) {
  const auto t = ComputeAttention(bundle, params, mode);
  if (upstream.prompts.rows() != bundle.prompts.rows() || upstream.prompts.cols() != bundle.width() ||
      upstream.features.rows() != bundle.features.rows() || upstream.features.cols() != bundle.width()) {
    throw ShapeError("upstream gradient does not match the token bundle");
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(bundle.width()));

  // out = A V
  const Matrix d_attention = upstream.prompts * bundle.features.transpose();
  Matrix d_values = t.attention.transpose() * upstream.prompts;

  // Softmax Jacobian, row by row.
  Matrix d_scores = t.attention.cwiseProduct(d_attention);
  const Eigen::VectorXd row_dot = d_scores.rowwise().sum();
  d_scores -= t.attention.cwiseProduct(row_dot.replicate(1, t.attention.cols()));
  d_scores *= inv_sqrt;

  const Matrix d_query_mixed = d_scores * t.key_mixed;
  const Matrix d_key_mixed = d_scores.transpose() * t.query_mixed;

  FourierPromptGrads g;
  g.w_q = t.query_spec.transpose() * d_query_mixed;
  g.w_k = t.key_spec.transpose() * d_key_mixed;
  const Matrix d_query_spec = d_query_mixed * params.w_q.transpose();
  const Matrix d_key_spec = d_key_mixed * params.w_k.transpose();

  // The real-DFT operator is symmetric: its adjoint is itself.
  g.prompts = mode.variant == PromptSpace::kSpatialOnly ? d_query_spec : RealFftMatrix(d_query_spec, mode.fft_axis);
  const Matrix d_keys =
      mode.variant == PromptSpace::kSpectrumOnly ? RealFftMatrix(d_key_spec, mode.fft_axis) : d_key_spec;
  g.features = upstream.features + d_values + d_keys;
  g.cls = upstream.cls;
  return g;
}

SpectralMode ParameterFreeMode(const SpectralMode& mode, bool keep_fft) {
  if (keep_fft) return mode;
  return {PromptSpace::kSpatialOnly, mode.fft_axis};
}

TokenBundle ParameterFreePromptAttention(const TokenBundle& bundle, const SpectralMode& mode, bool keep_fft) {
  return FourierPromptForward(bundle, FourierPromptParams::Identity(bundle.width()),
                              ParameterFreeMode(mode, keep_fft));
}

double Gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double GeluGrad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) * (std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

TokenBundle SplitTokens(const Matrix& tokens, const TokenSplit& split, int layer_index) {
  if (tokens.rows() != split.total()) {
    throw ShapeError("token stream has " + std::to_string(tokens.rows()) + " rows, split expects " +
                     std::to_string(split.total()));
  }
  TokenBundle b;
  b.prompts = tokens.topRows(split.prompts);
  b.features = tokens.middleRows(split.prompts, split.features);
  if (split.has_cls) b.cls = tokens.row(tokens.rows() - 1);
  b.layer_index = layer_index;
  return b;
}

Matrix JoinTokens(const TokenBundle& bundle) {
  Matrix out(bundle.total_tokens(), bundle.width());
  out.topRows(bundle.prompts.rows()) = bundle.prompts;
  out.middleRows(bundle.prompts.rows(), bundle.features.rows()) = bundle.features;
  if (bundle.cls) out.bottomRows(1) = *bundle.cls;
  return out;
}

namespace {

bool MixerActive(const AdapterOptions& options, const TokenSplit& split) {
  return options.mixer != PromptMixer::kNone && split.prompts > 0 && split.features > 0;
}

TokenBundle BottleneckBundle(const Matrix& down, const TokenSplit& split) { return SplitTokens(down, split); }

}  // namespace

Matrix AdapterForward(const Matrix& tokens, const AdapterParams& params, const TokenSplit& split,
                      const AdapterOptions& options, AdapterCache* cache) {
  const auto d = tokens.cols();
  const auto r = params.w_down.cols();
  if (params.w_down.rows() != d || params.w_up.rows() != r || params.w_up.cols() != d) {
    throw ShapeError("adapter projections do not match token width " + std::to_string(d));
  }
  if (tokens.rows() != split.total()) throw ShapeError("adapter token split mismatch");

  AdapterCache local;
  AdapterCache& c = cache ? *cache : local;
  c.down = tokens * params.w_down;
  c.mixed = c.down;
  if (MixerActive(options, split)) {
    const TokenBundle bundle = BottleneckBundle(c.down, split);
    TokenBundle refreshed;
    if (options.mixer == PromptMixer::kLearnable) {
      if (!params.fpt) throw ShapeError("learnable prompt mixer requires Fourier prompt parameters");
      refreshed = FourierPromptForward(bundle, *params.fpt, options.mode);
    } else {
      refreshed = ParameterFreePromptAttention(bundle, options.mode, options.late_block_fft);
    }
    c.mixed.topRows(split.prompts) = refreshed.prompts;
  }
  c.activated = c.mixed.unaryExpr([](double v) { return Gelu(v); });
  c.branch = c.activated * params.w_up;
  return tokens + params.scale * c.branch;
}

AdapterGrads AdapterBackward(const Matrix& tokens, const AdapterParams& params, const TokenSplit& split,
                             const AdapterOptions& options, const AdapterCache& cache,
                             const Matrix& upstream) {
  if (upstream.rows() != tokens.rows() || upstream.cols() != tokens.cols()) {
    throw ShapeError("adapter upstream gradient shape mismatch");
  }
  AdapterGrads g;
  g.scale = upstream.cwiseProduct(cache.branch).sum();
  const Matrix d_branch = params.scale * upstream;
  g.w_up = cache.activated.transpose() * d_branch;
  const Matrix d_activated = d_branch * params.w_up.transpose();
  const Matrix d_mixed = d_activated.cwiseProduct(cache.mixed.unaryExpr([](double v) { return GeluGrad(v); }));

  Matrix d_down = d_mixed;
  if (MixerActive(options, split)) {
    const TokenBundle bundle = BottleneckBundle(cache.down, split);
    const TokenBundle up = SplitTokens(d_mixed, split);
    FourierPromptGrads fg;
    if (options.mixer == PromptMixer::kLearnable) {
      fg = FourierPromptBackward(bundle, *params.fpt, options.mode, up);
      g.fpt = fg;
    } else {
      fg = FourierPromptBackward(bundle, FourierPromptParams::Identity(bundle.width()),
                                 ParameterFreeMode(options.mode, options.late_block_fft), up);
    }
    d_down.topRows(split.prompts) = fg.prompts;
    d_down.middleRows(split.prompts, split.features) = fg.features;
  }
  g.w_down = tokens.transpose() * d_down;
  g.tokens = upstream + d_down * params.w_down.transpose();
  return g;
}

}  // namespace missfpt
