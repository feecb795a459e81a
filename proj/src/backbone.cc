#include "missfpt/backbone.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "missfpt/errors.h"
#include "missfpt/hash.h"

namespace missfpt {
namespace {

constexpr double kLayerNormEps = 1e-6;

std::string BlockName(int l, std::string_view leaf) { return "block" + std::to_string(l) + "." + std::string(leaf); }
std::string AdapterName(int l, std::string_view leaf) {
  return "adapter.block" + std::to_string(l) + "." + std::string(leaf);
}
std::string FptName(int l, std::string_view leaf) { return "fpt.block" + std::to_string(l) + "." + std::string(leaf); }
std::string EmbedName(const std::string& modality, std::string_view leaf) {
  return "embed." + modality + "." + std::string(leaf);
}

bool StartsWith(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }
bool EndsWith(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

// 1-D half-pixel bilinear weights, out x in.
Matrix BilinearWeights(int out, int in) {
  Matrix w = Matrix::Zero(out, in);
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    src = std::max(src, 0.0);
    const int i0 = std::min(static_cast<int>(std::floor(src)), in - 1);
    const int i1 = std::min(i0 + 1, in - 1);
    const double frac = src - i0;
    w(o, i0) += 1.0 - frac;
    w(o, i1) += frac;
  }
  return w;
}

Matrix BuildUpsample(const BackboneConfig& c) {
  const Matrix wy = BilinearWeights(c.image_height, c.grid_height());
  const Matrix wx = BilinearWeights(c.image_width, c.grid_width());
  Matrix u = Matrix::Zero(static_cast<Eigen::Index>(c.image_height) * c.image_width, c.tokens_per_modality());
  for (int y = 0; y < c.image_height; ++y) {
    for (int x = 0; x < c.image_width; ++x) {
      for (int gy = 0; gy < c.grid_height(); ++gy) {
        const double a = wy(y, gy);
        if (a == 0.0) continue;
        for (int gx = 0; gx < c.grid_width(); ++gx) {
          u(y * c.image_width + x, gy * c.grid_width() + gx) = a * wx(x, gx);
        }
      }
    }
  }
  return u;
}

Matrix InitTensor(const std::string& name, const TensorShape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(SplitMix64(seed ^ Fnv1a64(name)));
  const auto rows = shape.rows, cols = shape.cols;
  auto normal = [&](double std) {
    std::normal_distribution<double> dist(0.0, std);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
  };
  auto uniform = [&](double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
  };
  const double fan_in = static_cast<double>(rows);

  if (StartsWith(name, "decoder.") || EndsWith(name, ".w_up")) return Matrix::Zero(rows, cols);
  if (EndsWith(name, ".scale")) return Matrix::Constant(rows, cols, 0.1);
  if (EndsWith(name, ".gamma")) return Matrix::Ones(rows, cols);
  if (EndsWith(name, ".beta")) return Matrix::Zero(rows, cols);
  if (EndsWith(name, ".w_down") || EndsWith(name, ".w_q") || EndsWith(name, ".w_k")) {
    return uniform(1.0 / std::sqrt(fan_in));
  }
  if (name == "prompts") return uniform(0.1);
  if (EndsWith(name, ".proj") || EndsWith(name, ".w_qkv") || EndsWith(name, ".w1")) {
    return normal(1.0 / std::sqrt(fan_in));
  }
  if (EndsWith(name, ".w_out") || EndsWith(name, ".w2")) return normal(0.5 / std::sqrt(fan_in));
  // Biases and token-type embeddings.
  return normal(0.02);
}

// ---------------------------------------------------------------------------
// Layer primitives.

struct LayerNormCache {
  Matrix normalized;
  Eigen::VectorXd rstd;
};

Matrix LayerNormForward(const Matrix& x, const Matrix& gamma, const Matrix& beta, LayerNormCache* cache) {
  const auto d = static_cast<double>(x.cols());
  Matrix xhat(x.rows(), x.cols());
  Eigen::VectorXd rstd(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).sum() / d;
    const auto centered = x.row(i).array() - mean;
    const double var = centered.square().sum() / d;
    rstd(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(i) = centered * rstd(i);
  }
  Matrix y = (xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

// Returns dx; adds dgamma / dbeta when requested.
Matrix LayerNormBackward(const Matrix& dy, const Matrix& gamma, const LayerNormCache& cache, Matrix* dgamma,
                         Matrix* dbeta) {
  if (dgamma) *dgamma += dy.cwiseProduct(cache.normalized).colwise().sum();
  if (dbeta) *dbeta += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * gamma.row(0).array();
  const auto d = static_cast<double>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mean_dxhat = dxhat.row(i).sum() / d;
    const double mean_dxhat_xhat = dxhat.row(i).dot(cache.normalized.row(i)) / d;
    dx.row(i) = cache.rstd(i) * (dxhat.row(i).array() - mean_dxhat - cache.normalized.row(i).array() * mean_dxhat_xhat);
  }
  return dx;
}

void SoftmaxRows(Matrix& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    auto row = s.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp();
    row /= row.sum();
  }
}

Matrix SoftmaxRowsBackward(const Matrix& probs, const Matrix& dprobs) {
  Matrix ds = probs.cwiseProduct(dprobs);
  const Eigen::VectorXd dot = ds.rowwise().sum();
  ds -= probs.cwiseProduct(dot.replicate(1, probs.cols()));
  return ds;
}

struct BlockTape {
  Matrix input;
  LayerNormCache ln1;
  Matrix ln1_out;
  Matrix qkv;
  std::vector<Matrix> attention;
  Matrix heads;
  Matrix mid;  // input + attention branch
  LayerNormCache ln2;
  Matrix ln2_out;
  Matrix mlp_pre;
  Matrix mlp_act;
  AdapterCache adapter;
};

struct EncoderTape {
  TokenSplit split;
  std::vector<BlockTape> blocks;
};

AdapterOptions BlockAdapterOptions(const BackboneConfig& c, int l) {
  AdapterOptions o;
  o.mode = c.spectral;
  o.late_block_fft = c.late_block_fft;
  if (c.has_prompt_mixer()) {
    o.mixer = l < c.resolved_fpt_blocks() ? PromptMixer::kLearnable : PromptMixer::kParameterFree;
  }
  return o;
}

AdapterParams BlockAdapterParams(const Model& m, int l) {
  AdapterParams p;
  p.w_down = m.param(AdapterName(l, "w_down"));
  p.w_up = m.param(AdapterName(l, "w_up"));
  p.scale = m.param(AdapterName(l, "scale"))(0, 0);
  if (m.config().has_prompt_mixer() && l < m.config().resolved_fpt_blocks()) {
    p.fpt = FourierPromptParams{m.param(FptName(l, "w_q")), m.param(FptName(l, "w_k"))};
  }
  return p;
}

Matrix BlockForward(const Model& m, int l, const Matrix& x, const TokenSplit& split, BlockTape* tape) {
  const auto& c = m.config();
  const int d = c.d_model, heads = c.heads, dh = d / heads;
  BlockTape local;
  BlockTape& t = tape ? *tape : local;
  t.input = x;

  t.ln1_out = LayerNormForward(x, m.param(BlockName(l, "ln1.gamma")), m.param(BlockName(l, "ln1.beta")), &t.ln1);
  t.qkv = (t.ln1_out * m.param(BlockName(l, "attn.w_qkv"))).rowwise() + m.param(BlockName(l, "attn.b_qkv")).row(0);
  t.heads.resize(x.rows(), d);
  t.attention.resize(static_cast<size_t>(heads));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    const auto q = t.qkv.middleCols(h * dh, dh);
    const auto k = t.qkv.middleCols(d + h * dh, dh);
    const auto v = t.qkv.middleCols(2 * d + h * dh, dh);
    Matrix& a = t.attention[static_cast<size_t>(h)];
    a = (q * k.transpose()) * inv_sqrt;
    SoftmaxRows(a);
    t.heads.middleCols(h * dh, dh) = a * v;
  }
  t.mid = x + ((t.heads * m.param(BlockName(l, "attn.w_out"))).rowwise() + m.param(BlockName(l, "attn.b_out")).row(0));

  t.ln2_out = LayerNormForward(t.mid, m.param(BlockName(l, "ln2.gamma")), m.param(BlockName(l, "ln2.beta")), &t.ln2);
  t.mlp_pre = (t.ln2_out * m.param(BlockName(l, "mlp.w1"))).rowwise() + m.param(BlockName(l, "mlp.b1")).row(0);
  t.mlp_act = t.mlp_pre.unaryExpr([](double v) { return Gelu(v); });
  Matrix out = (t.mlp_act * m.param(BlockName(l, "mlp.w2"))).rowwise() + m.param(BlockName(l, "mlp.b2")).row(0);

  if (c.use_adapter) {
    out += AdapterForward(t.mid, BlockAdapterParams(m, l), split, BlockAdapterOptions(c, l), &t.adapter);
  } else {
    out += t.mid;
  }
  return out;
}

// Gradient accumulator keyed by name; only tunable names are materialized.
class GradSink {
 public:
  GradSink(const Model& m, const ParameterPartition& p, TensorMap& grads) : model_(m), partition_(p), grads_(grads) {}

  Matrix* get(const std::string& name) {
    if (!partition_.is_tunable(name)) return nullptr;
    auto it = grads_.find(name);
    if (it == grads_.end()) {
      const Matrix& ref = model_.param(name);
      it = grads_.emplace(name, Matrix::Zero(ref.rows(), ref.cols())).first;
    }
    return &it->second;
  }
  bool wants(const std::string& name) const { return partition_.is_tunable(name); }

 private:
  const Model& model_;
  const ParameterPartition& partition_;
  TensorMap& grads_;
};

Matrix BlockBackward(const Model& m, int l, const BlockTape& t, const TokenSplit& split, const Matrix& dout,
                     GradSink& sink) {
  const auto& c = m.config();
  const int d = c.d_model, heads = c.heads, dh = d / heads;

  // MLP branch.
  if (Matrix* g = sink.get(BlockName(l, "mlp.w2"))) *g += t.mlp_act.transpose() * dout;
  if (Matrix* g = sink.get(BlockName(l, "mlp.b2"))) *g += dout.colwise().sum();
  const Matrix d_act = dout * m.param(BlockName(l, "mlp.w2")).transpose();
  const Matrix d_pre = d_act.cwiseProduct(t.mlp_pre.unaryExpr([](double v) { return GeluGrad(v); }));
  if (Matrix* g = sink.get(BlockName(l, "mlp.w1"))) *g += t.ln2_out.transpose() * d_pre;
  if (Matrix* g = sink.get(BlockName(l, "mlp.b1"))) *g += d_pre.colwise().sum();
  const Matrix d_ln2 = d_pre * m.param(BlockName(l, "mlp.w1")).transpose();
  Matrix d_mid = LayerNormBackward(d_ln2, m.param(BlockName(l, "ln2.gamma")), t.ln2,
                                   sink.get(BlockName(l, "ln2.gamma")), sink.get(BlockName(l, "ln2.beta")));

  // Adapter branch (includes the residual pass-through).
  if (c.use_adapter) {
    const AdapterParams ap = BlockAdapterParams(m, l);
    const AdapterGrads ag = AdapterBackward(t.mid, ap, split, BlockAdapterOptions(c, l), t.adapter, dout);
    d_mid += ag.tokens;
    if (Matrix* g = sink.get(AdapterName(l, "w_down"))) *g += ag.w_down;
    if (Matrix* g = sink.get(AdapterName(l, "w_up"))) *g += ag.w_up;
    if (Matrix* g = sink.get(AdapterName(l, "scale"))) (*g)(0, 0) += ag.scale;
    if (ag.fpt) {
      if (Matrix* g = sink.get(FptName(l, "w_q"))) *g += ag.fpt->w_q;
      if (Matrix* g = sink.get(FptName(l, "w_k"))) *g += ag.fpt->w_k;
    }
  } else {
    d_mid += dout;
  }

  // Attention branch.
  if (Matrix* g = sink.get(BlockName(l, "attn.w_out"))) *g += t.heads.transpose() * d_mid;
  if (Matrix* g = sink.get(BlockName(l, "attn.b_out"))) *g += d_mid.colwise().sum();
  const Matrix d_heads = d_mid * m.param(BlockName(l, "attn.w_out")).transpose();
  Matrix d_qkv(t.qkv.rows(), t.qkv.cols());
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    const auto q = t.qkv.middleCols(h * dh, dh);
    const auto k = t.qkv.middleCols(d + h * dh, dh);
    const auto v = t.qkv.middleCols(2 * d + h * dh, dh);
    const Matrix& a = t.attention[static_cast<size_t>(h)];
    const auto d_o = d_heads.middleCols(h * dh, dh);
    const Matrix ds = SoftmaxRowsBackward(a, d_o * v.transpose()) * inv_sqrt;
    d_qkv.middleCols(h * dh, dh) = ds * k;
    d_qkv.middleCols(d + h * dh, dh) = ds.transpose() * q;
    d_qkv.middleCols(2 * d + h * dh, dh) = a.transpose() * d_o;
  }
  if (Matrix* g = sink.get(BlockName(l, "attn.w_qkv"))) *g += t.ln1_out.transpose() * d_qkv;
  if (Matrix* g = sink.get(BlockName(l, "attn.b_qkv"))) *g += d_qkv.colwise().sum();
  const Matrix d_ln1 = d_qkv * m.param(BlockName(l, "attn.w_qkv")).transpose();
  return d_mid + LayerNormBackward(d_ln1, m.param(BlockName(l, "ln1.gamma")), t.ln1,
                                   sink.get(BlockName(l, "ln1.gamma")), sink.get(BlockName(l, "ln1.beta")));
}

TokenSplit SplitOf(const TokenBundle& b) {
  return {static_cast<int>(b.prompts.rows()), static_cast<int>(b.features.rows()), b.cls.has_value()};
}

Matrix EncodeStream(const Model& m, const Matrix& stream, const TokenSplit& split, EncoderTape* tape) {
  if (stream.cols() != m.config().d_model) throw ShapeError("token width does not match d_model");
  Matrix x = stream;
  if (tape) {
    tape->split = split;
    tape->blocks.assign(static_cast<size_t>(m.config().depth), BlockTape{});
  }
  for (int l = 0; l < m.config().depth; ++l) {
    x = BlockForward(m, l, x, split, tape ? &tape->blocks[static_cast<size_t>(l)] : nullptr);
    if (!x.allFinite()) throw NumericError("non-finite activations after block " + std::to_string(l));
  }
  return x;
}

// Which modality groups a sample contributes, in spec order.
std::vector<int> PresentGroups(const Model& m, const Scene& s) {
  std::vector<int> groups;
  for (int i = 0; i < m.spec().size(); ++i) {
    const bool omitted = i < static_cast<int>(s.omitted.size()) && s.omitted[static_cast<size_t>(i)];
    if (!omitted) groups.push_back(i);
  }
  return groups;
}

Matrix ExtractPatches(const Image& img, int patch) {
  const int gh = img.height / patch, gw = img.width / patch;
  Matrix out(static_cast<Eigen::Index>(gh) * gw, static_cast<Eigen::Index>(patch) * patch * img.channels);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      Eigen::Index col = 0;
      for (int py = 0; py < patch; ++py) {
        for (int px = 0; px < patch; ++px) {
          for (int ch = 0; ch < img.channels; ++ch) {
            out(gy * gw + gx, col++) = img.at(gy * patch + py, gx * patch + px, ch);
          }
        }
      }
    }
  }
  return out;
}

struct DecoderTape {
  int groups = 0;
  LayerNormCache norm;
  Matrix fused;
};

Matrix DecodeFeatures(const Model& m, const Matrix& features, DecoderTape* tape) {
  const auto& c = m.config();
  const int grid = c.tokens_per_modality();
  if (features.rows() == 0 || features.rows() % grid != 0) {
    throw ShapeError("feature tokens (" + std::to_string(features.rows()) + ") do not tile the " +
                     std::to_string(c.grid_height()) + "x" + std::to_string(c.grid_width()) + " patch grid");
  }
  const int groups = static_cast<int>(features.rows() / grid);
  LayerNormCache norm;
  const Matrix normed = LayerNormForward(features, m.param("norm.gamma"), m.param("norm.beta"), &norm);
  Matrix fused = Matrix::Zero(grid, features.cols());
  for (int g = 0; g < groups; ++g) fused += normed.middleRows(static_cast<Eigen::Index>(g) * grid, grid);
  fused /= groups;
  const Matrix grid_scores = (fused * m.param("decoder.w")).rowwise() + m.param("decoder.b").row(0);
  if (tape) {
    tape->groups = groups;
    tape->norm = std::move(norm);
    tape->fused = std::move(fused);
  }
  return m.upsample() * grid_scores;
}

// Mean cross-entropy and its gradient w.r.t. the pixel scores.
double CrossEntropy(const Matrix& scores, const LabelMap& labels, Matrix* dscores) {
  const auto pixels = scores.rows();
  if (static_cast<size_t>(pixels) != labels.data.size()) throw ShapeError("label map does not match scores");
  double loss = 0.0;
  if (dscores) dscores->resize(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < pixels; ++i) {
    const auto row = scores.row(i);
    const double mx = row.maxCoeff();
    const Eigen::ArrayXd e = (row.array() - mx).exp().transpose();
    const double z = e.sum();
    const int y = labels.data[static_cast<size_t>(i)];
    if (y < 0 || y >= scores.cols()) throw ShapeError("label outside [0, K)");
    loss += std::log(z) - (row(y) - mx);
    if (dscores) {
      dscores->row(i) = (e / z).transpose();
      (*dscores)(i, y) -= 1.0;
    }
  }
  if (dscores) *dscores /= static_cast<double>(pixels);
  return loss / static_cast<double>(pixels);
}

bool AnyTunable(const ParameterPartition& p, std::string_view prefix) {
  for (const auto& [name, _] : p.tunable) {
    if (StartsWith(name, prefix)) return true;
  }
  return false;
}

}  // namespace

// ---------------------------------------------------------------------------

int BackboneConfig::resolved_fpt_blocks() const { return fpt_blocks >= 0 ? fpt_blocks : (depth + 2) / 3; }

void BackboneConfig::Validate() const {
  if (depth < 1 || d_model < 1 || heads < 1) throw SpecError("depth, d_model and heads must be positive");
  if (d_model % heads != 0) throw SpecError("d_model must be divisible by heads");
  if (resolved_fpt_blocks() > depth) throw SpecError("fpt_blocks exceeds depth");
  if (patch_size < 1 || image_height < patch_size || image_width < patch_size) {
    throw SpecError("image must hold at least one patch");
  }
  if (image_height % patch_size != 0 || image_width % patch_size != 0) {
    throw SpecError("image size must be divisible by patch_size");
  }
  if (prompt_count < 0) throw SpecError("prompt_count must be non-negative");
  if (use_adapter && (bottleneck < 1 || bottleneck >= d_model)) {
    throw SpecError("adapter bottleneck must satisfy 0 < r < d_model");
  }
  if (num_classes < 1) throw SpecError("num_classes must be positive");
}

BackboneConfig BackboneConfig::FullScale(int num_classes) {
  BackboneConfig c;
  c.depth = 12;
  c.d_model = 768;
  c.heads = 12;
  c.patch_size = 16;
  c.prompt_count = 200;
  c.bottleneck = 48;
  c.fpt_blocks = 4;
  c.num_classes = num_classes;
  c.image_height = 768;
  c.image_width = 768;
  return c;
}

TuningMode ParseTuningMode(std::string_view text) {
  if (text == "full") return TuningMode::kFull;
  if (text == "decoder_only") return TuningMode::kDecoderOnly;
  if (text == "plus_fpt") return TuningMode::kPlusFpt;
  if (text == "plus_adapter") return TuningMode::kPlusAdapter;
  throw ConfigError("unknown tuning mode: '" + std::string(text) + "'");
}

std::string ToString(TuningMode mode) {
  switch (mode) {
    case TuningMode::kFull: return "full";
    case TuningMode::kDecoderOnly: return "decoder_only";
    case TuningMode::kPlusFpt: return "plus_fpt";
    case TuningMode::kPlusAdapter: return "plus_adapter";
  }
  return "unknown";
}

ShapeMap ParameterShapes(const ModalitySpec& spec, const BackboneConfig& c) {
  c.Validate();
  const std::int64_t d = c.d_model;
  ShapeMap s;
  for (const auto& e : spec.entries()) {
    s[EmbedName(e.name, "proj")] = {std::int64_t{c.patch_size} * c.patch_size * e.channels, d};
    s[EmbedName(e.name, "bias")] = {1, d};
    s[EmbedName(e.name, "modality")] = {1, d};
    s[EmbedName(e.name, "pos")] = {c.tokens_per_modality(), d};
  }
  s["embed.cls"] = {1, d};
  if (c.prompt_count > 0) s["prompts"] = {c.prompt_count, d};
  for (int l = 0; l < c.depth; ++l) {
    s[BlockName(l, "ln1.gamma")] = {1, d};
    s[BlockName(l, "ln1.beta")] = {1, d};
    s[BlockName(l, "attn.w_qkv")] = {d, 3 * d};
    s[BlockName(l, "attn.b_qkv")] = {1, 3 * d};
    s[BlockName(l, "attn.w_out")] = {d, d};
    s[BlockName(l, "attn.b_out")] = {1, d};
    s[BlockName(l, "ln2.gamma")] = {1, d};
    s[BlockName(l, "ln2.beta")] = {1, d};
    s[BlockName(l, "mlp.w1")] = {d, c.mlp_width()};
    s[BlockName(l, "mlp.b1")] = {1, c.mlp_width()};
    s[BlockName(l, "mlp.w2")] = {c.mlp_width(), d};
    s[BlockName(l, "mlp.b2")] = {1, d};
    if (c.use_adapter) {
      s[AdapterName(l, "w_down")] = {d, c.bottleneck};
      s[AdapterName(l, "w_up")] = {c.bottleneck, d};
      s[AdapterName(l, "scale")] = {1, 1};
      if (c.has_prompt_mixer() && l < c.resolved_fpt_blocks()) {
        s[FptName(l, "w_q")] = {c.bottleneck, c.bottleneck};
        s[FptName(l, "w_k")] = {c.bottleneck, c.bottleneck};
      }
    }
  }
  s["norm.gamma"] = {1, d};
  s["norm.beta"] = {1, d};
  s["decoder.w"] = {d, c.num_classes};
  s["decoder.b"] = {1, c.num_classes};
  return s;
}

ParameterPartition PartitionParameters(const ShapeMap& shapes, TuningMode mode) {
  ParameterPartition p;
  for (const auto& [name, shape] : shapes) {
    const bool decoder = StartsWith(name, "decoder.");
    const bool adapter = StartsWith(name, "adapter.");
    const bool fpt = StartsWith(name, "fpt.");
    const bool prompts = name == "prompts";
    bool tunable = false;
    switch (mode) {
      case TuningMode::kFull: tunable = true; break;
      case TuningMode::kDecoderOnly: tunable = decoder; break;
      case TuningMode::kPlusFpt: tunable = decoder || adapter || fpt || prompts; break;
      case TuningMode::kPlusAdapter: tunable = decoder || adapter; break;
    }
    (tunable ? p.tunable : p.frozen)[name] = shape.numel();
  }
  return p;
}

ParameterPartition PartitionParameters(const Model& model, TuningMode mode) {
  ShapeMap shapes;
  for (const auto& [name, t] : model.params()) shapes[name] = {t.rows(), t.cols()};
  return PartitionParameters(shapes, mode);
}

ParameterCounts CountParameters(const ParameterPartition& partition) {
  ParameterCounts c;
  for (const auto& [_, n] : partition.frozen) c.frozen += n;
  for (const auto& [_, n] : partition.tunable) c.tunable += n;
  const auto total = c.frozen + c.tunable;
  c.tunable_fraction = total > 0 ? static_cast<double>(c.tunable) / static_cast<double>(total) : 0.0;
  return c;
}

std::int64_t TunableIncrement(const ParameterPartition& partition) {
  std::int64_t n = 0;
  for (const auto& [name, count] : partition.tunable) {
    if (!StartsWith(name, "decoder.")) n += count;
  }
  return n;
}

Model::Model(ModalitySpec spec, BackboneConfig config, std::uint64_t seed)
    : spec_(std::move(spec)), config_(config) {
  for (const auto& [name, shape] : ParameterShapes(spec_, config_)) params_[name] = InitTensor(name, shape, seed);
  upsample_ = BuildUpsample(config_);
}

Model::Model(ModalitySpec spec, BackboneConfig config, TensorMap params)
    : spec_(std::move(spec)), config_(config), params_(std::move(params)) {
  const ShapeMap shapes = ParameterShapes(spec_, config_);
  if (shapes.size() != params_.size()) throw ShapeError("parameter set does not match the architecture");
  for (const auto& [name, shape] : shapes) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("missing parameter: " + name);
    if (it->second.rows() != shape.rows || it->second.cols() != shape.cols) {
      throw ShapeError("parameter " + name + " has the wrong shape");
    }
  }
  upsample_ = BuildUpsample(config_);
}

const Matrix& Model::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ShapeError("no parameter named " + name);
  return it->second;
}

TokenBundle PatchEmbed(const Model& m, const Scene& sample) {
  const auto& c = m.config();
  if (static_cast<int>(sample.modalities.size()) != m.spec().size()) {
    throw AlignmentError("sample modalities do not match the modality spec");
  }
  const auto groups = PresentGroups(m, sample);
  if (groups.empty()) throw ShapeError("every modality is omitted from the token stream");
  const int grid = c.tokens_per_modality();
  TokenBundle b;
  b.features.resize(static_cast<Eigen::Index>(groups.size()) * grid, c.d_model);
  for (size_t g = 0; g < groups.size(); ++g) {
    const int i = groups[g];
    const auto& name = m.spec().entry(i).name;
    const Image& img = sample.modalities[static_cast<size_t>(i)];
    if (img.height != c.image_height || img.width != c.image_width || img.channels != m.spec().entry(i).channels) {
      throw ShapeError("modality " + name + " has shape " + std::to_string(img.height) + "x" +
                       std::to_string(img.width) + "x" + std::to_string(img.channels) + ", expected " +
                       std::to_string(c.image_height) + "x" + std::to_string(c.image_width) + "x" +
                       std::to_string(m.spec().entry(i).channels));
    }
    const Matrix patches = ExtractPatches(img, c.patch_size);
    Matrix tokens = patches * m.param(EmbedName(name, "proj")) + m.param(EmbedName(name, "pos"));
    tokens.rowwise() += m.param(EmbedName(name, "bias")).row(0) + m.param(EmbedName(name, "modality")).row(0);
    b.features.middleRows(static_cast<Eigen::Index>(g) * grid, grid) = tokens;
  }
  b.prompts = c.prompt_count > 0 ? m.param("prompts") : Matrix(0, c.d_model);
  b.cls = m.param("embed.cls").row(0);
  return b;
}

TokenBundle Encode(const Model& m, const TokenBundle& bundle) {
  const TokenSplit split = SplitOf(bundle);
  return SplitTokens(EncodeStream(m, JoinTokens(bundle), split, nullptr), split, m.config().depth);
}

Matrix Decode(const Model& m, const TokenBundle& bundle) { return DecodeFeatures(m, bundle.features, nullptr); }

LabelMap ArgmaxClasses(const Matrix& scores, int height, int width) {
  if (scores.rows() != static_cast<Eigen::Index>(height) * width) throw ShapeError("score map size mismatch");
  LabelMap out(height, width);
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < scores.cols(); ++k) {
      if (scores(i, k) > scores(i, best)) best = k;
    }
    out.data[static_cast<size_t>(i)] = static_cast<std::int32_t>(best);
  }
  return out;
}

LabelMap Predict(const Model& m, const Scene& sample) {
  const Matrix scores = Decode(m, Encode(m, PatchEmbed(m, sample)));
  return ArgmaxClasses(scores, m.config().image_height, m.config().image_width);
}

double Loss(const Model& m, const Scene& sample) {
  return CrossEntropy(Decode(m, Encode(m, PatchEmbed(m, sample))), sample.labels, nullptr);
}

double LossAndGradients(const Model& m, const Scene& sample, const ParameterPartition& partition, TensorMap& grads) {
  const auto& c = m.config();
  GradSink sink(m, partition, grads);
  const TokenBundle embedded = PatchEmbed(m, sample);
  const TokenSplit split = SplitOf(embedded);

  const bool encoder_grads = AnyTunable(partition, "block") || AnyTunable(partition, "adapter.") ||
                             AnyTunable(partition, "fpt.") || AnyTunable(partition, "embed.") ||
                             partition.is_tunable("prompts");
  EncoderTape tape;
  const Matrix encoded = EncodeStream(m, JoinTokens(embedded), split, encoder_grads ? &tape : nullptr);
  const Matrix features = encoded.middleRows(split.prompts, split.features);

  DecoderTape dtape;
  const Matrix scores = DecodeFeatures(m, features, &dtape);
  Matrix dscores;
  const double loss = CrossEntropy(scores, sample.labels, &dscores);
  if (!std::isfinite(loss)) throw NumericError("non-finite loss");

  // Decoder.
  const Matrix dgrid = m.upsample().transpose() * dscores;
  if (Matrix* g = sink.get("decoder.w")) *g += dtape.fused.transpose() * dgrid;
  if (Matrix* g = sink.get("decoder.b")) *g += dgrid.colwise().sum();
  if (!encoder_grads && !sink.wants("norm.gamma") && !sink.wants("norm.beta")) return loss;

  const Matrix dfused = dgrid * m.param("decoder.w").transpose() / static_cast<double>(dtape.groups);
  const Matrix dnormed = dfused.replicate(dtape.groups, 1);
  const Matrix dfeatures =
      LayerNormBackward(dnormed, m.param("norm.gamma"), dtape.norm, sink.get("norm.gamma"), sink.get("norm.beta"));
  if (!encoder_grads) return loss;

  Matrix dx = Matrix::Zero(encoded.rows(), encoded.cols());
  dx.middleRows(split.prompts, split.features) = dfeatures;
  for (int l = c.depth - 1; l >= 0; --l) {
    dx = BlockBackward(m, l, tape.blocks[static_cast<size_t>(l)], split, dx, sink);
  }

  // Embeddings.
  if (split.prompts > 0) {
    if (Matrix* g = sink.get("prompts")) *g += dx.topRows(split.prompts);
  }
  if (Matrix* g = sink.get("embed.cls")) *g += dx.bottomRows(1);
  const auto groups = PresentGroups(m, sample);
  const int grid = c.tokens_per_modality();
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& name = m.spec().entry(groups[gi]).name;
    const auto dz = dx.middleRows(split.prompts + static_cast<Eigen::Index>(gi) * grid, grid);
    if (Matrix* g = sink.get(EmbedName(name, "proj"))) {
      *g += ExtractPatches(sample.modalities[static_cast<size_t>(groups[gi])], c.patch_size).transpose() * dz;
    }
    if (Matrix* g = sink.get(EmbedName(name, "bias"))) *g += dz.colwise().sum();
    if (Matrix* g = sink.get(EmbedName(name, "modality"))) *g += dz.colwise().sum();
    if (Matrix* g = sink.get(EmbedName(name, "pos"))) *g += dz;
  }
  return loss;
}

}  // namespace missfpt
