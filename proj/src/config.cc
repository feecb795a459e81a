#include "missfpt/config.h"

#include <fstream>
#include <set>

#include "missfpt/archive.h"
#include "missfpt/errors.h"
#include "missfpt/hash.h"

namespace missfpt {
namespace {

using nlohmann::json;

// Typed field access over one JSON object; remembers which keys were read
// so leftovers can be reported as unknown.
class StrictObject {
 public:
  StrictObject(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError("'" + section_ + "' must be an object");
  }

  template <class T>
  void Read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(section_ + "." + key + ": " + e.what());
    }
  }

  template <class T>
  void ReadOptional(const std::string& key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    T v{};
    Read(key, v);
    out = v;
  }

  const json* Section(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::optional<std::string> ReadString(const std::string& key) {
    std::optional<std::string> s;
    ReadOptional(key, s);
    return s;
  }

  void Finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + section_ + "." + key + "'");
    }
  }

 private:
  const json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

std::string ToString(ModalityKind k) { return k == ModalityKind::kDense ? "dense" : "sparse"; }
std::string ToString(SpatialLayout s) { return s == SpatialLayout::kGrid ? "grid" : "pointset"; }

std::string ToString(FftAxis a) {
  switch (a) {
    case FftAxis::kChannel: return "channel";
    case FftAxis::kToken: return "token";
    case FftAxis::kBoth: return "both";
  }
  return "?";
}

FftAxis ParseFftAxis(const std::string& s) {
  if (s == "channel") return FftAxis::kChannel;
  if (s == "token") return FftAxis::kToken;
  if (s == "both") return FftAxis::kBoth;
  throw ConfigError("unknown fft_axis: '" + s + "'");
}

std::string ToString(DropoutMode m) { return m == DropoutMode::kZeroFill ? "zero_fill" : "drop_tokens"; }

DropoutMode ParseDropoutMode(const std::string& s) {
  if (s == "zero_fill") return DropoutMode::kZeroFill;
  if (s == "drop_tokens") return DropoutMode::kDropTokens;
  throw ConfigError("unknown dropout_mode: '" + s + "'");
}

}  // namespace

json ToJson(const ModalitySpec& spec) {
  json out = json::array();
  for (const auto& e : spec.entries()) {
    out.push_back({{"name", e.name}, {"kind", ToString(e.kind)}, {"channels", e.channels}, {"spatial", ToString(e.spatial)}});
  }
  return out;
}

ModalitySpec ModalitySpecFromJson(const json& j) {
  if (!j.is_array()) throw ConfigError("'modalities' must be a list");
  std::vector<ModalityEntry> entries;
  for (size_t i = 0; i < j.size(); ++i) {
    StrictObject o(j[i], "modalities[" + std::to_string(i) + "]");
    ModalityEntry e;
    o.Read("name", e.name);
    o.Read("channels", e.channels);
    if (auto kind = o.ReadString("kind")) {
      if (*kind == "dense") {
        e.kind = ModalityKind::kDense;
      } else if (*kind == "sparse") {
        e.kind = ModalityKind::kSparse;
      } else {
        throw ConfigError("unknown modality kind: '" + *kind + "'");
      }
    }
    if (auto spatial = o.ReadString("spatial")) {
      if (*spatial == "grid") {
        e.spatial = SpatialLayout::kGrid;
      } else if (*spatial == "pointset") {
        e.spatial = SpatialLayout::kPointSet;
      } else {
        throw ConfigError("unknown spatial layout: '" + *spatial + "'");
      }
    }
    o.Finish();
    entries.push_back(std::move(e));
  }
  try {
    return ModalitySpec(std::move(entries));
  } catch (const SpecError& e) {
    throw ConfigError(e.what());
  }
}

json ToJson(const BackboneConfig& c) {
  return {{"depth", c.depth},
          {"d_model", c.d_model},
          {"heads", c.heads},
          {"mlp_hidden", c.mlp_hidden},
          {"patch_size", c.patch_size},
          {"prompt_count", c.prompt_count},
          {"bottleneck", c.bottleneck},
          {"fpt_blocks", c.fpt_blocks},
          {"num_classes", c.num_classes},
          {"image_height", c.image_height},
          {"image_width", c.image_width},
          {"use_adapter", c.use_adapter},
          {"use_fpt", c.use_fpt},
          {"late_block_fft", c.late_block_fft},
          {"prompt_space", ToString(c.spectral.variant)},
          {"fft_axis", ToString(c.spectral.fft_axis)},
          {"dropout_mode", ToString(c.dropout_mode)}};
}

BackboneConfig BackboneConfigFromJson(const json& j) {
  StrictObject o(j, "backbone");
  BackboneConfig c;
  o.Read("depth", c.depth);
  o.Read("d_model", c.d_model);
  o.Read("heads", c.heads);
  o.Read("mlp_hidden", c.mlp_hidden);
  o.Read("patch_size", c.patch_size);
  o.Read("prompt_count", c.prompt_count);
  o.Read("bottleneck", c.bottleneck);
  o.Read("fpt_blocks", c.fpt_blocks);
  o.Read("num_classes", c.num_classes);
  o.Read("image_height", c.image_height);
  o.Read("image_width", c.image_width);
  o.Read("use_adapter", c.use_adapter);
  o.Read("use_fpt", c.use_fpt);
  o.Read("late_block_fft", c.late_block_fft);
  if (auto s = o.ReadString("prompt_space")) c.spectral.variant = ParsePromptSpace(*s);
  if (auto s = o.ReadString("fft_axis")) c.spectral.fft_axis = ParseFftAxis(*s);
  if (auto s = o.ReadString("dropout_mode")) c.dropout_mode = ParseDropoutMode(*s);
  o.Finish();
  try {
    c.Validate();
  } catch (const SpecError& e) {
    throw ConfigError(std::string("backbone: ") + e.what());
  }
  return c;
}

json ToJson(const SceneConfig& c) {
  return {{"height", c.height},         {"width", c.width},         {"num_classes", c.num_classes},
          {"min_shapes", c.min_shapes}, {"max_shapes", c.max_shapes}, {"rgb_noise", c.rgb_noise},
          {"depth_noise", c.depth_noise}};
}

namespace {

void ReadSceneFields(StrictObject& o, SceneConfig& c) {
  o.Read("height", c.height);
  o.Read("width", c.width);
  o.Read("num_classes", c.num_classes);
  o.Read("min_shapes", c.min_shapes);
  o.Read("max_shapes", c.max_shapes);
  o.Read("rgb_noise", c.rgb_noise);
  o.Read("depth_noise", c.depth_noise);
}

void ValidateScene(const SceneConfig& c) {
  try {
    c.Validate();
  } catch (const SpecError& e) {
    throw ConfigError(std::string("data: ") + e.what());
  }
}

}  // namespace

SceneConfig SceneConfigFromJson(const json& j) {
  StrictObject o(j, "scene");
  SceneConfig c;
  ReadSceneFields(o, c);
  o.Finish();
  ValidateScene(c);
  return c;
}

json ToJson(const TrainConfig& c) {
  return {{"regime", ToString(c.regime)},
          {"missing_ratio", c.missing_ratio},
          {"tuning", ToString(c.tuning)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"warmup_steps", c.warmup_steps},
          {"seed", c.seed ? json(*c.seed) : json(nullptr)}};
}

TrainConfig TrainConfigFromJson(const json& j) {
  StrictObject o(j, "train");
  TrainConfig c;
  if (auto s = o.ReadString("regime")) ParseRegime(*s, c);
  o.Read("missing_ratio", c.missing_ratio);
  if (auto s = o.ReadString("tuning")) c.tuning = ParseTuningMode(*s);
  o.Read("epochs", c.epochs);
  o.Read("batch_size", c.batch_size);
  o.Read("learning_rate", c.learning_rate);
  o.Read("weight_decay", c.weight_decay);
  o.Read("beta1", c.beta1);
  o.Read("beta2", c.beta2);
  o.Read("adam_eps", c.adam_eps);
  o.Read("warmup_steps", c.warmup_steps);
  o.ReadOptional("seed", c.seed);
  o.Finish();
  if (c.epochs < 0 || c.batch_size < 1) throw ConfigError("train: epochs >= 0 and batch_size >= 1 required");
  if (!(c.missing_ratio >= 0.0 && c.missing_ratio <= 1.0)) throw ConfigError("train: missing_ratio must lie in [0, 1]");
  if (!(c.learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
  return c;
}

json ToJson(const DataConfig& c) {
  json j = ToJson(c.scene);
  j["scenes"] = c.scenes;
  j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
  return j;
}

DataConfig DataConfigFromJson(const json& j) {
  StrictObject o(j, "data");
  DataConfig c;
  o.Read("scenes", c.scenes);
  o.ReadOptional("seed", c.seed);
  ReadSceneFields(o, c.scene);
  o.Finish();
  if (c.scenes < 0) throw ConfigError("data: scenes must be non-negative");
  ValidateScene(c.scene);
  return c;
}

json ToJson(const EvalConfig& c) { return {{"failures", c.failures}, {"severity", c.severity}, {"seed", c.seed}}; }

EvalConfig EvalConfigFromJson(const json& j) {
  StrictObject o(j, "eval");
  EvalConfig c;
  o.Read("failures", c.failures);
  o.Read("severity", c.severity);
  o.Read("seed", c.seed);
  o.Finish();
  if (!(c.severity > 0.0 && c.severity <= 1.0)) throw ConfigError("eval: severity must lie in (0, 1]");
  return c;
}

json ToJson(const ExperimentConfig& c) {
  return {{"modalities", ToJson(c.modalities)},
          {"backbone", ToJson(c.backbone)},
          {"train", ToJson(c.train)},
          {"data", ToJson(c.data)},
          {"eval", ToJson(c.eval)}};
}

ExperimentConfig ExperimentConfigFromJson(const json& j) {
  StrictObject o(j, "config");
  ExperimentConfig c;
  if (const json* s = o.Section("modalities")) c.modalities = ModalitySpecFromJson(*s);
  if (const json* s = o.Section("backbone")) c.backbone = BackboneConfigFromJson(*s);
  if (const json* s = o.Section("train")) c.train = TrainConfigFromJson(*s);
  if (const json* s = o.Section("data")) c.data = DataConfigFromJson(*s);
  if (const json* s = o.Section("eval")) c.eval = EvalConfigFromJson(*s);
  o.Finish();
  c.Validate();
  return c;
}

void ExperimentConfig::Validate() const {
  if (backbone.image_height != data.scene.height || backbone.image_width != data.scene.width) {
    throw ConfigError("backbone image size must equal the data scene size");
  }
  if (backbone.num_classes != data.scene.num_classes) {
    throw ConfigError("backbone.num_classes must equal data.num_classes");
  }
}

ExperimentConfig LoadExperimentConfig(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return ExperimentConfigFromJson(j);
}

std::string ConfigHash(const ExperimentConfig& config) { return HexU64(Fnv1a64(ToJson(config).dump())); }

// ---------------------------------------------------------------------------

void WriteCheckpoint(const std::filesystem::path& dir, const Model& model, TuningMode tuning,
                     const std::string& config_hash) {
  ArchiveWriter writer;
  for (const auto& [name, tensor] : model.params()) writer.Add(name, tensor);
  json meta = {{"kind", "checkpoint"},
               {"modalities", ToJson(model.spec())},
               {"backbone", ToJson(model.config())},
               {"tuning", ToString(tuning)},
               {"config_hash", config_hash}};
  writer.Write(dir, "manifest.json", "weights.bin", meta);
}

Checkpoint ReadCheckpoint(const std::filesystem::path& dir) {
  ArchiveReader reader(dir, "manifest.json");
  const json& meta = reader.meta();
  if (meta.value("kind", "") != "checkpoint") throw IntegrityError(dir.string() + " is not a checkpoint");
  try {
    ModalitySpec spec = ModalitySpecFromJson(meta.at("modalities"));
    BackboneConfig config = BackboneConfigFromJson(meta.at("backbone"));
    TensorMap params;
    for (const auto& name : reader.names()) params[name] = reader.matrix(name);
    Checkpoint ck{Model(std::move(spec), config, std::move(params)), ParseTuningMode(meta.at("tuning").get<std::string>()),
                  meta.value("config_hash", ""), reader.tool_version()};
    return ck;
  } catch (const json::exception& e) {
    throw IntegrityError("malformed checkpoint manifest: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw IntegrityError("checkpoint manifest: " + std::string(e.what()));
  } catch (const ShapeError& e) {
    throw IntegrityError("checkpoint tensors: " + std::string(e.what()));
  }
}

}  // namespace missfpt
