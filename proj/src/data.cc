#include "missfpt/data.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "missfpt/archive.h"
#include "missfpt/config.h"
#include "missfpt/errors.h"
#include "missfpt/hash.h"

namespace missfpt {
namespace {

constexpr const char* kIndexFile = "index.json";
constexpr const char* kBlobFile = "data.bin";

struct Rgb {
  double r, g, b;
};

// Evenly spaced hues for shape classes, mid grey for the background.
Rgb ClassColor(int k, int num_classes) {
  if (k == 0) return {0.45, 0.45, 0.45};
  const double h = 6.0 * (k - 1) / std::max(1, num_classes - 1);
  const double s = 0.85, v = 0.9;
  const int sector = static_cast<int>(std::floor(h)) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

double ClassDepth(int k, int num_classes) {
  if (num_classes <= 2) return 0.4;
  return 0.15 + 0.6 * (k - 1) / (num_classes - 2);
}

bool InsideShape(int type, double dy, double dx, double size) {
  switch (type) {
    case 0:  // axis-aligned rectangle, 2:1 aspect
      return std::abs(dx) <= size && std::abs(dy) <= 0.6 * size;
    case 1:  // disk
      return dx * dx + dy * dy <= size * size;
    case 2:  // upward triangle
      return dy <= 0.8 * size && dy >= -size && std::abs(dx) <= 0.6 * (dy + size);
    default: {  // ring
      const double r2 = dx * dx + dy * dy;
      return r2 <= size * size && r2 >= 0.36 * size * size;
    }
  }
}

double Clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

int FindModality(const ModalitySpec& spec, const std::string& name) {
  for (int i = 0; i < spec.size(); ++i) {
    if (spec.entry(i).name == name) return i;
  }
  return -1;
}

Image MotionBlur(const Image& in, int length, bool horizontal) {
  if (length <= 1) return in;
  Image out(in.height, in.width, in.channels);
  const int lo = -(length - 1) / 2;
  for (int y = 0; y < in.height; ++y) {
    for (int x = 0; x < in.width; ++x) {
      for (int c = 0; c < in.channels; ++c) {
        double acc = 0.0;
        for (int k = lo; k < lo + length; ++k) {
          const int yy = horizontal ? y : std::clamp(y + k, 0, in.height - 1);
          const int xx = horizontal ? std::clamp(x + k, 0, in.width - 1) : x;
          acc += in.at(yy, xx, c);
        }
        out.at(y, x, c) = acc / length;
      }
    }
  }
  return out;
}

Image LidarJitter(const Image& in, double severity, Rng& rng) {
  Image out(in.height, in.width, in.channels);
  std::normal_distribution<double> offset(0.0, 3.0 * severity);
  std::normal_distribution<double> value_noise(0.0, 0.05 * severity);
  for (int y = 0; y < in.height; ++y) {
    for (int x = 0; x < in.width; ++x) {
      const double v = in.at(y, x);
      if (v == 0.0) continue;
      const int ty = std::clamp(y + static_cast<int>(std::lround(offset(rng))), 0, in.height - 1);
      const int tx = std::clamp(x + static_cast<int>(std::lround(offset(rng))), 0, in.width - 1);
      const double nv = std::clamp(v + value_noise(rng), 1e-3, 1.0);
      // On collision fall back to the original cell; drop only if both are taken.
      if (out.at(ty, tx) == 0.0) {
        out.at(ty, tx) = nv;
      } else if (out.at(y, x) == 0.0) {
        out.at(y, x) = nv;
      }
    }
  }
  return out;
}

Image EventLowRes(const Image& in, int factor) {
  Image out(in.height, in.width, in.channels);
  for (int y = 0; y < in.height; ++y) {
    for (int x = 0; x < in.width; ++x) {
      for (int c = 0; c < in.channels; ++c) out.at(y, x, c) = in.at((y / factor) * factor, (x / factor) * factor, c);
    }
  }
  return out;
}

}  // namespace

void SceneConfig::Validate() const {
  if (height < 1 || width < 1) throw SpecError("scene dimensions must be positive");
  if (num_classes < 2) throw SpecError("scenes need at least two classes");
  if (min_shapes < 0 || max_shapes < min_shapes) throw SpecError("invalid shape count range");
  if (rgb_noise < 0 || depth_noise < 0) throw SpecError("noise levels must be non-negative");
}

double NonzeroFraction(const Image& image) {
  if (image.data.empty()) return 0.0;
  const auto nz = std::count_if(image.data.begin(), image.data.end(), [](double v) { return v != 0.0; });
  return static_cast<double>(nz) / static_cast<double>(image.data.size());
}

Scene GenerateScene(std::uint64_t seed, const SceneConfig& config, const ModalitySpec& spec) {
  config.Validate();
  const int h = config.height, w = config.width, k = config.num_classes;
  Rng rng(seed);
  std::uniform_int_distribution<int> count_dist(config.min_shapes, config.max_shapes);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Scene scene;
  scene.seed = seed;
  scene.labels = LabelMap(h, w);
  Image depth(h, w, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) depth.at(y, x) = 0.85 + 0.1 * y / h;
  }

  const int shapes = count_dist(rng);
  for (int s = 0; s < shapes; ++s) {
    const int cls = 1 + static_cast<int>(unit(rng) * (k - 1)) % (k - 1);
    const double cy = unit(rng) * h, cx = unit(rng) * w;
    const double size = std::min(h, w) * (0.08 + 0.14 * unit(rng));
    const double z = ClassDepth(cls, k) + 0.06 * (unit(rng) - 0.5);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (InsideShape((cls - 1) % 4, y + 0.5 - cy, x + 0.5 - cx, size)) {
          scene.labels.at(y, x) = cls;
          depth.at(y, x) = z;
        }
      }
    }
  }

  // Clean render, used for the event map so noise does not create events.
  Image clean(h, w, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Rgb c = ClassColor(scene.labels.at(y, x), k);
      const double shade = scene.labels.at(y, x) == 0 ? 0.08 * y / h : 0.0;
      clean.at(y, x, 0) = Clamp01(c.r + shade);
      clean.at(y, x, 1) = Clamp01(c.g + shade);
      clean.at(y, x, 2) = Clamp01(c.b + shade);
    }
  }

  std::normal_distribution<double> rgb_noise(0.0, config.rgb_noise);
  std::normal_distribution<double> depth_noise(0.0, config.depth_noise);
  Image rgb = clean;
  for (double& v : rgb.data) v = Clamp01(v + rgb_noise(rng));
  for (double& v : depth.data) v = Clamp01(v + depth_noise(rng));

  // LiDAR: one jittered sample per 4x4 cell, 90% of cells hit.
  Image lidar(h, w, 1);
  for (int by = 0; by < h; by += 4) {
    for (int bx = 0; bx < w; bx += 4) {
      const int y = std::min(h - 1, by + static_cast<int>(unit(rng) * 4));
      const int x = std::min(w - 1, bx + static_cast<int>(unit(rng) * 4));
      if (unit(rng) < 0.9) lidar.at(y, x) = std::max(depth.at(y, x), 1e-3);
    }
  }

  // Events: thresholded forward-difference gradient of the clean luminance,
  // capped at 10% of the pixels (strongest edges kept).
  Image event(h, w, 1);
  std::vector<std::pair<double, int>> edges;
  auto lum = [&](int y, int x) {
    return 0.299 * clean.at(y, x, 0) + 0.587 * clean.at(y, x, 1) + 0.114 * clean.at(y, x, 2);
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = x + 1 < w ? lum(y, x + 1) - lum(y, x) : 0.0;
      const double gy = y + 1 < h ? lum(y + 1, x) - lum(y, x) : 0.0;
      const double mag = std::abs(gx) + std::abs(gy);
      if (mag > 0.05) edges.emplace_back(mag, y * w + x);
    }
  }
  const auto cap = static_cast<size_t>(0.1 * h * w);
  if (edges.size() > cap) {
    std::stable_sort(edges.begin(), edges.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    edges.resize(cap);
  }
  for (const auto& [mag, idx] : edges) event.data[static_cast<size_t>(idx)] = 1.0;

  for (const auto& e : spec.entries()) {
    if (e.name == "rgb" && e.channels == 3) {
      scene.modalities.push_back(rgb);
    } else if (e.name == "depth" && e.channels == 1) {
      scene.modalities.push_back(depth);
    } else if (e.name == "lidar" && e.channels == 1) {
      scene.modalities.push_back(lidar);
    } else if (e.name == "event" && e.channels == 1) {
      scene.modalities.push_back(event);
    } else {
      throw SpecError("no synthetic renderer for modality '" + e.name + "' with " + std::to_string(e.channels) +
                      " channels");
    }
  }
  scene.omitted.assign(scene.modalities.size(), false);
  return scene;
}

std::string ShortName(FailureKind kind) {
  switch (kind) {
    case FailureKind::kMotionBlur: return "MB";
    case FailureKind::kOverExposure: return "OE";
    case FailureKind::kUnderExposure: return "UE";
    case FailureKind::kLidarJitter: return "LJ";
    case FailureKind::kEventLowRes: return "EL";
  }
  return "?";
}

std::string LongName(FailureKind kind) {
  switch (kind) {
    case FailureKind::kMotionBlur: return "motion_blur";
    case FailureKind::kOverExposure: return "over_exposure";
    case FailureKind::kUnderExposure: return "under_exposure";
    case FailureKind::kLidarJitter: return "lidar_jitter";
    case FailureKind::kEventLowRes: return "event_low_res";
  }
  return "?";
}

FailureKind ParseFailureKind(std::string_view text) {
  for (FailureKind k : kAllFailureKinds) {
    if (text == ShortName(k) || text == LongName(k)) return k;
  }
  throw ConfigError("unknown failure kind: '" + std::string(text) + "'");
}

std::optional<FailureSpec> DefaultFailure(FailureKind kind, double severity, const ModalitySpec& spec) {
  switch (kind) {
    case FailureKind::kMotionBlur:
    case FailureKind::kOverExposure:
    case FailureKind::kUnderExposure: {
      int target = -1;
      for (int i = 0; i < spec.size(); ++i) {
        if (spec.is_dense(i) && spec.entry(i).channels == 3) {
          target = i;
          break;
        }
      }
      if (target < 0) {
        for (int i = 0; i < spec.size() && target < 0; ++i) {
          if (spec.is_dense(i)) target = i;
        }
      }
      return FailureSpec{kind, severity, spec.entry(target).name};
    }
    case FailureKind::kLidarJitter:
      if (FindModality(spec, "lidar") >= 0) return FailureSpec{kind, severity, "lidar"};
      return std::nullopt;
    case FailureKind::kEventLowRes:
      if (FindModality(spec, "event") >= 0) return FailureSpec{kind, severity, "event"};
      return std::nullopt;
  }
  return std::nullopt;
}

Scene InjectFailure(const Scene& scene, const FailureSpec& failure, const ModalitySpec& spec, Rng& rng) {
  if (!(failure.severity > 0.0 && failure.severity <= 1.0)) throw SpecError("failure severity must lie in (0, 1]");
  const int target = FindModality(spec, failure.target_modality);
  if (target < 0) throw SpecError("failure target '" + failure.target_modality + "' is not in the modality spec");
  if (static_cast<int>(scene.modalities.size()) != spec.size()) {
    throw AlignmentError("scene modalities do not match the modality spec");
  }
  const auto& entry = spec.entry(target);
  const bool dense = entry.kind == ModalityKind::kDense;
  bool compatible = false;
  switch (failure.kind) {
    case FailureKind::kMotionBlur:
    case FailureKind::kOverExposure:
    case FailureKind::kUnderExposure: compatible = dense; break;
    case FailureKind::kLidarJitter: compatible = !dense && entry.name == "lidar"; break;
    case FailureKind::kEventLowRes: compatible = !dense && entry.name == "event"; break;
  }
  if (!compatible) {
    throw SpecError(LongName(failure.kind) + " cannot be applied to modality '" + entry.name + "'");
  }

  Scene out = scene;
  Image& img = out.modalities[static_cast<size_t>(target)];
  const double s = failure.severity;
  switch (failure.kind) {
    case FailureKind::kMotionBlur: {
      const bool horizontal = (rng() >> 63) != 0;
      img = MotionBlur(img, static_cast<int>(std::ceil(s * 9.0)), horizontal);
      break;
    }
    case FailureKind::kOverExposure:
      for (double& v : img.data) v = Clamp01(v * (1.0 + 3.0 * s));
      break;
    case FailureKind::kUnderExposure:
      for (double& v : img.data) v *= 1.0 - 0.9 * s;
      break;
    case FailureKind::kLidarJitter:
      img = LidarJitter(img, s, rng);
      break;
    case FailureKind::kEventLowRes:
      img = EventLowRes(img, 1 << static_cast<int>(std::ceil(2.0 * s)));
      break;
  }
  return out;
}

std::uint64_t SceneSeed(std::uint64_t base_seed, int index) {
  return SplitMix64(base_seed + static_cast<std::uint64_t>(index));
}

Dataset GenerateDataset(const ModalitySpec& spec, const SceneConfig& config, int count, std::uint64_t base_seed) {
  if (count < 0) throw SpecError("scene count must be non-negative");
  Dataset d{spec, config, base_seed, {}};
  d.scenes.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) d.scenes.push_back(GenerateScene(SceneSeed(base_seed, i), config, spec));
  return d;
}

void WriteDataset(const std::filesystem::path& dir, const Dataset& dataset, const std::string& config_hash) {
  ArchiveWriter writer;
  nlohmann::json seeds = nlohmann::json::array();
  for (size_t i = 0; i < dataset.scenes.size(); ++i) {
    const Scene& s = dataset.scenes[i];
    const std::string prefix = "scene" + std::to_string(i) + ".";
    seeds.push_back(s.seed);
    for (int m = 0; m < dataset.spec.size(); ++m) {
      writer.Add(prefix + dataset.spec.entry(m).name, s.modalities[static_cast<size_t>(m)]);
    }
    writer.Add(prefix + "labels", s.labels);
  }
  nlohmann::json meta = {{"kind", "dataset"},
                         {"scene_count", dataset.scenes.size()},
                         {"base_seed", dataset.base_seed},
                         {"seeds", seeds},
                         {"modalities", ToJson(dataset.spec)},
                         {"scene", ToJson(dataset.scene_config)},
                         {"config_hash", config_hash}};
  writer.Write(dir, kIndexFile, kBlobFile, meta);
}

Dataset ReadDataset(const std::filesystem::path& dir) {
  ArchiveReader reader(dir, kIndexFile);
  const auto& meta = reader.meta();
  if (meta.value("kind", "") != "dataset") throw IntegrityError(dir.string() + " is not a dataset");
  Dataset d;
  try {
    d.spec = ModalitySpecFromJson(meta.at("modalities"));
    d.scene_config = SceneConfigFromJson(meta.at("scene"));
    d.base_seed = meta.at("base_seed").get<std::uint64_t>();
    const auto seeds = meta.at("seeds").get<std::vector<std::uint64_t>>();
    if (seeds.size() != meta.at("scene_count").get<size_t>()) throw IntegrityError("index seed list is inconsistent");
    for (size_t i = 0; i < seeds.size(); ++i) {
      const std::string prefix = "scene" + std::to_string(i) + ".";
      Scene s;
      s.seed = seeds[i];
      for (const auto& e : d.spec.entries()) s.modalities.push_back(reader.image(prefix + e.name));
      s.omitted.assign(s.modalities.size(), false);
      s.labels = reader.labels(prefix + "labels");
      d.scenes.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("malformed dataset index: " + std::string(e.what()));
  }
  return d;
}

}  // namespace missfpt
