#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace missfpt {

// Token matrices are row-major: one token per row, channels along columns.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// Named parameter set. std::map keeps checkpoint order deterministic.
using TensorMap = std::map<std::string, Matrix>;

struct TensorShape {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::int64_t numel() const { return rows * cols; }
  bool operator==(const TensorShape&) const = default;
};

using ShapeMap = std::map<std::string, TensorShape>;

// H x W x C image, channels interleaved (HWC).
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c) : height(h), width(w), channels(c), data(static_cast<size_t>(h) * w * c, 0.0) {}

  double& at(int y, int x, int c = 0) { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c = 0) const { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
  bool operator==(const Image&) const = default;
};

struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::int32_t> data;

  LabelMap() = default;
  LabelMap(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0) {}

  std::int32_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  std::int32_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
  bool operator==(const LabelMap&) const = default;
};

// One multi-modal sample. `modalities` and `omitted` are aligned to the
// ModalitySpec order; `omitted` marks modalities removed from the token
// stream under drop_tokens.
struct Scene {
  std::uint64_t seed = 0;
  std::vector<Image> modalities;
  std::vector<bool> omitted;
  LabelMap labels;
  bool operator==(const Scene&) const = default;
};

}  // namespace missfpt
