#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "missfpt/tensor.h"

namespace missfpt {

using Rng = std::mt19937_64;

enum class ModalityKind { kDense, kSparse };
enum class SpatialLayout { kGrid, kPointSet };

struct ModalityEntry {
  std::string name;
  ModalityKind kind = ModalityKind::kDense;
  int channels = 1;
  SpatialLayout spatial = SpatialLayout::kGrid;
  bool operator==(const ModalityEntry&) const = default;
};

// Ordered modality descriptors. The order is the bit order of SwitchMask.
// Each modality also answers to a one-letter alias (upper-cased first
// letter), so "R,D" names {rgb, depth}.
class ModalitySpec {
 public:
  // Throws SpecError unless there is at least one dense entry, names are
  // unique and non-empty, and channel counts are positive.
  explicit ModalitySpec(std::vector<ModalityEntry> entries);

  static ModalitySpec RgbDepth();
  // rgb, depth (dense) + lidar, event (sparse).
  static ModalitySpec Quad();

  const std::vector<ModalityEntry>& entries() const { return entries_; }
  const ModalityEntry& entry(int i) const { return entries_[static_cast<size_t>(i)]; }
  int size() const { return static_cast<int>(entries_.size()); }
  int dense_count() const;
  int sparse_count() const;
  bool is_dense(int i) const { return entries_[static_cast<size_t>(i)].kind == ModalityKind::kDense; }

  // Resolves a full name (case-insensitive) or a unique one-letter alias.
  std::optional<int> find(std::string_view name_or_alias) const;
  std::string alias(int i) const;

  bool operator==(const ModalitySpec&) const = default;

 private:
  std::vector<ModalityEntry> entries_;
};

// n+m switch bits aligned to ModalitySpec order; 1 = modality present.
class SwitchMask {
 public:
  static constexpr int kMaxWidth = 64;

  SwitchMask() = default;
  explicit SwitchMask(int width, std::uint64_t bits = 0);
  static SwitchMask AllOn(int width);

  int width() const { return width_; }
  std::uint64_t bits() const { return bits_; }
  bool test(int i) const { return (bits_ >> i) & 1u; }
  void set(int i, bool on);
  int count() const;

  // Dense bits, '|', sparse bits, each group in spec order ("11|10").
  std::string ToString(const ModalitySpec& spec) const;

  bool operator==(const SwitchMask&) const = default;

 private:
  std::uint64_t bits_ = 0;
  int width_ = 0;
};

struct MissingCondition {
  std::vector<std::string> present;  // spec order
  int canonical_id = 0;
  SwitchMask mask;

  bool complete() const { return mask.count() == mask.width(); }
  // Aliases of present modalities joined by ',' ("R,D").
  std::string Label(const ModalitySpec& spec) const;
};

enum class DropoutMode { kZeroFill, kDropTokens };

// (2^n - 1) * 2^m. Throws SpecError for n_dense == 0.
std::uint64_t CountMissingConditions(int n_dense, int m_sparse);

// All legal conditions: at least one dense modality present. Ordered by
// presence count (descending), then by switch pattern with earlier spec
// entries taking precedence, so element 0 is the complete condition.
std::vector<MissingCondition> EnumerateConditions(const ModalitySpec& spec);

// Looks up a condition from a comma-separated list of names or aliases.
// Throws SpecError for unknown names or conditions without a dense modality.
MissingCondition ParseCondition(const ModalitySpec& spec, std::string_view text);

// If every dense bit of `raw` is 0, all dense bits become 1. Sparse bits are
// never touched.
SwitchMask RemapDenseBits(const ModalitySpec& spec, SwitchMask raw);

// One independent fair bit per modality, then RemapDenseBits.
SwitchMask SampleSwitchMask(const ModalitySpec& spec, Rng& rng);

// zero_fill replaces absent modality arrays with zeros; drop_tokens marks
// them omitted. Present modalities pass through untouched. Throws
// AlignmentError when sample, mask and spec disagree in length.
Scene ApplyModalityDropout(const Scene& sample, const SwitchMask& mask, DropoutMode mode,
                           const ModalitySpec& spec);

// Baseline strategy: round(ratio * dataset_size) samples get a condition
// drawn uniformly from the incomplete ones, the rest are complete. When
// the spec has no incomplete condition every sample is complete.
std::vector<MissingCondition> AssignFixedMissingRatio(int dataset_size, double ratio,
                                                      const ModalitySpec& spec, Rng& rng);

}  // namespace missfpt
