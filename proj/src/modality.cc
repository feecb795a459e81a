#include "missfpt/modality.h"

#include <algorithm>
#include <bit>
#include <cctype>
#include <numeric>
#include <set>
#include <sstream>

#include "missfpt/errors.h"

namespace missfpt {
namespace {

std::string Lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string Trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

MissingCondition ConditionFromMask(const ModalitySpec& spec, const SwitchMask& mask, int id) {
  MissingCondition c;
  c.mask = mask;
  c.canonical_id = id;
  for (int i = 0; i < spec.size(); ++i) {
    if (mask.test(i)) c.present.push_back(spec.entry(i).name);
  }
  return c;
}

bool HasDense(const ModalitySpec& spec, const SwitchMask& mask) {
  for (int i = 0; i < spec.size(); ++i) {
    if (spec.is_dense(i) && mask.test(i)) return true;
  }
  return false;
}

}  // namespace

ModalitySpec::ModalitySpec(std::vector<ModalityEntry> entries) : entries_(std::move(entries)) {
  if (entries_.empty()) throw SpecError("modality spec is empty");
  if (entries_.size() > static_cast<size_t>(SwitchMask::kMaxWidth)) {
    throw SpecError("modality spec has more than 64 entries");
  }
  std::set<std::string> names;
  bool any_dense = false;
  for (const auto& e : entries_) {
    if (e.name.empty()) throw SpecError("modality name is empty");
    if (!names.insert(Lower(e.name)).second) throw SpecError("duplicate modality name: " + e.name);
    if (e.channels <= 0) throw SpecError("modality " + e.name + " has non-positive channel count");
    any_dense |= e.kind == ModalityKind::kDense;
  }
  if (!any_dense) throw SpecError("dense prediction requires at least one dense modality");
}

ModalitySpec ModalitySpec::RgbDepth() {
  return ModalitySpec({{"rgb", ModalityKind::kDense, 3}, {"depth", ModalityKind::kDense, 1}});
}

ModalitySpec ModalitySpec::Quad() {
  return ModalitySpec({{"rgb", ModalityKind::kDense, 3},
                       {"depth", ModalityKind::kDense, 1},
                       {"lidar", ModalityKind::kSparse, 1},
                       {"event", ModalityKind::kSparse, 1}});
}

int ModalitySpec::dense_count() const {
  return static_cast<int>(std::count_if(entries_.begin(), entries_.end(),
                                        [](const auto& e) { return e.kind == ModalityKind::kDense; }));
}

int ModalitySpec::sparse_count() const { return size() - dense_count(); }

std::string ModalitySpec::alias(int i) const {
  return std::string(1, static_cast<char>(std::toupper(static_cast<unsigned char>(entry(i).name[0]))));
}

std::optional<int> ModalitySpec::find(std::string_view name_or_alias) const {
  const std::string key = Lower(Trim(name_or_alias));
  if (key.empty()) return std::nullopt;
  for (int i = 0; i < size(); ++i) {
    if (Lower(entry(i).name) == key) return i;
  }
  if (key.size() == 1) {
    std::optional<int> hit;
    for (int i = 0; i < size(); ++i) {
      if (Lower(alias(i)) == key) {
        if (hit) return std::nullopt;  // ambiguous alias
        hit = i;
      }
    }
    return hit;
  }
  return std::nullopt;
}

SwitchMask::SwitchMask(int width, std::uint64_t bits) : bits_(bits), width_(width) {
  if (width < 0 || width > kMaxWidth) throw SpecError("switch mask width out of range");
  if (width < kMaxWidth) bits_ &= (std::uint64_t{1} << width) - 1;
}

SwitchMask SwitchMask::AllOn(int width) {
  return SwitchMask(width, width == kMaxWidth ? ~std::uint64_t{0} : (std::uint64_t{1} << width) - 1);
}

void SwitchMask::set(int i, bool on) {
  if (on) {
    bits_ |= std::uint64_t{1} << i;
  } else {
    bits_ &= ~(std::uint64_t{1} << i);
  }
}

int SwitchMask::count() const { return std::popcount(bits_); }

std::string SwitchMask::ToString(const ModalitySpec& spec) const {
  std::string dense, sparse;
  for (int i = 0; i < spec.size() && i < width_; ++i) {
    (spec.is_dense(i) ? dense : sparse).push_back(test(i) ? '1' : '0');
  }
  return dense + "|" + sparse;
}

std::string MissingCondition::Label(const ModalitySpec& spec) const {
  std::string out;
  for (int i = 0; i < spec.size(); ++i) {
    if (!mask.test(i)) continue;
    if (!out.empty()) out += ',';
    out += spec.alias(i);
  }
  return out;
}

std::uint64_t CountMissingConditions(int n_dense, int m_sparse) {
  if (n_dense < 1) throw SpecError("dense prediction requires at least one dense modality");
  if (m_sparse < 0) throw SpecError("sparse modality count is negative");
  if (n_dense + m_sparse > 62) throw SpecError("too many modalities to count");
  return ((std::uint64_t{1} << n_dense) - 1) << m_sparse;
}

std::vector<MissingCondition> EnumerateConditions(const ModalitySpec& spec) {
  const int width = spec.size();
  std::vector<SwitchMask> masks;
  for (std::uint64_t raw = 0; raw < (std::uint64_t{1} << width); ++raw) {
    SwitchMask m(width, raw);
    if (HasDense(spec, m)) masks.push_back(m);
  }
  // Key for the tie-break: bit i of the spec maps to weight 2^(width-1-i),
  // so patterns with earlier entries present sort first.
  auto order_key = [width](const SwitchMask& m) {
    std::uint64_t key = 0;
    for (int i = 0; i < width; ++i) {
      if (m.test(i)) key |= std::uint64_t{1} << (width - 1 - i);
    }
    return key;
  };
  std::sort(masks.begin(), masks.end(), [&](const SwitchMask& a, const SwitchMask& b) {
    if (a.count() != b.count()) return a.count() > b.count();
    return order_key(a) > order_key(b);
  });
  std::vector<MissingCondition> out;
  out.reserve(masks.size());
  for (size_t i = 0; i < masks.size(); ++i) {
    out.push_back(ConditionFromMask(spec, masks[i], static_cast<int>(i)));
  }
  return out;
}

MissingCondition ParseCondition(const ModalitySpec& spec, std::string_view text) {
  SwitchMask mask(spec.size());
  std::stringstream ss{std::string(text)};
  std::string token;
  while (std::getline(ss, token, ',')) {
    if (Trim(token).empty()) continue;
    auto idx = spec.find(token);
    if (!idx) throw SpecError("unknown modality in condition: '" + Trim(token) + "'");
    mask.set(*idx, true);
  }
  if (!HasDense(spec, mask)) {
    throw SpecError("condition '" + std::string(text) + "' has no dense modality");
  }
  for (const auto& c : EnumerateConditions(spec)) {
    if (c.mask == mask) return c;
  }
  throw SpecError("condition not found");  // unreachable for a valid mask
}

SwitchMask RemapDenseBits(const ModalitySpec& spec, SwitchMask raw) {
  if (raw.width() != spec.size()) throw AlignmentError("mask width does not match modality spec");
  if (HasDense(spec, raw)) return raw;
  for (int i = 0; i < spec.size(); ++i) {
    if (spec.is_dense(i)) raw.set(i, true);
  }
  return raw;
}

SwitchMask SampleSwitchMask(const ModalitySpec& spec, Rng& rng) {
  SwitchMask raw(spec.size());
  for (int i = 0; i < spec.size(); ++i) raw.set(i, (rng() >> 63) != 0);
  return RemapDenseBits(spec, raw);
}

Scene ApplyModalityDropout(const Scene& sample, const SwitchMask& mask, DropoutMode mode,
                           const ModalitySpec& spec) {
  if (mask.width() != spec.size() || static_cast<int>(sample.modalities.size()) != spec.size()) {
    throw AlignmentError("sample, mask and modality spec lengths disagree");
  }
  Scene out = sample;
  out.omitted.resize(sample.modalities.size(), false);
  for (int i = 0; i < spec.size(); ++i) {
    if (mask.test(i)) continue;
    if (mode == DropoutMode::kZeroFill) {
      std::fill(out.modalities[static_cast<size_t>(i)].data.begin(),
                out.modalities[static_cast<size_t>(i)].data.end(), 0.0);
    } else {
      out.omitted[static_cast<size_t>(i)] = true;
    }
  }
  return out;
}

std::vector<MissingCondition> AssignFixedMissingRatio(int dataset_size, double ratio,
                                                      const ModalitySpec& spec, Rng& rng) {
  if (dataset_size < 1) throw SpecError("dataset size must be positive");
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw SpecError("missing ratio must lie in [0, 1]");
  const auto conditions = EnumerateConditions(spec);
  std::vector<MissingCondition> out(static_cast<size_t>(dataset_size), conditions.front());
  if (conditions.size() < 2) return out;

  const auto incomplete = static_cast<int>(std::llround(ratio * dataset_size));
  std::vector<int> order(static_cast<size_t>(dataset_size));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<int> pick(1, static_cast<int>(conditions.size()) - 1);
  for (int k = 0; k < incomplete; ++k) {
    out[static_cast<size_t>(order[static_cast<size_t>(k)])] = conditions[static_cast<size_t>(pick(rng))];
  }
  return out;
}

}  // namespace missfpt
