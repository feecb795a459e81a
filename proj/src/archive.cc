#include "missfpt/archive.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "missfpt/errors.h"
#include "missfpt/hash.h"

#ifndef MISSFPT_VERSION
#define MISSFPT_VERSION "0.0.0"
#endif

static_assert(std::endian::native == std::endian::little, "archive blobs are written in host order");

namespace missfpt {
namespace {

constexpr const char* kFormat = "missfpt-archive";

std::uint64_t Checksum(const std::vector<char>& blob) { return Fnv1a64(std::string_view(blob.data(), blob.size())); }

}  // namespace

std::string ToolVersion() { return MISSFPT_VERSION; }

std::string HexU64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<size_t>(i)] = digits[v & 0xf];
  return s;
}

void ArchiveWriter::Append(const std::string& name, std::vector<std::int64_t> shape, const std::string& dtype,
                           const void* data, std::size_t nbytes) {
  Entry e{name, std::move(shape), dtype, blob_.size(), nbytes};
  const auto* bytes = static_cast<const char*>(data);
  blob_.insert(blob_.end(), bytes, bytes + nbytes);
  entries_.push_back(std::move(e));
}

void ArchiveWriter::Add(const std::string& name, const Matrix& m) {
  Append(name, {m.rows(), m.cols()}, "f64", m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
}

void ArchiveWriter::Add(const std::string& name, const Image& image) {
  Append(name, {image.height, image.width, image.channels}, "f64", image.data.data(),
         image.data.size() * sizeof(double));
}

void ArchiveWriter::Add(const std::string& name, const LabelMap& labels) {
  Append(name, {labels.height, labels.width}, "i32", labels.data.data(), labels.data.size() * sizeof(std::int32_t));
}

void ArchiveWriter::Write(const std::filesystem::path& dir, const std::string& manifest_name,
                          const std::string& blob_name, const nlohmann::json& meta) const {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());

  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : entries_) {
    tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"dtype", e.dtype}, {"offset", e.offset},
                       {"nbytes", e.nbytes}});
  }
  nlohmann::json manifest = {{"format", kFormat},
                             {"version", kArchiveVersion},
                             {"tool_version", ToolVersion()},
                             {"blob", blob_name},
                             {"blob_bytes", blob_.size()},
                             {"blob_fnv1a64", HexU64(Checksum(blob_))},
                             {"tensors", tensors},
                             {"meta", meta}};

  std::ofstream blob(dir / blob_name, std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("cannot write " + (dir / blob_name).string());
  blob.write(blob_.data(), static_cast<std::streamsize>(blob_.size()));
  if (!blob) throw IoError("short write to " + (dir / blob_name).string());

  std::ofstream out(dir / manifest_name, std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / manifest_name).string());
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("short write to " + (dir / manifest_name).string());
}

ArchiveReader::ArchiveReader(const std::filesystem::path& dir, const std::string& manifest_name) {
  std::ifstream in(dir / manifest_name);
  if (!in) throw IoError("cannot open " + (dir / manifest_name).string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("malformed manifest " + (dir / manifest_name).string() + ": " + e.what());
  }
  try {
    if (manifest.at("format") != kFormat) throw IntegrityError("not a missfpt archive");
    if (manifest.at("version").get<int>() != kArchiveVersion) {
      throw IntegrityError("archive version " + manifest.at("version").dump() + " is not supported (expected " +
                           std::to_string(kArchiveVersion) + ")");
    }
    const auto blob_path = dir / manifest.at("blob").get<std::string>();
    std::ifstream blob(blob_path, std::ios::binary);
    if (!blob) throw IoError("cannot open " + blob_path.string());
    blob_.assign(std::istreambuf_iterator<char>(blob), std::istreambuf_iterator<char>());
    const auto expected = manifest.at("blob_bytes").get<std::uint64_t>();
    if (blob_.size() != expected) {
      throw IntegrityError("blob " + blob_path.string() + " has " + std::to_string(blob_.size()) +
                           " bytes, manifest expects " + std::to_string(expected));
    }
    if (HexU64(Checksum(blob_)) != manifest.at("blob_fnv1a64").get<std::string>()) {
      throw IntegrityError("blob checksum mismatch for " + blob_path.string());
    }
    for (const auto& t : manifest.at("tensors")) {
      Entry e{t.at("shape").get<std::vector<std::int64_t>>(), t.at("dtype").get<std::string>(),
              t.at("offset").get<std::uint64_t>(), t.at("nbytes").get<std::uint64_t>()};
      if (e.offset + e.nbytes > blob_.size()) throw IntegrityError("tensor extends past the blob end");
      entries_[t.at("name").get<std::string>()] = std::move(e);
    }
    meta_ = manifest.value("meta", nlohmann::json::object());
    tool_version_ = manifest.value("tool_version", "");
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("malformed manifest: " + std::string(e.what()));
  }
}

std::vector<std::string> ArchiveReader::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

const ArchiveReader::Entry& ArchiveReader::entry(const std::string& name, const std::string& dtype,
                                                 std::size_t rank) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw IntegrityError("archive has no tensor " + name);
  const Entry& e = it->second;
  if (e.dtype != dtype || e.shape.size() != rank) throw IntegrityError("tensor " + name + " has unexpected layout");
  std::uint64_t count = 1;
  for (auto s : e.shape) count *= static_cast<std::uint64_t>(s);
  const std::uint64_t width = dtype == "f64" ? sizeof(double) : sizeof(std::int32_t);
  if (count * width != e.nbytes) throw IntegrityError("tensor " + name + " size disagrees with its shape");
  return e;
}

Matrix ArchiveReader::matrix(const std::string& name) const {
  const Entry& e = entry(name, "f64", 2);
  Matrix m(e.shape[0], e.shape[1]);
  std::memcpy(m.data(), blob_.data() + e.offset, e.nbytes);
  return m;
}

Image ArchiveReader::image(const std::string& name) const {
  const Entry& e = entry(name, "f64", 3);
  Image img(static_cast<int>(e.shape[0]), static_cast<int>(e.shape[1]), static_cast<int>(e.shape[2]));
  std::memcpy(img.data.data(), blob_.data() + e.offset, e.nbytes);
  return img;
}

LabelMap ArchiveReader::labels(const std::string& name) const {
  const Entry& e = entry(name, "i32", 2);
  LabelMap l(static_cast<int>(e.shape[0]), static_cast<int>(e.shape[1]));
  std::memcpy(l.data.data(), blob_.data() + e.offset, e.nbytes);
  return l;
}

}  // namespace missfpt
