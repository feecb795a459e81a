#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "missfpt/tensor.h"

namespace missfpt {

inline constexpr int kArchiveVersion = 1;
std::string ToolVersion();

// Manifest + single little-endian blob. The manifest records, per tensor,
// its shape, dtype ("f64" or "i32"), byte offset and size, plus the blob
// length and FNV-1a checksum so truncation and corruption are detected.
class ArchiveWriter {
 public:
  void Add(const std::string& name, const Matrix& m);
  void Add(const std::string& name, const Image& image);
  void Add(const std::string& name, const LabelMap& labels);

  // Writes `manifest_name` and `blob_name` into `dir` (created if needed).
  // `meta` is stored verbatim under "meta".
  void Write(const std::filesystem::path& dir, const std::string& manifest_name, const std::string& blob_name,
             const nlohmann::json& meta) const;

 private:
  struct Entry {
    std::string name;
    std::vector<std::int64_t> shape;
    std::string dtype;
    std::uint64_t offset = 0;
    std::uint64_t nbytes = 0;
  };
  void Append(const std::string& name, std::vector<std::int64_t> shape, const std::string& dtype, const void* data,
              std::size_t nbytes);

  std::vector<Entry> entries_;
  std::vector<char> blob_;
};

class ArchiveReader {
 public:
  // Throws IoError when files are missing, IntegrityError on version,
  // length or checksum mismatch.
  ArchiveReader(const std::filesystem::path& dir, const std::string& manifest_name);

  const nlohmann::json& meta() const { return meta_; }
  // Version of the tool that wrote the archive.
  const std::string& tool_version() const { return tool_version_; }
  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  std::vector<std::string> names() const;

  Matrix matrix(const std::string& name) const;
  Image image(const std::string& name) const;
  LabelMap labels(const std::string& name) const;

 private:
  struct Entry {
    std::vector<std::int64_t> shape;
    std::string dtype;
    std::uint64_t offset = 0;
    std::uint64_t nbytes = 0;
  };
  const Entry& entry(const std::string& name, const std::string& dtype, std::size_t rank) const;

  nlohmann::json meta_;
  std::string tool_version_;
  std::map<std::string, Entry> entries_;
  std::vector<char> blob_;
};

std::string HexU64(std::uint64_t v);

}  // namespace missfpt
