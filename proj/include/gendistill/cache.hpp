#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gendistill/dataset.hpp"

namespace gendistill {

inline constexpr char kCacheMagic[4] = {'D', 'T', 'F', 'C'};
inline constexpr uint32_t kCacheVersion = 1;
inline constexpr int64_t kCacheHeaderBytes = 12;
inline constexpr uint8_t kCacheHasSoftLogits = 0x1;
inline constexpr uint8_t kCacheHasLabel = 0x2;

/// Shapes of one record, enough to predict its serialized size.
struct CacheRecordLayout {
  std::array<int64_t, 3> image{};                 // 3,H,W
  std::vector<std::array<int64_t, 4>> levels;     // l,C,h,w
  std::optional<std::array<int64_t, 3>> soft_logits;  // K,h,w
  std::optional<std::array<int64_t, 2>> label;        // H,W

  static CacheRecordLayout of(const FeatureRecord& record);
  int64_t bytes() const;
};

/// Header plus `count` records of the given layout.
int64_t predicted_cache_bytes(const CacheRecordLayout& layout, int64_t count);

/// Writes every record of `stream` and patches the record count into the
/// header. Returns the number of records written.
int64_t export_cache(RecordStream& stream, const std::string& path);

struct CacheHeader {
  uint32_t version = 0;
  uint32_t count = 0;
};

CacheHeader read_cache_header(const std::string& path);

/// Sequential reader. Throws FormatError (naming the byte offset) on a bad
/// magic, unsupported version or truncated file.
class CacheStream : public RecordStream {
 public:
  explicit CacheStream(const std::string& path);

  std::optional<FeatureRecord> next() override;
  int64_t size() const override { return count_; }

 private:
  void read_bytes(void* dst, size_t n, const char* what);
  uint32_t read_u32(const char* what);

  std::string path_;
  std::ifstream in_;
  int64_t offset_ = 0;
  int64_t count_ = 0;
  int64_t read_ = 0;
};

std::unique_ptr<CacheStream> load_cache(const std::string& path);

}  // namespace gendistill
