#include "gendistill/cache.hpp"

#include <bit>
#include <cstring>

#include "gendistill/errors.hpp"

namespace gendistill {

static_assert(std::endian::native == std::endian::little, "cache I/O assumes a little-endian host");

CacheRecordLayout CacheRecordLayout::of(const FeatureRecord& record) {
  CacheRecordLayout layout;
  layout.image = {record.image.size(0), record.image.size(1), record.image.size(2)};
  for (const auto& lvl : record.teacher_features) {
    layout.levels.push_back({lvl.level, lvl.tensor.size(1), lvl.tensor.size(2), lvl.tensor.size(3)});
  }
  if (record.soft_logits) {
    const auto& s = *record.soft_logits;
    layout.soft_logits = std::array<int64_t, 3>{s.size(0), s.size(1), s.size(2)};
  }
  if (record.label) layout.label = std::array<int64_t, 2>{record.label->size(0), record.label->size(1)};
  return layout;
}

int64_t CacheRecordLayout::bytes() const {
  int64_t n = 8 + 12 + 4 * image[0] * image[1] * image[2] + 4;
  for (const auto& l : levels) n += 16 + 4 * l[1] * l[2] * l[3];
  n += 1;
  if (soft_logits) n += 12 + 4 * (*soft_logits)[0] * (*soft_logits)[1] * (*soft_logits)[2];
  if (label) n += 8 + 4 * (*label)[0] * (*label)[1];
  return n;
}

int64_t predicted_cache_bytes(const CacheRecordLayout& layout, int64_t count) {
  return kCacheHeaderBytes + count * layout.bytes();
}

namespace {

void put_u32(std::ofstream& out, int64_t v) {
  const auto u = static_cast<uint32_t>(v);
  out.write(reinterpret_cast<const char*>(&u), 4);
}

void put_floats(std::ofstream& out, const torch::Tensor& t) {
  const auto c = t.to(torch::kFloat).contiguous();
  out.write(reinterpret_cast<const char*>(c.data_ptr<float>()), static_cast<std::streamsize>(c.numel() * 4));
}

}  // namespace

int64_t export_cache(RecordStream& stream, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open cache for writing: " + path);
  out.write(kCacheMagic, 4);
  put_u32(out, kCacheVersion);
  put_u32(out, 0);
  int64_t count = 0;
  while (auto rec = stream.next()) {
    const auto& r = *rec;
    out.write(reinterpret_cast<const char*>(&r.sample_id), 8);
    for (int d = 0; d < 3; ++d) put_u32(out, r.image.size(d));
    put_floats(out, r.image);
    put_u32(out, static_cast<int64_t>(r.teacher_features.size()));
    for (const auto& lvl : r.teacher_features) {
      put_u32(out, lvl.level);
      for (int d = 1; d < 4; ++d) put_u32(out, lvl.tensor.size(d));
      put_floats(out, lvl.tensor);
    }
    const uint8_t flags = (r.soft_logits ? kCacheHasSoftLogits : 0) | (r.label ? kCacheHasLabel : 0);
    out.write(reinterpret_cast<const char*>(&flags), 1);
    if (r.soft_logits) {
      for (int d = 0; d < 3; ++d) put_u32(out, r.soft_logits->size(d));
      put_floats(out, *r.soft_logits);
    }
    if (r.label) {
      put_u32(out, r.label->size(0));
      put_u32(out, r.label->size(1));
      const auto l = r.label->to(torch::kInt).contiguous();
      out.write(reinterpret_cast<const char*>(l.data_ptr<int32_t>()), static_cast<std::streamsize>(l.numel() * 4));
    }
    ++count;
  }
  out.seekp(8);
  put_u32(out, count);
  out.close();
  if (!out) throw FormatError("failed writing cache: " + path);
  return count;
}

CacheStream::CacheStream(const std::string& path) : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw FormatError("cannot open cache: " + path);
  char magic[4];
  read_bytes(magic, 4, "magic");
  if (std::memcmp(magic, kCacheMagic, 4) != 0) throw FormatError("bad cache magic at offset 0 in " + path);
  const uint32_t version = read_u32("version");
  if (version != kCacheVersion) {
    throw FormatError("unsupported cache version " + std::to_string(version) + " at offset 4 in " + path);
  }
  count_ = read_u32("record count");
}

void CacheStream::read_bytes(void* dst, size_t n, const char* what) {
  in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (in_.gcount() != static_cast<std::streamsize>(n)) {
    throw FormatError("truncated cache " + path_ + ": " + what + " at offset " + std::to_string(offset_));
  }
  offset_ += static_cast<int64_t>(n);
}

uint32_t CacheStream::read_u32(const char* what) {
  uint32_t v = 0;
  read_bytes(&v, 4, what);
  return v;
}

std::optional<FeatureRecord> CacheStream::next() {
  if (read_ >= count_) return std::nullopt;
  FeatureRecord r;
  read_bytes(&r.sample_id, 8, "sample id");
  std::vector<int64_t> dims(3);
  for (auto& d : dims) d = read_u32("image dims");
  r.image = torch::empty(dims, torch::kFloat);
  read_bytes(r.image.data_ptr<float>(), r.image.numel() * 4, "image payload");
  const uint32_t levels = read_u32("level count");
  std::vector<PyramidLevel> parts;
  for (uint32_t k = 0; k < levels; ++k) {
    const int level = static_cast<int>(read_u32("level index"));
    std::vector<int64_t> shape{1, 0, 0, 0};
    for (int d = 1; d < 4; ++d) shape[d] = read_u32("level dims");
    auto t = torch::empty(shape, torch::kFloat);
    read_bytes(t.data_ptr<float>(), t.numel() * 4, "level payload");
    parts.push_back({level, t});
  }
  const int64_t level_offset = offset_;
  try {
    r.teacher_features = FeaturePyramid(std::move(parts), Resolution{dims[1], dims[2]});
  } catch (const ShapeError& e) {
    throw FormatError("inconsistent pyramid before offset " + std::to_string(level_offset) + ": " + e.what());
  }
  uint8_t flags = 0;
  read_bytes(&flags, 1, "flags");
  if (flags & ~(kCacheHasSoftLogits | kCacheHasLabel)) {
    throw FormatError("unknown cache flags at offset " + std::to_string(offset_ - 1));
  }
  if (flags & kCacheHasSoftLogits) {
    std::vector<int64_t> s(3);
    for (auto& d : s) d = read_u32("soft logit dims");
    auto t = torch::empty(s, torch::kFloat);
    read_bytes(t.data_ptr<float>(), t.numel() * 4, "soft logit payload");
    r.soft_logits = t;
  }
  if (flags & kCacheHasLabel) {
    const int64_t h = read_u32("label dims"), w = read_u32("label dims");
    auto t = torch::empty({h, w}, torch::kInt);
    read_bytes(t.data_ptr<int32_t>(), t.numel() * 4, "label payload");
    r.label = t.to(torch::kLong);
  }
  ++read_;
  return r;
}

CacheHeader read_cache_header(const std::string& path) {
  CacheStream s(path);
  return {kCacheVersion, static_cast<uint32_t>(s.size())};
}

std::unique_ptr<CacheStream> load_cache(const std::string& path) { return std::make_unique<CacheStream>(path); }

}  // namespace gendistill
