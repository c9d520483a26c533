#pragma once

#include <torch/torch.h>

#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "gendistill/interpreter.hpp"
#include "gendistill/pyramid.hpp"
#include "gendistill/teacher.hpp"

namespace gendistill {

/// One training sample. Tensors carry no batch dimension except the
/// features, which are stored as a batch-1 pyramid.
struct FeatureRecord {
  int64_t sample_id = 0;
  torch::Tensor image;                 // [3,H,W] float32
  FeaturePyramid teacher_features;     // batch 1
  std::optional<torch::Tensor> soft_logits;  // [K,h,w] float32
  std::optional<torch::Tensor> label;        // [H,W] int64
};

enum class DatasetMode { kSynthesized, kEncoded };
enum class CacheMode { kOnline, kOffline };
enum class Augmentation { kNone, kHorizontalFlip };

std::string to_string(DatasetMode m);
std::string to_string(CacheMode m);
std::string to_string(Augmentation a);
DatasetMode parse_dataset_mode(const std::string& s);
CacheMode parse_cache_mode(const std::string& s);
Augmentation parse_augmentation(const std::string& s);

struct DatasetSpec {
  DatasetMode mode = DatasetMode::kEncoded;
  CacheMode cache = CacheMode::kOnline;
  /// Ignored in synthesized mode, which runs the reverse chain instead.
  EncodeMode encode{};
  Augmentation augmentation = Augmentation::kHorizontalFlip;
  /// Most records buffered ahead of the consumer.
  int64_t prefetch_depth = 32;
  /// Images pushed through the teacher per forward pass.
  int64_t chunk_size = 16;

  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

/// Number of data workers from DT_NUM_WORKERS (default 1).
int64_t data_workers_from_env();

class RecordStream {
 public:
  virtual ~RecordStream() = default;
  /// Next record in stream order; std::nullopt when exhausted.
  virtual std::optional<FeatureRecord> next() = 0;
  /// Total records this stream yields.
  virtual int64_t size() const = 0;
};

/// Ordered prefetching over chunked producers. Workers claim chunks in order
/// and insert finished records into a window of at most `depth` records past
/// the consumer, so output order never depends on the worker count.
class PrefetchStream : public RecordStream {
 public:
  using Producer = std::function<std::vector<FeatureRecord>(int64_t first, int64_t count)>;

  PrefetchStream(int64_t total, int64_t chunk_size, int64_t depth, int64_t workers, Producer producer);
  ~PrefetchStream() override;

  std::optional<FeatureRecord> next() override;
  int64_t size() const override { return total_; }
  /// Highest number of records ever buffered at once.
  int64_t max_buffered() const;

 private:
  void work();

  int64_t total_;
  int64_t chunk_size_;
  int64_t depth_;
  Producer producer_;

  mutable std::mutex mutex_;
  std::condition_variable changed_;
  std::map<int64_t, FeatureRecord> buffer_;
  int64_t next_chunk_ = 0;
  int64_t consumed_ = 0;
  int64_t max_buffered_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
  std::vector<std::thread> threads_;
};

/// Encoded feature dataset over real images for one epoch. Flipping (keyed
/// by seed, sample id and epoch) happens before encoding. When `interpreter`
/// is set, records carry its soft labels; when `masks` is defined, labels.
/// `order` lists the sample ids to visit (default: all, ascending).
std::unique_ptr<PrefetchStream> iterate_encoded(const DiffusionTeacher& teacher, const torch::Tensor& images,
                                                const DatasetSpec& spec, int64_t epoch,
                                                const torch::Tensor& masks = {},
                                                std::shared_ptr<Interpreter> interpreter = nullptr,
                                                std::vector<int64_t> order = {},
                                                int64_t workers = data_workers_from_env());

/// n freshly sampled images with their features; latent i is keyed by
/// (seed, i). Flipping applies to image and features together. Sampler calls
/// are serialized. Throws ConfigError when n <= 0.
std::unique_ptr<PrefetchStream> iterate_synthesized(std::shared_ptr<GenerativeSampler> sampler, int64_t n,
                                                    const DatasetSpec& spec, uint64_t seed,
                                                    std::shared_ptr<Interpreter> interpreter = nullptr,
                                                    int64_t workers = data_workers_from_env());

/// Records collated into a batch.
struct FeatureBatch {
  std::vector<int64_t> sample_ids;
  torch::Tensor images;
  FeaturePyramid features;
  torch::Tensor soft_logits;  // undefined unless every record has them
  torch::Tensor labels;       // undefined unless every record has one and keep_labels
};

FeatureBatch collate(const std::vector<FeatureRecord>& records, bool keep_labels);

/// Drains a stream into memory.
std::vector<FeatureRecord> materialize(RecordStream& stream);

}  // namespace gendistill
