#include "gendistill/dataset.hpp"

#include <cstdlib>
#include <numeric>

#include "gendistill/errors.hpp"
#include "gendistill/rng.hpp"

namespace gendistill {

std::string to_string(DatasetMode m) { return m == DatasetMode::kEncoded ? "encoded" : "synthesized"; }
std::string to_string(CacheMode m) { return m == CacheMode::kOnline ? "online" : "offline"; }
std::string to_string(Augmentation a) { return a == Augmentation::kNone ? "none" : "horizontal_flip"; }

DatasetMode parse_dataset_mode(const std::string& s) {
  if (s == "encoded") return DatasetMode::kEncoded;
  if (s == "synthesized") return DatasetMode::kSynthesized;
  throw ConfigError("unknown dataset mode '" + s + "' (expected encoded|synthesized)");
}

CacheMode parse_cache_mode(const std::string& s) {
  if (s == "online") return CacheMode::kOnline;
  if (s == "offline") return CacheMode::kOffline;
  throw ConfigError("unknown cache mode '" + s + "' (expected online|offline)");
}

Augmentation parse_augmentation(const std::string& s) {
  if (s == "none") return Augmentation::kNone;
  if (s == "horizontal_flip") return Augmentation::kHorizontalFlip;
  throw ConfigError("unknown augmentation '" + s + "' (expected none|horizontal_flip)");
}

void DatasetSpec::validate() const {
  if (prefetch_depth < 1) throw ConfigError("dataset.prefetch_depth must be >= 1");
  if (chunk_size < 1) throw ConfigError("dataset.chunk_size must be >= 1");
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"mode", to_string(s.mode)},
                     {"cache", to_string(s.cache)},
                     {"encode_variant", to_string(s.encode.variant)},
                     {"t_encode", s.encode.t_encode},
                     {"encode_seed", s.encode.seed},
                     {"augmentation", to_string(s.augmentation)},
                     {"prefetch_depth", s.prefetch_depth},
                     {"chunk_size", s.chunk_size}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  s.mode = parse_dataset_mode(j.at("mode").get<std::string>());
  s.cache = parse_cache_mode(j.at("cache").get<std::string>());
  s.encode.variant = parse_encode_variant(j.at("encode_variant").get<std::string>());
  j.at("t_encode").get_to(s.encode.t_encode);
  j.at("encode_seed").get_to(s.encode.seed);
  s.augmentation = parse_augmentation(j.at("augmentation").get<std::string>());
  j.at("prefetch_depth").get_to(s.prefetch_depth);
  j.at("chunk_size").get_to(s.chunk_size);
}

int64_t data_workers_from_env() {
  const char* raw = std::getenv("DT_NUM_WORKERS");
  if (raw == nullptr || *raw == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(raw, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("DT_NUM_WORKERS must be a positive integer");
  return v;
}

PrefetchStream::PrefetchStream(int64_t total, int64_t chunk_size, int64_t depth, int64_t workers, Producer producer)
    : total_(total), chunk_size_(std::min(chunk_size, depth)), depth_(depth), producer_(std::move(producer)) {
  if (total < 0 || chunk_size < 1 || depth < 1 || workers < 1) throw ConfigError("invalid prefetch parameters");
  const int64_t chunks = (total_ + chunk_size_ - 1) / chunk_size_;
  const int64_t n = std::min(workers, std::max<int64_t>(chunks, 1));
  for (int64_t i = 0; i < n; ++i) threads_.emplace_back([this] { work(); });
}

PrefetchStream::~PrefetchStream() {
  {
    std::lock_guard lock(mutex_);
    stop_ = true;
  }
  changed_.notify_all();
  for (auto& t : threads_) t.join();
}

void PrefetchStream::work() {
  torch::NoGradGuard no_grad;
  while (true) {
    int64_t first = 0, count = 0;
    {
      std::lock_guard lock(mutex_);
      if (stop_ || error_) return;
      first = next_chunk_ * chunk_size_;
      if (first >= total_) return;
      count = std::min(chunk_size_, total_ - first);
      ++next_chunk_;
    }
    std::vector<FeatureRecord> records;
    try {
      records = producer_(first, count);
      if (static_cast<int64_t>(records.size()) != count) throw std::logic_error("producer returned wrong count");
    } catch (...) {
      std::lock_guard lock(mutex_);
      if (!error_) error_ = std::current_exception();
      changed_.notify_all();
      return;
    }
    std::unique_lock lock(mutex_);
    changed_.wait(lock, [&] { return stop_ || first + count <= consumed_ + depth_; });
    if (stop_) return;
    for (int64_t k = 0; k < count; ++k) buffer_.emplace(first + k, std::move(records[k]));
    max_buffered_ = std::max<int64_t>(max_buffered_, static_cast<int64_t>(buffer_.size()));
    changed_.notify_all();
  }
}

std::optional<FeatureRecord> PrefetchStream::next() {
  std::unique_lock lock(mutex_);
  if (consumed_ >= total_) return std::nullopt;
  changed_.wait(lock, [&] { return error_ || buffer_.count(consumed_) > 0; });
  if (error_) std::rethrow_exception(error_);
  auto node = buffer_.extract(consumed_);
  ++consumed_;
  changed_.notify_all();
  return std::move(node.mapped());
}

int64_t PrefetchStream::max_buffered() const {
  std::lock_guard lock(mutex_);
  return max_buffered_;
}

namespace {

void attach_soft_labels(std::vector<FeatureRecord>& records, const FeaturePyramid& features,
                        const std::shared_ptr<Interpreter>& interpreter) {
  if (!interpreter) return;
  auto logits = emit_soft_labels(*interpreter, features);
  for (size_t k = 0; k < records.size(); ++k) records[k].soft_logits = logits[static_cast<int64_t>(k)].clone();
}

std::vector<FeatureRecord> split_records(const std::vector<int64_t>& ids, const torch::Tensor& images,
                                         const FeaturePyramid& features) {
  std::vector<FeatureRecord> records(ids.size());
  for (size_t k = 0; k < ids.size(); ++k) {
    const auto row = static_cast<int64_t>(k);
    records[k].sample_id = ids[k];
    records[k].image = images[row].contiguous().clone();
    records[k].teacher_features = features.slice_batch(row, 1).map([](const torch::Tensor& t) {
      return t.contiguous().clone();
    });
  }
  return records;
}

}  // namespace

std::unique_ptr<PrefetchStream> iterate_encoded(const DiffusionTeacher& teacher, const torch::Tensor& images,
                                                const DatasetSpec& spec, int64_t epoch, const torch::Tensor& masks,
                                                std::shared_ptr<Interpreter> interpreter, std::vector<int64_t> order,
                                                int64_t workers) {
  spec.validate();
  if (spec.mode != DatasetMode::kEncoded) throw ConfigError("iterate_encoded requires dataset.mode = encoded");
  spec.encode.validate(teacher.schedule().steps());
  if (images.dim() != 4 || images.size(1) != 3) throw ShapeError("iterate_encoded: images must be [N,3,H,W]");
  if (images.size(2) % 32 != 0 || images.size(3) % 32 != 0) {
    throw ShapeError("iterate_encoded: image size must be divisible by 32");
  }
  if (masks.defined() && (masks.dim() != 3 || masks.size(0) != images.size(0))) {
    throw ShapeError("iterate_encoded: masks must be [N,H,W]");
  }
  if (order.empty()) {
    order.resize(static_cast<size_t>(images.size(0)));
    std::iota(order.begin(), order.end(), 0);
  }
  for (int64_t id : order) {
    if (id < 0 || id >= images.size(0)) throw std::out_of_range("iterate_encoded: sample id out of range");
  }
  if (interpreter) (*interpreter)->eval();
  const auto total = static_cast<int64_t>(order.size());
  auto producer = [teacher, images, masks, spec, epoch, interpreter, order](int64_t first, int64_t count) {
    std::vector<int64_t> ids(order.begin() + first, order.begin() + first + count);
    const auto index = torch::tensor(ids, torch::kLong);
    auto x = images.index_select(0, index).contiguous();
    torch::Tensor y = masks.defined() ? masks.index_select(0, index).to(torch::kLong).contiguous() : torch::Tensor();
    if (spec.augmentation == Augmentation::kHorizontalFlip) {
      for (int64_t k = 0; k < count; ++k) {
        if (!flip_coin(spec.encode.seed, ids[k], epoch)) continue;
        x[k] = x[k].flip({2});
        if (y.defined()) y[k] = y[k].flip({1});
      }
    }
    auto features = encode_features(teacher, x, spec.encode, ids, epoch);
    auto records = split_records(ids, x, features);
    if (y.defined()) {
      for (int64_t k = 0; k < count; ++k) records[k].label = y[k].clone();
    }
    attach_soft_labels(records, features, interpreter);
    return records;
  };
  return std::make_unique<PrefetchStream>(total, spec.chunk_size, spec.prefetch_depth, workers,
                                          std::move(producer));
}

std::unique_ptr<PrefetchStream> iterate_synthesized(std::shared_ptr<GenerativeSampler> sampler, int64_t n,
                                                    const DatasetSpec& spec, uint64_t seed,
                                                    std::shared_ptr<Interpreter> interpreter, int64_t workers) {
  spec.validate();
  if (spec.mode != DatasetMode::kSynthesized) throw ConfigError("iterate_synthesized requires dataset.mode = synthesized");
  if (n <= 0) throw ConfigError("iterate_synthesized: n must be > 0");
  if (!sampler) throw ConfigError("iterate_synthesized: no sampler");
  if (interpreter) (*interpreter)->eval();
  auto lock = std::make_shared<std::mutex>();
  auto producer = [sampler, spec, seed, interpreter, lock](int64_t first, int64_t count) {
    const auto shape = sampler->latent_shape();
    std::vector<torch::Tensor> latents;
    std::vector<int64_t> ids(count);
    for (int64_t k = 0; k < count; ++k) {
      ids[k] = first + k;
      auto gen = make_generator({seed, 0x6c6174ULL, static_cast<uint64_t>(ids[k])});
      latents.push_back(torch::randn(shape, gen));
    }
    std::pair<torch::Tensor, FeaturePyramid> sampled;
    {
      std::lock_guard guard(*lock);
      sampled = sampler->sample_with_features(torch::stack(latents));
    }
    auto records = split_records(ids, sampled.first, sampled.second);
    if (spec.augmentation == Augmentation::kHorizontalFlip) {
      for (auto& r : records) {
        if (!flip_coin(seed, r.sample_id, 0)) continue;
        r.image = r.image.flip({2}).contiguous();
        r.teacher_features = r.teacher_features.flip_horizontal().map([](const torch::Tensor& t) {
          return t.contiguous();
        });
      }
    }
    if (interpreter) {
      std::vector<FeaturePyramid> parts;
      for (const auto& r : records) parts.push_back(r.teacher_features);
      attach_soft_labels(records, FeaturePyramid::concat_batch(parts), interpreter);
    }
    return records;
  };
  return std::make_unique<PrefetchStream>(n, spec.chunk_size, spec.prefetch_depth, workers, std::move(producer));
}

FeatureBatch collate(const std::vector<FeatureRecord>& records, bool keep_labels) {
  if (records.empty()) throw ConfigError("collate: empty batch");
  FeatureBatch batch;
  std::vector<torch::Tensor> images, soft, labels;
  std::vector<FeaturePyramid> features;
  bool all_soft = true, all_labels = true;
  for (const auto& r : records) {
    batch.sample_ids.push_back(r.sample_id);
    images.push_back(r.image);
    features.push_back(r.teacher_features);
    all_soft = all_soft && r.soft_logits.has_value();
    all_labels = all_labels && r.label.has_value();
    if (r.soft_logits) soft.push_back(*r.soft_logits);
    if (r.label) labels.push_back(*r.label);
  }
  batch.images = torch::stack(images);
  batch.features = FeaturePyramid::concat_batch(features);
  if (all_soft) batch.soft_logits = torch::stack(soft);
  if (all_labels && keep_labels) batch.labels = torch::stack(labels);
  return batch;
}

std::vector<FeatureRecord> materialize(RecordStream& stream) {
  std::vector<FeatureRecord> out;
  out.reserve(static_cast<size_t>(stream.size()));
  while (auto r = stream.next()) out.push_back(std::move(*r));
  return out;
}

}  // namespace gendistill
