#pragma once

#include <torch/torch.h>

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gendistill/backbone.hpp"
#include "gendistill/dataset.hpp"
#include "gendistill/interpreter.hpp"
#include "gendistill/losses.hpp"
#include "gendistill/metrics.hpp"
#include "gendistill/regressor.hpp"
#include "gendistill/teacher.hpp"

namespace gendistill {

/// Linear scaling of the 4e-3 @ 256 base rate.
double scaled_base_lr(int64_t batch_size);

/// Pretraining optimizer and schedule: AdamW, linear warmup, cosine decay.
struct RunConfig {
  int64_t epochs = 20;
  int64_t batch_size = 32;
  double base_lr = 4e-3 * 32.0 / 256.0;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  int64_t warmup_epochs = 2;
  uint64_t seed = 0;

  /// Throws ConfigError unless batch_size >= 1 and 0 <= warmup_epochs < epochs.
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

struct FinetuneOptions {
  int64_t epochs = 30;
  int64_t batch_size = 16;
  double lr = 2e-3;
  double weight_decay = 1e-4;
  int64_t warmup_epochs = 2;
  /// Frozen-backbone readout instead of full finetuning.
  bool freeze = false;
  bool horizontal_flip = true;
  int64_t head_channels = 64;
  uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const FinetuneOptions& c);
void from_json(const nlohmann::json& j, FinetuneOptions& c);

enum class LossVariant { kFeat, kLabel, kMix };

std::string to_string(LossVariant v);
LossVariant parse_loss_variant(const std::string& s);

/// Yields the dataset stream for a (0-based) epoch.
using EpochStreamFactory = std::function<std::unique_ptr<RecordStream>(int64_t epoch)>;

struct PretrainResult {
  Backbone backbone{nullptr};
  Regressor regressor{nullptr};
  /// 1x1 conv on regressed level 2 producing student logits; label/mix only.
  torch::nn::Conv2d logit_head{nullptr};
  MetricsReport report;
};

/// Minimizes mse + lambda_at * at. Labels in the records are ignored. Throws
/// DivergenceError naming the level when the loss stops being finite.
PretrainResult pretrain_feature_distill(Backbone backbone, Regressor regressor, const EpochStreamFactory& data,
                                        const DistillConfig& distill, const RunConfig& run);

/// Minimizes feat + lambda_ld * ld against the records' soft logits (label
/// variant: lambda_ld * ld alone). Throws ConfigError when a record lacks
/// soft logits or their class count differs from the interpreter's.
PretrainResult pretrain_mix_distill(Backbone backbone, Regressor regressor, const Interpreter& interpreter,
                                    const EpochStreamFactory& data, const DistillConfig& distill, const RunConfig& run,
                                    LossVariant variant = LossVariant::kMix);

/// Backbone and regressor (plus configs) in one archive under "backbone/"
/// and "regressor/".
void save_pretrain_checkpoint(const std::string& path, const PretrainResult& result);
Backbone load_backbone(const std::string& path);

struct SegmentationSplit {
  torch::Tensor train_images;
  torch::Tensor train_masks;
  torch::Tensor test_images;
  torch::Tensor test_masks;
};

/// Trains a light FPN head on top of `backbone` (which is modified unless
/// frozen) and reports held-out mIoU and pixel accuracy. Throws ConfigError
/// when a mask holds a class id >= num_classes.
MetricsReport finetune_segmentation(Backbone backbone, const SegmentationSplit& data, int64_t num_classes,
                                    const FinetuneOptions& options);

/// Everything a pretrain + finetune cycle reads.
struct PipelineInputs {
  DiffusionTeacher teacher;
  torch::Tensor unlabeled;
  SegmentationSplit segmentation;
  /// Soft-label source; required by the label and mix variants.
  std::shared_ptr<Interpreter> interpreter;
};

struct PipelineSettings {
  BackboneConfig backbone;
  RegressorConfig regressor;
  DistillConfig distill;
  DatasetSpec dataset;
  RunConfig run;
  FinetuneOptions finetune;
  LossVariant loss = LossVariant::kFeat;
  int64_t num_classes = 5;
  /// Directory for offline caches.
  std::string work_dir = ".";
};

/// Per-epoch streams for the settings: shuffled encoded or synthesized
/// records, replayed from a cache file in offline mode.
EpochStreamFactory make_stream_factory(const PipelineInputs& inputs, const PipelineSettings& settings);

struct CycleResult {
  PretrainResult pretrain;
  MetricsReport finetune;
};

CycleResult run_pretrain_finetune_cycle(const PipelineInputs& inputs, const PipelineSettings& settings);

/// Epoch-to-epoch behaviour of an encode mode over a set of images.
struct ModeProbe {
  std::string variant;
  /// Largest per-sample max-abs feature change between two epochs.
  double max_drift = 0.0;
  /// Share of samples whose features changed by more than 1e-6.
  double fraction_changed = 0.0;
};

ModeProbe probe_encode_mode(const DiffusionTeacher& teacher, const torch::Tensor& images, const EncodeMode& mode);

enum class SweepAxis { kEncodeMode, kTEncode, kLossVariant };

std::string to_string(SweepAxis a);
SweepAxis parse_sweep_axis(const std::string& s);

struct SweepRow {
  std::string value;
  MetricsReport pretrain;
  MetricsReport finetune;
  std::optional<ModeProbe> probe;
};

/// One pretrain + finetune cycle per value with shared seeds. Encode-mode
/// rows embed a probe and throw std::runtime_error when a deterministic mode
/// drifts or a stochastic one does not vary.
std::vector<SweepRow> run_ablation_sweep(SweepAxis axis, const std::vector<std::string>& values,
                                         const PipelineInputs& inputs, const PipelineSettings& base);

std::string sweep_table_markdown(SweepAxis axis, const std::vector<SweepRow>& rows);

}  // namespace gendistill
