#pragma once

#include <torch/torch.h>

#include <map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gendistill/losses.hpp"
#include "gendistill/pyramid.hpp"
#include "gendistill/teacher.hpp"

namespace gendistill {

struct InterpreterConfig {
  int64_t fuse_channels = 256;
  int64_t num_classes = 5;
  int64_t groups = 32;
  double dropout_rate = 0.1;
  /// Teacher feature channels per level (inputs to the fusion layers).
  std::map<int, int64_t> teacher_channels;
  uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const InterpreterConfig& c);
void from_json(const nlohmann::json& j, InterpreterConfig& c);

/// Depthwise 3x3 -> GroupNorm -> swish -> pointwise 1x1 -> GroupNorm -> swish.
class SeparableFuseBlockImpl : public torch::nn::Module {
 public:
  SeparableFuseBlockImpl(int64_t in_channels, int64_t out_channels, int64_t groups);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d depthwise_{nullptr}, pointwise_{nullptr};
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
};
TORCH_MODULE(SeparableFuseBlock);

/// Feature fusion head over teacher features. Starting from level 5, each
/// fusion layer maps the running features through a 1x1 conv, upsamples
/// bilinearly x2, concatenates the next finer level and applies a separable
/// fuse block. Logits come out at stride 4.
class InterpreterImpl : public torch::nn::Module {
 public:
  explicit InterpreterImpl(const InterpreterConfig& config);

  torch::Tensor forward(const FeaturePyramid& teacher_features);
  const InterpreterConfig& config() const { return config_; }

 private:
  InterpreterConfig config_;
  std::vector<torch::nn::Conv2d> reduce_;
  std::vector<SeparableFuseBlock> fuse_;
  torch::nn::Dropout dropout_{nullptr};
  torch::nn::Conv2d classifier_{nullptr};
};
TORCH_MODULE(Interpreter);

Interpreter build_interpreter(const InterpreterConfig& config);

struct InterpreterTrainOptions {
  int64_t epochs = 100;
  int64_t batch_size = 8;
  double lr = 4e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  int64_t warmup_epochs = 20;
  bool horizontal_flip = true;
  EncodeMode encode{EncodeVariant::kStochastic, kLabelEfficientEncodeSteps, 0};
  uint64_t seed = 0;
};

struct InterpreterTrainResult {
  Interpreter interpreter{nullptr};
  std::vector<double> train_loss;
  /// Training-set mIoU (percent) before training and after each epoch.
  std::vector<double> train_miou;
};

/// Trains the interpreter on teacher features of labeled images. The teacher
/// is only read. Throws ConfigError on an empty labeled set.
InterpreterTrainResult train_interpreter(const DiffusionTeacher& teacher, const torch::Tensor& images,
                                         const torch::Tensor& masks, const InterpreterConfig& config,
                                         const DistillConfig& losses, const InterpreterTrainOptions& options);

/// Eval-mode logits [B,K,H/4,W/4]; no gradients.
torch::Tensor emit_soft_labels(Interpreter& interpreter, const FeaturePyramid& teacher_features);

/// Training-set mIoU (percent) of the interpreter against full-resolution masks.
double interpreter_miou(const DiffusionTeacher& teacher, Interpreter& interpreter, const torch::Tensor& images,
                        const torch::Tensor& masks, const EncodeMode& mode);

/// Upsamples stride-4 logits to the label resolution.
torch::Tensor upsample_logits(const torch::Tensor& logits, int64_t height, int64_t width);

}  // namespace gendistill
