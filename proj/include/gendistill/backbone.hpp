#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>

#include <nlohmann/json.hpp>

#include "gendistill/pyramid.hpp"

namespace gendistill {

/// Shape of the student CNN: a stride-4 stem followed by four residual stages
/// emitting levels 2..5.
struct BackboneConfig {
  int64_t stem_channels = 16;
  std::array<int64_t, 4> stage_channels{32, 64, 128, 256};
  std::array<int64_t, 4> blocks_per_stage{1, 1, 1, 1};
  uint64_t seed = 0;

  /// Throws ConfigError on non-positive channel or block counts.
  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
  torch::nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(BasicBlock);

class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const BackboneConfig& config);

  /// Images [B,3,H,W] with H, W divisible by 32 -> pyramid with levels 2..5.
  FeaturePyramid forward_features(const torch::Tensor& images);

  const BackboneConfig& config() const { return config_; }

 private:
  BackboneConfig config_;
  torch::nn::Sequential stem_{nullptr};
  std::array<torch::nn::Sequential, 4> stages_;
};
TORCH_MODULE(Backbone);

/// Validates the config and returns a freshly initialized backbone whose
/// parameters depend only on config.seed.
Backbone build_backbone(const BackboneConfig& config);

/// Throws ShapeError unless images is [B,3,H,W] with H, W divisible by 32.
void check_image_batch(const torch::Tensor& images);

}  // namespace gendistill
