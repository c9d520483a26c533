#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>

#include "gendistill/pyramid.hpp"

namespace gendistill {

/// Light FPN decoder for finetuning: 1x1 laterals per level, nearest
/// top-down sums, one 3x3 conv-BN-ReLU on level 2 and a 1x1 classifier.
/// Emits stride-4 logits.
class SegmentationHeadImpl : public torch::nn::Module {
 public:
  SegmentationHeadImpl(const std::array<int64_t, 4>& in_channels, int64_t channels, int64_t num_classes);

  torch::Tensor forward(const FeaturePyramid& features);
  int64_t num_classes() const { return num_classes_; }

 private:
  int64_t num_classes_;
  std::array<torch::nn::Conv2d, 4> laterals_{torch::nn::Conv2d{nullptr}, torch::nn::Conv2d{nullptr},
                                             torch::nn::Conv2d{nullptr}, torch::nn::Conv2d{nullptr}};
  torch::nn::Conv2d smooth_{nullptr};
  torch::nn::BatchNorm2d bn_{nullptr};
  torch::nn::Conv2d classifier_{nullptr};
};
TORCH_MODULE(SegmentationHead);

}  // namespace gendistill
