#include "gendistill/segmentation.hpp"

#include "gendistill/errors.hpp"

namespace gendistill {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

SegmentationHeadImpl::SegmentationHeadImpl(const std::array<int64_t, 4>& in_channels, int64_t channels,
                                           int64_t num_classes)
    : num_classes_(num_classes) {
  if (channels <= 0 || num_classes < 2) throw ConfigError("segmentation head: invalid channel or class count");
  for (int i = 0; i < 4; ++i) {
    laterals_[i] = register_module("lateral" + std::to_string(i + 2),
                                   nn::Conv2d(nn::Conv2dOptions(in_channels[i], channels, 1)));
  }
  smooth_ = register_module("smooth", nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).padding(1).bias(false)));
  bn_ = register_module("bn", nn::BatchNorm2d(channels));
  classifier_ = register_module("classifier", nn::Conv2d(nn::Conv2dOptions(channels, num_classes, 1)));
}

torch::Tensor SegmentationHeadImpl::forward(const FeaturePyramid& features) {
  if (features.level_indices() != std::vector<int>{2, 3, 4, 5}) {
    throw ShapeError("segmentation head expects levels {2,3,4,5}");
  }
  auto x = laterals_[3]->forward(features.at(5));
  for (int i = 2; i >= 0; --i) {
    const auto& f = features.at(i + 2);
    x = laterals_[i]->forward(f) +
        F::interpolate(x, F::InterpolateFuncOptions()
                              .size(std::vector<int64_t>{f.size(2), f.size(3)})
                              .mode(torch::kNearest));
  }
  return classifier_->forward(torch::relu(bn_->forward(smooth_->forward(x))));
}

}  // namespace gendistill
