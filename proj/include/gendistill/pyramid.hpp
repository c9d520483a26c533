#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

namespace gendistill {

/// Spatial size (height, width) in pixels.
struct Resolution {
  int64_t height = 0;
  int64_t width = 0;
  bool operator==(const Resolution&) const = default;
};

struct PyramidLevel {
  int level = 0;          // features at stride 2^level
  torch::Tensor tensor;   // [batch, channels, height, width]
};

/// Ordered multi-level feature maps. Level l has spatial size
/// ceil(H / 2^l) x ceil(W / 2^l); levels are a contiguous ascending subset
/// of {2, 3, 4, 5} and share the batch dimension.
class FeaturePyramid {
 public:
  static constexpr int kMinLevel = 2;
  static constexpr int kMaxLevel = 5;

  FeaturePyramid() = default;
  FeaturePyramid(std::vector<PyramidLevel> levels, Resolution input_resolution);

  const std::vector<PyramidLevel>& levels() const { return levels_; }
  Resolution input_resolution() const { return input_resolution_; }
  size_t size() const { return levels_.size(); }
  bool empty() const { return levels_.empty(); }
  int64_t batch_size() const;

  bool has_level(int level) const;
  const torch::Tensor& at(int level) const;
  std::vector<int> level_indices() const;

  auto begin() const { return levels_.begin(); }
  auto end() const { return levels_.end(); }

  /// Applies fn to every level tensor, keeping level indices and resolution.
  FeaturePyramid map(const std::function<torch::Tensor(const torch::Tensor&)>& fn) const;

  /// Selects batch rows [start, start + length).
  FeaturePyramid slice_batch(int64_t start, int64_t length) const;
  FeaturePyramid detach() const;
  FeaturePyramid flip_horizontal() const;

  static FeaturePyramid concat_batch(const std::vector<FeaturePyramid>& parts);

  /// Spatial size a level must have for the given input resolution.
  static Resolution level_resolution(Resolution input, int level);

 private:
  void validate() const;

  std::vector<PyramidLevel> levels_;
  Resolution input_resolution_;
};

/// Max absolute elementwise difference over all levels; throws ShapeError on
/// structural mismatch.
double max_abs_diff(const FeaturePyramid& a, const FeaturePyramid& b);

bool same_structure(const FeaturePyramid& a, const FeaturePyramid& b);

}  // namespace gendistill
