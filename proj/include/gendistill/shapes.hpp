#pragma once

#include <torch/torch.h>

#include <cstdint>

namespace gendistill {

/// Number of distinct shape forms; class k >= 1 is form k - 1.
inline constexpr int64_t kShapeForms = 6;

struct ShapesDataset {
  torch::Tensor images;  // [N,3,R,R] float32 in [-1, 1]
  torch::Tensor masks;   // [N,R,R] int64 in [0, K-1]
};

/// Toy segmentation data: 1 to 3 shapes per image on a textured background.
/// A shape's class is determined by its form (disk, square, triangle, ring,
/// cross, diamond); colours are drawn independently of class. Throws
/// ConfigError unless n >= 0, 2 <= K <= kShapeForms + 1 and R % 32 == 0.
ShapesDataset generate_shapes_dataset(int64_t n, int64_t num_classes, int64_t resolution, uint64_t seed);

}  // namespace gendistill
