#include "gendistill/pyramid.hpp"

#include <algorithm>
#include <sstream>

#include "gendistill/errors.hpp"

namespace gendistill {

namespace {

int64_t ceil_div(int64_t value, int64_t divisor) { return (value + divisor - 1) / divisor; }

}  // namespace

FeaturePyramid::FeaturePyramid(std::vector<PyramidLevel> levels, Resolution input_resolution)
    : levels_(std::move(levels)), input_resolution_(input_resolution) {
  validate();
}

Resolution FeaturePyramid::level_resolution(Resolution input, int level) {
  const int64_t stride = int64_t{1} << level;
  return {ceil_div(input.height, stride), ceil_div(input.width, stride)};
}

void FeaturePyramid::validate() const {
  if (levels_.empty()) return;
  const int64_t batch = levels_.front().tensor.size(0);
  for (size_t i = 0; i < levels_.size(); ++i) {
    const auto& lvl = levels_[i];
    std::ostringstream where;
    where << "pyramid level " << lvl.level;
    if (lvl.level < kMinLevel || lvl.level > kMaxLevel) {
      throw ShapeError(where.str() + " outside {2,3,4,5}");
    }
    if (i > 0 && lvl.level != levels_[i - 1].level + 1) {
      throw ShapeError(where.str() + ": levels must be contiguous and ascending");
    }
    if (!lvl.tensor.defined() || lvl.tensor.dim() != 4) {
      throw ShapeError(where.str() + ": expected a 4-D [B,C,H,W] tensor");
    }
    if (lvl.tensor.size(0) != batch) {
      throw ShapeError(where.str() + ": batch dimension differs from level " +
                       std::to_string(levels_.front().level));
    }
    const Resolution expect = level_resolution(input_resolution_, lvl.level);
    if (lvl.tensor.size(2) != expect.height || lvl.tensor.size(3) != expect.width) {
      where << ": spatial " << lvl.tensor.size(2) << "x" << lvl.tensor.size(3) << ", expected "
            << expect.height << "x" << expect.width;
      throw ShapeError(where.str());
    }
  }
}

int64_t FeaturePyramid::batch_size() const {
  return levels_.empty() ? 0 : levels_.front().tensor.size(0);
}

bool FeaturePyramid::has_level(int level) const {
  return std::any_of(levels_.begin(), levels_.end(),
                     [level](const PyramidLevel& l) { return l.level == level; });
}

const torch::Tensor& FeaturePyramid::at(int level) const {
  for (const auto& l : levels_) {
    if (l.level == level) return l.tensor;
  }
  throw ShapeError("pyramid has no level " + std::to_string(level));
}

std::vector<int> FeaturePyramid::level_indices() const {
  std::vector<int> out;
  out.reserve(levels_.size());
  for (const auto& l : levels_) out.push_back(l.level);
  return out;
}

FeaturePyramid FeaturePyramid::map(
    const std::function<torch::Tensor(const torch::Tensor&)>& fn) const {
  std::vector<PyramidLevel> out;
  out.reserve(levels_.size());
  for (const auto& l : levels_) out.push_back({l.level, fn(l.tensor)});
  return FeaturePyramid(std::move(out), input_resolution_);
}

FeaturePyramid FeaturePyramid::slice_batch(int64_t start, int64_t length) const {
  return map([&](const torch::Tensor& t) { return t.narrow(0, start, length); });
}

FeaturePyramid FeaturePyramid::detach() const {
  return map([](const torch::Tensor& t) { return t.detach(); });
}

FeaturePyramid FeaturePyramid::flip_horizontal() const {
  return map([](const torch::Tensor& t) { return t.flip({3}); });
}

FeaturePyramid FeaturePyramid::concat_batch(const std::vector<FeaturePyramid>& parts) {
  if (parts.empty()) return {};
  const auto& first = parts.front();
  std::vector<PyramidLevel> out;
  for (size_t i = 0; i < first.levels_.size(); ++i) {
    std::vector<torch::Tensor> tensors;
    tensors.reserve(parts.size());
    for (const auto& p : parts) {
      if (!same_structure(p, first)) throw ShapeError("concat_batch: pyramid structures differ");
      tensors.push_back(p.levels_[i].tensor);
    }
    out.push_back({first.levels_[i].level, torch::cat(tensors, 0)});
  }
  return FeaturePyramid(std::move(out), first.input_resolution_);
}

bool same_structure(const FeaturePyramid& a, const FeaturePyramid& b) {
  if (a.size() != b.size() || !(a.input_resolution() == b.input_resolution())) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    const auto& la = a.levels()[i];
    const auto& lb = b.levels()[i];
    if (la.level != lb.level) return false;
    if (la.tensor.sizes().slice(1) != lb.tensor.sizes().slice(1)) return false;
  }
  return true;
}

double max_abs_diff(const FeaturePyramid& a, const FeaturePyramid& b) {
  if (!same_structure(a, b) || a.batch_size() != b.batch_size()) {
    throw ShapeError("max_abs_diff: pyramid structures differ");
  }
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const auto diff = (a.levels()[i].tensor.to(torch::kDouble) - b.levels()[i].tensor.to(torch::kDouble))
                          .abs()
                          .max()
                          .item<double>();
    worst = std::max(worst, diff);
  }
  return worst;
}

}  // namespace gendistill
