#pragma once

#include <torch/torch.h>

#include <vector>

#include <nlohmann/json.hpp>

#include "gendistill/pyramid.hpp"

namespace gendistill {

/// Label value skipped by the segmentation losses.
inline constexpr int64_t kIgnoreIndex = 255;

/// Weights and constants for every distillation objective.
struct DistillConfig {
  double lambda_at = 10.0;
  int p = 2;
  double tau = 4.0;
  double lambda_d = 3.0;
  double lambda_ld = 1.0;
  std::vector<int> levels{2, 3, 4, 5};
  /// Whitening variance stabilizer.
  double eps = 1e-5;
  /// Sum squared errors per level instead of averaging over elements.
  bool mse_raw_sum = false;
  /// Multiply the soft-label loss by tau^2 (Hinton-style gradient scaling).
  bool kd_tau_squared = false;

  /// Throws ConfigError on negative weights, tau <= 0, p < 1 or bad levels.
  void validate() const;
};

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);

/// Attention-map normalization guard.
inline constexpr double kAttentionNormEps = 1e-12;
/// Dice denominator guard.
inline constexpr double kDiceEps = 1e-6;

/// Non-learnable whitening: per spatial location, channels shifted to zero
/// mean and scaled to unit variance, (f - mu) / sqrt(var + eps). Output is
/// detached; whitening only ever runs on teacher features.
torch::Tensor whiten(const torch::Tensor& f, double eps);

/// sum_c |f_c|^p -> [B,1,H,W].
torch::Tensor attention_map(const torch::Tensor& f, int p);

/// Per-level regression term: mean (or sum) of (student - target)^2.
/// Gradient flows to `student` only.
torch::Tensor mse_level_loss(const torch::Tensor& student, const torch::Tensor& target, bool raw_sum);

/// Per-level attention-transfer term: batch mean of
/// || Q_s/||Q_s|| - Q_t/||Q_t|| ||_p with Q = vec(attention_map(., p)).
/// Gradient flows to `student` only.
torch::Tensor at_level_loss(const torch::Tensor& student, const torch::Tensor& teacher, int p);

/// (1/L) sum_l || f^r_l - W(f^g_l) ||^2 over config.levels.
torch::Tensor mse_distill_loss(const FeaturePyramid& regressed, const FeaturePyramid& teacher,
                               const DistillConfig& config);

/// (1/L) sum_l at_level_loss(f^r_l, f^g_l).
torch::Tensor at_distill_loss(const FeaturePyramid& regressed, const FeaturePyramid& teacher,
                              const DistillConfig& config);

struct FeatLossTerms {
  torch::Tensor mse;
  torch::Tensor at;
  torch::Tensor total;  // mse + lambda_at * at
};

FeatLossTerms feat_loss(const FeaturePyramid& regressed, const FeaturePyramid& teacher, const DistillConfig& config);
double feat_loss(double mse, double at, const DistillConfig& config);

/// Pixelwise cross-entropy plus lambda_d * soft multiclass Dice loss.
/// logits [B,K,H,W], labels [B,H,W] int64 with values in [0,K-1] or
/// kIgnoreIndex. Dice averages over the classes present in the labels.
torch::Tensor interpreter_loss(const torch::Tensor& logits, const torch::Tensor& labels, const DistillConfig& config);

/// -sum_k softmax(teacher/tau)_k * log_softmax(student/tau)_k averaged over
/// batch and pixels. Gradient flows to `student_logits` only.
torch::Tensor label_distill_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits,
                                 const DistillConfig& config);

torch::Tensor mix_loss(const torch::Tensor& feat, const torch::Tensor& ld, const DistillConfig& config);
double mix_loss(double feat, double ld, const DistillConfig& config);

}  // namespace gendistill
