#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gendistill/pyramid.hpp"
#include "gendistill/schedule.hpp"
#include "gendistill/unet.hpp"

namespace gendistill {

/// Steps used to encode real images: generic-domain pretraining and the
/// label-efficient (interpreter) regime.
inline constexpr int64_t kGenericEncodeSteps = 150;
inline constexpr int64_t kLabelEfficientEncodeSteps = 50;

struct TeacherConfig {
  UNetConfig unet;
  int64_t diffusion_steps = 1000;
  double beta_min = 1e-4;
  double beta_max = 2e-2;
  /// 1-based decoder blocks whose outputs are tapped as pyramid features.
  std::vector<int64_t> tap_blocks{3, 6, 9, 12};
  /// Reverse-chain length used by the sampler.
  int64_t sampling_steps = 50;
  uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const TeacherConfig& c);
void from_json(const nlohmann::json& j, TeacherConfig& c);

struct TeacherTrainOptions {
  int64_t epochs = 1;
  int64_t batch_size = 32;
  double lr = 1e-4;
  double weight_decay = 0.0;
  uint64_t seed = 0;
  /// Images held out for the denoising-MSE curve (taken from the end).
  double holdout_fraction = 0.1;
};

struct DenoiseResult {
  torch::Tensor epsilon;
  FeaturePyramid features;
};

/// A trained (or trainable) denoising diffusion model with feature taps on
/// its decoder. Copies share the same underlying parameters.
class DiffusionTeacher {
 public:
  explicit DiffusionTeacher(const TeacherConfig& config);

  const TeacherConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  UNet& unet() { return unet_; }
  const UNet& unet() const { return unet_; }

  /// Tap block -> pyramid level.
  const std::map<int64_t, int>& tap_levels() const { return tap_levels_; }
  /// Pyramid level -> feature channels at that tap.
  std::map<int, int64_t> feature_channels() const;

  /// One eval-mode UNet pass at schedule index t; no gradients. Throws
  /// ShapeError unless H and W are divisible by 32.
  DenoiseResult denoise_step_features(const torch::Tensor& x_t, int64_t t) const;

  /// Collects taps from a raw UNet output, ordered by level.
  FeaturePyramid collect_taps(const UNetOutput& out, Resolution input) const;

  void save(torch::serialize::OutputArchive& archive) const;
  static DiffusionTeacher load(torch::serialize::InputArchive& archive);
  void save(const std::string& path) const;
  static DiffusionTeacher load(const std::string& path);

  std::string digest() const;

 private:
  TeacherConfig config_;
  NoiseSchedule schedule_;
  UNet unet_{nullptr};
  std::map<int64_t, int> tap_levels_;
};

struct TeacherTrainResult {
  DiffusionTeacher teacher;
  /// Held-out ε-MSE; entry 0 is measured before training, entry e after epoch e.
  std::vector<double> heldout_mse;
  std::vector<double> train_loss;
};

/// Trains the ε-prediction objective on images in [-1, 1]. epochs == 0
/// returns the initialized teacher. Throws ConfigError on an empty dataset.
TeacherTrainResult train_teacher(const torch::Tensor& images, const TeacherConfig& config,
                                 const TeacherTrainOptions& options);

/// Held-out ε-MSE with fixed (seeded) timesteps and noise.
double evaluate_denoising_mse(const DiffusionTeacher& teacher, const torch::Tensor& images, uint64_t seed);

enum class EncodeVariant { kStochastic, kDeterministic };

std::string to_string(EncodeVariant v);
EncodeVariant parse_encode_variant(const std::string& s);

struct EncodeMode {
  EncodeVariant variant = EncodeVariant::kStochastic;
  /// Forward-diffusion step in [1, T]; maps to schedule index t_encode - 1.
  int64_t t_encode = kGenericEncodeSteps;
  uint64_t seed = 0;

  void validate(int64_t diffusion_steps) const;
};

/// Noise for one sample: stochastic streams are keyed by (seed, sample_id,
/// epoch), deterministic ones by sample_id alone.
torch::Tensor encode_noise(const EncodeMode& mode, at::IntArrayRef sample_shape, int64_t sample_id, int64_t epoch);

/// Forward-diffuses x to t_encode and returns the taps of a single
/// denoising pass.
FeaturePyramid encode_features(const DiffusionTeacher& teacher, const torch::Tensor& images, const EncodeMode& mode,
                               std::span<const int64_t> sample_ids, int64_t epoch);
FeaturePyramid encode_features(const DiffusionTeacher& teacher, const torch::Tensor& images, const EncodeMode& mode);

/// Source of synthesized images with tapped features.
class GenerativeSampler {
 public:
  virtual ~GenerativeSampler() = default;
  /// Per-sample latent shape (without the batch dimension).
  virtual std::vector<int64_t> latent_shape() const = 0;
  /// Maps latents [B, latent_shape...] to (images in [-1,1], features).
  virtual std::pair<torch::Tensor, FeaturePyramid> sample_with_features(const torch::Tensor& z) = 0;
};

/// Deterministic (η = 0) strided reverse chain over the teacher; features
/// come from the final denoising pass at t = 0.
class DiffusionSampler : public GenerativeSampler {
 public:
  DiffusionSampler(DiffusionTeacher teacher, Resolution resolution, int64_t steps);

  std::vector<int64_t> latent_shape() const override;
  std::pair<torch::Tensor, FeaturePyramid> sample_with_features(const torch::Tensor& z) override;

  const DiffusionTeacher& teacher() const { return teacher_; }
  const std::vector<int64_t>& timesteps() const { return timesteps_; }

 private:
  DiffusionTeacher teacher_;
  Resolution resolution_;
  std::vector<int64_t> timesteps_;
};

}  // namespace gendistill
