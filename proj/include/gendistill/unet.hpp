#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace gendistill {

struct UNetConfig {
  int64_t base_channels = 64;
  std::vector<int64_t> channel_mult{1, 1, 2, 2};
  int64_t num_res_blocks = 2;
  /// Pyramid levels (stride 2^l) that carry self-attention.
  std::vector<int> attention_levels{4, 5};
  int64_t head_channels = 64;
  double dropout = 0.0;
  /// Space-to-depth factor of the input stem; the first UNet resolution sits
  /// at stride `patch`.
  int64_t patch = 4;
};

/// ε-prediction output plus the output of every decoder block, in decoder
/// order, taken before any upsampling in that block.
struct UNetOutput {
  torch::Tensor epsilon;
  std::vector<torch::Tensor> decoder_blocks;
};

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t emb_channels, double dropout);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);
  void zero_last_conv();

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  torch::nn::Linear emb_proj_{nullptr};
  torch::nn::Dropout dropout_{nullptr};
};
TORCH_MODULE(ResBlock);

class AttentionBlockImpl : public torch::nn::Module {
 public:
  AttentionBlockImpl(int64_t channels, int64_t head_channels);
  torch::Tensor forward(const torch::Tensor& x);
  void zero_proj();

 private:
  int64_t heads_;
  torch::nn::GroupNorm norm_{nullptr};
  torch::nn::Conv2d qkv_{nullptr}, proj_{nullptr};
};
TORCH_MODULE(AttentionBlock);

/// One UNet stage: a residual block with optional attention.
class UNetBlockImpl : public torch::nn::Module {
 public:
  UNetBlockImpl(int64_t in_channels, int64_t out_channels, int64_t emb_channels, double dropout,
                bool attention, int64_t head_channels);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);
  void zero_init();

 private:
  ResBlock res_{nullptr};
  AttentionBlock attn_{nullptr};
};
TORCH_MODULE(UNetBlock);

/// ADM-style encoder/decoder denoiser with skip connections. The input is
/// folded by `patch` (space-to-depth), so a config with four channel
/// multipliers spans strides 4, 8, 16 and 32.
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(const UNetConfig& config);

  UNetOutput forward(const torch::Tensor& x, const torch::Tensor& timesteps);

  /// Decoder block count: resolutions * (num_res_blocks + 1).
  int64_t num_decoder_blocks() const { return static_cast<int64_t>(output_blocks_.size()); }
  /// Resolution index (0 = finest) of a 1-based decoder block.
  int64_t decoder_block_resolution(int64_t block) const;
  int64_t decoder_block_channels(int64_t block) const;
  int64_t resolution_stride(int64_t resolution) const;

  /// Zeroes residual output convs and the output head (ADM initialization).
  void zero_init_outputs();

  const UNetConfig& config() const { return config_; }

 private:
  torch::Tensor timestep_embedding(const torch::Tensor& timesteps) const;

  UNetConfig config_;
  torch::nn::Sequential time_mlp_{nullptr};
  torch::nn::Conv2d input_conv_{nullptr};
  std::vector<UNetBlock> input_blocks_;
  std::vector<torch::nn::Conv2d> downsamples_;
  UNetBlock middle1_{nullptr}, middle2_{nullptr};
  std::vector<UNetBlock> output_blocks_;
  std::vector<int64_t> output_resolution_;
  std::vector<int64_t> output_channels_;
  std::vector<torch::nn::Conv2d> upsamples_;
  torch::nn::GroupNorm out_norm_{nullptr};
  torch::nn::Conv2d out_conv_{nullptr};
};
TORCH_MODULE(UNet);

/// Group count for GroupNorm: 32 when it divides the channel count.
int64_t norm_groups(int64_t channels);

}  // namespace gendistill
