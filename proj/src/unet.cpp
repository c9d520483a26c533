#include "gendistill/unet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gendistill/errors.hpp"

namespace gendistill {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

int64_t norm_groups(int64_t channels) { return std::gcd<int64_t>(32, channels); }

ResBlockImpl::ResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t emb_channels, double dropout) {
  norm1_ = register_module("norm1", nn::GroupNorm(norm_groups(in_channels), in_channels));
  conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
  emb_proj_ = register_module("emb_proj", nn::Linear(emb_channels, out_channels));
  norm2_ = register_module("norm2", nn::GroupNorm(norm_groups(out_channels), out_channels));
  dropout_ = register_module("dropout", nn::Dropout(dropout));
  conv2_ = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
  if (in_channels != out_channels) {
    skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = conv1_->forward(torch::silu(norm1_->forward(x)));
  h = h + emb_proj_->forward(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2_->forward(dropout_->forward(torch::silu(norm2_->forward(h))));
  return (skip_ ? skip_->forward(x) : x) + h;
}

void ResBlockImpl::zero_last_conv() {
  torch::NoGradGuard no_grad;
  conv2_->weight.zero_();
  conv2_->bias.zero_();
}

AttentionBlockImpl::AttentionBlockImpl(int64_t channels, int64_t head_channels)
    : heads_(std::max<int64_t>(1, channels / head_channels)) {
  if (channels % heads_ != 0) throw ConfigError("attention channels not divisible by head count");
  norm_ = register_module("norm", nn::GroupNorm(norm_groups(channels), channels));
  qkv_ = register_module("qkv", nn::Conv2d(nn::Conv2dOptions(channels, 3 * channels, 1)));
  proj_ = register_module("proj", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1)));
}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& x) {
  const int64_t b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  const int64_t d = c / heads_;
  auto qkv = qkv_->forward(norm_->forward(x)).reshape({b, 3, heads_, d, h * w});
  auto q = qkv.select(1, 0), k = qkv.select(1, 1), v = qkv.select(1, 2);
  auto weights = torch::softmax(torch::matmul(q.transpose(-1, -2), k) / std::sqrt(static_cast<double>(d)), -1);
  auto out = torch::matmul(v, weights.transpose(-1, -2)).reshape({b, c, h, w});
  return x + proj_->forward(out);
}

void AttentionBlockImpl::zero_proj() {
  torch::NoGradGuard no_grad;
  proj_->weight.zero_();
  proj_->bias.zero_();
}

UNetBlockImpl::UNetBlockImpl(int64_t in_channels, int64_t out_channels, int64_t emb_channels, double dropout,
                             bool attention, int64_t head_channels) {
  res_ = register_module("res", ResBlock(in_channels, out_channels, emb_channels, dropout));
  if (attention) attn_ = register_module("attn", AttentionBlock(out_channels, head_channels));
}

torch::Tensor UNetBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = res_->forward(x, emb);
  return attn_ ? attn_->forward(h) : h;
}

void UNetBlockImpl::zero_init() {
  res_->zero_last_conv();
  if (attn_) attn_->zero_proj();
}

UNetImpl::UNetImpl(const UNetConfig& config) : config_(config) {
  if (config_.base_channels <= 0 || config_.channel_mult.empty() || config_.num_res_blocks < 1 ||
      config_.patch < 1 || config_.head_channels < 1) {
    throw ConfigError("invalid UNet configuration");
  }
  const int64_t base = config_.base_channels;
  const int64_t emb_channels = 4 * base;
  const int64_t resolutions = static_cast<int64_t>(config_.channel_mult.size());
  auto has_attention = [&](int64_t resolution) {
    const int level = static_cast<int>(std::lround(std::log2(static_cast<double>(resolution_stride(resolution)))));
    return std::find(config_.attention_levels.begin(), config_.attention_levels.end(), level) !=
           config_.attention_levels.end();
  };

  time_mlp_ = register_module("time_mlp", nn::Sequential(nn::Linear(base, emb_channels), nn::SiLU(),
                                                         nn::Linear(emb_channels, emb_channels)));
  const int64_t in_planes = 3 * config_.patch * config_.patch;
  int64_t ch = base * config_.channel_mult[0];
  input_conv_ = register_module("input_conv", nn::Conv2d(nn::Conv2dOptions(in_planes, ch, 3).padding(1)));

  std::vector<int64_t> skip_channels{ch};
  for (int64_t i = 0; i < resolutions; ++i) {
    const int64_t out = base * config_.channel_mult[i];
    for (int64_t r = 0; r < config_.num_res_blocks; ++r) {
      auto block = UNetBlock(ch, out, emb_channels, config_.dropout, has_attention(i), config_.head_channels);
      input_blocks_.push_back(
          register_module("input_block" + std::to_string(input_blocks_.size()), block));
      ch = out;
      skip_channels.push_back(ch);
    }
    if (i + 1 < resolutions) {
      auto down = nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1));
      downsamples_.push_back(register_module("downsample" + std::to_string(i), down));
      skip_channels.push_back(ch);
    }
  }

  middle1_ = register_module("middle1", UNetBlock(ch, ch, emb_channels, config_.dropout, true, config_.head_channels));
  middle2_ = register_module("middle2", UNetBlock(ch, ch, emb_channels, config_.dropout, false, config_.head_channels));

  for (int64_t i = resolutions - 1; i >= 0; --i) {
    const int64_t out = base * config_.channel_mult[i];
    for (int64_t r = 0; r <= config_.num_res_blocks; ++r) {
      const int64_t skip = skip_channels.back();
      skip_channels.pop_back();
      auto block = UNetBlock(ch + skip, out, emb_channels, config_.dropout, has_attention(i), config_.head_channels);
      output_blocks_.push_back(
          register_module("output_block" + std::to_string(output_blocks_.size()), block));
      output_resolution_.push_back(i);
      output_channels_.push_back(out);
      ch = out;
    }
    if (i > 0) {
      auto up = nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).padding(1));
      upsamples_.push_back(register_module("upsample" + std::to_string(i), up));
    }
  }

  out_norm_ = register_module("out_norm", nn::GroupNorm(norm_groups(ch), ch));
  out_conv_ = register_module("out_conv", nn::Conv2d(nn::Conv2dOptions(ch, in_planes, 3).padding(1)));
}

int64_t UNetImpl::resolution_stride(int64_t resolution) const { return config_.patch << resolution; }

int64_t UNetImpl::decoder_block_resolution(int64_t block) const {
  if (block < 1 || block > num_decoder_blocks()) {
    throw ConfigError("decoder block " + std::to_string(block) + " outside [1, " +
                      std::to_string(num_decoder_blocks()) + "]");
  }
  return output_resolution_[block - 1];
}

int64_t UNetImpl::decoder_block_channels(int64_t block) const {
  decoder_block_resolution(block);
  return output_channels_[block - 1];
}

torch::Tensor UNetImpl::timestep_embedding(const torch::Tensor& timesteps) const {
  const int64_t half = config_.base_channels / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat) / static_cast<double>(half));
  auto args = timesteps.to(torch::kFloat).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
  if (config_.base_channels % 2 == 1) emb = F::pad(emb, F::PadFuncOptions({0, 1}));
  return emb;
}

UNetOutput UNetImpl::forward(const torch::Tensor& x, const torch::Tensor& timesteps) {
  const int64_t resolutions = static_cast<int64_t>(config_.channel_mult.size());
  const int64_t factor = config_.patch << (resolutions - 1);
  if (x.dim() != 4 || x.size(2) % factor != 0 || x.size(3) % factor != 0) {
    throw ShapeError("UNet input spatial dims must be divisible by " + std::to_string(factor));
  }
  auto emb = time_mlp_->forward(timestep_embedding(timesteps));

  auto h = input_conv_->forward(F::pixel_unshuffle(x, F::PixelUnshuffleFuncOptions(config_.patch)));
  std::vector<torch::Tensor> skips{h};
  size_t in_idx = 0;
  for (int64_t i = 0; i < resolutions; ++i) {
    for (int64_t r = 0; r < config_.num_res_blocks; ++r) {
      h = input_blocks_[in_idx++]->forward(h, emb);
      skips.push_back(h);
    }
    if (i + 1 < resolutions) {
      h = downsamples_[i]->forward(h);
      skips.push_back(h);
    }
  }

  h = middle2_->forward(middle1_->forward(h, emb), emb);

  UNetOutput out;
  out.decoder_blocks.reserve(output_blocks_.size());
  size_t out_idx = 0, up_idx = 0;
  for (int64_t i = resolutions - 1; i >= 0; --i) {
    for (int64_t r = 0; r <= config_.num_res_blocks; ++r) {
      h = torch::cat({h, skips.back()}, 1);
      skips.pop_back();
      h = output_blocks_[out_idx++]->forward(h, emb);
      out.decoder_blocks.push_back(h);
    }
    if (i > 0) {
      h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
      h = upsamples_[up_idx++]->forward(h);
    }
  }

  h = out_conv_->forward(torch::silu(out_norm_->forward(h)));
  out.epsilon = F::pixel_shuffle(h, F::PixelShuffleFuncOptions(config_.patch));
  return out;
}

void UNetImpl::zero_init_outputs() {
  torch::NoGradGuard no_grad;
  for (auto& b : input_blocks_) b->zero_init();
  middle1_->zero_init();
  middle2_->zero_init();
  for (auto& b : output_blocks_) b->zero_init();
  out_conv_->weight.zero_();
  out_conv_->bias.zero_();
}

}  // namespace gendistill
