#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "fusenet/nn.hpp"

// Attention-based fusion blocks: local-attention downsampling (LADS / FDS),
// global-attention upsampling (GAUS / FUS) and the fusion self-attention
// block (FMSA) that merges them at stride 8.
namespace fusenet::fusion {

// How GAUS reconciles channels with the stride x stride replication.
enum class GausChannelMode {
  // MLP maps C -> C / stride, every token copied into a stride x stride block.
  kReplicate,
  // MLP keeps C channels, rearranged into a stride x stride block of
  // C / stride^2 channels (element count conserved).
  kPixelShuffle,
};

struct FusionConfig {
  bool enable_fmsa = false;
  bool enable_fus = false;
  bool enable_fds = false;
  std::size_t channels = 32;  // C_f
  std::size_t fds_stride = 2;
  std::size_t fus_stride_p5 = 4;
  std::size_t fus_stride_p4 = 2;
  std::size_t fmsa_depth = 1;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  GausChannelMode gaus_mode = GausChannelMode::kReplicate;

  // FUS and FDS feed FMSA, so they require it.
  void validate() const;

  // Ablation settings 0..4: baseline, FMSA, FMSA+FUS, FMSA+FDS, all three.
  static FusionConfig setting(int id);
  // Inverse of setting(); -1 for combinations outside the ablation table.
  int setting_id() const;
};

// [B, C, H, W] -> [B, (H/s)*(W/s), s*s, C]: non-overlapping s x s patches in
// raster order, each holding its pixels in raster order.
Tensor patch_extract(const Tensor& x, std::size_t stride);
// Inverse of patch_extract.
Tensor patch_merge(const Tensor& patches, std::size_t height, std::size_t width);

// Local attention downsample: per stride x stride patch,
// LN -> MSA over the patch tokens -> mean over tokens -> MLP, giving one
// token per patch.
class Lads : public nn::Module {
 public:
  Lads(std::size_t in_channels, std::size_t out_channels, std::size_t stride, std::size_t heads,
       std::size_t mlp_ratio, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect_params(const std::string& prefix, nn::ParamList& out) const override;

  std::size_t stride;
  nn::LayerNorm norm;
  nn::MultiHeadSelfAttention attention;
  nn::Mlp mlp;
};

// Fusion downsample: C2f(Concat(strided conv(x), LADS(x))). Each branch
// contributes half of the output channels.
class Fds : public nn::Module {
 public:
  Fds(std::size_t in_channels, std::size_t out_channels, std::size_t c2f_blocks, const FusionConfig& config,
      Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect_params(const std::string& prefix, nn::ParamList& out) const override;

  nn::Conv conv;
  Lads lads;
  nn::C2f c2f;
};

// Global attention upsample: tokens -> LN -> MSA -> MLP (channel reduction)
// -> stride x stride replication.
class Gaus : public nn::Module {
 public:
  Gaus(std::size_t channels, std::size_t stride, std::size_t heads, std::size_t mlp_ratio, GausChannelMode mode,
       Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect_params(const std::string& prefix, nn::ParamList& out) const override;

  std::size_t out_channels() const;

  std::size_t stride;
  GausChannelMode mode;
  nn::LayerNorm norm;
  nn::MultiHeadSelfAttention attention;
  nn::Mlp mlp;
};

// Fusion upsample: GAUS(P5, stride 4) and GAUS(P4, stride 2), each projected
// to C_f by a 1x1 conv, summed at stride 8.
class Fus : public nn::Module {
 public:
  Fus(std::size_t p4_channels, std::size_t p5_channels, const FusionConfig& config, Rng& rng);

  Tensor forward(const Tensor& p4, const Tensor& p5) const;
  void collect_params(const std::string& prefix, nn::ParamList& out) const override;

  Gaus up_p5;
  Gaus up_p4;
  nn::Conv proj_p5;
  nn::Conv proj_p4;
};

struct FusionInputs {
  Tensor x_main;   // [B, C_f, H/8, W/8]
  Tensor fds_out;  // optional, same shape
  Tensor fus_out;  // optional, same shape
};

// y = C2f(A(x + fds + fus) + x), where A is the attention update of the
// encoder stack: tokens + positional table pass through L pre-norm encoder
// layers and A returns Z_L - Z_0 mapped back onto the grid.
class Fmsa : public nn::Module {
 public:
  Fmsa(std::size_t channels, std::size_t out_channels, std::size_t c2f_blocks, const FusionConfig& config, Rng& rng);

  Tensor forward(const FusionInputs& inputs) const;
  void collect_params(const std::string& prefix, nn::ParamList& out) const override;

  std::vector<nn::EncoderLayer> layers;
  nn::C2f c2f;
};

}  // namespace fusenet::fusion
