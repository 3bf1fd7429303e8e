#include "fusenet/fusion.hpp"

#include "fusenet/ops.hpp"

namespace fusenet::fusion {

void FusionConfig::validate() const {
  if ((enable_fus || enable_fds) && !enable_fmsa) {
    throw ConfigError("FUS and FDS feed the FMSA block; enable_fmsa must be set when either is enabled");
  }
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("fusion channels " + std::to_string(channels) + " not divisible by " + std::to_string(heads) +
                      " attention heads");
  }
  if (fds_stride < 1 || fus_stride_p4 < 1 || fus_stride_p5 < 1) throw ConfigError("fusion strides must be positive");
  if (mlp_ratio == 0) throw ConfigError("MLP ratio must be positive");
}

FusionConfig FusionConfig::setting(int id) {
  FusionConfig c;
  switch (id) {
    case 0:
      break;
    case 1:
      c.enable_fmsa = true;
      break;
    case 2:
      c.enable_fmsa = c.enable_fus = true;
      break;
    case 3:
      c.enable_fmsa = c.enable_fds = true;
      break;
    case 4:
      c.enable_fmsa = c.enable_fus = c.enable_fds = true;
      break;
    default:
      throw ConfigError("ablation setting must be in 0..4, got " + std::to_string(id));
  }
  return c;
}

int FusionConfig::setting_id() const {
  if (!enable_fmsa) return (enable_fus || enable_fds) ? -1 : 0;
  if (enable_fus && enable_fds) return 4;
  if (enable_fds) return 3;
  if (enable_fus) return 2;
  return 1;
}

Tensor patch_extract(const Tensor& x, std::size_t stride) {
  if (x.rank() != 4) throw DimensionError("patch_extract expects [B,C,H,W], got " + shape_string(x.shape()));
  if (stride == 0) throw ConfigError("patch stride must be positive");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % stride != 0 || w % stride != 0) {
    throw DimensionError("patch_extract: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not divisible by stride " + std::to_string(stride) +
                         "; pad the input to a multiple of the stride");
  }
  const std::size_t hp = h / stride, wp = w / stride;
  const Tensor grid = permute(reshape(x, {b, c, hp, stride, wp, stride}), {0, 2, 4, 3, 5, 1});
  return reshape(grid, {b, hp * wp, stride * stride, c});
}

Tensor patch_merge(const Tensor& patches, std::size_t height, std::size_t width) {
  if (patches.rank() != 4) {
    throw DimensionError("patch_merge expects [B,P,s*s,C], got " + shape_string(patches.shape()));
  }
  const std::size_t b = patches.dim(0), p = patches.dim(1), ss = patches.dim(2), c = patches.dim(3);
  std::size_t stride = 1;
  while (stride * stride < ss) ++stride;
  if (stride * stride != ss || height % stride != 0 || width % stride != 0 ||
      (height / stride) * (width / stride) != p) {
    throw DimensionError("patch_merge: patches " + shape_string(patches.shape()) + " do not tile a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  const std::size_t hp = height / stride, wp = width / stride;
  const Tensor grid = permute(reshape(patches, {b, hp, wp, stride, stride, c}), {0, 5, 1, 3, 2, 4});
  return reshape(grid, {b, c, height, width});
}

Lads::Lads(std::size_t in_channels, std::size_t out_channels, std::size_t stride, std::size_t heads,
           std::size_t mlp_ratio, Rng& rng)
    : stride(stride),
      norm(in_channels),
      attention(in_channels, heads, rng),
      mlp(in_channels, in_channels * mlp_ratio, out_channels, rng) {}

Tensor Lads::forward(const Tensor& x) const {
  const std::size_t b = x.dim(0), c = x.dim(1);
  const std::size_t hp = x.dim(2) / stride, wp = x.dim(3) / stride;
  const Tensor patches = reshape(patch_extract(x, stride), {b * hp * wp, stride * stride, c});
  const Tensor attended = attention.forward(norm.forward(patches));
  const Tensor pooled = mean_axis(attended, 1);
  const Tensor tokens = mlp.forward(pooled);
  const std::size_t out_c = tokens.dim(1);
  return permute(reshape(tokens, {b, hp, wp, out_c}), {0, 3, 1, 2});
}

void Lads::collect_params(const std::string& prefix, nn::ParamList& out) const {
  norm.collect_params(prefix + "ln.", out);
  attention.collect_params(prefix + "msa.", out);
  mlp.collect_params(prefix + "mlp.", out);
}

namespace {

std::size_t conv_branch_width(std::size_t out_channels) {
  if (out_channels < 2) throw ConfigError("FDS needs at least 2 output channels");
  return out_channels / 2;
}

}  // namespace

Fds::Fds(std::size_t in_channels, std::size_t out_channels, std::size_t c2f_blocks, const FusionConfig& config,
         Rng& rng)
    : conv(in_channels, conv_branch_width(out_channels), 3, config.fds_stride, rng),
      lads(in_channels, out_channels - out_channels / 2, config.fds_stride, config.heads, config.mlp_ratio, rng),
      c2f(out_channels, out_channels, c2f_blocks, rng) {}

Tensor Fds::forward(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(2) % lads.stride != 0 || x.dim(3) % lads.stride != 0) {
    throw DimensionError("FDS input " + shape_string(x.shape()) + " must have spatial dims divisible by " +
                         std::to_string(lads.stride));
  }
  return c2f.forward(concat({conv.forward(x), lads.forward(x)}, 1));
}

void Fds::collect_params(const std::string& prefix, nn::ParamList& out) const {
  conv.collect_params(prefix + "conv.", out);
  lads.collect_params(prefix + "lads.", out);
  c2f.collect_params(prefix + "c2f.", out);
}

namespace {

std::size_t gaus_mlp_width(std::size_t channels, std::size_t stride, GausChannelMode mode) {
  if (stride == 0) throw ConfigError("GAUS stride must be positive");
  if (mode == GausChannelMode::kReplicate) {
    if (channels % stride != 0) {
      throw ConfigError("GAUS: channels " + std::to_string(channels) + " not divisible by stride " +
                        std::to_string(stride));
    }
    return channels / stride;
  }
  if (channels % (stride * stride) != 0) {
    throw ConfigError("GAUS pixel-shuffle: channels " + std::to_string(channels) + " not divisible by stride^2 " +
                      std::to_string(stride * stride));
  }
  return channels;
}

}  // namespace

Gaus::Gaus(std::size_t channels, std::size_t stride, std::size_t heads, std::size_t mlp_ratio, GausChannelMode mode,
           Rng& rng)
    : stride(stride),
      mode(mode),
      norm(channels),
      attention(channels, heads, rng),
      mlp(channels, channels * mlp_ratio, gaus_mlp_width(channels, stride, mode), rng) {}

std::size_t Gaus::out_channels() const {
  const std::size_t c = attention.embed_dim();
  return mode == GausChannelMode::kReplicate ? c / stride : c / (stride * stride);
}

Tensor Gaus::forward(const Tensor& x) const {
  if (x.rank() != 4) throw DimensionError("GAUS expects [B,C,H,W], got " + shape_string(x.shape()));
  const std::size_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
  const Tensor tokens = mlp.forward(attention.forward(norm.forward(nn::tokenize(x))));
  const Tensor grid = nn::detokenize(tokens, h, w);
  if (mode == GausChannelMode::kReplicate) return upsample_nearest(grid, stride);
  const std::size_t oc = out_channels();
  const Tensor blocks = permute(reshape(grid, {b, oc, stride, stride, h, w}), {0, 1, 4, 2, 5, 3});
  return reshape(blocks, {b, oc, h * stride, w * stride});
}

void Gaus::collect_params(const std::string& prefix, nn::ParamList& out) const {
  norm.collect_params(prefix + "ln.", out);
  attention.collect_params(prefix + "msa.", out);
  mlp.collect_params(prefix + "mlp.", out);
}

Fus::Fus(std::size_t p4_channels, std::size_t p5_channels, const FusionConfig& config, Rng& rng)
    : up_p5(p5_channels, config.fus_stride_p5, config.heads, config.mlp_ratio, config.gaus_mode, rng),
      up_p4(p4_channels, config.fus_stride_p4, config.heads, config.mlp_ratio, config.gaus_mode, rng),
      proj_p5(up_p5.out_channels(), config.channels, 1, 1, rng, false),
      proj_p4(up_p4.out_channels(), config.channels, 1, 1, rng, false) {}

Tensor Fus::forward(const Tensor& p4, const Tensor& p5) const {
  const Tensor a = proj_p5.forward(up_p5.forward(p5));
  const Tensor b = proj_p4.forward(up_p4.forward(p4));
  if (a.shape() != b.shape()) {
    throw DimensionError("FUS: upsampled branches disagree: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  return add(a, b);
}

void Fus::collect_params(const std::string& prefix, nn::ParamList& out) const {
  up_p5.collect_params(prefix + "gaus5.", out);
  up_p4.collect_params(prefix + "gaus4.", out);
  proj_p5.collect_params(prefix + "proj5.", out);
  proj_p4.collect_params(prefix + "proj4.", out);
}

Fmsa::Fmsa(std::size_t channels, std::size_t out_channels, std::size_t c2f_blocks, const FusionConfig& config,
           Rng& rng)
    : c2f(channels, out_channels, c2f_blocks, rng) {
  layers.reserve(config.fmsa_depth);
  for (std::size_t i = 0; i < config.fmsa_depth; ++i) {
    layers.emplace_back(channels, config.heads, config.mlp_ratio, rng);
    // Residual branches start closed, so a fresh block computes C2F(x).
    layers.back().attention.output.zero_parameters();
    layers.back().mlp.fc2.zero_parameters();
  }
}

Tensor Fmsa::forward(const FusionInputs& inputs) const {
  const Tensor& x = inputs.x_main;
  if (x.rank() != 4) throw DimensionError("FMSA expects [B,C,H,W], got " + shape_string(x.shape()));
  Tensor fused = x;
  for (const Tensor* branch : {&inputs.fds_out, &inputs.fus_out}) {
    if (!branch->defined()) continue;
    if (branch->shape() != x.shape()) {
      throw DimensionError("FMSA: branch shape " + shape_string(branch->shape()) + " differs from main input " +
                           shape_string(x.shape()));
    }
    fused = add(fused, *branch);
  }
  const std::size_t h = x.dim(2), w = x.dim(3);
  const Tensor z0 = nn::add_positional(nn::tokenize(fused), nn::sinusoidal_embedding(h, w, x.dim(1)));
  Tensor z = z0;
  for (const auto& layer : layers) z = layer.forward(z);
  const Tensor update = nn::detokenize(sub(z, z0), h, w);
  return c2f.forward(add(update, x));
}

void Fmsa::collect_params(const std::string& prefix, nn::ParamList& out) const {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect_params(prefix + "enc" + std::to_string(i) + ".", out);
  c2f.collect_params(prefix + "c2f.", out);
}

}  // namespace fusenet::fusion
