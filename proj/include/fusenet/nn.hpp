#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fusenet/rng.hpp"
#include "fusenet/tensor.hpp"

namespace fusenet::nn {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

class Module {
 public:
  virtual ~Module() = default;

  virtual void collect_params(const std::string& prefix, ParamList& out) const = 0;

  ParamList parameters() const {
    ParamList out;
    collect_params("", out);
    return out;
  }
  std::size_t parameter_count() const;
  // Overwrites every parameter of this module with zeros.
  void zero_parameters() const;
};

// Uniform(-gain/sqrt(fan_in), gain/sqrt(fan_in)) leaf with requires_grad set.
Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0);

// Conv init gains that keep the activation second moment near 1 without a
// normalization layer: sqrt(3) for a linear conv, sqrt(3 / 0.355) when SiLU
// follows (E[silu(z)^2] ~ 0.355 for z ~ N(0, 1)).
inline constexpr double kLinearGain = 1.7320508075688772;
inline constexpr double kSiluGain = 2.9070;
Tensor init_constant(Shape shape, double value);

class Linear : public Module {
 public:
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng);

  // [..., in] -> [..., out]
  Tensor forward(const Tensor& x) const;
  void collect_params(const std::string& prefix, ParamList& out) const override;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

class LayerNorm : public Module {
 public:
  explicit LayerNorm(std::size_t channels, double eps = 1e-5);

  Tensor forward(const Tensor& x) const;
  void collect_params(const std::string& prefix, ParamList& out) const override;

  Tensor gamma;
  Tensor beta;
  double eps;
};

// Conv2d + bias, optionally followed by SiLU; "same" padding for odd kernels.
class Conv : public Module {
 public:
  Conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride, Rng& rng,
       bool activate = true);

  Tensor forward(const Tensor& x) const;
  void collect_params(const std::string& prefix, ParamList& out) const override;

  std::size_t out_channels() const { return weight.dim(0); }

  Tensor weight;
  Tensor bias;
  std::size_t stride;
  std::size_t padding;
  bool activate;
};

// Linear -> SiLU -> Linear.
class Mlp : public Module {
 public:
  Mlp(std::size_t in_features, std::size_t hidden, std::size_t out_features, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect_params(const std::string& prefix, ParamList& out) const override;

  Linear fc1;
  Linear fc2;
};

// Multi-head self-attention over tokens [B, N, C]:
// softmax(Q K^T / sqrt(C / heads)) V per head, then an output projection.
class MultiHeadSelfAttention : public Module {
 public:
  MultiHeadSelfAttention(std::size_t embed_dim, std::size_t num_heads, Rng& rng);

  Tensor forward(const Tensor& tokens) const;
  // Also returns the attention probabilities, shape [B, heads, N, N].
  Tensor forward(const Tensor& tokens, Tensor* attention) const;
  void collect_params(const std::string& prefix, ParamList& out) const override;

  std::size_t embed_dim() const { return query.in_features(); }
  std::size_t num_heads() const { return heads_; }
  std::size_t head_dim() const { return embed_dim() / heads_; }

  Linear query;
  Linear key;
  Linear value;
  Linear output;

 private:
  std::size_t heads_;
};

// Pre-norm transformer layer:
//   z' = MSA(LN(z)) + z
//   out = MLP(LN(z')) + z'
class EncoderLayer : public Module {
 public:
  EncoderLayer(std::size_t embed_dim, std::size_t num_heads, std::size_t mlp_ratio, Rng& rng);

  Tensor forward(const Tensor& tokens) const;
  void collect_params(const std::string& prefix, ParamList& out) const override;

  LayerNorm norm1;
  MultiHeadSelfAttention attention;
  LayerNorm norm2;
  Mlp mlp;
};

// [B, C, H, W] -> [B, H*W, C]; token p is the pixel at raster position p.
Tensor tokenize(const Tensor& x);
// [B, H*W, C] -> [B, C, H, W].
Tensor detokenize(const Tensor& tokens, std::size_t height, std::size_t width);

// Interleaved sinusoidal table [positions, channels]:
//   E[p, 2i] = sin(p / 10000^(2i/C)), E[p, 2i+1] = cos(p / 10000^(2i/C))
// over the 1-D raster index p of the grid.
Tensor sinusoidal_embedding(std::size_t positions, std::size_t channels);
Tensor sinusoidal_embedding(std::size_t height, std::size_t width, std::size_t channels);

// tokens [B, N, C] + table [N, C].
Tensor add_positional(const Tensor& tokens, const Tensor& table);

// Two 3x3 convs with an optional residual connection.
class Bottleneck : public Module {
 public:
  Bottleneck(std::size_t channels, Rng& rng, bool shortcut = true);

  Tensor forward(const Tensor& x) const;
  void collect_params(const std::string& prefix, ParamList& out) const override;

  Conv cv1;
  Conv cv2;
  bool shortcut;
};

// Split-transform-concat block: 1x1 conv to 2c channels, split in halves,
// chain n bottlenecks on the second half, concat every intermediate
// (2 + n) * c channels, 1x1 conv to the output width. c = out * hidden_ratio.
class C2f : public Module {
 public:
  C2f(std::size_t in_channels, std::size_t out_channels, std::size_t blocks, Rng& rng,
      double hidden_ratio = 0.5);

  Tensor forward(const Tensor& x) const;
  void collect_params(const std::string& prefix, ParamList& out) const override;

  std::size_t hidden() const { return hidden_; }

  Conv cv1;
  std::vector<Bottleneck> blocks;
  Conv cv2;

 private:
  std::size_t hidden_;
};

}  // namespace fusenet::nn
