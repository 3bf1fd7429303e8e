#include "fusenet/nn.hpp"

#include <algorithm>
#include <cmath>

#include "fusenet/ops.hpp"

namespace fusenet::nn {

namespace {

void push(ParamList& out, const std::string& prefix, const char* name, const Tensor& t) {
  out.push_back({prefix + name, t});
}

}  // namespace

std::size_t Module::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : parameters()) total += p.tensor.numel();
  return total;
}

void Module::zero_parameters() const {
  for (auto p : parameters()) std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0);
}

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng, double gain) {
  const double bound = gain / std::sqrt(static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(-bound, bound);
  t.set_requires_grad(true);
  return t;
}

Tensor init_constant(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

Linear::Linear(std::size_t in_features, std::size_t out_features, Rng& rng)
    : weight(init_uniform({in_features, out_features}, in_features, rng)), bias(init_constant({out_features}, 0.0)) {}

Tensor Linear::forward(const Tensor& x) const { return add(matmul(x, weight), bias); }

void Linear::collect_params(const std::string& prefix, ParamList& out) const {
  push(out, prefix, "weight", weight);
  push(out, prefix, "bias", bias);
}

LayerNorm::LayerNorm(std::size_t channels, double eps)
    : gamma(init_constant({channels}, 1.0)), beta(init_constant({channels}, 0.0)), eps(eps) {
  if (!(eps > 0.0)) throw ConfigError("LayerNorm eps must be positive");
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

void LayerNorm::collect_params(const std::string& prefix, ParamList& out) const {
  push(out, prefix, "gamma", gamma);
  push(out, prefix, "beta", beta);
}

Conv::Conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride, Rng& rng,
           bool activate)
    : weight(init_uniform({out_channels, in_channels, kernel, kernel}, in_channels * kernel * kernel, rng,
                          activate ? kSiluGain : kLinearGain)),
      bias(init_constant({out_channels}, 0.0)),
      stride(stride),
      padding(kernel / 2),
      activate(activate) {
  if (stride == 0) throw ConfigError("Conv stride must be positive");
}

Tensor Conv::forward(const Tensor& x) const {
  Tensor y = conv2d(x, weight, bias, stride, padding);
  return activate ? silu(y) : y;
}

void Conv::collect_params(const std::string& prefix, ParamList& out) const {
  push(out, prefix, "weight", weight);
  push(out, prefix, "bias", bias);
}

Mlp::Mlp(std::size_t in_features, std::size_t hidden, std::size_t out_features, Rng& rng)
    : fc1(in_features, hidden, rng), fc2(hidden, out_features, rng) {}

Tensor Mlp::forward(const Tensor& x) const { return fc2.forward(silu(fc1.forward(x))); }

void Mlp::collect_params(const std::string& prefix, ParamList& out) const {
  fc1.collect_params(prefix + "fc1.", out);
  fc2.collect_params(prefix + "fc2.", out);
}

namespace {

std::size_t checked_heads(std::size_t embed_dim, std::size_t num_heads) {
  if (num_heads == 0 || embed_dim == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("attention embed dim " + std::to_string(embed_dim) + " is not divisible by " +
                      std::to_string(num_heads) + " heads");
  }
  return num_heads;
}

}  // namespace

MultiHeadSelfAttention::MultiHeadSelfAttention(std::size_t embed_dim, std::size_t num_heads, Rng& rng)
    : query(embed_dim, embed_dim, rng),
      key(embed_dim, embed_dim, rng),
      value(embed_dim, embed_dim, rng),
      output(embed_dim, embed_dim, rng),
      heads_(checked_heads(embed_dim, num_heads)) {}

Tensor MultiHeadSelfAttention::forward(const Tensor& tokens) const { return forward(tokens, nullptr); }

Tensor MultiHeadSelfAttention::forward(const Tensor& tokens, Tensor* attention) const {
  if (tokens.rank() != 3 || tokens.dim(2) != embed_dim()) {
    throw DimensionError("attention expects [B, N, " + std::to_string(embed_dim()) + "], got " +
                         shape_string(tokens.shape()));
  }
  const std::size_t b = tokens.dim(0), n = tokens.dim(1), d = head_dim();
  auto split_heads = [&](const Tensor& t) { return permute(reshape(t, {b, n, heads_, d}), {0, 2, 1, 3}); };
  const Tensor q = split_heads(query.forward(tokens));
  const Tensor k = split_heads(key.forward(tokens));
  const Tensor v = split_heads(value.forward(tokens));
  const Tensor scores = scale(matmul(q, transpose(k, 2, 3)), 1.0 / std::sqrt(static_cast<double>(d)));
  const Tensor probs = softmax(scores, -1);
  if (attention) *attention = probs;
  const Tensor context = reshape(permute(matmul(probs, v), {0, 2, 1, 3}), {b, n, embed_dim()});
  return output.forward(context);
}

void MultiHeadSelfAttention::collect_params(const std::string& prefix, ParamList& out) const {
  query.collect_params(prefix + "q.", out);
  key.collect_params(prefix + "k.", out);
  value.collect_params(prefix + "v.", out);
  output.collect_params(prefix + "o.", out);
}

EncoderLayer::EncoderLayer(std::size_t embed_dim, std::size_t num_heads, std::size_t mlp_ratio, Rng& rng)
    : norm1(embed_dim),
      attention(embed_dim, num_heads, rng),
      norm2(embed_dim),
      mlp(embed_dim, embed_dim * mlp_ratio, embed_dim, rng) {
  if (mlp_ratio == 0) throw ConfigError("MLP expansion ratio must be positive");
}

Tensor EncoderLayer::forward(const Tensor& tokens) const {
  const Tensor mid = add(attention.forward(norm1.forward(tokens)), tokens);
  return add(mlp.forward(norm2.forward(mid)), mid);
}

void EncoderLayer::collect_params(const std::string& prefix, ParamList& out) const {
  norm1.collect_params(prefix + "ln1.", out);
  attention.collect_params(prefix + "msa.", out);
  norm2.collect_params(prefix + "ln2.", out);
  mlp.collect_params(prefix + "mlp.", out);
}

Tensor tokenize(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("tokenize expects [B,C,H,W], got " + shape_string(x.shape()));
  const auto& s = x.shape();
  return reshape(permute(x, {0, 2, 3, 1}), {s[0], s[2] * s[3], s[1]});
}

Tensor detokenize(const Tensor& tokens, std::size_t height, std::size_t width) {
  if (tokens.rank() != 3 || tokens.dim(1) != height * width) {
    throw DimensionError("detokenize: tokens " + shape_string(tokens.shape()) + " do not form a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  const std::size_t b = tokens.dim(0), c = tokens.dim(2);
  return permute(reshape(tokens, {b, height, width, c}), {0, 3, 1, 2});
}

Tensor sinusoidal_embedding(std::size_t positions, std::size_t channels) {
  if (positions == 0 || channels == 0) throw DimensionError("positional table needs positive dimensions");
  std::vector<double> table(positions * channels);
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t j = 0; j < channels; ++j) {
      const std::size_t pair = j / 2;
      const double freq = std::pow(10000.0, -static_cast<double>(2 * pair) / static_cast<double>(channels));
      const double angle = static_cast<double>(p) * freq;
      table[p * channels + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor({positions, channels}, std::move(table));
}

Tensor sinusoidal_embedding(std::size_t height, std::size_t width, std::size_t channels) {
  return sinusoidal_embedding(height * width, channels);
}

Tensor add_positional(const Tensor& tokens, const Tensor& table) {
  if (tokens.rank() != 3 || table.rank() != 2 || tokens.dim(1) != table.dim(0) || tokens.dim(2) != table.dim(1)) {
    throw DimensionError("positional table " + shape_string(table.shape()) + " does not match tokens " +
                         shape_string(tokens.shape()));
  }
  return add(tokens, table);
}

Bottleneck::Bottleneck(std::size_t channels, Rng& rng, bool shortcut)
    : cv1(channels, channels, 3, 1, rng), cv2(channels, channels, 3, 1, rng), shortcut(shortcut) {}

Tensor Bottleneck::forward(const Tensor& x) const {
  Tensor y = cv2.forward(cv1.forward(x));
  return shortcut ? add(x, y) : y;
}

void Bottleneck::collect_params(const std::string& prefix, ParamList& out) const {
  cv1.collect_params(prefix + "cv1.", out);
  cv2.collect_params(prefix + "cv2.", out);
}

namespace {

std::size_t c2f_hidden(std::size_t out_channels, double ratio) {
  const double c = static_cast<double>(out_channels) * ratio;
  const double rounded = std::round(c);
  if (rounded < 1.0 || std::abs(c - rounded) > 1e-9) {
    throw ConfigError("C2f: " + std::to_string(out_channels) + " output channels with hidden ratio " +
                      std::to_string(ratio) + " do not give an integral hidden width");
  }
  return static_cast<std::size_t>(rounded);
}

}  // namespace

C2f::C2f(std::size_t in_channels, std::size_t out_channels, std::size_t n, Rng& rng, double hidden_ratio)
    : cv1(in_channels, 2 * c2f_hidden(out_channels, hidden_ratio), 1, 1, rng),
      cv2((2 + n) * c2f_hidden(out_channels, hidden_ratio), out_channels, 1, 1, rng),
      hidden_(c2f_hidden(out_channels, hidden_ratio)) {
  blocks.reserve(n);
  for (std::size_t i = 0; i < n; ++i) blocks.emplace_back(hidden_, rng);
}

Tensor C2f::forward(const Tensor& x) const {
  auto halves = split(cv1.forward(x), 1, {hidden_, hidden_});
  std::vector<Tensor> parts{halves[0], halves[1]};
  for (const auto& block : blocks) parts.push_back(block.forward(parts.back()));
  return cv2.forward(concat(std::span<const Tensor>(parts), 1));
}

void C2f::collect_params(const std::string& prefix, ParamList& out) const {
  cv1.collect_params(prefix + "cv1.", out);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect_params(prefix + "m" + std::to_string(i) + ".", out);
  cv2.collect_params(prefix + "cv2.", out);
}

}  // namespace fusenet::nn
