#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fusenet/grad_check.hpp"
#include "fusenet/nn.hpp"
#include "fusenet/ops.hpp"

using namespace fusenet;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(-scale, scale);
  return t;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Ops, HandExamples) {
  const Tensor id({2, 2}, std::vector<double>{1, 0, 0, 1});
  const Tensor m({2, 2}, std::vector<double>{3, 4, 5, 6});
  EXPECT_EQ(values(matmul(id, m)), values(m));
  EXPECT_EQ(matmul(Tensor({1, 2}, std::vector<double>{1, 2}), Tensor({2, 1}, std::vector<double>{3, 4})).item(), 11.0);

  const Tensor s = softmax(Tensor({3}, 0.0), 0);
  for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
  const Tensor big = softmax(Tensor({2}, std::vector<double>{1000.0, 0.0}), 0);
  EXPECT_DOUBLE_EQ(big.at(0), 1.0);
  EXPECT_DOUBLE_EQ(big.at(1), 0.0);

  const Tensor flat = layer_norm(Tensor({4}, 5.0), Tensor({4}, 1.0), Tensor({4}, 0.0), 1e-5);
  for (double v : flat.data()) EXPECT_EQ(v, 0.0);
  const Tensor pair = layer_norm(Tensor({2}, std::vector<double>{1, 3}), Tensor({2}, 1.0), Tensor({2}, 0.0), 1e-5);
  EXPECT_NEAR(pair.at(0), -1.0, 1e-3);
  EXPECT_NEAR(pair.at(1), 1.0, 1e-3);

  EXPECT_EQ(conv2d(Tensor({1, 1, 3, 3}, 1.0), Tensor({1, 1, 3, 3}, 1.0), Tensor(), 1, 0).item(), 9.0);
  std::vector<double> grid(16);
  std::iota(grid.begin(), grid.end(), 0.0);
  const Tensor sub = conv2d(Tensor({1, 1, 4, 4}, grid), Tensor({1, 1, 1, 1}, 1.0), Tensor(), 2, 0);
  EXPECT_EQ(values(sub), (std::vector<double>{0, 2, 8, 10}));

  const Tensor rows = concat({Tensor({1, 2}, std::vector<double>{1, 2}), Tensor({1, 2}, std::vector<double>{3, 4})}, 0);
  EXPECT_EQ(rows.shape(), (Shape{2, 2}));
  EXPECT_EQ(values(rows), (std::vector<double>{1, 2, 3, 4}));
}

TEST(GradCheck, HandExamples) {
  Tensor x = random_tensor({6}, 1);
  x.set_requires_grad(true);
  const auto plain = grad_check([](const std::vector<Tensor>& in) { return sum(in[0]); }, {x});
  EXPECT_LT(plain.max_relative_error, 1e-9);
  x.zero_grad();
  sum(softmax(x, 0)).backward();
  for (double g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(GradCheck, TightOpTolerances) {
  GradCheckOptions opts;
  opts.tolerance = 1e-6;
  Tensor a = random_tensor({4, 5}, 2), b = random_tensor({5, 3}, 3), v = random_tensor({7}, 4, 2.0);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  v.set_requires_grad(true);
  Tensor w = random_tensor({3}, 5);
  EXPECT_TRUE(grad_check([&](const std::vector<Tensor>& in) { return sum(mul(matmul(in[0], in[1]), w)); }, {a, b}, opts)
                  .passed);
  Tensor wv = random_tensor({7}, 6);
  EXPECT_TRUE(grad_check([&](const std::vector<Tensor>& in) { return sum(mul(softmax(in[0], 0), wv)); }, {v}, opts).passed);
  opts.tolerance = 1e-5;
  Tensor x = random_tensor({3, 6}, 7), g = random_tensor({6}, 8), be = random_tensor({6}, 9), wx = random_tensor({3, 6}, 10);
  for (Tensor* t : {&x, &g, &be}) t->set_requires_grad(true);
  EXPECT_TRUE(grad_check([&](const std::vector<Tensor>& in) { return sum(mul(layer_norm(in[0], in[1], in[2], 1e-5), wx)); },
                         {x, g, be}, opts)
                  .passed);
  Tensor img = random_tensor({2, 3, 5, 5}, 11), k = random_tensor({4, 3, 3, 3}, 12), bias = random_tensor({4}, 13);
  for (Tensor* t : {&img, &k, &bias}) t->set_requires_grad(true);
  EXPECT_TRUE(grad_check([](const std::vector<Tensor>& in) { return sum(square(conv2d(in[0], in[1], in[2], 2, 1))); },
                         {img, k, bias}, opts)
                  .passed);
}

TEST(Tokens, LayoutAndRoundTrip) {
  // [[a,b],[c,d]] channel-major: channel 0 = (a, b), channel 1 = (c, d).
  const Tensor x({1, 2, 1, 2}, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(values(nn::tokenize(x)), (std::vector<double>{1, 3, 2, 4}));
  const Tensor r = random_tensor({2, 8, 4, 4}, 14);
  const Tensor t = nn::tokenize(r);
  EXPECT_EQ(t.shape(), (Shape{2, 16, 8}));
  EXPECT_EQ(values(nn::detokenize(t, 4, 4)), values(r));
}

TEST(PositionalEmbedding, ClosedFormAndDeterminism) {
  const Tensor origin = nn::sinusoidal_embedding(1, 1, 8);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(origin.at(c), c % 2 == 0 ? 0.0 : 1.0);

  const std::size_t C = 6;
  const Tensor table = nn::sinusoidal_embedding(3, 4, C);
  ASSERT_EQ(table.shape(), (Shape{12, C}));
  for (std::size_t p = 0; p < 12; ++p) {
    for (std::size_t i = 0; i < C / 2; ++i) {
      const double freq = std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(C));
      EXPECT_NEAR(table.at(p * C + 2 * i), std::sin(static_cast<double>(p) / freq), 1e-15);
      EXPECT_NEAR(table.at(p * C + 2 * i + 1), std::cos(static_cast<double>(p) / freq), 1e-15);
    }
  }
  for (double v : table.data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(values(nn::sinusoidal_embedding(3, 4, C)), values(table));
  EXPECT_NE(values(nn::sinusoidal_embedding(2, 3, C)), values(nn::sinusoidal_embedding(3, 3, C)));

  const Tensor zeros({2, 12, C}, 0.0);
  const Tensor added = nn::add_positional(zeros, table);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < 12 * C; ++i) EXPECT_EQ(added.at(b * 12 * C + i), table.at(i));
  }
}

TEST(Attention, ConstructorChecks) {
  Rng rng(1);
  EXPECT_THROW(nn::MultiHeadSelfAttention(10, 4, rng), ConfigError);
  nn::MultiHeadSelfAttention msa(8, 2, rng);
  for (const auto* l : {&msa.query, &msa.key, &msa.value, &msa.output}) {
    EXPECT_EQ(l->in_features(), 8u);
    EXPECT_EQ(l->out_features(), 8u);
  }
}

TEST(Attention, RowsSumToOne) {
  Rng rng(2);
  nn::MultiHeadSelfAttention msa(16, 4, rng);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor probs;
    msa.forward(random_tensor({2, 9, 16}, 100 + seed, 3.0), &probs);
    ASSERT_EQ(probs.shape(), (Shape{2, 4, 9, 9}));
    for (std::size_t r = 0; r < probs.numel() / 9; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 9; ++c) s += probs.at(r * 9 + c);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Attention, SingleTokenAndIdenticalTokens) {
  Rng rng(3);
  nn::MultiHeadSelfAttention msa(8, 2, rng);
  const Tensor one = random_tensor({1, 1, 8}, 20);
  Tensor probs;
  const Tensor out = msa.forward(one, &probs);
  for (double p : probs.data()) EXPECT_EQ(p, 1.0);
  const Tensor expect = msa.output.forward(msa.value.forward(one));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(out.at(i), expect.at(i), 1e-14);

  const Tensor row = random_tensor({8}, 21);
  const Tensor same = add(Tensor({1, 5, 8}, 0.0), row);
  const Tensor y = msa.forward(same);
  for (std::size_t t = 1; t < 5; ++t) {
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(y.at(t * 8 + c), y.at(c));
  }
}

TEST(Attention, PermutationEquivariance) {
  Rng model_rng(4);
  nn::MultiHeadSelfAttention msa(12, 3, model_rng);
  Rng perm_rng(5);
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + trial % 11;
    const Tensor x = random_tensor({1, n, 12}, 1000 + trial, 2.0);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[perm_rng.integer(0, static_cast<std::int64_t>(i - 1))]);
    const Tensor permuted = reshape(index_select(reshape(x, {n, 12}), perm), {1, n, 12});
    const Tensor a = msa.forward(permuted);
    const Tensor b = msa.forward(x);
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t c = 0; c < 12; ++c) EXPECT_NEAR(a.at(t * 12 + c), b.at(perm[t] * 12 + c), 1e-10);
    }
  }
}

TEST(Encoder, ZeroWeightsGiveIdentity) {
  Rng rng(6);
  nn::EncoderLayer layer(16, 4, 2, rng);
  layer.zero_parameters();
  const Tensor x = random_tensor({2, 16, 16}, 30);
  const Tensor y = layer.forward(x);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(values(y), values(x));
}

TEST(Encoder, ShapeAndGradient) {
  Rng rng(7);
  nn::EncoderLayer layer(32, 4, 2, rng);
  EXPECT_EQ(layer.forward(random_tensor({2, 16, 32}, 31)).shape(), (Shape{2, 16, 32}));
  nn::EncoderLayer small(8, 2, 2, rng);
  Tensor x = random_tensor({1, 5, 8}, 32);
  x.set_requires_grad(true);
  std::vector<Tensor> inputs{x};
  for (const auto& p : small.parameters()) inputs.push_back(p.tensor);
  const auto report = grad_check([&](const std::vector<Tensor>& in) { return sum(small.forward(in[0])); }, inputs);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(C2fBlock, ZeroBottlenecksIsTwoPointwiseConvs) {
  Rng rng(8);
  nn::C2f block(6, 10, 0, rng);
  const Tensor x = random_tensor({1, 6, 5, 5}, 40);
  const Tensor expect = block.cv2.forward(block.cv1.forward(x));
  EXPECT_EQ(values(block.forward(x)), values(expect));
  EXPECT_EQ(block.cv1.weight.dim(-1), 1u);
  EXPECT_EQ(block.cv2.weight.dim(-1), 1u);
}

TEST(C2fBlock, PreservesSpatialDimsAndPassesGradCheck) {
  Rng rng(9);
  for (std::size_t trial = 0; trial < 6; ++trial) {
    const std::size_t h = 3 + trial, w = 9 - trial;
    nn::C2f block(4, 8, trial % 3, rng);
    const Tensor y = block.forward(random_tensor({2, 4, h, w}, 50 + trial));
    EXPECT_EQ(y.shape(), (Shape{2, 8, h, w}));
  }
  nn::C2f block(3, 4, 1, rng);
  Tensor x = random_tensor({1, 3, 4, 4}, 60);
  x.set_requires_grad(true);
  std::vector<Tensor> inputs{x};
  for (const auto& p : block.parameters()) inputs.push_back(p.tensor);
  const auto report = grad_check([&](const std::vector<Tensor>& in) { return sum(block.forward(in[0])); }, inputs);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(Params, NamesAreUniqueAndCountMatches) {
  Rng rng(10);
  nn::EncoderLayer layer(8, 2, 2, rng);
  const auto params = layer.parameters();
  std::vector<std::string> names;
  std::size_t total = 0;
  for (const auto& p : params) {
    names.push_back(p.name);
    total += p.tensor.numel();
  }
  std::sort(names.begin(), names.end());
  EXPECT_EQ(std::adjacent_find(names.begin(), names.end()), names.end());
  EXPECT_EQ(total, layer.parameter_count());
  // LN 2*(8+8), four 8x8 projections with bias, MLP 8->16->8.
  EXPECT_EQ(total, 32u + 4 * 72 + (8 * 16 + 16) + (16 * 8 + 8));
}
