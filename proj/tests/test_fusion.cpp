#include <gtest/gtest.h>

#include "fusenet/fusion.hpp"
#include "fusenet/grad_check.hpp"
#include "fusenet/ops.hpp"

using namespace fusenet;
using fusion::FusionConfig;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(-scale, scale);
  return t;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

void zero(const nn::Module& m) { m.zero_parameters(); }

GradCheckReport check_block(const nn::Module& block, Tensor input, const std::function<Tensor(const Tensor&)>& f) {
  input.set_requires_grad(true);
  std::vector<Tensor> inputs{input};
  for (const auto& p : block.parameters()) inputs.push_back(p.tensor);
  GradCheckOptions opts;
  opts.max_coords_per_input = 24;
  return grad_check([&](const std::vector<Tensor>& in) { return sum(f(in[0])); }, inputs, opts);
}

}  // namespace

TEST(FusionConfig, LegalCombinations) {
  for (int id = 0; id < 5; ++id) {
    const FusionConfig c = FusionConfig::setting(id);
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.setting_id(), id);
  }
  EXPECT_THROW(FusionConfig::setting(5), ConfigError);
  FusionConfig orphan;
  orphan.enable_fus = true;
  EXPECT_THROW(orphan.validate(), ConfigError);
  FusionConfig heads = FusionConfig::setting(4);
  heads.heads = 5;
  EXPECT_THROW(heads.validate(), ConfigError);
  const FusionConfig s1 = FusionConfig::setting(1), s3 = FusionConfig::setting(3);
  EXPECT_TRUE(s1.enable_fmsa && !s1.enable_fus && !s1.enable_fds);
  EXPECT_TRUE(s3.enable_fmsa && !s3.enable_fus && s3.enable_fds);
}

TEST(Patches, LayoutAndShapes) {
  const Tensor x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  const Tensor one = fusion::patch_extract(x, 2);
  EXPECT_EQ(one.shape(), (Shape{1, 1, 4, 1}));
  EXPECT_EQ(values(one), (std::vector<double>{1, 2, 3, 4}));

  const Tensor r = random_tensor({2, 3, 4, 6}, 1);
  EXPECT_EQ(values(fusion::patch_extract(r, 1)), values(nn::tokenize(r)));
  const Tensor p = fusion::patch_extract(random_tensor({1, 3, 4, 4}, 2), 2);
  EXPECT_EQ(p.shape(), (Shape{1, 4, 4, 3}));
  EXPECT_EQ(values(fusion::patch_merge(fusion::patch_extract(r, 2), 4, 6)), values(r));
  EXPECT_THROW(fusion::patch_extract(random_tensor({1, 3, 5, 4}, 3), 2), DimensionError);
}

TEST(LadsBlock, ConstantInputGivesConstantOutput) {
  Rng rng(4);
  fusion::Lads lads(8, 8, 2, 2, 2, rng);
  const Tensor colour = random_tensor({8}, 5);
  std::vector<double> flat(8 * 16);
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = colour.at(i / 16);
  const Tensor x({1, 8, 4, 4}, flat);
  const Tensor y = lads.forward(x);
  ASSERT_EQ(y.shape(), (Shape{1, 8, 2, 2}));
  for (std::size_t c = 0; c < 8; ++c) {
    for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(y.at(c * 4 + i), y.at(c * 4));
  }
}

TEST(LadsBlock, GradCheck) {
  Rng rng(6);
  fusion::Lads lads(4, 6, 2, 2, 2, rng);
  const auto r = check_block(lads, random_tensor({1, 4, 4, 4}, 7), [&](const Tensor& x) { return lads.forward(x); });
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}

TEST(FdsBlock, HalvesSpatialDims) {
  Rng rng(8);
  const FusionConfig cfg = FusionConfig::setting(3);
  for (std::size_t trial = 0; trial < 5; ++trial) {
    fusion::Fds fds(4, 8, 1, cfg, rng);
    const std::size_t h = 2 * (1 + trial), w = 2 * (4 - trial % 3);
    EXPECT_EQ(fds.forward(random_tensor({2, 4, h, w}, 10 + trial)).shape(), (Shape{2, 8, h / 2, w / 2}));
  }
  fusion::Fds fds(4, 8, 1, cfg, rng);
  EXPECT_THROW(fds.forward(random_tensor({1, 4, 5, 4}, 20)), DimensionError);
}

TEST(FdsBlock, ZeroedLadsLeavesOnlyConvBranch) {
  Rng rng(9);
  fusion::Fds fds(4, 8, 1, FusionConfig::setting(3), rng);
  zero(fds.lads);
  // Two inputs that differ only in contrast inside each 2x2 patch.
  const Tensor a = random_tensor({1, 4, 4, 4}, 21);
  const Tensor b = add(a, random_tensor({1, 4, 4, 4}, 22, 0.5));
  for (const Tensor& x : {a, b}) {
    const Tensor expect = fds.c2f.forward(concat({fds.conv.forward(x), Tensor({1, 4, 2, 2}, 0.0)}, 1));
    EXPECT_EQ(values(fds.forward(x)), values(expect));
  }
  EXPECT_NE(values(fds.forward(a)), values(fds.forward(b)));
}

TEST(FdsBlock, GradCheck) {
  Rng rng(11);
  fusion::Fds fds(4, 8, 1, FusionConfig::setting(3), rng);
  const auto r = check_block(fds, random_tensor({1, 4, 4, 4}, 12), [&](const Tensor& x) { return fds.forward(x); });
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}

TEST(GausBlock, PaperShapeAndReplication) {
  Rng rng(13);
  fusion::Gaus gaus(8, 2, 2, 2, fusion::GausChannelMode::kReplicate, rng);
  const Tensor y = gaus.forward(random_tensor({1, 8, 2, 2}, 14));
  ASSERT_EQ(y.shape(), (Shape{1, 4, 4, 4}));
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(y.at((c * 4 + i) * 4 + j), y.at((c * 4 + i / 2 * 2) * 4 + j / 2 * 2));
      }
    }
  }
}

TEST(GausBlock, StrideOneKeepsResolution) {
  Rng rng(15);
  fusion::Gaus gaus(8, 1, 2, 2, fusion::GausChannelMode::kReplicate, rng);
  const Tensor x = random_tensor({2, 8, 3, 5}, 16);
  const Tensor y = gaus.forward(x);
  ASSERT_EQ(y.shape(), x.shape());
  const Tensor tokens = gaus.mlp.forward(gaus.attention.forward(gaus.norm.forward(nn::tokenize(x))));
  EXPECT_EQ(values(y), values(nn::detokenize(tokens, 3, 5)));
}

TEST(GausBlock, PixelShuffleConservesElements) {
  Rng rng(17);
  fusion::Gaus gaus(16, 2, 2, 2, fusion::GausChannelMode::kPixelShuffle, rng);
  const Tensor x = random_tensor({1, 16, 2, 3}, 18);
  const Tensor y = gaus.forward(x);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 4, 6}));
  EXPECT_EQ(y.numel(), x.numel());
  EXPECT_THROW(fusion::Gaus(6, 2, 2, 2, fusion::GausChannelMode::kPixelShuffle, rng), ConfigError);
}

TEST(GausBlock, GradCheck) {
  Rng rng(19);
  fusion::Gaus gaus(8, 2, 2, 2, fusion::GausChannelMode::kReplicate, rng);
  const auto r = check_block(gaus, random_tensor({1, 8, 2, 2}, 20), [&](const Tensor& x) { return gaus.forward(x); });
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}

TEST(FusBlock, ZeroedP5BranchLeavesP4Branch) {
  Rng rng(21);
  FusionConfig cfg = FusionConfig::setting(2);
  cfg.channels = 8;
  cfg.heads = 2;
  fusion::Fus fus(8, 16, cfg, rng);
  zero(fus.proj_p5);
  const Tensor p4 = random_tensor({1, 8, 4, 4}, 22), p5 = random_tensor({1, 16, 2, 2}, 23);
  const Tensor y = fus.forward(p4, p5);
  ASSERT_EQ(y.shape(), (Shape{1, 8, 8, 8}));
  EXPECT_EQ(values(y), values(fus.proj_p4.forward(fus.up_p4.forward(p4))));
}

TEST(FusBlock, GradCheck) {
  Rng rng(24);
  FusionConfig cfg = FusionConfig::setting(2);
  cfg.channels = 4;
  cfg.heads = 2;
  fusion::Fus fus(4, 8, cfg, rng);
  Tensor p4 = random_tensor({1, 4, 2, 2}, 25), p5 = random_tensor({1, 8, 1, 1}, 26);
  p4.set_requires_grad(true);
  p5.set_requires_grad(true);
  std::vector<Tensor> inputs{p4, p5};
  for (const auto& p : fus.parameters()) inputs.push_back(p.tensor);
  GradCheckOptions opts;
  opts.max_coords_per_input = 24;
  const auto r =
      grad_check([&](const std::vector<Tensor>& in) { return sum(fus.forward(in[0], in[1])); }, inputs, opts);
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}

TEST(FmsaBlock, ZeroAttentionWeightsReduceToC2f) {
  for (int setting = 1; setting < 5; ++setting) {
    Rng rng(27);
    FusionConfig cfg = FusionConfig::setting(setting);
    cfg.channels = 16;
    cfg.fmsa_depth = 2;
    fusion::Fmsa fmsa(16, 24, 1, cfg, rng);
    for (const auto& layer : fmsa.layers) zero(layer);
    const Tensor x = random_tensor({2, 16, 4, 4}, 28);
    const Tensor y = fmsa.forward({x, {}, {}});
    EXPECT_EQ(y.shape(), (Shape{2, 24, 4, 4}));
    EXPECT_EQ(values(y), values(fmsa.c2f.forward(x))) << "setting " << setting;
  }
}

TEST(FmsaBlock, FreshBlockComputesC2f) {
  Rng rng(26);
  fusion::Fmsa fmsa(8, 8, 1, FusionConfig::setting(4), rng);
  const Tensor x = random_tensor({1, 8, 4, 4}, 25);
  EXPECT_EQ(values(fmsa.forward({x, {}, {}})), values(fmsa.c2f.forward(x)));
}

TEST(FmsaBlock, BranchesMustMatchMainShape) {
  Rng rng(29);
  fusion::Fmsa fmsa(8, 8, 1, FusionConfig::setting(4), rng);
  const Tensor x = random_tensor({1, 8, 4, 4}, 30);
  EXPECT_EQ(fmsa.forward({x, random_tensor({1, 8, 4, 4}, 31), random_tensor({1, 8, 4, 4}, 32)}).shape(), x.shape());
  EXPECT_THROW(fmsa.forward({x, random_tensor({1, 8, 2, 2}, 33), {}}), DimensionError);
}

TEST(FmsaBlock, GradCheckWithAllBranches) {
  Rng rng(34);
  FusionConfig cfg = FusionConfig::setting(4);
  cfg.channels = 8;
  cfg.heads = 2;
  fusion::Fmsa fmsa(8, 8, 1, cfg, rng);
  // Reopen the zero-initialized residual outputs so attention gets a gradient.
  for (const auto& layer : fmsa.layers) {
    for (const nn::Module* m : {static_cast<const nn::Module*>(&layer.attention.output), static_cast<const nn::Module*>(&layer.mlp.fc2)}) {
      for (auto p : m->parameters()) {
        for (auto& v : p.tensor.mutable_data()) v = rng.uniform(-0.5, 0.5);
      }
    }
  }
  std::vector<Tensor> inputs;
  for (std::uint64_t s = 35; s < 38; ++s) {
    Tensor t = random_tensor({1, 8, 2, 2}, s);
    t.set_requires_grad(true);
    inputs.push_back(t);
  }
  for (const auto& p : fmsa.parameters()) inputs.push_back(p.tensor);
  GradCheckOptions opts;
  opts.max_coords_per_input = 16;
  const auto r = grad_check(
      [&](const std::vector<Tensor>& in) { return sum(fmsa.forward({in[0], in[1], in[2]})); }, inputs, opts);
  EXPECT_TRUE(r.passed) << r.max_relative_error;
}

// Shape contracts over the desk input sizes.
class ShapeContract : public ::testing::TestWithParam<std::size_t> {};

TEST_P(ShapeContract, AllFusionBlocks) {
  const std::size_t size = GetParam();
  Rng rng(40);
  FusionConfig cfg = FusionConfig::setting(4);
  cfg.channels = 16;
  const std::size_t h8 = size / 8, h16 = size / 16, h32 = size / 32;

  fusion::Fds fds(8, 16, 1, cfg, rng);
  EXPECT_EQ(fds.forward(random_tensor({1, 8, size / 4, size / 4}, 41)).shape(), (Shape{1, 16, h8, h8}));

  fusion::Gaus g5(32, 4, 4, 2, cfg.gaus_mode, rng);
  EXPECT_EQ(g5.forward(random_tensor({1, 32, h32, h32}, 42)).shape(), (Shape{1, 8, h8, h8}));
  fusion::Gaus g4(16, 2, 4, 2, cfg.gaus_mode, rng);
  EXPECT_EQ(g4.forward(random_tensor({1, 16, h16, h16}, 43)).shape(), (Shape{1, 8, h8, h8}));

  fusion::Fus fus(16, 32, cfg, rng);
  const Tensor p4 = random_tensor({1, 16, h16, h16}, 44), p5 = random_tensor({1, 32, h32, h32}, 45);
  EXPECT_EQ(fus.proj_p5.forward(fus.up_p5.forward(p5)).shape(), (Shape{1, 16, h8, h8}));
  EXPECT_EQ(fus.proj_p4.forward(fus.up_p4.forward(p4)).shape(), (Shape{1, 16, h8, h8}));
  const Tensor fused = fus.forward(p4, p5);
  EXPECT_EQ(fused.shape(), (Shape{1, 16, h8, h8}));

  fusion::Fmsa fmsa(16, 16, 1, cfg, rng);
  const Tensor x = random_tensor({1, 16, h8, h8}, 46);
  EXPECT_EQ(fmsa.forward({x, random_tensor({1, 16, h8, h8}, 47), fused}).shape(), x.shape());
}

INSTANTIATE_TEST_SUITE_P(DeskSizes, ShapeContract, ::testing::Values(64, 96, 128));
