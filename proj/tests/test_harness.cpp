#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fusenet/harness.hpp"
#include "fusenet/ops.hpp"

using namespace fusenet;
using namespace fusenet::harness;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("fusenet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

// Small run used by several tests: 16 training images.
RunConfig small_run(const std::filesystem::path& out) {
  RunConfig c = RunConfig::desk();
  c.train_scenes = 16;
  c.val_scenes = 8;
  c.epochs = 3;
  c.out_dir = out.string();
  c.threads = 1;
  return c;
}

}  // namespace

TEST(Settings, ApplyAndReject) {
  RunConfig c = RunConfig::desk();
  apply_setting(c, "train.lr0", "0.02");
  EXPECT_EQ(c.lr0, 0.02);
  apply_setting(c, "momentum", "0.9");
  EXPECT_EQ(c.momentum, 0.9);
  apply_setting(c, "fusion.setting", "3");
  EXPECT_TRUE(c.model.fusion.enable_fds && !c.model.fusion.enable_fus);
  apply_setting(c, "loss.box", "l1");
  EXPECT_EQ(c.loss.box_loss, detector::BoxLoss::kL1);
  EXPECT_THROW(apply_setting(c, "train.nope", "1"), ConfigError);
  EXPECT_THROW(apply_setting(c, "train.epochs", "ten"), ConfigError);
  EXPECT_THROW(apply_setting(c, "train.epochs", "5x"), ConfigError);
  EXPECT_THROW(apply_setting(c, "fusion.gaus_mode", "bilinear"), ConfigError);
  apply_setting(c, "train.clip_norm", "-1");
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NE(describe_settings(c).find("train.lr0"), std::string::npos);
}

TEST(Settings, ConfigFile) {
  const auto dir = temp_dir("configfile");
  std::ofstream(dir / "run.ini") << "# comment\n[train]\nepochs = 7 ; trailing\nseed=4\n\n[fusion]\nsetting = 4\n";
  RunConfig c = RunConfig::desk();
  apply_config_file(c, dir / "run.ini");
  EXPECT_EQ(c.epochs, 7u);
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.model.fusion.setting_id(), 4);
  std::ofstream(dir / "bad.ini") << "[train]\nepochs\n";
  EXPECT_THROW(apply_config_file(c, dir / "bad.ini"), ConfigError);
  EXPECT_THROW(apply_config_file(c, dir / "missing.ini"), ConfigError);
}

TEST(Settings, ProfilesValidate) {
  EXPECT_NO_THROW(RunConfig::desk().validate());
  EXPECT_NO_THROW(RunConfig::table1().validate());
  EXPECT_EQ(RunConfig::table1().model.image_size, 640u);
  EXPECT_EQ(RunConfig::desk().model.image_size, 64u);
  RunConfig c = RunConfig::desk();
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Workers, EnvironmentCap) {
  setenv("FUSENET_THREADS", "1", 1);
  EXPECT_EQ(worker_count(8), 1u);
  unsetenv("FUSENET_THREADS");
  EXPECT_EQ(worker_count(3), 3u);
  EXPECT_GE(worker_count(0), 1u);
  std::vector<int> hit(50, 0);
  parallel_for(50, 4, [&](std::size_t i) { hit[i] += 1; });
  for (int h : hit) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(5, 2, [](std::size_t i) {
                 if (i == 3) throw InputError("boom");
               }),
               InputError);
}

TEST(Training, SmokeRunWritesLogRows) {
  const auto dir = temp_dir("smoke");
  RunConfig c = small_run(dir);
  c.epochs = 2;
  const Datasets d = load_datasets(c);
  ASSERT_EQ(d.train.size(), 16u);
  const TrainResult r = train(c, d.train, d.val);
  EXPECT_EQ(r.history.size(), 2u);
  const auto log = lines(slurp(dir / "train_log.csv"));
  ASSERT_EQ(log.size(), 3u);
  EXPECT_EQ(log[0], kTrainLogHeader);
  EXPECT_TRUE(std::filesystem::exists(dir / "last.ckpt"));
}

TEST(Training, ResumeIsBitExact) {
  const auto full_dir = temp_dir("resume_full"), part_dir = temp_dir("resume_part");
  const RunConfig full_cfg = small_run(full_dir);
  const Datasets d = load_datasets(full_cfg);
  const TrainResult full = train(full_cfg, d.train, d.val);

  const RunConfig part_cfg = small_run(part_dir);
  TrainOptions stop;
  stop.stop_after = 2;
  train(part_cfg, d.train, d.val, stop);
  TrainOptions resume;
  resume.resume = part_dir / "last.ckpt";
  const TrainResult resumed = train(part_cfg, d.train, d.val, resume);
  ASSERT_EQ(resumed.history.size(), 1u);
  EXPECT_EQ(resumed.history[0].loss, full.history[2].loss);
  EXPECT_EQ(slurp(part_dir / "last.ckpt"), slurp(full_dir / "last.ckpt"));
  EXPECT_EQ(slurp(part_dir / "train_log.csv"), slurp(full_dir / "train_log.csv"));
}

TEST(Training, ResumeRejectsOtherModel) {
  const auto dir = temp_dir("resume_other");
  RunConfig c = small_run(dir);
  c.epochs = 1;
  const Datasets d = load_datasets(c);
  train(c, d.train, d.val);
  RunConfig other = c;
  other.model.fusion = fusion::FusionConfig::setting(1);
  TrainOptions resume;
  resume.resume = dir / "last.ckpt";
  EXPECT_THROW(train(other, d.train, d.val, resume), InputError);
}

TEST(Training, DeterministicOutputs) {
  const auto a = temp_dir("det_a"), b = temp_dir("det_b");
  RunConfig ca = small_run(a), cb = small_run(b);
  ca.epochs = cb.epochs = 2;
  ca.model.fusion = cb.model.fusion = fusion::FusionConfig::setting(4);
  const Datasets d = load_datasets(ca);
  train(ca, d.train, d.val);
  train(cb, d.train, d.val);
  for (const char* f : {"train_log.csv", "last.ckpt", "best.ckpt"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}

TEST(Training, DivergenceAbortsWithDump) {
  const auto dir = temp_dir("nan");
  RunConfig c = small_run(dir);
  c.lr0 = 1e12;
  const Datasets d = load_datasets(c);
  EXPECT_THROW(train(c, d.train, d.val), NumericalError);
  const std::string dump = slurp(dir / "nan_dump.txt");
  EXPECT_NE(dump.find("shuffle_seed"), std::string::npos);
  EXPECT_NE(dump.find("samples:"), std::string::npos);
}

TEST(Training, GradientNormIsClipped) {
  // One step at lr 1 without momentum history: the update is the clipped gradient.
  RunConfig c = RunConfig::desk();
  c.train_scenes = c.batch_size;
  c.val_scenes = 1;
  c.epochs = 1;
  c.lr0 = 1.0;
  c.weight_decay = 0.0;
  const Datasets d = load_datasets(c);
  TrainOptions opts;
  opts.validate_each_epoch = false;
  opts.write_outputs = false;
  auto update_norm = [&](double clip) {
    c.clip_norm = clip;
    const auto trained = train(c, d.train, d.val, opts);
    const detector::Detector fresh(resolve_model(c), c.seed);
    const auto before = fresh.parameters(), after = trained.model->parameters();
    double sq = 0.0;
    for (std::size_t i = 0; i < before.size(); ++i) {
      for (std::size_t j = 0; j < before[i].tensor.numel(); ++j) {
        const double delta = after[i].tensor.at(j) - before[i].tensor.at(j);
        sq += delta * delta;
      }
    }
    return std::sqrt(sq);
  };
  const double clipped = update_norm(1e-3);
  EXPECT_GT(clipped, 0.9e-3);
  EXPECT_LT(clipped, 1.1e-3);
  EXPECT_GT(update_norm(0.0), 1e-2);
}

TEST(Training, OneSgdStepReducesLoss) {
  // Fresh toy model, fixed batch, one SGD step at lr 0.01 / momentum 0.937.
  RunConfig c = RunConfig::desk();
  c.train_scenes = 8;
  c.val_scenes = 1;
  const Datasets d = load_datasets(c);
  std::vector<const data::Image*> images;
  std::vector<std::vector<GroundTruthBox>> truths;
  for (const auto& s : d.train) {
    images.push_back(&s.image);
    truths.push_back(s.truths);
  }
  const Tensor batch = data::batch_tensor(images);
  int decreased = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const detector::Detector model(resolve_model(c), seed);
    const Tensor loss = detector::compute_loss(model.forward(batch), truths, c.loss).total;
    const double before = loss.item();
    loss.backward();
    for (const auto& p : model.parameters()) {
      Tensor t = p.tensor;
      const auto g = t.grad();
      auto v = t.mutable_data();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.01 * g[i];
    }
    const double after = detector::compute_loss(model.forward(batch), truths, c.loss).total.item();
    decreased += after < before ? 1 : 0;
  }
  EXPECT_GE(decreased, 19);
}

TEST(Evaluation, TrainedBeatsUntrainedOnTrainingSet) {
  RunConfig c = RunConfig::desk();
  c.train_scenes = 16;
  c.val_scenes = 1;
  c.epochs = 25;
  c.threads = 1;
  const Datasets d = load_datasets(c);
  TrainOptions opts;
  opts.validate_each_epoch = false;
  opts.write_outputs = false;
  const TrainResult r = train(c, d.train, d.val, opts);
  const detector::Detector untrained(resolve_model(c), c.seed);
  const double trained_map = evaluate(*r.model, d.train, c).map50;
  EXPECT_GT(trained_map, evaluate(untrained, d.train, c).map50);
  EXPECT_LT(r.history.back().loss, r.history.front().loss);
}

TEST(Evaluation, CsvFormatAndEmptyDataset) {
  const detector::Detector model(resolve_model(RunConfig::desk()), 1);
  EXPECT_THROW(evaluate(model, {}, RunConfig::desk()), InputError);
  metrics::MetricsReport report;
  report.per_class.push_back({0, 3, 0.5, 0.25, 0.0, 0.0});
  report.map50 = 0.5;
  report.map50_95 = 0.25;
  const auto rows = lines(eval_csv(report));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "class,AP50,AP50-90");
  EXPECT_EQ(rows[1], "0,0.500000,0.250000");
  EXPECT_EQ(rows[2], "all,0.500000,0.250000");
}

TEST(Evaluation, PredictIndependentOfWorkers) {
  RunConfig c = RunConfig::desk();
  c.train_scenes = 1;
  c.val_scenes = 40;
  const Datasets d = load_datasets(c);
  const detector::Detector model(resolve_model(c), 3);
  const auto a = predict(model, d.val, 0.01, 0.5, 1), b = predict(model, d.val, 0.01, 0.5, 3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image_id, b[i].image_id);
    EXPECT_EQ(a[i].score, b[i].score);
    EXPECT_EQ(a[i].box.cx, b[i].box.cx);
  }
}

TEST(Ablation, ParameterBudgetBand) {
  const auto params = ablation_params(RunConfig::desk());
  ASSERT_EQ(params.size(), 5u);
  for (std::size_t k = 1; k < 5; ++k) {
    const double rel = std::abs(static_cast<double>(params[k]) - static_cast<double>(params[0])) /
                       static_cast<double>(params[0]);
    EXPECT_LE(rel, 0.05) << "setting " << k;
  }
  RunConfig uncompensated = RunConfig::desk();
  uncompensated.compensate_depth = false;
  EXPECT_THROW(ablation_params(uncompensated, 0.001), ConfigError);
}

TEST(GradCheckCommand, AllBlocksPassAndReportTime) {
  const auto rows = run_gradcheck(1, GradCheckOptions{});
  std::set<std::string> blocks;
  for (const auto& r : rows) {
    EXPECT_TRUE(r.report.passed) << r.block << " " << r.shape << " " << r.report.max_relative_error;
    EXPECT_LE(r.report.max_relative_error, 1e-4);
    EXPECT_GE(r.millis, 0.0);
    blocks.insert(r.block);
  }
  for (const char* b : {"matmul", "softmax", "layer_norm", "conv2d", "msa", "encoder", "c2f", "lads", "fds", "gaus",
                        "fus", "fmsa", "backbone", "detector"}) {
    EXPECT_TRUE(blocks.count(b)) << b;
  }
}

TEST(GradCheckCommand, CorruptedRuleIsCaught) {
  detail::set_backward_fault("softmax");
  const auto rows = run_gradcheck(1, GradCheckOptions{});
  detail::set_backward_fault("");
  bool caught = false;
  for (const auto& r : rows) caught |= r.block == "softmax" && !r.report.passed;
  EXPECT_TRUE(caught);
}

TEST(Cost, ProbesMatchHandValues) {
  const ProbeCost conv = probe_conv_cost();
  EXPECT_EQ(conv.params, 448u);
  EXPECT_EQ(conv.analytic_flops, 3538944u);  // 2*9*3*16*64*64
  EXPECT_EQ(conv.counted_flops, conv.analytic_flops);
  const ProbeCost attn = probe_attention_cost(16, 32, 4);
  EXPECT_EQ(attn.params, 4u * (32 * 32 + 32));
  EXPECT_EQ(attn.analytic_flops, 163840u);  // 4 projections 8*16*32^2, scores and mix 4*16^2*32
  EXPECT_EQ(attn.counted_flops, attn.analytic_flops);
}

TEST(Cost, BenchReportsBothConfigs) {
  RunConfig c = RunConfig::desk();
  const auto rows = bench(c, 1, 0);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].params, detector::count_params_flops(resolve_model(c)).params);
  for (const auto& r : rows) {
    EXPECT_GT(r.flops, 0u);
    EXPECT_GT(r.latency_ms, 0.0);
  }
  EXPECT_NE(rows[0].flops, rows[1].flops);
}

TEST(Render, PixelRectMatchesBoxEdges) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const Box b{rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.02, 0.3), rng.uniform(0.02, 0.3)};
    const PixelRect r = pixel_rect(b, 64, 48);
    // Edges past the image border are clamped.
    const double x0 = std::clamp(b.x0(), 0.0, 1.0) * 64, x1 = std::clamp(b.x1(), 0.0, 1.0) * 64;
    const double y0 = std::clamp(b.y0(), 0.0, 1.0) * 48, y1 = std::clamp(b.y1(), 0.0, 1.0) * 48;
    EXPECT_LE(std::abs(r.x0 - x0), 1.0);
    EXPECT_LE(std::abs(r.x1 + 1 - x1), 1.0);
    EXPECT_LE(std::abs(r.y0 - y0), 1.0);
    EXPECT_LE(std::abs(r.y1 + 1 - y1), 1.0);
  }
}

TEST(Render, DrawnExtentsMatchDetections) {
  const data::Image blank(64, 64);
  const Box b{0.4, 0.55, 0.3, 0.2};
  const data::Image out = draw_detections(blank, {{1, 0.9, b, 0}});
  EXPECT_EQ(out.width, 64u);
  EXPECT_EQ(out.height, 64u);
  int x0 = 64, x1 = -1, y0 = 64, y1 = -1;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      if (out.at(x, y, 0) || out.at(x, y, 1) || out.at(x, y, 2)) {
        x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
      }
    }
  }
  EXPECT_LE(std::abs(x0 - b.x0() * 64), 1.0);
  EXPECT_LE(std::abs(x1 + 1 - b.x1() * 64), 1.0);
  EXPECT_LE(std::abs(y0 - b.y0() * 64), 1.0);
  EXPECT_LE(std::abs(y1 + 1 - b.y1() * 64), 1.0);
  // Outline only: the center stays untouched.
  EXPECT_EQ(out.at(25, 35, 1), 0);
}

TEST(Render, UntrainedModelAtHighThresholdDrawsNothing) {
  RunConfig c = RunConfig::desk();
  c.train_scenes = 1;
  c.val_scenes = 4;
  const Datasets d = load_datasets(c);
  const detector::Detector model(resolve_model(c), 2);
  const auto dets = predict(model, d.val, 0.99, 0.5);
  EXPECT_TRUE(dets.empty());
  EXPECT_EQ(draw_detections(d.val[0].image, dets), d.val[0].image);
}
