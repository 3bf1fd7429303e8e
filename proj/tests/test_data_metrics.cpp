#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "fusenet/data.hpp"
#include "fusenet/metrics.hpp"
#include "ap_oracle.hpp"

using namespace fusenet;
using namespace fusenet::testing;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("fusenet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Iou, ClosedForms) {
  const Box unit{0.5, 0.5, 1.0, 1.0};
  EXPECT_DOUBLE_EQ(iou(unit, unit), 1.0);
  EXPECT_DOUBLE_EQ(iou(Box{0.1, 0.1, 0.1, 0.1}, Box{0.8, 0.8, 0.1, 0.1}), 0.0);
  EXPECT_DOUBLE_EQ(iou(unit, Box{0.75, 0.5, 0.5, 1.0}), 0.5);
}

TEST(AveragePrecision, HandCases) {
  const GroundTruthBox t{0, {0.5, 0.5, 0.2, 0.2}, 0, false};
  const std::vector<GroundTruthBox> one{t};
  const std::vector<Detection> hit{{0, 0.9, t.box, 0}};
  EXPECT_EQ(metrics::average_precision(hit, one, 0.5), 1.0);
  EXPECT_EQ(metrics::average_precision({}, one, 0.5), 0.0);

  // 3 detections, 2 truths: TP, FP, TP -> points (0.5, 1), (0.5, 0.5), (1, 2/3).
  const std::vector<GroundTruthBox> two{t, {0, {0.2, 0.2, 0.1, 0.1}, 0, false}};
  const std::vector<Detection> three{
      {0, 0.9, t.box, 0}, {0, 0.8, Box{0.8, 0.8, 0.1, 0.1}, 0}, {0, 0.7, Box{0.2, 0.2, 0.1, 0.1}, 0}};
  const double ap = metrics::average_precision(three, two, 0.5);
  EXPECT_NEAR(ap, 0.5 * 1.0 + 0.5 * (2.0 / 3.0), 1e-15);
  EXPECT_NEAR(ap, oracle_ap(three, two, 0.5), 1e-15);
}

TEST(AveragePrecision, MatchesBruteForceOracleOn200Cases) {
  Rng rng(2024);
  std::vector<Detection> dets;
  std::vector<GroundTruthBox> truths;
  for (int trial = 0; trial < 200; ++trial) {
    random_case(rng, 1, dets, truths);
    for (double thr : {0.5, 0.75}) {
      EXPECT_NEAR(metrics::average_precision(dets, truths, thr), oracle_ap(dets, truths, thr), 1e-9)
          << "trial " << trial << " thr " << thr;
    }
  }
}

TEST(MeanAp, HandCases) {
  const GroundTruthBox a{0, {0.3, 0.3, 0.2, 0.2}, 0, false}, b{1, {0.7, 0.7, 0.2, 0.2}, 0, false};
  const std::vector<GroundTruthBox> truths{a, b};
  const std::vector<Detection> perfect{{0, 0.9, a.box, 0}, {1, 0.8, b.box, 0}};
  const auto r = metrics::mean_ap(perfect, truths);
  EXPECT_EQ(r.map50, 1.0);
  EXPECT_EQ(r.map50_95, 1.0);

  // Class 0 found (AP 1), class 1 missed (AP 0).
  const std::vector<Detection> half{{0, 0.9, a.box, 0}, {1, 0.8, Box{0.1, 0.9, 0.05, 0.05}, 0}};
  EXPECT_EQ(metrics::mean_ap(half, truths).map50, 0.5);
  EXPECT_THROW(metrics::mean_ap(half, std::vector<GroundTruthBox>{}), InputError);
}

TEST(MeanAp, PrecisionRecallAtConfidence) {
  const GroundTruthBox a{0, {0.3, 0.3, 0.2, 0.2}, 0, false};
  const std::vector<GroundTruthBox> truths{a, {0, {0.7, 0.7, 0.2, 0.2}, 0, false}};
  const std::vector<Detection> dets{{0, 0.9, a.box, 0}, {0, 0.6, Box{0.1, 0.9, 0.05, 0.05}, 0}, {0, 0.1, truths[1].box, 0}};
  const auto r = metrics::mean_ap(dets, truths, metrics::iou_ladder(), 0.25);
  EXPECT_DOUBLE_EQ(r.precision, 0.5);
  EXPECT_DOUBLE_EQ(r.recall, 0.5);
}

TEST(MeanAp, MatchesIndependentReimplementation) {
  Rng rng(77);
  std::vector<Detection> dets;
  std::vector<GroundTruthBox> truths;
  const auto ladder = metrics::iou_ladder();
  for (int trial = 0; trial < 100; ++trial) {
    random_case(rng, 3, dets, truths);
    const auto r = metrics::mean_ap(dets, truths);
    EXPECT_NEAR(r.map50, oracle_map(dets, truths, 0.5), 1e-9);
    double ladder_total = 0.0;
    for (double thr : ladder) ladder_total += oracle_map(dets, truths, thr);
    EXPECT_NEAR(r.map50_95, ladder_total / static_cast<double>(ladder.size()), 1e-9);
  }
}

TEST(Scenes, EmptyCountGivesFlatBackground) {
  data::SceneSpec spec;
  spec.seed = 3;
  spec.min_objects = spec.max_objects = 0;
  spec.clutter = 0.0;
  const auto scene = data::generate_scene(spec);
  EXPECT_TRUE(scene.truths.empty());
  for (std::size_t i = 3; i < scene.image.rgb.size(); ++i) EXPECT_EQ(scene.image.rgb[i], scene.image.rgb[i % 3]);
}

TEST(Scenes, SameSeedSameBytes) {
  data::SceneSpec spec;
  spec.seed = 7;
  const auto a = data::generate_scene(spec), b = data::generate_scene(spec);
  EXPECT_EQ(a.image, b.image);
  ASSERT_EQ(a.truths.size(), b.truths.size());
  spec.seed = 8;
  EXPECT_NE(data::generate_scene(spec).image, a.image);
}

TEST(Scenes, RasterizationAudit) {
  // Flat background, no occluders: any pixel off the background colour must
  // belong to an object, and must lie inside some truth box +-1 pixel.
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    data::SceneSpec spec;
    spec.seed = seed;
    spec.clutter = 0.0;
    spec.occlusion_prob = 0.0;
    spec.min_size = 0.06;
    spec.max_size = 0.2;
    const auto scene = data::generate_scene(spec);
    data::SceneSpec blank = spec;
    blank.min_objects = blank.max_objects = 0;
    const auto background = data::generate_scene(blank).image;
    const double W = static_cast<double>(spec.width), H = static_cast<double>(spec.height);
    std::vector<std::size_t> painted(scene.truths.size(), 0);
    for (std::size_t y = 0; y < spec.height; ++y) {
      for (std::size_t x = 0; x < spec.width; ++x) {
        bool differs = false;
        for (std::size_t c = 0; c < 3; ++c) differs |= scene.image.at(x, y, c) != background.at(x, y, c);
        if (!differs) continue;
        bool covered = false;
        for (std::size_t t = 0; t < scene.truths.size(); ++t) {
          const Box& b = scene.truths[t].box;
          if (x + 1.0 >= b.x0() * W - 1 && x <= b.x1() * W + 1 && y + 1.0 >= b.y0() * H - 1 && y <= b.y1() * H + 1) {
            covered = true;
            ++painted[t];
          }
        }
        EXPECT_TRUE(covered) << "seed " << seed << " pixel " << x << "," << y;
      }
    }
    for (std::size_t t = 0; t < scene.truths.size(); ++t) EXPECT_GT(painted[t], 0u) << "seed " << seed << " box " << t;
  }
}

TEST(Scenes, TruthsAreValid) {
  data::SceneSpec spec;
  spec.num_classes = 4;
  for (const auto& s : data::synthesize(spec, 50)) {
    EXPECT_GE(s.truths.size(), spec.min_objects);
    EXPECT_LE(s.truths.size(), spec.max_objects);
    for (const auto& t : s.truths) {
      EXPECT_GE(t.class_id, 0);
      EXPECT_LT(t.class_id, 4);
      EXPECT_GT(t.box.w, 0.0);
      EXPECT_GE(t.box.x0(), -1e-12);
      EXPECT_LE(t.box.x1(), 1.0 + 1e-12);
      EXPECT_GE(t.box.y0(), -1e-12);
      EXPECT_LE(t.box.y1(), 1.0 + 1e-12);
    }
  }
  data::SceneSpec bad;
  bad.min_objects = 3;
  bad.max_objects = 2;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(DataIo, DatasetRoundTrip) {
  const auto dir = temp_dir("dataset");
  data::SceneSpec spec;
  spec.seed = 5;
  const auto samples = data::synthesize(spec, 6);
  data::write_dataset(dir, samples);
  const auto loaded = data::load_dataset(dir);
  ASSERT_EQ(loaded.size(), samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(loaded[i].name, samples[i].name);
    EXPECT_EQ(loaded[i].image, samples[i].image);
    ASSERT_EQ(loaded[i].truths.size(), samples[i].truths.size());
    for (std::size_t j = 0; j < samples[i].truths.size(); ++j) {
      EXPECT_EQ(loaded[i].truths[j].class_id, samples[i].truths[j].class_id);
      EXPECT_NEAR(loaded[i].truths[j].box.cx, samples[i].truths[j].box.cx, 1e-6);
      EXPECT_NEAR(loaded[i].truths[j].box.h, samples[i].truths[j].box.h, 1e-6);
    }
  }
}

TEST(DataIo, RejectsBadInput) {
  const auto dir = temp_dir("badinput");
  std::ofstream(dir / "bad.txt") << "0 0.5 0.5 0.0 0.2\n";
  EXPECT_THROW(data::read_annotations(dir / "bad.txt"), InputError);
  std::ofstream(dir / "bad.ppm") << "P3\n1 1\n255\n0 0 0\n";
  EXPECT_THROW(data::read_ppm(dir / "bad.ppm"), InputError);
  EXPECT_THROW(data::load_dataset(dir / "missing"), InputError);
  const data::Image a(4, 4), b(8, 8);
  const std::vector<const data::Image*> mixed{&a, &b};
  EXPECT_THROW(data::batch_tensor(mixed), InputError);
}

TEST(DataIo, TensorScaling) {
  data::Image img(2, 1);
  img.at(0, 0, 0) = 255;
  img.at(1, 0, 2) = 51;
  const Tensor t = data::to_tensor(img);
  EXPECT_EQ(t.shape(), (Shape{3, 1, 2}));
  EXPECT_DOUBLE_EQ(t.at(0), 1.0);
  EXPECT_DOUBLE_EQ(t.at(5), 0.2);
}
