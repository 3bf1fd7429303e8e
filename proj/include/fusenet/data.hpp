#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fusenet/boxes.hpp"
#include "fusenet/tensor.hpp"

namespace fusenet::data {

// 8-bit interleaved RGB image.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t width, std::size_t height) : width(width), height(height), rgb(width * height * 3, 0) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

// [3, H, W] in [0, 1].
Tensor to_tensor(const Image& image);
// [B, 3, H, W]; all images must share one size.
Tensor batch_tensor(std::span<const Image* const> images);

// Binary PPM (P6, maxval 255).
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t width = 64;
  std::size_t height = 64;
  std::size_t min_objects = 1;
  std::size_t max_objects = 6;
  // Object side as a fraction of the image side, drawn biased toward the
  // small end.
  double min_size = 0.02;
  double max_size = 0.10;
  // 0 gives a flat background; 1 is heavily textured.
  double clutter = 0.3;
  double occlusion_prob = 0.2;
  std::size_t num_classes = 3;

  void validate() const;
};

struct Scene {
  Image image;
  std::vector<GroundTruthBox> truths;
};

// Renders class-coded shapes (ellipse / rectangle / triangle families with a
// per-class color) on a textured background. Occluders are drawn inside an
// object's box. Truth boxes are the exact shape extents.
Scene generate_scene(const SceneSpec& spec);

// The fill color and shape family used for a class.
struct ClassStyle {
  std::uint8_t r, g, b;
  int shape;  // 0 ellipse, 1 rectangle, 2 triangle
};
ClassStyle class_style(int class_id);

// YOLO-style annotation text: one "class_id cx cy w h" line per box.
// Degenerate (non-positive width/height) boxes are rejected with InputError.
std::vector<GroundTruthBox> read_annotations(const std::filesystem::path& path, std::size_t image_id = 0);
void write_annotations(const std::filesystem::path& path, std::span<const GroundTruthBox> truths);

struct Sample {
  std::string name;
  Image image;
  std::vector<GroundTruthBox> truths;
};

// `count` scenes; scene i uses seed mix_seed(base.seed, i) and image_id i.
std::vector<Sample> synthesize(const SceneSpec& base, std::size_t count);

// Layout: <dir>/images/<name>.ppm and <dir>/labels/<name>.txt.
void write_dataset(const std::filesystem::path& dir, std::span<const Sample> samples);
std::vector<Sample> load_dataset(const std::filesystem::path& dir);

}  // namespace fusenet::data
