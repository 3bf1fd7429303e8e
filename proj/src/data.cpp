#include "fusenet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "fusenet/errors.hpp"
#include "fusenet/rng.hpp"

namespace fusenet::data {

namespace fs = std::filesystem;

Tensor to_tensor(const Image& image) {
  const std::size_t hw = image.width * image.height;
  std::vector<double> v(3 * hw);
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t c = 0; c < 3; ++c) v[c * hw + p] = image.rgb[p * 3 + c] / 255.0;
  }
  return Tensor({3, image.height, image.width}, std::move(v));
}

Tensor batch_tensor(std::span<const Image* const> images) {
  if (images.empty()) throw InputError("batch_tensor: empty batch");
  const std::size_t w = images[0]->width, h = images[0]->height, hw = w * h;
  std::vector<double> v(images.size() * 3 * hw);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto& img = *images[b];
    if (img.width != w || img.height != h) throw InputError("batch_tensor: images differ in size");
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t c = 0; c < 3; ++c) v[(b * 3 + c) * hw + p] = img.rgb[p * 3 + c] / 255.0;
    }
  }
  return Tensor({images.size(), 3, h, w}, std::move(v));
}

void write_ppm(const fs::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  if (!out) throw InputError("failed writing " + path.string());
}

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      if (!tok.empty()) break;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

}  // namespace

Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open image " + path.string());
  if (header_token(in) != "P6") throw InputError(path.string() + " is not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(header_token(in));
    h = std::stoul(header_token(in));
    maxval = std::stoul(header_token(in));
  } catch (const std::exception&) {
    throw InputError("malformed PPM header in " + path.string());
  }
  if (w == 0 || h == 0 || maxval != 255) throw InputError("unsupported PPM geometry in " + path.string());
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.rgb.size()) throw InputError("truncated PPM " + path.string());
  return img;
}

void SceneSpec::validate() const {
  if (width == 0 || height == 0) throw ConfigError("scene size must be positive");
  if (!(min_size > 0.0) || min_size > max_size || max_size > 1.0) {
    throw ConfigError("object size range [" + std::to_string(min_size) + ", " + std::to_string(max_size) +
                      "] must satisfy 0 < min <= max <= 1 (fraction of the image side)");
  }
  if (min_objects > max_objects) throw ConfigError("object count range is empty");
  if (num_classes == 0) throw ConfigError("scene needs at least one class");
  if (clutter < 0.0 || clutter > 1.0) throw ConfigError("clutter must be in [0, 1]");
  if (occlusion_prob < 0.0 || occlusion_prob > 1.0) throw ConfigError("occlusion probability must be in [0, 1]");
}

ClassStyle class_style(int class_id) {
  static constexpr std::uint8_t palette[][3] = {{225, 40, 40},  {40, 205, 60},  {50, 90, 235},  {235, 215, 40},
                                                {210, 50, 210}, {40, 210, 215}, {240, 140, 30}, {130, 60, 200}};
  const auto& p = palette[static_cast<std::size_t>(class_id) % 8];
  return ClassStyle{p[0], p[1], p[2], class_id % 3};
}

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

// Pixel centers (px + 0.5, py + 0.5) inside the shape are painted; the shape
// is contained in [x0, x0 + w] x [y0, y0 + h].
bool inside_shape(int shape, double x, double y, double x0, double y0, double w, double h) {
  const double u = (x - x0) / w, v = (y - y0) / h;
  if (u < 0.0 || u > 1.0 || v < 0.0 || v > 1.0) return false;
  switch (shape) {
    case 0: {
      const double du = u - 0.5, dv = v - 0.5;
      return du * du + dv * dv <= 0.25;
    }
    case 1:
      return true;
    default:
      // Apex at top middle, base along the bottom edge.
      return std::abs(u - 0.5) <= 0.5 * v;
  }
}

}  // namespace

Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t W = spec.width, H = spec.height;
  Scene scene;
  scene.image = Image(W, H);

  // Background: base gray with a tint, low-frequency waves and noise scaled by
  // the clutter level.
  const double gray = rng.uniform(70.0, 170.0);
  double base[3];
  for (auto& b : base) b = gray + rng.uniform(-20.0, 20.0);
  struct Wave {
    double fx, fy, phase, amp;
  };
  Wave waves[3];
  for (auto& wv : waves) {
    wv.fx = rng.uniform(0.05, 0.5);
    wv.fy = rng.uniform(0.05, 0.5);
    wv.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    wv.amp = rng.uniform(5.0, 20.0) * spec.clutter;
  }
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      double tex = 0.0;
      for (const auto& wv : waves) tex += wv.amp * std::sin(wv.fx * x + wv.fy * y + wv.phase);
      const double noise = spec.clutter > 0.0 ? rng.uniform(-20.0, 20.0) * spec.clutter : 0.0;
      for (std::size_t c = 0; c < 3; ++c) scene.image.at(x, y, c) = to_byte(base[c] + tex + noise);
    }
  }
  // Distractor specks in neutral tones.
  const auto specks = static_cast<std::size_t>(std::lround(spec.clutter * 12.0));
  for (std::size_t i = 0; i < specks; ++i) {
    const auto sw = static_cast<std::size_t>(rng.integer(1, 3));
    const auto sh = static_cast<std::size_t>(rng.integer(1, 3));
    const auto sx = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(W - std::min(W, sw))));
    const auto sy = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(H - std::min(H, sh))));
    const double tone = rng.uniform(30.0, 230.0);
    for (std::size_t y = sy; y < std::min(H, sy + sh); ++y) {
      for (std::size_t x = sx; x < std::min(W, sx + sw); ++x) {
        for (std::size_t c = 0; c < 3; ++c) scene.image.at(x, y, c) = to_byte(tone);
      }
    }
  }

  const auto count = static_cast<std::size_t>(
      rng.integer(static_cast<std::int64_t>(spec.min_objects), static_cast<std::int64_t>(spec.max_objects)));
  for (std::size_t i = 0; i < count; ++i) {
    const int cls = static_cast<int>(rng.integer(0, static_cast<std::int64_t>(spec.num_classes) - 1));
    const double u = rng.uniform();
    const double side = spec.min_size + (spec.max_size - spec.min_size) * u * u;
    const double aspect = rng.uniform(0.75, 1.33);
    const double w = side * static_cast<double>(W);
    const double h = std::min(side * aspect, spec.max_size) * static_cast<double>(H);
    const double x0 = rng.uniform(0.0, static_cast<double>(W) - w);
    const double y0 = rng.uniform(0.0, static_cast<double>(H) - h);
    const ClassStyle style = class_style(cls);
    const double jitter[3] = {rng.uniform(-25.0, 25.0), rng.uniform(-25.0, 25.0), rng.uniform(-25.0, 25.0)};
    const std::uint8_t color[3] = {to_byte(style.r + jitter[0]), to_byte(style.g + jitter[1]),
                                   to_byte(style.b + jitter[2])};

    const auto px0 = static_cast<std::size_t>(std::max(0.0, std::floor(x0)));
    const auto py0 = static_cast<std::size_t>(std::max(0.0, std::floor(y0)));
    const auto px1 = std::min(W, static_cast<std::size_t>(std::ceil(x0 + w)));
    const auto py1 = std::min(H, static_cast<std::size_t>(std::ceil(y0 + h)));
    for (std::size_t y = py0; y < py1; ++y) {
      for (std::size_t x = px0; x < px1; ++x) {
        if (inside_shape(style.shape, x + 0.5, y + 0.5, x0, y0, w, h)) {
          for (std::size_t c = 0; c < 3; ++c) scene.image.at(x, y, c) = color[c];
        }
      }
    }

    GroundTruthBox truth;
    truth.class_id = cls;
    truth.box = Box{(x0 + 0.5 * w) / static_cast<double>(W), (y0 + 0.5 * h) / static_cast<double>(H),
                    w / static_cast<double>(W), h / static_cast<double>(H)};
    if (rng.bernoulli(spec.occlusion_prob)) {
      // Cover 30-60% of the box from one side, clipped to the box.
      truth.occluded = true;
      const double frac = rng.uniform(0.3, 0.6);
      const int side_id = static_cast<int>(rng.integer(0, 3));
      double ox0 = x0, oy0 = y0, ox1 = x0 + w, oy1 = y0 + h;
      if (side_id == 0) ox1 = x0 + frac * w;
      if (side_id == 1) ox0 = x0 + (1.0 - frac) * w;
      if (side_id == 2) oy1 = y0 + frac * h;
      if (side_id == 3) oy0 = y0 + (1.0 - frac) * h;
      const std::uint8_t tone = to_byte(rng.uniform(60.0, 200.0));
      for (std::size_t y = py0; y < py1; ++y) {
        for (std::size_t x = px0; x < px1; ++x) {
          const double cx = x + 0.5, cy = y + 0.5;
          if (cx >= ox0 && cx <= ox1 && cy >= oy0 && cy <= oy1) {
            for (std::size_t c = 0; c < 3; ++c) scene.image.at(x, y, c) = tone;
          }
        }
      }
    }
    scene.truths.push_back(truth);
  }
  return scene;
}

std::vector<GroundTruthBox> read_annotations(const fs::path& path, std::size_t image_id) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open annotation file " + path.string());
  std::vector<GroundTruthBox> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    GroundTruthBox t;
    t.image_id = image_id;
    if (!(fields >> t.class_id >> t.box.cx >> t.box.cy >> t.box.w >> t.box.h)) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": expected 'class_id cx cy w h'");
    }
    if (t.class_id < 0) throw InputError(path.string() + ":" + std::to_string(line_no) + ": negative class id");
    if (!(t.box.w > 0.0) || !(t.box.h > 0.0) || t.box.w > 1.0 || t.box.h > 1.0) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": degenerate box (w, h must be in (0, 1])");
    }
    out.push_back(t);
  }
  return out;
}

void write_annotations(const fs::path& path, std::span<const GroundTruthBox> truths) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << std::setprecision(9);
  for (const auto& t : truths) {
    out << t.class_id << ' ' << t.box.cx << ' ' << t.box.cy << ' ' << t.box.w << ' ' << t.box.h << '\n';
  }
}

std::vector<Sample> synthesize(const SceneSpec& base, std::size_t count) {
  base.validate();
  std::vector<Sample> samples;
  samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SceneSpec spec = base;
    spec.seed = mix_seed(base.seed, i);
    Scene scene = generate_scene(spec);
    for (auto& t : scene.truths) t.image_id = i;
    std::ostringstream name;
    name << std::setw(5) << std::setfill('0') << i;
    samples.push_back(Sample{name.str(), std::move(scene.image), std::move(scene.truths)});
  }
  return samples;
}

void write_dataset(const fs::path& dir, std::span<const Sample> samples) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels");
  for (const auto& s : samples) {
    write_ppm(dir / "images" / (s.name + ".ppm"), s.image);
    write_annotations(dir / "labels" / (s.name + ".txt"), s.truths);
  }
}

std::vector<Sample> load_dataset(const fs::path& dir) {
  const fs::path images = dir / "images";
  if (!fs::is_directory(images)) throw InputError("dataset directory " + dir.string() + " has no images/ folder");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.path().extension() == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < files.size(); ++i) {
    Sample s;
    s.name = files[i].stem().string();
    s.image = read_ppm(files[i]);
    const fs::path label = dir / "labels" / (s.name + ".txt");
    if (fs::exists(label)) s.truths = read_annotations(label, i);
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace fusenet::data
