#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "fusenet/harness.hpp"

namespace fusenet::harness {

RunConfig RunConfig::table1() { return RunConfig{}; }

RunConfig RunConfig::desk() {
  RunConfig c;
  c.set_image_size(64);
  c.epochs = 30;
  c.batch_size = 8;
  c.scene.min_size = 0.06;
  c.scene.max_size = 0.16;
  return c;
}

void RunConfig::set_image_size(std::size_t size) {
  model.image_size = size;
  scene.width = size;
  scene.height = size;
}

void RunConfig::validate() const {
  model.validate();
  scene.validate();
  if (scene.num_classes != model.num_classes) {
    throw ConfigError("scene classes (" + std::to_string(scene.num_classes) + ") differ from model classes (" +
                      std::to_string(model.num_classes) + ")");
  }
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (!(lrf > 0.0) || lrf > 1.0) throw ConfigError("lrf must be in (0, 1]");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  for (double t : {conf_threshold, eval_conf, nms_iou}) {
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("thresholds must lie in (0, 1)");
  }
  if (!(loss.obj_weight >= 0.0 && loss.cls_weight >= 0.0 && loss.box_weight >= 0.0)) {
    throw ConfigError("loss weights must be non-negative");
  }
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  std::string l = v;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (l == "1" || l == "true" || l == "yes" || l == "on") return true;
  if (l == "0" || l == "false" || l == "no" || l == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << v;
  return os.str();
}

struct Setting {
  const char* name;
  const char* help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
};

#define FN_SIZE(field)                                                                     \
  [](const RunConfig& c) { return std::to_string(c.field); },                             \
      [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_size(k, v); }
#define FN_U64(field)                                                                      \
  [](const RunConfig& c) { return std::to_string(c.field); },                             \
      [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_u64(k, v); }
#define FN_DOUBLE(field)                                                                   \
  [](const RunConfig& c) { return fmt(c.field); },                                        \
      [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_double(k, v); }
#define FN_BOOL(field)                                                                     \
  [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); },             \
      [](RunConfig& c, const std::string& k, const std::string& v) { c.field = parse_bool(k, v); }

const std::vector<Setting>& settings() {
  static const std::vector<Setting> table = {
      {"train.lr0", "initial learning rate", FN_DOUBLE(lr0)},
      {"train.lrf", "final learning rate as a fraction of lr0 (linear decay)", FN_DOUBLE(lrf)},
      {"train.momentum", "SGD momentum", FN_DOUBLE(momentum)},
      {"train.weight_decay", "L2 penalty on conv/linear weights", FN_DOUBLE(weight_decay)},
      {"train.clip_norm", "cap on the global gradient L2 norm per step (0: off)", FN_DOUBLE(clip_norm)},
      {"train.batch_size", "images per step", FN_SIZE(batch_size)},
      {"train.epochs", "training epochs", FN_SIZE(epochs)},
      {"train.seed", "model initialization and shuffling seed", FN_U64(seed)},
      {"model.image_size", "square input size (multiple of 32); also sets the scene size",
       [](const RunConfig& c) { return std::to_string(c.model.image_size); },
       [](RunConfig& c, const std::string& k, const std::string& v) { c.set_image_size(parse_size(k, v)); }},
      {"model.num_classes", "object classes (model and scenes)",
       [](const RunConfig& c) { return std::to_string(c.model.num_classes); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.num_classes = c.scene.num_classes = parse_size(k, v);
       }},
      {"model.stem_channels", "stem width", FN_SIZE(model.stem_channels)},
      {"model.stage1_channels", "stride-4 width", FN_SIZE(model.stage1_channels)},
      {"model.p3_channels", "P3 width", FN_SIZE(model.p3_channels)},
      {"model.p4_channels", "P4 width", FN_SIZE(model.p4_channels)},
      {"model.p5_channels", "P5 width", FN_SIZE(model.p5_channels)},
      {"model.depth1", "C2f blocks in backbone stage 1", FN_SIZE(model.depths.stage1)},
      {"model.depth2", "C2f blocks in backbone stage 2", FN_SIZE(model.depths.stage2)},
      {"model.depth3", "C2f blocks in backbone stage 3", FN_SIZE(model.depths.stage3)},
      {"model.depth4", "C2f blocks in backbone stage 4", FN_SIZE(model.depths.stage4)},
      {"model.head_blocks", "C2f blocks of the final fusion block", FN_SIZE(model.head_blocks)},
      {"model.fds_blocks", "C2f blocks inside each FDS", FN_SIZE(model.fds_blocks)},
      {"model.compensate_depth", "reduce backbone depth to the baseline parameter budget",
       FN_BOOL(compensate_depth)},
      {"fusion.setting", "ablation setting 0..4 (sets fmsa/fus/fds)",
       [](const RunConfig& c) { return std::to_string(c.model.fusion.setting_id()); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         const auto id = parse_size(k, v);
         if (id > 4) throw ConfigError(k + ": ablation setting must be in 0..4");
         const auto s = fusion::FusionConfig::setting(static_cast<int>(id));
         c.model.fusion.enable_fmsa = s.enable_fmsa;
         c.model.fusion.enable_fus = s.enable_fus;
         c.model.fusion.enable_fds = s.enable_fds;
       }},
      {"fusion.fmsa", "enable FMSA", FN_BOOL(model.fusion.enable_fmsa)},
      {"fusion.fus", "enable FUS (requires fmsa)", FN_BOOL(model.fusion.enable_fus)},
      {"fusion.fds", "enable FDS (requires fmsa)", FN_BOOL(model.fusion.enable_fds)},
      {"fusion.channels", "fusion width C_f", FN_SIZE(model.fusion.channels)},
      {"fusion.depth", "FMSA encoder layers", FN_SIZE(model.fusion.fmsa_depth)},
      {"fusion.heads", "attention heads", FN_SIZE(model.fusion.heads)},
      {"fusion.mlp_ratio", "MLP expansion ratio", FN_SIZE(model.fusion.mlp_ratio)},
      {"fusion.gaus_mode", "GAUS channel handling: replicate | shuffle",
       [](const RunConfig& c) {
         return std::string(c.model.fusion.gaus_mode == fusion::GausChannelMode::kReplicate ? "replicate"
                                                                                              : "shuffle");
       },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "replicate") {
           c.model.fusion.gaus_mode = fusion::GausChannelMode::kReplicate;
         } else if (v == "shuffle") {
           c.model.fusion.gaus_mode = fusion::GausChannelMode::kPixelShuffle;
         } else {
           throw ConfigError(k + ": expected replicate or shuffle, got '" + v + "'");
         }
       }},
      {"loss.box", "box loss: ciou | l1",
       [](const RunConfig& c) { return std::string(c.loss.box_loss == detector::BoxLoss::kCiou ? "ciou" : "l1"); },
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "ciou") {
           c.loss.box_loss = detector::BoxLoss::kCiou;
         } else if (v == "l1") {
           c.loss.box_loss = detector::BoxLoss::kL1;
         } else {
           throw ConfigError(k + ": expected ciou or l1, got '" + v + "'");
         }
       }},
      {"loss.obj_weight", "objectness term weight", FN_DOUBLE(loss.obj_weight)},
      {"loss.cls_weight", "class term weight", FN_DOUBLE(loss.cls_weight)},
      {"loss.box_weight", "box term weight", FN_DOUBLE(loss.box_weight)},
      {"data.path", "dataset root with train/ and val/ (empty: synthesize)",
       [](const RunConfig& c) { return c.data_path; },
       [](RunConfig& c, const std::string&, const std::string& v) { c.data_path = v; }},
      {"data.seed", "scene generator seed (shared by every run)", FN_U64(scene.seed)},
      {"data.train_scenes", "synthetic training scenes", FN_SIZE(train_scenes)},
      {"data.val_scenes", "synthetic validation scenes", FN_SIZE(val_scenes)},
      {"data.min_objects", "minimum objects per scene", FN_SIZE(scene.min_objects)},
      {"data.max_objects", "maximum objects per scene", FN_SIZE(scene.max_objects)},
      {"data.min_size", "smallest object side as a fraction of the image", FN_DOUBLE(scene.min_size)},
      {"data.max_size", "largest object side as a fraction of the image", FN_DOUBLE(scene.max_size)},
      {"data.clutter", "background texture level in [0, 1]", FN_DOUBLE(scene.clutter)},
      {"data.occlusion", "probability that an object gets an occluder", FN_DOUBLE(scene.occlusion_prob)},
      {"eval.conf", "confidence for precision/recall and rendering", FN_DOUBLE(conf_threshold)},
      {"eval.min_conf", "lowest score kept for AP", FN_DOUBLE(eval_conf)},
      {"eval.nms_iou", "NMS IoU threshold", FN_DOUBLE(nms_iou)},
      {"run.out", "output directory",
       [](const RunConfig& c) { return c.out_dir; },
       [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; }},
      {"run.threads", "worker threads (0: all cores)", FN_SIZE(threads)},
  };
  return table;
}

#undef FN_SIZE
#undef FN_U64
#undef FN_DOUBLE
#undef FN_BOOL

}  // namespace

void apply_setting(RunConfig& config, const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key), value = trim(raw_value);
  const Setting* match = nullptr;
  for (const auto& s : settings()) {
    if (key == s.name) {
      match = &s;
      break;
    }
  }
  if (!match && key.find('.') == std::string::npos) {
    for (const auto& s : settings()) {
      const std::string name = s.name;
      if (name.substr(name.find('.') + 1) != key) continue;
      if (match) throw ConfigError("setting '" + key + "' is ambiguous; use section.key");
      match = &s;
    }
  }
  if (!match) throw ConfigError("unknown setting '" + key + "'");
  match->set(config, match->name, value);
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line, section;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto comment = line.find_first_of("#;");
    if (comment != std::string::npos) line.erase(comment);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(path.string() + ":" + std::to_string(number) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(number) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    try {
      apply_setting(config, section.empty() ? key : section + "." + key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

std::string describe_settings(const RunConfig& config) {
  std::ostringstream os;
  for (const auto& s : settings()) {
    os << "  " << s.name << " = " << s.get(config) << "\n      " << s.help << "\n";
  }
  return os.str();
}

detector::ModelConfig resolve_model(const RunConfig& config) {
  return config.compensate_depth ? detector::compensate_depth(config.model) : config.model;
}

std::size_t worker_count(std::size_t requested) {
  std::size_t n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FUSENET_THREADS")) {
    std::size_t cap = 0;
    const std::string v = env;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), cap);
    if (ec == std::errc() && ptr == v.data() + v.size() && cap > 0) n = std::min(n, cap);
  }
  return std::max<std::size_t>(1, n);
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::min(std::max<std::size_t>(workers, 1), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr error;
  auto body = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= n || error) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

Datasets load_datasets(const RunConfig& config) {
  Datasets d;
  if (!config.data_path.empty()) {
    const std::filesystem::path root = config.data_path;
    d.train = data::load_dataset(root / "train");
    d.val = data::load_dataset(root / "val");
  } else {
    d.train = data::synthesize(config.scene, config.train_scenes);
    data::SceneSpec val_spec = config.scene;
    val_spec.seed = mix_seed(config.scene.seed, 0x7661'6c00);  // disjoint stream for validation
    d.val = data::synthesize(val_spec, config.val_scenes);
  }
  return d;
}

}  // namespace fusenet::harness
