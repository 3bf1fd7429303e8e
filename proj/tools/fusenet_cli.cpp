// fusenet: train, evaluate, ablate, gradient-check, benchmark and render the
// fusion detector.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fusenet/harness.hpp"

namespace {

using namespace fusenet;
using harness::RunConfig;

struct CommonFlags {
  std::string profile = "table1";
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> image_size;
  std::optional<std::size_t> epochs;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--profile", f.profile, "base settings: table1 (640x640, 1000 epochs) or desk (64x64 toy task)")
      ->check(CLI::IsMember({"table1", "desk"}));
  cmd->add_option("--config", f.config_path, "INI-style file of [section] key = value settings");
  cmd->add_option("--set", f.sets, "override one setting, key=value (repeatable)");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--image-size", f.image_size, "square input size (multiple of 32)");
  cmd->add_option("--epochs", f.epochs, "training epochs");
  cmd->add_option("--out", f.out, "output directory");
}

RunConfig build_config(const CommonFlags& f) {
  RunConfig c = f.profile == "desk" ? RunConfig::desk() : RunConfig::table1();
  if (!f.config_path.empty()) harness::apply_config_file(c, f.config_path);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    harness::apply_setting(c, s.substr(0, eq), s.substr(eq + 1));
  }
  if (f.seed) c.seed = *f.seed;
  if (f.image_size) c.set_image_size(*f.image_size);
  if (f.epochs) c.epochs = *f.epochs;
  if (f.out) c.out_dir = *f.out;
  c.validate();
  return c;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw InputError("cannot write " + path.string());
  os << text;
}

std::unique_ptr<detector::Detector> load_model(const RunConfig& c, const std::string& checkpoint) {
  const auto mc = harness::resolve_model(c);
  auto model = std::make_unique<detector::Detector>(mc, c.seed);
  detector::restore(detector::read_checkpoint(checkpoint), mc.digest(), model->parameters());
  return model;
}

void print_report(const metrics::MetricsReport& r) {
  std::cout << "class  truths  AP50    AP50-90  P       R\n";
  for (const auto& c : r.per_class) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-6d %-7zu %.4f  %.4f   %.4f  %.4f\n", c.class_id, c.truths, c.ap50, c.ap50_95,
                  c.precision, c.recall);
    std::cout << buf;
  }
  std::cout << "all    mAP50 " << pct(r.map50) << "  mAP50-90 " << pct(r.map50_95) << "  P " << pct(r.precision)
            << "  R " << pct(r.recall) << "  (P/R at conf " << r.conf_threshold << ", IoU 0.5)\n"
            << "params " << r.params << "  FLOPs " << r.flops << "\n";
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--seeds expects a comma-separated list of integers, got '" + text + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("--seeds is empty");
  return seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fusenet: multi-scale attention fusion detector toolkit"};
  app.require_subcommand(1);
  app.footer("Exit codes: 0 success, 1 usage/validation error, 2 numerical failure (NaN, failed gradient check).\n"
             "FUSENET_THREADS caps worker threads. Settings (section.key, use with --set or a config file):\n" +
             harness::describe_settings(RunConfig::table1()) +
             "\nCSV schemas:\n"
             "  train_log.csv      " + std::string(harness::kTrainLogHeader) + "\n"
             "  eval.csv           " + harness::kEvalHeader + "\n"
             "  ablation.csv       " + harness::kAblationHeader + "\n"
             "  ablation_runs.csv  " + harness::kAblationRunsHeader + "\n"
             "  gradcheck.csv      " + harness::kGradCheckHeader + "\n"
             "  bench.csv          " + harness::kBenchHeader + "\n");

  CommonFlags flags;

  auto* train = app.add_subcommand("train", "train a detector; writes train_log.csv, best.ckpt, last.ckpt");
  add_common(train, flags);
  std::string resume;
  std::optional<std::size_t> stop_after;
  train->add_option("--resume", resume, "continue from a last.ckpt of the same configuration");
  train->add_option("--stop-after", stop_after, "stop after this many epochs (resumable later)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint; writes eval.csv");
  add_common(eval, flags);
  std::string checkpoint, data_dir;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--data", data_dir, "dataset directory with images/ and labels/ (default: synthetic val set)");

  auto* ablate = app.add_subcommand("ablate", "train settings 0..4 over seeds; writes ablation.{csv,md}");
  add_common(ablate, flags);
  std::string seeds_text = "1,2,3,4,5";
  ablate->add_option("--seeds", seeds_text, "comma-separated seed set");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op and block");
  add_common(gradcheck, flags);
  double epsilon = 1e-5, tolerance = 1e-4;
  std::size_t max_coords = 0;
  gradcheck->add_option("--epsilon", epsilon, "central difference step");
  gradcheck->add_option("--tolerance", tolerance, "max relative error");
  gradcheck->add_option("--max-coords", max_coords, "coordinates checked per input (0: all)");

  auto* bench = app.add_subcommand("bench", "parameter/FLOP counts and forward latency, baseline vs full");
  add_common(bench, flags);
  std::size_t runs = 30, warmup = 5;
  bench->add_option("--runs", runs, "timed forward passes");
  bench->add_option("--warmup", warmup, "untimed warm-up passes");

  auto* render = app.add_subcommand("render", "draw predicted boxes on a PPM image");
  add_common(render, flags);
  std::string image_path, output_path;
  std::optional<double> conf;
  render->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  render->add_option("--image", image_path, "input PPM (P6)")->required();
  render->add_option("--conf", conf, "score threshold (default eval.conf)");
  render->add_option("--output", output_path, "output PPM (default <out>/render.ppm)");

  auto* gen = app.add_subcommand("gen-data", "write synthetic train/ and val/ datasets to --out");
  add_common(gen, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const RunConfig config = build_config(flags);
    const std::filesystem::path out = config.out_dir;

    if (*train) {
      const auto data = harness::load_datasets(config);
      harness::TrainOptions opts;
      opts.resume = resume;
      opts.stop_after = stop_after;
      opts.progress = &std::cout;
      const auto result = harness::train(config, data.train, data.val, opts);
      std::cout << "best val mAP50 " << pct(result.best_map50) << "; outputs in " << out.string() << "\n";
    } else if (*eval) {
      const auto model = load_model(config, checkpoint);
      const auto samples = data_dir.empty() ? harness::load_datasets(config).val : data::load_dataset(data_dir);
      const auto report = harness::evaluate(*model, samples, config);
      print_report(report);
      write_file(out / "eval.csv", harness::eval_csv(report));
    } else if (*ablate) {
      const auto result = harness::ablate(config, parse_seeds(seeds_text), &std::cout);
      std::cout << "\n" << harness::ablation_markdown(result, config.conf_threshold);
      const double s0 = result.rows[0].map50, s1 = result.rows[1].map50, s3 = result.rows[3].map50,
                   s4 = result.rows[4].map50;
      std::cout << "\nsetting 4 vs 0: " << pct(s4) << " vs " << pct(s0) << (s4 >= s0 ? " (holds)" : " (does not hold)")
                << "\nsetting 3 vs 1: " << pct(s3) << " vs " << pct(s1)
                << (s3 >= s1 ? " (holds)" : " (warning: does not hold)") << "\n";
    } else if (*gradcheck) {
      GradCheckOptions opts;
      opts.epsilon = epsilon;
      opts.tolerance = tolerance;
      opts.max_coords_per_input = max_coords;
      opts.seed = config.seed;
      const auto rows = harness::run_gradcheck(config.seed, opts, &std::cout);
      std::ostringstream csv;
      csv << harness::kGradCheckHeader << "\n";
      std::vector<std::string> failed;
      double total_ms = 0.0;
      for (const auto& r : rows) {
        char err[32];
        std::snprintf(err, sizeof(err), "%.6e", r.report.max_relative_error);
        csv << r.block << "," << r.shape << "," << err << "," << r.report.coordinates_checked << ","
            << (r.report.passed ? 1 : 0) << "\n";
        total_ms += r.millis;
        if (!r.report.passed) failed.push_back(r.block + " (" + r.shape + ")");
      }
      write_file(out / "gradcheck.csv", csv.str());
      std::cout << rows.size() << " checks, " << failed.size() << " failed, " << total_ms / 1000.0 << " s\n";
      if (!failed.empty()) {
        std::cerr << "gradient check failed for:";
        for (const auto& f : failed) std::cerr << " " << f;
        std::cerr << "\n";
        return 2;
      }
    } else if (*bench) {
      const auto rows = harness::bench(config, runs, warmup);
      const auto conv = harness::probe_conv_cost();
      const auto attn = harness::probe_attention_cost(64, 32, 4);
      std::ostringstream csv;
      csv << harness::kBenchHeader << "\n";
      const double p0 = static_cast<double>(rows[0].params), f0 = static_cast<double>(rows[0].flops);
      std::cout << "image size " << config.model.image_size << ", median of " << runs << " runs after " << warmup
                << " warm-up\n";
      for (const auto& r : rows) {
        char buf[200];
        std::snprintf(buf, sizeof(buf), "%-9s params %10llu (%+.2f%%)  FLOPs %14llu (%+.2f%%)  latency %.3f ms\n",
                      r.name.c_str(), static_cast<unsigned long long>(r.params), 100.0 * (r.params - p0) / p0,
                      static_cast<unsigned long long>(r.flops), 100.0 * (r.flops - f0) / f0, r.latency_ms);
        std::cout << buf;
        std::snprintf(buf, sizeof(buf), "%s,%llu,%llu,%+.4f%%,%+.4f%%\n", r.name.c_str(),
                      static_cast<unsigned long long>(r.params), static_cast<unsigned long long>(r.flops),
                      100.0 * (r.params - p0) / p0, 100.0 * (r.flops - f0) / f0);
        csv << buf;
      }
      std::cout << "probe conv 3->16 3x3 @64x64: params " << conv.params << ", FLOPs analytic " << conv.analytic_flops
                << " counted " << conv.counted_flops << "\n"
                << "probe attention N=64 C=32 h=4: params " << attn.params << ", FLOPs analytic "
                << attn.analytic_flops << " counted " << attn.counted_flops << "\n";
      write_file(out / "bench.csv", csv.str());
    } else if (*render) {
      const auto model = load_model(config, checkpoint);
      const data::Image image = data::read_ppm(image_path);
      data::Sample sample{"render", image, {}};
      const auto dets =
          harness::predict(*model, {sample}, conf.value_or(config.conf_threshold), config.nms_iou, 1);
      const std::filesystem::path target = output_path.empty() ? out / "render.ppm" : std::filesystem::path(output_path);
      if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
      data::write_ppm(target, harness::draw_detections(image, dets));
      std::ostringstream side;
      side << "class score x0 y0 x1 y1\n";
      for (const auto& d : dets) {
        const auto r = harness::pixel_rect(d.box, image.width, image.height);
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%d %.4f %d %d %d %d\n", d.class_id, d.score, r.x0, r.y0, r.x1, r.y1);
        side << buf;
      }
      auto side_path = target;
      side_path.replace_extension(".txt");
      write_file(side_path, side.str());
      std::cout << dets.size() << " boxes drawn to " << target.string() << "\n";
    } else if (*gen) {
      const auto data = harness::load_datasets(config);
      data::write_dataset(out / "train", data.train);
      data::write_dataset(out / "val", data.val);
      std::cout << data.train.size() << " train and " << data.val.size() << " val scenes written to " << out.string()
                << "\n";
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
