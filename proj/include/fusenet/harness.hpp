#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fusenet/data.hpp"
#include "fusenet/detector.hpp"
#include "fusenet/grad_check.hpp"
#include "fusenet/metrics.hpp"

namespace fusenet::harness {

struct RunConfig {
  detector::ModelConfig model;
  detector::LossConfig loss;
  // Lower the backbone depth of fusion-enabled models to the baseline budget.
  bool compensate_depth = true;

  // SGD with momentum; lr decays linearly from lr0 to lr0 * lrf.
  double lr0 = 0.01;
  double lrf = 0.01;
  double momentum = 0.937;
  double weight_decay = 0.0005;
  // Global gradient L2 norm cap per step (the YOLO trainer uses 10); 0 disables.
  double clip_norm = 10.0;
  std::size_t batch_size = 6;
  std::size_t epochs = 1000;
  std::uint64_t seed = 1;

  // Dataset root holding train/ and val/; empty means synthesize from `scene`.
  std::string data_path;
  data::SceneSpec scene;
  std::size_t train_scenes = 200;
  std::size_t val_scenes = 50;

  double conf_threshold = 0.25;  // P/R operating point and render threshold
  double eval_conf = 0.001;      // detections kept for AP
  double nms_iou = 0.5;

  std::string out_dir = "runs";
  std::size_t threads = 0;  // 0: hardware concurrency, capped by FUSENET_THREADS

  // Full-scale training values (640 x 640, 1000 epochs, batch 6).
  static RunConfig table1();
  // Desk-scale toy task: 64 x 64 synthetic scenes, 30 epochs.
  static RunConfig desk();

  void set_image_size(std::size_t size);
  void validate() const;
};

// Applies one "section.key = value" setting. A bare key is accepted when it
// names exactly one setting. Throws ConfigError on unknown keys or bad values.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);
// Reads a "[section]" / "key = value" file ('#' and ';' start comments).
void apply_config_file(RunConfig& config, const std::filesystem::path& path);
// One line per setting: name, current value, description.
std::string describe_settings(const RunConfig& config);

// Model config actually built for a run (depth compensation applied).
detector::ModelConfig resolve_model(const RunConfig& config);

// Worker count: `requested` (or hardware concurrency when 0), capped by the
// FUSENET_THREADS environment variable, at least 1.
std::size_t worker_count(std::size_t requested);
// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception
// thrown is rethrown after all workers finish.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

struct Datasets {
  std::vector<data::Sample> train;
  std::vector<data::Sample> val;
};
Datasets load_datasets(const RunConfig& config);

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double obj_loss = 0.0;
  double cls_loss = 0.0;
  double box_loss = 0.0;
  double lr = 0.0;
  std::optional<double> val_map50;
};

struct TrainOptions {
  bool validate_each_epoch = true;
  // Write train_log.csv and best/last checkpoints under out_dir.
  bool write_outputs = true;
  // Stop after this many completed epochs (an interrupted run).
  std::optional<std::size_t> stop_after;
  std::filesystem::path resume;
  std::ostream* progress = nullptr;
};

struct TrainResult {
  std::unique_ptr<detector::Detector> model;
  std::vector<EpochLog> history;
  double best_map50 = 0.0;
};

constexpr const char* kTrainLogHeader = "epoch,loss,obj_loss,cls_loss,box_loss,lr,val_map50";

// Throws NumericalError on a non-finite loss or parameter, after writing
// nan_dump.txt into out_dir (when outputs are enabled).
TrainResult train(const RunConfig& config, const std::vector<data::Sample>& train_set,
                  const std::vector<data::Sample>& val_set, const TrainOptions& options = {});

std::vector<Detection> predict(const detector::Detector& model, const std::vector<data::Sample>& samples,
                               double conf_threshold, double nms_iou, std::size_t workers = 1);

metrics::MetricsReport evaluate(const detector::Detector& model, const std::vector<data::Sample>& samples,
                                const RunConfig& config);

constexpr const char* kEvalHeader = "class,AP50,AP50-90";
// Per-class rows plus an "all" summary row.
std::string eval_csv(const metrics::MetricsReport& report);

struct AblationRun {
  int setting = 0;
  std::uint64_t seed = 0;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  detector::StageDepths depths;
  metrics::MetricsReport report;
};

struct AblationRow {
  int setting = 0;
  bool fmsa = false;
  bool fus = false;
  bool fds = false;
  double precision = 0.0;
  double recall = 0.0;
  double map50 = 0.0;
  double map50_90 = 0.0;
  std::uint64_t params = 0;
  detector::StageDepths depths;
};

struct AblationResult {
  std::vector<AblationRun> runs;
  std::vector<AblationRow> rows;  // medians over seeds
  std::vector<std::uint64_t> seeds;
};

constexpr const char* kAblationHeader = "setting,fmsa,fus,fds,precision,recall,map50,map50_90,params";
constexpr const char* kAblationRunsHeader =
    "setting,fmsa,fus,fds,seed,depths,params,flops,precision,recall,map50,map50_90";

// Parameter counts of every setting, checked against the baseline. Throws
// ConfigError when a setting leaves the +-tolerance band.
std::vector<std::uint64_t> ablation_params(const RunConfig& config, double tolerance = 0.05);

// Trains and evaluates settings 0..4 for every seed; all settings share the
// same datasets. Writes ablation.csv, ablation_runs.csv and ablation.md.
AblationResult ablate(const RunConfig& config, const std::vector<std::uint64_t>& seeds,
                      std::ostream* progress = nullptr);
std::string ablation_markdown(const AblationResult& result, double conf_threshold);

struct GradCheckCase {
  std::string block;
  std::string shape;
  std::function<GradCheckReport(const GradCheckOptions&)> run;
};

// Every differentiable op and composite block at three random shapes.
std::vector<GradCheckCase> gradcheck_cases(std::uint64_t seed);

struct GradCheckRow {
  std::string block;
  std::string shape;
  GradCheckReport report;
  double millis = 0.0;
};

constexpr const char* kGradCheckHeader = "block,shape,max_rel_error,coords,passed";

std::vector<GradCheckRow> run_gradcheck(std::uint64_t seed, const GradCheckOptions& options,
                                        std::ostream* progress = nullptr);

struct BenchRow {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  double latency_ms = 0.0;
};

constexpr const char* kBenchHeader = "config,params,flops,params_delta,flops_delta";

// Baseline (setting 0) and full fusion (setting 4) at config.model.image_size.
std::vector<BenchRow> bench(const RunConfig& config, std::size_t runs = 30, std::size_t warmup = 5);

// Probe layers for cost accounting: a 3x3 conv 3->16 on 64x64 and one
// multi-head attention layer.
struct ProbeCost {
  std::uint64_t params = 0;
  std::uint64_t analytic_flops = 0;
  std::uint64_t counted_flops = 0;
};
ProbeCost probe_conv_cost();
ProbeCost probe_attention_cost(std::size_t tokens, std::size_t channels, std::size_t heads);

// Pixel rectangle [x0, x1] x [y0, y1] (inclusive) covered by a normalized box.
struct PixelRect {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;
};
PixelRect pixel_rect(const Box& box, std::size_t width, std::size_t height);

// Draws one-pixel class-colored outlines for each detection.
data::Image draw_detections(const data::Image& image, const std::vector<Detection>& detections);

}  // namespace fusenet::harness
