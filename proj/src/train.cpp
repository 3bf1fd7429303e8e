#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "fusenet/harness.hpp"

namespace fusenet::harness {

namespace {

double to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

void round_to_float(std::span<double> values) {
  for (auto& v : values) v = to_float(v);
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string log_row(const EpochLog& e) {
  return std::to_string(e.epoch) + "," + num(e.loss) + "," + num(e.obj_loss) + "," + num(e.cls_loss) + "," +
         num(e.box_loss) + "," + num(e.lr) + "," + (e.val_map50 ? fixed(*e.val_map50, 6) : std::string());
}

// Fisher-Yates with the portable integer draw.
std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i - 1)));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::uint64_t shuffle_seed(std::uint64_t seed, std::size_t epoch) { return mix_seed(seed, 0x5348'0000 + epoch); }

nn::ParamList state_tensors(const nn::ParamList& params, const std::vector<Tensor>& momentum, const Tensor& best) {
  nn::ParamList out = params;
  for (std::size_t i = 0; i < params.size(); ++i) out.push_back({"momentum/" + params[i].name, momentum[i]});
  out.push_back({"state/best_map50", best});
  return out;
}

struct BatchContext {
  std::size_t epoch;
  std::size_t batch;
  std::uint64_t shuffle_seed;
  std::vector<std::string> names;
};

[[noreturn]] void numerical_failure(const RunConfig& config, const TrainOptions& options, const BatchContext& ctx,
                                    const std::string& what, const detector::LossBreakdown* loss) {
  std::ostringstream msg;
  msg << what << " at epoch " << ctx.epoch << ", batch " << ctx.batch << " (shuffle seed " << ctx.shuffle_seed
      << ", run seed " << config.seed << ")";
  if (options.write_outputs) {
    std::filesystem::create_directories(config.out_dir);
    const auto path = std::filesystem::path(config.out_dir) / "nan_dump.txt";
    std::ofstream os(path);
    os << "error: " << what << "\n"
       << "epoch: " << ctx.epoch << "\nbatch: " << ctx.batch << "\nshuffle_seed: " << ctx.shuffle_seed
       << "\nrun_seed: " << config.seed << "\nlr0: " << num(config.lr0) << "\nsamples:";
    for (const auto& n : ctx.names) os << " " << n;
    os << "\n";
    if (loss) {
      os << "objectness: " << num(loss->objectness) << "\nclassification: " << num(loss->classification)
         << "\nbox: " << num(loss->box) << "\n";
    }
    msg << "; diagnostics in " << path.string();
  }
  throw NumericalError(msg.str());
}

}  // namespace

TrainResult train(const RunConfig& config, const std::vector<data::Sample>& train_set,
                  const std::vector<data::Sample>& val_set, const TrainOptions& options) {
  config.validate();
  if (train_set.empty()) throw InputError("training set is empty");
  const detector::ModelConfig model_config = resolve_model(config);
  const std::uint64_t digest = model_config.digest();
  const std::filesystem::path out_dir = config.out_dir;

  TrainResult result;
  result.model = std::make_unique<detector::Detector>(model_config, config.seed);
  const nn::ParamList params = result.model->parameters();
  std::vector<Tensor> momentum;
  momentum.reserve(params.size());
  for (const auto& p : params) {
    Tensor t = p.tensor;
    round_to_float(t.mutable_data());
    momentum.emplace_back(p.tensor.shape(), 0.0);
  }
  Tensor best({1}, -1.0);
  std::size_t start_epoch = 0;
  std::vector<std::string> previous_rows;

  if (!options.resume.empty()) {
    const detector::Checkpoint ck = detector::read_checkpoint(options.resume);
    detector::restore(ck, digest, state_tensors(params, momentum, best));
    start_epoch = ck.epoch;
    const auto log_path = out_dir / "train_log.csv";
    std::ifstream in(log_path);
    std::string line;
    std::getline(in, line);  // header
    while (previous_rows.size() < start_epoch && std::getline(in, line)) previous_rows.push_back(line);
  }
  result.best_map50 = best.at(0) < 0.0 ? 0.0 : best.at(0);

  std::ofstream log;
  if (options.write_outputs) {
    std::filesystem::create_directories(out_dir);
    log.open(out_dir / "train_log.csv", std::ios::trunc);
    if (!log) throw InputError("cannot write " + (out_dir / "train_log.csv").string());
    log << kTrainLogHeader << "\n";
    for (const auto& row : previous_rows) log << row << "\n";
    log.flush();
  }

  const std::size_t n = train_set.size();
  const std::size_t batch_size = std::min(config.batch_size, n);
  for (std::size_t epoch = start_epoch; epoch < config.epochs; ++epoch) {
    if (options.stop_after && epoch >= *options.stop_after) break;
    const double progress = static_cast<double>(epoch) / static_cast<double>(config.epochs);
    const double lr = config.lr0 * ((1.0 - progress) * (1.0 - config.lrf) + config.lrf);
    const std::uint64_t sseed = shuffle_seed(config.seed, epoch);
    const auto order = shuffled(n, sseed);

    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t end = std::min(n, start + batch_size);
      BatchContext ctx{epoch, batches, sseed, {}};
      std::vector<const data::Image*> images;
      std::vector<std::vector<GroundTruthBox>> truths;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = train_set[order[i]];
        images.push_back(&s.image);
        truths.push_back(s.truths);
        ctx.names.push_back(s.name);
      }
      const detector::HeadOutput out = result.model->forward(data::batch_tensor(images));
      const detector::LossBreakdown loss = detector::compute_loss(out, truths, config.loss);
      const double value = loss.total.item();
      if (!std::isfinite(value)) numerical_failure(config, options, ctx, "non-finite loss", &loss);

      for (const auto& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
      }
      loss.total.backward();
      std::vector<std::vector<double>> grads;
      grads.reserve(params.size());
      double norm_sq = 0.0;
      for (const auto& p : params) {
        grads.push_back(p.tensor.grad());
        for (double v : grads.back()) norm_sq += v * v;
      }
      const double norm = std::sqrt(norm_sq);
      const double scale = config.clip_norm > 0.0 && norm > config.clip_norm ? config.clip_norm / norm : 1.0;
      for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i].tensor;
        std::vector<double>& g = grads[i];
        if (scale != 1.0) {
          for (auto& v : g) v *= scale;
        }
        auto pd = p.mutable_data();
        auto vd = momentum[i].mutable_data();
        const double decay = p.rank() >= 2 ? config.weight_decay : 0.0;
        for (std::size_t j = 0; j < pd.size(); ++j) {
          const double v = to_float(config.momentum * vd[j] + g[j] + decay * pd[j]);
          vd[j] = v;
          pd[j] = to_float(pd[j] - lr * v);
          if (!std::isfinite(pd[j])) {
            numerical_failure(config, options, ctx, "non-finite parameter " + params[i].name, &loss);
          }
        }
      }
      entry.loss += value;
      entry.obj_loss += loss.objectness;
      entry.cls_loss += loss.classification;
      entry.box_loss += loss.box;
      ++batches;
    }
    const double inv = 1.0 / static_cast<double>(batches);
    entry.loss *= inv;
    entry.obj_loss *= inv;
    entry.cls_loss *= inv;
    entry.box_loss *= inv;

    bool improved = false;
    if (options.validate_each_epoch && !val_set.empty()) {
      const double map50 = to_float(evaluate(*result.model, val_set, config).map50);
      entry.val_map50 = map50;
      if (map50 > best.at(0)) {
        best.mutable_data()[0] = map50;
        result.best_map50 = map50;
        improved = true;
      }
    }
    if (options.write_outputs) {
      const auto state = state_tensors(params, momentum, best);
      if (improved) detector::save_checkpoint(out_dir / "best.ckpt", digest, static_cast<std::uint32_t>(epoch + 1), state);
      detector::save_checkpoint(out_dir / "last.ckpt", digest, static_cast<std::uint32_t>(epoch + 1), state);
      log << log_row(entry) << "\n";
      log.flush();
    }
    if (options.progress) {
      *options.progress << "epoch " << epoch << "  loss " << fixed(entry.loss, 4) << " (obj " << fixed(entry.obj_loss, 4)
                        << ", cls " << fixed(entry.cls_loss, 4) << ", box " << fixed(entry.box_loss, 4) << ")  lr "
                        << num(lr);
      if (entry.val_map50) *options.progress << "  val mAP50 " << fixed(*entry.val_map50, 4);
      *options.progress << std::endl;
    }
    result.history.push_back(entry);
  }
  return result;
}

std::vector<Detection> predict(const detector::Detector& model, const std::vector<data::Sample>& samples,
                               double conf_threshold, double nms_iou, std::size_t workers) {
  // Chunking is fixed so the result does not depend on the worker count.
  constexpr std::size_t kChunk = 16;
  const std::size_t chunks = (samples.size() + kChunk - 1) / kChunk;
  std::vector<std::vector<Detection>> parts(chunks);
  parallel_for(chunks, workers, [&](std::size_t c) {
    NoGradGuard no_grad;
    const std::size_t begin = c * kChunk, end = std::min(samples.size(), begin + kChunk);
    std::vector<const data::Image*> images;
    for (std::size_t i = begin; i < end; ++i) images.push_back(&samples[i].image);
    parts[c] = detector::decode_predictions(model.forward(data::batch_tensor(images)), conf_threshold, nms_iou, begin);
  });
  std::vector<Detection> all;
  for (auto& p : parts) all.insert(all.end(), p.begin(), p.end());
  std::stable_sort(all.begin(), all.end(), [](const Detection& a, const Detection& b) {
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    if (a.score != b.score) return a.score > b.score;
    return a.class_id < b.class_id;
  });
  return all;
}

metrics::MetricsReport evaluate(const detector::Detector& model, const std::vector<data::Sample>& samples,
                                const RunConfig& config) {
  if (samples.empty()) throw InputError("evaluation dataset is empty");
  std::vector<GroundTruthBox> truths;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (auto t : samples[i].truths) {
      t.image_id = i;
      truths.push_back(t);
    }
  }
  if (truths.empty()) throw InputError("evaluation dataset has no ground-truth boxes");
  const auto dets = predict(model, samples, config.eval_conf, config.nms_iou, worker_count(config.threads));
  const auto ladder = metrics::iou_ladder();
  metrics::MetricsReport report = metrics::mean_ap(dets, truths, ladder, config.conf_threshold);
  report.params = model.parameter_count();
  report.flops = detector::count_params_flops(model.config()).flops;
  return report;
}

std::string eval_csv(const metrics::MetricsReport& report) {
  std::ostringstream os;
  os << kEvalHeader << "\n";
  for (const auto& c : report.per_class) os << c.class_id << "," << fixed(c.ap50, 6) << "," << fixed(c.ap50_95, 6) << "\n";
  os << "all," << fixed(report.map50, 6) << "," << fixed(report.map50_95, 6) << "\n";
  return os.str();
}

}  // namespace fusenet::harness
