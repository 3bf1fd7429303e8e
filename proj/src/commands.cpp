#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>

#include "fusenet/harness.hpp"
#include "fusenet/ops.hpp"

namespace fusenet::harness {

namespace {

std::string fixed(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string depth_string(const detector::StageDepths& d) {
  return std::to_string(d.stage1) + "-" + std::to_string(d.stage2) + "-" + std::to_string(d.stage3) + "-" +
         std::to_string(d.stage4);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

RunConfig with_setting(const RunConfig& config, int setting) {
  RunConfig c = config;
  const auto s = fusion::FusionConfig::setting(setting);
  c.model.fusion.enable_fmsa = s.enable_fmsa;
  c.model.fusion.enable_fus = s.enable_fus;
  c.model.fusion.enable_fds = s.enable_fds;
  return c;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw InputError("cannot write " + path.string());
  os << text;
}

}  // namespace

std::vector<std::uint64_t> ablation_params(const RunConfig& config, double tolerance) {
  std::vector<std::uint64_t> params;
  for (int s = 0; s <= 4; ++s) {
    params.push_back(detector::Detector(resolve_model(with_setting(config, s)), 0).parameter_count());
  }
  const auto base = static_cast<double>(params[0]);
  for (int s = 1; s <= 4; ++s) {
    const double rel = (static_cast<double>(params[s]) - base) / base;
    if (std::abs(rel) > tolerance) {
      throw ConfigError("setting " + std::to_string(s) + " has " + std::to_string(params[s]) + " parameters, " +
                        fixed(100.0 * rel, 2) + "% from the baseline's " + std::to_string(params[0]) +
                        " (allowed +-" + fixed(100.0 * tolerance, 1) + "%)");
    }
  }
  return params;
}

AblationResult ablate(const RunConfig& config, const std::vector<std::uint64_t>& seeds, std::ostream* progress) {
  config.validate();
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  const auto params = ablation_params(config);
  const Datasets data = load_datasets(config);

  AblationResult result;
  result.seeds = seeds;
  result.runs.resize(5 * seeds.size());
  std::mutex mu;
  parallel_for(result.runs.size(), worker_count(config.threads), [&](std::size_t job) {
    const int setting = static_cast<int>(job / seeds.size());
    RunConfig c = with_setting(config, setting);
    c.seed = seeds[job % seeds.size()];
    TrainOptions opts;
    opts.validate_each_epoch = false;
    opts.write_outputs = false;
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult trained = train(c, data.train, data.val, opts);
    AblationRun run;
    run.setting = setting;
    run.seed = c.seed;
    run.report = evaluate(*trained.model, data.val, c);
    run.params = run.report.params;
    run.flops = run.report.flops;
    run.depths = trained.model->config().depths;
    result.runs[job] = run;
    if (progress) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::lock_guard lock(mu);
      *progress << "setting " << setting << " seed " << c.seed << "  mAP50 " << fixed(run.report.map50, 4)
                << "  mAP50-90 " << fixed(run.report.map50_95, 4) << "  loss " << fixed(trained.history.front().loss, 3)
                << " -> " << fixed(trained.history.back().loss, 3) << "  (" << fixed(secs, 1) << " s)" << std::endl;
    }
  });

  for (int s = 0; s <= 4; ++s) {
    std::vector<double> p, r, m50, m5090;
    AblationRow row;
    row.setting = s;
    const auto f = fusion::FusionConfig::setting(s);
    row.fmsa = f.enable_fmsa;
    row.fus = f.enable_fus;
    row.fds = f.enable_fds;
    row.params = params[static_cast<std::size_t>(s)];
    for (const auto& run : result.runs) {
      if (run.setting != s) continue;
      p.push_back(run.report.precision);
      r.push_back(run.report.recall);
      m50.push_back(run.report.map50);
      m5090.push_back(run.report.map50_95);
      row.depths = run.depths;
    }
    row.precision = median(p);
    row.recall = median(r);
    row.map50 = median(m50);
    row.map50_90 = median(m5090);
    result.rows.push_back(row);
  }

  const std::filesystem::path out = config.out_dir;
  std::filesystem::create_directories(out);
  std::ostringstream rows, runs;
  rows << kAblationHeader << "\n";
  for (const auto& r : result.rows) {
    rows << r.setting << "," << r.fmsa << "," << r.fus << "," << r.fds << "," << fixed(r.precision, 6) << ","
         << fixed(r.recall, 6) << "," << fixed(r.map50, 6) << "," << fixed(r.map50_90, 6) << "," << r.params << "\n";
  }
  runs << kAblationRunsHeader << "\n";
  for (const auto& r : result.runs) {
    const auto f = fusion::FusionConfig::setting(r.setting);
    runs << r.setting << "," << f.enable_fmsa << "," << f.enable_fus << "," << f.enable_fds << "," << r.seed << ","
         << depth_string(r.depths) << "," << r.params << "," << r.flops << "," << fixed(r.report.precision, 6) << ","
         << fixed(r.report.recall, 6) << "," << fixed(r.report.map50, 6) << "," << fixed(r.report.map50_95, 6)
         << "\n";
  }
  write_text(out / "ablation.csv", rows.str());
  write_text(out / "ablation_runs.csv", runs.str());
  write_text(out / "ablation.md", ablation_markdown(result, config.conf_threshold));
  return result;
}

std::string ablation_markdown(const AblationResult& result, double conf_threshold) {
  // Published full-scale mAP50 (VisDrone2019, 640 x 640, 1000 epochs) per setting.
  static const double kReference[5] = {37.3, 37.9, 38.3, 39.9, 41.7};
  auto mark = [](bool on) { return on ? "x" : "-"; };
  std::ostringstream os;
  os << "| No. | FMSA | FUS | FDS | P | R | mAP50 | mAP50-90 | Params | dParams | Depths | Ref. mAP50 |\n"
     << "|---|---|---|---|---|---|---|---|---|---|---|---|\n";
  const auto base = static_cast<double>(result.rows.empty() ? 1 : result.rows.front().params);
  for (const auto& r : result.rows) {
    os << "| " << r.setting << " | " << mark(r.fmsa) << " | " << mark(r.fus) << " | " << mark(r.fds) << " | "
       << fixed(100.0 * r.precision, 1) << " | " << fixed(100.0 * r.recall, 1) << " | " << fixed(100.0 * r.map50, 1)
       << " | " << fixed(100.0 * r.map50_90, 1) << " | " << r.params << " | "
       << fixed(100.0 * (static_cast<double>(r.params) - base) / base, 2) << "% | " << depth_string(r.depths)
       << " | " << fixed(kReference[r.setting], 1) << " |\n";
  }
  os << "\nMedians over seeds {";
  for (std::size_t i = 0; i < result.seeds.size(); ++i) os << (i ? ", " : "") << result.seeds[i];
  os << "}. P and R at confidence " << fixed(conf_threshold, 2)
     << " and IoU 0.5; mAP50-90 averages IoU 0.50:0.05:0.95. Ref. mAP50 is the published full-scale VisDrone2019 "
        "value, shown for direction only.\n";
  return os.str();
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

// sum(out * W) with W drawn from a fixed seed, so every call sees the same W.
Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, random_tensor(out.shape(), rng)));
}

std::vector<Tensor> module_inputs(const Tensor& x, const nn::Module& m) {
  std::vector<Tensor> in{x};
  for (const auto& p : m.parameters()) in.push_back(p.tensor);
  return in;
}

std::string dims(std::initializer_list<std::size_t> d) {
  std::string s;
  for (auto v : d) s += (s.empty() ? "" : "x") + std::to_string(v);
  return s;
}

template <typename Fn>
GradCheckCase op_case(const std::string& name, const std::string& shape, std::vector<Tensor> inputs, Fn fn,
                      std::uint64_t wseed) {
  return {name, shape, [inputs, fn, wseed](const GradCheckOptions& o) {
            return grad_check([&](const std::vector<Tensor>& in) { return weighted_sum(fn(in), wseed); }, inputs, o);
          }};
}

template <typename M, typename Fwd>
GradCheckCase module_case(const std::string& name, const std::string& shape, std::shared_ptr<M> module, Tensor x,
                          Fwd fwd, std::uint64_t wseed) {
  return {name, shape, [module, x, fwd, wseed](const GradCheckOptions& o) {
            return grad_check(
                [&](const std::vector<Tensor>& in) { return weighted_sum(fwd(*module, in[0]), wseed); },
                module_inputs(x, *module), o);
          }};
}

// Zero-initialized residual outputs would make the gradients behind them
// vanish; refill them so every weight is actually exercised.
void fill_zero_parameters(const nn::Module& module, std::uint64_t seed) {
  Rng rng(seed);
  for (auto p : module.parameters()) {
    auto v = p.tensor.mutable_data();
    if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) {
      for (auto& x : v) x = rng.uniform(-0.5, 0.5);
    }
  }
}

}  // namespace

std::vector<GradCheckCase> gradcheck_cases(std::uint64_t seed) {
  std::vector<GradCheckCase> cases;
  Rng rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
  };
  for (int k = 0; k < 3; ++k) {
    const std::uint64_t ws = mix_seed(seed, 100 + k);
    const std::size_t b = pick(1, 2), n = pick(2, 5), c = pick(2, 5);
    const std::string s3 = dims({b, n, c});

    cases.push_back(op_case("add", s3, {random_tensor({b, n, c}, rng), random_tensor({c}, rng)},
                            [](const auto& in) { return add(in[0], in[1]); }, ws));
    cases.push_back(op_case("sub", s3, {random_tensor({b, n, c}, rng), random_tensor({n, c}, rng)},
                            [](const auto& in) { return sub(in[0], in[1]); }, ws));
    cases.push_back(op_case("mul", s3, {random_tensor({b, n, c}, rng), random_tensor({c}, rng)},
                            [](const auto& in) { return mul(in[0], in[1]); }, ws));
    cases.push_back(op_case("div", s3, {random_tensor({b, n, c}, rng), random_tensor({b, n, c}, rng, 0.5, 2.0)},
                            [](const auto& in) { return div(in[0], in[1]); }, ws));
    cases.push_back(op_case("minimum_maximum", s3, {random_tensor({b, n, c}, rng), random_tensor({b, n, c}, rng)},
                            [](const auto& in) { return add(minimum(in[0], in[1]), scale(maximum(in[0], in[1]), 0.5)); },
                            ws));
    cases.push_back(op_case("scale_add_scalar", s3, {random_tensor({b, n, c}, rng)},
                            [](const auto& in) { return add_scalar(scale(in[0], -1.7), 0.3); }, ws));
    cases.push_back(op_case("silu", s3, {random_tensor({b, n, c}, rng, -3, 3)},
                            [](const auto& in) { return silu(in[0]); }, ws));
    cases.push_back(op_case("sigmoid", s3, {random_tensor({b, n, c}, rng, -3, 3)},
                            [](const auto& in) { return sigmoid(in[0]); }, ws));
    cases.push_back(op_case("exp", s3, {random_tensor({b, n, c}, rng)}, [](const auto& in) { return exp(in[0]); }, ws));
    cases.push_back(op_case("log", s3, {random_tensor({b, n, c}, rng, 0.2, 3.0)},
                            [](const auto& in) { return log(in[0]); }, ws));
    cases.push_back(op_case("sqrt", s3, {random_tensor({b, n, c}, rng, 0.2, 3.0)},
                            [](const auto& in) { return sqrt(in[0]); }, ws));
    cases.push_back(op_case("square", s3, {random_tensor({b, n, c}, rng)},
                            [](const auto& in) { return square(in[0]); }, ws));
    cases.push_back(op_case("abs", s3, {random_tensor({b, n, c}, rng, 0.1, 1.0)},
                            [](const auto& in) { return abs(scale(in[0], -1.0)); }, ws));
    cases.push_back(op_case("atan", s3, {random_tensor({b, n, c}, rng, -2, 2)},
                            [](const auto& in) { return atan(in[0]); }, ws));
    {
      Tensor targets = random_tensor({b, n, c}, rng, 0.0, 1.0);
      cases.push_back(op_case("bce_with_logits", s3, {random_tensor({b, n, c}, rng, -3, 3)},
                              [targets](const auto& in) { return bce_with_logits(in[0], targets); }, ws));
    }
    cases.push_back(op_case("mean_sum", s3, {random_tensor({b, n, c}, rng)},
                            [](const auto& in) { return add(scale(mean(in[0]), 2.0), sum(square(in[0]))); }, ws));
    cases.push_back(op_case("mean_axis", s3, {random_tensor({b, n, c}, rng)},
                            [](const auto& in) { return mean_axis(in[0], 1); }, ws));
    {
      const std::size_t m = pick(2, 4);
      cases.push_back(op_case("matmul", dims({b, n, c}) + "@" + dims({b, c, m}),
                              {random_tensor({b, n, c}, rng), random_tensor({b, c, m}, rng)},
                              [](const auto& in) { return matmul(in[0], in[1]); }, ws));
      cases.push_back(op_case("matmul_shared", dims({b, n, c}) + "@" + dims({c, m}),
                              {random_tensor({b, n, c}, rng), random_tensor({c, m}, rng)},
                              [](const auto& in) { return matmul(in[0], in[1]); }, ws));
    }
    cases.push_back(op_case("softmax", s3, {random_tensor({b, n, c}, rng, -2, 2)},
                            [](const auto& in) { return softmax(in[0], -1); }, ws));
    cases.push_back(op_case("layer_norm", s3,
                            {random_tensor({b, n, c}, rng), random_tensor({c}, rng, 0.5, 1.5), random_tensor({c}, rng)},
                            [](const auto& in) { return layer_norm(in[0], in[1], in[2], 1e-5); }, ws));
    {
      const std::size_t ci = pick(1, 3), co = pick(1, 4), h = pick(3, 6), w = pick(3, 6);
      const std::size_t kk = (k == 1) ? 1 : 3, stride = (k == 2) ? 2 : 1;
      cases.push_back(op_case("conv2d", dims({b, ci, h, w}) + " k" + std::to_string(kk) + " s" + std::to_string(stride),
                              {random_tensor({b, ci, h, w}, rng), random_tensor({co, ci, kk, kk}, rng),
                               random_tensor({co}, rng)},
                              [stride, kk](const auto& in) { return conv2d(in[0], in[1], in[2], stride, kk / 2); }, ws));
    }
    cases.push_back(op_case("reshape_permute", s3, {random_tensor({b, n, c}, rng)},
                            [b, n, c](const auto& in) {
                              return permute(reshape(transpose(in[0], 1, 2), {b, c, n}), {2, 0, 1});
                            },
                            ws));
    cases.push_back(op_case("concat_split", s3, {random_tensor({b, n, c}, rng), random_tensor({b, n, 2}, rng)},
                            [c](const auto& in) {
                              const auto parts = split(concat({in[0], in[1]}, 2), 2, {1, c + 1});
                              return mul(parts[1], parts[1]);
                            },
                            ws));
    cases.push_back(op_case("upsample_nearest", dims({b, c, n, n}), {random_tensor({b, c, n, n}, rng)},
                            [](const auto& in) { return upsample_nearest(in[0], 2); }, ws));
    {
      const std::vector<std::size_t> rows = {n - 1, 0, n - 1};
      cases.push_back(op_case("index_select", dims({n, c}), {random_tensor({n, c}, rng)},
                              [rows](const auto& in) { return index_select(in[0], rows); }, ws));
    }

    // Composite blocks at toy widths.
    const std::size_t heads = 2, ch = 4 * pick(1, 2);
    {
      auto msa = std::make_shared<nn::MultiHeadSelfAttention>(ch, heads, rng);
      cases.push_back(module_case("msa", dims({b, n, ch}), msa, random_tensor({b, n, ch}, rng),
                                  [](const auto& m, const Tensor& x) { return m.forward(x); }, ws));
      auto enc = std::make_shared<nn::EncoderLayer>(ch, heads, 2, rng);
      cases.push_back(module_case("encoder", dims({b, n, ch}), enc, random_tensor({b, n, ch}, rng),
                                  [](const auto& m, const Tensor& x) { return m.forward(x); }, ws));
    }
    const std::size_t h = 2 * pick(2, 3), w = 2 * pick(2, 3);
    {
      auto c2f = std::make_shared<nn::C2f>(ch, ch, pick(1, 2), rng);
      cases.push_back(module_case("c2f", dims({b, ch, h, w}), c2f, random_tensor({b, ch, h, w}, rng),
                                  [](const auto& m, const Tensor& x) { return m.forward(x); }, ws));
    }
    fusion::FusionConfig fc;
    fc.heads = heads;
    fc.channels = ch;
    {
      auto lads = std::make_shared<fusion::Lads>(ch, ch, 2, heads, 2, rng);
      cases.push_back(module_case("lads", dims({b, ch, h, w}), lads, random_tensor({b, ch, h, w}, rng),
                                  [](const auto& m, const Tensor& x) { return m.forward(x); }, ws));
      auto fds = std::make_shared<fusion::Fds>(ch, 2 * ch, 1, fc, rng);
      cases.push_back(module_case("fds", dims({b, ch, h, w}), fds, random_tensor({b, ch, h, w}, rng),
                                  [](const auto& m, const Tensor& x) { return m.forward(x); }, ws));
    }
    {
      const auto mode = k == 2 ? fusion::GausChannelMode::kPixelShuffle : fusion::GausChannelMode::kReplicate;
      const std::size_t gc = mode == fusion::GausChannelMode::kPixelShuffle ? 8 : ch;
      auto gaus = std::make_shared<fusion::Gaus>(gc, 2, heads, 2, mode, rng);
      cases.push_back(module_case(mode == fusion::GausChannelMode::kPixelShuffle ? "gaus_shuffle" : "gaus",
                                  dims({b, gc, h / 2, w / 2}), gaus, random_tensor({b, gc, h / 2, w / 2}, rng),
                                  [](const auto& m, const Tensor& x) { return m.forward(x); }, ws));
    }
    {
      // P4 at half and P5 at a quarter of the fused grid.
      const std::size_t fh = 4, fw = 4 * pick(1, 2);
      auto fus = std::make_shared<fusion::Fus>(8, 8, fc, rng);
      const Tensor p5 = random_tensor({b, 8, fh / 4, fw / 4}, rng);
      cases.push_back(module_case("fus", dims({b, 8, fh / 2, fw / 2}) + "+" + dims({b, 8, fh / 4, fw / 4}), fus,
                                  random_tensor({b, 8, fh / 2, fw / 2}, rng),
                                  [p5](const auto& m, const Tensor& x) { return m.forward(x, p5); }, ws));
    }
    {
      fusion::FusionConfig full = fc;
      full.enable_fmsa = full.enable_fus = full.enable_fds = true;
      auto fmsa = std::make_shared<fusion::Fmsa>(ch, ch, 1, full, rng);
      fill_zero_parameters(*fmsa, mix_seed(seed, 300 + k));
      const Tensor fds = random_tensor({b, ch, h, w}, rng), fus = random_tensor({b, ch, h, w}, rng);
      cases.push_back(module_case("fmsa", dims({b, ch, h, w}), fmsa, random_tensor({b, ch, h, w}, rng),
                                  [fds, fus](const auto& m, const Tensor& x) {
                                    return m.forward(fusion::FusionInputs{x, fds, fus});
                                  },
                                  ws));
    }
    {
      const std::size_t classes = pick(1, 3), g = pick(2, 4);
      std::vector<std::vector<GroundTruthBox>> truths(b);
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t t = 0, count = pick(1, 3); t < count; ++t) {
          GroundTruthBox gt;
          gt.class_id = static_cast<int>(pick(0, classes - 1));
          gt.box = Box{rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)};
          truths[i].push_back(gt);
        }
      }
      const Tensor raw = random_tensor({b, 5 + classes, g, g}, rng);
      for (auto box_loss : {detector::BoxLoss::kCiou, detector::BoxLoss::kL1}) {
        detector::LossConfig lc;
        lc.box_loss = box_loss;
        cases.push_back({box_loss == detector::BoxLoss::kCiou ? "loss_ciou" : "loss_l1", dims({b, 5 + classes, g, g}),
                         [raw, truths, lc, classes](const GradCheckOptions& o) {
                           return grad_check(
                               [&](const std::vector<Tensor>& in) {
                                 return detector::compute_loss(detector::HeadOutput{in[0], classes}, truths, lc).total;
                               },
                               {raw}, o);
                         }});
      }
    }
  }
  {
    // Whole backbone and detector once each, at the smallest legal input.
    detector::ModelConfig mc;
    mc.image_size = 32;
    mc.stem_channels = 4;
    mc.stage1_channels = 4;
    mc.p3_channels = 8;
    mc.p4_channels = 8;
    mc.p5_channels = 8;
    mc.depths = {1, 1, 1, 1};
    mc.head_blocks = 1;
    mc.num_classes = 2;
    mc.fusion.channels = 8;
    mc.fusion.heads = 2;
    mc.fusion.enable_fmsa = mc.fusion.enable_fus = mc.fusion.enable_fds = true;
    const std::uint64_t ws = mix_seed(seed, 200);
    auto model = std::make_shared<detector::Detector>(mc, mix_seed(seed, 201));
    fill_zero_parameters(*model, mix_seed(seed, 202));
    const Tensor image = random_tensor({1, 3, 32, 32}, rng, 0.0, 1.0);
    cases.push_back(module_case("backbone", "1x3x32x32", model, image,
                                [](const auto& m, const Tensor& x) {
                                  const auto fp = m.features(x);
                                  return concat({reshape(fp.p3, {fp.p3.numel()}), reshape(fp.p4, {fp.p4.numel()}),
                                                 reshape(fp.p5, {fp.p5.numel()})},
                                                0);
                                },
                                ws));
    cases.push_back(module_case("detector", "1x3x32x32", model, image,
                                [](const auto& m, const Tensor& x) { return m.forward(x).raw; }, ws));
  }
  return cases;
}

std::vector<GradCheckRow> run_gradcheck(std::uint64_t seed, const GradCheckOptions& options, std::ostream* progress) {
  std::vector<GradCheckRow> rows;
  for (const auto& c : gradcheck_cases(seed)) {
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckRow row{c.block, c.shape, c.run(options), 0.0};
    row.millis = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (progress) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%-18s %-22s max rel err %.3e  %6zu coords  %8.1f ms  %s", row.block.c_str(),
                    row.shape.c_str(), row.report.max_relative_error, row.report.coordinates_checked, row.millis,
                    row.report.passed ? "ok" : "FAIL");
      *progress << buf << std::endl;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<BenchRow> bench(const RunConfig& config, std::size_t runs, std::size_t warmup) {
  config.validate();
  std::vector<BenchRow> rows;
  for (int s : {0, 4}) {
    const RunConfig c = with_setting(config, s);
    const auto mc = resolve_model(c);
    const auto cost = detector::count_params_flops(mc);
    const detector::Detector model(mc, c.seed);
    Rng rng(c.seed);
    const Tensor image = random_tensor({1, 3, mc.image_size, mc.image_size}, rng, 0.0, 1.0);
    NoGradGuard no_grad;
    std::vector<double> times;
    for (std::size_t i = 0; i < warmup + runs; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      model.forward(image);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      if (i >= warmup) times.push_back(ms);
    }
    rows.push_back({s == 0 ? "baseline" : "full", cost.params, cost.flops, times.empty() ? 0.0 : median(times)});
  }
  return rows;
}

ProbeCost probe_conv_cost() {
  Rng rng(0);
  const nn::Conv conv(3, 16, 3, 1, rng, false);
  ProbeCost cost;
  cost.params = conv.parameter_count();
  cost.analytic_flops = 2ULL * 3 * 3 * 3 * 16 * 64 * 64;
  NoGradGuard no_grad;
  FlopCounter counter;
  conv.forward(Tensor({1, 3, 64, 64}, 0.5));
  cost.counted_flops = counter.flops();
  return cost;
}

ProbeCost probe_attention_cost(std::size_t tokens, std::size_t channels, std::size_t heads) {
  Rng rng(0);
  const nn::MultiHeadSelfAttention msa(channels, heads, rng);
  ProbeCost cost;
  cost.params = msa.parameter_count();
  const std::uint64_t n = tokens, c = channels;
  cost.analytic_flops = 8 * n * c * c + 4 * n * n * c;
  NoGradGuard no_grad;
  FlopCounter counter;
  msa.forward(Tensor({1, tokens, channels}, 0.25));
  cost.counted_flops = counter.flops();
  return cost;
}

PixelRect pixel_rect(const Box& box, std::size_t width, std::size_t height) {
  auto edge = [](double v, std::size_t size) {
    return static_cast<int>(std::clamp(std::lround(v * static_cast<double>(size)), 0L, static_cast<long>(size)));
  };
  PixelRect r;
  r.x0 = std::min(edge(box.x0(), width), static_cast<int>(width) - 1);
  r.y0 = std::min(edge(box.y0(), height), static_cast<int>(height) - 1);
  r.x1 = std::max(r.x0, edge(box.x1(), width) - 1);
  r.y1 = std::max(r.y0, edge(box.y1(), height) - 1);
  return r;
}

data::Image draw_detections(const data::Image& image, const std::vector<Detection>& detections) {
  static const std::uint8_t kPalette[][3] = {{255, 40, 40},  {40, 255, 40},  {60, 90, 255}, {255, 255, 0},
                                             {255, 0, 255},  {0, 255, 255},  {255, 140, 0}, {255, 255, 255}};
  data::Image out = image;
  for (const auto& d : detections) {
    const auto& color = kPalette[static_cast<std::size_t>(d.class_id) % 8];
    const PixelRect r = pixel_rect(d.box, image.width, image.height);
    auto paint = [&](int x, int y) {
      for (std::size_t c = 0; c < 3; ++c) out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c) = color[c];
    };
    for (int x = r.x0; x <= r.x1; ++x) {
      paint(x, r.y0);
      paint(x, r.y1);
    }
    for (int y = r.y0; y <= r.y1; ++y) {
      paint(r.x0, y);
      paint(r.x1, y);
    }
  }
  return out;
}

}  // namespace fusenet::harness
