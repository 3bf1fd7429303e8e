#include "fusenet/detector.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "fusenet/ops.hpp"

namespace fusenet::detector {

void ModelConfig::validate() const {
  if (image_size == 0 || image_size % 32 != 0) {
    throw ConfigError("image size must be a positive multiple of 32, got " + std::to_string(image_size));
  }
  if (num_classes == 0) throw ConfigError("num_classes must be positive");
  for (std::size_t c : {stem_channels, stage1_channels, p3_channels, p4_channels, p5_channels}) {
    if (c < 2 || c % 2 != 0) throw ConfigError("backbone widths must be even and at least 2");
  }
  fusion.validate();
  if (fusion.enable_fus) {
    if (fusion.fus_stride_p5 != 4 || fusion.fus_stride_p4 != 2) {
      throw ConfigError("FUS must upsample P5 by 4 and P4 by 2 to reach stride 8");
    }
    if (p4_channels % fusion.heads != 0 || p5_channels % fusion.heads != 0) {
      throw ConfigError("attention heads must divide the P4/P5 widths");
    }
  }
  if (fusion.enable_fds && (stage1_channels % fusion.heads || p3_channels % fusion.heads)) {
    throw ConfigError("attention heads must divide the FDS input widths");
  }
  if (fusion.enable_fds && fusion.fds_stride != 2) throw ConfigError("FDS replaces a stride-2 stage; fds_stride must be 2");
}

std::string ModelConfig::canonical() const {
  std::ostringstream s;
  s << "image_size=" << image_size << ";num_classes=" << num_classes << ";stem=" << stem_channels
    << ";c1=" << stage1_channels << ";c3=" << p3_channels << ";c4=" << p4_channels << ";c5=" << p5_channels
    << ";depths=" << depths.stage1 << "," << depths.stage2 << "," << depths.stage3 << "," << depths.stage4
    << ";head_blocks=" << head_blocks << ";fds_blocks=" << fds_blocks << ";fmsa=" << fusion.enable_fmsa
    << ";fus=" << fusion.enable_fus << ";fds=" << fusion.enable_fds << ";cf=" << fusion.channels
    << ";fds_stride=" << fusion.fds_stride << ";fus_strides=" << fusion.fus_stride_p5 << ","
    << fusion.fus_stride_p4 << ";fmsa_depth=" << fusion.fmsa_depth << ";heads=" << fusion.heads
    << ";mlp_ratio=" << fusion.mlp_ratio
    << ";gaus=" << (fusion.gaus_mode == fusion::GausChannelMode::kReplicate ? "replicate" : "shuffle") << ";";
  return s.str();
}

std::uint64_t ModelConfig::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

std::optional<nn::Conv> down_conv(bool use, std::size_t in, std::size_t out, Rng& rng) {
  if (!use) return std::nullopt;
  return nn::Conv(in, out, 3, 2, rng);
}

std::optional<fusion::Fds> down_fds(bool use, std::size_t in, std::size_t out, const ModelConfig& c, Rng& rng) {
  if (!use) return std::nullopt;
  return fusion::Fds(in, out, c.fds_blocks, c.fusion, rng);
}

}  // namespace

Backbone::Backbone(const ModelConfig& c, Rng& rng)
    : stem(3, c.stem_channels, 3, 2, rng),
      down1(c.stem_channels, c.stage1_channels, 3, 2, rng),
      stage1(c.stage1_channels, c.stage1_channels, c.depths.stage1, rng),
      down2_conv(down_conv(!c.fusion.enable_fds, c.stage1_channels, c.p3_channels, rng)),
      down2_fds(down_fds(c.fusion.enable_fds, c.stage1_channels, c.p3_channels, c, rng)),
      stage2(c.p3_channels, c.p3_channels, c.depths.stage2, rng),
      down3_conv(down_conv(!c.fusion.enable_fds, c.p3_channels, c.p4_channels, rng)),
      down3_fds(down_fds(c.fusion.enable_fds, c.p3_channels, c.p4_channels, c, rng)),
      stage3(c.p4_channels, c.p4_channels, c.depths.stage3, rng),
      down4(c.p4_channels, c.p5_channels, 3, 2, rng),
      stage4(c.p5_channels, c.p5_channels, c.depths.stage4, rng) {}

FeaturePyramid Backbone::forward(const Tensor& image) const {
  FeaturePyramid out;
  const Tensor s4 = stage1.forward(down1.forward(stem.forward(image)));
  Tensor d2;
  if (down2_fds) {
    d2 = down2_fds->forward(s4);
    out.fds_tap = d2;
  } else {
    d2 = down2_conv->forward(s4);
  }
  out.p3 = stage2.forward(d2);
  out.p4 = stage3.forward(down3_fds ? down3_fds->forward(out.p3) : down3_conv->forward(out.p3));
  out.p5 = stage4.forward(down4.forward(out.p4));
  return out;
}

void Backbone::collect_params(const std::string& prefix, nn::ParamList& out) const {
  stem.collect_params(prefix + "stem.", out);
  down1.collect_params(prefix + "down1.", out);
  stage1.collect_params(prefix + "stage1.", out);
  if (down2_conv) down2_conv->collect_params(prefix + "down2.", out);
  if (down2_fds) down2_fds->collect_params(prefix + "down2_fds.", out);
  stage2.collect_params(prefix + "stage2.", out);
  if (down3_conv) down3_conv->collect_params(prefix + "down3.", out);
  if (down3_fds) down3_fds->collect_params(prefix + "down3_fds.", out);
  stage3.collect_params(prefix + "stage3.", out);
  down4.collect_params(prefix + "down4.", out);
  stage4.collect_params(prefix + "stage4.", out);
}

namespace {

const ModelConfig& validated(const ModelConfig& c) {
  c.validate();
  return c;
}

}  // namespace

Detector::Detector(const ModelConfig& config, std::uint64_t seed)
    : config_(validated(config)),
      rng_(seed),
      backbone(config_, rng_),
      head(config_.fusion.channels, 5 + config_.num_classes, 1, 1, rng_, false) {
  const auto& f = config_.fusion;
  if (config_.p3_channels != f.channels) main_proj.emplace(config_.p3_channels, f.channels, 1, 1, rng_, false);
  if (f.enable_fds && config_.p3_channels != f.channels) {
    fds_proj.emplace(config_.p3_channels, f.channels, 1, 1, rng_, false);
  }
  if (f.enable_fus) {
    fus.emplace(config_.p4_channels, config_.p5_channels, f, rng_);
  } else if (f.enable_fmsa) {
    nearest_p4.emplace(config_.p4_channels, f.channels, 1, 1, rng_, false);
    nearest_p5.emplace(config_.p5_channels, f.channels, 1, 1, rng_, false);
  }
  if (f.enable_fmsa) {
    fmsa.emplace(f.channels, f.channels, config_.head_blocks, f, rng_);
  } else {
    head_c2f.emplace(f.channels, f.channels, config_.head_blocks, rng_);
  }
}

FeaturePyramid Detector::features(const Tensor& image) const { return backbone.forward(image); }

HeadOutput Detector::forward(const Tensor& image) const {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw DimensionError("detector expects images [B,3,H,W], got " + shape_string(image.shape()));
  }
  if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0) {
    throw InputError("image size " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                     " must be a multiple of 32");
  }
  const FeaturePyramid fp = backbone.forward(image);
  const Tensor x = main_proj ? main_proj->forward(fp.p3) : fp.p3;
  Tensor fused;
  if (fmsa) {
    fusion::FusionInputs in;
    in.x_main = x;
    if (fp.fds_tap.defined()) in.fds_out = fds_proj ? fds_proj->forward(fp.fds_tap) : fp.fds_tap;
    if (fus) {
      in.fus_out = fus->forward(fp.p4, fp.p5);
    } else {
      in.fus_out = add(upsample_nearest(nearest_p4->forward(fp.p4), 2), upsample_nearest(nearest_p5->forward(fp.p5), 4));
    }
    fused = fmsa->forward(in);
  } else {
    fused = head_c2f->forward(x);
  }
  return HeadOutput{head.forward(fused), config_.num_classes};
}

void Detector::collect_params(const std::string& prefix, nn::ParamList& out) const {
  backbone.collect_params(prefix + "backbone.", out);
  if (main_proj) main_proj->collect_params(prefix + "main_proj.", out);
  if (fds_proj) fds_proj->collect_params(prefix + "fds_proj.", out);
  if (fus) fus->collect_params(prefix + "fus.", out);
  if (nearest_p4) nearest_p4->collect_params(prefix + "nearest_p4.", out);
  if (nearest_p5) nearest_p5->collect_params(prefix + "nearest_p5.", out);
  if (fmsa) fmsa->collect_params(prefix + "fmsa.", out);
  if (head_c2f) head_c2f->collect_params(prefix + "head_c2f.", out);
  head.collect_params(prefix + "head.", out);
}

namespace {

double sigmoid_value(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Box decode_cell(double tx, double ty, double tw, double th, std::size_t gx, std::size_t gy, std::size_t grid_w,
                std::size_t grid_h) {
  const double gw = static_cast<double>(grid_w), gh = static_cast<double>(grid_h);
  return Box{(static_cast<double>(gx) + sigmoid_value(tx)) / gw, (static_cast<double>(gy) + sigmoid_value(ty)) / gh,
             std::exp(tw) / gw, std::exp(th) / gh};
}

std::array<double, 4> encode_box(const Box& box, std::size_t gx, std::size_t gy, std::size_t grid_w,
                                 std::size_t grid_h) {
  const double gw = static_cast<double>(grid_w), gh = static_cast<double>(grid_h);
  const double fx = box.cx * gw - static_cast<double>(gx);
  const double fy = box.cy * gh - static_cast<double>(gy);
  auto logit = [](double p) { return std::log(p / (1.0 - p)); };
  return {logit(fx), logit(fy), std::log(box.w * gw), std::log(box.h * gh)};
}

std::pair<std::size_t, std::size_t> center_cell(const Box& box, std::size_t grid_w, std::size_t grid_h) {
  auto cell = [](double c, std::size_t g) {
    const double v = std::floor(c * static_cast<double>(g));
    return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(g - 1)));
  };
  return {cell(box.cx, grid_w), cell(box.cy, grid_h)};
}

namespace {

Tensor column(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n, 1}, std::move(values));
}

// 1 - CIoU per row; all tensors are [P, 1].
Tensor ciou_loss(const Tensor& pcx, const Tensor& pcy, const Tensor& pw, const Tensor& ph,
                 const std::vector<Box>& targets) {
  const std::size_t p = targets.size();
  std::vector<double> tcx(p), tcy(p), tw(p), th(p), tx0(p), ty0(p), tx1(p), ty1(p), tatan(p);
  for (std::size_t i = 0; i < p; ++i) {
    const Box& b = targets[i];
    tcx[i] = b.cx;
    tcy[i] = b.cy;
    tw[i] = b.w;
    th[i] = b.h;
    tx0[i] = b.x0();
    ty0[i] = b.y0();
    tx1[i] = b.x1();
    ty1[i] = b.y1();
    tatan[i] = std::atan(b.w / b.h);
  }
  constexpr double kEps = 1e-9;
  const Tensor half_w = scale(pw, 0.5), half_h = scale(ph, 0.5);
  const Tensor px0 = sub(pcx, half_w), px1 = add(pcx, half_w);
  const Tensor py0 = sub(pcy, half_h), py1 = add(pcy, half_h);
  const Tensor Tx0 = column(tx0), Tx1 = column(tx1), Ty0 = column(ty0), Ty1 = column(ty1);
  const Tensor zeros({p, 1}, 0.0);

  const Tensor iw = maximum(sub(minimum(px1, Tx1), maximum(px0, Tx0)), zeros);
  const Tensor ih = maximum(sub(minimum(py1, Ty1), maximum(py0, Ty0)), zeros);
  const Tensor inter = mul(iw, ih);
  const Tensor target_area = mul(column(tw), column(th));
  const Tensor uni = add_scalar(sub(add(mul(pw, ph), target_area), inter), kEps);
  const Tensor iou_t = div(inter, uni);

  const Tensor cw = sub(maximum(px1, Tx1), minimum(px0, Tx0));
  const Tensor ch = sub(maximum(py1, Ty1), minimum(py0, Ty0));
  const Tensor c2 = add_scalar(add(square(cw), square(ch)), kEps);
  const Tensor rho2 = add(square(sub(pcx, column(tcx))), square(sub(pcy, column(tcy))));

  const double k = 4.0 / (std::numbers::pi * std::numbers::pi);
  const Tensor v = scale(square(sub(column(tatan), atan(div(pw, ph)))), k);
  const Tensor alpha = div(v, add_scalar(sub(v, iou_t), 1.0 + kEps));

  const Tensor ciou = sub(sub(iou_t, div(rho2, c2)), mul(alpha, v));
  return add_scalar(scale(ciou, -1.0), 1.0);
}

}  // namespace

LossBreakdown compute_loss(const HeadOutput& pred, std::span<const std::vector<GroundTruthBox>> truths,
                           const LossConfig& config) {
  const std::size_t b = pred.batch(), gh = pred.grid_h(), gw = pred.grid_w(), k = pred.num_classes;
  if (pred.raw.dim(1) != 5 + k) throw DimensionError("head output channels do not match 5 + num_classes");
  if (truths.size() != b) {
    throw InputError("loss: " + std::to_string(truths.size()) + " truth lists for a batch of " + std::to_string(b));
  }
  const std::size_t cells = b * gh * gw;

  // Cell -> truth assignment; the smaller box wins a contested cell.
  std::vector<const GroundTruthBox*> owner(cells, nullptr);
  for (std::size_t i = 0; i < b; ++i) {
    for (const auto& t : truths[i]) {
      if (!(t.box.w > 0.0) || !(t.box.h > 0.0)) throw InputError("degenerate truth box (non-positive size)");
      if (t.class_id < 0 || static_cast<std::size_t>(t.class_id) >= k) {
        throw InputError("truth class " + std::to_string(t.class_id) + " outside 0.." + std::to_string(k - 1));
      }
      const auto [cx, cy] = center_cell(t.box, gw, gh);
      const std::size_t r = (i * gh + cy) * gw + cx;
      if (!owner[r] || t.box.area() < owner[r]->box.area()) owner[r] = &t;
    }
  }
  std::vector<std::size_t> pos_rows;
  std::vector<double> obj_target(cells, 0.0);
  for (std::size_t r = 0; r < cells; ++r) {
    if (owner[r]) {
      pos_rows.push_back(r);
      obj_target[r] = 1.0;
    }
  }

  const Tensor rows = reshape(permute(pred.raw, {0, 2, 3, 1}), {cells, 5 + k});
  const auto parts = split(rows, 1, {1, k, 4});
  LossBreakdown out;
  out.positives = pos_rows.size();

  const Tensor obj_loss = mean(bce_with_logits(parts[0], Tensor({cells, 1}, std::move(obj_target))));
  out.objectness = obj_loss.item();
  Tensor total = scale(obj_loss, config.obj_weight);

  if (!pos_rows.empty()) {
    const std::size_t p = pos_rows.size();
    std::vector<double> onehot(p * k, 0.0), gx(p), gy(p);
    std::vector<Box> targets(p);
    for (std::size_t i = 0; i < p; ++i) {
      const GroundTruthBox& t = *owner[pos_rows[i]];
      onehot[i * k + static_cast<std::size_t>(t.class_id)] = 1.0;
      const std::size_t cell = pos_rows[i] % (gh * gw);
      gx[i] = static_cast<double>(cell % gw);
      gy[i] = static_cast<double>(cell / gw);
      targets[i] = t.box;
    }
    const Tensor cls_loss =
        scale(sum(bce_with_logits(index_select(parts[1], pos_rows), Tensor({p, k}, std::move(onehot)))),
              1.0 / static_cast<double>(p));
    out.classification = cls_loss.item();

    const auto t = split(index_select(parts[2], pos_rows), 1, {1, 1, 1, 1});
    const Tensor pcx = scale(add(sigmoid(t[0]), column(gx)), 1.0 / static_cast<double>(gw));
    const Tensor pcy = scale(add(sigmoid(t[1]), column(gy)), 1.0 / static_cast<double>(gh));
    const Tensor pw = scale(exp(t[2]), 1.0 / static_cast<double>(gw));
    const Tensor ph = scale(exp(t[3]), 1.0 / static_cast<double>(gh));
    Tensor box_loss;
    if (config.box_loss == BoxLoss::kCiou) {
      box_loss = mean(ciou_loss(pcx, pcy, pw, ph, targets));
    } else {
      std::vector<double> flat(p * 4);
      for (std::size_t i = 0; i < p; ++i) {
        flat[i * 4 + 0] = targets[i].cx;
        flat[i * 4 + 1] = targets[i].cy;
        flat[i * 4 + 2] = targets[i].w;
        flat[i * 4 + 3] = targets[i].h;
      }
      const Tensor predicted = concat({pcx, pcy, pw, ph}, 1);
      box_loss = mean(abs(sub(predicted, Tensor({p, 4}, std::move(flat)))));
    }
    out.box = box_loss.item();
    total = add(total, add(scale(cls_loss, config.cls_weight), scale(box_loss, config.box_weight)));
  }
  out.total = total;
  return out;
}

std::vector<Detection> decode_predictions(const HeadOutput& pred, double conf_threshold, double nms_iou,
                                          std::size_t image_offset) {
  const std::size_t b = pred.batch(), gh = pred.grid_h(), gw = pred.grid_w(), k = pred.num_classes;
  const std::size_t plane = gh * gw;
  const auto data = pred.raw.data();
  std::vector<Detection> all;
  for (std::size_t i = 0; i < b; ++i) {
    const double* base = data.data() + i * (5 + k) * plane;
    std::vector<Detection> dets;
    for (std::size_t gy = 0; gy < gh; ++gy) {
      for (std::size_t gx = 0; gx < gw; ++gx) {
        const std::size_t cell = gy * gw + gx;
        auto ch = [&](std::size_t c) { return base[c * plane + cell]; };
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c) {
          if (ch(1 + c) > ch(1 + best)) best = c;
        }
        const double score = sigmoid_value(ch(0)) * sigmoid_value(ch(1 + best));
        if (!(score >= conf_threshold)) continue;
        const Box box = clamp_unit(decode_cell(ch(k + 1), ch(k + 2), ch(k + 3), ch(k + 4), gx, gy, gw, gh));
        if (!(box.w > 0.0) || !(box.h > 0.0)) continue;
        dets.push_back(Detection{static_cast<int>(best), score, box, image_offset + i});
      }
    }
    auto kept = non_max_suppression(std::move(dets), nms_iou);
    all.insert(all.end(), kept.begin(), kept.end());
  }
  return all;
}

CostReport count_params_flops(const ModelConfig& config) {
  const Detector model(config, 0);
  CostReport report;
  report.params = model.parameter_count();
  NoGradGuard no_grad;
  FlopCounter counter;
  model.forward(Tensor({1, 3, config.image_size, config.image_size}, 0.0));
  report.flops = counter.flops();
  return report;
}

ModelConfig compensate_depth(const ModelConfig& config) {
  const auto& f = config.fusion;
  if (!f.enable_fmsa && !f.enable_fus && !f.enable_fds) return config;
  ModelConfig baseline = config;
  baseline.fusion.enable_fmsa = baseline.fusion.enable_fus = baseline.fusion.enable_fds = false;
  const auto target = static_cast<double>(Detector(baseline, 0).parameter_count());

  ModelConfig best = config;
  double best_gap = std::numeric_limits<double>::infinity();
  const StageDepths& d = config.depths;
  ModelConfig trial = config;
  // Deeper stages first so ties keep the shallow stages intact.
  for (std::size_t s4 = d.stage4 + 1; s4-- > 0;) {
    for (std::size_t s3 = d.stage3 + 1; s3-- > 0;) {
      for (std::size_t s2 = d.stage2 + 1; s2-- > 0;) {
        for (std::size_t s1 = d.stage1 + 1; s1-- > 0;) {
          trial.depths = {s1, s2, s3, s4};
          const double gap = std::abs(static_cast<double>(Detector(trial, 0).parameter_count()) - target);
          if (gap < best_gap) {
            best_gap = gap;
            best = trial;
          }
        }
      }
    }
  }
  return best;
}

namespace {

constexpr char kMagic[8] = {'F', 'U', 'S', 'E', 'N', 'E', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}

  void bytes(char* out, std::size_t n) {
    is_.read(out, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw InputError("checkpoint " + path_ + " is truncated");
  }
  std::uint64_t uint(int width) {
    unsigned char b[8];
    bytes(reinterpret_cast<char*>(b), static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }

 private:
  std::istream& is_;
  std::string path_;
};

}  // namespace

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, std::uint64_t digest, std::uint32_t epoch,
                     const nn::ParamList& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot write checkpoint " + path.string());
    os.write(kMagic, sizeof(kMagic));
    put_u32(os, kCheckpointVersion);
    put_u64(os, digest);
    put_u32(os, epoch);
    put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      put_u32(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put_u32(os, static_cast<std::uint32_t>(t.rank()));
      for (auto d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
      for (double v : t.data()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
    if (!os) throw InputError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint " + path.string());
  Reader r(is, path.string());
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw InputError(path.string() + " is not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw InputError("checkpoint format version " + std::to_string(version) + " is not supported");
  }
  Checkpoint ck;
  ck.digest = r.u64();
  ck.epoch = r.u32();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    const std::uint32_t len = r.u32();
    if (len > 4096) throw InputError("checkpoint tensor name too long; file is corrupt");
    t.name.resize(len);
    r.bytes(t.name.data(), len);
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw InputError("checkpoint tensor rank " + std::to_string(rank) + " is implausible");
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(r.u32());
    const std::size_t n = shape_numel(t.shape);
    if (n > (std::size_t{1} << 31)) throw InputError("checkpoint tensor " + t.name + " is implausibly large");
    t.values.resize(n);
    for (auto& v : t.values) v = std::bit_cast<float>(r.u32());
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

void restore(const Checkpoint& checkpoint, std::uint64_t expected_digest, const nn::ParamList& params,
             const std::string& name_prefix) {
  if (checkpoint.digest != expected_digest) {
    throw InputError("checkpoint was written for a different model configuration (digest mismatch)");
  }
  for (const auto& [name, t] : params) {
    const StoredTensor* stored = checkpoint.find(name_prefix + name);
    if (!stored) throw InputError("checkpoint is missing tensor " + name_prefix + name);
    if (stored->shape != t.shape()) {
      throw InputError("checkpoint tensor " + name + " has shape " + shape_string(stored->shape) + ", expected " +
                       shape_string(t.shape()));
    }
    Tensor target = t;
    auto dst = target.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = stored->values[i];
  }
}

}  // namespace fusenet::detector
