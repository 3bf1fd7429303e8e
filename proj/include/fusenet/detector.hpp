#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fusenet/boxes.hpp"
#include "fusenet/fusion.hpp"
#include "fusenet/nn.hpp"

namespace fusenet::detector {

// C2f block counts of the four backbone stages.
struct StageDepths {
  std::size_t stage1 = 1;
  std::size_t stage2 = 2;
  std::size_t stage3 = 2;
  std::size_t stage4 = 2;

  std::size_t total() const { return stage1 + stage2 + stage3 + stage4; }
  bool operator==(const StageDepths&) const = default;
};

struct ModelConfig {
  std::size_t image_size = 640;
  std::size_t num_classes = 3;
  std::size_t stem_channels = 8;
  std::size_t stage1_channels = 16;
  std::size_t p3_channels = 32;
  std::size_t p4_channels = 64;
  std::size_t p5_channels = 128;
  StageDepths depths;
  // C2f blocks of the final fusion block (baseline head C2f or FMSA's C2f).
  std::size_t head_blocks = 2;
  std::size_t fds_blocks = 1;
  fusion::FusionConfig fusion;

  void validate() const;
  // Stable "key=value;" rendering of everything that shapes the parameters.
  std::string canonical() const;
  // FNV-1a 64 of canonical().
  std::uint64_t digest() const;
};

// Backbone outputs at strides 8 / 16 / 32. `fds_tap` is the FDS output that
// produced P3's input (only when FDS is enabled).
struct FeaturePyramid {
  Tensor p3;
  Tensor p4;
  Tensor p5;
  Tensor fds_tap;
};

// stem (s2) -> down1 (s2) + C2f -> down2 (s2, FDS when enabled) + C2f = P3
// -> down3 (s2, FDS when enabled) + C2f = P4 -> down4 (s2) + C2f = P5.
class Backbone : public nn::Module {
 public:
  Backbone(const ModelConfig& config, Rng& rng);

  FeaturePyramid forward(const Tensor& image) const;
  void collect_params(const std::string& prefix, nn::ParamList& out) const override;

  nn::Conv stem;
  nn::Conv down1;
  nn::C2f stage1;
  std::optional<nn::Conv> down2_conv;
  std::optional<fusion::Fds> down2_fds;
  nn::C2f stage2;
  std::optional<nn::Conv> down3_conv;
  std::optional<fusion::Fds> down3_fds;
  nn::C2f stage3;
  nn::Conv down4;
  nn::C2f stage4;
};

// Raw head tensor [B, 5 + K, G_h, G_w]: channel 0 objectness logit,
// 1..K class logits, K+1..K+4 box offsets (tx, ty, tw, th).
struct HeadOutput {
  Tensor raw;
  std::size_t num_classes = 0;

  std::size_t batch() const { return raw.dim(0); }
  std::size_t grid_h() const { return raw.dim(2); }
  std::size_t grid_w() const { return raw.dim(3); }
};

class Detector : public nn::Module {
 public:
  Detector(const ModelConfig& config, std::uint64_t seed);

  FeaturePyramid features(const Tensor& image) const;
  HeadOutput forward(const Tensor& image) const;
  void collect_params(const std::string& prefix, nn::ParamList& out) const override;

  const ModelConfig& config() const { return config_; }

 private:
  ModelConfig config_;
  Rng rng_;

 public:
  Backbone backbone;
  std::optional<nn::Conv> main_proj;  // P3 -> C_f when widths differ
  std::optional<nn::Conv> fds_proj;   // FDS tap -> C_f
  std::optional<fusion::Fus> fus;
  // Without FUS, P4/P5 still reach FMSA: 1x1 projection to C_f, then
  // nearest-neighbour upsampling to the P3 grid.
  std::optional<nn::Conv> nearest_p4;
  std::optional<nn::Conv> nearest_p5;
  std::optional<fusion::Fmsa> fmsa;
  std::optional<nn::C2f> head_c2f;  // baseline path
  nn::Conv head;
};

// Cell decode: cx = (gx + sigmoid(tx)) / G_w, w = exp(tw) / G_w (same for y).
Box decode_cell(double tx, double ty, double tw, double th, std::size_t gx, std::size_t gy, std::size_t grid_w,
                std::size_t grid_h);
// Inverse of decode_cell for a box whose center lies in cell (gx, gy).
std::array<double, 4> encode_box(const Box& box, std::size_t gx, std::size_t gy, std::size_t grid_w,
                                 std::size_t grid_h);
// Cell containing the box center.
std::pair<std::size_t, std::size_t> center_cell(const Box& box, std::size_t grid_w, std::size_t grid_h);

enum class BoxLoss { kCiou, kL1 };

struct LossConfig {
  BoxLoss box_loss = BoxLoss::kCiou;
  double obj_weight = 1.0;
  double cls_weight = 1.0;
  double box_weight = 5.0;
};

struct LossBreakdown {
  Tensor total;
  double objectness = 0.0;
  double classification = 0.0;
  double box = 0.0;
  std::size_t positives = 0;
};

// Each truth is assigned to the cell holding its center (smallest box wins a
// contested cell). Objectness BCE is averaged over all cells; class BCE and
// the box term (1 - CIoU, or L1 on cx/cy/w/h) over assigned cells.
LossBreakdown compute_loss(const HeadOutput& pred, std::span<const std::vector<GroundTruthBox>> truths,
                           const LossConfig& config = {});

// Scores are sigmoid(obj) * sigmoid(best class logit); boxes are clipped to
// the image and filtered by greedy per-class NMS. image_id = image_offset + b.
std::vector<Detection> decode_predictions(const HeadOutput& pred, double conf_threshold, double nms_iou,
                                          std::size_t image_offset = 0);

struct CostReport {
  std::uint64_t params = 0;
  // Multiply-adds x2 of every conv and matmul (attention included) for one
  // image at config.image_size.
  std::uint64_t flops = 0;
};

CostReport count_params_flops(const ModelConfig& config);

// Lowers backbone stage depths so that the parameter count is as close as
// possible to the same config with every fusion block disabled. Returns the
// config unchanged when fusion is off.
ModelConfig compensate_depth(const ModelConfig& config);

// Checkpoint: "FUSENET1" magic, u32 format version, u64 config digest,
// u32 epoch, u32 tensor count, then per tensor: u32 name length, name bytes,
// u32 rank, u32 dims, float32 values. All integers and floats little-endian.
constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::uint64_t digest = 0;
  std::uint32_t epoch = 0;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, std::uint64_t digest, std::uint32_t epoch,
                     const nn::ParamList& tensors);
Checkpoint read_checkpoint(const std::filesystem::path& path);
// Copies stored values into `params` by name. Throws InputError on digest
// mismatch, missing names or shape mismatch.
void restore(const Checkpoint& checkpoint, std::uint64_t expected_digest, const nn::ParamList& params,
             const std::string& name_prefix = "");

}  // namespace fusenet::detector
