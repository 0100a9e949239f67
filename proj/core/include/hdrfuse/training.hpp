#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdrfuse/fusion_net.hpp"
#include "hdrfuse/params.hpp"
#include "hdrfuse/radiometry.hpp"
#include "hdrfuse/rng.hpp"
#include "hdrfuse/segmentation.hpp"
#include "hdrfuse/stack_io.hpp"

namespace hdrfuse {

enum class LossKind { L2, L1, L2L1, L1MsSsim, L2MsSsim, L1L2MsSsim };
enum class TrainMode { TwoStage, EndToEnd, EndToEndWithSegLoss };

std::string to_string(LossKind kind);
std::string to_string(TrainMode mode);
LossKind parse_loss(const std::string& name);
TrainMode parse_mode(const std::string& name);

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 4;
  int epochs = 200;
  double lr_decay = 0.96;
  int patch = 128;
  LossKind loss = LossKind::L2;
  TrainMode mode = TrainMode::TwoStage;
  std::uint64_t seed = 0;
  double mu = kDefaultMu;
  /// Stops after this many optimizer steps when positive.
  int max_steps = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// lr * decay^epoch.
double lr_at_epoch(const TrainConfig& config, int epoch);

// ---------------------------------------------------------------------------
// Losses

/// Fixed tonemapping peak used in training: the radiance that saturates the
/// shortest exposure, 1 / min(t_k).
double training_peak(const ExposureStack& stack);

/// Three-scale MS-SSIM with Gaussian windows (sigma 1.5, up to 11 taps) and
/// 2x box downsampling between scales. Inputs are (C,H,W) in [0,1].
ag::Var ms_ssim(const ag::Var& a, const ag::Var& b);
double ms_ssim(const Tensor& a, const Tensor& b);

/// Unweighted sum of the selected components, computed after mu-law
/// tonemapping both images with the same `peak`.
ag::Var loss_tonemapped(const ag::Var& pred, const ag::Var& gt, LossKind kind, double mu, double peak);
double loss_tonemapped(const RadianceImage& pred, const RadianceImage& gt, LossKind kind, double mu = kDefaultMu,
                       std::optional<double> peak = std::nullopt);

// ---------------------------------------------------------------------------
// Optimisation

struct AdamState {
  std::vector<Tensor> m, v;
  long step = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

/// Bias-corrected Adam update of `params` in place.
void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads, AdamState& state,
               double lr);
/// Updates every non-frozen parameter from its `grad` buffer.
void adam_step(const std::vector<ag::ParamPtr>& params, AdamState& state, double lr);

// ---------------------------------------------------------------------------
// Data

struct TrainExample {
  std::string id;
  ExposureStack stack;
  RadianceImage gt;
  /// Ground-truth masks, one per non-reference frame; may be empty.
  std::vector<MotionMask> masks;
};

struct PatchWindow {
  int y = 0, x = 0, size = 0;
};

/// Crops stack, ground truth and masks to one window drawn uniformly from
/// all valid positions. Throws PatchTooLarge.
TrainExample sample_patch(const TrainExample& example, int size, Rng& rng, PatchWindow* window = nullptr);

/// Loads every manifest entry; `require_masks` makes missing masks an error.
std::vector<TrainExample> load_examples(const DatasetManifest& manifest, bool require_masks);

// ---------------------------------------------------------------------------
// Training loops

struct EpochRecord {
  int epoch = 0;
  int steps = 0;
  double mean_loss = 0;
  double lr = 0;
  std::optional<double> val_psnr_l, val_psnr_t, val_iou;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int total_steps = 0;
  double final_loss = 0;
  double wall_seconds = 0;

  /// One JSON object per epoch, then a summary line.
  void write_jsonl(const std::filesystem::path& path) const;
  /// Every field except wall time.
  bool same_trajectory(const TrainReport& other) const;
};

/// Where fusion masks come from during training and inference.
enum class MaskSource { Cnn, Diff, Zero };
std::string to_string(MaskSource source);
MaskSource parse_mask_source(const std::string& name);

struct TrainOptions {
  /// Rewritten after every epoch.
  std::optional<std::filesystem::path> checkpoint;
  /// Segmenter checkpoint written by end-to-end fusion training.
  std::optional<std::filesystem::path> segmenter_checkpoint;
  std::vector<TrainExample> validation;
  MaskSource masks = MaskSource::Cnn;
  double diff_threshold = 0.1;
  /// Per-sample worker threads; results are reduced in sample order.
  int workers = 1;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// HDRFUSE_NUM_WORKERS, or 1 when unset or invalid.
int workers_from_env();

/// Per-pixel BCE on (frame, reference) pairs against ground-truth masks.
TrainReport train_segmentation(SegModel& model, const std::vector<TrainExample>& dataset, const TrainConfig& config,
                               const TrainOptions& options = {});

/// Fusion training in the configured mode. two_stage freezes `segmenter`;
/// the end-to-end modes also update it.
TrainReport train_fusion(FusionModel& model, SegModel& segmenter, const std::vector<TrainExample>& dataset,
                         const TrainConfig& config, const TrainOptions& options = {});

/// Masks for a stack under `source` (one per non-reference frame).
std::vector<MotionMask> masks_for(const ExposureStack& stack, MaskSource source, const SegModel* segmenter,
                                  double diff_threshold);

}  // namespace hdrfuse
