#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdrfuse/params.hpp"
#include "hdrfuse/types.hpp"

namespace hdrfuse {

enum class DecoderKind { Vanilla, ResNet, Sdc, SdcDense };
enum class Aggregator { ConcatFixedK, MeanMax };

std::string to_string(DecoderKind kind);
std::string to_string(Aggregator kind);
DecoderKind parse_decoder(const std::string& name);
Aggregator parse_aggregator(const std::string& name);

struct ModelConfig {
  /// Encoder width; the first stage emits 2x and the second 4x this many channels.
  int enc_channels = 8;
  /// Frame count K expected by concat_fixed_k.
  int frames = 3;
  Aggregator aggregator = Aggregator::ConcatFixedK;
  /// F_D reuses the F_S parameters.
  bool share_fusion = false;
  bool use_memory = true;
  int memory_slots = 3;
  /// One read and one write transform shared by all slots.
  bool share_rw = false;
  DecoderKind decoder = DecoderKind::SdcDense;
  /// Block count for the resnet and sdc decoders.
  int decoder_blocks = 3;
  /// The decoder's softplus output is read as a mu-law code with this mu.
  double output_mu = 5000.0;

  /// Throws BadConfig on non-positive sizes, enc_channels below 8, or
  /// concat_fixed_k with a single frame.
  void validate() const;
  /// Feature channels C = 4 * enc_channels used from the encoder onwards.
  int feature_channels() const { return 4 * enc_channels; }
  /// Channel count produced by `aggregate` for this configuration.
  int aggregate_channels() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Parameters of the fusion network. Parameter name prefixes group the
/// stages: "enc.", "fuse_s.", "fuse_d.", "mem.read", "mem.write", "dec.".
class FusionModel {
 public:
  FusionModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  struct Fusion {
    Conv a, b;
  };
  struct SdcBlock {
    std::vector<Conv> branches;
    Conv project;
  };

  // Graph builders on a tape.
  ag::Var encode(ag::Tape& tape, const ag::Var& ldr, const ag::Var& linear) const;
  ag::Var fuse(ag::Tape& tape, const Fusion& f, const ag::Var& aggregated) const;
  ag::Var write_transform(ag::Tape& tape, const ag::Var& feats, int slot) const;
  ag::Var read_transform(ag::Tape& tape, const ag::Var& slot_value, int slot) const;
  /// Radiance = inverse mu-law of the softplus output at `peak`.
  ag::Var decode(ag::Tape& tape, const ag::Var& fused, const ag::Var& reference_input, double peak) const;

  const Fusion& static_fusion() const { return fuse_s_; }
  const Fusion& dynamic_fusion() const { return fuse_d_; }

 private:
  ModelConfig config_;
  ParamStore store_;
  Conv enc1_, enc2_;
  Fusion fuse_s_, fuse_d_;
  std::vector<Conv> mem_read_, mem_write_;
  Conv dec_head_;
  std::vector<Conv> dec_plain_;
  std::vector<SdcBlock> dec_sdc_;
  Conv up1_, up2_, out_;
};

/// Scalar parameter count, aliased tensors counted once.
std::size_t count_params(const FusionModel& model);
/// Count restricted to parameters whose name starts with `prefix`.
std::size_t count_params(const FusionModel& model, const std::string& prefix);

/// 6-channel network input for one frame: LDR and LDR^gamma / t.
Tensor frame_input(const Tensor& ldr, double exposure_time, double gamma = kDefaultGamma);

/// Radiance that saturates the shortest exposure, 1 / min(t_k).
double saturation_peak(const std::vector<double>& exposure_times);

// ---------------------------------------------------------------------------
// Stage-level operations on plain tensors (no gradient).

/// (C, H/4, W/4) features of one frame. Throws BadSpatialDims unless H and W divide by 4.
Tensor encode(const FusionModel& model, const Tensor& ldr, const Tensor& linear);

/// Static and dynamic parts of `features`. A full-resolution (1,H,W) mask
/// is box-averaged to the feature resolution first.
std::pair<Tensor, Tensor> split_features(const Tensor& features, const Tensor& mask);

/// concat_fixed_k: channel concatenation in input order (needs exactly `k`
/// inputs). mean_max: channel concatenation of the elementwise mean and max.
Tensor aggregate(const std::vector<Tensor>& features, Aggregator mode, int k);

Tensor fuse_static(const FusionModel& model, const Tensor& aggregated);
Tensor fuse_dynamic(const FusionModel& model, const Tensor& aggregated);

struct MemoryState {
  std::vector<Tensor> slots;
};

MemoryState memory_init(const FusionModel& model, int height, int width);
/// slot <- slot + W_write(feats). Throws SlotOutOfRange.
MemoryState memory_write(const FusionModel& model, MemoryState state, const Tensor& feats, int slot);
/// Per-pixel softmax over slots of channel-mean(query * slot), weighting W_read(slot).
Tensor memory_read(const FusionModel& model, const MemoryState& state, const Tensor& query);

/// Full-resolution radiance from the (3C, H/4, W/4) fused tensor and the
/// reference frame's 6-channel input.
RadianceImage decode(const FusionModel& model, const Tensor& fused, const Tensor& reference_input, double peak = 1.0);

// ---------------------------------------------------------------------------
// Whole pipeline.

/// Per-frame graph inputs. An invalid `mask` stands for an all-zero mask.
struct FrameVars {
  ag::Var input;  // (6,H,W) from frame_input
  ag::Var mask;   // (1,H,W)
};

struct FusionGraph {
  ag::Var output;
  std::vector<ag::Var> features, statics, dynamics;
  ag::Var fused_static, fused_dynamic, memory;

  /// Named intermediate values, in evaluation order.
  std::vector<std::pair<std::string, ag::Var>> named() const;
};

/// Builds the differentiable pipeline on `tape`; `peak` is saturation_peak of the frames.
FusionGraph fusion_graph(ag::Tape& tape, const FusionModel& model, const std::vector<FrameVars>& frames,
                         int reference_index, double peak);

struct FusionFrame {
  Tensor ldr;
  double exposure_time = 1.0;
  /// (1,H,W); empty means no motion.
  Tensor mask;
};

/// Runs the pipeline on explicit frames, with no ordering requirement.
/// Throws NumericFailure naming every non-finite intermediate.
RadianceImage forward_frames(const FusionModel& model, const std::vector<FusionFrame>& frames, int reference_index,
                             double gamma = kDefaultGamma);

/// `masks` holds one mask per non-reference frame (matched by source_index).
RadianceImage forward(const FusionModel& model, const ExposureStack& stack, const std::vector<MotionMask>& masks,
                      double gamma = kDefaultGamma);

/// Pairs each non-reference frame of `stack` with its mask; the reference gets none.
std::vector<FusionFrame> frames_from_stack(const ExposureStack& stack, const std::vector<MotionMask>& masks);

}  // namespace hdrfuse
