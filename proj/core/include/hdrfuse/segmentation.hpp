#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdrfuse/params.hpp"
#include "hdrfuse/types.hpp"

namespace hdrfuse {

struct SegmenterConfig {
  int base_channels = 16;
  int depth = 3;
  /// Binarisation threshold for hard masks.
  double threshold = 0.5;

  void validate() const;
};

void to_json(nlohmann::json& j, const SegmenterConfig& c);
/// Rejects unknown keys; missing keys keep their defaults.
void from_json(const nlohmann::json& j, SegmenterConfig& c);

/// U-shaped encoder-decoder: two 3x3 convs per level, box-average
/// downsampling, bilinear upsampling with skip concatenation and a 1x1
/// logit head. Input is source and reference LDR stacked to 6 channels.
class SegModel {
 public:
  SegModel(const SegmenterConfig& config, std::uint64_t seed);

  const SegmenterConfig& config() const { return config_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  /// (1,H,W) logits. Throws BadSpatialDims unless H and W divide by 2^depth.
  ag::Var logits(ag::Tape& tape, const ag::Var& src, const ag::Var& ref) const;
  /// sigmoid(logits).
  ag::Var forward(ag::Tape& tape, const ag::Var& src, const ag::Var& ref) const;

 private:
  struct Level {
    Conv a, b;
  };

  SegmenterConfig config_;
  ParamStore store_;
  std::vector<Level> down_;
  Level bottom_;
  std::vector<Level> up_;
  Conv head_;
};

/// Thresholded difference (max over channels) after brightening the shorter
/// exposure to the longer one. Pixels saturated or black in both images in
/// every channel are left static.
MotionMask diff_segment(const Tensor& src, const Tensor& ref, int ev_src, int ev_ref, double tau,
                        double gamma = kDefaultGamma);
/// One mask per non-reference frame.
std::vector<MotionMask> diff_segment_stack(const ExposureStack& stack, double tau, double gamma = kDefaultGamma);

/// Soft mask in (0,1) from a segmenter.
MotionMask seg_forward(const SegModel& model, const Tensor& src, const Tensor& ref, int source_index = -1);
std::vector<MotionMask> seg_forward_stack(const SegModel& model, const ExposureStack& stack);

/// 1 where the value exceeds tau, else 0.
MotionMask hard_mask(const MotionMask& m, double tau);

struct AnnotationMerge {
  MotionMask merged;    // union
  MotionMask mismatch;  // exclusive or
};

/// Combines two annotators' hard masks. Throws SoftMaskRejected on soft input.
AnnotationMerge merge_annotations(const MotionMask& a, const MotionMask& b);

}  // namespace hdrfuse
