#pragma once

#include <optional>
#include <vector>

#include "hdrfuse/tensor.hpp"

namespace hdrfuse {

/// Linear-domain HDR image, (3,H,W), nonnegative and finite.
struct RadianceImage {
  Tensor values;

  int height() const { return values.height(); }
  int width() const { return values.width(); }
};

/// Per-pixel membership in the moving region, (1,H,W) in [0,1].
struct MotionMask {
  Tensor values;
  /// Index of the non-reference frame compared against the reference.
  int source_index = -1;

  bool is_hard() const;
};

/// Bracketed LDR frames, each (3,H,W) in [0,1], ordered by exposure.
struct ExposureStack {
  std::vector<Tensor> images;
  std::vector<int> ev_bias;
  /// t_k = 2^(ev_k - ev_ref) with the reference exposure time fixed at 1.
  std::vector<double> exposure_times;
  int reference_index = 0;

  /// Validates invariants and derives exposure times. Pixel values are
  /// clamped to [0,1]. Without `reference_index` the middle frame is used.
  static ExposureStack create(std::vector<Tensor> images, std::vector<int> ev_bias,
                              std::optional<int> reference_index = std::nullopt);

  int size() const { return static_cast<int>(images.size()); }
  int height() const { return images.front().height(); }
  int width() const { return images.front().width(); }
  const Tensor& reference() const { return images[static_cast<std::size_t>(reference_index)]; }
};

inline constexpr double kDefaultGamma = 2.2;

}  // namespace hdrfuse
