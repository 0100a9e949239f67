#pragma once

#include <optional>
#include <span>
#include <vector>

#include "hdrfuse/types.hpp"

namespace hdrfuse {

inline constexpr double kDefaultMu = 5000.0;
inline constexpr double kTriangleFloor = 1e-6;

struct TonemapParams {
  double mu = kDefaultMu;
  double gamma = kDefaultGamma;

  /// Throws BadConfig unless both are positive.
  void validate() const;
};

/// I^gamma / t, elementwise.
RadianceImage ldr_to_hdr_domain(const Tensor& ldr, double exposure_time, double gamma = kDefaultGamma);

/// Scales a linear image from one exposure to another: x * 2^(ev_dst - ev_src).
Tensor exposure_compensate(const Tensor& linear, int ev_src, int ev_dst);

/// Re-exposes an LDR frame at the reference exposure, clamped to [0,1].
Tensor brightness_normalize(const Tensor& src, const Tensor& ref, int ev_src, int ev_ref,
                            double gamma = kDefaultGamma);

/// Scalar mu-law on a value already divided by its peak.
double mu_law(double normalized, double mu = kDefaultMu);
/// d/dh of mu_law(h / peak).
double mu_law_derivative(double h, double mu, double peak);

/// Mu-law compression after dividing by `peak` (the image maximum when unset).
/// An all-zero image maps to all zeros.
Tensor mu_law_tonemap(const RadianceImage& hdr, double mu = kDefaultMu, std::optional<double> peak = std::nullopt);

/// Global x / (1 + x) curve applied per channel; bounded in [0,1).
Tensor reinhard_tonemap(const RadianceImage& hdr);

/// Hat weight peaking at 0.5, floored at kTriangleFloor.
double triangle_weight(double z);

/// Triangle-weighted radiance merge of aligned frames. Accepts a single frame.
RadianceImage merge_triangle(std::span<const Tensor> images, std::span<const double> exposure_times,
                             double gamma = kDefaultGamma);
RadianceImage merge_triangle(const ExposureStack& stack, double gamma = kDefaultGamma);

/// Replaces masked pixels of every non-reference frame with the reference
/// frame re-exposed to that frame's EV, producing a static stack.
ExposureStack replace_moving_pixels(const ExposureStack& stack, const std::vector<MotionMask>& masks,
                                    double gamma = kDefaultGamma);

/// Classical deghosting: motion replacement followed by triangle merging.
RadianceImage classical_fuse(const ExposureStack& stack, const std::vector<MotionMask>& masks,
                             double gamma = kDefaultGamma);

/// (1,H,W) map of pixels that are below 1.0 in every channel of at least one frame.
Tensor well_exposed_somewhere(const ExposureStack& stack);

}  // namespace hdrfuse
