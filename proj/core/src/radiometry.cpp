#include "hdrfuse/radiometry.hpp"

#include <algorithm>
#include <cmath>

#include "hdrfuse/error.hpp"

namespace hdrfuse {

void TonemapParams::validate() const {
  if (!(mu > 0)) throw Error(ErrorKind::BadConfig, "mu must be positive");
  if (!(gamma > 0)) throw Error(ErrorKind::BadConfig, "gamma must be positive");
}

RadianceImage ldr_to_hdr_domain(const Tensor& ldr, double exposure_time, double gamma) {
  if (!(exposure_time > 0)) throw Error(ErrorKind::NonPositiveExposure, "exposure time must be positive");
  RadianceImage out{ldr};
  for (double& v : out.values.data()) v = std::pow(v, gamma) / exposure_time;
  return out;
}

Tensor exposure_compensate(const Tensor& linear, int ev_src, int ev_dst) {
  Tensor out = linear;
  out *= std::ldexp(1.0, ev_dst - ev_src);
  return out;
}

Tensor brightness_normalize(const Tensor& src, const Tensor& ref, int ev_src, int ev_ref, double gamma) {
  if (!src.same_shape(ref)) throw Error(ErrorKind::ShapeMismatch, "brightness_normalize inputs differ in shape");
  if (ev_src == ev_ref) return src;
  const double gain = std::ldexp(1.0, ev_ref - ev_src);
  Tensor out = src;
  for (double& v : out.data()) v = std::clamp(std::pow(std::pow(v, gamma) * gain, 1.0 / gamma), 0.0, 1.0);
  return out;
}

double mu_law(double normalized, double mu) { return std::log1p(mu * normalized) / std::log1p(mu); }

double mu_law_derivative(double h, double mu, double peak) {
  return (mu / peak) / ((1.0 + mu * h / peak) * std::log1p(mu));
}

Tensor mu_law_tonemap(const RadianceImage& hdr, double mu, std::optional<double> peak) {
  if (!(mu > 0)) throw Error(ErrorKind::BadConfig, "mu must be positive");
  const double p = peak.value_or(hdr.values.max());
  Tensor out(hdr.values.shape());
  if (!(p > 0)) return out;
  const auto in = hdr.values.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = mu_law(in[i] / p, mu);
  return out;
}

Tensor reinhard_tonemap(const RadianceImage& hdr) {
  Tensor out = hdr.values;
  for (double& v : out.data()) v = v / (1.0 + v);
  return out;
}

double triangle_weight(double z) {
  const double hat = z <= 0.5 ? z : 1.0 - z;
  return std::max(hat, 0.0) + kTriangleFloor;
}

RadianceImage merge_triangle(std::span<const Tensor> images, std::span<const double> exposure_times, double gamma) {
  if (images.empty() || images.size() != exposure_times.size()) {
    throw Error(ErrorKind::ArityMismatch, "merge_triangle needs one exposure time per image");
  }
  for (const Tensor& im : images) {
    if (!im.same_shape(images[0])) throw Error(ErrorKind::ShapeMismatch, "merge_triangle inputs differ in shape");
  }
  for (double t : exposure_times) {
    if (!(t > 0)) throw Error(ErrorKind::NonPositiveExposure, "exposure time must be positive");
  }
  if (images.size() == 1) return ldr_to_hdr_domain(images[0], exposure_times[0], gamma);

  RadianceImage out{Tensor(images[0].shape())};
  auto o = out.values.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    double num = 0, den = 0;
    for (std::size_t k = 0; k < images.size(); ++k) {
      const double z = images[k][i];
      const double w = triangle_weight(z);
      num += w * std::pow(z, gamma) / exposure_times[k];
      den += w;
    }
    o[i] = num / den;
  }
  return out;
}

RadianceImage merge_triangle(const ExposureStack& stack, double gamma) {
  return merge_triangle(stack.images, stack.exposure_times, gamma);
}

ExposureStack replace_moving_pixels(const ExposureStack& stack, const std::vector<MotionMask>& masks,
                                    double gamma) {
  ExposureStack out = stack;
  const Tensor& ref = stack.reference();
  const int ev_ref = stack.ev_bias[static_cast<std::size_t>(stack.reference_index)];
  for (const MotionMask& m : masks) {
    const int k = m.source_index;
    if (k < 0 || k >= stack.size() || k == stack.reference_index) {
      throw Error(ErrorKind::BadConfig, "mask source_index " + std::to_string(k) + " is not a non-reference frame");
    }
    if (m.values.height() != stack.height() || m.values.width() != stack.width()) {
      throw Error(ErrorKind::ShapeMismatch, "mask does not match stack size");
    }
    const Tensor compensated = brightness_normalize(ref, ref, ev_ref, stack.ev_bias[static_cast<std::size_t>(k)], gamma);
    Tensor& img = out.images[static_cast<std::size_t>(k)];
    for (int y = 0; y < stack.height(); ++y)
      for (int x = 0; x < stack.width(); ++x) {
        if (m.values.at(0, y, x) < 0.5) continue;
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = compensated.at(c, y, x);
      }
  }
  return out;
}

RadianceImage classical_fuse(const ExposureStack& stack, const std::vector<MotionMask>& masks, double gamma) {
  return merge_triangle(replace_moving_pixels(stack, masks, gamma), gamma);
}

Tensor well_exposed_somewhere(const ExposureStack& stack) {
  Tensor out = Tensor::image(1, stack.height(), stack.width());
  for (int y = 0; y < stack.height(); ++y)
    for (int x = 0; x < stack.width(); ++x)
      for (const Tensor& im : stack.images) {
        if (im.at(0, y, x) < 1.0 && im.at(1, y, x) < 1.0 && im.at(2, y, x) < 1.0) {
          out.at(0, y, x) = 1.0;
          break;
        }
      }
  return out;
}

}  // namespace hdrfuse
