#include "hdrfuse/segmentation.hpp"

#include <algorithm>
#include <cmath>

#include "hdrfuse/error.hpp"
#include "hdrfuse/radiometry.hpp"
#include "json_keys.hpp"

namespace hdrfuse {

void SegmenterConfig::validate() const {
  if (base_channels < 4) throw Error(ErrorKind::BadConfig, "segmenter base_channels must be at least 4");
  if (depth < 1) throw Error(ErrorKind::BadConfig, "segmenter depth must be at least 1");
  if (!(threshold > 0 && threshold < 1)) throw Error(ErrorKind::BadConfig, "segmenter threshold must lie in (0,1)");
}

void to_json(nlohmann::json& j, const SegmenterConfig& c) {
  j = {{"base_channels", c.base_channels}, {"depth", c.depth}, {"threshold", c.threshold}};
}

void from_json(const nlohmann::json& j, SegmenterConfig& c) {
  detail::require_known_keys(j, {"base_channels", "depth", "threshold"}, "segmenter");
  detail::read_if(j, "base_channels", c.base_channels);
  detail::read_if(j, "depth", c.depth);
  detail::read_if(j, "threshold", c.threshold);
}

SegModel::SegModel(const SegmenterConfig& config, std::uint64_t seed) : config_(config), store_(seed) {
  config_.validate();
  const int base = config_.base_channels;
  auto width = [base](int level) { return base << level; };
  int in = 6;
  for (int l = 0; l < config_.depth; ++l) {
    const std::string name = "seg.down" + std::to_string(l);
    Level lv{Conv::same(store_, name + ".a", in, width(l), 3), Conv::same(store_, name + ".b", width(l), width(l), 3)};
    down_.push_back(lv);
    in = width(l);
  }
  const int wb = width(config_.depth);
  bottom_ = Level{Conv::same(store_, "seg.bottom.a", in, wb, 3), Conv::same(store_, "seg.bottom.b", wb, wb, 3)};
  up_.resize(static_cast<std::size_t>(config_.depth));
  for (int l = config_.depth - 1; l >= 0; --l) {
    const std::string name = "seg.up" + std::to_string(l);
    up_[static_cast<std::size_t>(l)] = Level{Conv::same(store_, name + ".a", width(l + 1) + width(l), width(l), 3),
                                             Conv::same(store_, name + ".b", width(l), width(l), 3)};
  }
  head_ = Conv::same(store_, "seg.head", width(0), 1, 1);
}

ag::Var SegModel::logits(ag::Tape& tape, const ag::Var& src, const ag::Var& ref) const {
  const auto& s = src.value();
  if (s.rank() != 3 || s.channels() != 3 || !s.same_shape(ref.value())) {
    throw Error(ErrorKind::ShapeMismatch, "segmenter inputs must be matching (3,H,W) images");
  }
  const int f = 1 << config_.depth;
  if (s.height() % f != 0 || s.width() % f != 0) {
    throw Error(ErrorKind::BadSpatialDims,
                "segmenter input " + s.shape_string() + " must divide by " + std::to_string(f));
  }
  std::vector<ag::Var> skips;
  ag::Var x = ag::concat({src, ref});
  for (const Level& lv : down_) {
    x = ag::elu(lv.b(tape, ag::elu(lv.a(tape, x))));
    skips.push_back(x);
    x = ag::avg_pool(x, 2);
  }
  x = ag::elu(bottom_.b(tape, ag::elu(bottom_.a(tape, x))));
  for (int l = config_.depth - 1; l >= 0; --l) {
    const Level& lv = up_[static_cast<std::size_t>(l)];
    x = ag::concat({ag::upsample2x(x), skips[static_cast<std::size_t>(l)]});
    x = ag::elu(lv.b(tape, ag::elu(lv.a(tape, x))));
  }
  return head_(tape, x);
}

ag::Var SegModel::forward(ag::Tape& tape, const ag::Var& src, const ag::Var& ref) const {
  return ag::sigmoid(logits(tape, src, ref));
}

MotionMask diff_segment(const Tensor& src, const Tensor& ref, int ev_src, int ev_ref, double tau, double gamma) {
  if (!src.same_shape(ref) || src.rank() != 3) {
    throw Error(ErrorKind::ShapeMismatch, "diff_segment inputs " + src.shape_string() + " vs " + ref.shape_string());
  }
  // Compare at the longer exposure so that clipping affects both images alike.
  const bool src_longer = ev_src > ev_ref;
  const Tensor lifted = src_longer ? brightness_normalize(ref, src, ev_ref, ev_src, gamma)
                                   : brightness_normalize(src, ref, ev_src, ev_ref, gamma);
  const Tensor& other = src_longer ? src : ref;
  MotionMask m{Tensor::image(1, src.height(), src.width())};
  const int channels = src.channels();
  for (int y = 0; y < src.height(); ++y)
    for (int x = 0; x < src.width(); ++x) {
      double diff = 0;
      bool both_bright = true, both_dark = true;
      for (int c = 0; c < channels; ++c) {
        const double a = lifted.at(c, y, x), b = other.at(c, y, x);
        diff = std::max(diff, std::abs(a - b));
        both_bright = both_bright && a >= 0.99 && b >= 0.99;
        both_dark = both_dark && a <= 0.01 && b <= 0.01;
      }
      m.values.at(0, y, x) = (diff > tau && !both_bright && !both_dark) ? 1.0 : 0.0;
    }
  return m;
}

std::vector<MotionMask> diff_segment_stack(const ExposureStack& stack, double tau, double gamma) {
  std::vector<MotionMask> masks;
  const int r = stack.reference_index;
  for (int k = 0; k < stack.size(); ++k) {
    if (k == r) continue;
    const auto ku = static_cast<std::size_t>(k), ru = static_cast<std::size_t>(r);
    MotionMask m = diff_segment(stack.images[ku], stack.images[ru], stack.ev_bias[ku], stack.ev_bias[ru], tau, gamma);
    m.source_index = k;
    masks.push_back(std::move(m));
  }
  return masks;
}

MotionMask seg_forward(const SegModel& model, const Tensor& src, const Tensor& ref, int source_index) {
  ag::Tape tape(false);
  const ag::Var out = model.forward(tape, tape.constant(src), tape.constant(ref));
  return MotionMask{out.value(), source_index};
}

std::vector<MotionMask> seg_forward_stack(const SegModel& model, const ExposureStack& stack) {
  std::vector<MotionMask> masks;
  for (int k = 0; k < stack.size(); ++k) {
    if (k == stack.reference_index) continue;
    masks.push_back(seg_forward(model, stack.images[static_cast<std::size_t>(k)], stack.reference(), k));
  }
  return masks;
}

MotionMask hard_mask(const MotionMask& m, double tau) {
  MotionMask out = m;
  for (double& v : out.values.data()) v = v > tau ? 1.0 : 0.0;
  return out;
}

AnnotationMerge merge_annotations(const MotionMask& a, const MotionMask& b) {
  if (!a.is_hard() || !b.is_hard()) throw Error(ErrorKind::SoftMaskRejected, "annotations must be hard masks");
  if (!a.values.same_shape(b.values)) throw Error(ErrorKind::ShapeMismatch, "annotations differ in shape");
  AnnotationMerge r{a, a};
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    r.merged.values[i] = std::max(a.values[i], b.values[i]);
    r.mismatch.values[i] = a.values[i] != b.values[i] ? 1.0 : 0.0;
  }
  return r;
}

}  // namespace hdrfuse
