#include "hdrfuse/fusion_net.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "hdrfuse/error.hpp"
#include "hdrfuse/radiometry.hpp"
#include "json_keys.hpp"

namespace hdrfuse {
namespace {

constexpr int kVanillaLayers = 9;
constexpr int kSdcDilations[] = {1, 2, 4};
constexpr double kCodeSharpness = 20.0;

ag::Var one_minus(const ag::Var& m) { return ag::add_scalar(ag::scale(m, -1.0), 1.0); }

ag::Var zeros_like(ag::Tape& tape, const ag::Var& v) { return tape.constant(Tensor(v.value().shape())); }

void require_divisible(const Tensor& t, int f, const char* what) {
  if (t.rank() != 3 || t.height() % f != 0 || t.width() % f != 0) {
    throw Error(ErrorKind::BadSpatialDims, std::string(what) + " input " + t.shape_string() +
                                               " needs height and width divisible by " + std::to_string(f));
  }
}

ag::Var downsample_mask(const ag::Var& mask, const ag::Var& features) {
  const Tensor& m = mask.value();
  const Tensor& e = features.value();
  if (m.rank() != 3 || m.channels() != 1) throw Error(ErrorKind::ShapeMismatch, "mask must be (1,H,W), got " + m.shape_string());
  if (m.height() == e.height() && m.width() == e.width()) return mask;
  const int f = m.height() / e.height();
  if (f * e.height() != m.height() || f * e.width() != m.width()) {
    throw Error(ErrorKind::ShapeMismatch, "mask " + m.shape_string() + " does not match features " + e.shape_string());
  }
  return ag::avg_pool(mask, f);
}

std::pair<ag::Var, ag::Var> split_graph(const ag::Var& features, const ag::Var& mask) {
  const ag::Var m = downsample_mask(mask, features);
  return {ag::mul_broadcast(features, one_minus(m)), ag::mul_broadcast(features, m)};
}

ag::Var aggregate_graph(const std::vector<ag::Var>& parts, Aggregator mode, int k) {
  if (parts.empty()) throw Error(ErrorKind::ArityMismatch, "aggregate needs at least one input");
  for (const auto& p : parts) {
    if (!p.value().same_shape(parts[0].value())) throw Error(ErrorKind::ShapeMismatch, "aggregate inputs differ in shape");
  }
  if (mode == Aggregator::ConcatFixedK) {
    if (static_cast<int>(parts.size()) != k) {
      throw Error(ErrorKind::ArityMismatch, "concat_fixed_k expects " + std::to_string(k) + " frames, got " +
                                                std::to_string(parts.size()));
    }
    return ag::concat(parts);
  }
  return ag::concat({ag::mean_of(parts), ag::max_of(parts)});
}

struct MemoryGraph {
  std::vector<ag::Var> slots;
};

ag::Var memory_read_graph(ag::Tape& tape, const FusionModel& model, const MemoryGraph& mem, const ag::Var& query) {
  std::vector<ag::Var> sims, reads;
  for (std::size_t j = 0; j < mem.slots.size(); ++j) {
    if (!mem.slots[j].value().same_shape(query.value())) {
      throw Error(ErrorKind::ShapeMismatch, "memory query " + query.value().shape_string() + " vs slot " +
                                                mem.slots[j].value().shape_string());
    }
    sims.push_back(ag::channel_mean(ag::mul(query, mem.slots[j])));
    reads.push_back(model.read_transform(tape, mem.slots[j], static_cast<int>(j)));
  }
  const auto weights = ag::softmax_across(sims);
  std::vector<ag::Var> terms;
  for (std::size_t j = 0; j < reads.size(); ++j) terms.push_back(ag::mul_broadcast(reads[j], weights[j]));
  return ag::sum_of(terms);
}

}  // namespace

std::string to_string(DecoderKind kind) {
  switch (kind) {
    case DecoderKind::Vanilla: return "vanilla";
    case DecoderKind::ResNet: return "resnet";
    case DecoderKind::Sdc: return "sdc";
    case DecoderKind::SdcDense: return "sdc_dense";
  }
  return "?";
}

std::string to_string(Aggregator kind) { return kind == Aggregator::MeanMax ? "mean_max" : "concat_fixed_k"; }

DecoderKind parse_decoder(const std::string& name) {
  for (auto k : {DecoderKind::Vanilla, DecoderKind::ResNet, DecoderKind::Sdc, DecoderKind::SdcDense}) {
    if (to_string(k) == name) return k;
  }
  throw Error(ErrorKind::BadConfig, "unknown decoder '" + name + "'");
}

Aggregator parse_aggregator(const std::string& name) {
  for (auto k : {Aggregator::ConcatFixedK, Aggregator::MeanMax}) {
    if (to_string(k) == name) return k;
  }
  throw Error(ErrorKind::BadConfig, "unknown aggregator '" + name + "'");
}

void ModelConfig::validate() const {
  if (enc_channels < 8) throw Error(ErrorKind::BadConfig, "enc_channels must be at least 8");
  if (frames < 1) throw Error(ErrorKind::BadConfig, "frames must be positive");
  if (aggregator == Aggregator::ConcatFixedK && frames < 2) {
    throw Error(ErrorKind::BadConfig, "concat_fixed_k needs frames >= 2");
  }
  if (use_memory && memory_slots < 1) throw Error(ErrorKind::BadConfig, "memory_slots must be positive");
  if (decoder_blocks < 1) throw Error(ErrorKind::BadConfig, "decoder_blocks must be positive");
  if (!(output_mu > 0)) throw Error(ErrorKind::BadConfig, "output_mu must be positive");
}

int ModelConfig::aggregate_channels() const {
  return aggregator == Aggregator::MeanMax ? 2 * feature_channels() : frames * feature_channels();
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"enc_channels", c.enc_channels}, {"frames", c.frames},
       {"aggregator", to_string(c.aggregator)}, {"share_fusion", c.share_fusion},
       {"use_memory", c.use_memory}, {"memory_slots", c.memory_slots},
       {"share_rw", c.share_rw}, {"decoder", to_string(c.decoder)},
       {"decoder_blocks", c.decoder_blocks}, {"output_mu", c.output_mu}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  detail::require_known_keys(j,
                             {"enc_channels", "frames", "aggregator", "share_fusion", "use_memory", "memory_slots",
                              "share_rw", "decoder", "decoder_blocks", "output_mu"},
                             "model");
  detail::read_if(j, "enc_channels", c.enc_channels);
  detail::read_if(j, "frames", c.frames);
  detail::read_if(j, "share_fusion", c.share_fusion);
  detail::read_if(j, "use_memory", c.use_memory);
  detail::read_if(j, "memory_slots", c.memory_slots);
  detail::read_if(j, "share_rw", c.share_rw);
  detail::read_if(j, "decoder_blocks", c.decoder_blocks);
  detail::read_if(j, "output_mu", c.output_mu);
  std::string s;
  if (j.contains("aggregator")) {
    detail::read_if(j, "aggregator", s);
    c.aggregator = parse_aggregator(s);
  }
  if (j.contains("decoder")) {
    detail::read_if(j, "decoder", s);
    c.decoder = parse_decoder(s);
  }
}

FusionModel::FusionModel(const ModelConfig& config, std::uint64_t seed) : config_(config), store_(seed) {
  config_.validate();
  const int c = config_.feature_channels();
  const ag::ConvOptions down{2, 1, 1};
  enc1_ = Conv::make(store_, "enc.1", 6, c / 2, 3, down);
  enc2_ = Conv::make(store_, "enc.2", c / 2, c, 3, down);

  // Bias-free so that all-zero dynamic features stay zero through F_D.
  const int agg = config_.aggregate_channels();
  fuse_s_ = Fusion{Conv::same(store_, "fuse_s.a", agg, c, 3, 1, false), Conv::same(store_, "fuse_s.b", c, c, 3, 1, false)};
  if (config_.share_fusion) {
    store_.alias("fuse_d.a.w", fuse_s_.a.weight);
    store_.alias("fuse_d.b.w", fuse_s_.b.weight);
    fuse_d_ = fuse_s_;
  } else {
    fuse_d_ = Fusion{Conv::same(store_, "fuse_d.a", agg, c, 3, 1, false), Conv::same(store_, "fuse_d.b", c, c, 3, 1, false)};
  }

  if (config_.use_memory) {
    const int m = config_.memory_slots;
    if (config_.share_rw) {
      const Conv r = Conv::same(store_, "mem.read", c, c, 1, 1, false);
      const Conv w = Conv::same(store_, "mem.write", c, c, 1, 1, false);
      mem_read_.assign(static_cast<std::size_t>(m), r);
      mem_write_.assign(static_cast<std::size_t>(m), w);
    } else {
      for (int j = 0; j < m; ++j) mem_read_.push_back(Conv::same(store_, "mem.read" + std::to_string(j), c, c, 1, 1, false));
      for (int j = 0; j < m; ++j) mem_write_.push_back(Conv::same(store_, "mem.write" + std::to_string(j), c, c, 1, 1, false));
    }
  }

  dec_head_ = Conv::same(store_, "dec.head", 3 * c, c, 3);
  const int blocks = config_.decoder_blocks;
  switch (config_.decoder) {
    case DecoderKind::Vanilla:
      for (int i = 0; i < kVanillaLayers; ++i) dec_plain_.push_back(Conv::same(store_, "dec.conv" + std::to_string(i), c, c, 3));
      break;
    case DecoderKind::ResNet:
      for (int b = 0; b < blocks; ++b) {
        dec_plain_.push_back(Conv::same(store_, "dec.res" + std::to_string(b) + ".a", c, c, 3));
        dec_plain_.push_back(Conv::same(store_, "dec.res" + std::to_string(b) + ".b", c, c, 3));
      }
      break;
    case DecoderKind::Sdc:
    case DecoderKind::SdcDense:
      for (int b = 0; b < blocks; ++b) {
        const int in = config_.decoder == DecoderKind::SdcDense ? (b + 1) * c : c;
        const std::string name = "dec.sdc" + std::to_string(b);
        SdcBlock blk;
        for (int d : kSdcDilations) {
          blk.branches.push_back(Conv::same(store_, name + ".d" + std::to_string(d), in, c / 2, 3, d));
        }
        blk.project = Conv::same(store_, name + ".proj", 3 * (c / 2), c, 1);
        dec_sdc_.push_back(std::move(blk));
      }
      break;
  }
  up1_ = Conv::same(store_, "dec.up1", c, c, 3);
  up2_ = Conv::same(store_, "dec.up2", c, c, 3);
  out_ = Conv::same(store_, "dec.out", c + 6, 3, 3);
  out_.weight->value.fill(0.0);
}

ag::Var FusionModel::encode(ag::Tape& tape, const ag::Var& ldr, const ag::Var& linear) const {
  const Tensor& l = ldr.value();
  if (l.rank() != 3 || l.channels() != 3 || !l.same_shape(linear.value())) {
    throw Error(ErrorKind::ShapeMismatch, "encoder expects matching (3,H,W) LDR and linear images");
  }
  require_divisible(l, 4, "encoder");
  return ag::elu(enc2_(tape, ag::elu(enc1_(tape, ag::concat({ldr, linear})))));
}

ag::Var FusionModel::fuse(ag::Tape& tape, const Fusion& f, const ag::Var& aggregated) const {
  if (aggregated.value().channels() != config_.aggregate_channels()) {
    throw Error(ErrorKind::ShapeMismatch, "fusion input has " + std::to_string(aggregated.value().channels()) +
                                              " channels, expected " + std::to_string(config_.aggregate_channels()));
  }
  return ag::elu(f.b(tape, ag::elu(f.a(tape, aggregated))));
}

ag::Var FusionModel::write_transform(ag::Tape& tape, const ag::Var& feats, int slot) const {
  if (slot < 0 || slot >= static_cast<int>(mem_write_.size())) {
    throw Error(ErrorKind::SlotOutOfRange, "memory slot " + std::to_string(slot) + " of " +
                                               std::to_string(mem_write_.size()));
  }
  return mem_write_[static_cast<std::size_t>(slot)](tape, feats);
}

ag::Var FusionModel::read_transform(ag::Tape& tape, const ag::Var& slot_value, int slot) const {
  if (slot < 0 || slot >= static_cast<int>(mem_read_.size())) {
    throw Error(ErrorKind::SlotOutOfRange, "memory slot " + std::to_string(slot) + " of " +
                                               std::to_string(mem_read_.size()));
  }
  return mem_read_[static_cast<std::size_t>(slot)](tape, slot_value);
}

ag::Var FusionModel::decode(ag::Tape& tape, const ag::Var& fused, const ag::Var& reference_input, double peak) const {
  if (!(peak > 0)) throw Error(ErrorKind::BadConfig, "decoder peak must be positive");
  const int c = config_.feature_channels();
  const Tensor& f = fused.value();
  if (f.rank() != 3 || f.channels() != 3 * c) {
    throw Error(ErrorKind::ShapeMismatch, "decoder expects " + std::to_string(3 * c) + " channels, got " + f.shape_string());
  }
  const Tensor& r = reference_input.value();
  if (r.rank() != 3 || r.channels() != 6 || r.height() != 4 * f.height() || r.width() != 4 * f.width()) {
    throw Error(ErrorKind::ShapeMismatch, "reference input " + r.shape_string() + " does not match " + f.shape_string());
  }
  const ag::Var h0 = ag::elu(dec_head_(tape, fused));
  ag::Var x = h0;
  switch (config_.decoder) {
    case DecoderKind::Vanilla:
      for (const Conv& conv : dec_plain_) x = ag::elu(conv(tape, x));
      break;
    case DecoderKind::ResNet:
      for (std::size_t i = 0; i < dec_plain_.size(); i += 2) {
        x = ag::elu(ag::add(x, dec_plain_[i + 1](tape, ag::elu(dec_plain_[i](tape, x)))));
      }
      break;
    case DecoderKind::Sdc:
    case DecoderKind::SdcDense: {
      std::vector<ag::Var> history{h0};
      for (const SdcBlock& blk : dec_sdc_) {
        const ag::Var in = config_.decoder == DecoderKind::SdcDense ? ag::concat(history) : x;
        std::vector<ag::Var> outs;
        for (const Conv& br : blk.branches) outs.push_back(ag::elu(br(tape, in)));
        x = ag::elu(blk.project(tape, ag::concat(outs)));
        history.push_back(x);
      }
      break;
    }
  }
  x = ag::elu(up1_(tape, ag::upsample2x(x)));
  x = ag::elu(up2_(tape, ag::upsample2x(x)));
  // Residual over the reference frame's own mu-law code, kept positive by a
  // sharpened softplus.
  const ag::Var base = ag::mu_law(ag::slice(reference_input, 3, 6), config_.output_mu, peak);
  const ag::Var pre = ag::add(base, out_(tape, ag::concat({x, reference_input})));
  const ag::Var code = ag::scale(ag::softplus(ag::scale(pre, kCodeSharpness)), 1.0 / kCodeSharpness);
  return ag::inv_mu_law(code, config_.output_mu, peak);
}

std::size_t count_params(const FusionModel& model) { return model.params().count(); }

std::size_t count_params(const FusionModel& model, const std::string& prefix) { return model.params().count(prefix); }

Tensor frame_input(const Tensor& ldr, double exposure_time, double gamma) {
  const Tensor linear = ldr_to_hdr_domain(ldr, exposure_time, gamma).values;
  Tensor out = Tensor::image(6, ldr.height(), ldr.width());
  std::copy(ldr.data().begin(), ldr.data().end(), out.data().begin());
  std::copy(linear.data().begin(), linear.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(ldr.size()));
  return out;
}

Tensor encode(const FusionModel& model, const Tensor& ldr, const Tensor& linear) {
  ag::Tape tape(false);
  return model.encode(tape, tape.constant(ldr), tape.constant(linear)).value();
}

std::pair<Tensor, Tensor> split_features(const Tensor& features, const Tensor& mask) {
  ag::Tape tape(false);
  auto [s, d] = split_graph(tape.constant(features), tape.constant(mask));
  return {s.value(), d.value()};
}

Tensor aggregate(const std::vector<Tensor>& features, Aggregator mode, int k) {
  ag::Tape tape(false);
  std::vector<ag::Var> parts;
  for (const Tensor& t : features) parts.push_back(tape.constant(t));
  return aggregate_graph(parts, mode, k).value();
}

Tensor fuse_static(const FusionModel& model, const Tensor& aggregated) {
  ag::Tape tape(false);
  return model.fuse(tape, model.static_fusion(), tape.constant(aggregated)).value();
}

Tensor fuse_dynamic(const FusionModel& model, const Tensor& aggregated) {
  ag::Tape tape(false);
  return model.fuse(tape, model.dynamic_fusion(), tape.constant(aggregated)).value();
}

MemoryState memory_init(const FusionModel& model, int height, int width) {
  const int m = model.config().use_memory ? model.config().memory_slots : 0;
  MemoryState s;
  s.slots.assign(static_cast<std::size_t>(m), Tensor::image(model.config().feature_channels(), height, width));
  return s;
}

MemoryState memory_write(const FusionModel& model, MemoryState state, const Tensor& feats, int slot) {
  if (slot < 0 || slot >= static_cast<int>(state.slots.size())) {
    throw Error(ErrorKind::SlotOutOfRange, "memory slot " + std::to_string(slot) + " of " +
                                               std::to_string(state.slots.size()));
  }
  ag::Tape tape(false);
  Tensor& target = state.slots[static_cast<std::size_t>(slot)];
  const Tensor written = model.write_transform(tape, tape.constant(feats), slot).value();
  if (!written.same_shape(target)) throw Error(ErrorKind::ShapeMismatch, "memory write of " + written.shape_string());
  target += written;
  return state;
}

Tensor memory_read(const FusionModel& model, const MemoryState& state, const Tensor& query) {
  ag::Tape tape(false);
  MemoryGraph mem;
  for (const Tensor& s : state.slots) mem.slots.push_back(tape.constant(s));
  if (mem.slots.empty()) return Tensor(query.shape());
  return memory_read_graph(tape, model, mem, tape.constant(query)).value();
}

RadianceImage decode(const FusionModel& model, const Tensor& fused, const Tensor& reference_input, double peak) {
  ag::Tape tape(false);
  return RadianceImage{model.decode(tape, tape.constant(fused), tape.constant(reference_input), peak).value()};
}

double saturation_peak(const std::vector<double>& exposure_times) {
  if (exposure_times.empty()) throw Error(ErrorKind::ArityMismatch, "no exposure times");
  return 1.0 / *std::min_element(exposure_times.begin(), exposure_times.end());
}

std::vector<std::pair<std::string, ag::Var>> FusionGraph::named() const {
  std::vector<std::pair<std::string, ag::Var>> out;
  for (std::size_t k = 0; k < features.size(); ++k) out.emplace_back("features[" + std::to_string(k) + "]", features[k]);
  for (std::size_t k = 0; k < statics.size(); ++k) out.emplace_back("static[" + std::to_string(k) + "]", statics[k]);
  for (std::size_t k = 0; k < dynamics.size(); ++k) out.emplace_back("dynamic[" + std::to_string(k) + "]", dynamics[k]);
  out.emplace_back("fused_static", fused_static);
  out.emplace_back("fused_dynamic", fused_dynamic);
  out.emplace_back("memory_read", memory);
  out.emplace_back("output", output);
  return out;
}

FusionGraph fusion_graph(ag::Tape& tape, const FusionModel& model, const std::vector<FrameVars>& frames,
                         int reference_index, double peak) {
  const ModelConfig& cfg = model.config();
  const int k = static_cast<int>(frames.size());
  if (reference_index < 0 || reference_index >= k) throw Error(ErrorKind::BadConfig, "reference index out of range");
  if (cfg.aggregator == Aggregator::ConcatFixedK && k != cfg.frames) {
    throw Error(ErrorKind::ArityMismatch, "model expects " + std::to_string(cfg.frames) + " frames, got " +
                                              std::to_string(k));
  }
  FusionGraph g;
  for (int i = 0; i < k; ++i) {
    const FrameVars& f = frames[static_cast<std::size_t>(i)];
    const Tensor& in = f.input.value();
    if (in.rank() != 3 || in.channels() != 6) throw Error(ErrorKind::ShapeMismatch, "frame input must be (6,H,W)");
    const ag::Var e = model.encode(tape, ag::slice(f.input, 0, 3), ag::slice(f.input, 3, 6));
    g.features.push_back(e);
    if (i == reference_index || !f.mask.valid()) {
      g.statics.push_back(e);
      g.dynamics.push_back(zeros_like(tape, e));
    } else {
      auto [s, d] = split_graph(e, f.mask);
      g.statics.push_back(s);
      g.dynamics.push_back(d);
    }
  }
  g.fused_static = model.fuse(tape, model.static_fusion(), aggregate_graph(g.statics, cfg.aggregator, cfg.frames));
  g.fused_dynamic = model.fuse(tape, model.dynamic_fusion(), aggregate_graph(g.dynamics, cfg.aggregator, cfg.frames));

  if (cfg.use_memory) {
    MemoryGraph mem;
    mem.slots.assign(static_cast<std::size_t>(cfg.memory_slots), zeros_like(tape, g.features[0]));
    for (int i = 0; i < k; ++i) {
      const int slot = i % cfg.memory_slots;
      auto& s = mem.slots[static_cast<std::size_t>(slot)];
      s = ag::add(s, model.write_transform(tape, g.features[static_cast<std::size_t>(i)], slot));
    }
    g.memory = memory_read_graph(tape, model, mem, g.features[static_cast<std::size_t>(reference_index)]);
  } else {
    g.memory = zeros_like(tape, g.features[0]);
  }
  const ag::Var fused = ag::concat({g.fused_static, g.fused_dynamic, g.memory});
  g.output = model.decode(tape, fused, frames[static_cast<std::size_t>(reference_index)].input, peak);
  return g;
}

RadianceImage forward_frames(const FusionModel& model, const std::vector<FusionFrame>& frames, int reference_index,
                             double gamma) {
  ag::Tape tape(false);
  std::vector<FrameVars> vars;
  bool any_motion = false;
  std::vector<double> times;
  for (const FusionFrame& f : frames) {
    times.push_back(f.exposure_time);
    FrameVars v{tape.constant(frame_input(f.ldr, f.exposure_time, gamma)), {}};
    if (!f.mask.empty()) {
      v.mask = tape.constant(f.mask);
      any_motion = any_motion || f.mask.max() > 0;
    }
    vars.push_back(v);
  }
  const FusionGraph g = fusion_graph(tape, model, vars, reference_index, saturation_peak(times));

  std::string bad;
  for (const auto& [name, v] : g.named()) {
    if (!v.value().all_finite()) bad += (bad.empty() ? "" : ", ") + name;
  }
  if (!bad.empty()) throw Error(ErrorKind::NumericFailure, "non-finite values in " + bad);
  if (!any_motion) {
    for (const auto& d : g.dynamics) {
      if (d.value().max() != 0.0 || d.value().min() != 0.0) {
        throw std::logic_error("dynamic features must vanish when every mask is zero");
      }
    }
  }
  return RadianceImage{g.output.value()};
}

std::vector<FusionFrame> frames_from_stack(const ExposureStack& stack, const std::vector<MotionMask>& masks) {
  std::vector<FusionFrame> frames;
  for (int k = 0; k < stack.size(); ++k) {
    FusionFrame f{stack.images[static_cast<std::size_t>(k)], stack.exposure_times[static_cast<std::size_t>(k)], {}};
    if (k != stack.reference_index) {
      auto it = std::find_if(masks.begin(), masks.end(), [k](const MotionMask& m) { return m.source_index == k; });
      if (it == masks.end()) throw Error(ErrorKind::ArityMismatch, "no mask for frame " + std::to_string(k));
      f.mask = it->values;
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

RadianceImage forward(const FusionModel& model, const ExposureStack& stack, const std::vector<MotionMask>& masks,
                      double gamma) {
  return forward_frames(model, frames_from_stack(stack, masks), stack.reference_index, gamma);
}

}  // namespace hdrfuse
