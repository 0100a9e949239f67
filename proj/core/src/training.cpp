#include "hdrfuse/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <thread>

#include "hdrfuse/error.hpp"
#include "hdrfuse/metrics.hpp"
#include "json_keys.hpp"

namespace hdrfuse {
namespace {

constexpr int kMsSsimScales = 3;
constexpr double kMsSsimWeights[kMsSsimScales] = {0.0448, 0.2856, 0.3001};
constexpr double kMsSsimFloor = 1e-6;

template <typename E>
struct Named {
  E value;
  const char* name;
};

constexpr Named<LossKind> kLossNames[] = {
    {LossKind::L2, "l2"},
    {LossKind::L1, "l1"},
    {LossKind::L2L1, "l2+l1"},
    {LossKind::L1MsSsim, "l1+msssim"},
    {LossKind::L2MsSsim, "l2+msssim"},
    {LossKind::L1L2MsSsim, "l1+l2+msssim"},
};
constexpr Named<TrainMode> kModeNames[] = {
    {TrainMode::TwoStage, "two_stage"},
    {TrainMode::EndToEnd, "end_to_end"},
    {TrainMode::EndToEndWithSegLoss, "end_to_end_with_seg_loss"},
};
constexpr Named<MaskSource> kMaskNames[] = {
    {MaskSource::Cnn, "cnn"},
    {MaskSource::Diff, "diff"},
    {MaskSource::Zero, "zero"},
};

template <typename E, std::size_t N>
std::string name_of(const Named<E> (&table)[N], E v) {
  for (const auto& n : table)
    if (n.value == v) return n.name;
  return "?";
}

template <typename E, std::size_t N>
E parse_named(const Named<E> (&table)[N], const std::string& s, const char* what) {
  for (const auto& n : table)
    if (s == n.name) return n.value;
  throw Error(ErrorKind::BadConfig, std::string("unknown ") + what + " '" + s + "'");
}

bool uses_l2(LossKind k) {
  return k == LossKind::L2 || k == LossKind::L2L1 || k == LossKind::L2MsSsim || k == LossKind::L1L2MsSsim;
}
bool uses_l1(LossKind k) {
  return k == LossKind::L1 || k == LossKind::L2L1 || k == LossKind::L1MsSsim || k == LossKind::L1L2MsSsim;
}
bool uses_msssim(LossKind k) {
  return k == LossKind::L1MsSsim || k == LossKind::L2MsSsim || k == LossKind::L1L2MsSsim;
}

struct SsimParts {
  ag::Var cs, full;
};

SsimParts ssim_parts(const ag::Var& a, const ag::Var& b) {
  const Tensor& t = a.value();
  int n = std::min({kSsimWindow, t.height(), t.width()});
  if (n % 2 == 0) --n;
  const auto taps = gaussian_taps(n, kSsimSigma);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const ag::Var ma = ag::blur_valid(a, taps), mb = ag::blur_valid(b, taps);
  const ag::Var maa = ag::square(ma), mbb = ag::square(mb), mab = ag::mul(ma, mb);
  const ag::Var saa = ag::sub(ag::blur_valid(ag::square(a), taps), maa);
  const ag::Var sbb = ag::sub(ag::blur_valid(ag::square(b), taps), mbb);
  const ag::Var sab = ag::sub(ag::blur_valid(ag::mul(a, b), taps), mab);
  const ag::Var cs = ag::div(ag::add_scalar(ag::scale(sab, 2.0), c2), ag::add_scalar(ag::add(saa, sbb), c2));
  const ag::Var l = ag::div(ag::add_scalar(ag::scale(mab, 2.0), c1), ag::add_scalar(ag::add(maa, mbb), c1));
  return {ag::mean(cs), ag::mean(ag::mul(l, cs))};
}

MotionMask crop_mask(const MotionMask& m, const PatchWindow& w) {
  return MotionMask{crop(m.values, w.y, w.x, w.size, w.size), m.source_index};
}

std::vector<MotionMask> crop_masks(const std::vector<MotionMask>& ms, const PatchWindow& w) {
  std::vector<MotionMask> out;
  for (const auto& m : ms) out.push_back(crop_mask(m, w));
  return out;
}

const MotionMask& mask_for_frame(const std::vector<MotionMask>& masks, int k) {
  for (const auto& m : masks)
    if (m.source_index == k) return m;
  throw Error(ErrorKind::ModeDataMismatch, "no mask for frame " + std::to_string(k));
}

using GradList = std::vector<std::pair<ag::Parameter*, Tensor>>;

struct SampleResult {
  double loss = 0;
  GradList grads;
};

/// Runs `work(i)` for i in [0,n) on up to `workers` threads.
void parallel_for(int n, int workers, const std::function<void(int)>& work) {
  workers = std::clamp(workers, 1, std::max(n, 1));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) work(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) work(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Averages per-sample gradients in sample order into Parameter::grad.
void reduce_grads(const std::vector<SampleResult>& results, const std::vector<ag::ParamPtr>& params) {
  for (const auto& p : params) p->zero_grad();
  std::vector<ag::Parameter*> touched;
  for (const auto& r : results) {
    for (const auto& [p, g] : r.grads) {
      p->grad += g;
      if (std::find(touched.begin(), touched.end(), p) == touched.end()) touched.push_back(p);
    }
  }
  const double inv = 1.0 / static_cast<double>(results.size());
  for (auto* p : touched) {
    p->grad *= inv;
    ++p->grad_writes;
  }
}

void check_finite(double loss) {
  if (!std::isfinite(loss)) throw Error(ErrorKind::NumericFailure, "training loss became non-finite");
}

void finish_epoch(TrainReport& report, EpochRecord rec, const TrainOptions& options) {
  report.final_loss = rec.mean_loss;
  if (options.on_epoch) options.on_epoch(rec);
  report.epochs.push_back(rec);
}

std::vector<int> shuffled(int n, Rng& rng) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  return order;
}

}  // namespace

std::string to_string(LossKind kind) { return name_of(kLossNames, kind); }
std::string to_string(TrainMode mode) { return name_of(kModeNames, mode); }
std::string to_string(MaskSource source) { return name_of(kMaskNames, source); }
LossKind parse_loss(const std::string& name) { return parse_named(kLossNames, name, "loss"); }
TrainMode parse_mode(const std::string& name) { return parse_named(kModeNames, name, "training mode"); }
MaskSource parse_mask_source(const std::string& name) { return parse_named(kMaskNames, name, "mask source"); }

void TrainConfig::validate() const {
  if (!(lr > 0)) throw Error(ErrorKind::BadConfig, "lr must be positive");
  if (!(lr_decay > 0 && lr_decay <= 1)) throw Error(ErrorKind::BadConfig, "lr_decay must lie in (0,1]");
  if (patch <= 0 || patch % 4 != 0) throw Error(ErrorKind::BadConfig, "patch must be a positive multiple of 4");
  if (batch_size < 1) throw Error(ErrorKind::BadConfig, "batch_size must be at least 1");
  if (epochs < 1) throw Error(ErrorKind::BadConfig, "epochs must be at least 1");
  if (!(mu > 0)) throw Error(ErrorKind::BadConfig, "mu must be positive");
  if (max_steps < 0) throw Error(ErrorKind::BadConfig, "max_steps must not be negative");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr}, {"batch_size", c.batch_size}, {"epochs", c.epochs},
       {"lr_decay", c.lr_decay}, {"patch", c.patch}, {"loss", to_string(c.loss)},
       {"mode", to_string(c.mode)}, {"seed", c.seed}, {"mu", c.mu},
       {"max_steps", c.max_steps}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  detail::require_known_keys(
      j, {"lr", "batch_size", "epochs", "lr_decay", "patch", "loss", "mode", "seed", "mu", "max_steps"}, "train");
  detail::read_if(j, "lr", c.lr);
  detail::read_if(j, "batch_size", c.batch_size);
  detail::read_if(j, "epochs", c.epochs);
  detail::read_if(j, "lr_decay", c.lr_decay);
  detail::read_if(j, "patch", c.patch);
  detail::read_if(j, "seed", c.seed);
  detail::read_if(j, "mu", c.mu);
  detail::read_if(j, "max_steps", c.max_steps);
  std::string s;
  if (j.contains("loss")) {
    detail::read_if(j, "loss", s);
    c.loss = parse_loss(s);
  }
  if (j.contains("mode")) {
    detail::read_if(j, "mode", s);
    c.mode = parse_mode(s);
  }
}

double lr_at_epoch(const TrainConfig& config, int epoch) { return config.lr * std::pow(config.lr_decay, epoch); }

double training_peak(const ExposureStack& stack) { return saturation_peak(stack.exposure_times); }

ag::Var ms_ssim(const ag::Var& a, const ag::Var& b) {
  if (!a.value().same_shape(b.value())) throw Error(ErrorKind::ShapeMismatch, "ms_ssim inputs differ in shape");
  double total = 0;
  for (double w : kMsSsimWeights) total += w;
  ag::Var x = a, y = b, result;
  for (int s = 0; s < kMsSsimScales; ++s) {
    if (s > 0) {
      x = ag::avg_pool(x, 2);
      y = ag::avg_pool(y, 2);
    }
    const SsimParts parts = ssim_parts(x, y);
    const ag::Var term = s + 1 == kMsSsimScales ? parts.full : parts.cs;
    const ag::Var powered = ag::pow_floor(term, kMsSsimWeights[s] / total, kMsSsimFloor);
    result = s == 0 ? powered : ag::mul(result, powered);
  }
  return result;
}

double ms_ssim(const Tensor& a, const Tensor& b) {
  ag::Tape tape(false);
  return ms_ssim(tape.constant(a), tape.constant(b)).value()[0];
}

ag::Var loss_tonemapped(const ag::Var& pred, const ag::Var& gt, LossKind kind, double mu, double peak) {
  if (!pred.value().same_shape(gt.value())) {
    throw Error(ErrorKind::ShapeMismatch, "loss inputs " + pred.value().shape_string() + " vs " + gt.value().shape_string());
  }
  if (!(peak > 0)) throw Error(ErrorKind::BadConfig, "tonemap peak must be positive");
  const ag::Var tp = ag::mu_law(pred, mu, peak), tg = ag::mu_law(gt, mu, peak);
  const ag::Var d = ag::sub(tp, tg);
  std::vector<ag::Var> terms;
  if (uses_l2(kind)) terms.push_back(ag::mean(ag::square(d)));
  if (uses_l1(kind)) terms.push_back(ag::mean(ag::abs(d)));
  if (uses_msssim(kind)) terms.push_back(ag::add_scalar(ag::scale(ms_ssim(tp, tg), -1.0), 1.0));
  return terms.size() == 1 ? terms[0] : ag::sum_of(terms);
}

double loss_tonemapped(const RadianceImage& pred, const RadianceImage& gt, LossKind kind, double mu,
                       std::optional<double> peak) {
  ag::Tape tape(false);
  const double p = peak.value_or(gt.values.max());
  if (!(p > 0)) return loss_tonemapped(tape.constant(pred.values), tape.constant(gt.values), kind, mu, 1.0).value()[0];
  return loss_tonemapped(tape.constant(pred.values), tape.constant(gt.values), kind, mu, p).value()[0];
}

void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads, AdamState& state,
               double lr) {
  if (params.size() != grads.size()) throw Error(ErrorKind::ShapeMismatch, "adam_step needs one gradient per parameter");
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    const auto g = grads[i]->data();
    if (g.size() != p.size()) throw Error(ErrorKind::ShapeMismatch, "adam_step gradient shape");
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = kAdamBeta1 * m[k] + (1.0 - kAdamBeta1) * g[k];
      v[k] = kAdamBeta2 * v[k] + (1.0 - kAdamBeta2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + kAdamEps);
    }
  }
}

void adam_step(const std::vector<ag::ParamPtr>& params, AdamState& state, double lr) {
  std::vector<Tensor*> values;
  std::vector<const Tensor*> grads;
  for (const auto& p : params) {
    if (p->frozen) continue;
    values.push_back(&p->value);
    grads.push_back(&p->grad);
  }
  adam_step(values, grads, state, lr);
}

TrainExample sample_patch(const TrainExample& example, int size, Rng& rng, PatchWindow* window) {
  const int h = example.stack.height(), w = example.stack.width();
  if (size <= 0 || size > std::min(h, w)) {
    throw Error(ErrorKind::PatchTooLarge, "patch " + std::to_string(size) + " exceeds " + std::to_string(h) + "x" +
                                              std::to_string(w));
  }
  const PatchWindow win{rng.uniform_int(0, h - size), rng.uniform_int(0, w - size), size};
  if (window) *window = win;
  TrainExample out;
  out.id = example.id;
  out.stack = example.stack;
  for (Tensor& im : out.stack.images) im = crop(im, win.y, win.x, size, size);
  out.gt = RadianceImage{crop(example.gt.values, win.y, win.x, size, size)};
  out.masks = crop_masks(example.masks, win);
  return out;
}

std::vector<TrainExample> load_examples(const DatasetManifest& manifest, bool require_masks) {
  std::vector<TrainExample> out;
  for (const ManifestEntry& e : manifest.entries) {
    TrainExample ex;
    ex.id = e.id();
    ex.stack = load_stack(e);
    if (!e.gt_hdr) throw Error(ErrorKind::MissingFile, "entry " + e.id() + " has no gt_hdr");
    ex.gt = load_hdr(*e.gt_hdr);
    if (e.gt_masks) {
      ex.masks = load_gt_masks(e);
    } else if (require_masks) {
      throw Error(ErrorKind::ModeDataMismatch, "entry " + e.id() + " has no ground-truth masks");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

void TrainReport::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IOFailure, "cannot write " + path.string());
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  for (const EpochRecord& r : epochs) {
    nlohmann::json j{{"epoch", r.epoch}, {"steps", r.steps}, {"mean_loss", r.mean_loss}, {"lr", r.lr}};
    j["val_psnr_l"] = opt(r.val_psnr_l);
    j["val_psnr_t"] = opt(r.val_psnr_t);
    j["val_iou"] = opt(r.val_iou);
    out << j.dump() << '\n';
  }
  out << nlohmann::json{{"summary", {{"total_steps", total_steps}, {"final_loss", final_loss}, {"wall_seconds", wall_seconds}}}}.dump()
      << '\n';
}

bool TrainReport::same_trajectory(const TrainReport& o) const {
  if (epochs.size() != o.epochs.size() || total_steps != o.total_steps || final_loss != o.final_loss) return false;
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto &a = epochs[i], &b = o.epochs[i];
    if (a.epoch != b.epoch || a.steps != b.steps || a.mean_loss != b.mean_loss || a.lr != b.lr ||
        a.val_psnr_l != b.val_psnr_l || a.val_psnr_t != b.val_psnr_t || a.val_iou != b.val_iou) {
      return false;
    }
  }
  return true;
}

int workers_from_env() {
  const char* v = std::getenv("HDRFUSE_NUM_WORKERS");
  if (!v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  return (end != v && *end == '\0' && n >= 1 && n <= 256) ? static_cast<int>(n) : 1;
}

std::vector<MotionMask> masks_for(const ExposureStack& stack, MaskSource source, const SegModel* segmenter,
                                  double diff_threshold) {
  switch (source) {
    case MaskSource::Cnn:
      if (!segmenter) throw Error(ErrorKind::ModeDataMismatch, "cnn masks need a segmenter");
      return seg_forward_stack(*segmenter, stack);
    case MaskSource::Diff:
      return diff_segment_stack(stack, diff_threshold);
    case MaskSource::Zero: {
      std::vector<MotionMask> masks;
      for (int k = 0; k < stack.size(); ++k) {
        if (k != stack.reference_index) masks.push_back(MotionMask{Tensor::image(1, stack.height(), stack.width()), k});
      }
      return masks;
    }
  }
  return {};
}

TrainReport train_segmentation(SegModel& model, const std::vector<TrainExample>& dataset, const TrainConfig& config,
                               const TrainOptions& options) {
  config.validate();
  if (dataset.empty()) throw Error(ErrorKind::EmptyDataset, "segmentation training needs at least one example");
  const int f = 1 << model.config().depth;
  if (config.patch % f != 0) {
    throw Error(ErrorKind::BadConfig, "patch must divide by " + std::to_string(f) + " for this segmenter");
  }
  struct Item {
    int example, frame;
  };
  std::vector<Item> items;
  for (int e = 0; e < static_cast<int>(dataset.size()); ++e) {
    const TrainExample& ex = dataset[static_cast<std::size_t>(e)];
    if (ex.masks.empty()) throw Error(ErrorKind::ModeDataMismatch, "example " + ex.id + " has no ground-truth masks");
    for (int k = 0; k < ex.stack.size(); ++k) {
      if (k != ex.stack.reference_index) items.push_back({e, k});
    }
  }

  const auto start = std::chrono::steady_clock::now();
  Rng rng(config.seed);
  AdamState adam;
  TrainReport report;
  const auto& params = model.params().unique();
  const int n = static_cast<int>(items.size());
  const int steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.max_steps > 0 && report.total_steps >= config.max_steps) break;
    const double lr = lr_at_epoch(config, epoch);
    const auto order = shuffled(n, rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    double loss_sum = 0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      if (config.max_steps > 0 && report.total_steps >= config.max_steps) break;
      const int b0 = s * config.batch_size, b1 = std::min(n, b0 + config.batch_size);
      std::vector<TrainExample> patches;
      std::vector<int> frames;
      for (int b = b0; b < b1; ++b) {
        const Item& it = items[static_cast<std::size_t>(order[static_cast<std::size_t>(b)])];
        patches.push_back(sample_patch(dataset[static_cast<std::size_t>(it.example)], config.patch, rng));
        frames.push_back(it.frame);
      }
      std::vector<SampleResult> results(patches.size());
      parallel_for(static_cast<int>(patches.size()), options.workers, [&](int i) {
        const TrainExample& p = patches[static_cast<std::size_t>(i)];
        const int k = frames[static_cast<std::size_t>(i)];
        ag::Tape tape;
        const ag::Var logits = model.logits(tape, tape.constant(p.stack.images[static_cast<std::size_t>(k)]),
                                            tape.constant(p.stack.reference()));
        const ag::Var loss = ag::bce_with_logits(logits, mask_for_frame(p.masks, k).values);
        tape.backward(loss);
        results[static_cast<std::size_t>(i)] = {loss.value()[0], tape.param_grads()};
      });
      double batch_loss = 0;
      for (const auto& r : results) batch_loss += r.loss;
      batch_loss /= static_cast<double>(results.size());
      check_finite(batch_loss);
      reduce_grads(results, params);
      adam_step(params, adam, lr);
      loss_sum += batch_loss;
      ++rec.steps;
      ++report.total_steps;
    }
    if (rec.steps == 0) break;
    rec.mean_loss = loss_sum / rec.steps;
    if (!options.validation.empty()) {
      double iou_sum = 0;
      int count = 0;
      for (const TrainExample& v : options.validation) {
        for (const MotionMask& m : seg_forward_stack(model, v.stack)) {
          iou_sum += iou(hard_mask(m, model.config().threshold).values, mask_for_frame(v.masks, m.source_index).values);
          ++count;
        }
      }
      if (count) rec.val_iou = iou_sum / count;
    }
    if (options.checkpoint) save_checkpoint(*options.checkpoint, "segmenter", nlohmann::json(model.config()), model.params());
    finish_epoch(report, rec, options);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

TrainReport train_fusion(FusionModel& model, SegModel& segmenter, const std::vector<TrainExample>& dataset,
                         const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (dataset.empty()) throw Error(ErrorKind::EmptyDataset, "fusion training needs at least one example");
  const bool joint = config.mode != TrainMode::TwoStage;
  const bool seg_loss = config.mode == TrainMode::EndToEndWithSegLoss;
  if (joint && options.masks != MaskSource::Cnn) {
    throw Error(ErrorKind::ModeDataMismatch, to_string(config.mode) + " needs cnn masks");
  }
  if (joint && config.patch % (1 << segmenter.config().depth) != 0) {
    throw Error(ErrorKind::BadConfig, "patch must divide by the segmenter's downsampling factor");
  }
  for (const TrainExample& ex : dataset) {
    if (seg_loss && ex.masks.empty()) {
      throw Error(ErrorKind::ModeDataMismatch, "example " + ex.id + " lacks masks needed by the segmentation loss");
    }
    if (model.config().aggregator == Aggregator::ConcatFixedK && ex.stack.size() != model.config().frames) {
      throw Error(ErrorKind::ArityMismatch, "example " + ex.id + " has " + std::to_string(ex.stack.size()) +
                                                " frames, model expects " + std::to_string(model.config().frames));
    }
  }

  // Segmenter state is restored on exit; two_stage keeps it frozen throughout.
  std::vector<bool> was_frozen;
  for (const auto& p : segmenter.params().unique()) was_frozen.push_back(p->frozen);
  segmenter.params().set_frozen(!joint);
  struct Restore {
    SegModel& seg;
    const std::vector<bool>& flags;
    ~Restore() {
      for (std::size_t i = 0; i < flags.size(); ++i) seg.params().unique()[i]->frozen = flags[i];
    }
  } restore{segmenter, was_frozen};

  // Fixed masks for the non-joint modes, computed once on full images.
  std::vector<std::vector<MotionMask>> fixed_masks;
  if (!joint) {
    for (const TrainExample& ex : dataset) {
      fixed_masks.push_back(masks_for(ex.stack, options.masks, &segmenter, options.diff_threshold));
    }
  }

  std::vector<ag::ParamPtr> params = model.params().unique();
  if (joint) {
    for (const auto& p : segmenter.params().unique()) params.push_back(p);
  }

  const auto start = std::chrono::steady_clock::now();
  Rng rng(config.seed);
  AdamState adam;
  TrainReport report;
  const int n = static_cast<int>(dataset.size());
  const int steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.max_steps > 0 && report.total_steps >= config.max_steps) break;
    const double lr = lr_at_epoch(config, epoch);
    const auto order = shuffled(n, rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    double loss_sum = 0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      if (config.max_steps > 0 && report.total_steps >= config.max_steps) break;
      const int b0 = s * config.batch_size, b1 = std::min(n, b0 + config.batch_size);
      std::vector<TrainExample> patches;
      std::vector<std::vector<MotionMask>> patch_masks;
      for (int b = b0; b < b1; ++b) {
        const int e = order[static_cast<std::size_t>(b)];
        PatchWindow win;
        patches.push_back(sample_patch(dataset[static_cast<std::size_t>(e)], config.patch, rng, &win));
        patch_masks.push_back(joint ? std::vector<MotionMask>{} : crop_masks(fixed_masks[static_cast<std::size_t>(e)], win));
      }
      std::vector<SampleResult> results(patches.size());
      parallel_for(static_cast<int>(patches.size()), options.workers, [&](int i) {
        const TrainExample& p = patches[static_cast<std::size_t>(i)];
        const ExposureStack& st = p.stack;
        ag::Tape tape;
        std::vector<FrameVars> frames;
        std::vector<ag::Var> seg_terms;
        const ag::Var ref = tape.constant(st.reference());
        for (int k = 0; k < st.size(); ++k) {
          const auto ku = static_cast<std::size_t>(k);
          FrameVars fv{tape.constant(frame_input(st.images[ku], st.exposure_times[ku])), {}};
          if (k != st.reference_index) {
            if (joint) {
              const ag::Var logits = segmenter.logits(tape, tape.constant(st.images[ku]), ref);
              fv.mask = ag::sigmoid(logits);
              if (seg_loss) seg_terms.push_back(ag::bce_with_logits(logits, mask_for_frame(p.masks, k).values));
            } else if (options.masks != MaskSource::Zero) {
              fv.mask = tape.constant(mask_for_frame(patch_masks[static_cast<std::size_t>(i)], k).values);
            }
          }
          frames.push_back(fv);
        }
        const FusionGraph g = fusion_graph(tape, model, frames, st.reference_index, training_peak(st));
        ag::Var loss = loss_tonemapped(g.output, tape.constant(p.gt.values), config.loss, config.mu, training_peak(st));
        if (!seg_terms.empty()) {
          seg_terms.insert(seg_terms.begin(), loss);
          loss = ag::sum_of(seg_terms);
        }
        tape.backward(loss);
        results[static_cast<std::size_t>(i)] = {loss.value()[0], tape.param_grads()};
      });
      double batch_loss = 0;
      for (const auto& r : results) batch_loss += r.loss;
      batch_loss /= static_cast<double>(results.size());
      check_finite(batch_loss);
      reduce_grads(results, params);
      adam_step(params, adam, lr);
      loss_sum += batch_loss;
      ++rec.steps;
      ++report.total_steps;
    }
    if (rec.steps == 0) break;
    rec.mean_loss = loss_sum / rec.steps;
    if (!options.validation.empty()) {
      double pl = 0, pt = 0;
      for (const TrainExample& v : options.validation) {
        const auto masks = masks_for(v.stack, options.masks, &segmenter, options.diff_threshold);
        const EvalRow row = evaluate_pair(v.id, forward(model, v.stack, masks), v.gt);
        pl += table_psnr(row.psnr_l);
        pt += table_psnr(row.psnr_t_mu);
      }
      rec.val_psnr_l = pl / static_cast<double>(options.validation.size());
      rec.val_psnr_t = pt / static_cast<double>(options.validation.size());
    }
    if (options.checkpoint) save_checkpoint(*options.checkpoint, "fusion", nlohmann::json(model.config()), model.params());
    if (joint && options.segmenter_checkpoint) {
      save_checkpoint(*options.segmenter_checkpoint, "segmenter", nlohmann::json(segmenter.config()), segmenter.params());
    }
    finish_epoch(report, rec, options);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace hdrfuse
