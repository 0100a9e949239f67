#include "commands.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "hdrfuse/fusion_net.hpp"
#include "hdrfuse/metrics.hpp"
#include "hdrfuse/radiometry.hpp"
#include "hdrfuse/segmentation.hpp"
#include "hdrfuse/stack_io.hpp"
#include "hdrfuse/training.hpp"
#include "run_config.hpp"

namespace hdrfuse::cli {
namespace {

namespace fs = std::filesystem;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string device = "cpu";
};

RunConfig resolve(const Globals& g, std::optional<RunConfig> base = std::nullopt) {
  if (g.device != "cpu") throw Error(ErrorKind::BadConfig, "device '" + g.device + "' is not available; use cpu");
  RunConfig c = base ? *base : (g.config.empty() ? RunConfig{} : load_run_config(g.config));
  c.apply_seed(g.seed.value_or(c.seed));
  if (!g.out.empty()) c.out_dir = g.out;
  c.validate();
  return c;
}

SegModel load_segmenter(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "segmenter") throw Error(ErrorKind::ModelMismatch, path.string() + " holds a " + ck.kind + " model");
  SegmenterConfig cfg;
  from_json(ck.config, cfg);
  SegModel m(cfg, 0);
  apply_checkpoint(ck, m.params());
  return m;
}

FusionModel load_fusion(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "fusion") throw Error(ErrorKind::ModelMismatch, path.string() + " holds a " + ck.kind + " model");
  ModelConfig cfg;
  from_json(ck.config, cfg);
  FusionModel m(cfg, 0);
  apply_checkpoint(ck, m.params());
  return m;
}

std::vector<MotionMask> classical_masks(const RunConfig& c, const ExposureStack& stack, const SegModel* seg) {
  std::vector<MotionMask> masks = masks_for(stack, c.mask_source, seg, c.diff_threshold);
  if (c.mask_source == MaskSource::Cnn) {
    for (auto& m : masks) m = hard_mask(m, seg->config().threshold);
  }
  return masks;
}

RadianceImage predict(const RunConfig& c, const ExposureStack& stack, const SegModel* seg, const FusionModel* fusion) {
  if (c.pipeline == Pipeline::Classical) return classical_fuse(stack, classical_masks(c, stack, seg));
  const ModelConfig& mc = fusion->config();
  if (mc.aggregator == Aggregator::ConcatFixedK && stack.size() != mc.frames) {
    throw Error(ErrorKind::ArityMismatch, "checkpoint expects " + std::to_string(mc.frames) + " frames, stack has " +
                                              std::to_string(stack.size()));
  }
  return forward(*fusion, stack, masks_for(stack, c.mask_source, seg, c.diff_threshold));
}

void write_prediction(const RadianceImage& img, const fs::path& dir, const std::string& id) {
  fs::create_directories(dir);
  save_hdr(img, dir / (id + ".pfm"));
  save_png(mu_law_tonemap(img), dir / (id + "_preview.png"));
}

std::optional<SegModel> segmenter_if_needed(const RunConfig& c) {
  if (c.mask_source != MaskSource::Cnn) return std::nullopt;
  if (!c.segmenter_checkpoint) throw Error(ErrorKind::BadConfig, "cnn masks need --seg-ckpt");
  return load_segmenter(*c.segmenter_checkpoint);
}

TrainOptions train_options(const RunConfig& c) {
  TrainOptions o;
  o.workers = workers_from_env();
  o.masks = c.mask_source;
  o.diff_threshold = c.diff_threshold;
  o.on_epoch = [](const EpochRecord& r) {
    std::printf("epoch %d  loss %.6g  lr %.4g", r.epoch, r.mean_loss, r.lr);
    if (r.val_psnr_t) std::printf("  val psnr-t %.3f", *r.val_psnr_t);
    if (r.val_iou) std::printf("  val iou %.4f", *r.val_iou);
    std::printf("\n");
  };
  if (c.val_manifest) o.validation = load_examples(load_manifest(*c.val_manifest), false);
  return o;
}

std::string require_manifest(const std::optional<std::string>& m, const char* what) {
  if (!m) throw Error(ErrorKind::BadConfig, std::string("missing ") + what + " manifest");
  return *m;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  int count = 4;
  int size = 64;
  std::vector<int> ev{-2, 0, 2};
  bool still = false;
  bool occlude = false;
};

int cmd_synth(const Globals& g, const SynthArgs& a) {
  RunConfig c = resolve(g);
  if (a.count < 0) throw Error(ErrorKind::BadConfig, "count must not be negative");
  const fs::path out = c.out_dir;
  fs::create_directories(out);
  DatasetManifest manifest;
  for (int i = 0; i < a.count; ++i) {
    SynthOptions opt;
    if (a.still) opt.velocity = std::pair{0, 0};
    opt.occlude_saturated = a.occlude;
    char name[32];
    std::snprintf(name, sizeof name, "scene_%04d", i);
    const SynthScene s = synth_scene(c.seed * 100003ULL + static_cast<std::uint64_t>(i), a.size, a.size,
                                     static_cast<int>(a.ev.size()), a.ev, opt);
    manifest.entries.push_back(write_scene(s, out / name));
  }
  save_manifest(manifest, out / "manifest.json");
  write_resolved(c, "synth",
                 {{"count", a.count}, {"size", a.size}, {"ev", a.ev}, {"static", a.still}, {"occlude", a.occlude}}, out);
  std::printf("wrote %d scenes to %s\n", a.count, out.string().c_str());
  return kExitOk;
}

struct FuseArgs {
  std::string stack;
  std::string method;
  std::string mask_source;
  std::string fusion_ckpt, seg_ckpt;
};

int cmd_fuse(const Globals& g, const FuseArgs& a) {
  RunConfig c = resolve(g);
  if (a.method == "classical") c.pipeline = Pipeline::Classical;
  if (a.method == "neural") c.pipeline = Pipeline::Neural;
  if (!a.mask_source.empty()) {
    c.mask_source = parse_mask_source(a.mask_source);
  } else if (c.pipeline == Pipeline::Classical && g.config.empty()) {
    c.mask_source = MaskSource::Diff;
  }
  if (!a.fusion_ckpt.empty()) c.fusion_checkpoint = a.fusion_ckpt;
  if (!a.seg_ckpt.empty()) c.segmenter_checkpoint = a.seg_ckpt;
  const ManifestEntry entry = entry_from_stack_dir(a.stack);
  const ExposureStack stack = load_stack(entry);
  const auto seg = segmenter_if_needed(c);
  std::optional<FusionModel> fusion;
  if (c.pipeline == Pipeline::Neural) {
    if (!c.fusion_checkpoint) throw Error(ErrorKind::BadConfig, "neural fusion needs --fusion-ckpt");
    fusion = load_fusion(*c.fusion_checkpoint);
  }
  const RadianceImage img = predict(c, stack, seg ? &*seg : nullptr, fusion ? &*fusion : nullptr);
  write_prediction(img, c.out_dir, entry.id());
  write_resolved(c, "fuse", {{"stack", a.stack}}, c.out_dir);
  std::printf("wrote %s\n", (fs::path(c.out_dir) / (entry.id() + ".pfm")).string().c_str());
  return kExitOk;
}

struct SegmentArgs {
  std::string stack;
  std::string method = "diff";
  std::string seg_ckpt;
};

int cmd_segment(const Globals& g, const SegmentArgs& a) {
  RunConfig c = resolve(g);
  c.mask_source = parse_mask_source(a.method);
  if (!a.seg_ckpt.empty()) c.segmenter_checkpoint = a.seg_ckpt;
  const ExposureStack stack = load_stack(entry_from_stack_dir(a.stack));
  const auto seg = segmenter_if_needed(c);
  const fs::path out = c.out_dir;
  fs::create_directories(out);
  for (const MotionMask& m : masks_for(stack, c.mask_source, seg ? &*seg : nullptr, c.diff_threshold)) {
    save_mask(m, out / ("mask_" + std::to_string(m.source_index) + ".png"));
  }
  write_resolved(c, "segment", {{"stack", a.stack}, {"method", a.method}}, out);
  return kExitOk;
}

int cmd_train_seg(const Globals& g, const std::string& train_manifest) {
  RunConfig c = resolve(g);
  if (!train_manifest.empty()) c.train_manifest = train_manifest;
  const auto data = load_examples(load_manifest(require_manifest(c.train_manifest, "training")), true);
  const fs::path out = c.out_dir;
  fs::create_directories(out);
  write_resolved(c, "train-seg", nlohmann::json::object(), out);
  SegModel seg(c.segmenter, c.seed + 1);
  TrainOptions o = train_options(c);
  o.checkpoint = out / "segmenter.ckpt";
  train_segmentation(seg, data, c.seg_train, o).write_jsonl(out / "seg_report.jsonl");
  return kExitOk;
}

int cmd_train_fusion(const Globals& g, const std::string& train_manifest, const std::string& seg_ckpt) {
  RunConfig c = resolve(g);
  if (!train_manifest.empty()) c.train_manifest = train_manifest;
  if (!seg_ckpt.empty()) c.segmenter_checkpoint = seg_ckpt;
  const bool seg_loss = c.train.mode == TrainMode::EndToEndWithSegLoss;
  const auto data = load_examples(load_manifest(require_manifest(c.train_manifest, "training")), seg_loss);
  const fs::path out = c.out_dir;
  fs::create_directories(out);
  write_resolved(c, "train-fusion", nlohmann::json::object(), out);
  auto loaded = segmenter_if_needed(c);
  SegModel seg = loaded ? std::move(*loaded) : SegModel(c.segmenter, c.seed + 1);
  FusionModel model(c.model, c.seed);
  TrainOptions o = train_options(c);
  o.checkpoint = out / "fusion.ckpt";
  o.segmenter_checkpoint = out / "segmenter.ckpt";
  train_fusion(model, seg, data, c.train, o).write_jsonl(out / "fusion_report.jsonl");
  return kExitOk;
}

int cmd_eval(const Globals& g, const std::string& pred, const std::string& manifest, const std::string& vdp) {
  RunConfig c = resolve(g);
  EvalOptions opt;
  opt.mu = c.train.mu;
  if (!vdp.empty()) opt.hdr_vdp2_scores = vdp;
  const EvalReport r = evaluate(pred, load_manifest(manifest), opt);
  const fs::path out = c.out_dir;
  fs::create_directories(out);
  r.write_csv(out / "eval.csv");
  r.write_json(out / "eval.json");
  write_resolved(c, "eval", {{"pred", pred}, {"manifest", manifest}}, out);
  const EvalRow m = r.aggregate();
  std::printf("psnr_l %.3f  psnr_t_mu %.3f  ssim_l %.4f\n", m.psnr_l, m.psnr_t_mu, m.ssim_l);
  return kExitOk;
}

int cmd_ablate(const Globals& g, const std::string& name, const std::string& data, const std::string& val) {
  RunConfig c = resolve(g, preset(name));
  c.train_manifest = data;
  c.val_manifest = val.empty() ? data : val;
  const fs::path out = c.out_dir;
  fs::create_directories(out);
  write_resolved(c, "ablate", {{"preset", name}}, out);

  const bool needs_seg = c.mask_source == MaskSource::Cnn;
  const DatasetManifest train_m = load_manifest(*c.train_manifest);
  const auto train = load_examples(train_m, needs_seg);
  TrainOptions o = train_options(c);
  o.validation.clear();

  SegModel seg(c.segmenter, c.seed + 1);
  if (needs_seg) {
    if (c.segmenter_checkpoint) {
      seg = load_segmenter(*c.segmenter_checkpoint);
    } else {
      TrainOptions so = o;
      so.checkpoint = out / "segmenter.ckpt";
      train_segmentation(seg, train, c.seg_train, so).write_jsonl(out / "seg_report.jsonl");
    }
  }
  std::optional<FusionModel> model;
  if (c.pipeline == Pipeline::Neural) {
    model.emplace(c.model, c.seed);
    TrainOptions fo = o;
    fo.checkpoint = out / "fusion.ckpt";
    train_fusion(*model, seg, train, c.train, fo).write_jsonl(out / "fusion_report.jsonl");
  }

  const DatasetManifest val_m = load_manifest(*c.val_manifest);
  for (const ManifestEntry& e : val_m.entries) {
    write_prediction(predict(c, load_stack(e), needs_seg ? &seg : nullptr, model ? &*model : nullptr), out / "pred",
                     e.id());
  }
  EvalOptions eo;
  eo.mu = c.train.mu;
  const EvalReport r = evaluate(out / "pred", val_m, eo);
  r.write_csv(out / "eval.csv");
  r.write_json(out / "eval.json");
  const EvalRow m = r.aggregate();
  std::ofstream row(out / "ablation_row.csv");
  row << "preset,psnr_l,psnr_t_mu,psnr_t_reinhard,ssim_l,ssim_t_mu\n"
      << name << ',' << m.psnr_l << ',' << m.psnr_t_mu << ',' << m.psnr_t_reinhard << ',' << m.ssim_l << ','
      << m.ssim_t_mu << '\n';
  if (!row) throw Error(ErrorKind::IOFailure, "cannot write ablation row");
  std::printf("%s  psnr_l %.3f  psnr_t_mu %.3f\n", name.c_str(), m.psnr_l, m.psnr_t_mu);
  return kExitOk;
}

}  // namespace

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MissingFile:
    case ErrorKind::IOFailure:
    case ErrorKind::CorruptHeader:
    case ErrorKind::WrongChannelCount:
    case ErrorKind::MissingPrediction:
      return kExitIO;
    case ErrorKind::ShapeMismatch:
    case ErrorKind::BadEV:
    case ErrorKind::BadSpatialDims:
    case ErrorKind::ArityMismatch:
    case ErrorKind::ModeDataMismatch:
    case ErrorKind::ModelMismatch:
      return kExitMismatch;
    case ErrorKind::NumericFailure:
      return kExitNumeric;
    default:
      return kExitConfig;
  }
}

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Segmentation-guided HDR exposure fusion", "hdrfuse"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "Run configuration JSON");
  auto* seed_opt = app.add_option("--seed", seed, "Seed for data, initialisation and sampling");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--device", g.device, "Compute device")->check(CLI::IsMember({"cpu", "accelerator"}));

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Write synthetic scenes and a manifest");
  s_synth->add_option("--count", synth.count);
  s_synth->add_option("--size", synth.size);
  s_synth->add_option("--ev", synth.ev, "EV offsets, e.g. --ev=-2,0,2")->delimiter(',');
  s_synth->add_flag("--static", synth.still, "No object motion");
  s_synth->add_flag("--occlude", synth.occlude, "Hide a saturated patch behind the moving object");

  FuseArgs fuse;
  auto* s_fuse = app.add_subcommand("fuse", "Fuse one stack directory");
  s_fuse->add_option("--stack", fuse.stack)->required();
  s_fuse->add_option("--method", fuse.method)->check(CLI::IsMember({"classical", "neural"}));
  s_fuse->add_option("--mask-source", fuse.mask_source)->check(CLI::IsMember({"cnn", "diff", "zero"}));
  s_fuse->add_option("--fusion-ckpt", fuse.fusion_ckpt);
  s_fuse->add_option("--seg-ckpt", fuse.seg_ckpt);

  SegmentArgs seg;
  auto* s_seg = app.add_subcommand("segment", "Write motion masks for one stack directory");
  s_seg->add_option("--stack", seg.stack)->required();
  s_seg->add_option("--method", seg.method)->check(CLI::IsMember({"cnn", "diff", "zero"}));
  s_seg->add_option("--seg-ckpt", seg.seg_ckpt);

  std::string train_manifest, seg_ckpt;
  auto* s_tseg = app.add_subcommand("train-seg", "Train the motion segmenter");
  s_tseg->add_option("--train", train_manifest);
  auto* s_tfus = app.add_subcommand("train-fusion", "Train the fusion network");
  s_tfus->add_option("--train", train_manifest);
  s_tfus->add_option("--seg-ckpt", seg_ckpt);

  std::string pred, manifest, vdp;
  auto* s_eval = app.add_subcommand("eval", "Score predictions against ground truth");
  s_eval->add_option("--pred", pred)->required();
  s_eval->add_option("--manifest", manifest)->required();
  s_eval->add_option("--hdr-vdp2", vdp, "CSV of id,score from an external evaluator");

  std::string preset_name, data, val;
  auto* s_abl = app.add_subcommand("ablate", "Train and evaluate one ablation preset");
  s_abl->add_option("--preset", preset_name)->required()->check(CLI::IsMember(preset_names()));
  s_abl->add_option("--data", data)->required();
  s_abl->add_option("--val", val);

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }
  if (seed_opt->count()) g.seed = seed;

  try {
    if (*s_synth) return cmd_synth(g, synth);
    if (*s_fuse) return cmd_fuse(g, fuse);
    if (*s_seg) return cmd_segment(g, seg);
    if (*s_tseg) return cmd_train_seg(g, train_manifest);
    if (*s_tfus) return cmd_train_fusion(g, train_manifest, seg_ckpt);
    if (*s_eval) return cmd_eval(g, pred, manifest, vdp);
    if (*s_abl) return cmd_ablate(g, preset_name, data, val);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIO;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kExitConfig;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args);
}

}  // namespace hdrfuse::cli
