#include <gtest/gtest.h>

#include <cmath>

#include "hdrfuse/error.hpp"
#include "hdrfuse/radiometry.hpp"
#include "hdrfuse/training.hpp"
#include "support.hpp"

namespace hdrfuse {
namespace {

TrainExample example_from(const SynthScene& s, const std::string& id) { return {id, s.stack, s.gt, s.masks}; }

std::vector<TrainExample> tiny_dataset(int count, int size, int frames = 2) {
  std::vector<TrainExample> out;
  const std::vector<int> ev = frames == 2 ? std::vector<int>{-2, 0} : std::vector<int>{-2, 0, 2};
  for (int i = 0; i < count; ++i) {
    out.push_back(example_from(synth_scene(300 + i, size, size, frames, ev), "s" + std::to_string(i)));
  }
  return out;
}

ModelConfig small_model() {
  ModelConfig c;
  c.frames = 2;
  c.memory_slots = 2;
  c.decoder = DecoderKind::Sdc;
  c.decoder_blocks = 1;
  return c;
}

TrainConfig quick(int steps, int patch) {
  TrainConfig t;
  t.lr = 1e-3;
  t.lr_decay = 1.0;
  t.batch_size = 2;
  t.epochs = 1000;
  t.max_steps = steps;
  t.patch = patch;
  return t;
}

// Upper quantile of chi-square with k dof (Wilson-Hilferty).
double chi2_quantile(int k, double z) {
  const double a = 2.0 / (9.0 * k);
  return k * std::pow(1 - a + z * std::sqrt(a), 3);
}

TEST(Schedule, ExactGeometricDecay) {
  TrainConfig c;
  c.lr = 1e-4;
  c.lr_decay = 0.96;
  EXPECT_EQ(lr_at_epoch(c, 0), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at_epoch(c, 3), 1e-4 * 0.96 * 0.96 * 0.96);
}

TEST(TrainConfig, Validation) {
  EXPECT_NO_THROW(TrainConfig{}.validate());
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return testing::error_kind([&] { c.validate(); });
  };
  EXPECT_EQ(bad([](TrainConfig& c) { c.lr = 0; }), ErrorKind::BadConfig);
  EXPECT_EQ(bad([](TrainConfig& c) { c.lr_decay = 1.5; }), ErrorKind::BadConfig);
  EXPECT_EQ(bad([](TrainConfig& c) { c.patch = 30; }), ErrorKind::BadConfig);
  EXPECT_EQ(bad([](TrainConfig& c) { c.batch_size = 0; }), ErrorKind::BadConfig);
  const TrainConfig c = quick(3, 16);
  const auto back = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
}

TEST(Loss, PerfectReconstructionIsZeroForEveryKind) {
  const RadianceImage a{testing::random_tensor({3, 32, 32}, 1, 0, 3)};
  for (auto k : {LossKind::L2, LossKind::L1, LossKind::L2L1, LossKind::L1MsSsim, LossKind::L2MsSsim,
                 LossKind::L1L2MsSsim}) {
    EXPECT_NEAR(loss_tonemapped(a, a, k), 0.0, 1e-12) << to_string(k);
  }
}

TEST(Loss, ConstantTonemappedOffsetClosedForm) {
  const double peak = 2.0, mu = 5000;
  const RadianceImage pred{Tensor::image(3, 16, 16, 1.0)}, gt{Tensor::image(3, 16, 16, 0.25)};
  const double delta = mu_law(0.5, mu) - mu_law(0.125, mu);
  EXPECT_NEAR(loss_tonemapped(pred, gt, LossKind::L2, mu, peak), delta * delta, 1e-14);
  EXPECT_NEAR(loss_tonemapped(pred, gt, LossKind::L1, mu, peak), delta, 1e-14);
  EXPECT_NEAR(loss_tonemapped(pred, gt, LossKind::L2L1, mu, peak), delta * delta + delta, 1e-14);
}

TEST(Loss, CombinationsAreUnweightedSums) {
  const RadianceImage a{testing::random_tensor({3, 32, 32}, 2, 0, 2)}, b{testing::random_tensor({3, 32, 32}, 3, 0, 2)};
  const double l1 = loss_tonemapped(a, b, LossKind::L1), l2 = loss_tonemapped(a, b, LossKind::L2);
  const double ms = loss_tonemapped(a, b, LossKind::L1MsSsim) - l1;
  EXPECT_NEAR(loss_tonemapped(a, b, LossKind::L2MsSsim), l2 + ms, 1e-12);
  EXPECT_NEAR(loss_tonemapped(a, b, LossKind::L1L2MsSsim), l1 + l2 + ms, 1e-12);
  EXPECT_GT(ms, 0.0);
}

TEST(Loss, ShapeMismatchRejected) {
  const RadianceImage a{Tensor::image(3, 4, 4, 1)}, b{Tensor::image(3, 4, 5, 1)};
  EXPECT_EQ(testing::error_kind([&] { loss_tonemapped(a, b, LossKind::L2); }), ErrorKind::ShapeMismatch);
}

TEST(Loss, GradientMatchesFiniteDifferencesForEveryKind) {
  for (auto k : {LossKind::L2, LossKind::L2L1, LossKind::L1L2MsSsim}) {
    auto p = std::make_shared<ag::Parameter>();
    p->name = "pred";
    p->value = testing::random_tensor({3, 32, 32}, 4, 0.1, 2);
    const Tensor gt = testing::random_tensor({3, 32, 32}, 5, 0.1, 2);
    // Per-pixel gradients are ~1e-7 against an O(1) loss; a smaller step drowns in round-off.
    const auto check = testing::check_param_grads(
        {p}, [&](ag::Tape& t) { return loss_tonemapped(t.param(p), t.constant(gt), k, 5000, 2.0); }, 32, 1e-4);
    EXPECT_LT(check.worst, 1e-4) << to_string(k) << " " << check.where;
  }
}

TEST(MsSsim, IdentityIsOneAndBounded) {
  const Tensor a = testing::random_tensor({3, 32, 32}, 6), b = testing::random_tensor({3, 32, 32}, 7);
  EXPECT_NEAR(ms_ssim(a, a), 1.0, 1e-12);
  const double v = ms_ssim(a, b);
  EXPECT_LT(v, 1.0);
  EXPECT_GE(v, 0.0);
  EXPECT_NEAR(ms_ssim(b, a), v, 1e-12);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor p = testing::random_tensor({10}, 8);
  const Tensor before = p, g({10});
  AdamState s;
  for (int i = 0; i < 5; ++i) adam_step({&p}, {&g}, s, 0.1);
  EXPECT_EQ(p.storage(), before.storage());
}

TEST(Adam, ConstantGradientStepApproachesLrSign) {
  Tensor p({2}, std::vector<double>{0, 0});
  const Tensor g({2}, std::vector<double>{3.0, -0.01});
  AdamState s;
  const double lr = 1e-3;
  double last_a = 0, last_b = 0;
  for (int i = 0; i < 2000; ++i) {
    const double a0 = p[0], b0 = p[1];
    adam_step({&p}, {&g}, s, lr);
    last_a = p[0] - a0;
    last_b = p[1] - b0;
  }
  EXPECT_NEAR(last_a, -lr, 1e-9);
  EXPECT_NEAR(last_b, lr, 1e-6);
}

TEST(Adam, FrozenParametersSkipped) {
  auto a = std::make_shared<ag::Parameter>(), b = std::make_shared<ag::Parameter>();
  a->value = Tensor({1}, 1.0);
  a->grad = Tensor({1}, 1.0);
  b->value = Tensor({1}, 1.0);
  b->grad = Tensor({1}, 1.0);
  b->frozen = true;
  AdamState s;
  adam_step({a, b}, s, 0.1);
  EXPECT_NEAR(a->value[0], 0.9, 1e-9);
  EXPECT_EQ(b->value[0], 1.0);
}

TrainExample blank_example(int h, int w) {
  TrainExample ex;
  ex.stack.images = {Tensor::image(1, h, w)};
  ex.stack.ev_bias = {0};
  ex.stack.exposure_times = {1.0};
  ex.gt = RadianceImage{Tensor::image(1, h, w)};
  return ex;
}

TEST(SamplePatch, WindowCornersUniform) {
  const TrainExample ex = blank_example(256, 256);
  const int positions = 129, draws = 10000;
  std::vector<int> ys(positions), xs(positions);
  Rng rng(9);
  for (int i = 0; i < draws; ++i) {
    PatchWindow w;
    sample_patch(ex, 128, rng, &w);
    ++ys[static_cast<std::size_t>(w.y)];
    ++xs[static_cast<std::size_t>(w.x)];
  }
  const double expect = double(draws) / positions;
  double cy = 0, cx = 0;
  for (int i = 0; i < positions; ++i) {
    cy += std::pow(ys[static_cast<std::size_t>(i)] - expect, 2) / expect;
    cx += std::pow(xs[static_cast<std::size_t>(i)] - expect, 2) / expect;
  }
  const double critical = chi2_quantile(positions - 1, 2.3263);  // p = 0.01
  EXPECT_LT(cy, critical);
  EXPECT_LT(cx, critical);
}

TEST(SamplePatch, FullSizeIsWholeImage) {
  const TrainExample ex = tiny_dataset(1, 32)[0];
  Rng rng(1);
  PatchWindow w;
  const TrainExample p = sample_patch(ex, 32, rng, &w);
  EXPECT_EQ(w.y, 0);
  EXPECT_EQ(w.x, 0);
  EXPECT_EQ(p.stack.images[0].storage(), ex.stack.images[0].storage());
  EXPECT_EQ(p.gt.values.storage(), ex.gt.values.storage());
}

TEST(SamplePatch, SameWindowOnEveryImage) {
  const TrainExample ex = tiny_dataset(1, 32, 3)[0];
  Rng rng(2);
  PatchWindow w;
  const TrainExample p = sample_patch(ex, 16, rng, &w);
  auto check = [&](const Tensor& full, const Tensor& cut) {
    ASSERT_EQ(cut.height(), 16);
    for (int c = 0; c < full.channels(); ++c)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) ASSERT_EQ(cut.at(c, y, x), full.at(c, w.y + y, w.x + x));
  };
  for (int k = 0; k < 3; ++k) check(ex.stack.images[k], p.stack.images[k]);
  check(ex.gt.values, p.gt.values);
  for (std::size_t i = 0; i < ex.masks.size(); ++i) {
    check(ex.masks[i].values, p.masks[i].values);
    EXPECT_EQ(p.masks[i].source_index, ex.masks[i].source_index);
  }
}

TEST(SamplePatch, OversizedRejected) {
  const TrainExample ex = blank_example(16, 24);
  Rng rng(3);
  EXPECT_EQ(testing::error_kind([&] { sample_patch(ex, 20, rng); }), ErrorKind::PatchTooLarge);
}

TEST(TrainFusion, OneSmallStepLowersLoss) {
  const auto data = tiny_dataset(1, 16);
  FusionModel model(small_model(), 1);
  SegModel seg({4, 1, 0.5}, 1);
  TrainOptions opt;
  opt.masks = MaskSource::Zero;
  const auto loss_now = [&] {
    const auto& ex = data[0];
    const auto masks = masks_for(ex.stack, MaskSource::Zero, nullptr, 0.1);
    return loss_tonemapped(forward(model, ex.stack, masks), ex.gt, LossKind::L2, kDefaultMu, training_peak(ex.stack));
  };
  const double before = loss_now();
  TrainConfig c = quick(1, 16);
  c.lr = 1e-5;
  train_fusion(model, seg, data, c, opt);
  EXPECT_LT(loss_now(), before);
}

TEST(TrainFusion, TwoStageLeavesSegmenterUntouched) {
  const auto data = tiny_dataset(2, 16);
  FusionModel model(small_model(), 2);
  SegModel seg({4, 1, 0.5}, 2);
  std::vector<Tensor::Storage> before;
  for (const auto& p : seg.params().unique()) before.push_back(p->value.storage());
  train_fusion(model, seg, data, quick(3, 16));
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& p = seg.params().unique()[i];
    EXPECT_EQ(p->value.storage(), before[i]) << p->name;
    EXPECT_EQ(p->grad_writes, 0u) << p->name;
    EXPECT_FALSE(p->frozen);
  }
}

TEST(TrainFusion, EndToEndUpdatesSegmenter) {
  const auto data = tiny_dataset(1, 16);
  FusionModel model(small_model(), 3);
  SegModel seg({4, 1, 0.5}, 3);
  const auto before = seg.params().unique()[0]->value.storage();
  TrainConfig c = quick(2, 16);
  c.mode = TrainMode::EndToEndWithSegLoss;
  train_fusion(model, seg, data, c);
  EXPECT_NE(seg.params().unique()[0]->value.storage(), before);
}

TEST(TrainFusion, DeterministicUnderFixedSeed) {
  const auto data = tiny_dataset(2, 16);
  auto run = [&] {
    FusionModel model(small_model(), 4);
    SegModel seg({4, 1, 0.5}, 4);
    TrainOptions opt;
    opt.masks = MaskSource::Diff;
    TrainConfig c = quick(4, 8);
    c.seed = 5;
    const TrainReport r = train_fusion(model, seg, data, c, opt);
    std::vector<double> flat;
    for (const auto& p : model.params().unique()) flat.insert(flat.end(), p->value.data().begin(), p->value.data().end());
    return std::make_pair(r, flat);
  };
  const auto a = run(), b = run();
  EXPECT_TRUE(a.first.same_trajectory(b.first));
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(a.first.total_steps, 4);
}

TEST(TrainFusion, ModeDataMismatches) {
  auto data = tiny_dataset(1, 16);
  FusionModel model(small_model(), 5);
  SegModel seg({4, 1, 0.5}, 5);
  TrainConfig c = quick(1, 16);
  c.mode = TrainMode::EndToEnd;
  TrainOptions diff;
  diff.masks = MaskSource::Diff;
  EXPECT_EQ(testing::error_kind([&] { train_fusion(model, seg, data, c, diff); }), ErrorKind::ModeDataMismatch);
  c.mode = TrainMode::EndToEndWithSegLoss;
  data[0].masks.clear();
  EXPECT_EQ(testing::error_kind([&] { train_fusion(model, seg, data, c); }), ErrorKind::ModeDataMismatch);
  EXPECT_EQ(testing::error_kind([&] { train_segmentation(seg, data, c); }), ErrorKind::ModeDataMismatch);
}

TEST(TrainFusion, EmptyDatasetRejected) {
  FusionModel model(small_model(), 6);
  SegModel seg({4, 1, 0.5}, 6);
  EXPECT_EQ(testing::error_kind([&] { train_fusion(model, seg, {}, quick(1, 16)); }), ErrorKind::EmptyDataset);
  EXPECT_EQ(testing::error_kind([&] { train_segmentation(seg, {}, quick(1, 16)); }), ErrorKind::EmptyDataset);
}

TEST(TrainFusion, FrameCountMustMatchConcatModel) {
  const auto data = tiny_dataset(1, 16, 3);
  FusionModel model(small_model(), 7);
  SegModel seg({4, 1, 0.5}, 7);
  EXPECT_EQ(testing::error_kind([&] { train_fusion(model, seg, data, quick(1, 16)); }), ErrorKind::ArityMismatch);
}

TEST(TrainFusion, CheckpointAndValidationPerEpoch) {
  testing::TempDir dir("train");
  const auto data = tiny_dataset(2, 16);
  FusionModel model(small_model(), 8);
  SegModel seg({4, 1, 0.5}, 8);
  TrainOptions opt;
  opt.checkpoint = dir / "fusion.ckpt";
  opt.validation = {data[0]};
  opt.masks = MaskSource::Diff;
  int seen = 0;
  opt.on_epoch = [&](const EpochRecord& r) {
    ++seen;
    EXPECT_TRUE(r.val_psnr_l.has_value());
    EXPECT_TRUE(r.val_psnr_t.has_value());
  };
  TrainConfig c = quick(0, 16);
  c.epochs = 2;
  const TrainReport r = train_fusion(model, seg, data, c, opt);
  EXPECT_EQ(seen, 2);
  EXPECT_EQ(r.epochs.size(), 2u);
  EXPECT_EQ(r.total_steps, 2);
  EXPECT_EQ(load_checkpoint(dir / "fusion.ckpt").kind, "fusion");
  r.write_jsonl(dir / "log.jsonl");
  EXPECT_TRUE(std::filesystem::exists(dir / "log.jsonl"));
}

TEST(TrainSegmentation, OnePairOverfitsBelowBce) {
  auto data = tiny_dataset(1, 32);
  SegModel seg({8, 2, 0.5}, 9);
  TrainConfig c = quick(200, 32);
  c.batch_size = 1;
  const TrainReport r = train_segmentation(seg, data, c);
  EXPECT_EQ(r.total_steps, 200);
  EXPECT_LT(r.final_loss, 0.1);
}

TEST(TrainSegmentation, DeterministicUnderFixedSeed) {
  const auto data = tiny_dataset(2, 16, 3);
  auto run = [&] {
    SegModel seg({4, 1, 0.5}, 10);
    return train_segmentation(seg, data, quick(5, 8));
  };
  EXPECT_TRUE(run().same_trajectory(run()));
}

TEST(TrainSegmentation, PatchMustDivideByDepth) {
  const auto data = tiny_dataset(1, 16);
  SegModel seg({4, 3, 0.5}, 11);
  EXPECT_EQ(testing::error_kind([&] { train_segmentation(seg, data, quick(1, 4)); }), ErrorKind::BadConfig);
}

TEST(Workers, EnvironmentFallback) {
  ::unsetenv("HDRFUSE_NUM_WORKERS");
  EXPECT_EQ(workers_from_env(), 1);
  ::setenv("HDRFUSE_NUM_WORKERS", "3", 1);
  EXPECT_EQ(workers_from_env(), 3);
  ::setenv("HDRFUSE_NUM_WORKERS", "zero", 1);
  EXPECT_EQ(workers_from_env(), 1);
  ::unsetenv("HDRFUSE_NUM_WORKERS");
}

TEST(Workers, ThreadedTrainingMatchesSerial) {
  const auto data = tiny_dataset(2, 16);
  auto run = [&](int workers) {
    FusionModel model(small_model(), 12);
    SegModel seg({4, 1, 0.5}, 12);
    TrainOptions opt;
    opt.masks = MaskSource::Diff;
    opt.workers = workers;
    return train_fusion(model, seg, data, quick(2, 16), opt);
  };
  EXPECT_TRUE(run(1).same_trajectory(run(2)));
}

}  // namespace
}  // namespace hdrfuse
