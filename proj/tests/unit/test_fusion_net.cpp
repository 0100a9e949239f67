#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "hdrfuse/error.hpp"
#include "hdrfuse/fusion_net.hpp"
#include "hdrfuse/params.hpp"
#include "hdrfuse/training.hpp"
#include "support.hpp"

namespace hdrfuse {
namespace {

ModelConfig micro(DecoderKind decoder = DecoderKind::SdcDense) {
  ModelConfig c;
  c.enc_channels = 8;
  c.frames = 2;
  c.memory_slots = 2;
  c.decoder = decoder;
  c.decoder_blocks = 2;
  return c;
}

// The output layer starts at zero, which hides everything upstream of it.
void randomize_output_layer(FusionModel& model, std::uint64_t seed) {
  auto w = model.params().at("dec.out.w");
  w->value = glorot_init(w->value.shape(), seed);
}

std::vector<FusionFrame> random_frames(int k, int size, std::uint64_t seed, bool masks) {
  std::vector<FusionFrame> frames;
  for (int i = 0; i < k; ++i) {
    FusionFrame f{testing::random_tensor({3, size, size}, seed + 10 * i), std::pow(2.0, 2 * (i - k / 2)), {}};
    if (masks) f.mask = testing::random_tensor({1, size, size}, seed + 10 * i + 1);
    frames.push_back(std::move(f));
  }
  return frames;
}

// y[o] = sum_i w[o,i] x[i] per pixel.
Tensor conv1x1(const Tensor& w, const Tensor& x) {
  Tensor y = Tensor::image(w.dim(0), x.height(), x.width());
  for (int o = 0; o < w.dim(0); ++o)
    for (int i = 0; i < w.dim(1); ++i)
      for (int p = 0; p < x.height(); ++p)
        for (int q = 0; q < x.width(); ++q) y.at(o, p, q) += w[static_cast<std::size_t>(o * w.dim(1) + i)] * x.at(i, p, q);
  return y;
}

TEST(Encode, ShapeDeterminismAndZeroInput) {
  const FusionModel model(micro(), 1);
  const Tensor ldr = testing::random_tensor({3, 64, 64}, 2), lin = testing::random_tensor({3, 64, 64}, 3);
  const Tensor e = encode(model, ldr, lin);
  EXPECT_EQ(e.shape(), (std::vector<int>{32, 16, 16}));
  EXPECT_EQ(encode(model, ldr, lin).storage(), e.storage());
  {
    const auto r1 = encode(model, Tensor::image(3, 8, 8), Tensor::image(3, 8, 8));
    for (double v : r1.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Encode, IndivisibleDimsRejected) {
  const FusionModel model(micro(), 1);
  EXPECT_EQ(testing::error_kind([&] { encode(model, Tensor::image(3, 18, 16), Tensor::image(3, 18, 16)); }),
            ErrorKind::BadSpatialDims);
}

TEST(SplitFeatures, ZeroAndOneMasks) {
  const Tensor e = testing::random_tensor({4, 4, 4}, 4, -1, 1);
  const auto [s0, d0] = split_features(e, Tensor::image(1, 16, 16, 0.0));
  EXPECT_EQ(s0.storage(), e.storage());
  for (double v : d0.data()) EXPECT_EQ(v, 0.0);
  const auto [s1, d1] = split_features(e, Tensor::image(1, 16, 16, 1.0));
  for (double v : s1.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(d1.storage(), e.storage());
}

TEST(SplitFeatures, PartsSumToFeatures) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor e = testing::random_tensor({4, 4, 4}, seed, -3, 3);
    const Tensor m = testing::random_tensor({1, 16, 16}, seed + 50);
    auto [s, d] = split_features(e, m);
    s += d;
    EXPECT_LT(testing::max_abs_diff(s, e), 1e-12);
  }
}

TEST(SplitFeatures, MaskBoxAveragedToFeatureGrid) {
  const Tensor e = Tensor::image(1, 1, 1, 2.0);
  Tensor m = Tensor::image(1, 4, 4);
  for (int i = 0; i < 4; ++i) m.at(0, 0, i) = 1.0;
  const auto [s, d] = split_features(e, m);
  EXPECT_DOUBLE_EQ(d[0], 0.5);
  EXPECT_DOUBLE_EQ(s[0], 1.5);
}

TEST(SplitFeatures, BadMaskShapeRejected) {
  EXPECT_EQ(testing::error_kind([] { split_features(Tensor::image(2, 4, 4), Tensor::image(1, 10, 10)); }),
            ErrorKind::ShapeMismatch);
}

TEST(Aggregate, MeanMaxOfOneIsDuplicate) {
  const Tensor x = testing::random_tensor({3, 4, 4}, 5);
  const Tensor a = aggregate({x}, Aggregator::MeanMax, 1);
  ASSERT_EQ(a.channels(), 6);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(a[i], x[i]);
    EXPECT_EQ(a[i + x.size()], x[i]);
  }
}

TEST(Aggregate, MeanMaxOracleAndPermutation) {
  const Tensor a = testing::random_tensor({2, 3, 3}, 6), b = testing::random_tensor({2, 3, 3}, 7),
               c = testing::random_tensor({2, 3, 3}, 8);
  const Tensor abc = aggregate({a, b, c}, Aggregator::MeanMax, 3);
  const Tensor cab = aggregate({c, a, b}, Aggregator::MeanMax, 3);
  EXPECT_LT(testing::max_abs_diff(abc, cab), 1e-15);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(abc[i], (a[i] + b[i] + c[i]) / 3, 1e-15);
    EXPECT_EQ(abc[i + a.size()], std::max({a[i], b[i], c[i]}));
  }
}

TEST(Aggregate, ConcatFixedKOrderAndWidth) {
  std::vector<Tensor> parts;
  for (int k = 0; k < 3; ++k) parts.push_back(Tensor::image(8, 2, 2, k));
  const Tensor a = aggregate(parts, Aggregator::ConcatFixedK, 3);
  ASSERT_EQ(a.channels(), 24);
  EXPECT_EQ(a.at(0, 0, 0), 0.0);
  EXPECT_EQ(a.at(8, 0, 0), 1.0);
  EXPECT_EQ(a.at(23, 1, 1), 2.0);
  EXPECT_EQ(testing::error_kind([&] { aggregate(parts, Aggregator::ConcatFixedK, 2); }), ErrorKind::ArityMismatch);
}

TEST(Fusion, SharedWeightsGiveIdenticalOutputs) {
  ModelConfig c = micro();
  c.share_fusion = true;
  const FusionModel model(c, 2);
  const Tensor x = testing::random_tensor({c.aggregate_channels(), 4, 4}, 9);
  EXPECT_EQ(fuse_static(model, x).storage(), fuse_dynamic(model, x).storage());
  EXPECT_EQ(model.params().at("fuse_d.a.w").get(), model.params().at("fuse_s.a.w").get());
}

TEST(Fusion, ZeroInputGivesZeroOutput) {
  const FusionModel model(micro(), 2);
  const Tensor z = Tensor::image(model.config().aggregate_channels(), 4, 4);
  {
    const auto r2 = fuse_static(model, z);
    for (double v : r2.data()) EXPECT_EQ(v, 0.0);
  }
  {
    const auto r3 = fuse_dynamic(model, z);
    for (double v : r3.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Memory, ReadFromEmptyStateIsZero) {
  const FusionModel model(micro(), 3);
  const MemoryState s = memory_init(model, 4, 4);
  ASSERT_EQ(s.slots.size(), 2u);
  {
    const auto r4 = memory_read(model, s, testing::random_tensor({32, 4, 4}, 10));
    for (double v : r4.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Memory, SingleSlotWriteThenReadComposesTransforms) {
  ModelConfig c = micro();
  c.memory_slots = 1;
  const FusionModel model(c, 4);
  const Tensor feats = testing::random_tensor({32, 4, 4}, 11, -1, 1), query = testing::random_tensor({32, 4, 4}, 12);
  const MemoryState s = memory_write(model, memory_init(model, 4, 4), feats, 0);
  const Tensor expect = conv1x1(model.params().at("mem.read0.w")->value,
                                conv1x1(model.params().at("mem.write0.w")->value, feats));
  EXPECT_LT(testing::max_abs_diff(memory_read(model, s, query), expect), 1e-12);
}

TEST(Memory, SlotOutOfRangeRejected) {
  const FusionModel model(micro(), 5);
  const Tensor feats = Tensor::image(32, 2, 2);
  EXPECT_EQ(testing::error_kind([&] { memory_write(model, memory_init(model, 2, 2), feats, 2); }),
            ErrorKind::SlotOutOfRange);
  EXPECT_EQ(testing::error_kind([&] { memory_write(model, memory_init(model, 2, 2), feats, -1); }),
            ErrorKind::SlotOutOfRange);
}

TEST(Memory, ReadWeightsFollowSimilarity) {
  ModelConfig c = micro();
  c.share_rw = true;
  const FusionModel model(c, 6);
  MemoryState s = memory_init(model, 1, 1);
  s.slots[0] = Tensor::image(32, 1, 1, 1.0);
  s.slots[1] = Tensor::image(32, 1, 1, -1.0);
  const Tensor q = Tensor::image(32, 1, 1, 2.0);
  // sims 2 and -2.
  const double w0 = 1.0 / (1.0 + std::exp(-4.0));
  const Tensor& wr = model.params().at("mem.read.w")->value;
  Tensor expect = conv1x1(wr, s.slots[0]);
  expect *= w0 - (1 - w0);
  EXPECT_LT(testing::max_abs_diff(memory_read(model, s, q), expect), 1e-12);
}

TEST(Decode, ShapeAndNonNegativity) {
  for (auto kind : {DecoderKind::Vanilla, DecoderKind::ResNet, DecoderKind::Sdc, DecoderKind::SdcDense}) {
    FusionModel model(micro(kind), 7);
    randomize_output_layer(model, 8);
    const Tensor fused = testing::random_tensor({96, 16, 16}, 13, -2, 2);
    const Tensor ref = frame_input(testing::random_tensor({3, 64, 64}, 14), 1.0);
    const RadianceImage out = decode(model, fused, ref, 4.0);
    EXPECT_EQ(out.values.shape(), (std::vector<int>{3, 64, 64})) << to_string(kind);
    EXPECT_GE(out.values.min(), 0.0) << to_string(kind);
  }
}

TEST(Decode, FreshModelReproducesReferenceRadiance) {
  const FusionModel model(micro(), 7);
  const Tensor ldr = testing::random_tensor({3, 16, 16}, 15, 0.2, 0.9);
  const Tensor ref = frame_input(ldr, 1.0);
  const Tensor out = decode(model, testing::random_tensor({96, 4, 4}, 16), ref, 4.0).values;
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], ref[i + out.size()], 1e-3 * ref[i + out.size()]);
}

TEST(CountParams, SharingRules) {
  ModelConfig c = micro();
  c.memory_slots = 3;
  ModelConfig shared = c;
  shared.share_fusion = true;
  const FusionModel a(c, 0), b(shared, 0);
  EXPECT_EQ(count_params(a, "fuse_"), 2 * count_params(b, "fuse_"));
  EXPECT_EQ(count_params(a) - count_params(b), count_params(a, "fuse_") - count_params(b, "fuse_"));
  for (const char* prefix : {"enc.", "mem.", "dec."}) EXPECT_EQ(count_params(a, prefix), count_params(b, prefix));

  ModelConfig rw = c;
  rw.share_rw = true;
  const FusionModel d(rw, 0);
  EXPECT_EQ(count_params(a, "mem."), 3 * count_params(d, "mem."));
}

TEST(CountParams, DenseSdcIsLarger) {
  const FusionModel sdc(micro(DecoderKind::Sdc), 0), dense(micro(DecoderKind::SdcDense), 0);
  EXPECT_GT(count_params(dense), count_params(sdc));
}

TEST(CountParams, SameConfigSameCount) {
  EXPECT_EQ(count_params(FusionModel(micro(), 1)), count_params(FusionModel(micro(), 2)));
}

TEST(ModelConfig, ValidationAndJson) {
  ModelConfig c;
  c.enc_channels = 4;
  EXPECT_EQ(testing::error_kind([&] { c.validate(); }), ErrorKind::BadConfig);
  c = ModelConfig{};
  c.frames = 1;
  EXPECT_EQ(testing::error_kind([&] { FusionModel(c, 0); }), ErrorKind::BadConfig);
  c.aggregator = Aggregator::MeanMax;
  EXPECT_NO_THROW(c.validate());
  c.memory_slots = 0;
  EXPECT_EQ(testing::error_kind([&] { c.validate(); }), ErrorKind::BadConfig);
  c.use_memory = false;
  EXPECT_NO_THROW(c.validate());

  ModelConfig j = micro(DecoderKind::ResNet);
  j.share_rw = true;
  const auto back = nlohmann::json(j).get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(j));
  EXPECT_EQ(testing::error_kind([] { nlohmann::json{{"decoder", "unet"}}.get<ModelConfig>(); }), ErrorKind::BadConfig);
}

TEST(Forward, ZeroMasksMakeDynamicFusionIrrelevant) {
  ModelConfig c = micro();
  c.frames = 3;
  c.use_memory = false;
  FusionModel model(c, 9);
  randomize_output_layer(model, 3);
  auto frames = random_frames(3, 16, 20, false);
  for (auto& f : frames) f.mask = Tensor::image(1, 16, 16);
  const Tensor before = forward_frames(model, frames, 1).values;
  for (const char* name : {"fuse_d.a.w", "fuse_d.b.w"}) model.params().at(name)->value.fill(0.0);
  EXPECT_EQ(forward_frames(model, frames, 1).values.storage(), before.storage());
}

TEST(Forward, PermutingSourcesUnderMeanMaxAndSharedRw) {
  ModelConfig c = micro();
  c.frames = 3;
  c.aggregator = Aggregator::MeanMax;
  c.share_rw = true;
  c.memory_slots = 3;
  FusionModel model(c, 10);
  randomize_output_layer(model, 4);
  const auto frames = random_frames(3, 16, 30, true);
  const std::vector<FusionFrame> swapped{frames[2], frames[1], frames[0]};
  const Tensor a = forward_frames(model, frames, 1).values, b = forward_frames(model, swapped, 1).values;
  EXPECT_LT(testing::max_abs_diff(a, b), 1e-6);
  EXPECT_EQ(forward_frames(model, frames, 1).values.storage(), a.storage());
}

TEST(Forward, SmokeMatrixAt128) {
  const auto frames = random_frames(3, 128, 40, true);
  for (auto kind : {DecoderKind::Vanilla, DecoderKind::ResNet, DecoderKind::Sdc, DecoderKind::SdcDense})
    for (bool shared : {false, true})
      for (bool memory : {false, true}) {
        ModelConfig c;
        c.decoder = kind;
        c.share_fusion = shared;
        c.use_memory = memory;
        FusionModel model(c, 11);
        randomize_output_layer(model, 5);
        const Tensor out = forward_frames(model, frames, 1).values;
        EXPECT_EQ(out.shape(), (std::vector<int>{3, 128, 128}));
        EXPECT_TRUE(out.all_finite()) << to_string(kind) << shared << memory;
        EXPECT_GE(out.min(), 0.0);
      }
}

TEST(Forward, StackAdapterMatchesMasksBySource) {
  const SynthScene s = synth_scene(3, 16, 16, 3, {-2, 0, 2});
  ModelConfig c = micro();
  c.frames = 3;
  const FusionModel model(c, 12);
  std::vector<MotionMask> reversed{s.masks[1], s.masks[0]};
  EXPECT_EQ(forward(model, s.stack, s.masks).values.storage(), forward(model, s.stack, reversed).values.storage());
  EXPECT_EQ(testing::error_kind([&] { forward(model, s.stack, {s.masks[0]}); }), ErrorKind::ArityMismatch);
}

TEST(Forward, WrongFrameCountForConcat) {
  const FusionModel model(micro(), 13);
  EXPECT_EQ(testing::error_kind([&] { forward_frames(model, random_frames(3, 16, 50, false), 1); }),
            ErrorKind::ArityMismatch);
}

TEST(Forward, NonFiniteInputReportsNumericFailure) {
  const FusionModel model(micro(), 14);
  auto frames = random_frames(2, 16, 60, false);
  frames[0].ldr.at(0, 3, 3) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(testing::error_kind([&] { forward_frames(model, frames, 1); }), ErrorKind::NumericFailure);
}

class DecoderGradients : public ::testing::TestWithParam<DecoderKind> {};

TEST_P(DecoderGradients, MuLawL2MatchesFiniteDifferences) {
  FusionModel model(micro(GetParam()), 21);
  randomize_output_layer(model, 22);
  const auto frames = random_frames(2, 16, 70, true);
  const Tensor gt = testing::random_tensor({3, 16, 16}, 71, 0, 4);
  const double peak = 4.0;
  const auto check = testing::check_param_grads(model.params().unique(), [&](ag::Tape& t) {
    std::vector<FrameVars> vars;
    for (const auto& f : frames) vars.push_back({t.constant(frame_input(f.ldr, f.exposure_time)), t.constant(f.mask)});
    const FusionGraph g = fusion_graph(t, model, vars, 1, peak);
    return loss_tonemapped(g.output, t.constant(gt), LossKind::L2, kDefaultMu, peak);
  });
  EXPECT_LT(check.worst, 1e-3) << check.where;
  EXPECT_GT(check.probes, 20);
}

INSTANTIATE_TEST_SUITE_P(AllDecoders, DecoderGradients,
                         ::testing::Values(DecoderKind::Vanilla, DecoderKind::ResNet, DecoderKind::Sdc,
                                           DecoderKind::SdcDense),
                         [](const auto& info) { return to_string(info.param); });

}  // namespace
}  // namespace hdrfuse
