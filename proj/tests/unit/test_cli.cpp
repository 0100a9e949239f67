#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "hdrfuse/fusion_net.hpp"
#include "hdrfuse/metrics.hpp"
#include "hdrfuse/params.hpp"
#include "hdrfuse/stack_io.hpp"
#include "run_config.hpp"
#include "support.hpp"

namespace hdrfuse {
namespace {

namespace fs = std::filesystem;

int run(std::vector<std::string> args) { return cli::run_cli(args); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(CliSynth, WritesScenesAndManifest) {
  testing::TempDir dir("cli");
  ASSERT_EQ(run({"--seed", "3", "--out", (dir / "d").string(), "synth", "--count", "4", "--size", "32"}), 0);
  const DatasetManifest m = load_manifest(dir / "d" / "manifest.json");
  ASSERT_EQ(m.entries.size(), 4u);
  for (const auto& e : m.entries) {
    EXPECT_TRUE(fs::is_directory(e.stack_dir));
    EXPECT_EQ(e.ev_bias, (std::vector<int>{-2, 0, 2}));
    EXPECT_TRUE(e.gt_hdr && fs::exists(*e.gt_hdr));
    ASSERT_TRUE(e.gt_masks);
    EXPECT_EQ(e.gt_masks->size(), 2u);
  }
}

TEST(CliSynth, SameSeedGivesIdenticalBytes) {
  testing::TempDir dir("cli");
  for (const char* sub : {"a", "b"}) {
    ASSERT_EQ(run({"--seed", "7", "--out", (dir / sub).string(), "synth", "--count", "2", "--size", "16"}), 0);
  }
  for (const char* scene : {"scene_0000", "scene_0001"}) {
    const std::string a = slurp(dir / "a" / scene / "gt.pfm"), b = slurp(dir / "b" / scene / "gt.pfm");
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, b);
  }
}

TEST(CliSynth, ZeroCountWritesEmptyManifest) {
  testing::TempDir dir("cli");
  ASSERT_EQ(run({"--out", (dir / "d").string(), "synth", "--count", "0"}), 0);
  EXPECT_TRUE(load_manifest(dir / "d" / "manifest.json").entries.empty());
}

TEST(CliSynth, ResolvedConfigReruns) {
  testing::TempDir dir("cli");
  ASSERT_EQ(run({"--seed", "11", "--out", (dir / "a").string(), "synth", "--count", "1", "--size", "16"}), 0);
  const auto resolved = nlohmann::json::parse(std::ifstream(dir / "a" / "resolved_config.json"));
  EXPECT_EQ(resolved.at("command"), "synth");
  EXPECT_EQ(resolved.at("run").at("seed"), 11);
  EXPECT_EQ(resolved.at("run").at("train").at("lr"), 1e-4);
  ASSERT_EQ(run({"--config", (dir / "a" / "resolved_config.json").string(), "--out", (dir / "b").string(), "synth",
                 "--count", "1", "--size", "16"}),
            0);
  EXPECT_EQ(slurp(dir / "a" / "scene_0000" / "gt.pfm"), slurp(dir / "b" / "scene_0000" / "gt.pfm"));
}

TEST(CliExitCodes, ConfigErrorsGiveTwo) {
  testing::TempDir dir("cli");
  std::ofstream(dir / "bad.json") << R"({"seed": 1, "learning_rate": 3})";
  EXPECT_EQ(run({"--config", (dir / "bad.json").string(), "--out", (dir / "o").string(), "synth"}), 2);
  EXPECT_EQ(run({"--out", (dir / "o").string(), "synth", "--count", "-1"}), 2);
  EXPECT_EQ(run({"--device", "accelerator", "--out", (dir / "o").string(), "synth", "--count", "0"}), 2);
  EXPECT_EQ(run({"--device", "tpu", "synth"}), 2);
  EXPECT_EQ(run({"nonsense"}), 2);
}

TEST(CliExitCodes, MissingStackGivesThree) {
  testing::TempDir dir("cli");
  EXPECT_EQ(run({"--out", (dir / "o").string(), "fuse", "--stack", (dir / "nowhere").string(), "--method",
                 "classical"}),
            3);
}

TEST(CliExitCodes, FrameCountMismatchGivesFour) {
  testing::TempDir dir("cli");
  ASSERT_EQ(run({"--out", (dir / "d").string(), "synth", "--count", "1", "--size", "16"}), 0);
  ModelConfig c;
  c.frames = 5;
  const FusionModel model(c, 0);
  save_checkpoint(dir / "k5.ckpt", "fusion", nlohmann::json(c), model.params());
  EXPECT_EQ(run({"--out", (dir / "o").string(), "fuse", "--stack", (dir / "d" / "scene_0000").string(), "--method",
                 "neural", "--mask-source", "zero", "--fusion-ckpt", (dir / "k5.ckpt").string()}),
            4);
}

TEST(CliFuse, ClassicalStillSceneMatchesGroundTruth) {
  testing::TempDir dir("cli");
  ASSERT_EQ(run({"--out", (dir / "d").string(), "synth", "--count", "1", "--size", "64", "--static"}), 0);
  const fs::path stack = dir / "d" / "scene_0000";
  ASSERT_EQ(run({"--out", (dir / "o").string(), "fuse", "--stack", stack.string(), "--method", "classical"}), 0);
  const RadianceImage pred = load_hdr(dir / "o" / "scene_0000.pfm");
  const RadianceImage gt = load_hdr(stack / "gt.pfm");
  EXPECT_TRUE(fs::exists(dir / "o" / "scene_0000_preview.png"));
  Tensor p = pred.values, g = gt.values;
  const double peak = g.max();
  p *= 1.0 / peak;
  g *= 1.0 / peak;
  const ExposureStack st = load_stack(entry_from_stack_dir(stack));
  EXPECT_GE(psnr_masked(p, g, well_exposed_somewhere(st)), 40.0);
}

TEST(CliSegment, DiffMasksWritten) {
  testing::TempDir dir("cli");
  ASSERT_EQ(run({"--out", (dir / "d").string(), "synth", "--count", "1", "--size", "32"}), 0);
  ASSERT_EQ(run({"--out", (dir / "m").string(), "segment", "--stack", (dir / "d" / "scene_0000").string()}), 0);
  EXPECT_TRUE(load_mask(dir / "m" / "mask_0.png").is_hard());
  EXPECT_TRUE(fs::exists(dir / "m" / "mask_2.png"));
}

TEST(CliTrainAndEval, ShortRunsProduceArtifacts) {
  testing::TempDir dir("cli");
  ASSERT_EQ(run({"--out", (dir / "d").string(), "synth", "--count", "2", "--size", "16"}), 0);
  cli::RunConfig c;
  c.train.max_steps = 2;
  c.train.patch = 16;
  c.seg_train = c.train;
  c.segmenter = {4, 2, 0.5};
  c.model.decoder_blocks = 1;
  c.mask_source = MaskSource::Diff;
  std::ofstream(dir / "run.json") << nlohmann::json(c).dump();
  const std::string manifest = (dir / "d" / "manifest.json").string();
  ASSERT_EQ(run({"--config", (dir / "run.json").string(), "--out", (dir / "s").string(), "train-seg", "--train",
                 manifest}),
            0);
  EXPECT_TRUE(fs::exists(dir / "s" / "segmenter.ckpt"));
  ASSERT_EQ(run({"--config", (dir / "run.json").string(), "--out", (dir / "f").string(), "train-fusion", "--train",
                 manifest}),
            0);
  ASSERT_TRUE(fs::exists(dir / "f" / "fusion.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "f" / "fusion_report.jsonl"));

  const std::string scene = (dir / "d" / "scene_0000").string();
  ASSERT_EQ(run({"--out", (dir / "p").string(), "fuse", "--stack", scene, "--method", "neural", "--mask-source", "cnn",
                 "--fusion-ckpt", (dir / "f" / "fusion.ckpt").string(), "--seg-ckpt",
                 (dir / "s" / "segmenter.ckpt").string()}),
            0);
  // Swapped checkpoint kinds are a model mismatch.
  EXPECT_EQ(run({"--out", (dir / "p").string(), "fuse", "--stack", scene, "--method", "neural", "--mask-source", "zero",
                 "--fusion-ckpt", (dir / "s" / "segmenter.ckpt").string()}),
            4);
  fs::copy_file(dir / "p" / "scene_0000.pfm", dir / "p" / "scene_0001.pfm");
  ASSERT_EQ(run({"--out", (dir / "e").string(), "eval", "--pred", (dir / "p").string(), "--manifest", manifest}), 0);
  EXPECT_TRUE(fs::exists(dir / "e" / "eval.csv"));
  fs::remove(dir / "p" / "scene_0001.pfm");
  EXPECT_EQ(run({"--out", (dir / "e").string(), "eval", "--pred", (dir / "p").string(), "--manifest", manifest}), 3);
}

TEST(CliPresets, AblationRowsMatchTheirDescriptions) {
  ASSERT_EQ(cli::preset_names().size(), 12u);
  const cli::RunConfig a3 = cli::preset("A3");
  EXPECT_EQ(a3.mask_source, MaskSource::Zero);
  EXPECT_TRUE(a3.model.share_fusion);
  const cli::RunConfig a4 = cli::preset("A4");
  EXPECT_EQ(a4.mask_source, MaskSource::Diff);
  EXPECT_EQ(a4.diff_threshold, 0.1);
  EXPECT_EQ(a4.pipeline, cli::Pipeline::Neural);
  EXPECT_TRUE(cli::preset("A8").model.share_rw);
  EXPECT_EQ(cli::preset("A9").model.decoder, DecoderKind::Vanilla);
  EXPECT_EQ(cli::preset("A12").model.decoder, DecoderKind::SdcDense);
  for (const auto& name : cli::preset_names()) EXPECT_NO_THROW(cli::preset(name).validate()) << name;
  EXPECT_EQ(testing::error_kind([] { cli::preset("A13"); }), ErrorKind::BadConfig);
}

TEST(CliExitCodes, KindMapping) {
  EXPECT_EQ(cli::exit_code_for(ErrorKind::BadConfig), 2);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::CorruptHeader), 3);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::ArityMismatch), 4);
  EXPECT_EQ(cli::exit_code_for(ErrorKind::NumericFailure), 5);
}

}  // namespace
}  // namespace hdrfuse
