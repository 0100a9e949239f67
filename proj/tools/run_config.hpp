#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdrfuse/fusion_net.hpp"
#include "hdrfuse/segmentation.hpp"
#include "hdrfuse/training.hpp"

namespace hdrfuse::cli {

enum class Pipeline { Neural, Classical };

/// Everything a run needs. Unknown keys are rejected on load and every run
/// echoes the resolved document to `resolved_config.json`.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::optional<std::string> train_manifest;
  std::optional<std::string> val_manifest;
  Pipeline pipeline = Pipeline::Neural;
  MaskSource mask_source = MaskSource::Cnn;
  double diff_threshold = 0.1;
  std::optional<std::string> segmenter_checkpoint;
  std::optional<std::string> fusion_checkpoint;
  /// Fusion training.
  TrainConfig train;
  /// Segmenter pretraining.
  TrainConfig seg_train;
  ModelConfig model;
  SegmenterConfig segmenter;
  std::string preset;

  void validate() const;
  /// Copies `seed` into both training configs.
  void apply_seed(std::uint64_t s);
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Accepts a bare RunConfig or a resolved_config.json from an earlier run.
RunConfig load_run_config(const std::filesystem::path& path);
/// Writes `resolved_config.json` holding the subcommand, its options and the run config.
void write_resolved(const RunConfig& config, const std::string& command, const nlohmann::json& options,
                    const std::filesystem::path& dir);

/// Preset names A1..A12.
std::vector<std::string> preset_names();
/// Shipped preset document; throws BadConfig for unknown names.
RunConfig preset(const std::string& name);
/// Raw preset JSON text embedded at build time.
std::string preset_text(const std::string& name);

}  // namespace hdrfuse::cli
