#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hdrfuse/types.hpp"

namespace hdrfuse {

namespace fs = std::filesystem;

struct ManifestEntry {
  fs::path stack_dir;
  std::optional<fs::path> gt_hdr;
  /// One mask per non-reference frame, in frame order.
  std::optional<std::vector<fs::path>> gt_masks;
  std::vector<int> ev_bias;
  std::optional<int> reference_index;

  /// Stable identifier: the stack directory name.
  std::string id() const { return stack_dir.filename().string(); }
  int resolved_reference() const;
};

enum class Split { Train, Val };

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  Split split = Split::Train;
};

/// Reads a manifest. Relative paths resolve against the manifest's directory
/// and every referenced path must exist.
DatasetManifest load_manifest(const fs::path& path);
/// Writes a manifest, storing paths relative to the manifest's directory
/// where possible.
void save_manifest(const DatasetManifest& manifest, const fs::path& path);

/// Loads `ldr_*.png` frames (sorted by name) from the entry's stack directory.
ExposureStack load_stack(const ManifestEntry& entry);
/// Loads the entry's ground-truth masks; throws if the entry has none.
std::vector<MotionMask> load_gt_masks(const ManifestEntry& entry);

/// PFM: "PF" header, little-endian float32 RGB, rows stored bottom to top.
void save_hdr(const RadianceImage& img, const fs::path& path);
RadianceImage load_hdr(const fs::path& path);

/// 8-bit single channel, 0 -> 0.0 and 255 -> 1.0.
void save_mask(const MotionMask& mask, const fs::path& path);
MotionMask load_mask(const fs::path& path, int source_index = -1);

struct PngImage {
  Tensor pixels;  // (channels,H,W) scaled to [0,1]
  int bit_depth = 8;
};

/// Decodes gray/RGB(A)/palette PNGs at 8 or 16 bits. Alpha is dropped.
PngImage load_png(const fs::path& path);
/// Encodes a 1- or 3-channel tensor in [0,1]; values are rounded to the bit depth.
void save_png(const Tensor& pixels, const fs::path& path, int bit_depth = 8);

/// Rounds every value to the nearest multiple of 1/255.
Tensor quantize8(const Tensor& t);

// ---------------------------------------------------------------------------
// Synthetic scenes

struct Rect {
  int y = 0, x = 0, height = 0, width = 0;
};

struct SynthOptions {
  /// Per-frame displacement (dy, dx) of the moving object; random when unset.
  std::optional<std::pair<int, int>> velocity;
  /// Puts a bright textured patch, saturated at the reference exposure,
  /// under the object's position in the shortest exposure.
  bool occlude_saturated = false;
  double gamma = kDefaultGamma;
};

struct SynthScene {
  ExposureStack stack;
  /// Radiance of the reference frame.
  RadianceImage gt;
  /// One mask per non-reference frame.
  std::vector<MotionMask> masks;
  /// Radiance of every frame, before exposure and quantisation.
  std::vector<Tensor> radiance_frames;
  /// Moving object placement in every frame.
  std::vector<Rect> object_rects;
};

/// Deterministic desk-scale scene: smooth gradient plus textured patches with
/// a translating textured rectangle. LDR frames are 8-bit quantised.
SynthScene synth_scene(std::uint64_t seed, int height, int width, int frames, const std::vector<int>& ev_bias,
                       const SynthOptions& options = {});

/// Writes frames, ground truth, masks and `stack.json` into `dir` and returns
/// the matching manifest entry (absolute paths).
ManifestEntry write_scene(const SynthScene& scene, const fs::path& dir);

/// Reads `stack.json` (ev_bias, reference_index) from a stack directory.
ManifestEntry entry_from_stack_dir(const fs::path& dir);

}  // namespace hdrfuse
