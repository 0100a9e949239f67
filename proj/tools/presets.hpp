#pragma once

#include <span>
#include <string_view>

namespace hdrfuse::cli {

struct EmbeddedPreset {
  std::string_view name;
  std::string_view json;
};

/// Preset documents from tools/presets, embedded at configure time.
std::span<const EmbeddedPreset> embedded_presets();

}  // namespace hdrfuse::cli
