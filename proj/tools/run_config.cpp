#include "run_config.hpp"

#include <algorithm>
#include <fstream>

#include "hdrfuse/error.hpp"
#include "presets.hpp"

namespace hdrfuse::cli {
namespace {

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadConfig, std::string("bad value for '") + key + "': " + e.what());
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, std::optional<T>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  T v{};
  read(j, key, v);
  out = v;
}

template <typename T>
nlohmann::json opt_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

void RunConfig::validate() const {
  train.validate();
  seg_train.validate();
  model.validate();
  segmenter.validate();
  if (!(diff_threshold > 0 && diff_threshold < 1)) throw Error(ErrorKind::BadConfig, "diff_threshold must lie in (0,1)");
  if (out_dir.empty()) throw Error(ErrorKind::BadConfig, "out_dir must not be empty");
}

void RunConfig::apply_seed(std::uint64_t s) {
  seed = s;
  train.seed = s;
  seg_train.seed = s;
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"train_manifest", opt_json(c.train_manifest)},
      {"val_manifest", opt_json(c.val_manifest)},
      {"pipeline", c.pipeline == Pipeline::Neural ? "neural" : "classical"},
      {"mask_source", to_string(c.mask_source)},
      {"diff_threshold", c.diff_threshold},
      {"segmenter_checkpoint", opt_json(c.segmenter_checkpoint)},
      {"fusion_checkpoint", opt_json(c.fusion_checkpoint)},
      {"train", c.train},
      {"seg_train", c.seg_train},
      {"model", c.model},
      {"segmenter", c.segmenter},
      {"preset", c.preset},
  };
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  static const char* known[] = {"seed", "out_dir", "train_manifest", "val_manifest", "pipeline",
                                "mask_source", "diff_threshold", "segmenter_checkpoint", "fusion_checkpoint",
                                "train", "seg_train", "model", "segmenter", "preset"};
  if (!j.is_object()) throw Error(ErrorKind::BadConfig, "run config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw Error(ErrorKind::BadConfig, "unknown key '" + key + "' in run config");
    }
  }
  read(j, "seed", c.seed);
  read(j, "out_dir", c.out_dir);
  read_opt(j, "train_manifest", c.train_manifest);
  read_opt(j, "val_manifest", c.val_manifest);
  read_opt(j, "segmenter_checkpoint", c.segmenter_checkpoint);
  read_opt(j, "fusion_checkpoint", c.fusion_checkpoint);
  read(j, "diff_threshold", c.diff_threshold);
  read(j, "preset", c.preset);
  if (j.contains("pipeline")) {
    std::string p;
    read(j, "pipeline", p);
    if (p == "neural") {
      c.pipeline = Pipeline::Neural;
    } else if (p == "classical") {
      c.pipeline = Pipeline::Classical;
    } else {
      throw Error(ErrorKind::BadConfig, "unknown pipeline '" + p + "'");
    }
  }
  if (j.contains("mask_source")) {
    std::string m;
    read(j, "mask_source", m);
    c.mask_source = parse_mask_source(m);
  }
  if (j.contains("train")) from_json(j.at("train"), c.train);
  if (j.contains("seg_train")) from_json(j.at("seg_train"), c.seg_train);
  if (j.contains("model")) from_json(j.at("model"), c.model);
  if (j.contains("segmenter")) from_json(j.at("segmenter"), c.segmenter);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IOFailure, "cannot read " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadConfig, path.string() + ": " + e.what());
  }
  // A resolved_config.json written by a previous run wraps the document.
  if (j.is_object() && j.contains("run") && j.contains("command")) j = j.at("run");
  RunConfig c;
  from_json(j, c);
  c.validate();
  return c;
}

void write_resolved(const RunConfig& config, const std::string& command, const nlohmann::json& options,
                    const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "resolved_config.json");
  if (!out) throw Error(ErrorKind::IOFailure, "cannot write " + (dir / "resolved_config.json").string());
  out << nlohmann::json{{"command", command}, {"options", options}, {"run", config}}.dump(2) << '\n';
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& p : embedded_presets()) names.emplace_back(p.name);
  return names;
}

std::string preset_text(const std::string& name) {
  for (const auto& p : embedded_presets()) {
    if (name == p.name) return std::string(p.json);
  }
  throw Error(ErrorKind::BadConfig, "unknown preset '" + name + "'");
}

RunConfig preset(const std::string& name) {
  RunConfig c;
  try {
    from_json(nlohmann::json::parse(preset_text(name)), c);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::BadConfig, "preset " + name + ": " + e.what());
  }
  c.validate();
  return c;
}

}  // namespace hdrfuse::cli
