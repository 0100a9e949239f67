#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdrfuse/autograd.hpp"

namespace hdrfuse {

/// Uniform on [-a, a] with a = sqrt(6 / (fan_in + fan_out)). Kernels of
/// shape (out,in,kh,kw) use fan_in = in*kh*kw and fan_out = out*kh*kw.
Tensor glorot_init(const std::vector<int>& shape, std::uint64_t seed);
/// The bound `a` used by glorot_init for `shape`.
double glorot_limit(const std::vector<int>& shape);

/// Named, ordered parameter collection. Aliased roles resolve to the same
/// underlying Parameter and are stored and counted once.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  /// Glorot-initialised weight seeded from the store seed and `name`.
  ag::ParamPtr weight(const std::string& name, std::vector<int> shape);
  ag::ParamPtr zeros(const std::string& name, std::vector<int> shape);
  /// Registers `alias` as another name for an existing parameter.
  void alias(const std::string& alias, const ag::ParamPtr& target);

  ag::ParamPtr find(const std::string& name) const;
  ag::ParamPtr at(const std::string& name) const;

  /// Unique parameters in insertion order.
  const std::vector<ag::ParamPtr>& unique() const { return unique_; }
  /// Scalar count of unique parameters whose primary name starts with `prefix`.
  std::size_t count(const std::string& prefix = "") const;

  void zero_grad();
  void set_frozen(bool frozen);

 private:
  ag::ParamPtr insert(const std::string& name, Tensor value);

  std::uint64_t seed_;
  std::vector<ag::ParamPtr> unique_;
  std::map<std::string, ag::ParamPtr> by_name_;
};

/// Convolution layer bound to parameters in a ParamStore.
struct Conv {
  ag::ParamPtr weight;
  ag::ParamPtr bias;  // null for bias-free layers
  ag::ConvOptions options;

  static Conv make(ParamStore& store, const std::string& name, int in, int out, int kernel, ag::ConvOptions options,
                   bool with_bias = true);
  /// Same-size convolution for odd kernels at stride 1.
  static Conv same(ParamStore& store, const std::string& name, int in, int out, int kernel, int dilation = 1,
                   bool with_bias = true);

  ag::Var operator()(ag::Tape& tape, const ag::Var& x) const;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic line, 8-byte little-endian header length, JSON header
// {kind, dtype, config, tensors:[{name, shape, offset}]}, then float64 LE data.

struct Checkpoint {
  std::string kind;
  nlohmann::json config;
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& config,
                     const ParamStore& store);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Copies tensors into the store; throws ModelMismatch on missing names or shapes.
void apply_checkpoint(const Checkpoint& ckpt, ParamStore& store);

}  // namespace hdrfuse
