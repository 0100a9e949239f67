#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "hdrfuse/tensor.hpp"

namespace hdrfuse::ag {

/// A trainable tensor that outlives any single forward pass.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;
  /// Number of backward passes that deposited a gradient here.
  std::size_t grad_writes = 0;

  void zero_grad();
};
using ParamPtr = std::shared_ptr<Parameter>;

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

  const Tensor& value() const;
  const Tensor& grad() const;
  const std::vector<int>& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

/// Linear record of a forward computation. Nodes are appended in evaluation
/// order, so reverse iteration is a valid reverse-mode schedule.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value);
  /// Leaf bound to a parameter; repeated calls return the same node.
  /// Gradients stay on the tape until accumulate_param_grads() or
  /// param_grads() collects them.
  Var param(const ParamPtr& p);

  /// Records an op. `fn` is dropped when no input requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

  void backward(const Var& loss);

  /// Adds every parameter leaf gradient into Parameter::grad.
  void accumulate_param_grads();

  /// Parameter leaf gradients, one entry per bound parameter, in binding order.
  std::vector<std::pair<Parameter*, Tensor>> param_grads() const;

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Tensor& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradient buffer of node `id`, zero-initialised on first use.
  Tensor& grad_buffer(int id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> bound_;
};

struct ConvOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

/// 2-D convolution of a (Cin,H,W) input with a (Cout,Cin,k,k) kernel.
/// `bias` may be an invalid Var for a bias-free convolution.
Var conv2d(const Var& x, const Var& weight, const Var& bias, ConvOptions opt = {});

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// (C,H,W) times a (1,H,W) map broadcast over channels.
Var mul_broadcast(const Var& x, const Var& map);
Var concat(const std::vector<Var>& parts);
Var slice(const Var& x, int begin, int end);

Var elu(const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var abs(const Var& x);
Var square(const Var& x);
/// x^p for p > 0 after flooring x at `floor`; gradient is zero below the floor.
Var pow_floor(const Var& x, double p, double floor);
/// log(1 + mu * x / peak) / log(1 + mu).
Var mu_law(const Var& x, double mu, double peak);
/// Inverse of mu_law: peak * ((1 + mu)^x - 1) / mu.
Var inv_mu_law(const Var& x, double mu, double peak);

/// Mean of all elements, shape {1}.
Var mean(const Var& x);
Var mean_of(const std::vector<Var>& xs);
Var max_of(const std::vector<Var>& xs);
Var sum_of(const std::vector<Var>& xs);
/// Mean over channels, shape (1,H,W).
Var channel_mean(const Var& x);
/// Per-pixel softmax across a list of (1,H,W) maps.
std::vector<Var> softmax_across(const std::vector<Var>& maps);

/// Non-overlapping box average over factor x factor cells.
Var avg_pool(const Var& x, int factor);
/// Bilinear x2 upsampling with half-pixel centres and clamped borders.
Var upsample2x(const Var& x);
/// Separable per-channel filtering with `taps` in both directions, valid region only.
Var blur_valid(const Var& x, const std::vector<double>& taps);

/// Mean binary cross-entropy between sigmoid(logits) and `target` in [0,1].
Var bce_with_logits(const Var& logits, const Tensor& target);

}  // namespace hdrfuse::ag
