#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <cstdio>
#include <optional>
#include <string>

#include <unistd.h>

#include "hdrfuse/autograd.hpp"
#include "hdrfuse/error.hpp"
#include "hdrfuse/rng.hpp"
#include "hdrfuse/tensor.hpp"

namespace hdrfuse::testing {

inline Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Kind of the hdrfuse::Error thrown by `f`, or nullopt when nothing is thrown.
template <class F>
std::optional<ErrorKind> error_kind(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("hdrfuse_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Worst relative error between analytic and central-difference gradients.
/// |a - n| / max(|a|, |n|, floor) over the probed entries.
struct GradCheck {
  double worst = 0;
  std::string where;
  int probes = 0;
};

/// `loss` builds the scalar on a fresh tape from the current values of the
/// bound parameters. Probes up to `per_tensor` entries of every parameter.
inline GradCheck check_param_grads(const std::vector<ag::ParamPtr>& params,
                                   const std::function<ag::Var(ag::Tape&)>& loss, int per_tensor = 4,
                                   double h = 1e-5, double floor = 1e-7, std::uint64_t seed = 7) {
  ag::Tape tape;
  const ag::Var l = loss(tape);
  tape.backward(l);
  std::vector<Tensor> analytic;
  for (const auto& p : params) {
    const ag::Var leaf = tape.param(p);
    analytic.push_back(leaf.requires_grad() && !leaf.grad().empty() ? leaf.grad() : Tensor(p->value.shape()));
  }
  auto eval = [&] {
    ag::Tape t(false);
    return loss(t).value()[0];
  };
  GradCheck out;
  Rng rng(seed);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& v = params[k]->value;
    const int n = static_cast<int>(v.size());
    for (int probe = 0; probe < std::min(per_tensor, n); ++probe) {
      const auto i = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
      const double orig = v[i];
      v[i] = orig + h;
      const double up = eval();
      v[i] = orig - h;
      const double down = eval();
      v[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++out.probes;
      if (rel > out.worst) {
        out.worst = rel;
        char buf[96];
        std::snprintf(buf, sizeof buf, "[%zu] analytic %.6e numeric %.6e", i, a, numeric);
        out.where = params[k]->name + buf;
      }
    }
  }
  return out;
}

}  // namespace hdrfuse::testing
