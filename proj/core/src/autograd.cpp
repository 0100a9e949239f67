#include "hdrfuse/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "hdrfuse/error.hpp"

namespace hdrfuse::ag {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorKind::ShapeMismatch, std::string(op) + ": " + a.value().shape_string() + " vs " +
                                              b.value().shape_string());
  }
}

void require_rank3(const Var& x, const char* op) {
  if (x.value().rank() != 3) {
    throw Error(ErrorKind::ShapeMismatch, std::string(op) + " expects (C,H,W), got " + x.value().shape_string());
  }
}

Tape& tape_of(const Var& v) {
  if (!v.valid()) throw Error(ErrorKind::BadConfig, "operation on an unbound Var");
  return *v.tape();
}

// Elementwise op with derivative expressed in terms of input and output.
template <class F, class D>
Var elementwise(const Var& x, F f, D dfdx) {
  Tape& t = tape_of(x);
  Tensor y(x.shape());
  const auto xs = x.value().data();
  auto ys = y.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  const int xid = x.id();
  const int yid = static_cast<int>(t.size());
  return t.record(std::move(y), {x}, [xid, yid, dfdx](Tape& tp, const Tensor& g) {
    const auto xs = tp.value(xid).data();
    const auto ys = tp.value(yid).data();
    auto gx = tp.grad_buffer(xid).data();
    const auto gs = g.data();
    for (std::size_t i = 0; i < gs.size(); ++i) gx[i] += gs[i] * dfdx(xs[i], ys[i]);
  });
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

void im2col(const double* x, int cin, int h, int w, int k, const ConvOptions& o, int ho, int wo, double* cols) {
  const std::size_t hw_out = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < cin; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw_out;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * o.stride - o.padding + ky * o.dilation;
          double* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * o.stride - o.padding + kx * o.dilation;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, int cin, int h, int w, int k, const ConvOptions& o, int ho, int wo, double* x) {
  const std::size_t hw_out = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < cin; ++c) {
    double* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw_out;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * o.stride - o.padding + ky * o.dilation;
          if (iy < 0 || iy >= h) continue;
          const double* src = row + static_cast<std::size_t>(oy) * wo;
          double* dst = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * o.stride - o.padding + kx * o.dilation;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

struct Interp {
  int i0, i1;
  double w0, w1;
};

std::vector<Interp> upsample_axis(int n) {
  std::vector<Interp> out(static_cast<std::size_t>(2 * n));
  for (int o = 0; o < 2 * n; ++o) {
    const double s = (o + 0.5) / 2.0 - 0.5;
    const int base = static_cast<int>(std::floor(s));
    const double f = s - base;
    out[static_cast<std::size_t>(o)] = {std::clamp(base, 0, n - 1), std::clamp(base + 1, 0, n - 1), 1.0 - f, f};
  }
  return out;
}

}  // namespace

void Parameter::zero_grad() {
  if (grad.same_shape(value)) {
    grad.fill(0.0);
  } else {
    grad = Tensor(value.shape());
  }
}

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(const ParamPtr& p) {
  if (auto it = bound_.find(p.get()); it != bound_.end()) return Var(this, it->second);
  bound_.emplace(p.get(), static_cast<int>(nodes_.size()));
  const bool rg = grad_enabled_ && !p->frozen;
  nodes_.push_back(Node{p->value, {}, rg, {}, p.get()});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  bool rg = false;
  if (grad_enabled_) {
    for (const Var& v : inputs) {
      if (v.valid() && v.tape() != this) throw Error(ErrorKind::BadConfig, "mixing Vars from different tapes");
      rg = rg || (v.valid() && requires_grad(v.id()));
    }
  }
  nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(fn) : BackwardFn{}, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw Error(ErrorKind::BadConfig, "loss recorded on another tape");
  if (loss.value().size() != 1) throw Error(ErrorKind::ShapeMismatch, "backward() needs a scalar loss");
  if (!requires_grad(loss.id())) return;
  grad_buffer(loss.id())[0] += 1.0;
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    // Callbacks only touch buffers of earlier nodes, so n stays valid.
    n.backward(*this, n.grad);
  }
}

void Tape::accumulate_param_grads() {
  for (auto& [p, g] : param_grads()) {
    if (!p->grad.same_shape(p->value)) p->grad = Tensor(p->value.shape());
    p->grad += g;
    ++p->grad_writes;
  }
}

std::vector<std::pair<Parameter*, Tensor>> Tape::param_grads() const {
  std::vector<std::pair<Parameter*, Tensor>> out;
  for (const Node& n : nodes_) {
    if (n.param && n.requires_grad && !n.grad.empty()) out.emplace_back(n.param, n.grad);
  }
  return out;
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, ConvOptions o) {
  Tape& t = tape_of(x);
  require_rank3(x, "conv2d");
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  if (W.rank() != 4 || W.dim(1) != X.channels() || W.dim(2) != W.dim(3)) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d kernel " + W.shape_string() + " for input " + X.shape_string());
  }
  const int cin = X.channels(), h = X.height(), w = X.width();
  const int cout = W.dim(0), k = W.dim(2);
  const int ho = (h + 2 * o.padding - o.dilation * (k - 1) - 1) / o.stride + 1;
  const int wo = (w + 2 * o.padding - o.dilation * (k - 1) - 1) / o.stride + 1;
  if (ho <= 0 || wo <= 0) throw Error(ErrorKind::BadSpatialDims, "conv2d output would be empty");
  if (bias.valid() && (bias.value().rank() != 1 || bias.value().dim(0) != cout)) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d bias " + bias.value().shape_string());
  }

  const bool pointwise = k == 1 && o.stride == 1 && o.padding == 0;
  const long rows = static_cast<long>(cin) * k * k;
  const long hw = static_cast<long>(ho) * wo;
  auto cols = std::make_shared<Tensor::Storage>();
  if (!pointwise) {
    cols->resize(static_cast<std::size_t>(rows * hw));
    im2col(X.data().data(), cin, h, w, k, o, ho, wo, cols->data());
  }
  const double* colptr = pointwise ? X.data().data() : cols->data();

  Tensor Y = Tensor::image(cout, ho, wo);
  MapMat ym(Y.data().data(), cout, hw);
  ym.noalias() = CMapMat(W.data().data(), cout, rows) * CMapMat(colptr, rows, hw);
  if (bias.valid()) {
    const auto b = bias.value().data();
    for (int c = 0; c < cout; ++c) ym.row(c).array() += b[static_cast<std::size_t>(c)];
  }

  const int xid = x.id(), wid = weight.id(), bid = bias.valid() ? bias.id() : -1;
  std::vector<Var> inputs{x, weight};
  if (bias.valid()) inputs.push_back(bias);
  return t.record(std::move(Y), inputs,
                  [=](Tape& tp, const Tensor& g) {
                    CMapMat gm(g.data().data(), cout, hw);
                    const double* cp = pointwise ? tp.value(xid).data().data() : cols->data();
                    if (tp.requires_grad(wid)) {
                      MapMat gw(tp.grad_buffer(wid).data().data(), cout, rows);
                      gw.noalias() += gm * CMapMat(cp, rows, hw).transpose();
                    }
                    if (bid >= 0 && tp.requires_grad(bid)) {
                      auto gb = tp.grad_buffer(bid).data();
                      for (int c = 0; c < cout; ++c) gb[static_cast<std::size_t>(c)] += gm.row(c).sum();
                    }
                    if (tp.requires_grad(xid)) {
                      CMapMat wm(tp.value(wid).data().data(), cout, rows);
                      if (pointwise) {
                        MapMat gx(tp.grad_buffer(xid).data().data(), rows, hw);
                        gx.noalias() += wm.transpose() * gm;
                      } else {
                        RowMat dcols = wm.transpose() * gm;
                        col2im(dcols.data(), cin, h, w, k, o, ho, wo, tp.grad_buffer(xid).data().data());
                      }
                    }
                  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor y = a.value();
  y += b.value();
  const int aid = a.id(), bid = b.id();
  return tape_of(a).record(std::move(y), {a, b}, [aid, bid](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(aid)) tp.grad_buffer(aid) += g;
    if (tp.requires_grad(bid)) tp.grad_buffer(bid) += g;
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor y = a.value();
  const auto bs = b.value().data();
  auto ys = y.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] -= bs[i];
  const int aid = a.id(), bid = b.id();
  return tape_of(a).record(std::move(y), {a, b}, [aid, bid](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(aid)) tp.grad_buffer(aid) += g;
    if (tp.requires_grad(bid)) {
      auto gb = tp.grad_buffer(bid).data();
      const auto gs = g.data();
      for (std::size_t i = 0; i < gs.size(); ++i) gb[i] -= gs[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor y = a.value();
  const auto bs = b.value().data();
  auto ys = y.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] *= bs[i];
  const int aid = a.id(), bid = b.id();
  return tape_of(a).record(std::move(y), {a, b}, [aid, bid](Tape& tp, const Tensor& g) {
    const auto gs = g.data();
    if (tp.requires_grad(aid)) {
      const auto bv = tp.value(bid).data();
      auto ga = tp.grad_buffer(aid).data();
      for (std::size_t i = 0; i < gs.size(); ++i) ga[i] += gs[i] * bv[i];
    }
    if (tp.requires_grad(bid)) {
      const auto av = tp.value(aid).data();
      auto gb = tp.grad_buffer(bid).data();
      for (std::size_t i = 0; i < gs.size(); ++i) gb[i] += gs[i] * av[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a, b, "div");
  Tensor y = a.value();
  const auto bs = b.value().data();
  auto ys = y.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] /= bs[i];
  const int aid = a.id(), bid = b.id();
  return tape_of(a).record(std::move(y), {a, b}, [aid, bid](Tape& tp, const Tensor& g) {
    const auto gs = g.data();
    const auto av = tp.value(aid).data();
    const auto bv = tp.value(bid).data();
    if (tp.requires_grad(aid)) {
      auto ga = tp.grad_buffer(aid).data();
      for (std::size_t i = 0; i < gs.size(); ++i) ga[i] += gs[i] / bv[i];
    }
    if (tp.requires_grad(bid)) {
      auto gb = tp.grad_buffer(bid).data();
      for (std::size_t i = 0; i < gs.size(); ++i) gb[i] -= gs[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

Var scale(const Var& a, double s) {
  return elementwise(a, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return elementwise(a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Var mul_broadcast(const Var& x, const Var& map) {
  require_rank3(x, "mul_broadcast");
  require_rank3(map, "mul_broadcast");
  const Tensor& X = x.value();
  const Tensor& M = map.value();
  if (M.channels() != 1 || M.height() != X.height() || M.width() != X.width()) {
    throw Error(ErrorKind::ShapeMismatch, "mul_broadcast map " + M.shape_string() + " for " + X.shape_string());
  }
  Tensor y = X;
  const auto m = M.data();
  for (int c = 0; c < X.channels(); ++c) {
    auto yc = y.channel(c);
    for (std::size_t i = 0; i < yc.size(); ++i) yc[i] *= m[i];
  }
  const int xid = x.id(), mid = map.id();
  const int channels = X.channels();
  return tape_of(x).record(std::move(y), {x, map}, [xid, mid, channels](Tape& tp, const Tensor& g) {
    const auto m = tp.value(mid).data();
    if (tp.requires_grad(xid)) {
      Tensor& gx = tp.grad_buffer(xid);
      for (int c = 0; c < channels; ++c) {
        auto gc = gx.channel(c);
        const auto gi = g.channel(c);
        for (std::size_t i = 0; i < gc.size(); ++i) gc[i] += gi[i] * m[i];
      }
    }
    if (tp.requires_grad(mid)) {
      const Tensor& xv = tp.value(xid);
      auto gm = tp.grad_buffer(mid).data();
      for (int c = 0; c < channels; ++c) {
        const auto gi = g.channel(c);
        const auto xc = xv.channel(c);
        for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += gi[i] * xc[i];
      }
    }
  });
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(ErrorKind::ShapeMismatch, "concat of nothing");
  for (const Var& p : parts) require_rank3(p, "concat");
  const int h = parts[0].value().height(), w = parts[0].value().width();
  int total = 0;
  for (const Var& p : parts) {
    if (p.value().height() != h || p.value().width() != w) {
      throw Error(ErrorKind::ShapeMismatch, "concat spatial mismatch " + p.value().shape_string());
    }
    total += p.value().channels();
  }
  Tensor y = Tensor::image(total, h, w);
  std::size_t off = 0;
  std::vector<int> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    const auto src = p.value().data();
    std::copy(src.begin(), src.end(), y.data().begin() + static_cast<std::ptrdiff_t>(off));
    ids.push_back(p.id());
    offsets.push_back(off);
    off += src.size();
  }
  return tape_of(parts[0]).record(std::move(y), parts, [ids, offsets](Tape& tp, const Tensor& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!tp.requires_grad(ids[i])) continue;
      auto gp = tp.grad_buffer(ids[i]).data();
      const auto gs = g.data().subspan(offsets[i], gp.size());
      for (std::size_t j = 0; j < gp.size(); ++j) gp[j] += gs[j];
    }
  });
}

Var slice(const Var& x, int begin, int end) {
  require_rank3(x, "slice");
  Tensor y = slice_channels(x.value(), begin, end);
  const int xid = x.id();
  const std::size_t off = static_cast<std::size_t>(begin) * x.value().plane();
  return tape_of(x).record(std::move(y), {x}, [xid, off](Tape& tp, const Tensor& g) {
    auto gx = tp.grad_buffer(xid).data().subspan(off, g.size());
    const auto gs = g.data();
    for (std::size_t j = 0; j < gs.size(); ++j) gx[j] += gs[j];
  });
}

Var elu(const Var& x) {
  return elementwise(
      x, [](double v) { return v > 0 ? v : std::expm1(v); },
      [](double v, double y) { return v > 0 ? 1.0 : y + 1.0; });
}

Var sigmoid(const Var& x) {
  return elementwise(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(const Var& x) {
  return elementwise(
      x, [](double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v, double) { return stable_sigmoid(v); });
}

Var abs(const Var& x) {
  return elementwise(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Var square(const Var& x) {
  return elementwise(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var pow_floor(const Var& x, double p, double floor) {
  return elementwise(
      x, [p, floor](double v) { return std::pow(std::max(v, floor), p); },
      [p, floor](double v, double) { return v > floor ? p * std::pow(v, p - 1.0) : 0.0; });
}

Var mu_law(const Var& x, double mu, double peak) {
  const double norm = 1.0 / std::log1p(mu);
  const double a = mu / peak;
  return elementwise(
      x, [a, norm](double v) { return std::log1p(a * v) * norm; },
      [a, norm](double v, double) { return a * norm / (1.0 + a * v); });
}

Var inv_mu_law(const Var& x, double mu, double peak) {
  const double log_base = std::log1p(mu);
  const double a = peak / mu;
  return elementwise(
      x, [a, log_base](double v) { return a * std::expm1(log_base * v); },
      [a, log_base](double v, double) { return a * log_base * std::exp(log_base * v); });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  Tensor y({1}, x.value().sum() / n);
  const int xid = x.id();
  return tape_of(x).record(std::move(y), {x}, [xid, n](Tape& tp, const Tensor& g) {
    const double d = g[0] / n;
    for (double& v : tp.grad_buffer(xid).data()) v += d;
  });
}

Var sum_of(const std::vector<Var>& xs) {
  if (xs.empty()) throw Error(ErrorKind::ShapeMismatch, "sum of nothing");
  for (const Var& v : xs) require_same_shape(xs[0], v, "sum_of");
  Tensor y = xs[0].value();
  for (std::size_t i = 1; i < xs.size(); ++i) y += xs[i].value();
  std::vector<int> ids;
  for (const Var& v : xs) ids.push_back(v.id());
  return tape_of(xs[0]).record(std::move(y), xs, [ids](Tape& tp, const Tensor& g) {
    for (int id : ids)
      if (tp.requires_grad(id)) tp.grad_buffer(id) += g;
  });
}

Var mean_of(const std::vector<Var>& xs) { return scale(sum_of(xs), 1.0 / static_cast<double>(xs.size())); }

Var max_of(const std::vector<Var>& xs) {
  if (xs.empty()) throw Error(ErrorKind::ShapeMismatch, "max of nothing");
  for (const Var& v : xs) require_same_shape(xs[0], v, "max_of");
  Tensor y = xs[0].value();
  auto arg = std::make_shared<std::vector<int>>(y.size(), 0);
  auto ys = y.data();
  for (std::size_t k = 1; k < xs.size(); ++k) {
    const auto v = xs[k].value().data();
    for (std::size_t i = 0; i < ys.size(); ++i) {
      if (v[i] > ys[i]) {
        ys[i] = v[i];
        (*arg)[i] = static_cast<int>(k);
      }
    }
  }
  std::vector<int> ids;
  for (const Var& v : xs) ids.push_back(v.id());
  return tape_of(xs[0]).record(std::move(y), xs, [ids, arg](Tape& tp, const Tensor& g) {
    const auto gs = g.data();
    for (std::size_t i = 0; i < gs.size(); ++i) {
      const int id = ids[static_cast<std::size_t>((*arg)[i])];
      if (tp.requires_grad(id)) tp.grad_buffer(id)[i] += gs[i];
    }
  });
}

Var channel_mean(const Var& x) {
  require_rank3(x, "channel_mean");
  const Tensor& X = x.value();
  const int c = X.channels();
  Tensor y = Tensor::image(1, X.height(), X.width());
  auto ys = y.data();
  for (int ch = 0; ch < c; ++ch) {
    const auto xc = X.channel(ch);
    for (std::size_t i = 0; i < ys.size(); ++i) ys[i] += xc[i];
  }
  for (double& v : ys) v /= c;
  const int xid = x.id();
  return tape_of(x).record(std::move(y), {x}, [xid, c](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(xid);
    const auto gs = g.data();
    for (int ch = 0; ch < c; ++ch) {
      auto gc = gx.channel(ch);
      for (std::size_t i = 0; i < gc.size(); ++i) gc[i] += gs[i] / c;
    }
  });
}

std::vector<Var> softmax_across(const std::vector<Var>& maps) {
  for (const Var& m : maps) {
    require_rank3(m, "softmax_across");
    if (m.value().channels() != 1) throw Error(ErrorKind::ShapeMismatch, "softmax_across takes 1-channel maps");
  }
  const Var stacked = concat(maps);
  const Tensor& S = stacked.value();
  const int k = S.channels();
  Tensor y = S;
  const std::size_t n = S.plane();
  for (std::size_t i = 0; i < n; ++i) {
    double m = -INFINITY;
    for (int j = 0; j < k; ++j) m = std::max(m, S.channel(j)[i]);
    double z = 0;
    for (int j = 0; j < k; ++j) z += (y.channel(j)[i] = std::exp(S.channel(j)[i] - m));
    for (int j = 0; j < k; ++j) y.channel(j)[i] /= z;
  }
  const int sid = stacked.id();
  const int yid = static_cast<int>(stacked.tape()->size());
  const Var probs = stacked.tape()->record(std::move(y), {stacked}, [sid, yid, k, n](Tape& tp, const Tensor& g) {
    const Tensor& p = tp.value(yid);
    Tensor& gs = tp.grad_buffer(sid);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0;
      for (int j = 0; j < k; ++j) dot += g.channel(j)[i] * p.channel(j)[i];
      for (int j = 0; j < k; ++j) gs.channel(j)[i] += p.channel(j)[i] * (g.channel(j)[i] - dot);
    }
  });
  std::vector<Var> out;
  for (int j = 0; j < k; ++j) out.push_back(slice(probs, j, j + 1));
  return out;
}

Var avg_pool(const Var& x, int f) {
  require_rank3(x, "avg_pool");
  const Tensor& X = x.value();
  if (f < 1 || X.height() % f || X.width() % f) {
    throw Error(ErrorKind::BadSpatialDims, "avg_pool factor " + std::to_string(f) + " for " + X.shape_string());
  }
  const int c = X.channels(), ho = X.height() / f, wo = X.width() / f;
  Tensor y = Tensor::image(c, ho, wo);
  const double inv = 1.0 / (f * f);
  for (int ch = 0; ch < c; ++ch)
    for (int yy = 0; yy < X.height(); ++yy)
      for (int xx = 0; xx < X.width(); ++xx) y.at(ch, yy / f, xx / f) += X.at(ch, yy, xx) * inv;
  const int xid = x.id();
  return tape_of(x).record(std::move(y), {x}, [xid, f, inv](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(xid);
    for (int ch = 0; ch < gx.channels(); ++ch)
      for (int yy = 0; yy < gx.height(); ++yy)
        for (int xx = 0; xx < gx.width(); ++xx) gx.at(ch, yy, xx) += g.at(ch, yy / f, xx / f) * inv;
  });
}

Var upsample2x(const Var& x) {
  require_rank3(x, "upsample2x");
  const Tensor& X = x.value();
  const int c = X.channels(), h = X.height(), w = X.width();
  const auto ry = upsample_axis(h);
  const auto rx = upsample_axis(w);
  Tensor y = Tensor::image(c, 2 * h, 2 * w);
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < 2 * h; ++oy) {
      const Interp& a = ry[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < 2 * w; ++ox) {
        const Interp& b = rx[static_cast<std::size_t>(ox)];
        y.at(ch, oy, ox) = a.w0 * (b.w0 * X.at(ch, a.i0, b.i0) + b.w1 * X.at(ch, a.i0, b.i1)) +
                           a.w1 * (b.w0 * X.at(ch, a.i1, b.i0) + b.w1 * X.at(ch, a.i1, b.i1));
      }
    }
  const int xid = x.id();
  return tape_of(x).record(std::move(y), {x}, [xid, ry, rx](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(xid);
    for (int ch = 0; ch < g.channels(); ++ch)
      for (int oy = 0; oy < g.height(); ++oy) {
        const Interp& a = ry[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < g.width(); ++ox) {
          const Interp& b = rx[static_cast<std::size_t>(ox)];
          const double v = g.at(ch, oy, ox);
          gx.at(ch, a.i0, b.i0) += v * a.w0 * b.w0;
          gx.at(ch, a.i0, b.i1) += v * a.w0 * b.w1;
          gx.at(ch, a.i1, b.i0) += v * a.w1 * b.w0;
          gx.at(ch, a.i1, b.i1) += v * a.w1 * b.w1;
        }
      }
  });
}

Var blur_valid(const Var& x, const std::vector<double>& taps) {
  require_rank3(x, "blur_valid");
  const Tensor& X = x.value();
  const int n = static_cast<int>(taps.size());
  const int c = X.channels(), h = X.height(), w = X.width();
  const int ho = h - n + 1, wo = w - n + 1;
  if (ho <= 0 || wo <= 0) throw Error(ErrorKind::ImageTooSmall, "blur window larger than " + X.shape_string());
  Tensor y = Tensor::image(c, ho, wo);
  std::vector<double> tmp(static_cast<std::size_t>(h) * wo);
  for (int ch = 0; ch < c; ++ch) {
    for (int yy = 0; yy < h; ++yy)
      for (int xx = 0; xx < wo; ++xx) {
        double s = 0;
        for (int i = 0; i < n; ++i) s += taps[static_cast<std::size_t>(i)] * X.at(ch, yy, xx + i);
        tmp[static_cast<std::size_t>(yy) * wo + xx] = s;
      }
    for (int yy = 0; yy < ho; ++yy)
      for (int xx = 0; xx < wo; ++xx) {
        double s = 0;
        for (int i = 0; i < n; ++i) s += taps[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(yy + i) * wo + xx];
        y.at(ch, yy, xx) = s;
      }
  }
  const int xid = x.id();
  return tape_of(x).record(std::move(y), {x}, [xid, taps, n, h, wo, ho](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(xid);
    std::vector<double> gt(static_cast<std::size_t>(h) * wo);
    for (int ch = 0; ch < g.channels(); ++ch) {
      std::fill(gt.begin(), gt.end(), 0.0);
      for (int yy = 0; yy < ho; ++yy)
        for (int xx = 0; xx < wo; ++xx) {
          const double v = g.at(ch, yy, xx);
          for (int i = 0; i < n; ++i) gt[static_cast<std::size_t>(yy + i) * wo + xx] += taps[static_cast<std::size_t>(i)] * v;
        }
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < wo; ++xx) {
          const double v = gt[static_cast<std::size_t>(yy) * wo + xx];
          for (int i = 0; i < n; ++i) gx.at(ch, yy, xx + i) += taps[static_cast<std::size_t>(i)] * v;
        }
    }
  });
}

Var bce_with_logits(const Var& logits, const Tensor& target) {
  if (!logits.value().same_shape(target)) {
    throw Error(ErrorKind::ShapeMismatch, "bce target " + target.shape_string());
  }
  const auto z = logits.value().data();
  const auto t = target.data();
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    s += std::max(z[i], 0.0) - z[i] * t[i] + std::log1p(std::exp(-std::fabs(z[i])));
  }
  const double n = static_cast<double>(z.size());
  const int zid = logits.id();
  auto tgt = std::make_shared<Tensor>(target);
  return tape_of(logits).record(Tensor({1}, s / n), {logits}, [zid, tgt, n](Tape& tp, const Tensor& g) {
    const auto z = tp.value(zid).data();
    const auto t = tgt->data();
    auto gz = tp.grad_buffer(zid).data();
    for (std::size_t i = 0; i < z.size(); ++i) gz[i] += g[0] * (stable_sigmoid(z[i]) - t[i]) / n;
  });
}

}  // namespace hdrfuse::ag
