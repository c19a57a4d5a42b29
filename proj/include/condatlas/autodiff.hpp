#pragma once

// Reverse-mode evaluation over a linear tape.
//
// Each operator evaluates eagerly and, when any input requires a gradient,
// records a backward closure. Nodes are appended in evaluation order, so the
// tape is a topologically sorted DAG; backward() walks it once in reverse.
// A tape supports exactly one backward pass.

#include <condatlas/kernels.hpp>
#include <condatlas/tensor.hpp>

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace condatlas {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Gradients keyed by parameter name.
using GradStore = std::map<std::string, Tensor>;

class BackwardError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf holding a constant or an input we want gradients for.
  Var leaf(Tensor value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, {});
  }

  /// Leaf bound to a named parameter; its gradient is exported by backward().
  Var param(const std::string& name, const Tensor& value, bool requires_grad) {
    Var v = push(value, requires_grad, {});
    if (requires_grad) params_.emplace_back(v.id, name);
    return v;
  }

  /// Records an operator output. `fn` runs during backward only if the node
  /// received a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& in : inputs) {
      check_owned(in);
      rg = rg || nodes_[in.id].requires_grad;
    }
    Var v = push(std::move(value), rg, {});
    if (rg) nodes_[v.id].backward = std::move(fn);
    return v;
  }

  const Tensor& value(int id) const { return nodes_.at(id).value; }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer of a node, zero-initialized on first use.
  Tensor& grad(int id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
  }
  bool has_grad(int id) const { return !nodes_.at(id).grad.empty(); }

  /// Gradient of the last backward pass w.r.t. a node (zeros if untouched).
  Tensor gradient(Var v) {
    check_owned(v);
    if (!has_grad(v.id)) return Tensor(value(v.id).shape(), 0.0);
    return nodes_[v.id].grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = seed and accumulates parameter gradients into
  /// `grads` (summing with anything already there).
  void backward(Var loss, GradStore& grads, double seed = 1.0) {
    backward(loss, seed);
    for (const auto& [id, name] : params_) {
      if (!has_grad(id)) continue;
      auto it = grads.find(name);
      if (it == grads.end()) {
        grads.emplace(name, nodes_[id].grad);
      } else {
        if (!it->second.same_shape(nodes_[id].grad)) throw BackwardError("gradient shape mismatch: " + name);
        auto& dst = it->second.values();
        const auto& src = nodes_[id].grad.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
  }

  void backward(Var loss, double seed = 1.0) {
    if (nodes_.empty() || !loss.valid()) throw BackwardError("backward called before any forward evaluation");
    check_owned(loss);
    if (done_) throw BackwardError("backward already ran on this tape; re-run the forward pass first");
    if (value(loss.id).size() != 1) throw BackwardError("backward needs a scalar loss");
    done_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss.id)[0] = seed;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && !n.grad.empty()) {
        current_ = i;
        n.backward(*this);
      }
    }
    current_ = -1;
  }

  /// Gradient flowing into the node currently being differentiated.
  const Tensor& upstream() const { return nodes_.at(current_).grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    if (done_) throw BackwardError("tape already differentiated; start a new tape");
    nodes_.push_back(Node{std::move(value), Tensor{}, std::move(fn), requires_grad});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  void check_owned(const Var& v) const {
    if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw BackwardError("variable does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<int, std::string>> params_;
  int current_ = -1;
  bool done_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }

// ---------------------------------------------------------------------------
// Differentiable operators.

namespace ad {

namespace detail {

inline void add_into(Tensor& dst, const Tensor& src, double scale = 1.0) {
  auto& d = dst.values();
  const auto& s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
}

}  // namespace detail

inline Var conv3(Var x, Var w, Var b, int stride = 1) {
  Tape& t = *x.tape;
  Tensor y = kernels::conv3_forward(x.value(), w.value(), b.value(), stride);
  return t.record(std::move(y), {x, w, b}, [x, w, b, stride](Tape& tp) {
    Tensor* dx = tp.requires_grad(x.id) ? &tp.grad(x.id) : nullptr;
    Tensor* dw = tp.requires_grad(w.id) ? &tp.grad(w.id) : nullptr;
    Tensor* db = tp.requires_grad(b.id) ? &tp.grad(b.id) : nullptr;
    kernels::conv3_backward(tp.value(x.id), tp.value(w.id), stride, tp.upstream(), dx, dw, db);
  });
}

/// out[c, v] = gamma[c] * f[c, v] + beta[c]
inline Var film(Var f, Var gamma, Var beta) {
  const Tensor& fv = f.value();
  const int c = fv.channels();
  if (gamma.value().size() != static_cast<std::size_t>(c) || beta.value().size() != static_cast<std::size_t>(c)) {
    throw std::invalid_argument("film: gamma/beta length must equal channel count " + std::to_string(c));
  }
  const std::size_t n = fv.voxels();
  Tensor y(fv.shape());
  for (int ch = 0; ch < c; ++ch) {
    const double g = gamma.value()[ch], bb = beta.value()[ch];
    const double* s = fv.channel(ch);
    double* d = y.channel(ch);
    for (std::size_t i = 0; i < n; ++i) d[i] = g * s[i] + bb;
  }
  return f.tape->record(std::move(y), {f, gamma, beta}, [f, gamma, beta, c, n](Tape& tp) {
    const Tensor& up = tp.upstream();
    const Tensor& fv2 = tp.value(f.id);
    const Tensor& gv = tp.value(gamma.id);
    if (tp.requires_grad(f.id)) {
      Tensor& df = tp.grad(f.id);
      for (int ch = 0; ch < c; ++ch) {
        const double* u = up.channel(ch);
        double* d = df.channel(ch);
        for (std::size_t i = 0; i < n; ++i) d[i] += gv[ch] * u[i];
      }
    }
    const bool need_g = tp.requires_grad(gamma.id), need_b = tp.requires_grad(beta.id);
    if (need_g || need_b) {
      for (int ch = 0; ch < c; ++ch) {
        const double* u = up.channel(ch);
        const double* s = fv2.channel(ch);
        double sg = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          sg += u[i] * s[i];
          sb += u[i];
        }
        if (need_g) tp.grad(gamma.id)[ch] += sg;
        if (need_b) tp.grad(beta.id)[ch] += sb;
      }
    }
  });
}

/// Elementwise leaky ReLU; slope 0 gives plain ReLU. Subgradient at 0 uses
/// the negative-side slope.
inline Var leaky_relu(Var x, double slope = 0.2) {
  Tensor y = x.value();
  for (auto& v : y.values()) v = v > 0.0 ? v : slope * v;
  return x.tape->record(std::move(y), {x}, [x, slope](Tape& tp) {
    const auto& xv = tp.value(x.id).values();
    const auto& up = tp.upstream().values();
    auto& dx = tp.grad(x.id).values();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xv[i] > 0.0 ? up[i] : slope * up[i];
  });
}

inline Var relu(Var x) { return leaky_relu(x, 0.0); }

inline Var sigmoid(Var x) {
  Tensor y = x.value();
  for (auto& v : y.values()) v = 1.0 / (1.0 + std::exp(-v));
  Tensor ycopy = y;
  return x.tape->record(std::move(y), {x}, [x, yv = std::move(ycopy)](Tape& tp) {
    const auto& up = tp.upstream().values();
    auto& dx = tp.grad(x.id).values();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += up[i] * yv[i] * (1.0 - yv[i]);
  });
}

/// Softmax across channels at every voxel.
inline Var softmax_channels(Var x) {
  const Tensor& xv = x.value();
  const int c = xv.channels();
  const std::size_t n = xv.voxels();
  Tensor y(xv.shape());
  for (std::size_t v = 0; v < n; ++v) {
    double m = xv[v];
    for (int ch = 1; ch < c; ++ch) m = std::max(m, xv[ch * n + v]);
    double s = 0.0;
    for (int ch = 0; ch < c; ++ch) {
      const double e = std::exp(xv[ch * n + v] - m);
      y[ch * n + v] = e;
      s += e;
    }
    for (int ch = 0; ch < c; ++ch) y[ch * n + v] /= s;
  }
  Tensor ycopy = y;
  return x.tape->record(std::move(y), {x}, [x, c, n, yv = std::move(ycopy)](Tape& tp) {
    // d softmax: dx = y * (up - <up, y>)
    const Tensor& up = tp.upstream();
    Tensor& dx = tp.grad(x.id);
    for (std::size_t v = 0; v < n; ++v) {
      double dot = 0.0;
      for (int ch = 0; ch < c; ++ch) dot += up[ch * n + v] * yv[ch * n + v];
      for (int ch = 0; ch < c; ++ch) dx[ch * n + v] += yv[ch * n + v] * (up[ch * n + v] - dot);
    }
  });
}

inline Var upsample2(Var x) {
  return x.tape->record(kernels::upsample2_forward(x.value()), {x}, [x](Tape& tp) {
    detail::add_into(tp.grad(x.id), kernels::upsample2_adjoint(tp.upstream()));
  });
}

inline Var avg_pool2(Var x) {
  return x.tape->record(kernels::avg_pool2_forward(x.value()), {x},
                        [x](Tape& tp) { kernels::avg_pool2_backward(tp.upstream(), tp.grad(x.id)); });
}

/// Channel concatenation of two feature maps with equal dims.
inline Var concat(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!(av.dims() == bv.dims())) throw std::invalid_argument("concat: dim mismatch");
  const int ca = av.channels(), cb = bv.channels();
  Tensor y = Tensor::feature(ca + cb, av.dims());
  std::copy(av.values().begin(), av.values().end(), y.values().begin());
  std::copy(bv.values().begin(), bv.values().end(), y.values().begin() + static_cast<std::ptrdiff_t>(av.size()));
  const std::size_t na = av.size();
  return a.tape->record(std::move(y), {a, b}, [a, b, na](Tape& tp) {
    const auto& up = tp.upstream().values();
    if (tp.requires_grad(a.id)) {
      auto& da = tp.grad(a.id).values();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += up[i];
    }
    if (tp.requires_grad(b.id)) {
      auto& db = tp.grad(b.id).values();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += up[na + i];
    }
  });
}

inline Var add(Var a, Var b) {
  if (!a.value().same_shape(b.value())) throw std::invalid_argument("add: shape mismatch");
  Tensor y = a.value();
  detail::add_into(y, b.value());
  return a.tape->record(std::move(y), {a, b}, [a, b](Tape& tp) {
    if (tp.requires_grad(a.id)) detail::add_into(tp.grad(a.id), tp.upstream());
    if (tp.requires_grad(b.id)) detail::add_into(tp.grad(b.id), tp.upstream());
  });
}

inline Var scale(Var a, double s) {
  Tensor y = a.value();
  for (auto& v : y.values()) v *= s;
  return a.tape->record(std::move(y), {a}, [a, s](Tape& tp) { detail::add_into(tp.grad(a.id), tp.upstream(), s); });
}

inline Var add_scalar(Var a, double s) {
  Tensor y = a.value();
  for (auto& v : y.values()) v += s;
  return a.tape->record(std::move(y), {a}, [a](Tape& tp) { detail::add_into(tp.grad(a.id), tp.upstream()); });
}

/// Contiguous slice [offset, offset + len) of a flattened tensor, as a vector.
inline Var slice(Var a, std::size_t offset, std::size_t len) {
  const Tensor& av = a.value();
  if (offset + len > av.size()) throw std::out_of_range("slice out of range");
  Tensor y({static_cast<int>(len)});
  for (std::size_t i = 0; i < len; ++i) y[i] = av[offset + i];
  return a.tape->record(std::move(y), {a}, [a, offset, len](Tape& tp) {
    const Tensor& up = tp.upstream();
    Tensor& da = tp.grad(a.id);
    for (std::size_t i = 0; i < len; ++i) da[offset + i] += up[i];
  });
}

/// y = W x + b with W {out, in}.
inline Var linear(Var w, Var x, Var b) {
  const Tensor& wv = w.value();
  if (wv.shape().size() != 2) throw std::invalid_argument("linear: weights must be {out, in}");
  const int out = wv.shape()[0], in = wv.shape()[1];
  if (x.value().size() != static_cast<std::size_t>(in) || b.value().size() != static_cast<std::size_t>(out)) {
    throw std::invalid_argument("linear: size mismatch");
  }
  Tensor y({out});
  for (int o = 0; o < out; ++o) {
    double s = b.value()[o];
    for (int i = 0; i < in; ++i) s += wv[static_cast<std::size_t>(o) * in + i] * x.value()[i];
    y[o] = s;
  }
  return w.tape->record(std::move(y), {w, x, b}, [w, x, b, out, in](Tape& tp) {
    const Tensor& up = tp.upstream();
    const Tensor& wv2 = tp.value(w.id);
    const Tensor& xv = tp.value(x.id);
    if (tp.requires_grad(w.id)) {
      Tensor& dw = tp.grad(w.id);
      for (int o = 0; o < out; ++o)
        for (int i = 0; i < in; ++i) dw[static_cast<std::size_t>(o) * in + i] += up[o] * xv[i];
    }
    if (tp.requires_grad(x.id)) {
      Tensor& dx = tp.grad(x.id);
      for (int o = 0; o < out; ++o)
        for (int i = 0; i < in; ++i) dx[i] += wv2[static_cast<std::size_t>(o) * in + i] * up[o];
    }
    if (tp.requires_grad(b.id)) detail::add_into(tp.grad(b.id), up);
  });
}

/// Inner product of two equally sized tensors -> scalar.
inline Var dot(Var a, Var b) {
  if (a.value().size() != b.value().size()) throw std::invalid_argument("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) s += a.value()[i] * b.value()[i];
  return a.tape->record(Tensor::scalar(s), {a, b}, [a, b](Tape& tp) {
    const double g = tp.upstream()[0];
    if (tp.requires_grad(a.id)) detail::add_into(tp.grad(a.id), tp.value(b.id), g);
    if (tp.requires_grad(b.id)) detail::add_into(tp.grad(b.id), tp.value(a.id), g);
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& tp) {
    const double g = tp.upstream()[0];
    for (auto& d : tp.grad(a.id).values()) d += g;
  });
}

/// Per-channel sum over all voxels -> {C}.
inline Var global_sum_pool(Var x) {
  const Tensor& xv = x.value();
  const int c = xv.channels();
  const std::size_t n = xv.voxels();
  Tensor y({c});
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    const double* p = xv.channel(ch);
    for (std::size_t i = 0; i < n; ++i) s += p[i];
    y[ch] = s;
  }
  return x.tape->record(std::move(y), {x}, [x, c, n](Tape& tp) {
    const Tensor& up = tp.upstream();
    Tensor& dx = tp.grad(x.id);
    for (int ch = 0; ch < c; ++ch) {
      double* d = dx.channel(ch);
      for (std::size_t i = 0; i < n; ++i) d[i] += up[ch];
    }
  });
}

/// Trilinear sampling of img at x + u(x), border clamp.
inline Var warp(Var img, Var u) {
  return img.tape->record(kernels::warp_forward(img.value(), u.value()), {img, u}, [img, u](Tape& tp) {
    Tensor* di = tp.requires_grad(img.id) ? &tp.grad(img.id) : nullptr;
    Tensor* du = tp.requires_grad(u.id) ? &tp.grad(u.id) : nullptr;
    // img and u may be the same node; kernels accumulate so aliasing is fine.
    kernels::warp_backward(tp.value(img.id), tp.value(u.id), tp.upstream(), di, du);
  });
}

/// Scaling and squaring: u0 = v / 2^steps, then u <- u + u o (id + u), steps times.
inline Var integrate_ss(Var v, int steps = 7) {
  if (steps < 1) throw std::invalid_argument("integrate_ss: steps must be >= 1");
  Var u = scale(v, std::ldexp(1.0, -steps));
  for (int s = 0; s < steps; ++s) u = add(u, warp(u, u));
  return u;
}

/// mean((a - b)^2) over all entries.
inline Var mse(Var a, Var b) {
  if (!a.value().same_shape(b.value())) throw std::invalid_argument("mse: shape mismatch");
  const std::size_t n = a.value().size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  return a.tape->record(Tensor::scalar(s / static_cast<double>(n)), {a, b}, [a, b, n](Tape& tp) {
    const double g = 2.0 * tp.upstream()[0] / static_cast<double>(n);
    const Tensor& av = tp.value(a.id);
    const Tensor& bv = tp.value(b.id);
    if (tp.requires_grad(a.id)) {
      Tensor& da = tp.grad(a.id);
      for (std::size_t i = 0; i < n; ++i) da[i] += g * (av[i] - bv[i]);
    }
    if (tp.requires_grad(b.id)) {
      Tensor& db = tp.grad(b.id);
      for (std::size_t i = 0; i < n; ++i) db[i] -= g * (av[i] - bv[i]);
    }
  });
}

/// Weighted sum of scalar vars.
inline Var weighted_sum(const std::vector<std::pair<double, Var>>& terms) {
  if (terms.empty()) throw std::invalid_argument("weighted_sum: no terms");
  Var acc = scale(terms[0].second, terms[0].first);
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, scale(terms[i].second, terms[i].first));
  return acc;
}

}  // namespace ad
}  // namespace condatlas
