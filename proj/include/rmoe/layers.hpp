#pragma once

// Differentiable building blocks with hand-written gradients: event
// embedding, GRU cell + backpropagation through time, linear head, binary
// cross entropy, and a central finite-difference gradient checker.
//
// GRU convention (Cho et al. 2014, reset applied before the recurrent
// product):
//
//   r = sigmoid(W_r v + U_r h_prev + b_r)
//   z = sigmoid(W_z v + U_z h_prev + b_z)
//   c = tanh(W_c v + U_c (r * h_prev) + b_c)
//   h = (1 - z) * h_prev + z * c

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "rmoe/tensor.hpp"

namespace rmoe {

using BinaryVec = std::vector<std::uint8_t>;

/// Named, shaped, mutable view of one parameter tensor. Vectors report
/// cols == 0.
struct TensorRef {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::span<double> values;
};

struct ConstTensorRef {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::span<const double> values;
};

namespace detail {

inline std::string join_name(const std::string& prefix, std::string_view name) {
  return prefix.empty() ? std::string(name) : prefix + "." + std::string(name);
}

template <class Sink>
struct RefCollector {
  Sink* out;
  void operator()(const std::string& name, Mat& m) const {
    out->push_back({name, m.rows(), m.cols(), m.span()});
  }
  void operator()(const std::string& name, Vec& v) const {
    out->push_back({name, v.size(), 0, v.span()});
  }
  void operator()(const std::string& name, const Mat& m) const {
    out->push_back({name, m.rows(), m.cols(), m.span()});
  }
  void operator()(const std::string& name, const Vec& v) const {
    out->push_back({name, v.size(), 0, v.span()});
  }
};

}  // namespace detail

/// Flattened list of every tensor in a parameter struct (anything with a
/// visit_tensors overload), in a fixed deterministic order.
template <class P>
std::vector<TensorRef> tensor_refs(P& p) {
  std::vector<TensorRef> out;
  visit_tensors(p, detail::RefCollector<std::vector<TensorRef>>{&out}, "");
  return out;
}

template <class P>
std::vector<ConstTensorRef> tensor_refs_const(const P& p) {
  std::vector<ConstTensorRef> out;
  visit_tensors(p, detail::RefCollector<std::vector<ConstTensorRef>>{&out}, "");
  return out;
}

template <class P>
std::size_t parameter_count(const P& p) {
  std::size_t n = 0;
  for (const auto& t : tensor_refs_const(p)) n += t.values.size();
  return n;
}

template <class P>
void zero_fill(P& p) {
  for (auto& t : tensor_refs(p)) std::fill(t.values.begin(), t.values.end(), 0.0);
}

/// FNV-1a over the raw bytes of every tensor, in visit order.
template <class P>
std::uint64_t parameter_hash(const P& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tensor_refs_const(p)) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.values.data());
    for (std::size_t i = 0; i < t.values.size_bytes(); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Embedding

/// W_emb has one row per input event type: |E| x embed_dim.
struct EmbeddingParams {
  Mat w;

  std::size_t n_events() const noexcept { return w.rows(); }
  std::size_t dim() const noexcept { return w.cols(); }

  static EmbeddingParams zeros(std::size_t n_events, std::size_t dim) {
    return {Mat(n_events, dim)};
  }
  static EmbeddingParams glorot(std::size_t n_events, std::size_t dim, Rng& rng) {
    return {glorot_init(n_events, dim, rng)};
  }
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, EmbeddingParams>
void visit_tensors(P& p, F&& f, const std::string& prefix) {
  f(detail::join_name(prefix, "W_emb"), p.w);
}

/// v = W_emb^T y: the sum of the embedding rows of the set bits.
inline Vec embed_forward(std::span<const std::uint8_t> y, const EmbeddingParams& p) {
  if (y.size() != p.n_events()) {
    throw Error("embed_forward: input has " + std::to_string(y.size()) +
                " entries, vocabulary has " + std::to_string(p.n_events()));
  }
  Vec v(p.dim());
  for (std::size_t j = 0; j < y.size(); ++j) {
    if (y[j] > 1) throw Error("embed_forward: non-binary entry at index " + std::to_string(j));
    if (y[j] == 0) continue;
    const double* row = p.w.row(j);
    for (std::size_t k = 0; k < v.size(); ++k) v[k] += row[k];
  }
  return v;
}

inline void embed_backward(std::span<const std::uint8_t> y, const Vec& dv, EmbeddingParams& grad) {
  for (std::size_t j = 0; j < y.size(); ++j) {
    if (y[j] == 0) continue;
    double* row = grad.w.row(j);
    for (std::size_t k = 0; k < dv.size(); ++k) row[k] += dv[k];
  }
}

// ---------------------------------------------------------------------------
// GRU

struct GruParams {
  Mat w_r, w_z, w_c;  // hidden x input
  Mat u_r, u_z, u_c;  // hidden x hidden
  Vec b_r, b_z, b_c;  // hidden

  std::size_t hidden() const noexcept { return b_r.size(); }
  std::size_t input() const noexcept { return w_r.cols(); }

  static GruParams zeros(std::size_t input, std::size_t hidden) {
    GruParams p;
    p.w_r = p.w_z = p.w_c = Mat(hidden, input);
    p.u_r = p.u_z = p.u_c = Mat(hidden, hidden);
    p.b_r = p.b_z = p.b_c = Vec(hidden);
    return p;
  }

  /// Glorot weights, zero biases.
  static GruParams glorot(std::size_t input, std::size_t hidden, Rng& rng) {
    GruParams p = zeros(input, hidden);
    p.w_r = glorot_init(hidden, input, rng);
    p.w_z = glorot_init(hidden, input, rng);
    p.w_c = glorot_init(hidden, input, rng);
    p.u_r = glorot_init(hidden, hidden, rng);
    p.u_z = glorot_init(hidden, hidden, rng);
    p.u_c = glorot_init(hidden, hidden, rng);
    return p;
  }
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, GruParams>
void visit_tensors(P& p, F&& f, const std::string& prefix) {
  f(detail::join_name(prefix, "W_r"), p.w_r);
  f(detail::join_name(prefix, "W_z"), p.w_z);
  f(detail::join_name(prefix, "W_c"), p.w_c);
  f(detail::join_name(prefix, "U_r"), p.u_r);
  f(detail::join_name(prefix, "U_z"), p.u_z);
  f(detail::join_name(prefix, "U_c"), p.u_c);
  f(detail::join_name(prefix, "b_r"), p.b_r);
  f(detail::join_name(prefix, "b_z"), p.b_z);
  f(detail::join_name(prefix, "b_c"), p.b_c);
}

/// Activations of one GRU step, kept for the backward pass.
struct GruStep {
  Vec h_prev;
  Vec v;
  Vec r;
  Vec z;
  Vec c;
  Vec rh;  // r * h_prev
  Vec h;
};

/// Activations of every forward step of the current sequence, stored as
/// contiguous step-major arrays.
class GruTape {
 public:
  std::size_t size() const noexcept { return steps_; }
  std::size_t hidden() const noexcept { return hidden_; }
  std::size_t input() const noexcept { return input_; }

  void clear() noexcept { steps_ = 0; }

  void reset(std::size_t steps, std::size_t input, std::size_t hidden) {
    steps_ = steps;
    input_ = input;
    hidden_ = hidden;
    v_.assign(steps * input, 0.0);
    for (auto* a : {&h_prev_, &r_, &z_, &c_, &rh_, &h_}) a->assign(steps * hidden, 0.0);
  }

  std::span<const double> v(std::size_t t) const { return {v_.data() + t * input_, input_}; }
  std::span<const double> h_prev(std::size_t t) const { return at(h_prev_, t); }
  std::span<const double> r(std::size_t t) const { return at(r_, t); }
  std::span<const double> z(std::size_t t) const { return at(z_, t); }
  std::span<const double> c(std::size_t t) const { return at(c_, t); }
  std::span<const double> rh(std::size_t t) const { return at(rh_, t); }
  std::span<const double> h(std::size_t t) const { return at(h_, t); }
  std::span<const double> last_hidden() const { return h(steps_ - 1); }

  double* v_mut(std::size_t t) { return v_.data() + t * input_; }
  double* h_prev_mut(std::size_t t) { return mut(h_prev_, t); }
  double* r_mut(std::size_t t) { return mut(r_, t); }
  double* z_mut(std::size_t t) { return mut(z_, t); }
  double* c_mut(std::size_t t) { return mut(c_, t); }
  double* rh_mut(std::size_t t) { return mut(rh_, t); }
  double* h_mut(std::size_t t) { return mut(h_, t); }

  /// Copy of step t as a standalone cache entry.
  GruStep step(std::size_t t) const {
    auto vec = [](std::span<const double> x) { return Vec(std::vector<double>(x.begin(), x.end())); };
    return {vec(h_prev(t)), vec(v(t)), vec(r(t)), vec(z(t)), vec(c(t)), vec(rh(t)), vec(h(t))};
  }

 private:
  std::span<const double> at(const std::vector<double>& a, std::size_t t) const {
    return {a.data() + t * hidden_, hidden_};
  }
  double* mut(std::vector<double>& a, std::size_t t) { return a.data() + t * hidden_; }

  std::size_t steps_ = 0;
  std::size_t input_ = 0;
  std::size_t hidden_ = 0;
  std::vector<double> v_, h_prev_, r_, z_, c_, rh_, h_;
};

namespace detail {

/// One GRU step on raw buffers. `scratch` holds `hidden` doubles.
inline void gru_step_raw(const GruParams& p, const double* h_prev, const double* v, double* r,
                         double* z, double* c, double* rh, double* h, double* scratch) {
  const std::size_t d = p.hidden();
  const std::size_t in = p.input();
  const std::span<const double> vs(v, in);
  const std::span<const double> hs(h_prev, d);
  for (std::size_t i = 0; i < d; ++i) {
    r[i] = p.b_r[i];
    z[i] = p.b_z[i];
    scratch[i] = p.b_c[i];
  }
  matvec_acc(p.w_r, vs, {r, d});
  matvec_acc(p.u_r, hs, {r, d});
  matvec_acc(p.w_z, vs, {z, d});
  matvec_acc(p.u_z, hs, {z, d});
  for (std::size_t i = 0; i < d; ++i) {
    r[i] = sigmoid(r[i]);
    z[i] = sigmoid(z[i]);
    rh[i] = r[i] * h_prev[i];
  }
  matvec_acc(p.w_c, vs, {scratch, d});
  matvec_acc(p.u_c, {rh, d}, {scratch, d});
  for (std::size_t i = 0; i < d; ++i) {
    c[i] = std::tanh(scratch[i]);
    h[i] = (1.0 - z[i]) * h_prev[i] + z[i] * c[i];
  }
}

}  // namespace detail

inline GruStep gru_cell_forward(const Vec& h_prev, const Vec& v, const GruParams& p) {
  const std::size_t d = p.hidden();
  if (h_prev.size() != d || v.size() != p.input()) {
    throw Error("gru_cell_forward: expected h_prev " + std::to_string(d) + " and v " +
                std::to_string(p.input()) + ", got " + std::to_string(h_prev.size()) + " and " +
                std::to_string(v.size()));
  }
  GruStep s{h_prev, v, Vec(d), Vec(d), Vec(d), Vec(d), Vec(d)};
  Vec scratch(d);
  detail::gru_step_raw(p, h_prev.data(), v.data(), s.r.data(), s.z.data(), s.c.data(), s.rh.data(),
                       s.h.data(), scratch.data());
  return s;
}

/// Runs the cell over `inputs` from h_0 = 0, recording every step.
inline void gru_forward(const GruParams& p, std::span<const Vec> inputs, GruTape& tape) {
  const std::size_t d = p.hidden();
  const std::size_t in = p.input();
  tape.reset(inputs.size(), in, d);
  std::vector<double> scratch(d);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (inputs[t].size() != in) {
      throw Error("gru_forward: input " + std::to_string(t) + " has width " +
                  std::to_string(inputs[t].size()) + ", expected " + std::to_string(in));
    }
    std::copy(inputs[t].begin(), inputs[t].end(), tape.v_mut(t));
    double* hp = tape.h_prev_mut(t);
    if (t > 0) std::copy_n(tape.h_mut(t - 1), d, hp);
    detail::gru_step_raw(p, hp, tape.v_mut(t), tape.r_mut(t), tape.z_mut(t), tape.c_mut(t),
                         tape.rh_mut(t), tape.h_mut(t), scratch.data());
  }
}

/// Accumulates parameter gradients into `grad` given dL/dh_t from the
/// outputs at each step (recurrent contributions are added internally).
/// Returns dL/dv_t per step.
inline std::vector<Vec> gru_backward_acc(const GruParams& p, const GruTape& tape,
                                         std::span<const Vec> dh_out, GruParams& grad) {
  if (dh_out.size() != tape.size()) {
    throw Error("bptt_backward: tape has " + std::to_string(tape.size()) +
                " steps, got gradients for " + std::to_string(dh_out.size()));
  }
  const std::size_t d = p.hidden();
  const std::size_t T = tape.size();
  std::vector<Vec> dv(T, Vec(p.input()));
  Vec dh_next(d);
  Vec dh(d), da_r(d), da_z(d), da_c(d), drh(d), dh_prev(d);
  for (std::size_t t = T; t-- > 0;) {
    const auto h_prev = tape.h_prev(t);
    const auto r = tape.r(t);
    const auto z = tape.z(t);
    const auto c = tape.c(t);
    for (std::size_t i = 0; i < d; ++i) dh[i] = dh_out[t][i] + dh_next[i];
    for (std::size_t i = 0; i < d; ++i) {
      const double dz = dh[i] * (c[i] - h_prev[i]);
      const double dc = dh[i] * z[i];
      da_z[i] = dz * z[i] * (1.0 - z[i]);
      da_c[i] = dc * (1.0 - c[i] * c[i]);
      dh_prev[i] = dh[i] * (1.0 - z[i]);
    }
    drh.fill(0.0);
    matvec_t_acc(p.u_c, da_c.span(), drh.span());
    for (std::size_t i = 0; i < d; ++i) {
      const double dr = drh[i] * h_prev[i];
      da_r[i] = dr * r[i] * (1.0 - r[i]);
      dh_prev[i] += drh[i] * r[i];
    }
    const auto v = tape.v(t);
    outer_acc(grad.w_r, da_r.span(), v);
    outer_acc(grad.w_z, da_z.span(), v);
    outer_acc(grad.w_c, da_c.span(), v);
    outer_acc(grad.u_r, da_r.span(), h_prev);
    outer_acc(grad.u_z, da_z.span(), h_prev);
    outer_acc(grad.u_c, da_c.span(), tape.rh(t));
    for (std::size_t i = 0; i < d; ++i) {
      grad.b_r[i] += da_r[i];
      grad.b_z[i] += da_z[i];
      grad.b_c[i] += da_c[i];
    }
    matvec_t_acc(p.u_r, da_r.span(), dh_prev.span());
    matvec_t_acc(p.u_z, da_z.span(), dh_prev.span());
    matvec_t_acc(p.w_r, da_r.span(), dv[t].span());
    matvec_t_acc(p.w_z, da_z.span(), dv[t].span());
    matvec_t_acc(p.w_c, da_c.span(), dv[t].span());
    std::swap(dh_next, dh_prev);
  }
  return dv;
}

struct GruGradients {
  GruParams params;
  std::vector<Vec> inputs;  // dL/dv_t
};

/// Full backpropagation through time for one recorded sequence. Returns
/// fresh gradients; nothing is carried over between calls.
inline GruGradients bptt_backward(const GruParams& p, const GruTape& tape,
                                  std::span<const Vec> dh_out) {
  GruGradients g{GruParams::zeros(p.input(), p.hidden()), {}};
  g.inputs = gru_backward_acc(p, tape, dh_out, g.params);
  return g;
}

// ---------------------------------------------------------------------------
// Linear head

/// Output projection W_o (out x hidden) and bias b_o.
struct HeadParams {
  Mat w;
  Vec b;

  std::size_t out() const noexcept { return b.size(); }
  std::size_t in() const noexcept { return w.cols(); }

  static HeadParams zeros(std::size_t in, std::size_t out) { return {Mat(out, in), Vec(out)}; }
  static HeadParams glorot(std::size_t in, std::size_t out, Rng& rng) {
    return {glorot_init(out, in, rng), Vec(out)};
  }
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, HeadParams>
void visit_tensors(P& p, F&& f, const std::string& prefix) {
  f(detail::join_name(prefix, "W_o"), p.w);
  f(detail::join_name(prefix, "b_o"), p.b);
}

inline Vec head_logits(const HeadParams& p, std::span<const double> h) {
  if (h.size() != p.in()) throw Error("head: input width mismatch");
  Vec out = p.b;
  matvec_acc(p.w, h, out.span());
  return out;
}

/// grad += dlogits h^T; dh += W^T dlogits.
inline void head_backward(const HeadParams& p, std::span<const double> h, const Vec& dlogits,
                          HeadParams& grad, Vec& dh) {
  outer_acc(grad.w, dlogits.span(), h);
  for (std::size_t i = 0; i < dlogits.size(); ++i) grad.b[i] += dlogits[i];
  matvec_t_acc(p.w, dlogits.span(), dh.span());
}

// ---------------------------------------------------------------------------
// Loss

struct BceResult {
  double loss = 0.0;
  Vec grad;  // dLoss/dpred
};

/// Mean binary cross entropy over the entries of `pred`.
inline BceResult bce_loss(const Vec& pred, std::span<const std::uint8_t> target) {
  if (pred.size() != target.size()) {
    throw Error("bce_loss: prediction length " + std::to_string(pred.size()) +
                " != target length " + std::to_string(target.size()));
  }
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  BceResult r{0.0, Vec(pred.size())};
  for (std::size_t j = 0; j < pred.size(); ++j) {
    const double p = pred[j];
    if (target[j] != 0) {
      r.loss -= std::log(p);
      r.grad[j] = -inv_n / p;
    } else {
      r.loss -= std::log1p(-p);
      r.grad[j] = inv_n / (1.0 - p);
    }
  }
  r.loss *= inv_n;
  return r;
}

/// BCE of sigmoid(logits) with its gradient taken directly w.r.t. the
/// logits, (p - y)/n, which stays finite when p saturates. The reported loss
/// uses the numerically stable softplus form.
inline double bce_with_logits(const Vec& logits, std::span<const std::uint8_t> target,
                              Vec* dlogits, double scale = 1.0) {
  const double inv_n = 1.0 / static_cast<double>(logits.size());
  double loss = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const double a = logits[j];
    const double y = target[j] != 0 ? 1.0 : 0.0;
    // log(1 + e^a) - y a
    loss += std::max(a, 0.0) + std::log1p(std::exp(-std::abs(a))) - y * a;
    if (dlogits != nullptr) (*dlogits)[j] = scale * inv_n * (sigmoid(a) - y);
  }
  return loss * inv_n;
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Central finite differences over every parameter entry. `loss` must read
/// the parameters through the same object that `params` refers to. Returns
/// the normwise relative error max|a - n| / max(max|a|, max|n|, 1e-8) over
/// the whole parameter set.
template <class P, class LossFn>
double grad_check(P& params, const P& analytic, LossFn&& loss, double h = 1e-5) {
  auto refs = tensor_refs(params);
  const auto grads = tensor_refs_const(analytic);
  if (refs.size() != grads.size()) throw Error("grad_check: gradient structure mismatch");
  double max_diff = 0.0;
  double max_mag = 1e-8;
  for (std::size_t k = 0; k < refs.size(); ++k) {
    if (refs[k].values.size() != grads[k].values.size()) {
      throw Error("grad_check: shape mismatch for " + refs[k].name);
    }
    for (std::size_t i = 0; i < refs[k].values.size(); ++i) {
      double& theta = refs[k].values[i];
      const double saved = theta;
      theta = saved + h;
      const double lp = loss();
      theta = saved - h;
      const double lm = loss();
      theta = saved;
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = grads[k].values[i];
      max_diff = std::max(max_diff, std::abs(a - numeric));
      max_mag = std::max({max_mag, std::abs(a), std::abs(numeric)});
    }
  }
  return max_diff / max_mag;
}

}  // namespace rmoe
