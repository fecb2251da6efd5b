#pragma once

// Predictors assembled from the layers: the base GRU model, experts and the
// gating network, the plain mixture, the residual mixture (base output +
// mixture output), and the full-history logistic regression baseline.
//
// Every model predicts the target events of window t+1 from windows 1..t,
// so a sequence of T windows yields T-1 predictions. Sequence losses are the
// mean over those T-1 steps of the per-step BCE (itself a mean over |E'|).

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "rmoe/data.hpp"
#include "rmoe/layers.hpp"
#include "rmoe/tensor.hpp"

namespace rmoe {

/// Lower/upper clamp applied to residual-sum predictions before the loss.
inline constexpr double kPredictionClamp = 1e-6;

/// How the residual mixture is combined with the base model.
///  - prob_sum:  y = clamp(o_base + o_moe), both in probability space.
///  - logit_sum: y = sigmoid(base logit + sum_i g_i * expert logit_i).
enum class Combine { prob_sum, logit_sum };

inline std::string to_string(Combine c) { return c == Combine::prob_sum ? "prob_sum" : "logit_sum"; }

inline Combine combine_from_string(const std::string& s) {
  if (s == "prob_sum") return Combine::prob_sum;
  if (s == "logit_sum") return Combine::logit_sum;
  throw Error("unknown combine mode '" + s + "' (expected prob_sum or logit_sum)");
}

namespace detail {
inline void require_usable(const WindowedSequence& s) {
  if (s.length() < 2) {
    throw Error("sequence '" + s.id + "' has " + std::to_string(s.length()) +
                " window(s); at least 2 are needed to predict");
  }
}

inline std::vector<Vec> embed_inputs(const WindowedSequence& s, const EmbeddingParams& emb) {
  std::vector<Vec> v;
  v.reserve(s.length() - 1);
  for (std::size_t t = 0; t + 1 < s.length(); ++t) v.push_back(embed_forward(s.windows[t], emb));
  return v;
}

inline double clamp_prob(double p, double eps) { return std::clamp(p, eps, 1.0 - eps); }
}  // namespace detail

// ---------------------------------------------------------------------------
// Base model

struct BaseModel {
  EmbeddingParams emb;
  GruParams gru;
  HeadParams head;

  std::size_t n_events() const noexcept { return emb.n_events(); }
  std::size_t n_targets() const noexcept { return head.out(); }
  std::size_t embed_dim() const noexcept { return emb.dim(); }
  std::size_t hidden_dim() const noexcept { return gru.hidden(); }

  static BaseModel zeros(std::size_t n_events, std::size_t n_targets, std::size_t embed_dim,
                         std::size_t hidden) {
    return {EmbeddingParams::zeros(n_events, embed_dim), GruParams::zeros(embed_dim, hidden),
            HeadParams::zeros(hidden, n_targets)};
  }

  static BaseModel init(std::size_t n_events, std::size_t n_targets, std::size_t embed_dim,
                        std::size_t hidden, Rng& rng) {
    BaseModel m;
    m.emb = EmbeddingParams::glorot(n_events, embed_dim, rng);
    m.gru = GruParams::glorot(embed_dim, hidden, rng);
    m.head = HeadParams::glorot(hidden, n_targets, rng);
    return m;
  }
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, BaseModel>
void visit_tensors(P& p, F&& f, const std::string& prefix) {
  visit_tensors(p.emb, f, detail::join_name(prefix, "emb"));
  visit_tensors(p.gru, f, detail::join_name(prefix, "gru"));
  visit_tensors(p.head, f, detail::join_name(prefix, "head"));
}

/// Forward activations of the base model over one sequence.
struct BasePass {
  std::vector<Vec> inputs;  // v_t, t = 1..T-1
  GruTape tape;
  std::vector<Vec> logits;
  std::vector<Vec> probs;
};

inline BasePass base_pass(const BaseModel& m, const WindowedSequence& s) {
  detail::require_usable(s);
  BasePass p;
  p.inputs = detail::embed_inputs(s, m.emb);
  gru_forward(m.gru, p.inputs, p.tape);
  p.logits.reserve(p.inputs.size());
  p.probs.reserve(p.inputs.size());
  for (std::size_t t = 0; t < p.tape.size(); ++t) {
    p.logits.push_back(head_logits(m.head, p.tape.h(t)));
    p.probs.push_back(sigmoid_vec(p.logits.back()));
  }
  return p;
}

/// o_base for t = 1..T-1; entry t-1 predicts window t+1 from windows 1..t.
inline std::vector<Vec> base_forward(const WindowedSequence& s, const BaseModel& m) {
  return base_pass(m, s).probs;
}

/// Backpropagates per-step logit gradients through head, GRU and embedding.
inline void base_backward(const BaseModel& m, const WindowedSequence& s, const BasePass& pass,
                          std::span<const Vec> dlogits, BaseModel& grad,
                          std::vector<Vec>* extra_dv = nullptr) {
  const std::size_t steps = pass.inputs.size();
  std::vector<Vec> dh(steps, Vec(m.hidden_dim()));
  for (std::size_t t = 0; t < steps; ++t) {
    head_backward(m.head, pass.tape.h(t), dlogits[t], grad.head, dh[t]);
  }
  auto dv = gru_backward_acc(m.gru, pass.tape, dh, grad.gru);
  for (std::size_t t = 0; t < steps; ++t) {
    if (extra_dv != nullptr) {
      for (std::size_t k = 0; k < dv[t].size(); ++k) dv[t][k] += (*extra_dv)[t][k];
    }
    embed_backward(s.windows[t], dv[t], grad.emb);
  }
}

/// Mean per-step BCE of the base model; its gradient is added to `*grad`
/// (which must already have the model's shapes) when `grad` is non-null.
inline double base_sequence_loss_acc(const BaseModel& m, const WindowedSequence& s,
                                     std::span<const std::size_t> targets, BaseModel* grad) {
  const BasePass pass = base_pass(m, s);
  const std::size_t steps = pass.inputs.size();
  const double inv_steps = 1.0 / static_cast<double>(steps);
  std::vector<Vec> dlogits(steps, Vec(m.n_targets()));
  double loss = 0.0;
  for (std::size_t t = 0; t < steps; ++t) {
    const BinaryVec y = target_bits(s.windows[t + 1], targets);
    loss += bce_with_logits(pass.logits[t], y, grad ? &dlogits[t] : nullptr, inv_steps);
  }
  if (grad != nullptr) base_backward(m, s, pass, dlogits, *grad);
  return loss * inv_steps;
}

/// As base_sequence_loss_acc, but `*grad` is overwritten.
inline double base_sequence_loss(const BaseModel& m, const WindowedSequence& s,
                                 std::span<const std::size_t> targets, BaseModel* grad) {
  if (grad != nullptr) {
    *grad = BaseModel::zeros(m.n_events(), m.n_targets(), m.embed_dim(), m.hidden_dim());
  }
  return base_sequence_loss_acc(m, s, targets, grad);
}

// ---------------------------------------------------------------------------
// Experts, gate, mixture

struct ExpertModel {
  GruParams gru;
  HeadParams head;
};

struct GatingModel {
  GruParams gru;
  HeadParams head;  // output width = number of experts
};

template <class P, class F>
  requires(std::same_as<std::remove_const_t<P>, ExpertModel> ||
           std::same_as<std::remove_const_t<P>, GatingModel>)
void visit_tensors(P& p, F&& f, const std::string& prefix) {
  visit_tensors(p.gru, f, detail::join_name(prefix, "gru"));
  visit_tensors(p.head, f, detail::join_name(prefix, "head"));
}

struct MoeModel {
  std::vector<ExpertModel> experts;
  GatingModel gate;

  std::size_t n_experts() const noexcept { return experts.size(); }
  std::size_t hidden_dim() const noexcept { return gate.gru.hidden(); }
  std::size_t input_dim() const noexcept { return gate.gru.input(); }
  std::size_t n_targets() const noexcept { return experts.empty() ? 0 : experts[0].head.out(); }

  static MoeModel zeros(std::size_t input_dim, std::size_t hidden, std::size_t n_experts,
                        std::size_t n_targets) {
    MoeModel m;
    for (std::size_t i = 0; i < n_experts; ++i) {
      m.experts.push_back({GruParams::zeros(input_dim, hidden), HeadParams::zeros(hidden, n_targets)});
    }
    m.gate = {GruParams::zeros(input_dim, hidden), HeadParams::zeros(hidden, n_experts)};
    return m;
  }

  /// Glorot weights; gate and expert biases zero unless `expert_bias` is set.
  static MoeModel init(std::size_t input_dim, std::size_t hidden, std::size_t n_experts,
                       std::size_t n_targets, Rng& rng, double expert_bias = 0.0) {
    if (n_experts == 0) throw Error("mixture needs at least one expert");
    MoeModel m;
    for (std::size_t i = 0; i < n_experts; ++i) {
      ExpertModel e{GruParams::glorot(input_dim, hidden, rng),
                    HeadParams::glorot(hidden, n_targets, rng)};
      e.head.b.fill(expert_bias);
      m.experts.push_back(std::move(e));
    }
    m.gate = {GruParams::glorot(input_dim, hidden, rng), HeadParams::glorot(hidden, n_experts, rng)};
    return m;
  }
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, MoeModel>
void visit_tensors(P& p, F&& f, const std::string& prefix) {
  for (std::size_t i = 0; i < p.experts.size(); ++i) {
    visit_tensors(p.experts[i], f, detail::join_name(prefix, "expert" + std::to_string(i)));
  }
  visit_tensors(p.gate, f, detail::join_name(prefix, "gate"));
}

/// Whether experts are mixed as sigmoid probabilities or as raw logits.
enum class MixSpace { probability, logit };

/// Forward activations of the mixture over one embedded sequence.
struct MoePass {
  std::vector<GruTape> expert_tapes;
  std::vector<std::vector<Vec>> expert_out;  // [expert][t]
  GruTape gate_tape;
  std::vector<Vec> gate_weights;  // [t], softmax output g_t
  std::vector<Vec> mix;           // [t], sum_i g_i * expert_out_i
};

/// Advances the gating GRU state by one step and returns g = softmax(head).
inline Vec gating_weights(const Vec& v, const GatingModel& gate, Vec& state) {
  GruStep s = gru_cell_forward(state, v, gate.gru);
  state = std::move(s.h);
  return softmax_vec(head_logits(gate.head, state.span()));
}

inline MoePass moe_pass(const MoeModel& m, std::span<const Vec> inputs,
                        MixSpace space = MixSpace::probability) {
  if (m.n_experts() == 0) throw Error("moe_forward: mixture has no experts");
  if (m.gate.head.out() != m.n_experts()) {
    throw Error("moe_forward: gate width " + std::to_string(m.gate.head.out()) + " != " +
                std::to_string(m.n_experts()) + " experts");
  }
  const std::size_t steps = inputs.size();
  const std::size_t n = m.n_experts();
  MoePass p;
  p.expert_tapes.resize(n);
  p.expert_out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    gru_forward(m.experts[i].gru, inputs, p.expert_tapes[i]);
    p.expert_out[i].reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      Vec a = head_logits(m.experts[i].head, p.expert_tapes[i].h(t));
      p.expert_out[i].push_back(space == MixSpace::probability ? sigmoid_vec(a) : std::move(a));
    }
  }
  gru_forward(m.gate.gru, inputs, p.gate_tape);
  p.gate_weights.reserve(steps);
  p.mix.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    p.gate_weights.push_back(softmax_vec(head_logits(m.gate.head, p.gate_tape.h(t))));
    const Vec& g = p.gate_weights.back();
    Vec mix(m.n_targets());
    // Fixed expert order keeps the reduction deterministic.
    for (std::size_t i = 0; i < n; ++i) {
      const Vec& o = p.expert_out[i][t];
      for (std::size_t j = 0; j < mix.size(); ++j) mix[j] += g[i] * o[j];
    }
    p.mix.push_back(std::move(mix));
  }
  return p;
}

/// o_moe,t = sum_i g_i,t * sigmoid(expert head_i,t), for each embedded input.
inline std::vector<Vec> moe_forward(std::span<const Vec> inputs, const MoeModel& m) {
  return moe_pass(m, inputs, MixSpace::probability).mix;
}

/// Accumulates mixture gradients given dL/dmix_t; adds dL/dv_t into `dv`
/// when provided.
inline void moe_backward(const MoeModel& m, const MoePass& pass, std::span<const Vec> dmix,
                         MixSpace space, MoeModel& grad, std::vector<Vec>* dv) {
  const std::size_t steps = pass.mix.size();
  const std::size_t n = m.n_experts();
  const std::size_t hidden = m.hidden_dim();

  std::vector<Vec> dh_gate(steps, Vec(hidden));
  Vec dg(n), da_gate(n);
  for (std::size_t t = 0; t < steps; ++t) {
    const Vec& g = pass.gate_weights[t];
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      const Vec& o = pass.expert_out[i][t];
      for (std::size_t j = 0; j < o.size(); ++j) s += dmix[t][j] * o[j];
      dg[i] = s;
      dot += g[i] * s;
    }
    for (std::size_t i = 0; i < n; ++i) da_gate[i] = g[i] * (dg[i] - dot);
    head_backward(m.gate.head, pass.gate_tape.h(t), da_gate, grad.gate.head, dh_gate[t]);
  }
  auto accumulate_dv = [&](const std::vector<Vec>& d) {
    if (dv == nullptr) return;
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t k = 0; k < d[t].size(); ++k) (*dv)[t][k] += d[t][k];
    }
  };
  accumulate_dv(gru_backward_acc(m.gate.gru, pass.gate_tape, dh_gate, grad.gate.gru));

  std::vector<Vec> dh(steps, Vec(hidden));
  Vec da(m.n_targets());
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& x : dh) x.fill(0.0);
    for (std::size_t t = 0; t < steps; ++t) {
      const double gi = pass.gate_weights[t][i];
      const Vec& o = pass.expert_out[i][t];
      for (std::size_t j = 0; j < da.size(); ++j) {
        da[j] = gi * dmix[t][j];
        if (space == MixSpace::probability) da[j] *= o[j] * (1.0 - o[j]);
      }
      head_backward(m.experts[i].head, pass.expert_tapes[i].h(t), da, grad.experts[i].head,
                    dh[t]);
    }
    accumulate_dv(gru_backward_acc(m.experts[i].gru, pass.expert_tapes[i], dh, grad.experts[i].gru));
  }
}

// ---------------------------------------------------------------------------
// Plain mixture (ablation): its own embedding, mixture output is the prediction.

struct StandaloneMoe {
  EmbeddingParams emb;
  MoeModel moe;

  std::size_t n_events() const noexcept { return emb.n_events(); }
  std::size_t n_targets() const noexcept { return moe.n_targets(); }

  static StandaloneMoe zeros_like(const StandaloneMoe& m) {
    return {EmbeddingParams::zeros(m.emb.n_events(), m.emb.dim()),
            MoeModel::zeros(m.moe.input_dim(), m.moe.hidden_dim(), m.moe.n_experts(),
                            m.moe.n_targets())};
  }

  static StandaloneMoe init(std::size_t n_events, std::size_t n_targets, std::size_t embed_dim,
                            std::size_t hidden, std::size_t n_experts, Rng& rng) {
    StandaloneMoe m;
    m.emb = EmbeddingParams::glorot(n_events, embed_dim, rng);
    m.moe = MoeModel::init(embed_dim, hidden, n_experts, n_targets, rng);
    return m;
  }
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, StandaloneMoe>
void visit_tensors(P& p, F&& f, const std::string& prefix) {
  visit_tensors(p.emb, f, detail::join_name(prefix, "emb"));
  visit_tensors(p.moe, f, detail::join_name(prefix, "moe"));
}

inline std::vector<Vec> moe_predict(const WindowedSequence& s, const StandaloneMoe& m) {
  detail::require_usable(s);
  const auto inputs = detail::embed_inputs(s, m.emb);
  auto out = moe_forward(inputs, m.moe);
  for (auto& o : out) {
    for (auto& x : o) x = detail::clamp_prob(x, kPredictionClamp);
  }
  return out;
}

inline double moe_sequence_loss_acc(const StandaloneMoe& m, const WindowedSequence& s,
                                    std::span<const std::size_t> targets, StandaloneMoe* grad) {
  detail::require_usable(s);
  const auto inputs = detail::embed_inputs(s, m.emb);
  const MoePass pass = moe_pass(m.moe, inputs, MixSpace::probability);
  const std::size_t steps = inputs.size();
  const double inv_steps = 1.0 / static_cast<double>(steps);
  std::vector<Vec> dmix(steps, Vec(m.n_targets()));
  double loss = 0.0;
  for (std::size_t t = 0; t < steps; ++t) {
    Vec pred(pass.mix[t].size());
    for (std::size_t j = 0; j < pred.size(); ++j) {
      pred[j] = detail::clamp_prob(pass.mix[t][j], kPredictionClamp);
    }
    const BceResult r = bce_loss(pred, target_bits(s.windows[t + 1], targets));
    loss += r.loss;
    for (std::size_t j = 0; j < pred.size(); ++j) {
      const double raw = pass.mix[t][j];
      const bool inside = raw > kPredictionClamp && raw < 1.0 - kPredictionClamp;
      dmix[t][j] = inside ? r.grad[j] * inv_steps : 0.0;
    }
  }
  if (grad != nullptr) {
    std::vector<Vec> dv(steps, Vec(m.emb.dim()));
    moe_backward(m.moe, pass, dmix, MixSpace::probability, grad->moe, &dv);
    for (std::size_t t = 0; t < steps; ++t) embed_backward(s.windows[t], dv[t], grad->emb);
  }
  return loss * inv_steps;
}

inline double moe_sequence_loss(const StandaloneMoe& m, const WindowedSequence& s,
                                std::span<const std::size_t> targets, StandaloneMoe* grad) {
  if (grad != nullptr) *grad = StandaloneMoe::zeros_like(m);
  return moe_sequence_loss_acc(m, s, targets, grad);
}

// ---------------------------------------------------------------------------
// Residual mixture

struct RmoeModel {
  BaseModel base;
  MoeModel moe;
  bool frozen = false;
  Combine combine = Combine::prob_sum;

  std::size_t n_targets() const noexcept { return base.n_targets(); }
};

/// Tensors are named base.* and moe.*; the flags are not tensors.
template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, RmoeModel>
void visit_tensors(P& p, F&& f, const std::string& prefix) {
  visit_tensors(p.base, f, detail::join_name(prefix, "base"));
  visit_tensors(p.moe, f, detail::join_name(prefix, "moe"));
}

/// Marks the base parameters as fixed. Idempotent.
inline void freeze_base(RmoeModel& m) noexcept { m.frozen = true; }

/// Builds a residual mixture on top of a trained base. Experts and gate read
/// the base embedding.
inline RmoeModel make_rmoe(const BaseModel& base, std::size_t n_experts, std::size_t hidden,
                           Combine combine, Rng& rng, double expert_bias = 0.0) {
  RmoeModel m;
  m.base = base;
  m.moe = MoeModel::init(base.embed_dim(), hidden, n_experts, base.n_targets(), rng, expert_bias);
  m.combine = combine;
  return m;
}

inline RmoeModel zeros_like(const RmoeModel& m) {
  RmoeModel g;
  g.base = BaseModel::zeros(m.base.n_events(), m.base.n_targets(), m.base.embed_dim(),
                            m.base.hidden_dim());
  g.moe = MoeModel::zeros(m.moe.input_dim(), m.moe.hidden_dim(), m.moe.n_experts(),
                          m.moe.n_targets());
  g.frozen = m.frozen;
  g.combine = m.combine;
  return g;
}

namespace detail {
inline MixSpace mix_space(Combine c) {
  return c == Combine::prob_sum ? MixSpace::probability : MixSpace::logit;
}

/// Residual combination of one step, before clamping.
inline double combine_raw(Combine c, double base_logit, double base_prob, double mix) {
  return c == Combine::prob_sum ? base_prob + mix : sigmoid(base_logit + mix);
}
}  // namespace detail

/// clamp(o_base + o_moe) per entry (prob_sum), or the logit-space variant.
/// Both submodels consume the same embedded inputs.
inline std::vector<Vec> rmoe_predict(const WindowedSequence& s, const RmoeModel& m) {
  const BasePass base = base_pass(m.base, s);
  const MoePass moe = moe_pass(m.moe, base.inputs, detail::mix_space(m.combine));
  std::vector<Vec> out;
  out.reserve(base.probs.size());
  for (std::size_t t = 0; t < base.probs.size(); ++t) {
    Vec y(m.n_targets());
    for (std::size_t j = 0; j < y.size(); ++j) {
      y[j] = detail::clamp_prob(
          detail::combine_raw(m.combine, base.logits[t][j], base.probs[t][j], moe.mix[t][j]),
          kPredictionClamp);
    }
    out.push_back(std::move(y));
  }
  return out;
}

/// Mean per-step BCE on the combined prediction; the gradient is added to
/// `*grad`. Its base part is only touched when the base is not frozen.
/// `base_cache` may supply a precomputed base pass for this sequence.
inline double rmoe_sequence_loss_acc(const RmoeModel& m, const WindowedSequence& s,
                                     std::span<const std::size_t> targets, RmoeModel* grad,
                                     const BasePass* base_cache = nullptr) {
  BasePass local;
  if (base_cache == nullptr) {
    local = base_pass(m.base, s);
    base_cache = &local;
  }
  const BasePass& base = *base_cache;
  const MixSpace space = detail::mix_space(m.combine);
  const MoePass moe = moe_pass(m.moe, base.inputs, space);
  const std::size_t steps = base.inputs.size();
  const double inv_steps = 1.0 / static_cast<double>(steps);
  const std::size_t nt = m.n_targets();

  std::vector<Vec> dmix(steps, Vec(nt));
  std::vector<Vec> dbase_logits(steps, Vec(nt));
  double loss = 0.0;
  for (std::size_t t = 0; t < steps; ++t) {
    const BinaryVec y = target_bits(s.windows[t + 1], targets);
    if (m.combine == Combine::prob_sum) {
      Vec pred(nt);
      for (std::size_t j = 0; j < nt; ++j) {
        pred[j] = detail::clamp_prob(base.probs[t][j] + moe.mix[t][j], kPredictionClamp);
      }
      const BceResult r = bce_loss(pred, y);
      loss += r.loss;
      for (std::size_t j = 0; j < nt; ++j) {
        const double raw = base.probs[t][j] + moe.mix[t][j];
        const bool inside = raw > kPredictionClamp && raw < 1.0 - kPredictionClamp;
        const double d = inside ? r.grad[j] * inv_steps : 0.0;
        dmix[t][j] = d;
        const double pb = base.probs[t][j];
        dbase_logits[t][j] = d * pb * (1.0 - pb);
      }
    } else {
      Vec z(nt);
      for (std::size_t j = 0; j < nt; ++j) z[j] = base.logits[t][j] + moe.mix[t][j];
      loss += bce_with_logits(z, y, &dmix[t], inv_steps);
      dbase_logits[t] = dmix[t];
    }
  }

  if (grad != nullptr) {
    if (m.frozen) {
      moe_backward(m.moe, moe, dmix, space, grad->moe, nullptr);
    } else {
      std::vector<Vec> dv(steps, Vec(m.base.embed_dim()));
      moe_backward(m.moe, moe, dmix, space, grad->moe, &dv);
      base_backward(m.base, s, base, dbase_logits, grad->base, &dv);
    }
  }
  return loss * inv_steps;
}

/// As rmoe_sequence_loss_acc, but `*grad` is overwritten.
inline double rmoe_sequence_loss(const RmoeModel& m, const WindowedSequence& s,
                                 std::span<const std::size_t> targets, RmoeModel* grad,
                                 const BasePass* base_cache = nullptr) {
  if (grad != nullptr) *grad = zeros_like(m);
  return rmoe_sequence_loss_acc(m, s, targets, grad, base_cache);
}

// ---------------------------------------------------------------------------
// Full-history logistic regression baseline

struct LrModel {
  Mat w;  // |E'| x |E|
  Vec b;

  std::size_t n_events() const noexcept { return w.cols(); }
  std::size_t n_targets() const noexcept { return b.size(); }

  static LrModel zeros(std::size_t n_events, std::size_t n_targets) {
    return {Mat(n_targets, n_events), Vec(n_targets)};
  }
  static LrModel init(std::size_t n_events, std::size_t n_targets, Rng& rng) {
    return {glorot_init(n_targets, n_events, rng), Vec(n_targets)};
  }
};

template <class P, class F>
  requires std::same_as<std::remove_const_t<P>, LrModel>
void visit_tensors(P& p, F&& f, const std::string& prefix) {
  f(detail::join_name(prefix, "W"), p.w);
  f(detail::join_name(prefix, "b"), p.b);
}

namespace detail {
/// Elementwise OR of windows [0, t).
inline Vec history_union(const WindowedSequence& s, std::size_t t, std::size_t n_events) {
  Vec a(n_events);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < n_events; ++j) {
      if (s.windows[i][j] != 0) a[j] = 1.0;
    }
  }
  return a;
}
}  // namespace detail

/// sigmoid(W a + b) where a is the OR of windows 1..t (t is 1-based).
inline Vec lr_forward(const WindowedSequence& s, const LrModel& m, std::size_t t) {
  if (t < 1 || t > s.length()) throw Error("lr_forward: history length out of range");
  return sigmoid_vec(affine(m.w, detail::history_union(s, t, m.n_events()), m.b));
}

inline std::vector<Vec> lr_predict(const WindowedSequence& s, const LrModel& m) {
  detail::require_usable(s);
  std::vector<Vec> out;
  Vec a(m.n_events());
  for (std::size_t t = 0; t + 1 < s.length(); ++t) {
    for (std::size_t j = 0; j < a.size(); ++j) {
      if (s.windows[t][j] != 0) a[j] = 1.0;
    }
    out.push_back(sigmoid_vec(affine(m.w, a, m.b)));
  }
  return out;
}

inline double lr_sequence_loss_acc(const LrModel& m, const WindowedSequence& s,
                                   std::span<const std::size_t> targets, LrModel* grad) {
  detail::require_usable(s);
  const std::size_t steps = s.length() - 1;
  const double inv_steps = 1.0 / static_cast<double>(steps);
  Vec a(m.n_events());
  Vec dlogits(m.n_targets());
  double loss = 0.0;
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t j = 0; j < a.size(); ++j) {
      if (s.windows[t][j] != 0) a[j] = 1.0;
    }
    const Vec logits = affine(m.w, a, m.b);
    loss += bce_with_logits(logits, target_bits(s.windows[t + 1], targets),
                            grad ? &dlogits : nullptr, inv_steps);
    if (grad != nullptr) {
      outer_acc(grad->w, dlogits.span(), a.span());
      for (std::size_t j = 0; j < dlogits.size(); ++j) grad->b[j] += dlogits[j];
    }
  }
  return loss * inv_steps;
}

inline double lr_sequence_loss(const LrModel& m, const WindowedSequence& s,
                               std::span<const std::size_t> targets, LrModel* grad) {
  if (grad != nullptr) *grad = LrModel::zeros(m.n_events(), m.n_targets());
  return lr_sequence_loss_acc(m, s, targets, grad);
}

// ---------------------------------------------------------------------------
// Type-erased predictor

using AnyModel = std::variant<BaseModel, RmoeModel, StandaloneMoe, LrModel>;

inline std::string model_kind(const AnyModel& m) {
  static constexpr const char* kNames[] = {"base", "rmoe", "moe", "lr"};
  return kNames[m.index()];
}

inline std::size_t model_inputs(const AnyModel& m) {
  return std::visit(
      [](const auto& x) -> std::size_t {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, RmoeModel>) return x.base.n_events();
        else return x.n_events();
      },
      m);
}

/// Clamped target probabilities for steps 1..T-1 of a sequence.
inline std::vector<Vec> predict(const AnyModel& model, const WindowedSequence& s) {
  return std::visit(
      [&s](const auto& m) -> std::vector<Vec> {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, BaseModel>) return base_forward(s, m);
        else if constexpr (std::is_same_v<T, RmoeModel>) return rmoe_predict(s, m);
        else if constexpr (std::is_same_v<T, StandaloneMoe>) return moe_predict(s, m);
        else return lr_predict(s, m);
      },
      model);
}

}  // namespace rmoe
