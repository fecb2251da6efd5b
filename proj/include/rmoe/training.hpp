#pragma once

// Adam with L2 weight decay, early stopping on validation loss, and the
// training procedures: base model, residual mixture on a frozen base, plain
// mixture from scratch (ablation), and the logistic regression baseline.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rmoe/data.hpp"
#include "rmoe/layers.hpp"
#include "rmoe/models.hpp"
#include "rmoe/tensor.hpp"

namespace rmoe {

/// coupled: g += l2 * theta before the moment updates (classic L2).
/// decoupled: theta -= lr * l2 * theta after the Adam update (AdamW).
enum class WeightDecay { coupled, decoupled };

struct TrainConfig {
  double lr = 0.005;
  double l2 = 1e-5;
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
  WeightDecay decay = WeightDecay::coupled;

  /// Learning rate 0.005, lambda 1e-5.
  static TrainConfig base_defaults() { return {}; }

  /// Learning rate 0.0005, lambda 1.0 (middle of the residual-mixture grid).
  static TrainConfig rmoe_defaults() {
    TrainConfig c;
    c.lr = 0.0005;
    c.l2 = 1.0;
    return c;
  }

  void validate() const {
    if (!(lr > 0.0)) throw Error("learning rate must be positive");
    if (!(l2 >= 0.0)) throw Error("l2 weight must be non-negative");
    if (patience < 1) throw Error("patience must be >= 1");
    if (batch_size < 1) throw Error("batch size must be >= 1");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw Error("val_fraction must be in (0,1)");
  }
};

/// Grids searched by `sweep`.
struct SearchGrid {
  static constexpr double base_l2[] = {1e-4, 1e-5, 1e-6, 1e-7};
  static constexpr double rmoe_l2[] = {0.75, 1.0, 1.25, 1.5};
  static constexpr std::size_t experts[] = {1, 5, 10, 20, 50, 100};
  static constexpr std::size_t hidden_dims[] = {32, 64, 128, 256, 512};
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One Adam update over matching parameter/gradient lists. Moments are
/// allocated on the first call and must keep their shapes afterwards.
inline void adam_step(std::span<const TensorRef> params, std::span<const ConstTensorRef> grads,
                      AdamState& state, double lr, double l2,
                      WeightDecay decay = WeightDecay::coupled) {
  if (params.size() != grads.size()) {
    throw Error("adam_step: " + std::to_string(params.size()) + " parameter tensors but " +
                std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.values.size(), 0.0);
      state.v.emplace_back(p.values.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw Error("adam_step: optimizer state shape mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].values.size() != grads[k].values.size() ||
        state.m[k].size() != params[k].values.size()) {
      throw Error("adam_step: shape mismatch for tensor " + params[k].name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  const bool coupled = decay == WeightDecay::coupled;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto theta = params[k].values;
    auto g = grads[k].values;
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = coupled ? g[i] + l2 * theta[i] : g[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      double update = mhat / (std::sqrt(vhat) + state.eps);
      if (!coupled) update += l2 * theta[i];
      theta[i] -= lr * update;
    }
  }
}

// ---------------------------------------------------------------------------
// Early stopping

/// True iff the minimum validation loss (first occurrence) is at least
/// `patience` epochs behind the latest epoch.
inline bool early_stop_check(std::span<const double> val_losses, std::size_t patience) {
  if (val_losses.empty()) throw Error("early_stop_check: no validation losses");
  std::size_t best = 0;
  for (std::size_t i = 1; i < val_losses.size(); ++i) {
    if (val_losses[i] < val_losses[best]) best = i;
  }
  return val_losses.size() - 1 - best >= patience;
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  double initial_val_loss = 0.0;
  std::size_t best_epoch = 0;  // 0 when no epoch ran
  bool stopped_early = false;

  std::size_t epochs_run() const noexcept { return epochs.size(); }
  double best_val_loss() const {
    return best_epoch == 0 ? initial_val_loss : epochs[best_epoch - 1].val_loss;
  }
  std::vector<double> val_losses() const {
    std::vector<double> out;
    for (const auto& e : epochs) out.push_back(e.val_loss);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Generic loop

template <class Model>
struct FitHooks {
  /// Called after every epoch with the live model (before the freeze check
  /// in residual training).
  std::function<void(std::size_t epoch, Model&)> on_epoch_end;
  /// Called when an epoch becomes the new best, with a copy of the model.
  std::function<void(std::size_t epoch, const Model&)> on_new_best;
};

namespace detail {

/// Mini-batch Adam over the trainable tensors selected by name, early
/// stopping on validation loss, restore of the best epoch.
///   loss(model, index, is_train, grad*) -> sequence loss
template <class Model, class LossFn, class Selector>
TrainHistory fit(Model& model, std::size_t n_train, std::size_t n_val, const TrainConfig& cfg,
                 LossFn&& loss, Selector&& trainable, Model grad_template,
                 const FitHooks<Model>& hooks, const std::function<void(std::size_t)>& check) {
  cfg.validate();
  if (n_train == 0 || n_val == 0) throw Error("training needs non-empty train and validation sets");

  auto val_loss = [&] {
    double total = 0.0;
    for (std::size_t i = 0; i < n_val; ++i) total += loss(model, i, false, nullptr);
    return total / static_cast<double>(n_val);
  };

  TrainHistory hist;
  hist.initial_val_loss = val_loss();
  if (cfg.max_epochs == 0) return hist;

  std::vector<std::size_t> select;
  {
    const auto names = tensor_refs(model);
    for (std::size_t k = 0; k < names.size(); ++k) {
      if (trainable(names[k].name)) select.push_back(k);
    }
  }
  if (select.empty()) throw Error("training: no trainable tensors");

  // `model` and `grad` keep their buffers for the whole run, so the spans
  // below stay valid. Loss functions accumulate into `grad`.
  Model grad = std::move(grad_template);
  std::vector<TensorRef> params;
  std::vector<ConstTensorRef> grads;
  std::vector<std::span<double>> grad_mut;
  {
    auto prefs = tensor_refs(model);
    auto grefs = tensor_refs(grad);
    for (std::size_t k : select) {
      params.push_back(prefs[k]);
      grads.push_back({grefs[k].name, grefs[k].rows, grefs[k].cols, grefs[k].values});
    }
    for (auto& g : grefs) grad_mut.push_back(g.values);
  }

  AdamState adam;
  Model best = model;
  double best_val = 0.0;
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng(split_seed(cfg.seed, 1000 + epoch));
    shuffle_rng.shuffle(order);
    double train_total = 0.0;
    for (std::size_t start = 0; start < n_train; start += cfg.batch_size) {
      const std::size_t stop = std::min(n_train, start + cfg.batch_size);
      for (auto g : grad_mut) std::fill(g.begin(), g.end(), 0.0);
      for (std::size_t b = start; b < stop; ++b) train_total += loss(model, order[b], true, &grad);
      if (stop - start > 1) {
        const double scale = 1.0 / static_cast<double>(stop - start);
        for (auto g : grad_mut) {
          for (auto& x : g) x *= scale;
        }
      }
      adam_step(params, grads, adam, cfg.lr, cfg.l2, cfg.decay);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_total / static_cast<double>(n_train);
    rec.val_loss = val_loss();
    rec.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_loss)) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                         " (train loss " + std::to_string(rec.train_loss) + ", val loss " +
                         std::to_string(rec.val_loss) + ")");
    }
    hist.epochs.push_back(rec);
    if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, model);
    if (check) check(epoch);
    if (hist.best_epoch == 0 || rec.val_loss < best_val) {
      hist.best_epoch = epoch;
      best_val = rec.val_loss;
      best = model;
      if (hooks.on_new_best) hooks.on_new_best(epoch, best);
    }
    const auto vals = hist.val_losses();
    if (early_stop_check(vals, cfg.patience)) {
      hist.stopped_early = true;
      break;
    }
  }
  model = std::move(best);
  return hist;
}

}  // namespace detail

template <class Model>
struct TrainResult {
  Model model;
  TrainHistory history;
};

/// Model sizes. Embedding and base hidden sizes default to 64 and 512,
/// mixture experts/gate to hidden 64 with 50 experts.
struct ModelConfig {
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 512;
  std::size_t expert_hidden_dim = 64;
  std::size_t n_experts = 50;
  Combine combine = Combine::prob_sum;
  // Initial expert head bias. Unset means -5 under prob_sum, so a fresh
  // mixture adds about 0.007 per expert instead of 0.5 on top of the base
  // probability, and 0 under logit_sum, where any shift moves every logit.
  std::optional<double> expert_bias;

  double initial_expert_bias() const {
    return expert_bias.value_or(combine == Combine::prob_sum ? -5.0 : 0.0);
  }
};

/// Phase 1: the population-wide GRU model.
inline TrainResult<BaseModel> train_base(const std::vector<WindowedSequence>& train,
                                         const std::vector<WindowedSequence>& val,
                                         const EventVocabulary& vocab, const ModelConfig& mc,
                                         const TrainConfig& cfg,
                                         const FitHooks<BaseModel>& hooks = {}) {
  vocab.validate();
  Rng init_rng(split_seed(cfg.seed, 1));
  BaseModel model =
      BaseModel::init(vocab.n_inputs(), vocab.n_targets(), mc.embed_dim, mc.hidden_dim, init_rng);
  const auto& targets = vocab.target_indices;
  auto loss = [&](const BaseModel& m, std::size_t i, bool is_train, BaseModel* g) {
    return base_sequence_loss_acc(m, is_train ? train[i] : val[i], targets, g);
  };
  BaseModel zero = BaseModel::zeros(vocab.n_inputs(), vocab.n_targets(), mc.embed_dim, mc.hidden_dim);
  TrainHistory h = detail::fit(model, train.size(), val.size(), cfg, loss,
                               [](const std::string&) { return true; }, zero, hooks, {});
  return {std::move(model), std::move(h)};
}

/// Phase 2: experts and gate trained on the combined prediction while the
/// base stays bit-identical. The base hash is verified after every epoch.
inline TrainResult<RmoeModel> train_rmoe(const BaseModel& base,
                                         const std::vector<WindowedSequence>& train,
                                         const std::vector<WindowedSequence>& val,
                                         const EventVocabulary& vocab, const ModelConfig& mc,
                                         const TrainConfig& cfg, bool freeze = true,
                                         const FitHooks<RmoeModel>& hooks = {}) {
  vocab.validate();
  if (base.n_targets() != vocab.n_targets() || base.n_events() != vocab.n_inputs()) {
    throw Error("train_rmoe: base model does not match the vocabulary");
  }
  Rng init_rng(split_seed(cfg.seed, 2));
  RmoeModel model =
      make_rmoe(base, mc.n_experts, mc.expert_hidden_dim, mc.combine, init_rng,
                mc.initial_expert_bias());
  if (freeze) freeze_base(model);
  const std::uint64_t base_hash = parameter_hash(model.base);

  // With the base fixed its forward pass is the same every epoch.
  std::vector<BasePass> train_cache, val_cache;
  if (freeze) {
    train_cache.reserve(train.size());
    for (const auto& s : train) train_cache.push_back(base_pass(model.base, s));
    val_cache.reserve(val.size());
    for (const auto& s : val) val_cache.push_back(base_pass(model.base, s));
  }
  const auto& targets = vocab.target_indices;
  auto loss = [&](const RmoeModel& m, std::size_t i, bool is_train, RmoeModel* g) {
    const auto& seq = is_train ? train[i] : val[i];
    const BasePass* cached = nullptr;
    if (m.frozen) cached = is_train ? &train_cache[i] : &val_cache[i];
    return rmoe_sequence_loss_acc(m, seq, targets, g, cached);
  };
  auto trainable = [frozen = model.frozen](const std::string& name) {
    return !frozen || name.rfind("moe.", 0) == 0;
  };
  auto check = [&](std::size_t epoch) {
    if (model.frozen && parameter_hash(model.base) != base_hash) {
      throw Error("invariant breach: frozen base parameters changed during residual training "
                  "(epoch " + std::to_string(epoch) + ")");
    }
  };
  TrainHistory h = detail::fit(model, train.size(), val.size(), cfg, loss, trainable,
                               zeros_like(model), hooks, check);
  return {std::move(model), std::move(h)};
}

/// Ablation: the mixture alone, with its own embedding, trained from scratch.
inline TrainResult<StandaloneMoe> train_moe_ablation(const std::vector<WindowedSequence>& train,
                                                     const std::vector<WindowedSequence>& val,
                                                     const EventVocabulary& vocab,
                                                     const ModelConfig& mc, const TrainConfig& cfg,
                                                     const FitHooks<StandaloneMoe>& hooks = {}) {
  vocab.validate();
  Rng init_rng(split_seed(cfg.seed, 3));
  StandaloneMoe model = StandaloneMoe::init(vocab.n_inputs(), vocab.n_targets(), mc.embed_dim,
                                            mc.expert_hidden_dim, mc.n_experts, init_rng);
  const auto& targets = vocab.target_indices;
  auto loss = [&](const StandaloneMoe& m, std::size_t i, bool is_train, StandaloneMoe* g) {
    return moe_sequence_loss_acc(m, is_train ? train[i] : val[i], targets, g);
  };
  TrainHistory h = detail::fit(model, train.size(), val.size(), cfg, loss,
                               [](const std::string&) { return true; },
                               StandaloneMoe::zeros_like(model), hooks, {});
  return {std::move(model), std::move(h)};
}

/// Full-history logistic regression baseline.
inline TrainResult<LrModel> train_lr(const std::vector<WindowedSequence>& train,
                                     const std::vector<WindowedSequence>& val,
                                     const EventVocabulary& vocab, const TrainConfig& cfg,
                                     const FitHooks<LrModel>& hooks = {}) {
  vocab.validate();
  Rng init_rng(split_seed(cfg.seed, 4));
  LrModel model = LrModel::init(vocab.n_inputs(), vocab.n_targets(), init_rng);
  const auto& targets = vocab.target_indices;
  auto loss = [&](const LrModel& m, std::size_t i, bool is_train, LrModel* g) {
    return lr_sequence_loss_acc(m, is_train ? train[i] : val[i], targets, g);
  };
  TrainHistory h = detail::fit(model, train.size(), val.size(), cfg, loss,
                               [](const std::string&) { return true; },
                               LrModel::zeros(vocab.n_inputs(), vocab.n_targets()), hooks, {});
  return {std::move(model), std::move(h)};
}

}  // namespace rmoe
