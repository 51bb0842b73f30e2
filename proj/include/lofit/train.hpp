#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lofit/data.hpp"
#include "lofit/error.hpp"
#include "lofit/intervene.hpp"
#include "lofit/model.hpp"
#include "lofit/rng.hpp"
#include "lofit/tensor.hpp"

namespace lofit {

struct TrainConfig {
  double lr = 5e-3;
  int epochs = 5;
  int batch_size = 8;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double lambda = 0.0;  // L1 weight on scaling factors (step 1 only)
  double beta = 0.5;    // DPO implicit-reward temperature
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0)) throw InvalidArgument("train config: lr must be positive");
    if (epochs <= 0) throw InvalidArgument("train config: epochs must be positive");
    if (batch_size <= 0) throw InvalidArgument("train config: batch_size must be positive");
    if (weight_decay < 0.0) throw InvalidArgument("train config: weight_decay must be nonnegative");
    if (!(adam_eps > 0.0)) throw InvalidArgument("train config: adam_eps must be positive");
    if (lambda < 0.0) throw InvalidArgument("train config: lambda must be nonnegative");
    if (!(beta > 0.0)) throw InvalidArgument("train config: beta must be positive");
  }
};

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

/// Adam moments, one slot per parameter in registration order.
struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;
};

/// One decoupled-weight-decay Adam update using the gradients stored on the
/// parameters. A parameter without a gradient is treated as having g = 0.
inline void adamw_step(NamedParams& params, OptimizerState& state, const TrainConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw InvalidArgument("adamw_step: optimizer state does not match parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& [name, p] = params[k];
    if (state.m[k].size() != p.numel()) throw InvalidArgument("adamw_step: moment shape mismatch for " + name);
    if (p.has_grad()) {
      for (float g : p.grad())
        if (!std::isfinite(g)) throw TrainingDivergence(name);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - cfg.lr * cfg.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k].second;
    auto data = p.mutable_data();
    const bool has = p.has_grad();
    const auto grad = has ? p.grad() : std::span<const float>{};
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = has ? grad[i] : 0.0;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
      const double next = static_cast<double>(data[i]) * decay - cfg.lr * update;
      if (!std::isfinite(next)) throw TrainingDivergence(params[k].first);
      data[i] = static_cast<float>(next);
    }
  }
}

// ---------------------------------------------------------------- losses

/// Mean negative log-likelihood over the rows with mask != 0.
inline Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  if (logits.rank() != 2) throw InvalidArgument("cross_entropy_loss: logits must be [N, V], got " + to_string(logits.shape()));
  const std::size_t n = logits.dim(0);
  if (targets.size() != n || mask.size() != n) {
    throw InvalidArgument("cross_entropy_loss: " + std::to_string(n) + " rows but " + std::to_string(targets.size()) +
                          " targets and " + std::to_string(mask.size()) + " mask entries");
  }
  std::vector<float> weights(n, 0.0f);
  std::vector<int> index(n, 0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) {
      weights[i] = 1.0f;
      index[i] = targets[i];
      ++count;
    }
  }
  if (count == 0) throw InvalidArgument("cross_entropy_loss: mask selects no positions");
  const Tensor picked = pick(log_softmax(logits), index);
  return scale(sum(mul(picked, Tensor({n}, std::move(weights)))), -1.0f / static_cast<float>(count));
}

/// -log sigmoid(beta * ((pc - pr) - (rc - rr))), averaged over the batch.
inline Tensor dpo_loss(const Tensor& policy_chosen, const Tensor& policy_rejected, std::span<const double> ref_chosen,
                       std::span<const double> ref_rejected, double beta) {
  if (!(beta > 0.0)) throw InvalidArgument("dpo_loss: beta must be positive");
  detail::require_same_shape(policy_chosen, policy_rejected, "dpo_loss");
  const std::size_t n = policy_chosen.numel();
  if (ref_chosen.size() != n || ref_rejected.size() != n) throw InvalidArgument("dpo_loss: reference batch size mismatch");
  std::vector<float> ref_margin(n);
  for (std::size_t i = 0; i < n; ++i) ref_margin[i] = static_cast<float>(ref_chosen[i] - ref_rejected[i]);
  const Tensor margin = sub(sub(policy_chosen, policy_rejected), Tensor(policy_chosen.shape(), std::move(ref_margin)));
  return neg(mean(log_sigmoid(scale(margin, static_cast<float>(beta)))));
}

/// Scalar form in double precision.
inline double dpo_loss_value(double policy_chosen, double policy_rejected, double ref_chosen, double ref_rejected,
                             double beta) {
  if (!(beta > 0.0)) throw InvalidArgument("dpo_loss: beta must be positive");
  const double z = beta * ((policy_chosen - policy_rejected) - (ref_chosen - ref_rejected));
  // -log sigmoid(z) = log(1 + e^{-z}), evaluated stably.
  return z >= 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

/// Differentiable continuation log-probabilities, one entry per item.
inline Tensor continuation_logprobs(const Model& model, const std::vector<Continuation>& items, const Hooks& hooks) {
  if (items.empty()) throw InvalidArgument("continuation_logprobs: no items");
  std::vector<Tokens> seqs;
  for (const Continuation& c : items) {
    if (c.prompt.empty() || c.continuation.empty()) throw InvalidArgument("continuation_logprobs: empty prompt or continuation");
    Tokens s = c.prompt;
    s.insert(s.end(), c.continuation.begin(), c.continuation.end());
    seqs.push_back(std::move(s));
  }
  const BatchOutput fwd = forward_batch(model, seqs, hooks);
  const std::size_t rows = fwd.logits.dim(0);
  std::vector<int> index(rows, 0);
  std::vector<float> select(rows * items.size(), 0.0f);
  for (std::size_t s = 0; s < items.size(); ++s) {
    const std::size_t row0 = fwd.starts[s] + items[s].prompt.size() - 1;
    for (std::size_t j = 0; j < items[s].continuation.size(); ++j) {
      index[row0 + j] = items[s].continuation[j];
      select[(row0 + j) * items.size() + s] = 1.0f;
    }
  }
  const Tensor picked = reshape(pick(log_softmax(fwd.logits), index), {1, rows});
  return reshape(matmul(picked, Tensor({rows, items.size()}, std::move(select))), {items.size()});
}

/// Mean token-level cross-entropy over every continuation position.
inline Tensor continuation_loss(const Model& model, const std::vector<Continuation>& items, const Hooks& hooks) {
  if (items.empty()) throw InvalidArgument("continuation_loss: no items");
  std::vector<Tokens> seqs;
  for (const Continuation& c : items) {
    if (c.prompt.empty() || c.continuation.empty()) throw InvalidArgument("continuation_loss: empty prompt or continuation");
    Tokens s = c.prompt;
    s.insert(s.end(), c.continuation.begin(), c.continuation.end());
    seqs.push_back(std::move(s));
  }
  const BatchOutput fwd = forward_batch(model, seqs, hooks);
  const std::size_t rows = fwd.logits.dim(0);
  std::vector<int> targets(rows, 0);
  std::vector<std::uint8_t> mask(rows, 0);
  for (std::size_t s = 0; s < items.size(); ++s) {
    const std::size_t row0 = fwd.starts[s] + items[s].prompt.size() - 1;
    for (std::size_t j = 0; j < items[s].continuation.size(); ++j) {
      targets[row0 + j] = items[s].continuation[j];
      mask[row0 + j] = 1;
    }
  }
  return cross_entropy_loss(fwd.logits, targets, mask);
}

/// Sum of L1 norms of every tensor.
inline Tensor l1_penalty(const NamedParams& params) {
  std::vector<Tensor> norms;
  for (const auto& [name, t] : params) norms.push_back(l1_norm(t));
  if (norms.empty()) return Tensor::scalar(0.0f);
  return sum(concat(norms));
}

// ---------------------------------------------------------------- loop

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double loss = 0.0;
  double l1_penalty = 0.0;
  double lr = 0.0;
};

using TrainLog = std::vector<StepRecord>;

inline nlohmann::json to_json(const StepRecord& r) {
  return {{"step", r.step}, {"epoch", r.epoch}, {"loss", r.loss}, {"l1_penalty", r.l1_penalty}, {"lr", r.lr}};
}

inline void write_train_log(std::ostream& out, const TrainLog& log) {
  for (const StepRecord& r : log) out << to_json(r).dump() << '\n';
}

/// Value returned by a batch objective: the differentiable total, and the
/// parts that go into the log.
struct BatchLoss {
  Tensor total;
  double task = 0.0;
  double penalty = 0.0;
};

/// Mini-batch AdamW over `params`. Example order is reshuffled every epoch
/// from cfg.seed; `objective` maps example indices to a loss.
inline TrainLog fit(NamedParams params, std::size_t n_examples, const TrainConfig& cfg,
                    const std::function<BatchLoss(std::span<const std::size_t>)>& objective) {
  cfg.validate();
  if (n_examples == 0) throw InvalidArgument("fit: empty dataset");
  if (params.empty()) throw InvalidArgument("fit: no trainable parameters");
  Rng order_rng = Rng(cfg.seed).fork(0x5348554646ull);
  std::vector<std::size_t> order(n_examples);
  for (std::size_t i = 0; i < n_examples; ++i) order[i] = i;
  OptimizerState state;
  TrainLog log;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    for (std::size_t begin = 0; begin < n_examples; begin += bs) {
      const std::size_t end = std::min(n_examples, begin + bs);
      for (auto& [name, p] : params) p.zero_grad();
      const BatchLoss loss = objective(std::span<const std::size_t>(order).subspan(begin, end - begin));
      const double value = loss.total.item();
      if (!std::isfinite(value)) throw TrainingDivergence("loss");
      backward(loss.total);
      adamw_step(params, state, cfg);
      log.push_back({state.step, epoch, loss.task, loss.penalty, cfg.lr});
    }
  }
  for (auto& [name, p] : params) p.zero_grad();
  return log;
}

/// Training data for intervention tuning: gold continuations (cross-entropy)
/// or preference pairs (DPO).
struct TuningData {
  std::vector<Continuation> sft;
  std::vector<PreferencePair> preferences;

  bool is_preference() const { return !preferences.empty(); }
  std::size_t size() const { return is_preference() ? preferences.size() : sft.size(); }

  static TuningData from_examples(const std::vector<TaskExample>& examples) {
    TuningData d;
    for (const TaskExample& e : examples) {
      Tokens target = e.gold;
      target.push_back(vocab::kEos);
      d.sft.push_back({e.prompt, std::move(target)});
    }
    return d;
  }

  static TuningData from_preferences(std::vector<PreferencePair> pairs) {
    TuningData d;
    d.preferences = std::move(pairs);
    return d;
  }
};

/// Reference log-probabilities of chosen and rejected responses under the
/// unhooked base model, computed once.
struct DpoReference {
  std::vector<double> chosen;
  std::vector<double> rejected;

  static DpoReference compute(const Model& model, const std::vector<PreferencePair>& pairs) {
    std::vector<Continuation> c, r;
    for (const PreferencePair& p : pairs) {
      p.validate();
      c.push_back({p.prompt, p.chosen});
      r.push_back({p.prompt, p.rejected});
    }
    return {sequence_logprobs(model, c), sequence_logprobs(model, r)};
  }
};

/// Objective over a hooked frozen model. `make_hooks` rebuilds the hooks for
/// each batch so they reference the current parameter tensors; `penalty`
/// adds a regulariser (may return an undefined tensor).
inline TrainLog fit_intervention(const Model& model, const TuningData& data, const TrainConfig& cfg, NamedParams params,
                                 const std::function<Hooks()>& make_hooks,
                                 const std::function<Tensor()>& penalty = {}) {
  if (!model.frozen()) throw InvalidArgument("intervention training requires a frozen base model");
  if (data.size() == 0) throw InvalidArgument("intervention training: empty dataset");
  DpoReference ref;
  if (data.is_preference()) ref = DpoReference::compute(model, data.preferences);

  auto objective = [&](std::span<const std::size_t> idx) {
    const Hooks hooks = make_hooks();
    Tensor task;
    if (data.is_preference()) {
      std::vector<Continuation> c, r;
      std::vector<double> rc, rr;
      for (std::size_t i : idx) {
        const PreferencePair& p = data.preferences[i];
        c.push_back({p.prompt, p.chosen});
        r.push_back({p.prompt, p.rejected});
        rc.push_back(ref.chosen[i]);
        rr.push_back(ref.rejected[i]);
      }
      task = dpo_loss(continuation_logprobs(model, c, hooks), continuation_logprobs(model, r, hooks), rc, rr, cfg.beta);
    } else {
      std::vector<Continuation> items;
      for (std::size_t i : idx) items.push_back(data.sft[i]);
      task = continuation_loss(model, items, hooks);
    }
    BatchLoss out{task, task.item(), 0.0};
    if (penalty) {
      const Tensor p = penalty();
      if (p.defined()) {
        out.penalty = p.item();
        out.total = add(task, p);
      }
    }
    return out;
  };
  return fit(std::move(params), data.size(), cfg, objective);
}

/// LoFiT step 2: learn offsets v for the heads in `targets`, base frozen.
inline OffsetParams tune_biases(const Model& model, const std::vector<HeadId>& targets, const TuningData& data,
                                const TrainConfig& cfg, double sigma_v = 0.001, TrainLog* log = nullptr) {
  if (targets.empty()) throw InvalidArgument("tune_biases: empty target set");
  if (data.size() == 0) throw InvalidArgument("tune_biases: empty dataset");
  const ModelConfig& mc = model.config();
  Rng rng = Rng(cfg.seed).fork(0x4249415345ull);
  OffsetParams params = OffsetParams::init(targets, mc, sigma_v, rng);
  TrainLog l = fit_intervention(model, data, cfg, params.parameters(), [&] { return params.hooks(mc); });
  if (log) *log = std::move(l);
  return params;
}

}  // namespace lofit
