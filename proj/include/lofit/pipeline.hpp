#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "lofit/error.hpp"
#include "lofit/intervene.hpp"
#include "lofit/localize.hpp"
#include "lofit/model.hpp"
#include "lofit/tasks.hpp"
#include "lofit/train.hpp"

namespace lofit {

// ---------------------------------------------------------------- base pretraining

struct PretrainConfig {
  int batch_size = 32;
  int steps_per_epoch = 250;
  int max_epochs = 40;
  int patience = 3;                // epochs without improvement before stopping
  double min_improvement = 0.005;  // relative dev-loss improvement that counts
  double lr = 3e-3;
  int warmup_steps = 200;
  double weight_decay = 0.01;
  int dev_items = 512;
  std::uint64_t seed = 0;
  CorpusMix mix;
};

struct PretrainEpoch {
  int epoch = 0;
  long step = 0;
  double train_loss = 0.0;
  double dev_loss = 0.0;
  double lr = 0.0;
};

/// Trains a fresh model on the world's task mixture until the dev loss stops
/// improving (the learning rate is cut once before stopping) or the epoch cap.
inline Model pretrain_base(const ModelConfig& mc, const World& world, const PretrainConfig& pc,
                           std::vector<PretrainEpoch>* history = nullptr,
                           const std::function<void(const PretrainEpoch&)>& on_epoch = {}) {
  Rng init_rng = Rng(pc.seed).fork(0x494e4954ull);
  Model model(mc, init_rng);
  Rng data_rng = Rng(pc.seed).fork(0x44415441ull);
  Rng dev_rng = Rng(pc.seed).fork(0x444556ull);
  std::vector<Continuation> dev;
  for (int i = 0; i < pc.dev_items; ++i) dev.push_back(sample_pretraining_item(world, dev_rng, pc.mix));

  auto dev_loss = [&] {
    NoGradGuard no_grad;
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < dev.size(); b += 64) {
      const std::vector<Continuation> chunk(dev.begin() + static_cast<std::ptrdiff_t>(b),
                                            dev.begin() + static_cast<std::ptrdiff_t>(std::min(dev.size(), b + 64)));
      total += continuation_loss(model, chunk, {}).item();
      ++batches;
    }
    return total / static_cast<double>(batches);
  };

  NamedParams params = model.named_parameters();
  OptimizerState state;
  TrainConfig tc;
  tc.weight_decay = pc.weight_decay;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  bool decayed = false;
  double lr = pc.lr;
  long step = 0;
  for (int epoch = 0; epoch < pc.max_epochs; ++epoch) {
    double train_total = 0.0;
    for (int s = 0; s < pc.steps_per_epoch; ++s) {
      std::vector<Continuation> batch;
      for (int i = 0; i < pc.batch_size; ++i) batch.push_back(sample_pretraining_item(world, data_rng, pc.mix));
      for (auto& [name, p] : params) p.zero_grad();
      const Tensor loss = continuation_loss(model, batch, {});
      if (!std::isfinite(loss.item())) throw TrainingDivergence("pretraining loss");
      backward(loss);
      ++step;
      tc.lr = step < pc.warmup_steps ? lr * static_cast<double>(step) / pc.warmup_steps : lr;
      adamw_step(params, state, tc);
      train_total += loss.item();
    }
    const PretrainEpoch rec{epoch, step, train_total / pc.steps_per_epoch, dev_loss(), lr};
    if (history) history->push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (rec.dev_loss < best * (1.0 - pc.min_improvement)) {
      best = rec.dev_loss;
      stale = 0;
    } else if (++stale >= pc.patience) {
      if (decayed) break;
      decayed = true;
      lr *= 0.3;
      stale = 0;
    }
  }
  for (auto& [name, p] : params) p.zero_grad();
  model.freeze();
  return model;
}

// ---------------------------------------------------------------- LoFiT

struct LofitResult {
  ScalingParams scaling;  // step-1 factors, for inspection only
  HeadScoreTable scores;
  std::vector<HeadId> targets;
  OffsetParams offsets;
  TrainLog scaling_log;
  TrainLog bias_log;
};

/// Step 1 (scaling factors, L1) -> top-K by ||A||_2 -> step 2 (offsets on the
/// selected heads). Only the offsets are kept for inference.
inline LofitResult tune_scaling_then_biases(const Model& model, const TuningData& data, const SelectionConfig& sel,
                                            const TrainConfig& scaling_cfg, const TrainConfig& bias_cfg,
                                            double sigma_v = 0.001) {
  sel.validate(model.config());
  LofitResult r;
  r.scaling = train_scaling_factors(model, data, sel, scaling_cfg, &r.scaling_log);
  r.scores = score_by_norm(r.scaling.A, SelectionMethod::lofit_norm);
  r.targets = select_top_k(r.scores, sel.K);
  r.offsets = tune_biases(model, r.targets, data, bias_cfg, sigma_v, &r.bias_log);
  return r;
}

inline LofitResult tune_scaling_then_biases(const Model& model, const TuningData& data, const SelectionConfig& sel,
                                            const TrainConfig& train_cfg) {
  return tune_scaling_then_biases(model, data, sel, train_cfg, train_cfg);
}

/// Inputs a selection method may need.
struct SelectionInputs {
  const TuningData* data = nullptr;                // lofit_norm, bias_norm
  const std::vector<LabeledPair>* pairs = nullptr; // iti_probe, layer_probe
};

struct Selection {
  HeadScoreTable scores;
  std::vector<HeadId> targets;
};

/// Runs one selection method. layer_probe returns all heads of the best
/// layer regardless of K.
inline Selection select_heads(SelectionMethod method, const Model& model, const SelectionInputs& in,
                              const SelectionConfig& sel, const TrainConfig& train_cfg) {
  const ModelConfig& mc = model.config();
  sel.validate(mc);
  Selection s;
  switch (method) {
    case SelectionMethod::lofit_norm: {
      if (!in.data) throw InvalidArgument("lofit selection needs training data");
      const ScalingParams a = train_scaling_factors(model, *in.data, sel, train_cfg);
      s.scores = score_by_norm(a.A, method);
      s.targets = select_top_k(s.scores, sel.K);
      break;
    }
    case SelectionMethod::bias_norm: {
      if (!in.data) throw InvalidArgument("bias-based selection needs training data");
      TrainConfig tc = train_cfg;
      tc.seed = sel.seed;
      const OffsetParams v = tune_biases(model, all_heads(mc), *in.data, tc);
      s.scores = score_by_norm(v.v, method);
      s.targets = select_top_k(s.scores, sel.K);
      break;
    }
    case SelectionMethod::iti_probe: {
      if (!in.pairs) throw InvalidArgument("probe selection needs labeled pairs");
      s.scores = probe_scores(train_head_probes(model, *in.pairs));
      s.targets = select_top_k(s.scores, sel.K);
      break;
    }
    case SelectionMethod::layer_probe: {
      if (!in.pairs) throw InvalidArgument("probe selection needs labeled pairs");
      const auto probes = train_layer_probes(model, *in.pairs);
      s.scores = layer_probe_scores(probes, mc);
      s.targets = heads_of_layer(mc, best_probe_layer(probes));
      break;
    }
    case SelectionMethod::random: {
      s.scores.method = method;
      s.targets = select_random(mc, sel.K, sel.seed);
      break;
    }
  }
  return s;
}

}  // namespace lofit
