#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lofit/error.hpp"
#include "lofit/model.hpp"
#include "lofit/rng.hpp"
#include "lofit/tensor.hpp"

namespace lofit {

/// Localized intervention: target heads with one offset each, and a strength.
/// At inference z^{(l,i)} <- z^{(l,i)} + alpha * v^{(l,i)} for every target.
class InterventionSet {
 public:
  InterventionSet() = default;
  explicit InterventionSet(double alpha) : alpha_(alpha) {}

  void add(const HeadId& id, std::vector<float> offset) {
    if (offset.empty()) throw InvalidArgument("intervention offset for head " + to_string(id) + " is empty");
    if (!offsets_.empty() && offset.size() != offsets_.begin()->second.size()) {
      throw InvalidArgument("intervention offset for head " + to_string(id) + " has length " +
                            std::to_string(offset.size()) + ", expected " +
                            std::to_string(offsets_.begin()->second.size()));
    }
    if (!offsets_.emplace(id, std::move(offset)).second) {
      throw InvalidArgument("duplicate head " + to_string(id) + " in intervention set");
    }
  }

  double alpha() const { return alpha_; }
  void set_alpha(double alpha) { alpha_ = alpha; }

  /// Targets in ascending (layer, head) order.
  std::vector<HeadId> targets() const {
    std::vector<HeadId> out;
    for (const auto& [id, v] : offsets_) out.push_back(id);
    return out;
  }

  const std::map<HeadId, std::vector<float>>& offsets() const { return offsets_; }
  bool empty() const { return offsets_.empty(); }
  std::size_t size() const { return offsets_.size(); }

  void validate(const ModelConfig& cfg) const {
    for (const auto& [id, v] : offsets_) {
      id.validate(cfg);
      if (v.size() != static_cast<std::size_t>(cfg.d_head)) {
        throw InvalidArgument("offset for head " + to_string(id) + " has length " + std::to_string(v.size()) +
                              ", model d_head is " + std::to_string(cfg.d_head));
      }
    }
  }

 private:
  double alpha_ = 1.0;
  std::map<HeadId, std::vector<float>> offsets_;
};

/// z + alpha * v.
inline std::vector<float> apply_offset(std::span<const float> z, std::span<const float> v, double alpha) {
  if (z.size() != v.size()) {
    throw InvalidArgument("apply_offset: length mismatch " + std::to_string(z.size()) + " vs " +
                          std::to_string(v.size()));
  }
  std::vector<float> out(z.size());
  const auto a = static_cast<float>(alpha);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] + a * v[i];
  return out;
}

/// (1 + A) * z, elementwise.
inline std::vector<float> apply_scaling(std::span<const float> z, std::span<const float> a) {
  if (z.size() != a.size()) {
    throw InvalidArgument("apply_scaling: length mismatch " + std::to_string(z.size()) + " vs " +
                          std::to_string(a.size()));
  }
  std::vector<float> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = (1.0f + a[i]) * z[i];
  return out;
}

inline Hooks to_hooks(const InterventionSet& set, const ModelConfig& cfg) {
  set.validate(cfg);
  Hooks hooks = Hooks::for_config(cfg);
  if (set.empty()) return hooks;
  const auto dh = static_cast<std::size_t>(cfg.d_head);
  const auto width = static_cast<std::size_t>(cfg.n_heads) * dh;
  std::map<int, std::vector<float>> per_layer;
  for (const auto& [id, v] : set.offsets()) {
    auto [it, inserted] = per_layer.try_emplace(id.layer, width, 0.0f);
    const std::vector<float> scaled = apply_offset(std::vector<float>(dh, 0.0f), v, set.alpha());
    std::copy(scaled.begin(), scaled.end(), it->second.begin() + static_cast<std::ptrdiff_t>(id.head * dh));
  }
  for (auto& [layer, values] : per_layer) {
    hooks.head_bias[static_cast<std::size_t>(layer)] = Tensor({width}, std::move(values));
  }
  return hooks;
}

/// Learnable per-head scaling vectors A (LoFiT head selection). Complete over
/// all L x H heads.
struct ScalingParams {
  std::map<HeadId, Tensor> A;
  double sigma_A = 0.001;

  static ScalingParams init(const ModelConfig& cfg, double sigma, Rng& rng) {
    ScalingParams p;
    p.sigma_A = sigma;
    for (const HeadId& id : all_heads(cfg)) p.A[id] = randn({static_cast<std::size_t>(cfg.d_head)}, 0.0, sigma, rng, true);
    return p;
  }

  /// Differentiable hooks: each layer's scale row is the concatenation of its
  /// heads' A vectors.
  Hooks hooks(const ModelConfig& cfg) const {
    Hooks h = Hooks::for_config(cfg);
    for (int l = 0; l < cfg.n_layers; ++l) {
      std::vector<Tensor> parts;
      for (int i = 0; i < cfg.n_heads; ++i) {
        auto it = A.find({l, i});
        if (it == A.end()) throw InvalidArgument("scaling params missing head " + to_string(HeadId{l, i}));
        parts.push_back(it->second);
      }
      h.head_scale[static_cast<std::size_t>(l)] = concat(parts);
    }
    return h;
  }

  std::vector<std::pair<std::string, Tensor>> parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [id, t] : A) out.emplace_back("A." + to_string(id), t);
    return out;
  }
};

/// Learnable per-head offsets v (LoFiT bias tuning) for a target set.
struct OffsetParams {
  std::map<HeadId, Tensor> v;
  double sigma_v = 0.001;

  static OffsetParams init(const std::vector<HeadId>& targets, const ModelConfig& cfg, double sigma, Rng& rng) {
    OffsetParams p;
    p.sigma_v = sigma;
    for (const HeadId& id : targets) {
      id.validate(cfg);
      if (p.v.count(id)) throw InvalidArgument("duplicate head " + to_string(id) + " in target set");
      p.v[id] = randn({static_cast<std::size_t>(cfg.d_head)}, 0.0, sigma, rng, true);
    }
    return p;
  }

  /// Differentiable hooks; non-target heads in a touched layer get constant
  /// zeros so only registered offsets receive gradient.
  Hooks hooks(const ModelConfig& cfg) const {
    Hooks h = Hooks::for_config(cfg);
    const auto dh = static_cast<std::size_t>(cfg.d_head);
    for (int l = 0; l < cfg.n_layers; ++l) {
      bool any = false;
      std::vector<Tensor> parts;
      for (int i = 0; i < cfg.n_heads; ++i) {
        auto it = v.find({l, i});
        if (it != v.end()) {
          any = true;
          parts.push_back(it->second);
        } else {
          parts.push_back(Tensor::zeros({dh}));
        }
      }
      if (any) h.head_bias[static_cast<std::size_t>(l)] = concat(parts);
    }
    return h;
  }

  std::vector<std::pair<std::string, Tensor>> parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [id, t] : v) out.emplace_back("v." + to_string(id), t);
    return out;
  }

  std::vector<HeadId> targets() const {
    std::vector<HeadId> out;
    for (const auto& [id, t] : v) out.push_back(id);
    return out;
  }

  std::size_t trainable_scalars() const {
    std::size_t n = 0;
    for (const auto& [id, t] : v) n += t.numel();
    return n;
  }

  /// Learned offsets ship with alpha = 1.
  InterventionSet to_intervention() const {
    InterventionSet set(1.0);
    for (const auto& [id, t] : v) set.add(id, t.to_vector());
    return set;
  }
};

/// Residual-stream steering vector for one layer (RepE contrast vector).
struct ContrastVector {
  int layer = 0;
  std::vector<float> vector;
  double alpha = 5.0;

  Hooks hooks(const ModelConfig& cfg) const {
    if (layer < 0 || layer > cfg.n_layers) throw InvalidArgument("contrast vector layer out of range");
    if (vector.size() != static_cast<std::size_t>(cfg.d_model)) {
      throw InvalidArgument("contrast vector length " + std::to_string(vector.size()) + " != d_model");
    }
    Hooks h = Hooks::for_config(cfg);
    std::vector<float> scaled(vector.size());
    for (std::size_t i = 0; i < vector.size(); ++i) scaled[i] = static_cast<float>(alpha) * vector[i];
    h.residual_add[static_cast<std::size_t>(layer)] = Tensor({vector.size()}, std::move(scaled));
    return h;
  }
};

/// One positive and one negative sequence (e.g. prompt + gold answer and
/// prompt + wrong answer).
struct LabeledPair {
  Tokens positive;
  Tokens negative;
};

/// Per-layer matrices [n_seqs, H*dh] of head outputs at each sequence's last
/// token, from unhooked forwards.
inline std::vector<std::vector<float>> last_token_head_features(const Model& model, const std::vector<Tokens>& seqs,
                                                                std::size_t batch_size = 32) {
  const ModelConfig& cfg = model.config();
  const auto width = static_cast<std::size_t>(cfg.n_heads * cfg.d_head);
  std::vector<std::vector<float>> out(static_cast<std::size_t>(cfg.n_layers), std::vector<float>(seqs.size() * width));
  NoGradGuard no_grad;
  for (std::size_t begin = 0; begin < seqs.size(); begin += batch_size) {
    const std::size_t end = std::min(seqs.size(), begin + batch_size);
    std::vector<Tokens> chunk(seqs.begin() + static_cast<std::ptrdiff_t>(begin),
                              seqs.begin() + static_cast<std::ptrdiff_t>(end));
    const BatchOutput fwd = forward_batch(model, chunk, {}, true);
    for (std::size_t l = 0; l < out.size(); ++l) {
      const auto z = fwd.trace->head_outputs[l].data();
      for (std::size_t s = 0; s < chunk.size(); ++s) {
        const std::size_t row = fwd.starts[s] + fwd.lengths[s] - 1;
        std::copy_n(z.data() + row * width, width, out[l].data() + (begin + s) * width);
      }
    }
  }
  return out;
}

/// mean(positives) - mean(negatives), accumulated in double.
inline std::vector<float> mean_difference(const std::vector<std::vector<float>>& positives,
                                          const std::vector<std::vector<float>>& negatives) {
  if (positives.empty() || negatives.empty()) throw InvalidArgument("mean_difference: empty sample");
  const std::size_t n = positives.front().size();
  std::vector<double> acc(n, 0.0);
  for (const auto& p : positives) {
    if (p.size() != n) throw InvalidArgument("mean_difference: ragged samples");
    for (std::size_t i = 0; i < n; ++i) acc[i] += static_cast<double>(p[i]) / static_cast<double>(positives.size());
  }
  for (const auto& q : negatives) {
    if (q.size() != n) throw InvalidArgument("mean_difference: ragged samples");
    for (std::size_t i = 0; i < n; ++i) acc[i] -= static_cast<double>(q[i]) / static_cast<double>(negatives.size());
  }
  return {acc.begin(), acc.end()};
}

/// ITI offsets: per target head, the mean last-token activation over
/// positives minus the mean over negatives.
inline InterventionSet extract_iti_offsets(const Model& model, const std::vector<LabeledPair>& pairs,
                                           const std::vector<HeadId>& targets, double alpha = 15.0) {
  if (pairs.empty()) throw InvalidArgument("extract_iti_offsets: no labeled pairs");
  if (targets.empty()) throw InvalidArgument("extract_iti_offsets: empty target set");
  const ModelConfig& cfg = model.config();
  for (const HeadId& id : targets) id.validate(cfg);
  std::vector<Tokens> pos, neg;
  for (const LabeledPair& p : pairs) {
    pos.push_back(p.positive);
    neg.push_back(p.negative);
  }
  const auto pos_feats = last_token_head_features(model, pos);
  const auto neg_feats = last_token_head_features(model, neg);
  const auto dh = static_cast<std::size_t>(cfg.d_head);
  const auto width = static_cast<std::size_t>(cfg.n_heads) * dh;

  auto head_rows = [&](const std::vector<float>& layer, std::size_t count, int head) {
    std::vector<std::vector<float>> rows(count);
    for (std::size_t s = 0; s < count; ++s) {
      const float* begin = layer.data() + s * width + static_cast<std::size_t>(head) * dh;
      rows[s].assign(begin, begin + dh);
    }
    return rows;
  };

  InterventionSet set(alpha);
  for (const HeadId& id : targets) {
    const auto l = static_cast<std::size_t>(id.layer);
    set.add(id, mean_difference(head_rows(pos_feats[l], pos.size(), id.head), head_rows(neg_feats[l], neg.size(), id.head)));
  }
  return set;
}

/// RepE contrast vector: h^layer at the last token of the positive prompt
/// minus the same for the negative prompt.
inline ContrastVector extract_contrast_vector(const Model& model, const Tokens& prompt_pos, const Tokens& prompt_neg,
                                              int layer, double alpha = 5.0) {
  const ModelConfig& cfg = model.config();
  if (layer < 0 || layer > cfg.n_layers) {
    throw InvalidArgument("extract_contrast_vector: layer " + std::to_string(layer) + " outside [0, " +
                          std::to_string(cfg.n_layers) + "]");
  }
  NoGradGuard no_grad;
  const ForwardTrace pos = forward(model, prompt_pos, {}, true);
  const ForwardTrace neg = forward(model, prompt_neg, {}, true);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto rp = pos.residuals[static_cast<std::size_t>(layer)].data();
  const auto rn = neg.residuals[static_cast<std::size_t>(layer)].data();
  ContrastVector cv;
  cv.layer = layer;
  cv.alpha = alpha;
  cv.vector.resize(d);
  const std::size_t lp = (prompt_pos.size() - 1) * d, ln = (prompt_neg.size() - 1) * d;
  for (std::size_t i = 0; i < d; ++i) cv.vector[i] = rp[lp + i] - rn[ln + i];
  return cv;
}

/// Averages contrast vectors over several prompt pairs.
inline ContrastVector extract_contrast_vector(const Model& model, const std::vector<LabeledPair>& prompts, int layer,
                                              double alpha = 5.0) {
  if (prompts.empty()) throw InvalidArgument("extract_contrast_vector: no prompt pairs");
  ContrastVector total = extract_contrast_vector(model, prompts.front().positive, prompts.front().negative, layer, alpha);
  std::vector<double> acc(total.vector.begin(), total.vector.end());
  for (std::size_t k = 1; k < prompts.size(); ++k) {
    const ContrastVector cv = extract_contrast_vector(model, prompts[k].positive, prompts[k].negative, layer, alpha);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += cv.vector[i];
  }
  for (std::size_t i = 0; i < acc.size(); ++i) total.vector[i] = static_cast<float>(acc[i] / static_cast<double>(prompts.size()));
  return total;
}

/// Union of two intervention sets with disjoint targets and equal alpha.
inline InterventionSet merge(const InterventionSet& a, const InterventionSet& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.alpha() != b.alpha()) throw InvalidArgument("merge: intervention sets have different alpha");
  InterventionSet out(a.alpha());
  for (const auto& [id, v] : a.offsets()) out.add(id, v);
  for (const auto& [id, v] : b.offsets()) {
    if (a.offsets().count(id)) throw ConflictError("merge: head " + to_string(id) + " present in both sets");
    out.add(id, v);
  }
  return out;
}

// ---------------------------------------------------------------- JSON

inline nlohmann::json intervention_to_json(const InterventionSet& set) {
  nlohmann::json targets = nlohmann::json::array();
  for (const auto& [id, v] : set.offsets()) {
    targets.push_back({{"layer", id.layer}, {"head", id.head}, {"offset", v}});
  }
  return {{"alpha", set.alpha()}, {"targets", targets}};
}

inline InterventionSet intervention_from_json(const nlohmann::json& j) {
  try {
    InterventionSet set(j.at("alpha").get<double>());
    for (const auto& t : j.at("targets")) {
      set.add({t.at("layer").get<int>(), t.at("head").get<int>()}, t.at("offset").get<std::vector<float>>());
    }
    return set;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed intervention file: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("malformed intervention file: ") + e.what());
  }
}

}  // namespace lofit
