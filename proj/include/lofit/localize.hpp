#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lofit/error.hpp"
#include "lofit/intervene.hpp"
#include "lofit/model.hpp"
#include "lofit/rng.hpp"
#include "lofit/train.hpp"

namespace lofit {

enum class SelectionMethod { lofit_norm, bias_norm, iti_probe, layer_probe, random };

inline std::string to_string(SelectionMethod m) {
  switch (m) {
    case SelectionMethod::lofit_norm: return "lofit_norm";
    case SelectionMethod::bias_norm: return "bias_norm";
    case SelectionMethod::iti_probe: return "iti_probe";
    case SelectionMethod::layer_probe: return "layer_probe";
    case SelectionMethod::random: return "random";
  }
  return "?";
}

inline SelectionMethod parse_selection_method(const std::string& s) {
  for (auto m : {SelectionMethod::lofit_norm, SelectionMethod::bias_norm, SelectionMethod::iti_probe,
                 SelectionMethod::layer_probe, SelectionMethod::random}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown selection method '" + s + "'");
}

struct SelectionConfig {
  int K = 3;
  double lambda = 5e-3;
  double sigma_A = 0.001;
  std::uint64_t seed = 0;

  void validate(const ModelConfig& cfg) const {
    if (K <= 0) throw InvalidArgument("selection: K must be positive");
    if (K > cfg.total_heads()) {
      throw InvalidArgument("selection: K = " + std::to_string(K) + " exceeds " + std::to_string(cfg.total_heads()) +
                            " heads");
    }
    if (lambda < 0.0) throw InvalidArgument("selection: lambda must be nonnegative");
    if (sigma_A < 0.0) throw InvalidArgument("selection: sigma_A must be nonnegative");
  }
};

struct HeadScoreTable {
  std::map<HeadId, double> scores;
  SelectionMethod method = SelectionMethod::lofit_norm;
};

/// K for a fraction of all heads, rounded to a multiple of `granularity` and
/// never below one multiple.
inline int heads_for_fraction(double fraction, int n_layers, int n_heads, int granularity = 1) {
  if (!(fraction > 0.0) || fraction > 1.0) throw InvalidArgument("heads_for_fraction: fraction must be in (0, 1]");
  if (n_layers <= 0 || n_heads <= 0 || granularity <= 0) throw InvalidArgument("heads_for_fraction: sizes must be positive");
  const double total = static_cast<double>(n_layers) * n_heads;
  const long units = std::lround(fraction * total / granularity);
  const long k = std::max<long>(granularity, units * granularity);
  return static_cast<int>(std::min<long>(k, n_layers * n_heads));
}

/// Learnable parameters shipped by a LoFiT intervention.
inline long long param_count(long long k, long long d_head) {
  if (k < 0 || d_head <= 0) throw InvalidArgument("param_count: K must be nonnegative and d_head positive");
  return k * d_head;
}

// ---------------------------------------------------------------- step 1

/// LoFiT step 1: A ~ N(0, sigma_A) on every head, trained with the task loss
/// plus lambda * sum ||A||_1. The base model is left untouched.
inline ScalingParams train_scaling_factors(const Model& model, const TuningData& data, const SelectionConfig& sel,
                                           const TrainConfig& train_cfg, TrainLog* log = nullptr) {
  const ModelConfig& mc = model.config();
  if (sel.lambda < 0.0) throw InvalidArgument("train_scaling_factors: lambda must be nonnegative");
  if (data.size() == 0) throw InvalidArgument("train_scaling_factors: empty dataset");
  Rng rng = Rng(sel.seed).fork(0x5343414c45ull);
  ScalingParams params = ScalingParams::init(mc, sel.sigma_A, rng);
  const NamedParams named = params.parameters();
  std::function<Tensor()> penalty;
  if (sel.lambda > 0.0) penalty = [&] { return scale(l1_penalty(named), static_cast<float>(sel.lambda)); };
  TrainLog l = fit_intervention(model, data, train_cfg, named, [&] { return params.hooks(mc); }, penalty);
  if (log) *log = std::move(l);
  return params;
}

/// S(l, i) = ||t||_2 for each head's vector.
inline HeadScoreTable score_by_norm(const std::map<HeadId, Tensor>& vectors, SelectionMethod method) {
  HeadScoreTable table;
  table.method = method;
  for (const auto& [id, t] : vectors) {
    double acc = 0.0;
    for (float x : t.data()) acc += static_cast<double>(x) * x;
    table.scores[id] = std::sqrt(acc);
  }
  return table;
}

/// Top-K heads by score; ties go to the smaller (layer, head). The result is
/// returned in ascending (layer, head) order.
inline std::vector<HeadId> select_top_k(const HeadScoreTable& table, int k) {
  if (k <= 0) throw InvalidArgument("select_top_k: K must be positive");
  if (static_cast<std::size_t>(k) > table.scores.size()) {
    throw InvalidArgument("select_top_k: K = " + std::to_string(k) + " exceeds " + std::to_string(table.scores.size()) +
                          " scored heads");
  }
  std::vector<std::pair<HeadId, double>> ranked(table.scores.begin(), table.scores.end());
  for (const auto& [id, s] : ranked)
    if (!std::isfinite(s)) throw InvalidArgument("select_top_k: non-finite score for head " + to_string(id));
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<HeadId> out;
  for (int i = 0; i < k; ++i) out.push_back(ranked[static_cast<std::size_t>(i)].first);
  std::sort(out.begin(), out.end());
  return out;
}

/// K heads uniformly without replacement.
inline std::vector<HeadId> select_random(const ModelConfig& cfg, int k, std::uint64_t seed) {
  const std::vector<HeadId> all = all_heads(cfg);
  if (k <= 0 || static_cast<std::size_t>(k) > all.size()) {
    throw InvalidArgument("select_random: K = " + std::to_string(k) + " outside [1, " + std::to_string(all.size()) + "]");
  }
  Rng rng = Rng(seed).fork(0x52414e444f4dull);
  std::vector<HeadId> out;
  for (std::size_t i : rng.sample_without_replacement(all.size(), static_cast<std::size_t>(k))) out.push_back(all[i]);
  std::sort(out.begin(), out.end());
  return out;
}

/// Top-K for score-based methods; the random method ignores scores.
inline std::vector<HeadId> score_and_select(const HeadScoreTable& table, int k, const ModelConfig& cfg,
                                            std::uint64_t seed = 0) {
  if (k > cfg.total_heads()) throw InvalidArgument("score_and_select: K exceeds the number of heads");
  if (table.method == SelectionMethod::random) return select_random(cfg, k, seed);
  return select_top_k(table, k);
}

// ---------------------------------------------------------------- probes

struct ProbeModel {
  std::vector<double> weights;
  double bias = 0.0;
  double val_accuracy = 0.0;

  double logit(std::span<const float> x) const {
    if (x.size() != weights.size()) throw InvalidArgument("probe: feature length mismatch");
    double z = bias;
    for (std::size_t i = 0; i < x.size(); ++i) z += weights[i] * x[i];
    return z;
  }
  bool predict(std::span<const float> x) const { return 1.0 / (1.0 + std::exp(-logit(x))) >= 0.5; }
};

struct ProbeConfig {
  double val_fraction = 0.2;  // last fraction of pairs, by order
  int iterations = 200;
  double lr = 0.1;
  double l2 = 1e-3;
};

/// Logistic regression by full-batch gradient descent on rows [0, n_train)
/// of `features` ([n, dim], row-major), scored on the remaining rows.
inline ProbeModel fit_logistic_probe(const std::vector<float>& features, std::size_t dim, const std::vector<int>& labels,
                                     std::size_t n_train, const ProbeConfig& pc = {}) {
  const std::size_t n = labels.size();
  if (features.size() != n * dim) throw InvalidArgument("fit_logistic_probe: feature matrix size mismatch");
  if (n_train == 0 || n_train > n) throw InvalidArgument("fit_logistic_probe: bad training split");
  int pos = 0;
  for (std::size_t i = 0; i < n_train; ++i) pos += labels[i] != 0;
  if (pos == 0 || pos == static_cast<int>(n_train)) {
    throw DegenerateDataError("probe training data contains a single class");
  }
  ProbeModel probe;
  probe.weights.assign(dim, 0.0);
  std::vector<double> grad(dim);
  for (int it = 0; it < pc.iterations; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double grad_b = 0.0;
    for (std::size_t r = 0; r < n_train; ++r) {
      const std::span<const float> x(features.data() + r * dim, dim);
      const double p = 1.0 / (1.0 + std::exp(-probe.logit(x)));
      const double err = p - (labels[r] != 0 ? 1.0 : 0.0);
      for (std::size_t j = 0; j < dim; ++j) grad[j] += err * x[j];
      grad_b += err;
    }
    const double inv = 1.0 / static_cast<double>(n_train);
    for (std::size_t j = 0; j < dim; ++j) probe.weights[j] -= pc.lr * (grad[j] * inv + pc.l2 * probe.weights[j]);
    probe.bias -= pc.lr * grad_b * inv;
  }
  const std::size_t n_val = n - n_train;
  const std::size_t first = n_val == 0 ? 0 : n_train;
  const std::size_t count = n_val == 0 ? n_train : n_val;
  std::size_t correct = 0;
  for (std::size_t r = first; r < first + count; ++r) {
    correct += probe.predict(std::span<const float>(features.data() + r * dim, dim)) == (labels[r] != 0);
  }
  probe.val_accuracy = static_cast<double>(correct) / static_cast<double>(count);
  return probe;
}

namespace detail {

/// Rows ordered pair by pair: (pos_0, neg_0, pos_1, neg_1, ...). Returns the
/// row count of the training part.
inline std::size_t probe_rows(std::size_t n_pairs, double val_fraction) {
  if (n_pairs < 2) throw DegenerateDataError("probes need at least two labeled pairs");
  const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(n_pairs)));
  const std::size_t n_train_pairs = std::clamp<std::size_t>(n_pairs - n_val, 1, n_pairs);
  return 2 * n_train_pairs;
}

struct PairFeatures {
  std::vector<std::vector<float>> per_layer;  // [2 * n_pairs, H*dh], interleaved pos/neg
  std::vector<int> labels;
};

inline PairFeatures pair_features(const Model& model, const std::vector<LabeledPair>& pairs) {
  if (pairs.empty()) throw InvalidArgument("probe training: no labeled pairs");
  std::vector<Tokens> seqs;
  PairFeatures out;
  for (const LabeledPair& p : pairs) {
    seqs.push_back(p.positive);
    seqs.push_back(p.negative);
    out.labels.push_back(1);
    out.labels.push_back(0);
  }
  out.per_layer = last_token_head_features(model, seqs);
  return out;
}

}  // namespace detail

/// One probe per head on its last-token activation z^{(l,i)}.
inline std::map<HeadId, ProbeModel> train_head_probes(const Model& model, const std::vector<LabeledPair>& pairs,
                                                      const ProbeConfig& pc = {}) {
  const ModelConfig& cfg = model.config();
  const std::size_t n_train = detail::probe_rows(pairs.size(), pc.val_fraction);
  const detail::PairFeatures feats = detail::pair_features(model, pairs);
  const auto dh = static_cast<std::size_t>(cfg.d_head);
  const auto width = static_cast<std::size_t>(cfg.n_heads) * dh;
  const std::size_t rows = feats.labels.size();
  std::map<HeadId, ProbeModel> out;
  for (const HeadId& id : all_heads(cfg)) {
    const auto& layer = feats.per_layer[static_cast<std::size_t>(id.layer)];
    std::vector<float> x(rows * dh);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(layer.data() + r * width + static_cast<std::size_t>(id.head) * dh, dh, x.data() + r * dh);
    }
    out[id] = fit_logistic_probe(x, dh, feats.labels, n_train, pc);
  }
  return out;
}

/// One probe per layer on the concatenated head activations (length d).
inline std::map<int, ProbeModel> train_layer_probes(const Model& model, const std::vector<LabeledPair>& pairs,
                                                    const ProbeConfig& pc = {}) {
  const ModelConfig& cfg = model.config();
  const std::size_t n_train = detail::probe_rows(pairs.size(), pc.val_fraction);
  const detail::PairFeatures feats = detail::pair_features(model, pairs);
  const auto width = static_cast<std::size_t>(cfg.n_heads * cfg.d_head);
  std::map<int, ProbeModel> out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    out[l] = fit_logistic_probe(feats.per_layer[static_cast<std::size_t>(l)], width, feats.labels, n_train, pc);
  }
  return out;
}

inline HeadScoreTable probe_scores(const std::map<HeadId, ProbeModel>& probes) {
  HeadScoreTable t;
  t.method = SelectionMethod::iti_probe;
  for (const auto& [id, p] : probes) t.scores[id] = p.val_accuracy;
  return t;
}

/// Layer with the best probe accuracy (lowest index on ties).
inline int best_probe_layer(const std::map<int, ProbeModel>& probes) {
  if (probes.empty()) throw InvalidArgument("best_probe_layer: no probes");
  int best = probes.begin()->first;
  for (const auto& [l, p] : probes)
    if (p.val_accuracy > probes.at(best).val_accuracy) best = l;
  return best;
}

/// Every head of `layer`, each scored by the layer probe's accuracy.
inline HeadScoreTable layer_probe_scores(const std::map<int, ProbeModel>& probes, const ModelConfig& cfg) {
  HeadScoreTable t;
  t.method = SelectionMethod::layer_probe;
  for (const HeadId& id : all_heads(cfg)) t.scores[id] = probes.count(id.layer) ? probes.at(id.layer).val_accuracy : 0.0;
  return t;
}

inline std::vector<HeadId> heads_of_layer(const ModelConfig& cfg, int layer) {
  if (layer < 0 || layer >= cfg.n_layers) throw InvalidArgument("heads_of_layer: layer out of range");
  std::vector<HeadId> out;
  for (int h = 0; h < cfg.n_heads; ++h) out.push_back({layer, h});
  return out;
}

// ---------------------------------------------------------------- analysis

/// |T_i ∩ T_j| / |T_i|. Asymmetric when the sets differ in size.
inline double jaccard(const std::vector<HeadId>& ti, const std::vector<HeadId>& tj) {
  if (ti.empty()) throw InvalidArgument("jaccard: first head set is empty");
  std::vector<HeadId> a = ti, b = tj;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  b.erase(std::unique(b.begin(), b.end()), b.end());
  std::vector<HeadId> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  return static_cast<double>(common.size()) / static_cast<double>(a.size());
}

/// Fraction of the heads of T in each layer.
inline std::vector<double> layer_distribution(const std::vector<HeadId>& targets, int n_layers) {
  if (targets.empty()) throw InvalidArgument("layer_distribution: empty head set");
  std::vector<double> p(static_cast<std::size_t>(n_layers), 0.0);
  for (const HeadId& id : targets) {
    if (id.layer < 0 || id.layer >= n_layers) throw InvalidArgument("layer_distribution: head " + to_string(id) + " out of range");
    p[static_cast<std::size_t>(id.layer)] += 1.0;
  }
  for (double& x : p) x /= static_cast<double>(targets.size());
  return p;
}

/// 1-D earth mover distance with ground distance |l1 - l2|.
inline double emd(const std::vector<double>& p, const std::vector<double>& q, double tol = 1e-9) {
  if (p.size() != q.size() || p.empty()) throw InvalidArgument("emd: distributions must have equal nonzero length");
  auto check = [tol](const std::vector<double>& d, const char* name) {
    double total = 0.0;
    for (double x : d) {
      if (!(x >= 0.0)) throw InvalidArgument(std::string("emd: ") + name + " has a negative or NaN entry");
      total += x;
    }
    if (std::abs(total - 1.0) > tol) throw InvalidArgument(std::string("emd: ") + name + " does not sum to 1");
  };
  check(p, "p");
  check(q, "q");
  double cp = 0.0, cq = 0.0, cost = 0.0;
  for (std::size_t i = 0; i + 1 < p.size(); ++i) {
    cp += p[i];
    cq += q[i];
    cost += std::abs(cp - cq);
  }
  return cost;
}

struct TokenProb {
  int token = 0;
  double prob = 0.0;
};

/// softmax((v W^O_slice) W_U), top-k by probability, ties to the lower id.
inline std::vector<TokenProb> logit_lens(std::span<const float> v, const Tensor& wo_slice, const Tensor& unembedding,
                                         int top_k = 10) {
  if (wo_slice.rank() != 2 || unembedding.rank() != 2) throw InvalidArgument("logit_lens: matrices must be rank 2");
  const std::size_t dh = wo_slice.dim(0), d = wo_slice.dim(1), vocab_size = unembedding.dim(1);
  if (v.size() != dh) throw InvalidArgument("logit_lens: offset length does not match the W^O slice");
  if (unembedding.dim(0) != d) throw InvalidArgument("logit_lens: unembedding rows do not match d_model");
  if (top_k <= 0 || static_cast<std::size_t>(top_k) > vocab_size) throw InvalidArgument("logit_lens: top_k out of range");
  std::vector<double> resid(d, 0.0);
  const auto wo = wo_slice.data();
  for (std::size_t i = 0; i < dh; ++i)
    for (std::size_t j = 0; j < d; ++j) resid[j] += static_cast<double>(v[i]) * wo[i * d + j];
  std::vector<double> logits(vocab_size, 0.0);
  const auto wu = unembedding.data();
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t t = 0; t < vocab_size; ++t) logits[t] += resid[j] * wu[j * vocab_size + t];
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& x : logits) z += (x = std::exp(x - mx));
  std::vector<TokenProb> all;
  for (std::size_t t = 0; t < vocab_size; ++t) all.push_back({static_cast<int>(t), logits[t] / z});
  std::stable_sort(all.begin(), all.end(), [](const TokenProb& a, const TokenProb& b) { return a.prob > b.prob; });
  all.resize(static_cast<std::size_t>(top_k));
  return all;
}

/// Rows [head*dh, (head+1)*dh) of a layer's W^O.
inline Tensor wo_slice(const Model& model, const HeadId& id) {
  const ModelConfig& cfg = model.config();
  id.validate(cfg);
  const Tensor& wo = model.layers[static_cast<std::size_t>(id.layer)].wo;
  return slice_rows(wo, static_cast<std::size_t>(id.head * cfg.d_head), static_cast<std::size_t>((id.head + 1) * cfg.d_head))
      .detach();
}

inline std::vector<TokenProb> logit_lens(const Model& model, const HeadId& id, std::span<const float> v, int top_k = 10) {
  return logit_lens(v, wo_slice(model, id), model.unembedding, top_k);
}

// ---------------------------------------------------------------- head-set file

struct HeadSet {
  std::string method = "lofit_norm";
  int K = 0;
  std::optional<double> lambda;
  std::optional<double> sigma_A;
  std::uint64_t seed = 0;
  std::string task;
  ModelConfig model;
  std::vector<HeadId> heads;
  std::map<HeadId, double> scores;
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},       {"d_model", c.d_model},   {"d_head", c.d_head},
          {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq}, {"mlp_hidden", c.mlp_hidden}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
  auto read = [&](const char* key, int& field) {
    if (j.contains(key)) field = j.at(key).get<int>();
  };
  read("n_layers", base.n_layers);
  read("n_heads", base.n_heads);
  read("d_model", base.d_model);
  read("d_head", base.d_head);
  read("vocab_size", base.vocab_size);
  read("max_seq", base.max_seq);
  read("mlp_hidden", base.mlp_hidden);
  return base;
}

inline nlohmann::json headset_to_json(const HeadSet& hs) {
  nlohmann::json heads = nlohmann::json::array();
  for (const HeadId& id : hs.heads) heads.push_back({id.layer, id.head});
  nlohmann::json scores = nlohmann::json::object();
  for (const auto& [id, s] : hs.scores) scores[to_string(id)] = s;
  nlohmann::json j = {{"method", hs.method}, {"K", hs.K},         {"seed", hs.seed}, {"task", hs.task},
                      {"model", model_config_to_json(hs.model)}, {"heads", heads}, {"scores", scores}};
  j["lambda"] = hs.lambda ? nlohmann::json(*hs.lambda) : nlohmann::json(nullptr);
  j["sigma_A"] = hs.sigma_A ? nlohmann::json(*hs.sigma_A) : nlohmann::json(nullptr);
  return j;
}

inline HeadSet headset_from_json(const nlohmann::json& j) {
  try {
    HeadSet hs;
    hs.method = j.at("method").get<std::string>();
    hs.K = j.at("K").get<int>();
    hs.seed = j.value("seed", std::uint64_t{0});
    hs.task = j.value("task", std::string{});
    if (j.contains("lambda") && !j.at("lambda").is_null()) hs.lambda = j.at("lambda").get<double>();
    if (j.contains("sigma_A") && !j.at("sigma_A").is_null()) hs.sigma_A = j.at("sigma_A").get<double>();
    if (j.contains("model")) hs.model = model_config_from_json(j.at("model"));
    for (const auto& h : j.at("heads")) hs.heads.push_back({h.at(0).get<int>(), h.at(1).get<int>()});
    if (j.contains("scores")) {
      for (const auto& [key, value] : j.at("scores").items()) {
        const auto comma = key.find(',');
        if (comma == std::string::npos) throw ConfigError("malformed head key '" + key + "'");
        hs.scores[{std::stoi(key.substr(0, comma)), std::stoi(key.substr(comma + 1))}] = value.get<double>();
      }
    }
    if (static_cast<std::size_t>(hs.K) != hs.heads.size()) {
      throw ConfigError("head-set file lists " + std::to_string(hs.heads.size()) + " heads but K = " + std::to_string(hs.K));
    }
    return hs;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed head-set file: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("malformed head-set file: ") + e.what());
  }
}

}  // namespace lofit
