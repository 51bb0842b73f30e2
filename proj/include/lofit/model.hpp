#pragma once

// Decoder-only transformer with pre-block RMS normalisation:
//
//   h^{l+1} = h^l + MultiHead(h^l) + MLP(h^l + MultiHead(h^l))
//   MultiHead(h^l) = concat(z^{(l,0)}, ..., z^{(l,H-1)}) W^O
//
// Per-head hooks rewrite z^{(l,i)} after attention and before W^O, at every
// position. Residual hooks add a vector to h^l before block l reads it.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lofit/error.hpp"
#include "lofit/rng.hpp"
#include "lofit/tensor.hpp"
#include "lofit/vocab.hpp"

namespace lofit {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 8;
  int d_model = 64;
  int d_head = 8;
  int vocab_size = vocab::kDefaultSize;
  int max_seq = 32;
  int mlp_hidden = 256;

  int total_heads() const { return n_layers * n_heads; }

  void validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_head <= 0 || vocab_size <= 0 || mlp_hidden <= 0) {
      throw InvalidArgument("model config: all sizes must be positive");
    }
    if (d_model % n_heads != 0) {
      throw InvalidArgument("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                            std::to_string(n_heads));
    }
    if (d_head != d_model / n_heads) {
      throw InvalidArgument("model config: d_head must equal d_model / n_heads = " +
                            std::to_string(d_model / n_heads));
    }
    if (max_seq < 2) throw InvalidArgument("model config: max_seq must be at least 2");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct HeadId {
  int layer = 0;
  int head = 0;

  auto operator<=>(const HeadId&) const = default;

  void validate(const ModelConfig& cfg) const {
    if (layer < 0 || layer >= cfg.n_layers || head < 0 || head >= cfg.n_heads) {
      throw InvalidArgument("head (" + std::to_string(layer) + ", " + std::to_string(head) +
                            ") outside a model of " + std::to_string(cfg.n_layers) + "x" +
                            std::to_string(cfg.n_heads) + " heads");
    }
  }
};

inline std::string to_string(const HeadId& id) {
  return std::to_string(id.layer) + "," + std::to_string(id.head);
}

inline std::vector<HeadId> all_heads(const ModelConfig& cfg) {
  std::vector<HeadId> out;
  out.reserve(static_cast<std::size_t>(cfg.total_heads()));
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h) out.push_back({l, h});
  return out;
}

struct LayerWeights {
  Tensor attn_gain;  // [d]
  Tensor wq, wk, wv; // [d, H*dh], head i owns columns [i*dh, (i+1)*dh)
  Tensor wo;         // [H*dh, d]
  Tensor mlp_gain;   // [d]
  Tensor w1, b1;     // [d, mlp], [mlp]
  Tensor w2, b2;     // [mlp, d], [d]
};

class Model {
 public:
  Model(const ModelConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto hd = static_cast<std::size_t>(config_.n_heads * config_.d_head);
    const auto v = static_cast<std::size_t>(config_.vocab_size);
    const auto m = static_cast<std::size_t>(config_.mlp_hidden);
    const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double out_std = w_std / std::sqrt(2.0 * config_.n_layers);

    token_embedding = randn({v, d}, 0.0, 1.0, rng, true);
    position_embedding = randn({static_cast<std::size_t>(config_.max_seq), d}, 0.0, 0.5, rng, true);
    for (int l = 0; l < config_.n_layers; ++l) {
      LayerWeights w;
      w.attn_gain = Tensor::full({d}, 1.0f, true);
      w.wq = randn({d, hd}, 0.0, w_std, rng, true);
      w.wk = randn({d, hd}, 0.0, w_std, rng, true);
      w.wv = randn({d, hd}, 0.0, w_std, rng, true);
      w.wo = randn({hd, d}, 0.0, out_std, rng, true);
      w.mlp_gain = Tensor::full({d}, 1.0f, true);
      w.w1 = randn({d, m}, 0.0, w_std, rng, true);
      w.b1 = Tensor::zeros({m}, true);
      w.w2 = randn({m, d}, 0.0, out_std / std::sqrt(static_cast<double>(m) / static_cast<double>(d)), rng, true);
      w.b2 = Tensor::zeros({d}, true);
      layers.push_back(std::move(w));
    }
    final_gain = Tensor::full({d}, 1.0f, true);
    unembedding = randn({d, v}, 0.0, w_std, rng, true);
  }

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }

  /// Parameters in a fixed order; names are stable checkpoint keys.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_emb", token_embedding);
    out.emplace_back("pos_emb", position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      const LayerWeights& w = layers[l];
      out.emplace_back(p + "attn_gain", w.attn_gain);
      out.emplace_back(p + "wq", w.wq);
      out.emplace_back(p + "wk", w.wk);
      out.emplace_back(p + "wv", w.wv);
      out.emplace_back(p + "wo", w.wo);
      out.emplace_back(p + "mlp_gain", w.mlp_gain);
      out.emplace_back(p + "w1", w.w1);
      out.emplace_back(p + "b1", w.b1);
      out.emplace_back(p + "w2", w.w2);
      out.emplace_back(p + "b2", w.b2);
    }
    out.emplace_back("final_gain", final_gain);
    out.emplace_back("unembed", unembedding);
    return out;
  }

  /// Stops all base weights from receiving gradients.
  void freeze() {
    for (auto& [name, t] : named_parameters()) {
      Tensor handle = t;
      handle.set_requires_grad(false);
      handle.zero_grad();
    }
    frozen_ = true;
  }

  void unfreeze() {
    for (auto& [name, t] : named_parameters()) {
      Tensor handle = t;
      handle.set_requires_grad(true);
    }
    frozen_ = false;
  }

  bool frozen() const { return frozen_; }

  /// Deep copy with independent weight storage.
  Model clone() const {
    Model out(config_);
    auto src = named_parameters();
    auto dst = out.named_parameters_mut();
    for (std::size_t i = 0; i < src.size(); ++i) {
      *dst[i] = Tensor(src[i].second.shape(), src[i].second.to_vector(), src[i].second.requires_grad());
    }
    out.frozen_ = frozen_;
    return out;
  }

  /// Slots for in-place replacement of weights (used by checkpoint loading).
  std::vector<Tensor*> named_parameters_mut() {
    std::vector<Tensor*> out{&token_embedding, &position_embedding};
    for (LayerWeights& w : layers) {
      for (Tensor* t : {&w.attn_gain, &w.wq, &w.wk, &w.wv, &w.wo, &w.mlp_gain, &w.w1, &w.b1, &w.w2, &w.b2}) {
        out.push_back(t);
      }
    }
    out.push_back(&final_gain);
    out.push_back(&unembedding);
    return out;
  }

  Tensor token_embedding;
  Tensor position_embedding;
  std::vector<LayerWeights> layers;
  Tensor final_gain;
  Tensor unembedding;

 private:
  explicit Model(const ModelConfig& config) : config_(config) { layers.resize(static_cast<std::size_t>(config.n_layers)); }

  ModelConfig config_;
  bool frozen_ = false;
};

inline Model build_model(const ModelConfig& config, Rng& rng) { return Model(config, rng); }

/// Hook tensors consumed by the forward pass. Undefined entries are skipped,
/// so a default-constructed Hooks runs the plain model.
struct Hooks {
  std::vector<Tensor> head_scale;    // per layer, H*dh values A; z <- (1 + A) * z
  std::vector<Tensor> head_bias;     // per layer, H*dh values b; z <- z + b
  std::vector<Tensor> residual_add;  // per residual index 0..L, d values; h^l <- h^l + r

  static Hooks for_config(const ModelConfig& cfg) {
    Hooks h;
    h.head_scale.resize(static_cast<std::size_t>(cfg.n_layers));
    h.head_bias.resize(static_cast<std::size_t>(cfg.n_layers));
    h.residual_add.resize(static_cast<std::size_t>(cfg.n_layers + 1));
    return h;
  }

  bool empty() const {
    auto none = [](const std::vector<Tensor>& v) {
      return std::none_of(v.begin(), v.end(), [](const Tensor& t) { return t.defined(); });
    };
    return none(head_scale) && none(head_bias) && none(residual_add);
  }
};

/// Packed activations of a batched forward; row r belongs to the sequence
/// whose [start, start + length) range contains r.
struct BatchTrace {
  std::vector<Tensor> residuals;     // L+1 entries, [N, d]
  std::vector<Tensor> head_outputs;  // L entries, [N, H*dh], after hooks
  std::vector<Tensor> attn_outputs;  // L entries, [N, d]
  std::vector<Tensor> mlp_outputs;   // L entries, [N, d]
};

struct BatchOutput {
  Tensor logits;  // [N, V]
  std::vector<std::size_t> starts;
  std::vector<std::size_t> lengths;
  std::optional<BatchTrace> trace;
};

namespace detail {

inline const Tensor* hook_at(const std::vector<Tensor>& v, std::size_t i) {
  return i < v.size() && v[i].defined() ? &v[i] : nullptr;
}

inline Tensor causal_mask(std::size_t heads, std::size_t t) {
  std::vector<float> m(heads * t * t, 0.0f);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = i + 1; j < t; ++j) m[(h * t + i) * t + j] = -1e9f;
  return Tensor({heads, t, t}, std::move(m));
}

inline void check_hooks(const ModelConfig& cfg, const Hooks& hooks) {
  const auto hd = static_cast<std::size_t>(cfg.n_heads * cfg.d_head);
  for (std::size_t l = 0; l < hooks.head_scale.size() || l < hooks.head_bias.size(); ++l) {
    for (const Tensor* t : {hook_at(hooks.head_scale, l), hook_at(hooks.head_bias, l)}) {
      if (t && (t->numel() != hd || l >= static_cast<std::size_t>(cfg.n_layers))) {
        throw InvalidArgument("head hook at layer " + std::to_string(l) + " has shape " + to_string(t->shape()));
      }
    }
  }
  for (std::size_t l = 0; l < hooks.residual_add.size(); ++l) {
    const Tensor* t = hook_at(hooks.residual_add, l);
    if (t && (t->numel() != static_cast<std::size_t>(cfg.d_model) || l > static_cast<std::size_t>(cfg.n_layers))) {
      throw InvalidArgument("residual hook at index " + std::to_string(l) + " has shape " + to_string(t->shape()));
    }
  }
}

}  // namespace detail

inline void check_tokens(const ModelConfig& cfg, const Tokens& tokens) {
  if (tokens.empty()) throw InvalidArgument("empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq)) {
    throw InvalidArgument("sequence of length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                          std::to_string(cfg.max_seq));
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) throw InvalidArgument("token id " + std::to_string(t) + " outside vocabulary");
  }
}

/// Forward pass over several sequences packed row-wise. Linear maps run on the
/// packed matrix; attention runs per sequence.
inline BatchOutput forward_batch(const Model& model, const std::vector<Tokens>& batch, const Hooks& hooks = {},
                                 bool trace = false) {
  const ModelConfig& cfg = model.config();
  if (batch.empty()) throw InvalidArgument("forward_batch: empty batch");
  detail::check_hooks(cfg, hooks);

  BatchOutput out;
  Tokens ids, positions;
  for (const Tokens& seq : batch) {
    check_tokens(cfg, seq);
    out.starts.push_back(ids.size());
    out.lengths.push_back(seq.size());
    ids.insert(ids.end(), seq.begin(), seq.end());
    for (std::size_t p = 0; p < seq.size(); ++p) positions.push_back(static_cast<int>(p));
  }
  if (trace) out.trace.emplace();

  const auto heads = static_cast<std::size_t>(cfg.n_heads);
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(cfg.d_head));

  Tensor x = add(embed(model.token_embedding, ids), embed(model.position_embedding, positions));
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    if (const Tensor* r = detail::hook_at(hooks.residual_add, l)) x = add_row(x, *r);
    if (trace) out.trace->residuals.push_back(x.detach());

    const LayerWeights& w = model.layers[l];
    const Tensor xn = mul_row(rms_norm(x), w.attn_gain);
    const Tensor q = matmul(xn, w.wq);
    const Tensor k = matmul(xn, w.wk);
    const Tensor v = matmul(xn, w.wv);

    std::vector<Tensor> per_seq;
    per_seq.reserve(batch.size());
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const std::size_t b = out.starts[s], e = b + out.lengths[s];
      const Tensor qh = split_heads(slice_rows(q, b, e), heads);
      const Tensor kh = split_heads(slice_rows(k, b, e), heads);
      const Tensor vh = split_heads(slice_rows(v, b, e), heads);
      const Tensor scores = add(scale(bmm(qh, transpose(kh)), att_scale), detail::causal_mask(heads, e - b));
      per_seq.push_back(merge_heads(bmm(softmax(scores), vh)));
    }
    Tensor z = per_seq.size() == 1 ? per_seq.front() : concat_rows(per_seq);
    if (const Tensor* a = detail::hook_at(hooks.head_scale, l)) z = mul_row(z, add_scalar(*a, 1.0f));
    if (const Tensor* bias = detail::hook_at(hooks.head_bias, l)) z = add_row(z, *bias);

    const Tensor attn = matmul(z, w.wo);
    const Tensor mid = add(x, attn);
    const Tensor hidden = gelu(add_row(matmul(mul_row(rms_norm(mid), w.mlp_gain), w.w1), w.b1));
    const Tensor mlp = add_row(matmul(hidden, w.w2), w.b2);
    x = add(mid, mlp);

    if (trace) {
      out.trace->head_outputs.push_back(z.detach());
      out.trace->attn_outputs.push_back(attn.detach());
      out.trace->mlp_outputs.push_back(mlp.detach());
    }
  }
  if (const Tensor* r = detail::hook_at(hooks.residual_add, model.layers.size())) x = add_row(x, *r);
  if (trace) out.trace->residuals.push_back(x.detach());
  out.logits = matmul(mul_row(rms_norm(x), model.final_gain), model.unembedding);
  return out;
}

struct ForwardTrace {
  Tensor logits;                             // [T, V]
  std::map<HeadId, Tensor> head_activations; // [T, dh] per head, after hooks
  std::vector<Tensor> residuals;             // h^0 .. h^L, [T, d]
  std::vector<Tensor> attn_outputs;          // [T, d]
  std::vector<Tensor> mlp_outputs;           // [T, d]
};

/// Columns [head*dh, (head+1)*dh) of a [T, H*dh] activation matrix.
inline Tensor head_slice(const Tensor& z, int head, int d_head) {
  const std::size_t t = z.dim(0), width = z.dim(1), dh = static_cast<std::size_t>(d_head);
  std::vector<float> out(t * dh);
  for (std::size_t i = 0; i < t; ++i) {
    std::copy_n(z.data().data() + i * width + static_cast<std::size_t>(head) * dh, dh, out.data() + i * dh);
  }
  return Tensor({t, dh}, std::move(out));
}

inline ForwardTrace forward(const Model& model, const Tokens& tokens, const Hooks& hooks = {}, bool trace = false) {
  BatchOutput b = forward_batch(model, {tokens}, hooks, trace);
  ForwardTrace out;
  out.logits = b.logits;
  if (trace) {
    const ModelConfig& cfg = model.config();
    out.residuals = std::move(b.trace->residuals);
    out.attn_outputs = std::move(b.trace->attn_outputs);
    out.mlp_outputs = std::move(b.trace->mlp_outputs);
    for (int l = 0; l < cfg.n_layers; ++l)
      for (int h = 0; h < cfg.n_heads; ++h)
        out.head_activations[{l, h}] = head_slice(b.trace->head_outputs[static_cast<std::size_t>(l)], h, cfg.d_head);
  }
  return out;
}

/// Index of the largest entry; the lowest index wins ties.
inline int argmax(std::span<const float> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

/// Greedy decoding; hooks apply at every step. The end token is not returned.
inline Tokens generate_greedy(const Model& model, const Tokens& prompt, const Hooks& hooks, int max_new,
                              int end_token = vocab::kEos) {
  const ModelConfig& cfg = model.config();
  if (prompt.empty()) throw InvalidArgument("generate_greedy: empty prompt");
  check_tokens(cfg, prompt);
  NoGradGuard no_grad;
  Tokens seq = prompt;
  Tokens generated;
  const auto vocab_size = static_cast<std::size_t>(cfg.vocab_size);
  for (int step = 0; step < max_new && seq.size() < static_cast<std::size_t>(cfg.max_seq); ++step) {
    const Tensor logits = forward_batch(model, {seq}, hooks).logits;
    const std::size_t last = logits.dim(0) - 1;
    const int next = argmax(logits.data().subspan(last * vocab_size, vocab_size));
    if (next == end_token) break;
    generated.push_back(next);
    seq.push_back(next);
  }
  return generated;
}

/// log p(token) for each position's next-token distribution, in double.
inline double log_prob_of(std::span<const float> row, int token) {
  const float mx = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  for (float v : row) total += std::exp(static_cast<double>(v) - mx);
  return static_cast<double>(row[static_cast<std::size_t>(token)]) - mx - std::log(total);
}

struct Continuation {
  Tokens prompt;
  Tokens continuation;
};

/// Sum over continuation positions of log p(token | prefix), for many
/// (prompt, continuation) pairs at once.
inline std::vector<double> sequence_logprobs(const Model& model, const std::vector<Continuation>& items,
                                             const Hooks& hooks = {}, std::size_t batch_size = 32) {
  const ModelConfig& cfg = model.config();
  const auto vocab_size = static_cast<std::size_t>(cfg.vocab_size);
  std::vector<double> out(items.size(), 0.0);
  NoGradGuard no_grad;
  for (std::size_t begin = 0; begin < items.size(); begin += batch_size) {
    const std::size_t end = std::min(items.size(), begin + batch_size);
    std::vector<Tokens> seqs;
    for (std::size_t i = begin; i < end; ++i) {
      const Continuation& c = items[i];
      if (c.prompt.empty()) throw InvalidArgument("sequence_logprob: empty prompt");
      if (c.continuation.empty()) throw InvalidArgument("sequence_logprob: empty continuation");
      Tokens seq = c.prompt;
      seq.insert(seq.end(), c.continuation.begin(), c.continuation.end());
      seqs.push_back(std::move(seq));
    }
    const BatchOutput fwd = forward_batch(model, seqs, hooks);
    const auto logits = fwd.logits.data();
    for (std::size_t i = begin; i < end; ++i) {
      const Continuation& c = items[i];
      const std::size_t row0 = fwd.starts[i - begin] + c.prompt.size() - 1;
      double total = 0.0;
      for (std::size_t j = 0; j < c.continuation.size(); ++j) {
        total += log_prob_of(logits.subspan((row0 + j) * vocab_size, vocab_size), c.continuation[j]);
      }
      out[i] = total;
    }
  }
  return out;
}

inline double sequence_logprob(const Model& model, const Tokens& prompt, const Tokens& continuation,
                               const Hooks& hooks = {}) {
  return sequence_logprobs(model, {{prompt, continuation}}, hooks).front();
}

}  // namespace lofit
