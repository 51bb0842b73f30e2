#pragma once

// Dense f32 tensors with tape-free reverse-mode autodiff. Every op result
// keeps shared pointers to its inputs plus a backward closure; backward()
// walks that DAG in reverse topological order.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lofit/error.hpp"
#include "lofit/rng.hpp"

namespace lofit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  float* grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    return grad.data();
  }
};

inline thread_local int no_grad_depth = 0;

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() noexcept { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_mode_enabled() noexcept { return detail::no_grad_depth == 0; }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false) {
    if (shape.empty()) throw InvalidArgument("tensor shape must have at least one dimension");
    for (std::size_t d : shape) {
      if (d == 0) throw InvalidArgument("tensor shape " + to_string(shape) + " has a zero dimension");
    }
    if (values.size() != shape_numel(shape)) {
      throw InvalidArgument("tensor data length " + std::to_string(values.size()) +
                            " does not match shape " + to_string(shape));
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
  }

  static Tensor full(Shape shape, float value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
  }

  static Tensor scalar(float value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const float> data() const { return node_->data; }
  /// Direct write access. Only meaningful for leaves (parameters, inputs).
  std::span<float> mutable_data() { return node_->data; }
  std::vector<float> to_vector() const { return node_->data; }

  float item() const {
    if (numel() != 1) throw InvalidArgument("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const float> grad() const { return node_->grad; }
  std::span<float> mutable_grad() { return {node_->grad_buffer(), node_->data.size()}; }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no graph attached.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  detail::Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<float> values, std::initializer_list<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(values));
  if (!grad_mode_enabled()) return out;
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  Node* n = out.node();
  n->requires_grad = true;
  for (const Tensor& t : inputs) n->parents.push_back(t.node_ptr());
  n->backward_fn = std::move(backward);
  return out;
}

inline Tensor make_result_list(Shape shape, std::vector<float> values, const std::vector<Tensor>& inputs,
                               std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(values));
  if (!grad_mode_enabled()) return out;
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  Node* n = out.node();
  n->requires_grad = true;
  for (const Tensor& t : inputs) n->parents.push_back(t.node_ptr());
  n->backward_fn = std::move(backward);
  return out;
}

inline void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw InvalidArgument(std::string(op) + ": undefined tensor");
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw InvalidArgument(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                          to_string(b.shape()));
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require_defined(t, op);
  if (t.rank() != rank) {
    throw InvalidArgument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                          to_string(t.shape()));
  }
}

inline std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

template <class Fwd, class Deriv>
Tensor unary_elementwise(const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<float> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_result(x.shape(), std::move(out), {x}, [deriv](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    float* g = a.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * deriv(a.data[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (int p = 0; p < 2; ++p) {
      detail::Node& in = *self.parents[p];
      if (!in.requires_grad) continue;
      float* g = in.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (int p = 0; p < 2; ++p) {
      detail::Node& in = *self.parents[p];
      if (!in.requires_grad) continue;
      float* g = in.grad_buffer();
      const float sign = p == 0 ? 1.0f : -1.0f;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    detail::Node& x = *self.parents[0];
    detail::Node& y = *self.parents[1];
    if (x.requires_grad) {
      float* g = x.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * y.data[i];
    }
    if (y.requires_grad) {
      float* g = y.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * x.data[i];
    }
  });
}

/// x[..., j] + row[j]; row has as many elements as x's last dimension.
inline Tensor add_row(const Tensor& x, const Tensor& row) {
  detail::require_defined(x, "add_row");
  detail::require_defined(row, "add_row");
  const std::size_t n = detail::last_dim(x);
  if (row.numel() != n) {
    throw InvalidArgument("add_row: shape mismatch " + to_string(x.shape()) + " vs " + to_string(row.shape()));
  }
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  const auto rd = row.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + rd[i % n];
  return detail::make_result(x.shape(), std::move(out), {x, row}, [n](detail::Node& self) {
    detail::Node& a = *self.parents[0];
    detail::Node& r = *self.parents[1];
    if (a.requires_grad) {
      float* g = a.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (r.requires_grad) {
      float* g = r.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

/// x[..., j] * row[j].
inline Tensor mul_row(const Tensor& x, const Tensor& row) {
  detail::require_defined(x, "mul_row");
  detail::require_defined(row, "mul_row");
  const std::size_t n = detail::last_dim(x);
  if (row.numel() != n) {
    throw InvalidArgument("mul_row: shape mismatch " + to_string(x.shape()) + " vs " + to_string(row.shape()));
  }
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  const auto rd = row.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * rd[i % n];
  return detail::make_result(x.shape(), std::move(out), {x, row}, [n](detail::Node& self) {
    detail::Node& a = *self.parents[0];
    detail::Node& r = *self.parents[1];
    if (a.requires_grad) {
      float* g = a.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * r.data[i % n];
    }
    if (r.requires_grad) {
      float* g = r.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i] * a.data[i];
    }
  });
}

inline Tensor scale(const Tensor& x, float s) {
  detail::require_defined(x, "scale");
  return detail::unary_elementwise(
      x, [s](float v) { return v * s; }, [s](float, float) { return s; });
}

inline Tensor add_scalar(const Tensor& x, float s) {
  detail::require_defined(x, "add_scalar");
  return detail::unary_elementwise(
      x, [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0f); }

inline Tensor exp(const Tensor& x) {
  detail::require_defined(x, "exp");
  return detail::unary_elementwise(
      x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

inline Tensor log(const Tensor& x) {
  detail::require_defined(x, "log");
  return detail::unary_elementwise(
      x, [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}

inline Tensor sigmoid(const Tensor& x) {
  detail::require_defined(x, "sigmoid");
  return detail::unary_elementwise(
      x, [](float v) { return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v)))); },
      [](float, float y) { return y * (1.0f - y); });
}

/// log(sigmoid(x)), stable for large |x|.
inline Tensor log_sigmoid(const Tensor& x) {
  detail::require_defined(x, "log_sigmoid");
  return detail::unary_elementwise(
      x,
      [](float v) {
        const double d = v;
        return static_cast<float>(std::min(d, 0.0) - std::log1p(std::exp(-std::abs(d))));
      },
      [](float v, float) { return static_cast<float>(1.0 / (1.0 + std::exp(static_cast<double>(v)))); });
}

/// GELU, tanh approximation.
inline Tensor gelu(const Tensor& x) {
  detail::require_defined(x, "gelu");
  constexpr float kC = 0.7978845608f;  // sqrt(2/pi)
  constexpr float kA = 0.044715f;
  const auto xd = x.data();
  std::vector<float> out(x.numel()), tanh_cache(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float v = xd[i];
    // tanh(u) = 1 - 2 / (exp(2u) + 1); saturates cleanly at both ends.
    const float t = 1.0f - 2.0f / (std::exp(2.0f * kC * (v + kA * v * v * v)) + 1.0f);
    tanh_cache[i] = t;
    out[i] = 0.5f * v * (1.0f + t);
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [tc = std::move(tanh_cache)](detail::Node& self) {
    detail::Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    float* g = a.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const float v = a.data[i], t = tc[i];
      const float dinner = kC * (1.0f + 3.0f * kA * v * v);
      g[i] += self.grad[i] * (0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * dinner);
    }
  });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
  detail::require_defined(x, "sum");
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return detail::make_result({1}, {static_cast<float>(acc)}, {x}, [](detail::Node& self) {
    detail::Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    float* g = a.grad_buffer();
    for (std::size_t i = 0; i < a.data.size(); ++i) g[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  detail::require_defined(x, "mean");
  return scale(sum(x), 1.0f / static_cast<float>(x.numel()));
}

/// Sum of absolute values. Subgradient 0 at 0.
inline Tensor l1_norm(const Tensor& x) {
  detail::require_defined(x, "l1_norm");
  double acc = 0.0;
  for (float v : x.data()) acc += std::abs(v);
  return detail::make_result({1}, {static_cast<float>(acc)}, {x}, [](detail::Node& self) {
    detail::Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    float* g = a.grad_buffer();
    for (std::size_t i = 0; i < a.data.size(); ++i) {
      const float v = a.data[i];
      g[i] += self.grad[0] * static_cast<float>((v > 0.0f) - (v < 0.0f));
    }
  });
}

inline Tensor l2_norm(const Tensor& x) {
  detail::require_defined(x, "l2_norm");
  double acc = 0.0;
  for (float v : x.data()) acc += static_cast<double>(v) * v;
  const float norm = static_cast<float>(std::sqrt(acc));
  return detail::make_result({1}, {norm}, {x}, [norm](detail::Node& self) {
    detail::Node& a = *self.parents[0];
    if (!a.requires_grad || norm == 0.0f) return;
    float* g = a.grad_buffer();
    for (std::size_t i = 0; i < a.data.size(); ++i) g[i] += self.grad[0] * a.data[i] / norm;
  });
}

// ---------------------------------------------------------------- last-axis ops

inline Tensor softmax(const Tensor& x) {
  detail::require_defined(x, "softmax");
  const std::size_t n = detail::last_dim(x);
  const std::size_t rows = x.numel() / n;
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xd.data() + r * n;
    float* o = out.data() + r * n;
    const float mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += (o[j] = std::exp(in[j] - mx));
    const auto inv = static_cast<float>(1.0 / total);
    for (std::size_t j = 0; j < n; ++j) o[j] *= inv;
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [n, rows](detail::Node& self) {
    detail::Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    float* g = a.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const float* y = self.data.data() + r * n;
      const float* dy = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(dy[j]) * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * static_cast<float>(dy[j] - dot);
    }
  });
}

inline Tensor log_softmax(const Tensor& x) {
  detail::require_defined(x, "log_softmax");
  const std::size_t n = detail::last_dim(x);
  const std::size_t rows = x.numel() / n;
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = xd.data() + r * n;
    float* o = out.data() + r * n;
    const float mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(in[j] - mx);
    const double lse = static_cast<double>(mx) + std::log(total);
    for (std::size_t j = 0; j < n; ++j) o[j] = static_cast<float>(in[j] - lse);
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [n, rows](detail::Node& self) {
    detail::Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    float* g = a.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const float* y = self.data.data() + r * n;
      const float* dy = self.grad.data() + r * n;
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += dy[j];
      for (std::size_t j = 0; j < n; ++j) {
        g[r * n + j] += dy[j] - std::exp(y[j]) * static_cast<float>(total);
      }
    }
  });
}

/// x / sqrt(mean(x^2) + eps) over the last axis, no gain.
inline Tensor rms_norm(const Tensor& x, float eps = 1e-5f) {
  detail::require_defined(x, "rms_norm");
  const std::size_t n = detail::last_dim(x);
  const std::size_t rows = x.numel() / n;
  std::vector<float> out(x.numel());
  std::vector<float> inv_rms(rows);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += static_cast<double>(xd[r * n + j]) * xd[r * n + j];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    inv_rms[r] = static_cast<float>(inv);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = static_cast<float>(xd[r * n + j] * inv);
  }
  return detail::make_result(x.shape(), std::move(out), {x},
                             [n, rows, inv_rms = std::move(inv_rms)](detail::Node& self) {
                               detail::Node& a = *self.parents[0];
                               if (!a.requires_grad) return;
                               float* g = a.grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const float* y = self.data.data() + r * n;
                                 const float* dy = self.grad.data() + r * n;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(dy[j]) * y[j];
                                 dot /= static_cast<double>(n);
                                 for (std::size_t j = 0; j < n; ++j) {
                                   g[r * n + j] += static_cast<float>((dy[j] - y[j] * dot) * inv_rms[r]);
                                 }
                               }
                             });
}

// ---------------------------------------------------------------- linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw InvalidArgument("matmul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<float> out(static_cast<std::size_t>(m * n));
  detail::MatMap(out.data(), m, n).noalias() =
      detail::ConstMatMap(a.data().data(), m, k) * detail::ConstMatMap(b.data().data(), k, n);
  return detail::make_result({a.dim(0), b.dim(1)}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    detail::Node& x = *self.parents[0];
    detail::Node& y = *self.parents[1];
    detail::ConstMatMap dz(self.grad.data(), m, n);
    if (x.requires_grad) {
      detail::MatMap(x.grad_buffer(), m, k).noalias() += dz * detail::ConstMatMap(y.data.data(), k, n).transpose();
    }
    if (y.requires_grad) {
      detail::MatMap(y.grad_buffer(), k, n).noalias() += detail::ConstMatMap(x.data.data(), m, k).transpose() * dz;
    }
  });
}

/// Batched matmul: [B, m, k] x [B, k, n] -> [B, m, n].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 3, "bmm");
  detail::require_rank(b, 3, "bmm");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw InvalidArgument("bmm: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t batch = a.dim(0);
  const auto m = static_cast<Eigen::Index>(a.dim(1));
  const auto k = static_cast<Eigen::Index>(a.dim(2));
  const auto n = static_cast<Eigen::Index>(b.dim(2));
  const std::size_t sa = a.dim(1) * a.dim(2), sb = b.dim(1) * b.dim(2), sc = a.dim(1) * b.dim(2);
  std::vector<float> out(batch * sc);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::MatMap(out.data() + i * sc, m, n).noalias() =
        detail::ConstMatMap(a.data().data() + i * sa, m, k) * detail::ConstMatMap(b.data().data() + i * sb, k, n);
  }
  return detail::make_result({batch, a.dim(1), b.dim(2)}, std::move(out), {a, b},
                             [=](detail::Node& self) {
                               detail::Node& x = *self.parents[0];
                               detail::Node& y = *self.parents[1];
                               for (std::size_t i = 0; i < batch; ++i) {
                                 detail::ConstMatMap dz(self.grad.data() + i * sc, m, n);
                                 if (x.requires_grad) {
                                   detail::MatMap(x.grad_buffer() + i * sa, m, k).noalias() +=
                                       dz * detail::ConstMatMap(y.data.data() + i * sb, k, n).transpose();
                                 }
                                 if (y.requires_grad) {
                                   detail::MatMap(y.grad_buffer() + i * sb, k, n).noalias() +=
                                       detail::ConstMatMap(x.data.data() + i * sa, m, k).transpose() * dz;
                                 }
                               }
                             });
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
inline Tensor transpose(const Tensor& x) {
  detail::require_defined(x, "transpose");
  if (x.rank() != 2 && x.rank() != 3) {
    throw InvalidArgument("transpose: expected rank 2 or 3, got shape " + to_string(x.shape()));
  }
  const std::size_t batch = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t r = x.dim(x.rank() - 2), c = x.dim(x.rank() - 1);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = xd[b * r * c + i * c + j];
  return detail::make_result(std::move(shape), std::move(out), {x}, [batch, r, c](detail::Node& self) {
    detail::Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    float* g = a.grad_buffer();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] += self.grad[b * r * c + j * r + i];
  });
}

// ---------------------------------------------------------------- gather / layout

/// Rows of `table` ([V, d]) selected by `ids`, giving [ids.size(), d].
inline Tensor embed(const Tensor& table, std::span<const int> ids) {
  detail::require_rank(table, 2, "embed");
  if (ids.empty()) throw InvalidArgument("embed: empty id list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw InvalidArgument("embed: id " + std::to_string(id) + " outside table of shape " + to_string(table.shape()));
    }
  }
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<float> out(idx.size() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(td.data() + static_cast<std::size_t>(idx[i]) * d, d, out.data() + i * d);
  }
  return detail::make_result({ids.size(), d}, std::move(out), {table}, [d, idx = std::move(idx)](detail::Node& self) {
    detail::Node& t = *self.parents[0];
    if (!t.requires_grad) return;
    float* g = t.grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      float* row = g + static_cast<std::size_t>(idx[i]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += self.grad[i * d + j];
    }
  });
}

/// out[i] = x[i, index[i]] for x of shape [m, n].
inline Tensor pick(const Tensor& x, std::span<const int> index) {
  detail::require_rank(x, 2, "pick");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (index.size() != m) {
    throw InvalidArgument("pick: " + std::to_string(index.size()) + " indices for shape " + to_string(x.shape()));
  }
  std::vector<int> idx(index.begin(), index.end());
  std::vector<float> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) {
      throw InvalidArgument("pick: index " + std::to_string(idx[i]) + " out of range for " + to_string(x.shape()));
    }
    out[i] = x.data()[i * n + static_cast<std::size_t>(idx[i])];
  }
  return detail::make_result({m}, std::move(out), {x}, [n, idx = std::move(idx)](detail::Node& self) {
    detail::Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    float* g = a.grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g[i * n + static_cast<std::size_t>(idx[i])] += self.grad[i];
  });
}

/// Concatenation along the last axis; leading dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InvalidArgument("concat: no inputs");
  for (const Tensor& p : parts) detail::require_defined(p, "concat");
  const Shape& lead = parts.front().shape();
  const std::size_t rows = parts.front().numel() / lead.back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != lead.size() || !std::equal(lead.begin(), lead.end() - 1, p.shape().begin())) {
      throw InvalidArgument("concat: shape mismatch " + to_string(lead) + " vs " + to_string(p.shape()));
    }
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  Shape shape = lead;
  shape.back() = total;
  std::vector<float> out(rows * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pd = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(pd.data() + r * widths[k], widths[k], out.data() + r * total + col);
    col += widths[k];
  }
  return detail::make_result_list(std::move(shape), std::move(out), parts,
                                  [rows, total, widths = std::move(widths)](detail::Node& self) {
                                    std::size_t offset = 0;
                                    for (std::size_t k = 0; k < widths.size(); ++k) {
                                      detail::Node& p = *self.parents[k];
                                      if (p.requires_grad) {
                                        float* g = p.grad_buffer();
                                        for (std::size_t r = 0; r < rows; ++r)
                                          for (std::size_t j = 0; j < widths[k]; ++j)
                                            g[r * widths[k] + j] += self.grad[r * total + offset + j];
                                      }
                                      offset += widths[k];
                                    }
                                  });
}

/// Stacks rank-2 tensors with equal column counts along axis 0.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: no inputs");
  const std::size_t cols = parts.front().rank() == 2 ? parts.front().dim(1) : 0;
  std::size_t rows = 0;
  for (const Tensor& p : parts) {
    detail::require_rank(p, 2, "concat_rows");
    if (p.dim(1) != cols) {
      throw InvalidArgument("concat_rows: shape mismatch " + to_string(parts.front().shape()) + " vs " +
                            to_string(p.shape()));
    }
    rows += p.dim(0);
  }
  std::vector<float> out;
  out.reserve(rows * cols);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_result_list({rows, cols}, std::move(out), parts, [](detail::Node& self) {
    std::size_t offset = 0;
    for (auto& parent : self.parents) {
      const std::size_t n = parent->data.size();
      if (parent->requires_grad) {
        float* g = parent->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

/// Rows [begin, end) of a rank-2 tensor.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, "slice_rows");
  if (begin >= end || end > x.dim(0)) {
    throw InvalidArgument("slice_rows: invalid range [" + std::to_string(begin) + ", " + std::to_string(end) +
                          ") for shape " + to_string(x.shape()));
  }
  const std::size_t cols = x.dim(1);
  std::vector<float> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                         x.data().begin() + static_cast<std::ptrdiff_t>(end * cols));
  return detail::make_result({end - begin, cols}, std::move(out), {x}, [begin, cols](detail::Node& self) {
    detail::Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    float* g = a.grad_buffer() + begin * cols;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

/// Same values, new shape of equal element count.
inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw InvalidArgument("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return detail::make_result(std::move(shape), x.to_vector(), {x}, [](detail::Node& self) {
    detail::Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    float* g = a.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

/// [T, H*dh] -> [H, T, dh].
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  detail::require_rank(x, 2, "split_heads");
  if (heads == 0 || x.dim(1) % heads != 0) {
    throw InvalidArgument("split_heads: width of " + to_string(x.shape()) + " not divisible by " +
                          std::to_string(heads));
  }
  const std::size_t t = x.dim(0), dh = x.dim(1) / heads;
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < t; ++i)
      std::copy_n(xd.data() + i * heads * dh + h * dh, dh, out.data() + (h * t + i) * dh);
  return detail::make_result({heads, t, dh}, std::move(out), {x}, [heads, t, dh](detail::Node& self) {
    detail::Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    float* g = a.grad_buffer();
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < dh; ++j) g[i * heads * dh + h * dh + j] += self.grad[(h * t + i) * dh + j];
  });
}

/// [H, T, dh] -> [T, H*dh].
inline Tensor merge_heads(const Tensor& x) {
  detail::require_rank(x, 3, "merge_heads");
  const std::size_t heads = x.dim(0), t = x.dim(1), dh = x.dim(2);
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < t; ++i)
      std::copy_n(xd.data() + (h * t + i) * dh, dh, out.data() + i * heads * dh + h * dh);
  return detail::make_result({t, heads * dh}, std::move(out), {x}, [heads, t, dh](detail::Node& self) {
    detail::Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    float* g = a.grad_buffer();
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < dh; ++j) g[(h * t + i) * dh + j] += self.grad[i * heads * dh + h * dh + j];
  });
}

// ---------------------------------------------------------------- construction

inline Tensor randn(const Shape& shape, double mean, double stddev, Rng& rng, bool requires_grad = false) {
  if (shape.empty()) throw InvalidArgument("randn: empty shape");
  if (stddev < 0.0) throw InvalidArgument("randn: negative stddev");
  for (std::size_t d : shape) {
    if (d == 0) throw InvalidArgument("randn: zero dimension in shape " + to_string(shape));
  }
  std::vector<float> values(shape_numel(shape));
  for (float& v : values) v = static_cast<float>(rng.normal(mean, stddev));
  return Tensor(shape, std::move(values), requires_grad);
}

// ---------------------------------------------------------------- backward

/// Accumulates d(loss)/d(leaf) into every reachable leaf with requires_grad.
/// Intermediate gradients are recomputed on each call; leaf gradients add up
/// until zero_grad().
inline void backward(const Tensor& loss) {
  detail::require_defined(loss, "backward");
  if (loss.numel() != 1) throw InvalidArgument("backward: loss must be scalar, got " + to_string(loss.shape()));
  detail::Node* root = loss.node();
  if (!root->requires_grad) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) {
    if (n->backward_fn) n->grad.assign(n->data.size(), 0.0f);
  }
  root->grad_buffer()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace lofit
