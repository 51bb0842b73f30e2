#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numeric>

#include "lofit/gradcheck.hpp"
#include "lofit/tensor.hpp"

using namespace lofit;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return randn(shape, 0.0, sd, rng);
}

// Projects a tensor onto fixed random weights so every output coordinate
// contributes to the scalar being differentiated.
Tensor project(const Tensor& y, std::uint64_t seed) {
  return sum(mul(y, random_tensor(y.shape(), seed ^ 0xabcdefull)));
}

void expect_gradcheck(const std::function<Tensor(const Tensor&)>& f, Shape shape, int cases = 10, double sd = 1.0) {
  for (int c = 0; c < cases; ++c) {
    const Tensor x = random_tensor(shape, 1000 + static_cast<std::uint64_t>(c), sd);
    const GradCheckReport r = finite_diff_check(f, x);
    EXPECT_TRUE(r.passed) << "case " << c << " max error " << r.max_rel_error << " at " << r.worst_index;
  }
}

}  // namespace

TEST(TensorConstruction, RejectsBadShapes) {
  EXPECT_THROW(Tensor({2, 0}, {}), InvalidArgument);
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), InvalidArgument);
  EXPECT_THROW(Tensor({}, {}), InvalidArgument);
  EXPECT_EQ(Tensor::zeros({3, 4}).numel(), 12u);
}

TEST(TensorOps, ShapeMismatchThrows) {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 2});
  EXPECT_THROW(add(a, b), InvalidArgument);
  EXPECT_THROW(matmul(a, a), InvalidArgument);
  EXPECT_NO_THROW(matmul(a, b));
  EXPECT_THROW(add_row(a, Tensor::zeros({2})), InvalidArgument);
}

TEST(TensorOps, ForwardValuesMatchScalarFormulas) {
  const Tensor x({2, 3}, {-1.5f, 0.0f, 0.5f, 2.0f, -0.25f, 1.0f});
  const Tensor smt = softmax(x), lsmt = log_softmax(x), gt = gelu(x), rnt = rms_norm(x);
  const auto sm = smt.data();
  const auto lsm = lsmt.data();
  for (int r = 0; r < 2; ++r) {
    double z = 0.0;
    for (int j = 0; j < 3; ++j) z += std::exp(double(x.data()[r * 3 + j]));
    for (int j = 0; j < 3; ++j) {
      const double p = std::exp(double(x.data()[r * 3 + j])) / z;
      EXPECT_NEAR(sm[r * 3 + j], p, 1e-6);
      EXPECT_NEAR(lsm[r * 3 + j], std::log(p), 1e-6);
    }
  }
  const auto g = gt.data();
  for (int i = 0; i < 6; ++i) {
    const double u = x.data()[i];
    const double ref = 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (u + 0.044715 * u * u * u)));
    EXPECT_NEAR(g[i], ref, 1e-6);
  }
  const auto rn = rnt.data();
  for (int r = 0; r < 2; ++r) {
    double ms = 0.0;
    for (int j = 0; j < 3; ++j) ms += double(x.data()[r * 3 + j]) * x.data()[r * 3 + j];
    ms /= 3.0;
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(rn[r * 3 + j], x.data()[r * 3 + j] / std::sqrt(ms + 1e-5), 1e-5);
  }
  const Tensor w({3, 2}, {1, 2, 3, 4, 5, 6});
  const Tensor mmt = matmul(x, w);
  const auto mm = mmt.data();
  EXPECT_NEAR(mm[0], -1.5 * 1 + 0 * 3 + 0.5 * 5, 1e-6);
  EXPECT_NEAR(mm[3], 2.0 * 2 - 0.25 * 4 + 1.0 * 6, 1e-6);
  EXPECT_NEAR(l1_norm(x).item(), 5.25, 1e-6);
  EXPECT_NEAR(log_sigmoid(Tensor::scalar(-30.0f)).item(), -30.0, 1e-5);
}

TEST(TensorOps, SoftmaxRowsSumToOne) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Tensor p = softmax(random_tensor({4, 7}, s, 5.0));
    for (int r = 0; r < 4; ++r) {
      double total = 0.0;
      for (int j = 0; j < 7; ++j) total += p.data()[r * 7 + j];
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(GradCheck, Elementwise) {
  const Tensor other = random_tensor({3, 4}, 7);
  expect_gradcheck([&](const Tensor& x) { return project(add(x, other), 1); }, {3, 4});
  expect_gradcheck([&](const Tensor& x) { return project(sub(other, x), 2); }, {3, 4});
  expect_gradcheck([&](const Tensor& x) { return project(mul(x, other), 3); }, {3, 4});
  expect_gradcheck([&](const Tensor& x) { return project(mul(x, x), 4); }, {3, 4});
  expect_gradcheck([&](const Tensor& x) { return project(scale(x, -2.5f), 5); }, {3, 4});
  expect_gradcheck([&](const Tensor& x) { return project(add_scalar(x, 0.3f), 6); }, {3, 4});
}

TEST(GradCheck, RowBroadcast) {
  const Tensor m = random_tensor({3, 4}, 9);
  expect_gradcheck([&](const Tensor& r) { return project(add_row(m, r), 10); }, {4});
  expect_gradcheck([&](const Tensor& r) { return project(mul_row(m, r), 11); }, {4});
  const Tensor row = random_tensor({4}, 12);
  expect_gradcheck([&](const Tensor& x) { return project(mul_row(x, row), 13); }, {3, 4});
}

TEST(GradCheck, Nonlinearities) {
  expect_gradcheck([](const Tensor& x) { return project(exp(x), 20); }, {2, 5}, 10, 0.5);
  expect_gradcheck([](const Tensor& x) { return project(log(add_scalar(mul(x, x), 0.5f)), 21); }, {2, 5});
  expect_gradcheck([](const Tensor& x) { return project(sigmoid(x), 22); }, {2, 5});
  expect_gradcheck([](const Tensor& x) { return project(log_sigmoid(x), 23); }, {2, 5}, 10, 3.0);
  expect_gradcheck([](const Tensor& x) { return project(gelu(x), 24); }, {2, 5}, 10, 2.0);
}

TEST(GradCheck, Reductions) {
  expect_gradcheck([](const Tensor& x) { return sum(x); }, {3, 3});
  expect_gradcheck([](const Tensor& x) { return mean(x); }, {3, 3});
  expect_gradcheck([](const Tensor& x) { return l2_norm(x); }, {6});
  // |x| has a kink at 0; random normals stay far from it.
  expect_gradcheck([](const Tensor& x) { return l1_norm(x); }, {6});
}

TEST(GradCheck, Normalizations) {
  expect_gradcheck([](const Tensor& x) { return project(softmax(x), 30); }, {3, 6});
  expect_gradcheck([](const Tensor& x) { return project(log_softmax(x), 31); }, {3, 6});
  expect_gradcheck([](const Tensor& x) { return project(rms_norm(x), 32); }, {3, 6});
}

TEST(GradCheck, MatrixProducts) {
  const Tensor b = random_tensor({4, 3}, 40);
  const Tensor a = random_tensor({2, 4}, 41);
  expect_gradcheck([&](const Tensor& x) { return project(matmul(x, b), 42); }, {2, 4});
  expect_gradcheck([&](const Tensor& x) { return project(matmul(a, x), 43); }, {4, 3});
  const Tensor bb = random_tensor({2, 4, 3}, 44);
  expect_gradcheck([&](const Tensor& x) { return project(bmm(x, bb), 45); }, {2, 3, 4});
  expect_gradcheck([&](const Tensor& x) { return project(bmm(bb, x), 46); }, {2, 3, 5});
  expect_gradcheck([](const Tensor& x) { return project(transpose(x), 47); }, {2, 3, 4});
}

TEST(GradCheck, IndexingAndLayout) {
  const std::vector<int> ids{3, 0, 3, 1};
  expect_gradcheck([&](const Tensor& t) { return project(embed(t, ids), 50); }, {5, 3});
  const std::vector<int> cols{2, 0, 1};
  expect_gradcheck([&](const Tensor& x) { return project(pick(x, cols), 51); }, {3, 4});
  const Tensor other = random_tensor({2}, 52);
  expect_gradcheck([&](const Tensor& x) { return project(concat({x, other, x}), 53); }, {3});
  const Tensor rows = random_tensor({1, 4}, 54);
  expect_gradcheck([&](const Tensor& x) { return project(concat_rows({rows, x}), 55); }, {2, 4});
  expect_gradcheck([](const Tensor& x) { return project(slice_rows(x, 1, 3), 56); }, {4, 3});
  expect_gradcheck([](const Tensor& x) { return project(reshape(x, {3, 4}), 57); }, {2, 6});
  expect_gradcheck([](const Tensor& x) { return project(split_heads(x, 2), 58); }, {3, 4});
  expect_gradcheck([](const Tensor& x) { return project(merge_heads(x), 59); }, {2, 3, 2});
}

TEST(Autodiff, SharedSubexpressionsAccumulate) {
  Tensor x({3}, {1.0f, -2.0f, 0.5f}, true);
  const Tensor y = add(mul(x, x), x);  // dy/dx = 2x + 1
  backward(sum(y));
  EXPECT_FLOAT_EQ(x.grad()[0], 3.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], -3.0f);
  EXPECT_FLOAT_EQ(x.grad()[2], 2.0f);
}

TEST(Autodiff, NoGradGuardBuildsNoGraph) {
  Tensor x({2}, {1.0f, 2.0f}, true);
  {
    NoGradGuard g;
    const Tensor y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(mul(x, x).requires_grad());
}

TEST(Rng, ForkAndSeedAreDeterministic) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.uniform_int(1000), b.uniform_int(1000));
  EXPECT_NE(Rng(42).fork(1).uniform_int(1u << 30), Rng(42).fork(2).uniform_int(1u << 30));
  auto s = Rng(3).sample_without_replacement(10, 10);
  std::sort(s.begin(), s.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(s[i], i);
}
