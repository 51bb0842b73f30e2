#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lofit/localize.hpp"
#include "lofit/tasks.hpp"

using namespace lofit;

namespace {

// Minimum-cost matching of unit atoms: both distributions are k-quantized,
// so the optimal transport is a permutation of atoms.
double emd_by_matching(const std::vector<HeadId>& a, const std::vector<HeadId>& b) {
  std::vector<int> x, y;
  for (const HeadId& h : a) x.push_back(h.layer);
  for (const HeadId& h : b) y.push_back(h.layer);
  std::sort(y.begin(), y.end());
  double best = 1e300;
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) c += std::abs(x[i] - y[i]);
    best = std::min(best, c);
  } while (std::next_permutation(y.begin(), y.end()));
  return best / static_cast<double>(x.size());
}

double jaccard_by_counting(const std::vector<HeadId>& a, const std::vector<HeadId>& b) {
  std::vector<HeadId> ua;
  for (const HeadId& h : a)
    if (std::find(ua.begin(), ua.end(), h) == ua.end()) ua.push_back(h);
  int hits = 0;
  for (const HeadId& h : ua)
    for (const HeadId& g : b)
      if (h == g) {
        ++hits;
        break;
      }
  return static_cast<double>(hits) / static_cast<double>(ua.size());
}

std::vector<HeadId> random_heads(Rng& rng, int n_layers, int n_heads, std::size_t k) {
  std::vector<HeadId> out;
  for (std::size_t i : rng.sample_without_replacement(static_cast<std::size_t>(n_layers * n_heads), k))
    out.push_back({static_cast<int>(i) / n_heads, static_cast<int>(i) % n_heads});
  return out;
}

}  // namespace

TEST(HeadCount, FractionPresetsForLargeModels) {
  // 32x32 and 40x40 head grids at 3% / 10%, K in multiples of 16.
  EXPECT_EQ(heads_for_fraction(0.10, 32, 32, 16), 96);
  EXPECT_EQ(heads_for_fraction(0.03, 32, 32, 16), 32);
  EXPECT_EQ(heads_for_fraction(0.10, 40, 40, 16), 160);
  EXPECT_EQ(heads_for_fraction(0.10, 28, 16, 16), 48);
  EXPECT_EQ(heads_for_fraction(0.10, 4, 8), 3);
  EXPECT_EQ(heads_for_fraction(0.01, 4, 8), 1);
  EXPECT_EQ(heads_for_fraction(1.0, 4, 8), 32);
  EXPECT_THROW(heads_for_fraction(0.0, 4, 8), InvalidArgument);
  EXPECT_THROW(heads_for_fraction(1.5, 4, 8), InvalidArgument);
}

TEST(HeadCount, ParamCount) {
  EXPECT_EQ(param_count(96, 128), 12288);
  EXPECT_EQ(param_count(160, 128), 20480);
  EXPECT_EQ(param_count(48, 256), 12288);
  EXPECT_EQ(param_count(0, 8), 0);
  EXPECT_THROW(param_count(-1, 8), InvalidArgument);
}

TEST(TopK, MatchesFullSortWithTieBreak) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    HeadScoreTable t;
    for (int l = 0; l < 3; ++l)
      for (int h = 0; h < 3; ++h) t.scores[{l, h}] = static_cast<double>(rng.uniform_int(4));  // many ties
    const int k = 1 + static_cast<int>(rng.uniform_int(9));
    std::vector<std::pair<double, HeadId>> all;
    for (const auto& [id, s] : t.scores) all.push_back({-s, id});
    std::sort(all.begin(), all.end());
    std::vector<HeadId> expect;
    for (int i = 0; i < k; ++i) expect.push_back(all[i].second);
    std::sort(expect.begin(), expect.end());
    EXPECT_EQ(select_top_k(t, k), expect);
  }
}

TEST(TopK, RejectsBadInput) {
  HeadScoreTable t;
  t.scores[{0, 0}] = 1.0;
  EXPECT_THROW(select_top_k(t, 0), InvalidArgument);
  EXPECT_THROW(select_top_k(t, 2), InvalidArgument);
  t.scores[{0, 1}] = std::nan("");
  EXPECT_THROW(select_top_k(t, 1), InvalidArgument);
}

TEST(TopK, ScoreByNormIsL2) {
  std::map<HeadId, Tensor> v;
  v[{0, 0}] = Tensor({2}, {3.0f, 4.0f});
  v[{1, 0}] = Tensor({2}, {-6.0f, 0.0f});
  const HeadScoreTable t = score_by_norm(v, SelectionMethod::lofit_norm);
  EXPECT_DOUBLE_EQ(t.scores.at({0, 0}), 5.0);
  EXPECT_DOUBLE_EQ(t.scores.at({1, 0}), 6.0);
  EXPECT_EQ(select_top_k(t, 1), (std::vector<HeadId>{{1, 0}}));
}

TEST(RandomSelection, StableAndDistinct) {
  ModelConfig c;
  const auto a = select_random(c, 5, 9), b = select_random(c, 5, 9);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::adjacent_find(a.begin(), a.end()), a.end());
  EXPECT_NE(select_random(c, 5, 10), a);
  EXPECT_THROW(select_random(c, 33, 0), InvalidArgument);
}

TEST(Jaccard, MatchesCountingOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_heads(rng, 3, 3, 1 + rng.uniform_int(9));
    const auto b = random_heads(rng, 3, 3, 1 + rng.uniform_int(9));
    EXPECT_EQ(jaccard(a, b), jaccard_by_counting(a, b));
  }
  const std::vector<HeadId> dup{{0, 0}, {0, 0}, {1, 1}};
  EXPECT_EQ(jaccard(dup, {{0, 0}}), 0.5);
  EXPECT_THROW(jaccard({}, {{0, 0}}), InvalidArgument);
}

TEST(Emd, MatchesAtomMatchingOracle) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng.uniform_int(6);
    const auto a = random_heads(rng, 5, 2, k), b = random_heads(rng, 5, 2, k);
    const double got = emd(layer_distribution(a, 5), layer_distribution(b, 5));
    EXPECT_NEAR(got, emd_by_matching(a, b), 1e-9);
  }
}

TEST(Emd, MetricProperties) {
  const std::vector<double> p{0.5, 0.5, 0.0}, q{0.0, 0.0, 1.0}, r{0.25, 0.25, 0.5};
  EXPECT_EQ(emd(p, p), 0.0);
  EXPECT_NEAR(emd(p, q), emd(q, p), 1e-12);
  EXPECT_LE(emd(p, q), emd(p, r) + emd(r, q) + 1e-12);
  EXPECT_NEAR(emd({1, 0, 0, 0}, {0, 0, 0, 1}), 3.0, 1e-12);
  EXPECT_THROW(emd({0.5, 0.4}, {0.5, 0.5}), InvalidArgument);
  EXPECT_THROW(emd({1.0}, {0.5, 0.5}), InvalidArgument);
}

TEST(LayerDistribution, SumsToOne) {
  const auto p = layer_distribution({{0, 1}, {0, 2}, {3, 0}, {2, 1}}, 4);
  EXPECT_EQ(p, (std::vector<double>{0.5, 0.0, 0.25, 0.25}));
  EXPECT_THROW(layer_distribution({{4, 0}}, 4), InvalidArgument);
}

TEST(Probe, SeparableDataIsLearned) {
  Rng rng(13);
  std::vector<float> x;
  std::vector<int> y;
  for (int i = 0; i < 100; ++i) {
    const int label = i % 2;
    x.push_back(static_cast<float>(rng.normal(label ? 2.0 : -2.0, 0.5)));
    x.push_back(static_cast<float>(rng.normal()));
    y.push_back(label);
  }
  const ProbeModel p = fit_logistic_probe(x, 2, y, 80);
  EXPECT_EQ(p.val_accuracy, 1.0);
  EXPECT_GT(p.weights[0], 0.0);
}

TEST(Probe, PermutedLabelsStayNearChance) {
  Rng rng(14);
  double total = 0.0;
  const int trials = 20;
  for (int t = 0; t < trials; ++t) {
    std::vector<float> x;
    std::vector<int> y;
    for (int i = 0; i < 200; ++i) {
      for (int j = 0; j < 4; ++j) x.push_back(static_cast<float>(rng.normal()));
      y.push_back(i % 2);
    }
    rng.shuffle(y);
    total += fit_logistic_probe(x, 4, y, 160).val_accuracy;
  }
  EXPECT_NEAR(total / trials, 0.5, 0.08);
}

TEST(Probe, SingleClassIsDegenerate) {
  EXPECT_THROW(fit_logistic_probe({1, 2, 3, 4}, 1, {1, 1, 0, 0}, 2), DegenerateDataError);
}

TEST(LogitLens, MatchesDirectProjection) {
  Rng rng(15);
  const Tensor wo = randn({3, 4}, 0.0, 1.0, rng), wu = randn({4, 6}, 0.0, 1.0, rng);
  const std::vector<float> v{0.5f, -1.0f, 2.0f};
  const auto top = logit_lens(v, wo, wu, 6);
  std::vector<double> logits(6, 0.0);
  for (int t = 0; t < 6; ++t)
    for (int j = 0; j < 4; ++j) {
      double r = 0.0;
      for (int i = 0; i < 3; ++i) r += v[i] * wo.data()[i * 4 + j];
      logits[t] += r * wu.data()[j * 6 + t];
    }
  double z = 0.0;
  for (double l : logits) z += std::exp(l);
  double prev = 2.0;
  for (const TokenProb& tp : top) {
    EXPECT_NEAR(tp.prob, std::exp(logits[tp.token]) / z, 1e-9);
    EXPECT_LE(tp.prob, prev);
    prev = tp.prob;
  }
  const Tensor zero_wo = Tensor::zeros({3, 4});
  const auto flat = logit_lens(v, zero_wo, wu, 3);
  EXPECT_EQ(flat[0].token, 0);
  EXPECT_EQ(flat[2].token, 2);
}

TEST(HeadSetFile, RoundTripAndValidation) {
  HeadSet hs;
  hs.method = "lofit_norm";
  hs.K = 2;
  hs.lambda = 5e-3;
  hs.sigma_A = 1e-3;
  hs.seed = 4;
  hs.task = "relations";
  hs.heads = {{0, 1}, {3, 7}};
  hs.scores = {{{0, 1}, 0.25}, {{3, 7}, 0.5}};
  const HeadSet back = headset_from_json(headset_to_json(hs));
  EXPECT_EQ(back.heads, hs.heads);
  EXPECT_EQ(back.scores, hs.scores);
  EXPECT_EQ(*back.lambda, 5e-3);
  EXPECT_EQ(back.model, hs.model);
  auto j = headset_to_json(hs);
  j["K"] = 3;
  EXPECT_THROW(headset_from_json(j), ConfigError);
  EXPECT_THROW(headset_from_json(nlohmann::json::object()), ConfigError);
  EXPECT_THROW(parse_selection_method("nope"), ConfigError);
}
