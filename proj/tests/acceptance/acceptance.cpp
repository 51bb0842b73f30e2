// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero if
// any criterion fails. The pretrained toy base is cached next to the binary
// (acceptance_base.lft); delete it to force a fresh pretraining run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lofit/checkpoint.hpp"
#include "lofit/cli.hpp"
#include "lofit/gradcheck.hpp"
#include "lofit/pipeline.hpp"

using namespace lofit;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void verdict(int id, const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << detail << std::endl;
}

void info(const std::string& msg) { std::cout << "     " << msg << std::endl; }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------- 1. gradients

Tensor rand_t(Shape s, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return randn(s, 0.0, sd, rng);
}

Tensor project(const Tensor& y, std::uint64_t seed) { return sum(mul(y, rand_t(y.shape(), seed ^ 0x5eedull))); }

struct Primitive {
  std::string name;
  Shape shape;
  double sd;
  std::function<Tensor(const Tensor&)> f;
};

void criterion_gradcheck() {
  const auto t0 = Clock::now();
  const Tensor o34 = rand_t({3, 4}, 1), r4 = rand_t({4}, 2), b43 = rand_t({4, 3}, 3), a24 = rand_t({2, 4}, 4);
  const Tensor bb = rand_t({2, 4, 3}, 5), row14 = rand_t({1, 4}, 6), v2 = rand_t({2}, 7);
  const std::vector<int> ids{3, 0, 3, 1}, cols{2, 0, 1, 1}, targets{1, 2, 0};
  const std::vector<std::uint8_t> mask{1, 0, 1};
  const std::vector<double> rc{-1.0, -2.0, 0.5}, rr{-1.5, -0.5, 0.0};
  const Tensor pr({3}, {-1.0f, 0.25f, -0.75f});
  const std::vector<Primitive> prims{
      {"add", {3, 4}, 1, [&](const Tensor& x) { return project(add(x, o34), 10); }},
      {"sub", {3, 4}, 1, [&](const Tensor& x) { return project(sub(o34, x), 11); }},
      {"mul", {3, 4}, 1, [&](const Tensor& x) { return project(mul(x, x), 12); }},
      {"add_row", {4}, 1, [&](const Tensor& x) { return project(add_row(o34, x), 13); }},
      {"mul_row", {4}, 1, [&](const Tensor& x) { return project(mul_row(o34, x), 14); }},
      {"mul_row(x)", {3, 4}, 1, [&](const Tensor& x) { return project(mul_row(x, r4), 15); }},
      {"scale", {3, 4}, 1, [](const Tensor& x) { return project(scale(x, -2.5f), 16); }},
      {"add_scalar", {3, 4}, 1, [](const Tensor& x) { return project(add_scalar(x, 0.3f), 17); }},
      {"neg", {3, 4}, 1, [](const Tensor& x) { return project(neg(x), 18); }},
      {"exp", {2, 5}, 0.5, [](const Tensor& x) { return project(exp(x), 19); }},
      {"log", {2, 5}, 1, [](const Tensor& x) { return project(log(add_scalar(mul(x, x), 0.5f)), 20); }},
      {"sigmoid", {2, 5}, 1, [](const Tensor& x) { return project(sigmoid(x), 21); }},
      {"log_sigmoid", {2, 5}, 3, [](const Tensor& x) { return project(log_sigmoid(x), 22); }},
      {"gelu", {2, 5}, 2, [](const Tensor& x) { return project(gelu(x), 23); }},
      {"sum", {3, 3}, 1, [](const Tensor& x) { return sum(x); }},
      {"mean", {3, 3}, 1, [](const Tensor& x) { return mean(x); }},
      {"l1_norm", {6}, 1, [](const Tensor& x) { return l1_norm(x); }},
      {"l2_norm", {6}, 1, [](const Tensor& x) { return l2_norm(x); }},
      {"softmax", {3, 6}, 1, [](const Tensor& x) { return project(softmax(x), 24); }},
      {"log_softmax", {3, 6}, 1, [](const Tensor& x) { return project(log_softmax(x), 25); }},
      {"rms_norm", {3, 6}, 1, [](const Tensor& x) { return project(rms_norm(x), 26); }},
      {"matmul(a)", {2, 4}, 1, [&](const Tensor& x) { return project(matmul(x, b43), 27); }},
      {"matmul(b)", {4, 3}, 1, [&](const Tensor& x) { return project(matmul(a24, x), 28); }},
      {"bmm(a)", {2, 3, 4}, 1, [&](const Tensor& x) { return project(bmm(x, bb), 29); }},
      {"bmm(b)", {2, 3, 5}, 1, [&](const Tensor& x) { return project(bmm(bb, x), 30); }},
      {"transpose", {2, 3, 4}, 1, [](const Tensor& x) { return project(transpose(x), 31); }},
      {"embed", {5, 3}, 1, [&](const Tensor& x) { return project(embed(x, ids), 32); }},
      {"pick", {4, 3}, 1, [&](const Tensor& x) { return project(pick(x, cols), 33); }},
      {"concat", {3}, 1, [&](const Tensor& x) { return project(concat({x, v2, x}), 34); }},
      {"concat_rows", {2, 4}, 1, [&](const Tensor& x) { return project(concat_rows({row14, x}), 35); }},
      {"slice_rows", {4, 3}, 1, [](const Tensor& x) { return project(slice_rows(x, 1, 3), 36); }},
      {"reshape", {2, 6}, 1, [](const Tensor& x) { return project(reshape(x, {3, 4}), 37); }},
      {"split_heads", {3, 4}, 1, [](const Tensor& x) { return project(split_heads(x, 2), 38); }},
      {"merge_heads", {2, 3, 2}, 1, [](const Tensor& x) { return project(merge_heads(x), 39); }},
      {"cross_entropy_loss", {3, 5}, 1, [&](const Tensor& x) { return cross_entropy_loss(x, targets, mask); }},
      {"dpo_loss", {3}, 1, [&](const Tensor& x) { return dpo_loss(x, pr, rc, rr, 0.5); }},
  };

  int cases = 0, failed = 0;
  double worst = 0.0;
  std::string worst_name;
  for (const Primitive& p : prims) {
    for (int c = 0; c < 10; ++c) {
      const GradCheckReport r = finite_diff_check(p.f, rand_t(p.shape, 1000 + c, p.sd));
      ++cases;
      if (!r.passed) ++failed;
      if (r.max_rel_error > worst) worst = r.max_rel_error, worst_name = p.name;
    }
  }

  // Full toy transformer, loss w.r.t. one head's A and one head's v.
  ModelConfig mc;
  Rng init(42);
  const Model m(mc, init);
  const std::vector<Continuation> items{{{2, 7, 41, 16, 52, 6, 4, 41, 52, 5}, {77, 1}}, {{2, 9, 60, 26, 61, 5}, {90}}};
  int model_cases = 0, model_failed = 0;
  for (int c = 0; c < 10; ++c) {
    const HeadId id{c % mc.n_layers, (3 * c) % mc.n_heads};
    Rng rng(500 + c);
    ScalingParams a = ScalingParams::init(mc, 0.3, rng);
    auto fa = [&](const Tensor& x) {
      ScalingParams p = a;
      p.A[id] = x;
      return continuation_loss(m, items, p.hooks(mc));
    };
    const GradCheckReport ra = finite_diff_check(fa, randn({static_cast<std::size_t>(mc.d_head)}, 0.0, 0.3, rng));
    OffsetParams v = OffsetParams::init({id, {(id.layer + 1) % mc.n_layers, id.head}}, mc, 0.3, rng);
    auto fv = [&](const Tensor& x) {
      OffsetParams p = v;
      p.v[id] = x;
      return continuation_loss(m, items, p.hooks(mc));
    };
    const GradCheckReport rv = finite_diff_check(fv, randn({static_cast<std::size_t>(mc.d_head)}, 0.0, 0.3, rng));
    for (const GradCheckReport* r : {&ra, &rv}) {
      ++model_cases;
      if (!r->passed) ++model_failed;
      if (r->max_rel_error > worst) worst = r->max_rel_error, worst_name = "model loss";
    }
  }
  const double secs = seconds_since(t0);
  verdict(1, "autodiff gradcheck", failed == 0 && model_failed == 0 && secs < 120.0,
          std::to_string(prims.size()) + " primitives x 10 cases + model loss w.r.t. A and v x 10 cases each; " +
              std::to_string(failed + model_failed) + "/" + std::to_string(cases + model_cases) +
              " failed; worst rel err " + fmt(worst, 6) + " (" + worst_name + "), tol 1e-3; " + fmt(secs, 1) +
              " s (< 120 s)");
}

// ---------------------------------------------------------------- 2. identity

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

void criterion_identity() {
  ModelConfig mc;
  bool ok = true;
  int checks = 0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng init(seed);
    const Model m(mc, init);
    const Tokens toks{2, 7, 41, 16, 52, 6, 52, 17, 63, 6, 4, 41, 63, 5};
    const Tensor plain = forward(m, toks).logits;
    InterventionSet zeros(15.0);
    for (const HeadId& id : all_heads(mc)) zeros.add(id, std::vector<float>(static_cast<std::size_t>(mc.d_head), 0.0f));
    Rng rng(seed);
    const ScalingParams a = ScalingParams::init(mc, 0.0, rng);
    ok = ok && bitwise_equal(plain, forward(m, toks, to_hooks(InterventionSet(1.0), mc)).logits);
    ok = ok && bitwise_equal(plain, forward(m, toks, to_hooks(zeros, mc)).logits);
    ok = ok && bitwise_equal(plain, forward(m, toks, a.hooks(mc)).logits);
    checks += 3;
  }
  verdict(2, "identity interventions", ok,
          std::to_string(checks) + " forwards (empty set, all-zero offsets at alpha 15, all-zero A) bitwise equal to plain");
}

// ---------------------------------------------------------------- 3. params

void criterion_params() {
  const long long a = param_count(96, 128), b = param_count(160, 128), c = param_count(48, 256);
  const int k1 = heads_for_fraction(0.10, 32, 32, 16), k2 = heads_for_fraction(0.10, 40, 40, 16),
            k3 = heads_for_fraction(0.10, 28, 16, 16);
  verdict(3, "parameter accounting", a == 12288 && b == 20480 && c == 12288 && k1 == 96 && k2 == 160 && k3 == 48,
          "param_count(96,128)=" + std::to_string(a) + " param_count(160,128)=" + std::to_string(b) +
              " param_count(48,256)=" + std::to_string(c) + "; 10% presets K=" + std::to_string(k1) + "/" +
              std::to_string(k2) + "/" + std::to_string(k3));
}

// ---------------------------------------------------------------- 4. metrics

// Token log-probabilities recomputed from full single-sequence forwards.
double brute_logprob(const Model& m, const Tokens& prompt, const Tokens& cont) {
  Tokens seq = prompt;
  seq.insert(seq.end(), cont.begin(), cont.end());
  const Tensor logits = forward(m, seq).logits;
  const std::size_t V = logits.dim(1);
  long double total = 0.0L;
  for (std::size_t j = 0; j < cont.size(); ++j) {
    const auto row = logits.data().subspan((prompt.size() - 1 + j) * V, V);
    long double z = 0.0L;
    for (float x : row) z += std::exp(static_cast<long double>(x));
    total += static_cast<long double>(row[static_cast<std::size_t>(cont[j])]) - std::log(z);
  }
  return static_cast<double>(total);
}

Tokens brute_decode(const Model& m, const Tokens& prompt, std::size_t max_new) {
  Tokens seq = prompt, out;
  while (out.size() < max_new) {
    const Tensor logits = forward(m, seq).logits;
    const std::size_t V = logits.dim(1), last = logits.dim(0) - 1;
    int best = 0;
    for (std::size_t t = 1; t < V; ++t)
      if (logits.data()[last * V + t] > logits.data()[last * V + static_cast<std::size_t>(best)]) best = static_cast<int>(t);
    if (best == vocab::kEos) break;
    out.push_back(best);
    seq.push_back(best);
  }
  return out;
}

double brute_emd(const std::vector<HeadId>& a, const std::vector<HeadId>& b) {
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

void criterion_metrics() {
  ModelConfig mc;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.d_model = 8;
  mc.d_head = 4;
  mc.mlp_hidden = 16;
  Rng init(9);
  const Model m(mc, init);
  Rng rng(10);
  auto tok = [&] { return 40 + static_cast<int>(rng.uniform_int(100)); };

  // MC1 / MC2 on 10 questions with 2..4 candidates.
  std::vector<TaskExample> mcq;
  for (int q = 0; q < 10; ++q) {
    TaskExample e;
    e.prompt = {vocab::kBos, vocab::kStyleTruth, tok(), vocab::kAnswer};
    e.gold = {tok(), tok()};
    for (int n = 0, k = 1 + q % 3; n < k; ++n) e.negatives.push_back({tok(), tok()});
    mcq.push_back(e);
  }
  const EvalReport mr = eval_mc(m, Hooks{}, mcq);
  double mc1 = 0.0, mc2 = 0.0;
  for (const TaskExample& e : mcq) {
    const double g = brute_logprob(m, e.prompt, e.gold);
    long double z = std::exp(static_cast<long double>(g));
    bool best = true;
    for (const Tokens& n : e.negatives) {
      const double l = brute_logprob(m, e.prompt, n);
      z += std::exp(static_cast<long double>(l));
      if (l >= g) best = false;
    }
    mc1 += best;
    mc2 += static_cast<double>(std::exp(static_cast<long double>(g)) / z);
  }
  mc1 /= 10.0;
  mc2 /= 10.0;
  const bool mc_ok = mr.mc1 == mc1 && std::abs(mr.mc2 - mc2) <= 1e-9;

  // EM on 10 prompts, half with the model's own greedy output as gold.
  std::vector<TaskExample> emq;
  int em_hits = 0;
  for (int i = 0; i < 10; ++i) {
    TaskExample e;
    e.prompt = {vocab::kBos, vocab::kPlain, tok(), tok(), vocab::kAnswer};
    const Tokens pred = brute_decode(m, e.prompt, 3);
    e.gold = (i % 2 == 0 && pred.size() == 2) ? pred : Tokens{tok(), tok()};
    em_hits += brute_decode(m, e.prompt, e.gold.size() + 1) == e.gold;
    emq.push_back(e);
  }
  const double em_oracle = em_hits / 10.0;
  const bool em_ok = eval_exact_match(m, Hooks{}, emq).em == em_oracle;

  // Jaccard and EMD on random head sets of up to 10 heads over a 5x2 grid.
  bool jac_ok = true, emd_ok = true;
  double emd_err = 0.0;
  for (int t = 0; t < 300; ++t) {
    const std::size_t k = 1 + rng.uniform_int(t < 150 ? 10 : 7);
    auto draw = [&] {
      std::vector<HeadId> out;
      for (std::size_t i : rng.sample_without_replacement(10, k)) out.push_back({static_cast<int>(i) / 2, static_cast<int>(i) % 2});
      return out;
    };
    const auto a = draw(), b = draw();
    int hits = 0;
    for (const HeadId& h : a)
      hits += std::count(b.begin(), b.end(), h) > 0;
    jac_ok = jac_ok && jaccard(a, b) == static_cast<double>(hits) / static_cast<double>(a.size());
    if (t >= 150) {
      const double err = std::abs(emd(layer_distribution(a, 5), layer_distribution(b, 5)) - brute_emd(a, b));
      emd_err = std::max(emd_err, err);
      emd_ok = emd_ok && err <= 1e-9;
    }
  }
  verdict(4, "metric oracles", mc_ok && em_ok && jac_ok && emd_ok,
          "MC1 " + fmt(mr.mc1) + " vs " + fmt(mc1) + ", MC2 |diff| " + fmt(std::abs(mr.mc2 - mc2), 12) + ", EM " +
              fmt(eval_exact_match(m, Hooks{}, emq).em) + " vs " + fmt(em_oracle) + ", Jaccard exact on 300 pairs: " +
              (jac_ok ? "yes" : "no") + ", EMD max |diff| " + fmt(emd_err, 12) + " on 150 pairs");
}

// ---------------------------------------------------------------- toy experiments

struct TaskRun {
  TaskKind task;
  double zero_shot = 0.0;
  std::vector<double> lofit, random, k1;
  std::vector<std::vector<HeadId>> heads;
  std::map<double, std::vector<int>> nonzero;  // lambda -> per-seed count
  std::map<double, std::vector<double>> l1;     // lambda -> per-seed sum |A|
  double seconds = 0.0;
};

int count_nonzero(const HeadScoreTable& t) {
  int n = 0;
  for (const auto& [id, s] : t.scores) n += s > 1e-3;
  return n;
}

TaskRun run_task(const Model& m, const cli::ExperimentConfig& cfg, TaskKind task) {
  TaskRun r;
  r.task = task;
  const TaskData d = generate_task(task, World::make(cfg.world_seed, cfg.kb_size, cfg.truth_n), cfg.splits);
  const TuningData td = cli::tuning_data(d);
  r.zero_shot = cli::headline(cli::evaluate(m, Hooks{}, d));
  const int k = cfg.resolved_k();
  const int k_small = heads_for_fraction(0.01, cfg.model.n_layers, cfg.model.n_heads);
  for (std::uint64_t seed : cfg.seeds) {
    const auto t0 = Clock::now();
    const SelectionConfig sel = cli::selection_config(cfg, k, seed);
    const TrainConfig sc = cli::seeded(cfg.scaling, seed), bc = cli::seeded(cfg.bias, seed);
    const LofitResult res = tune_scaling_then_biases(m, td, sel, sc, bc, cfg.sigma_v);
    r.seconds += seconds_since(t0);
    r.lofit.push_back(cli::headline(cli::evaluate(m, res.offsets.hooks(m.config()), d)));
    r.heads.push_back(res.targets);
    r.nonzero[cfg.lambda].push_back(count_nonzero(res.scores));
    r.l1[cfg.lambda].push_back(l1_penalty(res.scaling.parameters()).item());

    const OffsetParams rv = tune_biases(m, select_random(m.config(), k, seed), td, bc, cfg.sigma_v);
    r.random.push_back(cli::headline(cli::evaluate(m, rv.hooks(m.config()), d)));
    const OffsetParams kv = tune_biases(m, select_top_k(res.scores, k_small), td, bc, cfg.sigma_v);
    r.k1.push_back(cli::headline(cli::evaluate(m, kv.hooks(m.config()), d)));

    std::ostringstream os;
    os << to_string(task) << " seed " << seed << ": heads";
    for (const HeadId& h : res.targets) os << ' ' << to_string(h);
    os << " | lofit " << fmt(r.lofit.back()) << " random " << fmt(r.random.back()) << " K=" << k_small << " "
       << fmt(r.k1.back()) << " | " << fmt(seconds_since(t0), 0) << " s";
    info(os.str());
  }
  return r;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "/" : "") + fmt(v[i], 3);
  return s;
}

// ---------------------------------------------------------------- 11. CLI reruns

std::map<std::string, std::string> hash_outputs(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string name = fs::relative(e.path(), dir).string();
    if (name.size() >= 12 && name.substr(name.size() - 12) == ".timing.json") continue;
    out[name] = file_hash(e.path().string());
  }
  return out;
}

bool run_cli_suite(const fs::path& dir, std::string& failed_cmd) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cfg = std::string(LOFIT_DEMO_DIR) + "/configs/tiny.json";
  const std::string base = std::string(LOFIT_CLI_PATH) + " ";
  const std::string common = " -q -c " + cfg + " -o " + dir.string();
  const std::vector<std::string> cmds{
      "pretrain" + common,
      "select" + common,
      "tune" + common + " --heads " + (dir / "heads.json").string(),
      "eval" + common + " --baselines --intervention " + (dir / "intervention.json").string(),
      "sweep-k" + common,
      "transfer" + common,
      "analyze" + common + " --heads " + (dir / "heads.json").string() + " --intervention " +
          (dir / "intervention.json").string(),
  };
  for (const std::string& c : cmds) {
    if (std::system((base + c + " > /dev/null 2>&1").c_str()) != 0) {
      failed_cmd = c.substr(0, c.find(' '));
      return false;
    }
  }
  return true;
}

}  // namespace

int main() {
  const auto start = Clock::now();
  criterion_gradcheck();
  criterion_identity();
  criterion_params();
  criterion_metrics();

  // Base model for the toy experiments.
  cli::ExperimentConfig cfg;
  const World world = World::make(cfg.world_seed, cfg.kb_size, cfg.truth_n);
  const std::string ckpt = "acceptance_base.lft";
  Model base = [&] {
    if (fs::exists(ckpt)) {
      info("using cached base checkpoint " + ckpt + " (" + file_hash(ckpt).substr(0, 16) + ")");
      return load_model(ckpt);
    }
    info("pretraining toy base model (this takes a while on one core)");
    const auto t0 = Clock::now();
    Model m = pretrain_base(cfg.model, world, cfg.pretrain, nullptr, [](const PretrainEpoch& e) {
      info("  epoch " + std::to_string(e.epoch) + " dev loss " + fmt(e.dev_loss));
    });
    save_model(ckpt, m);
    info("pretraining took " + fmt(seconds_since(t0), 0) + " s");
    return m;
  }();
  std::map<std::string, double> gate;
  bool gate_ok = true;
  for (TaskKind t : {TaskKind::relations, TaskKind::counterfactual, TaskKind::truthfulness}) {
    gate[to_string(t)] = eval_exact_match(base, Hooks{}, generate_task(t, world, cfg.splits).probes).em;
    gate_ok = gate_ok && gate[to_string(t)] > 0.9;
  }
  info("pretrain gate (probe EM > 0.9): relations " + fmt(gate["relations"]) + ", counterfactual " +
       fmt(gate["counterfactual"]) + ", truthfulness " + fmt(gate["truthfulness"]));

  const std::string ckpt_hash = file_hash(ckpt);
  std::vector<std::vector<float>> before;
  for (const auto& [name, t] : base.named_parameters()) before.push_back(t.to_vector());

  // 5, 6, 8, 9: LoFiT vs zero-shot, random heads, seed stability, K curve.
  std::vector<TaskRun> runs;
  for (TaskKind t : {TaskKind::relations, TaskKind::counterfactual}) runs.push_back(run_task(base, cfg, t));

  {
    bool ok = gate_ok;
    std::string detail;
    for (const TaskRun& r : runs) {
      const double gain = mean(r.lofit) - r.zero_shot;
      ok = ok && gain >= 0.20 && r.seconds < 1800.0;
      detail += to_string(r.task) + ": 0-shot " + fmt(r.zero_shot, 3) + " -> LoFiT " + join(r.lofit) + " (gain " +
                fmt(100 * gain, 1) + " pts, " + fmt(r.seconds / 60.0, 1) + " min); ";
    }
    verdict(5, "LoFiT improves EM over 0-shot by >= 20 pts", ok, detail + "gate " + (gate_ok ? "met" : "NOT met"));
  }
  {
    std::vector<double> lo, ra;
    std::string detail;
    for (const TaskRun& r : runs) {
      lo.insert(lo.end(), r.lofit.begin(), r.lofit.end());
      ra.insert(ra.end(), r.random.begin(), r.random.end());
      detail += to_string(r.task) + " lofit " + join(r.lofit) + " random " + join(r.random) + "; ";
    }
    verdict(6, "LoFiT heads >= random heads", mean(lo) >= mean(ra),
            detail + "mean " + fmt(mean(lo)) + " vs " + fmt(mean(ra)));
  }

  // 7: sparsity over the lambda grid (relations, step 1 only).
  {
    const TaskData d = generate_task(TaskKind::relations, world, cfg.splits);
    const TuningData td = cli::tuning_data(d);
    TaskRun& rel = runs.front();
    bool ok = true;
    std::string detail;
    for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
      const std::uint64_t seed = cfg.seeds[si];
      std::vector<int> counts;
      std::vector<double> norms;
      for (double lambda : {0.0, 5e-4, 5e-3, 5e-2}) {
        if (lambda == cfg.lambda) {
          counts.push_back(rel.nonzero.at(lambda)[si]);
          norms.push_back(rel.l1.at(lambda)[si]);
          continue;
        }
        SelectionConfig sel = cli::selection_config(cfg, cfg.resolved_k(), seed);
        sel.lambda = lambda;
        const ScalingParams a = train_scaling_factors(base, td, sel, cli::seeded(cfg.scaling, seed));
        counts.push_back(count_nonzero(score_by_norm(a.A, SelectionMethod::lofit_norm)));
        norms.push_back(l1_penalty(a.parameters()).item());
      }
      for (std::size_t i = 1; i < counts.size(); ++i) ok = ok && counts[i] <= counts[i - 1];
      detail += "seed " + std::to_string(seed) + ": " + std::to_string(counts[0]) + "/" + std::to_string(counts[1]) +
                "/" + std::to_string(counts[2]) + "/" + std::to_string(counts[3]) + " (sum|A| " + join(norms) + "); ";
    }
    verdict(7, "L1 sparsity monotone in lambda", ok,
            detail + "heads with ||A||_2 > 1e-3 at lambda 0/5e-4/5e-3/5e-2 out of " +
                std::to_string(base.config().total_heads()));
  }
  {
    bool ok = true;
    std::string detail;
    for (const TaskRun& r : runs) {
      const double j01 = jaccard(r.heads[0], r.heads[1]);
      ok = ok && j01 >= 0.5;
      detail += to_string(r.task) + " J(0,1)=" + fmt(j01, 3);
      for (std::size_t a = 0; a < r.heads.size(); ++a)
        for (std::size_t b = a + 1; b < r.heads.size(); ++b)
          if (a + b > 1) detail += " J(" + std::to_string(a) + "," + std::to_string(b) + ")=" + fmt(jaccard(r.heads[a], r.heads[b]), 3);
      detail += "; ";
    }
    verdict(8, "selection stable across seeds", ok, detail + "K = " + std::to_string(cfg.resolved_k()));
  }
  {
    std::vector<double> k10, k1;
    std::string detail;
    for (const TaskRun& r : runs) {
      k10.insert(k10.end(), r.lofit.begin(), r.lofit.end());
      k1.insert(k1.end(), r.k1.begin(), r.k1.end());
      detail += to_string(r.task) + " 10% " + join(r.lofit) + " 1% " + join(r.k1) + "; ";
    }
    verdict(9, "EM at K=10% >= EM at K=1%", mean(k10) >= mean(k1), detail + "mean " + fmt(mean(k10)) + " vs " + fmt(mean(k1)));
  }

  // 10: DPO on the truthfulness task.
  {
    cli::ExperimentConfig tc = cfg;
    tc.task = TaskKind::truthfulness;
    const TaskData d = generate_task(TaskKind::truthfulness, world, tc.splits);
    const TuningData td = cli::tuning_data(d);
    const double base_mc1 = cli::headline(cli::evaluate(base, Hooks{}, d));
    std::vector<double> mc1;
    for (std::uint64_t seed : tc.seeds) {
      const LofitResult res = tune_scaling_then_biases(base, td, cli::selection_config(tc, tc.resolved_k(), seed),
                                                       cli::seeded(tc.scaling, seed), cli::seeded(tc.bias, seed), tc.sigma_v);
      mc1.push_back(cli::headline(cli::evaluate(base, res.offsets.hooks(base.config()), d)));
      info("truthfulness seed " + std::to_string(seed) + ": MC1 " + fmt(mc1.back()));
    }
    TrainConfig one = tc.bias;
    one.epochs = 1;
    TrainLog log;
    tune_biases(base, select_random(base.config(), tc.resolved_k(), 0), td, one, 0.0, &log);
    const double ln2_err = std::max(std::abs(dpo_loss_value(-7.5, -3.25, -7.5, -3.25, 0.5) - std::log(2.0)),
                                    std::abs(log.front().loss - std::log(2.0)));
    const double gain = mean(mc1) - base_mc1;
    verdict(10, "DPO improves MC1 by >= 10 pts", gain >= 0.10 && ln2_err <= 1e-6,
            "base MC1 " + fmt(base_mc1, 3) + " -> " + join(mc1) + " (gain " + fmt(100 * gain, 1) +
                " pts); |DPO loss at reference - ln 2| = " + fmt(ln2_err, 9));
  }

  // 11: frozen base and CLI determinism.
  {
    bool frozen = file_hash(ckpt) == ckpt_hash;
    const auto after = base.named_parameters();
    for (std::size_t i = 0; i < after.size(); ++i) frozen = frozen && after[i].second.to_vector() == before[i];
    const fs::path tmp = fs::temp_directory_path() / "lofit_acceptance_resave.lft";
    save_model(tmp.string(), base);
    frozen = frozen && file_hash(tmp.string()) == ckpt_hash;
    fs::remove(tmp);

    const fs::path dir = fs::temp_directory_path() / "lofit_acceptance_cli";
    std::string failed_cmd;
    bool cli_ok = run_cli_suite(dir, failed_cmd);
    const auto first = cli_ok ? hash_outputs(dir) : std::map<std::string, std::string>{};
    cli_ok = cli_ok && run_cli_suite(dir, failed_cmd);
    const auto second = cli_ok ? hash_outputs(dir) : std::map<std::string, std::string>{};
    cli_ok = cli_ok && first == second && !first.empty();
    fs::remove_all(dir);
    verdict(11, "frozen base and deterministic CLI", frozen && cli_ok,
            std::string("base checkpoint hash unchanged after all tuning: ") + (frozen ? "yes" : "no") +
                "; 7 CLI commands rerun, " + std::to_string(first.size()) + " output files " +
                (cli_ok ? "identical" : ("differ" + (failed_cmd.empty() ? "" : " (failed: " + failed_cmd + ")"))));
  }

  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " criteria FAILED") << " in "
            << fmt(seconds_since(start) / 60.0, 1) << " min" << std::endl;
  return failures == 0 ? 0 : 1;
}
