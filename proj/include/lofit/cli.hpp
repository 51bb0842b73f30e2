#pragma once

// Experiment driver behind the `lofit` executable. Each command reads a JSON
// experiment config, writes its artifacts into an output directory and
// returns a process exit code (0 ok, 2 configuration error, 3 numerical
// failure). Wall-clock times go to a separate *.timing.json so every other
// output is a pure function of the inputs.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lofit/checkpoint.hpp"
#include "lofit/error.hpp"
#include "lofit/intervene.hpp"
#include "lofit/localize.hpp"
#include "lofit/model.hpp"
#include "lofit/pipeline.hpp"
#include "lofit/tasks.hpp"
#include "lofit/train.hpp"

namespace lofit::cli {

using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

// ---------------------------------------------------------------- config

struct ExperimentConfig {
  ModelConfig model;
  TaskKind task = TaskKind::relations;

  std::uint64_t world_seed = 1234;
  int kb_size = 48;
  int truth_n = 160;
  SplitSizes splits;

  PretrainConfig pretrain;

  SelectionMethod method = SelectionMethod::lofit_norm;
  std::optional<int> K;  // overrides fraction when set
  double fraction = 0.1;
  int granularity = 1;
  double lambda = 5e-3;
  double sigma_A = 0.001;

  TrainConfig scaling;
  TrainConfig bias;
  double sigma_v = 0.001;

  double iti_alpha = 15.0;
  double repe_alpha = 5.0;
  int repe_layer = -1;  // -1: middle of the residual stream

  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<double> sweep_fractions{0.01, 0.03, 0.1, 0.2};
  std::vector<TaskKind> transfer_tasks{TaskKind::relations, TaskKind::counterfactual, TaskKind::truthfulness};

  std::string checkpoint;  // empty: <out>/base.lft

  ExperimentConfig() {
    scaling.lr = 1e-2;
    scaling.epochs = 40;
    bias.lr = 5e-2;
    bias.epochs = 40;
  }

  int resolved_k() const {
    return K ? *K : heads_for_fraction(fraction, model.n_layers, model.n_heads, granularity);
  }

  int resolved_repe_layer() const { return repe_layer >= 0 ? repe_layer : model.n_layers / 2; }

  void validate() const {
    model.validate();
    if (seeds.empty()) throw ConfigError("config: seeds must be nonempty");
    if (K && (*K <= 0 || *K > model.total_heads())) throw ConfigError("config: K outside [1, L*H]");
    if (!K && (!(fraction > 0.0) || fraction > 1.0)) throw ConfigError("config: selection fraction must be in (0, 1]");
    if (lambda < 0.0) throw ConfigError("config: lambda must be nonnegative");
    for (std::size_t i = 1; i < sweep_fractions.size(); ++i)
      if (sweep_fractions[i] < sweep_fractions[i - 1]) throw ConfigError("config: sweep fractions must be ascending");
    try {
      scaling.validate();
      bias.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
};

namespace detail {

inline json train_to_json(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"weight_decay", t.weight_decay},
          {"adam_eps", t.adam_eps},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"beta", t.beta}};
}

/// Reads `key` into `field` if present.
template <class T>
void read(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("config: unknown key '" + key + "' in " + where);
  }
}

inline TrainConfig train_from_json(const json& j, TrainConfig t, const std::string& where) {
  reject_unknown(j, {"lr", "epochs", "batch_size", "weight_decay", "adam_eps", "beta1", "beta2", "beta"}, where);
  read(j, "lr", t.lr);
  read(j, "epochs", t.epochs);
  read(j, "batch_size", t.batch_size);
  read(j, "weight_decay", t.weight_decay);
  read(j, "adam_eps", t.adam_eps);
  read(j, "beta1", t.beta1);
  read(j, "beta2", t.beta2);
  read(j, "beta", t.beta);
  return t;
}

}  // namespace detail

/// Every field, defaults included.
inline json config_to_json(const ExperimentConfig& c) {
  json tasks = json::array();
  for (TaskKind t : c.transfer_tasks) tasks.push_back(to_string(t));
  const PretrainConfig& p = c.pretrain;
  return {
      {"task", to_string(c.task)},
      {"model", model_config_to_json(c.model)},
      {"world", {{"seed", c.world_seed}, {"kb_size", c.kb_size}, {"truth_n", c.truth_n}}},
      {"splits", {{"train", c.splits.train}, {"dev", c.splits.dev}, {"test", c.splits.test}, {"probes", c.splits.probes}}},
      {"pretrain",
       {{"batch_size", p.batch_size},
        {"steps_per_epoch", p.steps_per_epoch},
        {"max_epochs", p.max_epochs},
        {"patience", p.patience},
        {"min_improvement", p.min_improvement},
        {"lr", p.lr},
        {"warmup_steps", p.warmup_steps},
        {"weight_decay", p.weight_decay},
        {"dev_items", p.dev_items},
        {"seed", p.seed},
        {"mix", {{"relations", p.mix.relations}, {"counterfactual", p.mix.counterfactual}, {"truthfulness", p.mix.truthfulness},
                 {"plain_edit_follow", p.mix.plain_edit_follow}}}}},
      {"selection",
       {{"method", to_string(c.method)},
        {"K", c.K ? json(*c.K) : json(nullptr)},
        {"resolved_K", c.resolved_k()},
        {"fraction", c.fraction},
        {"granularity", c.granularity},
        {"lambda", c.lambda},
        {"sigma_A", c.sigma_A}}},
      {"training", {{"scaling", detail::train_to_json(c.scaling)}, {"bias", detail::train_to_json(c.bias)}, {"sigma_v", c.sigma_v}}},
      {"steering", {{"iti_alpha", c.iti_alpha}, {"repe_alpha", c.repe_alpha}, {"repe_layer", c.resolved_repe_layer()}}},
      {"seeds", c.seeds},
      {"sweep", {{"fractions", c.sweep_fractions}}},
      {"transfer", {{"tasks", tasks}}},
      {"paths", {{"checkpoint", c.checkpoint}}},
  };
}

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  try {
    detail::reject_unknown(j, {"task", "model", "world", "splits", "pretrain", "selection", "training", "steering", "seeds",
                               "sweep", "transfer", "paths"},
                           "config");
    if (j.contains("task")) c.task = parse_task(j.at("task").get<std::string>());
    if (j.contains("model")) {
      detail::reject_unknown(j.at("model"),
                             {"n_layers", "n_heads", "d_model", "d_head", "vocab_size", "max_seq", "mlp_hidden"}, "model");
      c.model = model_config_from_json(j.at("model"), c.model);
      if (!j.at("model").contains("d_head") && c.model.n_heads > 0) c.model.d_head = c.model.d_model / c.model.n_heads;
    }
    if (j.contains("world")) {
      const json& w = j.at("world");
      detail::reject_unknown(w, {"seed", "kb_size", "truth_n"}, "world");
      detail::read(w, "seed", c.world_seed);
      detail::read(w, "kb_size", c.kb_size);
      detail::read(w, "truth_n", c.truth_n);
    }
    if (j.contains("splits")) {
      const json& s = j.at("splits");
      detail::reject_unknown(s, {"train", "dev", "test", "probes"}, "splits");
      detail::read(s, "train", c.splits.train);
      detail::read(s, "dev", c.splits.dev);
      detail::read(s, "test", c.splits.test);
      detail::read(s, "probes", c.splits.probes);
    }
    if (j.contains("pretrain")) {
      const json& p = j.at("pretrain");
      detail::reject_unknown(p, {"batch_size", "steps_per_epoch", "max_epochs", "patience", "min_improvement", "lr",
                                 "warmup_steps", "weight_decay", "dev_items", "seed", "mix"},
                             "pretrain");
      PretrainConfig& pc = c.pretrain;
      detail::read(p, "batch_size", pc.batch_size);
      detail::read(p, "steps_per_epoch", pc.steps_per_epoch);
      detail::read(p, "max_epochs", pc.max_epochs);
      detail::read(p, "patience", pc.patience);
      detail::read(p, "min_improvement", pc.min_improvement);
      detail::read(p, "lr", pc.lr);
      detail::read(p, "warmup_steps", pc.warmup_steps);
      detail::read(p, "weight_decay", pc.weight_decay);
      detail::read(p, "dev_items", pc.dev_items);
      detail::read(p, "seed", pc.seed);
      if (p.contains("mix")) {
        detail::reject_unknown(p.at("mix"), {"relations", "counterfactual", "truthfulness", "plain_edit_follow"},
                                 "pretrain.mix");
        detail::read(p.at("mix"), "relations", pc.mix.relations);
        detail::read(p.at("mix"), "counterfactual", pc.mix.counterfactual);
        detail::read(p.at("mix"), "truthfulness", pc.mix.truthfulness);
        detail::read(p.at("mix"), "plain_edit_follow", pc.mix.plain_edit_follow);
      }
    }
    if (j.contains("selection")) {
      const json& s = j.at("selection");
      detail::reject_unknown(s, {"method", "K", "resolved_K", "fraction", "granularity", "lambda", "sigma_A"}, "selection");
      if (s.contains("method")) c.method = parse_selection_method(s.at("method").get<std::string>());
      if (s.contains("K") && !s.at("K").is_null()) c.K = s.at("K").get<int>();
      detail::read(s, "fraction", c.fraction);
      detail::read(s, "granularity", c.granularity);
      detail::read(s, "lambda", c.lambda);
      detail::read(s, "sigma_A", c.sigma_A);
    }
    if (j.contains("training")) {
      const json& t = j.at("training");
      detail::reject_unknown(t, {"scaling", "bias", "sigma_v"}, "training");
      if (t.contains("scaling")) c.scaling = detail::train_from_json(t.at("scaling"), c.scaling, "training.scaling");
      if (t.contains("bias")) c.bias = detail::train_from_json(t.at("bias"), c.bias, "training.bias");
      detail::read(t, "sigma_v", c.sigma_v);
    }
    if (j.contains("steering")) {
      const json& s = j.at("steering");
      detail::reject_unknown(s, {"iti_alpha", "repe_alpha", "repe_layer"}, "steering");
      detail::read(s, "iti_alpha", c.iti_alpha);
      detail::read(s, "repe_alpha", c.repe_alpha);
      detail::read(s, "repe_layer", c.repe_layer);
    }
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("sweep")) {
      detail::reject_unknown(j.at("sweep"), {"fractions"}, "sweep");
      detail::read(j.at("sweep"), "fractions", c.sweep_fractions);
    }
    if (j.contains("transfer")) {
      detail::reject_unknown(j.at("transfer"), {"tasks"}, "transfer");
      if (j.at("transfer").contains("tasks")) {
        c.transfer_tasks.clear();
        for (const auto& t : j.at("transfer").at("tasks")) c.transfer_tasks.push_back(parse_task(t.get<std::string>()));
      }
    }
    if (j.contains("paths")) {
      detail::reject_unknown(j.at("paths"), {"checkpoint"}, "paths");
      detail::read(j.at("paths"), "checkpoint", c.checkpoint);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open " + path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path);
  f << j.dump(2) << '\n';
}

inline ExperimentConfig load_config(const std::string& path) { return config_from_json(read_json_file(path)); }

// ---------------------------------------------------------------- options

struct Options {
  std::string config_path;
  std::string out = "out";
  std::vector<std::string> heads;
  std::vector<std::string> interventions;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::optional<std::string> source;
  std::optional<std::string> target;
  bool baselines = false;
  bool quiet = false;
};

// ---------------------------------------------------------------- shared state

/// Everything a command derives from the config: the world, the task data and
/// (if present) the base model.
struct Session {
  ExperimentConfig cfg;
  Options opts;
  World world;
  std::map<std::string, std::string> input_hashes;

  Session(ExperimentConfig c, Options o) : cfg(std::move(c)), opts(std::move(o)) {
    world = World::make(cfg.world_seed, cfg.kb_size, cfg.truth_n, cfg.model.vocab_size);
    std::filesystem::create_directories(opts.out);
    if (!opts.config_path.empty()) input_hashes[opts.config_path] = file_hash(opts.config_path);
  }

  std::string checkpoint_path() const {
    if (!opts.checkpoint.empty()) return opts.checkpoint;
    if (!cfg.checkpoint.empty()) return cfg.checkpoint;
    return (std::filesystem::path(opts.out) / "base.lft").string();
  }

  std::string out(const std::string& name) const { return (std::filesystem::path(opts.out) / name).string(); }

  Model load_base() {
    const std::string path = checkpoint_path();
    if (!std::filesystem::exists(path)) throw ConfigError("base checkpoint " + path + " not found; run `lofit pretrain` first");
    input_hashes[path] = file_hash(path);
    Model m = load_model(path);
    if (!(m.config() == cfg.model)) throw ConfigError("checkpoint " + path + " does not match the configured model shape");
    return m;
  }

  TaskData data(TaskKind task) const { return generate_task(task, world, cfg.splits); }

  std::vector<std::uint64_t> seeds() const {
    if (opts.seed) return {*opts.seed};
    return cfg.seeds;
  }

  void log(const std::string& msg) const {
    if (!opts.quiet) std::cerr << msg << std::endl;
  }
};

inline TuningData tuning_data(const TaskData& d) {
  if (d.task == TaskKind::truthfulness) return TuningData::from_preferences(d.train_pairs);
  return TuningData::from_examples(d.train);
}

inline std::vector<LabeledPair> probe_pairs(const TaskData& d) { return labeled_pairs(d.train); }

inline EvalReport evaluate(const Model& m, const Hooks& hooks, const TaskData& d) {
  if (d.task == TaskKind::truthfulness) return eval_mc(m, hooks, d.test);
  return eval_exact_match(m, hooks, d.test);
}

/// Headline metric: MC1 for the preference task, EM otherwise.
inline double headline(const EvalReport& r) { return r.has_mc ? r.mc1 : r.em; }

inline json metrics_json(const EvalReport& r) {
  json j = {{"n", r.n}};
  if (r.has_em) j["em"] = r.em;
  if (r.has_mc) {
    j["mc1"] = r.mc1;
    j["mc2"] = r.mc2;
  }
  return j;
}

inline TrainConfig seeded(TrainConfig t, std::uint64_t seed) {
  t.seed = seed;
  return t;
}

inline SelectionConfig selection_config(const ExperimentConfig& c, int k, std::uint64_t seed) {
  SelectionConfig s;
  s.K = k;
  s.lambda = c.lambda;
  s.sigma_A = c.sigma_A;
  s.seed = seed;
  return s;
}

/// Runs the configured selection method on `task` with `k` heads.
inline Selection run_selection(Session& s, const Model& m, SelectionMethod method, TaskKind task, int k, std::uint64_t seed) {
  const TaskData d = s.data(task);
  const TuningData td = tuning_data(d);
  const std::vector<LabeledPair> pairs = probe_pairs(d);
  return select_heads(method, m, {&td, &pairs}, selection_config(s.cfg, k, seed), seeded(s.cfg.scaling, seed));
}

inline OffsetParams run_tuning(Session& s, const Model& m, const std::vector<HeadId>& heads, TaskKind task,
                               std::uint64_t seed, TrainLog* log = nullptr) {
  const TaskData d = s.data(task);
  return tune_biases(m, heads, tuning_data(d), seeded(s.cfg.bias, seed), s.cfg.sigma_v, log);
}

inline HeadSet make_headset(const Session& s, const Selection& sel, SelectionMethod method, TaskKind task, std::uint64_t seed) {
  HeadSet hs;
  hs.method = to_string(method);
  hs.K = static_cast<int>(sel.targets.size());
  hs.seed = seed;
  hs.task = to_string(task);
  hs.model = s.cfg.model;
  hs.heads = sel.targets;
  hs.scores = sel.scores.scores;
  if (method == SelectionMethod::lofit_norm) {
    hs.lambda = s.cfg.lambda;
    hs.sigma_A = s.cfg.sigma_A;
  }
  return hs;
}

inline void write_train_log_file(const std::string& path, const TrainLog& log) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path);
  write_train_log(f, log);
}

/// Report envelope shared by all commands.
inline json report(const Session& s, const std::string& command, const std::map<std::string, std::string>& outputs) {
  json out_hashes = json::object();
  for (const auto& [name, path] : outputs) out_hashes[name] = {{"path", path}, {"hash", file_hash(path)}};
  return {{"command", command}, {"config", config_to_json(s.cfg)}, {"inputs", s.input_hashes}, {"outputs", out_hashes}};
}

inline void write_timing(const Session& s, const std::string& command, double seconds) {
  write_json_file(s.out(command + ".timing.json"), {{"command", command}, {"wall_clock_seconds", seconds}});
}

inline std::string csv_number(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

// ---------------------------------------------------------------- commands

inline int cmd_pretrain(Session& s) {
  s.log("pretraining base model (" + std::to_string(s.cfg.model.n_layers) + " layers, " +
        std::to_string(s.cfg.model.n_heads) + " heads)");
  std::vector<PretrainEpoch> history;
  const Model m = pretrain_base(s.cfg.model, s.world, s.cfg.pretrain, &history, [&](const PretrainEpoch& e) {
    s.log("  epoch " + std::to_string(e.epoch) + " train " + csv_number(e.train_loss) + " dev " + csv_number(e.dev_loss));
  });
  const std::string ckpt = s.checkpoint_path();
  save_model(ckpt, m);
  {
    std::ofstream f(s.out("pretrain_log.jsonl"), std::ios::trunc);
    for (const PretrainEpoch& e : history) {
      f << json{{"epoch", e.epoch}, {"step", e.step}, {"train_loss", e.train_loss}, {"dev_loss", e.dev_loss}, {"lr", e.lr}}.dump()
        << '\n';
    }
  }
  json gates = json::object();
  for (TaskKind t : {TaskKind::relations, TaskKind::counterfactual, TaskKind::truthfulness}) {
    const TaskData d = s.data(t);
    json g = {{"probe_em", eval_exact_match(m, Hooks{}, d.probes).em}};
    const EvalReport base = evaluate(m, Hooks{}, d);
    g["zero_shot"] = metrics_json(base);
    gates[to_string(t)] = g;
  }
  json r = report(s, "pretrain", {{"checkpoint", ckpt}, {"log", s.out("pretrain_log.jsonl")}});
  r["epochs"] = history.size();
  r["final_dev_loss"] = history.empty() ? 0.0 : history.back().dev_loss;
  r["gates"] = gates;
  write_json_file(s.out("pretrain_report.json"), r);
  return kExitOk;
}

inline int cmd_select(Session& s) {
  const Model m = s.load_base();
  const std::uint64_t seed = s.seeds().front();
  const int k = s.cfg.resolved_k();
  s.log("selecting " + std::to_string(k) + " heads with " + to_string(s.cfg.method) + " on " + to_string(s.cfg.task));
  const Selection sel = run_selection(s, m, s.cfg.method, s.cfg.task, k, seed);
  const HeadSet hs = make_headset(s, sel, s.cfg.method, s.cfg.task, seed);
  write_json_file(s.out("heads.json"), headset_to_json(hs));
  write_json_file(s.out("select_report.json"), report(s, "select", {{"heads", s.out("heads.json")}}));
  return kExitOk;
}

inline HeadSet load_headset(Session& s, const std::string& path) {
  HeadSet hs = headset_from_json(read_json_file(path));
  s.input_hashes[path] = file_hash(path);
  if (!(hs.model == s.cfg.model)) throw ConfigError("head-set file " + path + " was built for a different model shape");
  try {
    for (const HeadId& id : hs.heads) id.validate(s.cfg.model);
  } catch (const InvalidArgument& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return hs;
}

inline InterventionSet load_intervention(Session& s, const std::string& path) {
  InterventionSet iv = intervention_from_json(read_json_file(path));
  s.input_hashes[path] = file_hash(path);
  try {
    iv.validate(s.cfg.model);
  } catch (const InvalidArgument& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return iv;
}

inline int cmd_tune(Session& s) {
  if (s.opts.heads.size() != 1) throw ConfigError("tune needs exactly one --heads file");
  const Model m = s.load_base();
  const HeadSet hs = load_headset(s, s.opts.heads.front());
  const std::uint64_t seed = s.opts.seed ? *s.opts.seed : hs.seed;
  s.log("tuning offsets on " + std::to_string(hs.heads.size()) + " heads for " + to_string(s.cfg.task) +
        (s.cfg.task == TaskKind::truthfulness ? " (DPO)" : " (cross-entropy)"));
  TrainLog log;
  const OffsetParams v = run_tuning(s, m, hs.heads, s.cfg.task, seed, &log);
  write_json_file(s.out("intervention.json"), intervention_to_json(v.to_intervention()));
  write_train_log_file(s.out("tune_log.jsonl"), log);
  json r = report(s, "tune", {{"intervention", s.out("intervention.json")}, {"log", s.out("tune_log.jsonl")}});
  r["objective"] = s.cfg.task == TaskKind::truthfulness ? "dpo" : "cross_entropy";
  r["trainable_scalars"] = v.trainable_scalars();
  write_json_file(s.out("tune_report.json"), r);
  return kExitOk;
}

struct Condition {
  std::string name;
  std::vector<std::pair<std::uint64_t, EvalReport>> per_seed;
};

inline json condition_json(const Condition& c) {
  json seeds = json::array();
  double em = 0.0, mc1 = 0.0, mc2 = 0.0;
  bool has_em = false, has_mc = false;
  for (const auto& [seed, r] : c.per_seed) {
    json m = metrics_json(r);
    m["seed"] = seed;
    seeds.push_back(m);
    em += r.em;
    mc1 += r.mc1;
    mc2 += r.mc2;
    has_em = has_em || r.has_em;
    has_mc = has_mc || r.has_mc;
  }
  const auto n = static_cast<double>(std::max<std::size_t>(1, c.per_seed.size()));
  json mean = json::object();
  if (has_em) mean["em"] = em / n;
  if (has_mc) {
    mean["mc1"] = mc1 / n;
    mean["mc2"] = mc2 / n;
  }
  return {{"name", c.name}, {"per_seed", seeds}, {"mean", mean}};
}

inline void write_conditions_csv(const std::string& path, const std::vector<Condition>& conds) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path);
  f << "condition,seed,metric,value\n";
  for (const Condition& c : conds) {
    for (const auto& [seed, r] : c.per_seed) {
      if (r.has_em) f << c.name << ',' << seed << ",em," << csv_number(r.em) << '\n';
      if (r.has_mc) {
        f << c.name << ',' << seed << ",mc1," << csv_number(r.mc1) << '\n';
        f << c.name << ',' << seed << ",mc2," << csv_number(r.mc2) << '\n';
      }
    }
  }
}

inline int cmd_eval(Session& s) {
  const Model m = s.load_base();
  const TaskData d = s.data(s.cfg.task);
  std::vector<Condition> conds;
  conds.push_back({"zero_shot", {{0, evaluate(m, Hooks{}, d)}}});
  if (!s.opts.interventions.empty()) {
    Condition c{"intervention", {}};
    std::uint64_t idx = 0;
    for (const std::string& path : s.opts.interventions) {
      const InterventionSet iv = load_intervention(s, path);
      c.per_seed.emplace_back(idx++, evaluate(m, to_hooks(iv, m.config()), d));
    }
    conds.push_back(std::move(c));
  }
  if (s.opts.baselines) {
    const int k = s.cfg.resolved_k();
    const std::vector<LabeledPair> pairs = probe_pairs(d);
    const Selection iti_heads = select_heads(SelectionMethod::iti_probe, m, {nullptr, &pairs}, selection_config(s.cfg, k, 0), s.cfg.scaling);
    const InterventionSet iti = extract_iti_offsets(m, pairs, iti_heads.targets, s.cfg.iti_alpha);
    conds.push_back({"iti", {{0, evaluate(m, to_hooks(iti, m.config()), d)}}});
    const ContrastVector cv = extract_contrast_vector(m, contrast_prompts(s.cfg.task, d.train), s.cfg.resolved_repe_layer(), s.cfg.repe_alpha);
    conds.push_back({"repe", {{0, evaluate(m, cv.hooks(m.config()), d)}}});
  }
  write_conditions_csv(s.out("eval.csv"), conds);
  json r = report(s, "eval", {{"csv", s.out("eval.csv")}});
  r["task"] = to_string(s.cfg.task);
  json cj = json::array();
  for (const Condition& c : conds) cj.push_back(condition_json(c));
  r["conditions"] = cj;
  write_json_file(s.out("eval_report.json"), r);
  return kExitOk;
}

inline int cmd_sweep_k(Session& s) {
  const Model m = s.load_base();
  const TaskData d = s.data(s.cfg.task);
  const double zero_shot = headline(evaluate(m, Hooks{}, d));
  std::ofstream csv(s.out("sweep.csv"), std::ios::trunc);
  csv << "fraction,K,seed,metric,value\n";
  json rows = json::array();
  for (double frac : s.cfg.sweep_fractions) {
    const int k = heads_for_fraction(frac, s.cfg.model.n_layers, s.cfg.model.n_heads, s.cfg.granularity);
    for (std::uint64_t seed : s.seeds()) {
      s.log("sweep: fraction " + csv_number(frac) + " K=" + std::to_string(k) + " seed " + std::to_string(seed));
      const Selection sel = run_selection(s, m, s.cfg.method, s.cfg.task, k, seed);
      const OffsetParams v = run_tuning(s, m, sel.targets, s.cfg.task, seed);
      const EvalReport r = evaluate(m, v.hooks(m.config()), d);
      const std::string metric = r.has_mc ? "mc1" : "em";
      csv << csv_number(frac) << ',' << k << ',' << seed << ',' << metric << ',' << csv_number(headline(r)) << '\n';
      json row = metrics_json(r);
      row["fraction"] = frac;
      row["K"] = k;
      row["seed"] = seed;
      rows.push_back(row);
    }
  }
  csv.close();
  json r = report(s, "sweep-k", {{"csv", s.out("sweep.csv")}});
  r["zero_shot"] = zero_shot;
  r["rows"] = rows;
  write_json_file(s.out("sweep_report.json"), r);
  return kExitOk;
}

inline int cmd_transfer(Session& s) {
  const Model m = s.load_base();
  std::vector<TaskKind> sources = s.cfg.transfer_tasks, targets = s.cfg.transfer_tasks;
  if (s.opts.source) sources = {parse_task(*s.opts.source)};
  if (s.opts.target) targets = {parse_task(*s.opts.target)};
  const int k = s.cfg.resolved_k();
  std::map<std::pair<TaskKind, std::uint64_t>, std::vector<HeadId>> heads;
  for (TaskKind src : sources)
    for (std::uint64_t seed : s.seeds()) {
      s.log("transfer: selecting heads on " + to_string(src) + " seed " + std::to_string(seed));
      heads[{src, seed}] = run_selection(s, m, s.cfg.method, src, k, seed).targets;
    }

  std::ofstream csv(s.out("transfer.csv"), std::ios::trunc);
  csv << "source,target,seed,metric,value\n";
  json cells = json::array();
  auto cell = [&](const std::string& source, TaskKind tgt, const std::function<std::vector<HeadId>(std::uint64_t)>& pick) {
    const TaskData d = s.data(tgt);
    Condition c{source + "->" + to_string(tgt), {}};
    for (std::uint64_t seed : s.seeds()) {
      const std::vector<HeadId> hs = pick(seed);
      const OffsetParams v = run_tuning(s, m, hs, tgt, seed);
      const EvalReport r = evaluate(m, v.hooks(m.config()), d);
      csv << source << ',' << to_string(tgt) << ',' << seed << ',' << (r.has_mc ? "mc1" : "em") << ','
          << csv_number(headline(r)) << '\n';
      c.per_seed.emplace_back(seed, r);
    }
    json j = condition_json(c);
    j["source"] = source;
    j["target"] = to_string(tgt);
    cells.push_back(j);
  };
  for (TaskKind tgt : targets) {
    s.log("transfer: tuning on " + to_string(tgt));
    if (std::find(sources.begin(), sources.end(), tgt) == sources.end()) {
      for (std::uint64_t seed : s.seeds()) heads[{tgt, seed}] = run_selection(s, m, s.cfg.method, tgt, k, seed).targets;
      cell(to_string(tgt), tgt, [&](std::uint64_t seed) { return heads.at({tgt, seed}); });
    }
    for (TaskKind src : sources) cell(to_string(src), tgt, [&](std::uint64_t seed) { return heads.at({src, seed}); });
    cell("random", tgt, [&](std::uint64_t seed) { return select_random(m.config(), k, seed); });
  }
  csv.close();
  json r = report(s, "transfer", {{"csv", s.out("transfer.csv")}});
  r["K"] = k;
  r["cells"] = cells;
  write_json_file(s.out("transfer_report.json"), r);
  return kExitOk;
}

inline int cmd_analyze(Session& s) {
  std::vector<HeadSet> sets;
  for (const std::string& p : s.opts.heads) sets.push_back(load_headset(s, p));
  json r = json::object();
  json lens = json::array();
  long long params = 0;
  if (!s.opts.interventions.empty()) {
    const Model m = s.load_base();
    for (const std::string& path : s.opts.interventions) {
      const InterventionSet iv = load_intervention(s, path);
      params += param_count(static_cast<long long>(iv.size()), m.config().d_head);
      for (const auto& [id, v] : iv.offsets()) {
        json top = json::array();
        for (const TokenProb& tp : logit_lens(m, id, v, 10)) top.push_back({{"token", tp.token}, {"prob", tp.prob}});
        lens.push_back({{"file", path}, {"layer", id.layer}, {"head", id.head}, {"top_tokens", top}});
      }
    }
  }
  json names = json::array(), jac = json::array(), dist = json::array(), hist = json::array();
  for (std::size_t i = 0; i < sets.size(); ++i) {
    names.push_back(s.opts.heads[i]);
    json jr = json::array(), er = json::array();
    const auto pi = layer_distribution(sets[i].heads, s.cfg.model.n_layers);
    for (std::size_t j = 0; j < sets.size(); ++j) {
      jr.push_back(jaccard(sets[i].heads, sets[j].heads));
      er.push_back(emd(pi, layer_distribution(sets[j].heads, s.cfg.model.n_layers)));
    }
    jac.push_back(jr);
    dist.push_back(er);
    hist.push_back({{"file", s.opts.heads[i]}, {"task", sets[i].task}, {"method", sets[i].method}, {"distribution", pi}});
  }
  r = report(s, "analyze", {});
  r["logit_lens"] = lens;
  r["headsets"] = names;
  r["jaccard"] = jac;
  r["emd"] = dist;
  r["layer_distributions"] = hist;
  r["param_count"] = params;
  write_json_file(s.out("analysis.json"), r);
  return kExitOk;
}

/// Dispatches `command`; maps library errors to exit codes.
inline int run(const std::string& command, const Options& opts) {
  const auto start = std::chrono::steady_clock::now();
  try {
    if (opts.config_path.empty()) throw ConfigError("--config is required");
    Session s(load_config(opts.config_path), opts);
    int code = kExitConfig;
    if (command == "pretrain") code = cmd_pretrain(s);
    else if (command == "select") code = cmd_select(s);
    else if (command == "tune") code = cmd_tune(s);
    else if (command == "eval") code = cmd_eval(s);
    else if (command == "sweep-k") code = cmd_sweep_k(s);
    else if (command == "transfer") code = cmd_transfer(s);
    else if (command == "analyze") code = cmd_analyze(s);
    else throw ConfigError("unknown command '" + command + "'");
    write_timing(s, command, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    return code;
  } catch (const TrainingDivergence& e) {
    std::cerr << "lofit " << command << ": numerical failure: " << e.what() << std::endl;
    return kExitNumerical;
  } catch (const ConfigError& e) {
    std::cerr << "lofit " << command << ": " << e.what() << std::endl;
    return kExitConfig;
  } catch (const InvalidArgument& e) {
    std::cerr << "lofit " << command << ": " << e.what() << std::endl;
    return kExitConfig;
  } catch (const DegenerateDataError& e) {
    std::cerr << "lofit " << command << ": " << e.what() << std::endl;
    return kExitConfig;
  }
}

}  // namespace lofit::cli
