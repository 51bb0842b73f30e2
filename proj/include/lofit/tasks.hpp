#pragma once

// Synthetic tasks. Every prompt is [BOS, STYLE, ...]. Evaluation prompts carry
// the PLAIN style, under which the pretrained base model shows a default
// behaviour that is wrong for the task; the pretraining corpus also shows each
// task under its own style token, where the base model behaves correctly.
//
//   relations       [BOS S a r1 b SEP b r2 c SEP QRY a c ANS]
//                   PLAIN: "r1 r2"   compose style / gold: r1∘r2
//   counterfactual  [BOS S EDIT s' r' o' SEP QRY s r1 r2 ANS]
//                   PLAIN: ignores the edit   edit style / gold: uses it
//   truthfulness    [BOS S QRY subj attr ANS]
//                   PLAIN: misconception g(q) on a subset   truth style / gold: f(q)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lofit/data.hpp"
#include "lofit/error.hpp"
#include "lofit/intervene.hpp"
#include "lofit/model.hpp"
#include "lofit/rng.hpp"
#include "lofit/vocab.hpp"

namespace lofit {

enum class TaskKind { relations, counterfactual, truthfulness };

inline std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::relations: return "relations";
    case TaskKind::counterfactual: return "counterfactual";
    case TaskKind::truthfulness: return "truthfulness";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  for (auto t : {TaskKind::relations, TaskKind::counterfactual, TaskKind::truthfulness})
    if (to_string(t) == s) return t;
  throw ConfigError("unknown task '" + s + "'");
}

inline int style_token(TaskKind t) {
  switch (t) {
    case TaskKind::relations: return vocab::kStyleCompose;
    case TaskKind::counterfactual: return vocab::kStyleEdit;
    case TaskKind::truthfulness: return vocab::kStyleTruth;
  }
  return vocab::kPlain;
}

// ---------------------------------------------------------------- relations

/// Closed composition table over relation ids 0..n-1 (token kRelationBase+i).
struct CompositionTable {
  std::vector<std::string> names;
  std::vector<int> table;  // n*n, table[a*n + b] = a∘b
  int identity = -1;       // relation excluded from stories, -1 if none

  int size() const { return static_cast<int>(names.size()); }
  int compose(int a, int b) const { return table.at(static_cast<std::size_t>(a * size() + b)); }
  static int token(int rel) { return vocab::kRelationBase + rel; }

  void validate() const {
    const int n = size();
    if (n == 0) throw InvalidArgument("composition table is empty");
    if (table.size() != static_cast<std::size_t>(n) * n) throw InvalidArgument("composition table is not n x n");
    for (int v : table)
      if (v < 0 || v >= n) throw InvalidArgument("composition table is not closed: entry " + std::to_string(v));
    if (n > 10) throw InvalidArgument("composition table uses more relation ids than reserved for it");
  }

  int find(const std::string& name) const {
    for (int i = 0; i < size(); ++i)
      if (names[static_cast<std::size_t>(i)] == name) return i;
    throw InvalidArgument("no relation named " + name);
  }

  /// Kinship-style algebra: a relation is (generation in [-2, 2], collateral
  /// flag). Generations add with saturation; collateral flags OR.
  static CompositionTable kinship() {
    struct Rel {
      int gen;
      bool side;
      const char* name;
    };
    static constexpr Rel kRels[] = {{0, false, "self"},        {1, false, "parent"}, {2, false, "grandparent"},
                                    {-1, false, "child"},      {-2, false, "grandchild"},
                                    {0, true, "sibling"},      {1, true, "aunt"},    {2, true, "great_aunt"},
                                    {-1, true, "niece"},       {-2, true, "grandniece"}};
    CompositionTable t;
    const int n = static_cast<int>(std::size(kRels));
    for (const Rel& r : kRels) t.names.emplace_back(r.name);
    t.table.resize(static_cast<std::size_t>(n * n));
    for (int a = 0; a < n; ++a) {
      for (int b = 0; b < n; ++b) {
        const int gen = std::clamp(kRels[a].gen + kRels[b].gen, -2, 2);
        const bool side = kRels[a].side || kRels[b].side;
        for (int c = 0; c < n; ++c)
          if (kRels[c].gen == gen && kRels[c].side == side) t.table[static_cast<std::size_t>(a * n + b)] = c;
      }
    }
    t.identity = 0;
    return t;
  }
};

// ---------------------------------------------------------------- knowledge base

inline constexpr int kKbRelationBase = vocab::kRelationBase + 10;  // 3 ids
inline constexpr int kTruthAttrBase = vocab::kRelationBase + 13;   // 4 ids

struct KnowledgeBase {
  std::vector<int> entities;   // tokens
  std::vector<int> relations;  // tokens
  std::map<std::pair<int, int>, int> facts;

  int lookup(int s, int r) const {
    auto it = facts.find({s, r});
    if (it == facts.end()) throw InvalidArgument("knowledge base has no fact for (" + std::to_string(s) + ", " + std::to_string(r) + ")");
    return it->second;
  }

  std::size_t size() const { return facts.size(); }

  /// kb_size triples over kb_size / 3 entities and 3 relations.
  static KnowledgeBase generate(std::uint64_t seed, int kb_size, int vocab_size = vocab::kDefaultSize) {
    if (kb_size < 10) throw InvalidArgument("knowledge base needs at least 10 triples");
    const int n_rel = 3;
    const int n_ent = kb_size / n_rel;
    if (n_ent > vocab::content_count(vocab_size)) throw InvalidArgument("knowledge base larger than the content vocabulary");
    Rng rng = Rng(seed).fork(0x4b42ull);
    KnowledgeBase kb;
    for (std::size_t i : rng.sample_without_replacement(static_cast<std::size_t>(vocab::content_count(vocab_size)),
                                                        static_cast<std::size_t>(n_ent))) {
      kb.entities.push_back(vocab::kContentBase + static_cast<int>(i));
    }
    for (int r = 0; r < n_rel; ++r) kb.relations.push_back(kKbRelationBase + r);
    for (int s : kb.entities) {
      for (int r : kb.relations) {
        int o = s;
        while (o == s) o = kb.entities[rng.uniform_int(kb.entities.size())];
        kb.facts[{s, r}] = o;
      }
    }
    return kb;
  }
};

struct Edit {
  int subject = 0;
  int relation = 0;
  int object = 0;
};

/// Follows `relations` from `s` through the KB with `edit` applied.
inline int traverse(const KnowledgeBase& kb, int s, const std::vector<int>& relations, const Edit* edit = nullptr) {
  int node = s;
  for (int r : relations) {
    if (edit && edit->subject == node && edit->relation == r) {
      node = edit->object;
    } else {
      node = kb.lookup(node, r);
    }
  }
  return node;
}

// ---------------------------------------------------------------- truth table

struct TruthTable {
  struct Question {
    int subject = 0;
    int attribute = 0;
    Tokens truth;          // f(q)
    Tokens misconception;  // g(q)
    bool misconceived = false;
  };
  std::vector<Question> questions;

  /// n questions over n/4 subjects x 4 attributes; three quarters of them are
  /// misconceived.
  static TruthTable generate(std::uint64_t seed, int n, int vocab_size = vocab::kDefaultSize) {
    if (n < 20) throw InvalidArgument("truthfulness task needs n >= 20");
    const int n_attr = 4;
    const int n_subj = (n + n_attr - 1) / n_attr;
    const int content = vocab::content_count(vocab_size);
    if (n_subj > content) throw InvalidArgument("truthfulness task larger than the content vocabulary");
    Rng rng = Rng(seed).fork(0x5452555448ull);
    std::vector<int> subjects;
    for (std::size_t i : rng.sample_without_replacement(static_cast<std::size_t>(content), static_cast<std::size_t>(n_subj))) {
      subjects.push_back(vocab::kContentBase + static_cast<int>(i));
    }
    auto answer = [&] {
      return Tokens{vocab::kContentBase + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(content))),
                    vocab::kContentBase + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(content)))};
    };
    TruthTable t;
    for (int q = 0; q < n; ++q) {
      Question question;
      question.subject = subjects[static_cast<std::size_t>(q / n_attr)];
      question.attribute = kTruthAttrBase + q % n_attr;
      question.truth = answer();
      do question.misconception = answer();
      while (question.misconception == question.truth);
      t.questions.push_back(std::move(question));
    }
    const auto n_mis = static_cast<std::size_t>(n) * 3 / 4;
    for (std::size_t i : rng.sample_without_replacement(static_cast<std::size_t>(n), n_mis)) t.questions[i].misconceived = true;
    return t;
  }
};

// ---------------------------------------------------------------- prompts

namespace prompts {

/// Two-fact story "a r1 b ; b r2 c" asking for the relation of a to c.
inline Tokens relations(int style, int a, int r1, int b, int r2, int c) {
  return {vocab::kBos, style, a, r1, b, vocab::kSep, b, r2, c, vocab::kSep, vocab::kQuery, a, c, vocab::kAnswer};
}

/// One-fact story "a r b" asking for the relation of a to b.
inline Tokens relation_fact(int style, int a, int r, int b) {
  return {vocab::kBos, style, a, r, b, vocab::kSep, vocab::kQuery, a, b, vocab::kAnswer};
}

inline Tokens counterfactual(int style, const Edit* edit, int s, const std::vector<int>& relations) {
  Tokens p{vocab::kBos, style};
  if (edit) p.insert(p.end(), {vocab::kEdit, edit->subject, edit->relation, edit->object, vocab::kSep});
  p.push_back(vocab::kQuery);
  p.push_back(s);
  p.insert(p.end(), relations.begin(), relations.end());
  p.push_back(vocab::kAnswer);
  return p;
}

inline Tokens truth(int style, int subject, int attribute) {
  return {vocab::kBos, style, vocab::kQuery, subject, attribute, vocab::kAnswer};
}

/// Same prompt with the style slot replaced.
inline Tokens restyle(Tokens p, int style) {
  if (p.size() < 2) throw InvalidArgument("restyle: prompt too short");
  p[1] = style;
  return p;
}

}  // namespace prompts

// ---------------------------------------------------------------- datasets

struct SplitSizes {
  int train = 300;
  int dev = 100;
  int test = 300;
  int probes = 200;
};

struct TaskData {
  TaskKind task = TaskKind::relations;
  std::vector<TaskExample> train, dev, test;
  std::vector<TaskExample> probes;  // one-hop / original-KB competence checks
  std::vector<PreferencePair> train_pairs, dev_pairs;
};

inline TaskData gen_relations_task(std::uint64_t seed, const SplitSizes& sizes, const CompositionTable& table,
                                   int vocab_size = vocab::kDefaultSize) {
  table.validate();
  const int content = vocab::content_count(vocab_size);
  if (content < 3) throw InvalidArgument("relations task needs at least 3 content tokens");
  std::vector<int> story_rels;
  for (int r = 0; r < table.size(); ++r)
    if (r != table.identity) story_rels.push_back(r);
  Rng rng = Rng(seed).fork(0x52454c53ull);
  std::set<std::tuple<int, int, int>> used;
  auto fresh_tuple = [&] {
    for (;;) {
      auto pick = rng.sample_without_replacement(static_cast<std::size_t>(content), 3);
      std::tuple<int, int, int> t{vocab::kContentBase + static_cast<int>(pick[0]), vocab::kContentBase + static_cast<int>(pick[1]),
                                  vocab::kContentBase + static_cast<int>(pick[2])};
      if (used.insert(t).second) return t;
    }
  };
  auto rel = [&] { return story_rels[rng.uniform_int(story_rels.size())]; };
  auto two_hop = [&](int n) {
    std::vector<TaskExample> out;
    for (int i = 0; i < n; ++i) {
      const auto [a, b, c] = fresh_tuple();
      const int r1 = rel(), r2 = rel();
      const int t1 = CompositionTable::token(r1), t2 = CompositionTable::token(r2);
      TaskExample e;
      e.prompt = prompts::relations(vocab::kPlain, a, t1, b, t2, c);
      e.gold = {CompositionTable::token(table.compose(r1, r2))};
      e.negatives = {{t1, t2}};
      e.meta = {"relations", 2, seed};
      out.push_back(std::move(e));
    }
    return out;
  };
  TaskData d;
  d.task = TaskKind::relations;
  d.train = two_hop(sizes.train);
  d.dev = two_hop(sizes.dev);
  d.test = two_hop(sizes.test);
  for (int i = 0; i < sizes.probes; ++i) {
    const auto [a, b, c] = fresh_tuple();
    const int t = CompositionTable::token(rel());
    TaskExample e;
    e.prompt = prompts::relation_fact(vocab::kPlain, a, t, b);
    e.gold = {t};
    e.meta = {"relations", 1, seed};
    d.probes.push_back(std::move(e));
  }
  return d;
}

namespace detail {

/// Relevant first-hop edit: changes (s, r1) to an object that changes the
/// answer. Returns false if none exists.
inline bool relevant_edit(const KnowledgeBase& kb, Rng& rng, int s, int r1, int r2, Edit& out) {
  const int original = traverse(kb, s, {r1, r2});
  std::vector<int> candidates;
  for (int o : kb.entities) {
    const Edit e{s, r1, o};
    if (o != kb.lookup(s, r1) && traverse(kb, s, {r1, r2}, &e) != original) candidates.push_back(o);
  }
  if (candidates.empty()) return false;
  out = {s, r1, candidates[rng.uniform_int(candidates.size())]};
  return true;
}

/// Edit that touches neither hop of the chain.
inline Edit irrelevant_edit(const KnowledgeBase& kb, Rng& rng, int s, int r1, int r2) {
  const int mid = kb.lookup(s, r1);
  for (;;) {
    const int es = kb.entities[rng.uniform_int(kb.entities.size())];
    const int er = kb.relations[rng.uniform_int(kb.relations.size())];
    if ((es == s && er == r1) || (es == mid && er == r2)) continue;
    int eo = es;
    while (eo == es || eo == kb.lookup(es, er)) eo = kb.entities[rng.uniform_int(kb.entities.size())];
    return {es, er, eo};
  }
}

}  // namespace detail

/// `control_fraction` of the examples carry an edit that does not touch the
/// question; the rest edit its first hop.
inline TaskData gen_counterfactual_task(std::uint64_t seed, const SplitSizes& sizes, int kb_size = 48,
                                        double control_fraction = 0.2, int vocab_size = vocab::kDefaultSize) {
  const KnowledgeBase kb = KnowledgeBase::generate(seed, kb_size, vocab_size);
  Rng rng = Rng(seed).fork(0x43465354ull);
  std::set<std::vector<int>> used;
  auto make = [&](int n) {
    std::vector<TaskExample> out;
    while (static_cast<int>(out.size()) < n) {
      const int s = kb.entities[rng.uniform_int(kb.entities.size())];
      const int r1 = kb.relations[rng.uniform_int(kb.relations.size())];
      const int r2 = kb.relations[rng.uniform_int(kb.relations.size())];
      const bool control = rng.uniform() < control_fraction;
      Edit edit;
      if (control) {
        edit = detail::irrelevant_edit(kb, rng, s, r1, r2);
      } else if (!detail::relevant_edit(kb, rng, s, r1, r2, edit)) {
        continue;
      }
      TaskExample e;
      e.prompt = prompts::counterfactual(vocab::kPlain, &edit, s, {r1, r2});
      if (!used.insert(e.prompt).second) continue;
      e.gold = {traverse(kb, s, {r1, r2}, &edit)};
      const int original = traverse(kb, s, {r1, r2});
      if (original != e.gold[0]) e.negatives = {{original}};
      e.meta = {"counterfactual", 2, seed};
      out.push_back(std::move(e));
    }
    return out;
  };
  TaskData d;
  d.task = TaskKind::counterfactual;
  d.train = make(sizes.train);
  d.dev = make(sizes.dev);
  d.test = make(sizes.test);
  for (const auto& [key, o] : kb.facts) {
    TaskExample e;
    e.prompt = prompts::counterfactual(vocab::kPlain, nullptr, key.first, {key.second});
    e.gold = {o};
    e.meta = {"counterfactual", 1, seed};
    d.probes.push_back(std::move(e));
  }
  return d;
}

/// Preference pairs (truth over misconception) from half of the misconceived
/// questions, and a multiple-choice set with the misconception plus two
/// length-matched random answers as distractors from the held-out ones.
inline TaskData gen_truthfulness_task(std::uint64_t seed, int n = 160, int vocab_size = vocab::kDefaultSize) {
  const TruthTable tt = TruthTable::generate(seed, n, vocab_size);
  Rng rng = Rng(seed).fork(0x54514153ull);
  std::vector<std::size_t> mis;
  for (std::size_t i = 0; i < tt.questions.size(); ++i)
    if (tt.questions[i].misconceived) mis.push_back(i);
  rng.shuffle(mis);
  const std::size_t n_train = mis.size() / 2, n_dev = mis.size() / 10;
  const int content = vocab::content_count(vocab_size);

  auto mc_example = [&](const TruthTable::Question& q) {
    TaskExample e;
    e.prompt = prompts::truth(vocab::kPlain, q.subject, q.attribute);
    e.gold = q.truth;
    e.negatives = {q.misconception};
    while (e.negatives.size() < 3) {
      Tokens cand{vocab::kContentBase + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(content))),
                  vocab::kContentBase + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(content)))};
      if (cand == e.gold || std::find(e.negatives.begin(), e.negatives.end(), cand) != e.negatives.end()) continue;
      e.negatives.push_back(std::move(cand));
    }
    e.meta = {"truthfulness", 1, seed};
    return e;
  };

  TaskData d;
  d.task = TaskKind::truthfulness;
  for (std::size_t k = 0; k < mis.size(); ++k) {
    const TruthTable::Question& q = tt.questions[mis[k]];
    const PreferencePair pair{prompts::truth(vocab::kPlain, q.subject, q.attribute), q.truth, q.misconception};
    TaskExample e = mc_example(q);
    if (k < n_train) {
      d.train_pairs.push_back(pair);
      d.train.push_back(std::move(e));
    } else if (k < n_train + n_dev) {
      d.dev_pairs.push_back(pair);
      d.dev.push_back(std::move(e));
    } else {
      d.test.push_back(std::move(e));
    }
  }
  for (const TruthTable::Question& q : tt.questions) {
    if (q.misconceived) continue;
    TaskExample e;
    e.prompt = prompts::truth(vocab::kPlain, q.subject, q.attribute);
    e.gold = q.truth;
    e.meta = {"truthfulness", 1, seed};
    d.probes.push_back(std::move(e));
  }
  return d;
}

// ---------------------------------------------------------------- pretraining world

/// Everything the base model is pretrained on, derived from one seed.
struct World {
  std::uint64_t seed = 0;
  CompositionTable table = CompositionTable::kinship();
  KnowledgeBase kb;
  TruthTable truth;
  int vocab_size = vocab::kDefaultSize;

  static World make(std::uint64_t seed, int kb_size = 48, int truth_n = 160, int vocab_size = vocab::kDefaultSize) {
    World w;
    w.seed = seed;
    w.vocab_size = vocab_size;
    w.kb = KnowledgeBase::generate(seed, kb_size, vocab_size);
    w.truth = TruthTable::generate(seed, truth_n, vocab_size);
    return w;
  }
};

struct CorpusMix {
  double relations = 0.4;
  double counterfactual = 0.4;
  double truthfulness = 0.2;
  double plain_edit_follow = 0.3;  // PLAIN-style edit items answered with the edit applied
};

namespace detail {

inline Tokens with_eos(Tokens t) {
  t.push_back(vocab::kEos);
  return t;
}

inline Continuation sample_relations(const World& w, Rng& rng) {
  const int content = vocab::content_count(w.vocab_size);
  const auto pick = rng.sample_without_replacement(static_cast<std::size_t>(content), 3);
  const int a = vocab::kContentBase + static_cast<int>(pick[0]);
  const int b = vocab::kContentBase + static_cast<int>(pick[1]);
  const int c = vocab::kContentBase + static_cast<int>(pick[2]);
  std::vector<int> rels;
  for (int r = 0; r < w.table.size(); ++r)
    if (r != w.table.identity) rels.push_back(r);
  const int r1 = rels[rng.uniform_int(rels.size())], r2 = rels[rng.uniform_int(rels.size())];
  const int t1 = CompositionTable::token(r1), t2 = CompositionTable::token(r2);
  const bool mode = rng.uniform() < 0.5;
  const int style = mode ? vocab::kStyleCompose : vocab::kPlain;
  const double kind = rng.uniform();
  if (kind < 0.3) return {prompts::relation_fact(style, a, t1, b), with_eos({t1})};
  const Tokens answer = mode ? Tokens{CompositionTable::token(w.table.compose(r1, r2))} : Tokens{t1, t2};
  return {prompts::relations(style, a, t1, b, t2, c), with_eos(answer)};
}

inline Continuation sample_counterfactual(const World& w, Rng& rng, double plain_edit_follow) {
  const KnowledgeBase& kb = w.kb;
  const int s = kb.entities[rng.uniform_int(kb.entities.size())];
  const int r1 = kb.relations[rng.uniform_int(kb.relations.size())];
  const int r2 = kb.relations[rng.uniform_int(kb.relations.size())];
  const bool mode = rng.uniform() < 0.5;
  const int style = mode ? vocab::kStyleEdit : vocab::kPlain;
  const double kind = rng.uniform();
  if (kind < 0.2) return {prompts::counterfactual(style, nullptr, s, {r1}), with_eos({kb.lookup(s, r1)})};
  if (kind < 0.35) return {prompts::counterfactual(style, nullptr, s, {r1, r2}), with_eos({traverse(kb, s, {r1, r2})})};
  Edit edit;
  const bool one_hop = kind < 0.5;
  if (rng.uniform() < 0.3) {
    edit = irrelevant_edit(kb, rng, s, r1, r2);
  } else if (one_hop) {
    int o = kb.lookup(s, r1);
    while (o == kb.lookup(s, r1)) o = kb.entities[rng.uniform_int(kb.entities.size())];
    edit = {s, r1, o};
  } else if (!relevant_edit(kb, rng, s, r1, r2, edit)) {
    edit = irrelevant_edit(kb, rng, s, r1, r2);
  }
  const std::vector<int> chain = one_hop ? std::vector<int>{r1} : std::vector<int>{r1, r2};
  const bool follow = mode || rng.uniform() < plain_edit_follow;
  const int answer = follow ? traverse(kb, s, chain, &edit) : traverse(kb, s, chain);
  return {prompts::counterfactual(style, &edit, s, chain), with_eos({answer})};
}

inline Continuation sample_truthfulness(const World& w, Rng& rng) {
  const auto& q = w.truth.questions[rng.uniform_int(w.truth.questions.size())];
  const bool mode = rng.uniform() < 0.5;
  const int style = mode ? vocab::kStyleTruth : vocab::kPlain;
  const Tokens& answer = mode || !q.misconceived ? q.truth : q.misconception;
  return {prompts::truth(style, q.subject, q.attribute), with_eos(answer)};
}

}  // namespace detail

/// One pretraining item drawn from the task mixture.
inline Continuation sample_pretraining_item(const World& w, Rng& rng, const CorpusMix& mix = {}) {
  const double total = mix.relations + mix.counterfactual + mix.truthfulness;
  if (!(total > 0.0)) throw InvalidArgument("corpus mixture weights must have a positive sum");
  if (!(mix.plain_edit_follow >= 0.0 && mix.plain_edit_follow <= 1.0))
    throw InvalidArgument("corpus mixture: plain_edit_follow must be in [0, 1]");
  const double u = rng.uniform() * total;
  if (u < mix.relations) return detail::sample_relations(w, rng);
  if (u < mix.relations + mix.counterfactual) return detail::sample_counterfactual(w, rng, mix.plain_edit_follow);
  return detail::sample_truthfulness(w, rng);
}

inline TaskData generate_task(TaskKind task, const World& w, const SplitSizes& sizes = {}) {
  switch (task) {
    case TaskKind::relations: return gen_relations_task(w.seed, sizes, w.table, w.vocab_size);
    case TaskKind::counterfactual:
      return gen_counterfactual_task(w.seed, sizes, static_cast<int>(w.kb.size()), 0.2, w.vocab_size);
    case TaskKind::truthfulness:
      return gen_truthfulness_task(w.seed, static_cast<int>(w.truth.questions.size()), w.vocab_size);
  }
  throw InvalidArgument("unknown task");
}

// ---------------------------------------------------------------- steering data

/// Positive = prompt + gold, negative = prompt + first negative, for every
/// example that has one.
inline std::vector<LabeledPair> labeled_pairs(const std::vector<TaskExample>& examples) {
  std::vector<LabeledPair> out;
  for (const TaskExample& e : examples) {
    if (e.negatives.empty()) continue;
    LabeledPair p;
    p.positive = e.prompt;
    p.positive.insert(p.positive.end(), e.gold.begin(), e.gold.end());
    p.negative = e.prompt;
    p.negative.insert(p.negative.end(), e.negatives.front().begin(), e.negatives.front().end());
    out.push_back(std::move(p));
  }
  return out;
}

/// Contrast prompts for RepE: the prompt in the task's own style versus PLAIN.
inline std::vector<LabeledPair> contrast_prompts(TaskKind task, const std::vector<TaskExample>& examples) {
  std::vector<LabeledPair> out;
  for (const TaskExample& e : examples) out.push_back({prompts::restyle(e.prompt, style_token(task)), e.prompt});
  return out;
}

// ---------------------------------------------------------------- evaluation

struct ExampleResult {
  bool correct = false;  // EM, or MC1 for multiple choice
  double mc2 = 0.0;
  Tokens prediction;
};

struct EvalReport {
  double em = 0.0;
  double mc1 = 0.0;
  double mc2 = 0.0;
  int n = 0;
  bool has_em = false;
  bool has_mc = false;
  std::vector<ExampleResult> per_example;
};

inline int eval_threads() {
  if (const char* env = std::getenv("LOFIT_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

namespace detail {

/// Runs fn(chunk) for chunks [0, n_chunks) on up to eval_threads() threads.
/// Chunk boundaries do not depend on the thread count.
inline void parallel_chunks(std::size_t n_chunks, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(eval_threads()), n_chunks);
  if (threads <= 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) fn(c);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t c = t; c < n_chunks; c += threads) fn(c);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Greedy generation of up to |gold| + 1 tokens; exact match against gold
/// after stripping at the end token.
inline EvalReport eval_exact_match(const Model& model, const Hooks& hooks, const std::vector<TaskExample>& data) {
  if (data.empty()) throw InvalidArgument("eval_exact_match: empty dataset");
  EvalReport r;
  r.has_em = true;
  r.n = static_cast<int>(data.size());
  r.per_example.resize(data.size());
  detail::parallel_chunks(data.size(), [&](std::size_t i) {
    const TaskExample& e = data[i];
    ExampleResult& out = r.per_example[i];
    out.prediction = generate_greedy(model, e.prompt, hooks, static_cast<int>(e.gold.size()) + 1);
    out.correct = out.prediction == e.gold;
  });
  std::size_t hits = 0;
  for (const ExampleResult& x : r.per_example) hits += x.correct;
  r.em = static_cast<double>(hits) / static_cast<double>(data.size());
  return r;
}

/// Per-question MC scores from candidate log-probabilities, gold first.
inline std::pair<bool, double> mc_scores(std::span<const double> logprobs) {
  if (logprobs.empty()) throw InvalidArgument("mc_scores: no candidates");
  bool mc1 = true;
  for (std::size_t c = 1; c < logprobs.size(); ++c)
    if (!(logprobs[0] > logprobs[c])) mc1 = false;
  const double mx = *std::max_element(logprobs.begin(), logprobs.end());
  double total = 0.0;
  for (double lp : logprobs) total += std::exp(lp - mx);
  return {mc1, std::exp(logprobs[0] - mx) / total};
}

/// MC1: the gold strictly beats every distractor. MC2: probability mass on
/// the gold among all candidates.
inline EvalReport eval_mc(const Model& model, const Hooks& hooks, const std::vector<TaskExample>& data) {
  if (data.empty()) throw InvalidArgument("eval_mc: empty dataset");
  std::vector<Continuation> items;
  std::vector<std::size_t> offsets;
  for (const TaskExample& e : data) {
    if (e.negatives.empty()) throw InvalidArgument("eval_mc: question without distractors");
    offsets.push_back(items.size());
    items.push_back({e.prompt, e.gold});
    for (const Tokens& n : e.negatives) items.push_back({e.prompt, n});
  }
  offsets.push_back(items.size());
  // One forward per candidate: packed batches round differently per row, and a
  // question's score should not depend on what else is in the eval set.
  std::vector<double> lps(items.size());
  detail::parallel_chunks(items.size(), [&](std::size_t i) {
    lps[i] = sequence_logprobs(model, {items[i]}, hooks, 1).front();
  });
  EvalReport r;
  r.has_mc = true;
  r.n = static_cast<int>(data.size());
  double mc1 = 0.0, mc2 = 0.0;
  for (std::size_t q = 0; q < data.size(); ++q) {
    const auto [hit, mass] = mc_scores(std::span<const double>(lps).subspan(offsets[q], offsets[q + 1] - offsets[q]));
    r.per_example.push_back({hit, mass, {}});
    mc1 += hit;
    mc2 += mass;
  }
  r.mc1 = mc1 / static_cast<double>(data.size());
  r.mc2 = mc2 / static_cast<double>(data.size());
  return r;
}

inline EvalReport eval_exact_match(const Model& model, const InterventionSet& iv, const std::vector<TaskExample>& data) {
  return eval_exact_match(model, to_hooks(iv, model.config()), data);
}

inline EvalReport eval_mc(const Model& model, const InterventionSet& iv, const std::vector<TaskExample>& data) {
  return eval_mc(model, to_hooks(iv, model.config()), data);
}

// ---------------------------------------------------------------- JSONL

inline nlohmann::json to_json(const TaskExample& e) {
  nlohmann::json j = {{"prompt", e.prompt},
                      {"gold", e.gold},
                      {"meta", {{"task", e.meta.task}, {"hop", e.meta.hop}, {"seed", e.meta.seed}}}};
  if (!e.negatives.empty()) j["negatives"] = e.negatives;
  return j;
}

inline TaskExample example_from_json(const nlohmann::json& j) {
  TaskExample e;
  e.prompt = j.at("prompt").get<Tokens>();
  e.gold = j.at("gold").get<Tokens>();
  if (j.contains("negatives")) e.negatives = j.at("negatives").get<std::vector<Tokens>>();
  if (j.contains("meta")) {
    const auto& m = j.at("meta");
    e.meta.task = m.value("task", std::string{});
    e.meta.hop = m.value("hop", 2);
    e.meta.seed = m.value("seed", 0ull);
  }
  e.validate();
  return e;
}

inline nlohmann::json to_json(const PreferencePair& p) {
  return {{"prompt", p.prompt}, {"chosen", p.chosen}, {"rejected", p.rejected}};
}

inline PreferencePair preference_from_json(const nlohmann::json& j) {
  PreferencePair p{j.at("prompt").get<Tokens>(), j.at("chosen").get<Tokens>(), j.at("rejected").get<Tokens>()};
  p.validate();
  return p;
}

template <class T>
void write_jsonl(const std::string& path, const std::vector<T>& items) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path);
  for (const T& x : items) f << to_json(x).dump() << '\n';
}

template <class T, class Parse>
std::vector<T> read_jsonl(const std::string& path, Parse parse) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open " + path);
  std::vector<T> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(parse(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<TaskExample> read_examples(const std::string& path) {
  return read_jsonl<TaskExample>(path, example_from_json);
}

inline std::vector<PreferencePair> read_preferences(const std::string& path) {
  return read_jsonl<PreferencePair>(path, preference_from_json);
}

}  // namespace lofit
