#pragma once

#include <string>
#include <vector>

#include "lofit/error.hpp"
#include "lofit/vocab.hpp"

namespace lofit {

struct ExampleMeta {
  std::string task;
  int hop = 2;
  unsigned long long seed = 0;

  bool operator==(const ExampleMeta&) const = default;
};

/// Prompt with its gold continuation and, for multiple choice, distractors.
struct TaskExample {
  Tokens prompt;
  Tokens gold;
  std::vector<Tokens> negatives;
  ExampleMeta meta;

  void validate() const {
    if (prompt.empty()) throw InvalidArgument("task example has an empty prompt");
    if (gold.empty()) throw InvalidArgument("task example has an empty gold answer");
    for (const Tokens& n : negatives)
      if (n == gold) throw InvalidArgument("task example lists its gold answer among the negatives");
  }

  bool operator==(const TaskExample&) const = default;
};

struct PreferencePair {
  Tokens prompt;
  Tokens chosen;
  Tokens rejected;

  void validate() const {
    if (prompt.empty() || chosen.empty() || rejected.empty()) throw InvalidArgument("preference pair has an empty field");
    if (chosen == rejected) throw InvalidArgument("preference pair has chosen == rejected");
  }

  bool operator==(const PreferencePair&) const = default;
};

}  // namespace lofit
