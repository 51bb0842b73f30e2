#pragma once

#include <vector>

namespace lofit {

using Tokens = std::vector<int>;

/// Reserved ids of the synthetic vocabulary shared by every task.
namespace vocab {

inline constexpr int kPad = 0;
inline constexpr int kEos = 1;
inline constexpr int kBos = 2;
inline constexpr int kEdit = 3;   // "imagine that" edit prefix
inline constexpr int kQuery = 4;  // question marker
inline constexpr int kAnswer = 5; // answer marker
inline constexpr int kSep = 6;    // fact separator

// Style slot (position 1 of every prompt). Task prompts always carry kPlain;
// the pretraining corpora also use one latent-behaviour token per task.
inline constexpr int kPlain = 7;
inline constexpr int kStyleCompose = 8;
inline constexpr int kStyleEdit = 9;
inline constexpr int kStyleTruth = 10;

inline constexpr int kRelationBase = 16;  // 24 relation / attribute ids
inline constexpr int kRelationCount = 24;
inline constexpr int kContentBase = 40;   // entities and answer words
inline constexpr int kDefaultSize = 200;

inline constexpr int content_count(int vocab_size) { return vocab_size - kContentBase; }

}  // namespace vocab
}  // namespace lofit
