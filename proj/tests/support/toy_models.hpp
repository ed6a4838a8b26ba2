#pragma once

// Small deterministic stand-ins for the two models, used to exercise the
// refinement logic without training anything.

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "agr/refine.hpp"

namespace agr::testing {

inline std::uint64_t hash_tokens(const std::vector<TokenId>& ids, std::uint64_t salt) {
  std::uint64_t h = 1469598103934665603ull ^ salt;
  for (TokenId t : ids) {
    h ^= static_cast<std::uint64_t>(t) + 0x9E3779B97F4A7C15ull;
    h *= 1099511628211ull;
    h ^= h >> 29;
  }
  // splitmix64 finalizer so the last token reaches the high bits.
  h = (h ^ (h >> 30)) * 0xBF58476D1CE4E5B9ull;
  h = (h ^ (h >> 27)) * 0x94D049BB133111EBull;
  return h ^ (h >> 31);
}

/// Logits drawn from N(0, scale) seeded by the context.
struct HashNext {
  std::size_t vocab = 10;
  double scale = 2.0;
  std::uint64_t salt = 1;

  std::size_t vocab_size() const { return vocab; }
  std::vector<std::vector<double>> next_logits(const std::vector<std::vector<TokenId>>& contexts) const {
    std::vector<std::vector<double>> out;
    for (const auto& c : contexts) {
      std::mt19937_64 rng(hash_tokens(c, salt));
      std::normal_distribution<double> n(0.0, scale);
      std::vector<double> row(vocab);
      for (auto& x : row) x = n(rng);
      out.push_back(std::move(row));
    }
    return out;
  }
};

/// Recovers the previous token for a pseudo-random subset of candidates
/// (about `hit_rate` of them) and guesses a fixed wrong token otherwise.
struct HashRefiner {
  std::size_t vocab = 10;
  double hit_rate = 0.3;
  std::size_t min_ctx = 2;
  std::uint64_t salt = 2;

  std::size_t min_context() const { return min_ctx; }
  std::vector<std::vector<TokenId>> second_to_last_argmax(const std::vector<std::vector<TokenId>>& contexts,
                                                          const std::vector<std::vector<TokenId>>& candidates) const {
    std::vector<std::vector<TokenId>> out;
    for (std::size_t i = 0; i < contexts.size(); ++i) {
      std::vector<TokenId> row;
      for (TokenId c : candidates[i]) {
        auto key = contexts[i];
        key.push_back(c);
        const double u = static_cast<double>(hash_tokens(key, salt) >> 11) * 0x1.0p-53;
        const TokenId prev = contexts[i].back();
        row.push_back(u < hit_rate ? prev : static_cast<TokenId>((prev + 1) % static_cast<TokenId>(vocab)));
      }
      out.push_back(std::move(row));
    }
    return out;
  }
};

/// Same logits for every context.
struct FixedNext {
  std::vector<double> logits;
  std::size_t vocab_size() const { return logits.size(); }
  std::vector<std::vector<double>> next_logits(const std::vector<std::vector<TokenId>>& contexts) const {
    return std::vector<std::vector<double>>(contexts.size(), logits);
  }
};

/// Verdict true exactly for the listed candidates.
struct FixedRefiner {
  std::vector<TokenId> confirmed;
  std::size_t min_context() const { return 2; }
  std::vector<std::vector<TokenId>> second_to_last_argmax(const std::vector<std::vector<TokenId>>& contexts,
                                                          const std::vector<std::vector<TokenId>>& candidates) const {
    std::vector<std::vector<TokenId>> out;
    for (std::size_t i = 0; i < contexts.size(); ++i) {
      std::vector<TokenId> row;
      for (TokenId c : candidates[i]) {
        const bool yes = std::find(confirmed.begin(), confirmed.end(), c) != confirmed.end();
        row.push_back(yes ? contexts[i].back() : contexts[i].back() + 1);
      }
      out.push_back(std::move(row));
    }
    return out;
  }
};

/// Exact models of the sequence 0, 1, ..., V-1, 0, 1, ...
struct CycleNext {
  std::size_t vocab = 7;
  std::size_t vocab_size() const { return vocab; }
  std::vector<std::vector<double>> next_logits(const std::vector<std::vector<TokenId>>& contexts) const {
    std::vector<std::vector<double>> out;
    for (const auto& c : contexts) {
      std::vector<double> row(vocab, 0.0);
      row[(static_cast<std::size_t>(c.back()) + 1) % vocab] = 5.0;
      out.push_back(std::move(row));
    }
    return out;
  }
};

struct CycleRefiner {
  std::size_t vocab = 7;
  std::size_t min_context() const { return 2; }
  std::vector<std::vector<TokenId>> second_to_last_argmax(const std::vector<std::vector<TokenId>>& contexts,
                                                          const std::vector<std::vector<TokenId>>& candidates) const {
    std::vector<std::vector<TokenId>> out;
    for (std::size_t i = 0; i < contexts.size(); ++i) {
      std::vector<TokenId> row;
      for (TokenId c : candidates[i]) row.push_back(static_cast<TokenId>((c + vocab - 1) % vocab));
      out.push_back(std::move(row));
    }
    return out;
  }
};

inline std::vector<TokenId> random_context(std::mt19937_64& rng, std::size_t vocab, std::size_t min_len,
                                           std::size_t max_len) {
  std::vector<TokenId> c(min_len + rng() % (max_len - min_len + 1));
  for (auto& t : c) t = static_cast<TokenId>(rng() % vocab);
  return c;
}

}  // namespace agr::testing
