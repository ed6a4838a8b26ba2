#pragma once

// Generate-then-refine decoding step. The next-token model proposes its top-k
// tokens; for each candidate the second-to-last model is asked to recover the
// observed previous token with that candidate placed after it, and every
// candidate it recovers gets its probability multiplied by (1 + w).

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "agr/data.hpp"
#include "agr/inference.hpp"
#include "agr/kernels.hpp"
#include "agr/model.hpp"

namespace agr {

struct RefineConfig {
  std::size_t k = 15;
  double w = 0.05;
  std::size_t l = 4;

  void validate(std::size_t vocab_size) const {
    if (k < 1) throw Error("refine config: k must be >= 1");
    if (k > vocab_size) {
      throw Error("refine config: k=" + std::to_string(k) + " exceeds the vocabulary size " +
                  std::to_string(vocab_size));
    }
    if (!(w >= 0)) throw Error("refine config: w must be >= 0");
    if (l < 2) throw Error("refine config: l must be >= 2");
  }
};

/// The k ids with the largest logits, in descending order; ties go to the
/// lower id.
template <typename T>
std::vector<TokenId> top_k_candidates(std::span<const T> logits, std::size_t k) {
  if (k > logits.size()) {
    throw Error("top_k_candidates: k=" + std::to_string(k) + " exceeds " + std::to_string(logits.size()) +
                " logits");
  }
  std::vector<TokenId> ids(logits.size());
  std::iota(ids.begin(), ids.end(), 0);
  auto before = [&](TokenId a, TokenId b) {
    const T la = logits[static_cast<std::size_t>(a)];
    const T lb = logits[static_cast<std::size_t>(b)];
    return la > lb || (la == lb && a < b);
  };
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), before);
  ids.resize(k);
  return ids;
}

/// Length of the refiner window for a context of t tokens: the largest
/// multiple of l not exceeding min(t, block_size). Zero means "fall back".
inline std::size_t refiner_window_length(std::size_t t, std::size_t l, std::size_t block_size) {
  if (t < 2 || t < l) return 0;
  return std::min(t, block_size) / l * l;
}

struct RefinerInput {
  std::vector<TokenId> window;  // length T', ends with the candidate
  TokenId expected = 0;         // y_{t-1}; absent from the window
};

/// Window o = (y_{t-T'}, ..., y_{t-1}, candidate) is block-swapped and its
/// first T' tokens kept, which reproduces the layout of a training window at
/// its final loss position. nullopt when the context is too short.
inline std::optional<RefinerInput> build_refiner_input(std::span<const TokenId> context, TokenId candidate,
                                                       std::size_t l, std::size_t block_size) {
  const std::size_t t = context.size();
  const std::size_t len = refiner_window_length(t, l, block_size);
  if (len == 0) return std::nullopt;
  std::vector<TokenId> o(context.end() - static_cast<std::ptrdiff_t>(len), context.end());
  o.push_back(candidate);
  auto permuted = block_swap_permute<TokenId>(o, l);
  permuted.pop_back();
  return RefinerInput{std::move(permuted), context.back()};
}

/// The part of every candidate's window that does not depend on the candidate
/// (the first T'-1 tokens).
inline std::vector<TokenId> refiner_shared_prefix(std::span<const TokenId> context, std::size_t l,
                                                  std::size_t block_size) {
  const std::size_t len = refiner_window_length(context.size(), l, block_size);
  if (len == 0) return {};
  auto in = build_refiner_input(context, 0, l, block_size);
  in->window.pop_back();
  return in->window;
}

// ---------------------------------------------------------------------------
// Model interfaces. Both are batched: one call covers many contexts.

/// Logits of the next token for each context.
template <typename M>
concept NextTokenModel = requires(const M& m, const std::vector<std::vector<TokenId>>& contexts) {
  { m.vocab_size() } -> std::convertible_to<std::size_t>;
  { m.next_logits(contexts) } -> std::same_as<std::vector<std::vector<double>>>;
};

/// For context y_{<t} (whose last token is y_{t-1}) and each candidate c, the
/// refiner's argmax for the second-to-last token given (y_{<t-1}, c). Returns
/// one vector per context; entries for contexts below refiner_min_context()
/// may be empty.
template <typename M>
concept SecondToLastModel = requires(const M& m, const std::vector<std::vector<TokenId>>& contexts,
                                     const std::vector<std::vector<TokenId>>& candidates) {
  { m.second_to_last_argmax(contexts, candidates) } -> std::same_as<std::vector<std::vector<TokenId>>>;
  { m.min_context() } -> std::convertible_to<std::size_t>;
};

// ---------------------------------------------------------------------------
// Combination rule.

struct RefineTrace {
  std::vector<TokenId> candidates;     // descending next-token logit
  std::vector<double> log_probs;       // log p_n of each candidate
  std::vector<TokenId> refiner_argmax;  // refiner's guess for y_{t-1} per candidate
  std::vector<std::uint8_t> verdicts;  // refiner_argmax == y_{t-1}
  std::vector<double> scores;          // log p_n + verdict * ln(1 + w)
  TokenId chosen = 0;
  TokenId plain = 0;                   // next-token argmax
  bool fallback = false;               // context too short; chosen == plain
};

namespace detail {

// Relative tolerance for treating two scores as tied, so the probability and
// log-space paths resolve rounding-level differences the same way.
inline constexpr double kTieTolerance = 1e-12;

inline bool beats(double score, TokenId id, double best, TokenId best_id, double scale) {
  const double tol = kTieTolerance * scale;
  if (score > best + tol) return true;
  if (score < best - tol) return false;
  return id < best_id;
}

}  // namespace detail

/// argmax over candidates of logit + verdict * ln(1 + w). Logits need not be
/// normalized: a shared shift does not change the winner.
inline std::size_t select_log_space(std::span<const double> logits, std::span<const std::uint8_t> verdicts,
                                    std::span<const TokenId> ids, double w) {
  const double boost = std::log1p(w);
  std::size_t best = 0;
  double best_score = logits[0] + (verdicts[0] ? boost : 0.0);
  for (std::size_t i = 1; i < logits.size(); ++i) {
    const double s = logits[i] + (verdicts[i] ? boost : 0.0);
    const double scale = std::max({1.0, std::abs(s), std::abs(best_score)});
    if (detail::beats(s, ids[i], best_score, ids[best], scale)) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

/// argmax over candidates of p * (1 + w * verdict).
inline std::size_t select_prob_space(std::span<const double> probs, std::span<const std::uint8_t> verdicts,
                                     std::span<const TokenId> ids, double w) {
  std::size_t best = 0;
  double best_score = probs[0] * (1.0 + w * verdicts[0]);
  for (std::size_t i = 1; i < probs.size(); ++i) {
    const double s = probs[i] * (1.0 + w * verdicts[i]);
    if (detail::beats(s, ids[i], best_score, ids[best], std::max(s, best_score))) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

/// Builds the trace from the full next-token logits and the refiner's
/// guesses for the top-k candidates.
inline RefineTrace combine(std::span<const double> logits, TokenId previous, std::span<const TokenId> candidates,
                           std::span<const TokenId> refiner_argmax, double w) {
  RefineTrace tr;
  const double lse = kernels::log_sum_exp<double>(logits);
  tr.candidates.assign(candidates.begin(), candidates.end());
  tr.refiner_argmax.assign(refiner_argmax.begin(), refiner_argmax.end());
  tr.plain = candidates[0];
  const double boost = std::log1p(w);
  std::vector<double> cand_logits;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double z = logits[static_cast<std::size_t>(candidates[i])];
    cand_logits.push_back(z);
    tr.log_probs.push_back(z - lse);
    tr.verdicts.push_back(refiner_argmax[i] == previous ? 1 : 0);
    tr.scores.push_back(tr.log_probs.back() + (tr.verdicts.back() ? boost : 0.0));
  }
  tr.chosen = candidates[select_log_space(cand_logits, tr.verdicts, candidates, w)];
  return tr;
}

inline RefineTrace fallback_trace(std::span<const double> logits) {
  RefineTrace tr;
  tr.fallback = true;
  tr.plain = tr.chosen = static_cast<TokenId>(kernels::argmax<double>(logits));
  return tr;
}

/// Refines one step for each context. Contexts shorter than max(2, l) or than
/// the refiner's minimum fall back to the plain next-token argmax.
template <NextTokenModel Fn, SecondToLastModel Fs>
std::vector<RefineTrace> agr_predict_batch(const Fn& f_n, const Fs& f_s,
                                           const std::vector<std::vector<TokenId>>& contexts,
                                           const RefineConfig& cfg) {
  cfg.validate(f_n.vocab_size());
  const auto logits = f_n.next_logits(contexts);
  std::vector<std::vector<TokenId>> cands(contexts.size());
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    const std::size_t t = contexts[i].size();
    if (t < 2 || t < cfg.l || t < f_s.min_context()) continue;
    cands[i] = top_k_candidates<double>(logits[i], cfg.k);
    active.push_back(i);
  }
  std::vector<std::vector<TokenId>> sub_ctx, sub_cand;
  for (std::size_t i : active) {
    sub_ctx.push_back(contexts[i]);
    sub_cand.push_back(cands[i]);
  }
  const auto guesses = sub_ctx.empty() ? std::vector<std::vector<TokenId>>{} : f_s.second_to_last_argmax(sub_ctx, sub_cand);
  std::vector<RefineTrace> out(contexts.size());
  std::vector<bool> done(contexts.size(), false);
  for (std::size_t j = 0; j < active.size(); ++j) {
    const std::size_t i = active[j];
    out[i] = combine(logits[i], contexts[i].back(), cands[i], guesses[j], cfg.w);
    done[i] = true;
  }
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    if (!done[i]) out[i] = fallback_trace(logits[i]);
  }
  return out;
}

template <NextTokenModel Fn, SecondToLastModel Fs>
RefineTrace agr_predict(const Fn& f_n, const Fs& f_s, std::span<const TokenId> context, const RefineConfig& cfg) {
  std::vector<std::vector<TokenId>> one{std::vector<TokenId>(context.begin(), context.end())};
  return agr_predict_batch(f_n, f_s, one, cfg)[0];
}

// ---------------------------------------------------------------------------
// Transformer adapters.

/// Next-token logits from a causal transformer. Contexts longer than the
/// block size keep their last block_size tokens.
class TransformerNext {
 public:
  explicit TransformerNext(const TransformerParams<float>& p, std::size_t chunk = 64) : p_(p), chunk_(chunk) {}

  std::size_t vocab_size() const { return p_.config.vocab_size; }

  std::vector<std::vector<double>> next_logits(const std::vector<std::vector<TokenId>>& contexts) const {
    std::vector<std::vector<double>> out(contexts.size());
    std::map<std::size_t, std::vector<std::size_t>> by_len;
    for (std::size_t i = 0; i < contexts.size(); ++i) {
      if (contexts[i].empty()) throw Error("next_logits: empty context");
      by_len[std::min(contexts[i].size(), p_.config.block_size)].push_back(i);
    }
    for (const auto& [len, rows] : by_len) {
      for (std::size_t start = 0; start < rows.size(); start += chunk_) {
        const std::size_t n = std::min(chunk_, rows.size() - start);
        std::vector<TokenId> prefixes, queries;
        for (std::size_t r = start; r < start + n; ++r) {
          const auto& c = contexts[rows[r]];
          prefixes.insert(prefixes.end(), c.end() - static_cast<std::ptrdiff_t>(len), c.end() - 1);
          queries.push_back(c.back());
        }
        const auto logits = last_position_logits(p_, prefixes, n, len - 1, queries, 1);
        for (std::size_t r = 0; r < n; ++r) {
          auto row = logits.row(r);
          out[rows[start + r]].assign(row.begin(), row.end());
        }
      }
    }
    return out;
  }

 private:
  const TransformerParams<float>& p_;
  std::size_t chunk_;
};

/// Second-to-last guesses from a transformer trained on block-swapped
/// windows. All candidates of one context share the window prefix, so the
/// prefix is run once and each candidate costs a single position.
class TransformerRefiner {
 public:
  TransformerRefiner(const TransformerParams<float>& p, std::size_t l, std::size_t chunk = 32)
      : p_(p), l_(l), chunk_(chunk) {}

  std::size_t min_context() const { return std::max<std::size_t>(2, l_); }

  std::vector<std::vector<TokenId>> second_to_last_argmax(const std::vector<std::vector<TokenId>>& contexts,
                                                          const std::vector<std::vector<TokenId>>& candidates) const {
    std::vector<std::vector<TokenId>> out(contexts.size());
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < contexts.size(); ++i) {
      const std::size_t len = refiner_window_length(contexts[i].size(), l_, p_.config.block_size);
      if (len == 0 || candidates[i].empty()) continue;
      groups[{len, candidates[i].size()}].push_back(i);
    }
    for (const auto& [key, rows] : groups) {
      const auto [len, nq] = key;
      for (std::size_t start = 0; start < rows.size(); start += chunk_) {
        const std::size_t n = std::min(chunk_, rows.size() - start);
        std::vector<TokenId> prefixes, queries;
        for (std::size_t r = start; r < start + n; ++r) {
          const auto prefix = refiner_shared_prefix(contexts[rows[r]], l_, p_.config.block_size);
          prefixes.insert(prefixes.end(), prefix.begin(), prefix.end());
          queries.insert(queries.end(), candidates[rows[r]].begin(), candidates[rows[r]].end());
        }
        const auto logits = last_position_logits(p_, prefixes, n, len - 1, queries, nq);
        for (std::size_t r = 0; r < n; ++r) {
          auto& dst = out[rows[start + r]];
          for (std::size_t q = 0; q < nq; ++q) {
            dst.push_back(static_cast<TokenId>(kernels::argmax<float>(logits.row(r * nq + q))));
          }
        }
      }
    }
    return out;
  }

 private:
  const TransformerParams<float>& p_;
  std::size_t l_;
  std::size_t chunk_;
};

}  // namespace agr
