#pragma once

// Exact synthetic languages. A MarkovSource of order m draws its first m
// tokens i.i.d. from an initial distribution and every later token from a
// table indexed by the previous m tokens. Everything below is computed by
// table lookup or exhaustive enumeration, never by sampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "agr/data.hpp"
#include "agr/refine.hpp"

namespace agr {

class MarkovSource {
 public:
  MarkovSource() = default;

  /// `table` has V^order rows of V entries; row index is the base-V number
  /// formed by the previous `order` tokens, oldest most significant.
  MarkovSource(std::size_t vocab, std::size_t order, std::vector<double> initial, std::vector<double> table)
      : vocab_(vocab), order_(order), initial_(std::move(initial)), table_(std::move(table)) {
    validate();
  }

  std::size_t vocab_size() const { return vocab_; }
  std::size_t order() const { return order_; }
  std::size_t rows() const { return table_.size() / vocab_; }
  std::span<const double> initial() const { return initial_; }
  std::span<const double> row(std::size_t r) const { return std::span(table_).subspan(r * vocab_, vocab_); }

  void validate(double tol = 1e-12) const {
    if (vocab_ < 1) throw Error("markov source: vocabulary must be non-empty");
    std::size_t n_rows = 1;
    for (std::size_t i = 0; i < order_; ++i) {
      if (n_rows > (std::size_t{1} << 32) / vocab_) throw Error("markov source: table too large");
      n_rows *= vocab_;
    }
    if (table_.size() != n_rows * vocab_) {
      throw Error("markov source: table has " + std::to_string(table_.size()) + " entries, expected " +
                  std::to_string(n_rows * vocab_));
    }
    if (initial_.size() != vocab_) throw Error("markov source: initial distribution has the wrong size");
    auto check = [&](std::span<const double> d, const std::string& what) {
      double s = 0;
      for (double p : d) {
        if (!(p >= 0) || !std::isfinite(p)) throw Error("markov source: negative or non-finite entry in " + what);
        s += p;
      }
      if (std::abs(s - 1.0) > tol) throw Error("markov source: " + what + " sums to " + std::to_string(s));
    };
    check(initial_, "initial distribution");
    for (std::size_t r = 0; r < n_rows; ++r) check(row(r), "row " + std::to_string(r));
  }

  /// p(y_t | context), t = context.size(). Contexts shorter than the order
  /// use the initial distribution.
  std::vector<double> next_dist(std::span<const TokenId> context) const {
    check_ids(context);
    const auto d = row_for(context.last(std::min(context.size(), order_)), context.size());
    return {d.begin(), d.end()};
  }

  double joint(std::span<const TokenId> seq) const {
    double p = 1.0;
    for (std::size_t i = 0; i < seq.size() && p > 0; ++i) p *= next_dist(seq.first(i))[seq[i]];
    return p;
  }

  std::vector<TokenId> sample(std::size_t n, std::mt19937_64& rng) const {
    std::vector<TokenId> out;
    out.reserve(n);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto d = row_for(std::span<const TokenId>(out).last(std::min(out.size(), order_)), i);
      double x = u(rng);
      std::size_t y = 0;
      while (y + 1 < vocab_ && (x -= d[y]) >= 0) ++y;
      out.push_back(static_cast<TokenId>(y));
    }
    return out;
  }

  // -------------------------------------------------------------------------
  // Constructors for the standard sources.

  /// Rows and initial distribution drawn from a symmetric Dirichlet(alpha).
  static MarkovSource seeded(std::size_t vocab, std::size_t order, std::uint64_t seed, double alpha = 1.0) {
    std::mt19937_64 rng(seed);
    std::gamma_distribution<double> g(alpha, 1.0);
    auto dirichlet = [&](std::vector<double>& out, std::size_t at) {
      double s = 0;
      for (std::size_t i = 0; i < vocab; ++i) s += out[at + i] = std::max(g(rng), 1e-300);
      for (std::size_t i = 0; i < vocab; ++i) out[at + i] /= s;
    };
    std::vector<double> init(vocab);
    dirichlet(init, 0);
    std::size_t n_rows = 1;
    for (std::size_t i = 0; i < order; ++i) n_rows *= vocab;
    std::vector<double> table(n_rows * vocab);
    for (std::size_t r = 0; r < n_rows; ++r) dirichlet(table, r * vocab);
    return MarkovSource(vocab, order, std::move(init), std::move(table));
  }

  static MarkovSource uniform(std::size_t vocab, std::size_t order = 1) {
    std::size_t n_rows = 1;
    for (std::size_t i = 0; i < order; ++i) n_rows *= vocab;
    const double u = 1.0 / static_cast<double>(vocab);
    return MarkovSource(vocab, order, std::vector<double>(vocab, u), std::vector<double>(n_rows * vocab, u));
  }

  /// Order 1, each token repeats forever: p(a | a) = 1.
  static MarkovSource identity(std::size_t vocab) { return shift(vocab, 0); }

  /// Order 1, a -> a + 1 mod V.
  static MarkovSource cycle(std::size_t vocab) { return shift(vocab, 1); }

  /// Order m: the first m tokens are uniform noise and y_n = y_{n-m} after
  /// that, so y_m copies y_0 across m - 1 noise tokens.
  static MarkovSource copy(std::size_t vocab, std::size_t period) {
    if (period < 1) throw Error("copy source: period must be >= 1");
    std::size_t n_rows = 1;
    for (std::size_t i = 0; i < period; ++i) n_rows *= vocab;
    std::vector<double> table(n_rows * vocab, 0.0);
    std::size_t oldest_unit = n_rows / vocab;
    for (std::size_t r = 0; r < n_rows; ++r) table[r * vocab + r / oldest_unit] = 1.0;
    return MarkovSource(vocab, period, std::vector<double>(vocab, 1.0 / static_cast<double>(vocab)),
                        std::move(table));
  }

  nlohmann::json to_json() const {
    return {{"vocab", vocab_}, {"order", order_}, {"initial", initial_}, {"table", table_}};
  }

  static MarkovSource from_json(const nlohmann::json& j) {
    try {
      return MarkovSource(j.at("vocab").get<std::size_t>(), j.at("order").get<std::size_t>(),
                          j.at("initial").get<std::vector<double>>(), j.at("table").get<std::vector<double>>());
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("markov source JSON: ") + e.what());
    }
  }

  static MarkovSource load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open source table " + path.string());
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error("source table " + path.string() + ": " + e.what());
    }
  }

 private:
  // `recent` holds the last min(order, position) tokens.
  std::span<const double> row_for(std::span<const TokenId> recent, std::size_t position) const {
    if (position < order_) return initial_;
    std::size_t r = 0;
    for (TokenId id : recent) r = r * vocab_ + static_cast<std::size_t>(id);
    return row(r);
  }

  static MarkovSource shift(std::size_t vocab, std::size_t by) {
    std::vector<double> table(vocab * vocab, 0.0);
    for (std::size_t a = 0; a < vocab; ++a) table[a * vocab + (a + by) % vocab] = 1.0;
    return MarkovSource(vocab, 1, std::vector<double>(vocab, 1.0 / static_cast<double>(vocab)), std::move(table));
  }

  void check_ids(std::span<const TokenId> ids) const {
    for (TokenId id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_) {
        throw Error("token id " + std::to_string(id) + " outside a source vocabulary of " + std::to_string(vocab_));
      }
    }
  }

  std::size_t vocab_ = 0;
  std::size_t order_ = 0;
  std::vector<double> initial_;
  std::vector<double> table_;
};

inline std::vector<double> exact_next_dist(const MarkovSource& src, std::span<const TokenId> context) {
  return src.next_dist(context);
}

class ImpossiblePairError : public Error {
 public:
  using Error::Error;
};

/// p(y_{t-1} = x | y_{<t-1} = prefix, y_t = last) by Bayes' rule over all x.
inline std::vector<double> exact_second_to_last_dist(const MarkovSource& src, std::span<const TokenId> prefix,
                                                     TokenId last) {
  const std::size_t V = src.vocab_size();
  std::vector<double> out = src.next_dist(prefix);
  std::vector<TokenId> ctx(prefix.begin(), prefix.end());
  ctx.push_back(0);
  double total = 0;
  for (std::size_t x = 0; x < V; ++x) {
    if (out[x] == 0) continue;
    ctx.back() = static_cast<TokenId>(x);
    out[x] *= src.next_dist(ctx)[static_cast<std::size_t>(last)];
    total += out[x];
  }
  if (!(total > 0)) {
    throw ImpossiblePairError("second-to-last distribution undefined: token " + std::to_string(last) +
                              " cannot follow the given prefix");
  }
  for (auto& p : out) p /= total;
  return out;
}

/// Total variation distance, half the L1 distance.
inline double total_variation(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

// ---------------------------------------------------------------------------
// Locality.

struct PointwiseGap {
  std::vector<TokenId> context;  // y_0..y_{t-1}, y_{t+1}
  double weight = 0;             // probability of the context
  double uni = 0;
  double bi = 0;
};

struct LocalityReport {
  std::size_t t = 0;
  double uni = 0;        // E TV(p(y_t | y_{i!=t}), p(y_t | y_0..y_{t-1}))
  double bi = 0;         // E TV(p(y_t | y_{i!=t}), p(y_t | y_1..y_{t-1}, y_{t+1}))
  double gap = 0;        // uni - bi
  double worst_uni = 0;  // max over contexts with positive probability
  double worst_bi = 0;
  std::string metric = "total_variation";
  std::vector<PointwiseGap> pointwise;  // filled on request
};

inline constexpr std::size_t kDefaultEnumerationBudget = std::size_t{1} << 24;

/// Sequences y_0..y_{t+1} are enumerated exhaustively; the three conditionals
/// of y_t are read off the joint table by marginalization.
inline LocalityReport locality_gap(const MarkovSource& src, std::size_t t, bool keep_pointwise = false,
                                   std::size_t budget = kDefaultEnumerationBudget) {
  if (t < 1) throw Error("locality_gap: t must be >= 1");
  const std::size_t V = src.vocab_size();
  const std::size_t n = t + 2;
  std::size_t total = 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (total > budget / V) {
      throw Error("locality_gap: V^(t+2) = " + std::to_string(V) + "^" + std::to_string(n) +
                  " sequences exceed the enumeration budget of " + std::to_string(budget));
    }
    total *= V;
  }
  // Joint table, y_0 most significant digit, filled by extending prefixes.
  std::vector<double> joint(total);
  {
    std::vector<double> level{1.0};
    std::vector<TokenId> seq;
    for (std::size_t pos = 0; pos < n; ++pos) {
      std::vector<double> next(level.size() * V);
      for (std::size_t idx = 0; idx < level.size(); ++idx) {
        if (level[idx] == 0) continue;
        seq.assign(pos, 0);
        for (std::size_t i = pos, rest = idx; i-- > 0; rest /= V) seq[i] = static_cast<TokenId>(rest % V);
        const auto d = src.next_dist(seq);
        for (std::size_t y = 0; y < V; ++y) next[idx * V + y] = level[idx] * d[y];
      }
      level.swap(next);
    }
    joint.swap(level);
  }
  // Strides of y_0 and y_t in the index; y_{t+1} has stride 1.
  const std::size_t s0 = total / V;
  const std::size_t st = V;

  // uni[prefix y_0..y_{t-1}][y_t] and bi[y_1..y_{t-1}, y_{t+1}][y_t], both
  // unnormalized, keyed by the index with y_t (and y_{t+1} or y_0) zeroed.
  std::vector<double> uni(total, 0.0), bi(total, 0.0);
  for (std::size_t idx = 0; idx < total; ++idx) {
    if (joint[idx] == 0) continue;
    const std::size_t y_next = idx % V;
    const std::size_t y0 = idx / s0;
    uni[idx - y_next] += joint[idx];
    bi[idx - y0 * s0] += joint[idx];
  }

  LocalityReport rep;
  rep.t = t;
  std::vector<double> full(V), pu(V), pb(V);
  // Iterate over contexts: all indices with y_t = 0.
  for (std::size_t base = 0; base < total; ++base) {
    if ((base / st) % V != 0) continue;
    double w = 0;
    for (std::size_t y = 0; y < V; ++y) w += joint[base + y * st];
    if (w == 0) continue;
    const std::size_t y_next = base % V;
    const std::size_t y0 = base / s0;
    double su = 0, sb = 0;
    for (std::size_t y = 0; y < V; ++y) {
      const std::size_t idx = base + y * st;
      full[y] = joint[idx] / w;
      pu[y] = uni[idx - y_next];
      pb[y] = bi[idx - y0 * s0];
      su += pu[y];
      sb += pb[y];
    }
    for (std::size_t y = 0; y < V; ++y) {
      pu[y] /= su;
      pb[y] /= sb;
    }
    const double du = total_variation(full, pu);
    const double db = total_variation(full, pb);
    rep.uni += w * du;
    rep.bi += w * db;
    rep.worst_uni = std::max(rep.worst_uni, du);
    rep.worst_bi = std::max(rep.worst_bi, db);
    if (keep_pointwise) {
      PointwiseGap pg;
      pg.weight = w;
      pg.uni = du;
      pg.bi = db;
      for (std::size_t i = n, rest = base; i-- > 0; rest /= V) {
        if (i != t) pg.context.insert(pg.context.begin(), static_cast<TokenId>(rest % V));
      }
      rep.pointwise.push_back(std::move(pg));
    }
  }
  rep.gap = rep.uni - rep.bi;
  return rep;
}

// ---------------------------------------------------------------------------
// Exact models.

/// log p from the source, with zero probabilities mapped to a large finite
/// negative value so candidate ordering stays well defined.
class OracleNext {
 public:
  explicit OracleNext(const MarkovSource& src) : src_(src) {}
  std::size_t vocab_size() const { return src_.vocab_size(); }
  std::vector<std::vector<double>> next_logits(const std::vector<std::vector<TokenId>>& contexts) const {
    std::vector<std::vector<double>> out;
    out.reserve(contexts.size());
    for (const auto& c : contexts) {
      auto d = src_.next_dist(c);
      for (auto& p : d) p = p > 0 ? std::log(p) : kZeroLogit;
      out.push_back(std::move(d));
    }
    return out;
  }
  static constexpr double kZeroLogit = -1e4;

 private:
  const MarkovSource& src_;
};

/// argmax of the exact second-to-last distribution. A candidate that cannot
/// follow the prefix at all gets the guess -1, which never matches.
class OracleRefiner {
 public:
  explicit OracleRefiner(const MarkovSource& src) : src_(src) {}
  std::size_t min_context() const { return 2; }
  std::vector<std::vector<TokenId>> second_to_last_argmax(const std::vector<std::vector<TokenId>>& contexts,
                                                          const std::vector<std::vector<TokenId>>& candidates) const {
    std::vector<std::vector<TokenId>> out(contexts.size());
    for (std::size_t i = 0; i < contexts.size(); ++i) {
      const auto& c = contexts[i];
      if (c.size() < min_context()) continue;
      const std::span<const TokenId> prefix(c.data(), c.size() - 1);
      for (TokenId cand : candidates[i]) {
        try {
          const auto d = exact_second_to_last_dist(src_, prefix, cand);
          out[i].push_back(static_cast<TokenId>(kernels::argmax<double>(d)));
        } catch (const ImpossiblePairError&) {
          out[i].push_back(-1);
        }
      }
    }
    return out;
  }

 private:
  const MarkovSource& src_;
};

// ---------------------------------------------------------------------------
// Expected accuracy under a noisy refiner.

enum class VerdictModel {
  kCorrectness,  // verdict = (candidate is the true next token), then flipped
  kRefiner,      // verdict of the exact second-to-last oracle, then flipped
};

struct SweepRow {
  std::size_t k = 0;
  double w = 0;
  double epsilon = 0;
  double plain = 0;  // expected accuracy of the next-token argmax
  double agr = 0;    // expected accuracy of AGR
  double delta() const { return agr - plain; }
};

/// Expected accuracies over all contexts of length t (weighted by their
/// probability under the source) with exact next-token probabilities and
/// verdicts flipped independently with probability epsilon. All 2^k flip
/// patterns are enumerated, so the result is exact.
inline std::vector<SweepRow> oracle_agr_sweep(const MarkovSource& src, std::size_t t, std::span<const std::size_t> ks,
                                              std::span<const double> ws, std::span<const double> epsilons,
                                              VerdictModel model = VerdictModel::kCorrectness,
                                              std::size_t budget = kDefaultEnumerationBudget) {
  const std::size_t V = src.vocab_size();
  if (t < 2) throw Error("oracle_agr_sweep: t must be >= 2");
  for (std::size_t k : ks) {
    if (k < 1 || k > V || k > 20) throw Error("oracle_agr_sweep: k must be in [1, min(V, 20)]");
  }
  for (double e : epsilons) {
    if (!(e >= 0 && e <= 1)) throw Error("oracle_agr_sweep: epsilon must be in [0, 1]");
  }
  const std::size_t k_max = ks.empty() ? 0 : *std::max_element(ks.begin(), ks.end());
  std::size_t n_ctx = 1;
  for (std::size_t i = 0; i < t; ++i) {
    if (n_ctx > budget / V) throw Error("oracle_agr_sweep: V^t contexts exceed the enumeration budget");
    n_ctx *= V;
  }
  if (n_ctx * V * (std::size_t{1} << k_max) > budget * 64) {
    throw Error("oracle_agr_sweep: contexts x flip patterns exceed the enumeration budget");
  }

  std::vector<SweepRow> rows;
  for (std::size_t k : ks) {
    for (double w : ws) {
      for (double e : epsilons) rows.push_back(SweepRow{k, w, e, 0, 0});
    }
  }
  std::vector<TokenId> ctx(t);
  for (std::size_t idx = 0; idx < n_ctx; ++idx) {
    for (std::size_t i = t, rest = idx; i-- > 0; rest /= V) ctx[i] = static_cast<TokenId>(rest % V);
    const double weight = src.joint(ctx);
    if (weight == 0) continue;
    const auto p = src.next_dist(ctx);
    const auto cands = top_k_candidates<double>(p, k_max);
    std::vector<std::uint8_t> refiner_verdict(k_max, 0);
    if (model == VerdictModel::kRefiner) {
      const auto guesses = OracleRefiner(src).second_to_last_argmax({ctx}, {cands})[0];
      for (std::size_t i = 0; i < k_max; ++i) refiner_verdict[i] = guesses[i] == ctx.back();
    }
    std::vector<double> cand_p(k_max);
    for (std::size_t i = 0; i < k_max; ++i) cand_p[i] = p[static_cast<std::size_t>(cands[i])];
    const std::size_t plain = 0;

    for (auto& row : rows) {
      const std::size_t k = row.k;
      row.plain += weight * cand_p[plain];
      // AGR accuracy is accumulated as plain + (gain of each pattern), so a
      // pattern that never changes the choice contributes exactly zero.
      double gain = 0;
      std::vector<std::uint8_t> v(k);
      for (std::size_t truth = 0; truth <= k; ++truth) {
        // truth == k: the true token is outside the candidates.
        double p_truth = 0;
        if (model == VerdictModel::kCorrectness) {
          if (truth < k) {
            p_truth = cand_p[truth];
          } else {
            p_truth = 1.0;
            for (std::size_t i = 0; i < k; ++i) p_truth -= cand_p[i];
            p_truth = std::max(0.0, p_truth);
          }
        } else if (truth > 0) {
          break;  // verdicts do not depend on the truth
        }
        for (std::size_t mask = 0; mask < (std::size_t{1} << k); ++mask) {
          double pm = 1.0;
          for (std::size_t i = 0; i < k; ++i) {
            const bool base = model == VerdictModel::kCorrectness ? i == truth : refiner_verdict[i] != 0;
            const bool flipped = (mask >> i) & 1u;
            v[i] = base != flipped;
            pm *= flipped ? row.epsilon : 1.0 - row.epsilon;
          }
          if (pm == 0) continue;
          const std::size_t choice =
              select_prob_space(std::span(cand_p).first(k), v, std::span(cands).first(k), row.w);
          if (choice == plain) continue;
          if (model == VerdictModel::kCorrectness) {
            const double hit_choice = choice == truth ? 1.0 : 0.0;
            const double hit_plain = plain == truth ? 1.0 : 0.0;
            gain += p_truth * pm * (hit_choice - hit_plain);
          } else {
            gain += pm * (cand_p[choice] - cand_p[plain]);
          }
        }
      }
      row.agr += weight * gain;
    }
  }
  for (auto& row : rows) row.agr += row.plain;
  return rows;
}

}  // namespace agr
