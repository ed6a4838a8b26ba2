#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "agr/oracle.hpp"

using namespace agr;

namespace {

// Joint probability read straight from the tables.
double joint_from_tables(const MarkovSource& s, const std::vector<TokenId>& seq) {
  double p = 1;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i < s.order()) {
      p *= s.initial()[seq[i]];
      continue;
    }
    std::size_t r = 0;
    for (std::size_t j = i - s.order(); j < i; ++j) r = r * s.vocab_size() + seq[j];
    p *= s.row(r)[seq[i]];
  }
  return p;
}

// p(y_t | context) by marginalizing the joint over the next symbol.
std::vector<double> conditional_by_enumeration(const MarkovSource& s, std::vector<TokenId> ctx) {
  std::vector<double> d(s.vocab_size());
  double z = 0;
  ctx.push_back(0);
  for (std::size_t y = 0; y < d.size(); ++y) {
    ctx.back() = static_cast<TokenId>(y);
    z += d[y] = joint_from_tables(s, ctx);
  }
  for (auto& x : d) x /= z;
  return d;
}

std::vector<TokenId> digits(std::size_t idx, std::size_t len, std::size_t V) {
  std::vector<TokenId> out(len);
  for (std::size_t i = len; i-- > 0; idx /= V) out[i] = static_cast<TokenId>(idx % V);
  return out;
}

}  // namespace

TEST(MarkovSource, StandardSourcesAreValid) {
  for (const auto& s : {MarkovSource::seeded(5, 2, 1), MarkovSource::uniform(4), MarkovSource::identity(3),
                        MarkovSource::cycle(6), MarkovSource::copy(3, 3), MarkovSource::seeded(4, 0, 9)}) {
    EXPECT_NO_THROW(s.validate(1e-12));
  }
  EXPECT_THROW(MarkovSource(2, 1, {0.5, 0.5}, {0.5, 0.6, 0.5, 0.5}), Error);
  EXPECT_THROW(MarkovSource(2, 1, {0.5, 0.5}, {1.0, 0.0}), Error);
  EXPECT_THROW(MarkovSource(2, 1, {1.5, -0.5}, {1, 0, 0, 1}), Error);
}

TEST(MarkovSource, JsonRoundTrip) {
  const auto s = MarkovSource::seeded(3, 2, 4);
  const auto back = MarkovSource::from_json(nlohmann::json::parse(s.to_json().dump()));
  EXPECT_EQ(back.to_json(), s.to_json());
  EXPECT_THROW(MarkovSource::from_json(nlohmann::json{{"vocab", 2}}), Error);
}

TEST(ExactNext, IdentityAndUniform) {
  const auto id = MarkovSource::identity(4);
  EXPECT_EQ(exact_next_dist(id, std::vector<TokenId>{0, 2}), (std::vector<double>{0, 0, 1, 0}));
  const auto u = MarkovSource::uniform(5, 2);
  for (double p : exact_next_dist(u, std::vector<TokenId>{1, 4, 3})) EXPECT_DOUBLE_EQ(p, 0.2);
}

TEST(ExactNext, SeededRowLookupAndMonteCarlo) {
  const auto s = MarkovSource::seeded(4, 1, 17);
  const std::vector<TokenId> ab{0, 1};
  const auto d = exact_next_dist(s, ab);
  for (std::size_t y = 0; y < 4; ++y) EXPECT_EQ(d[y], s.row(1)[y]);
  std::mt19937_64 rng(3);
  const auto seq = s.sample(200000, rng);
  std::vector<double> hits(4, 0);
  double n = 0;
  for (std::size_t i = 1; i < seq.size(); ++i) {
    if (seq[i - 1] != 1) continue;
    ++n;
    ++hits[seq[i]];
  }
  for (std::size_t y = 0; y < 4; ++y) {
    EXPECT_NEAR(hits[y] / n, d[y], 3 * std::sqrt(d[y] * (1 - d[y]) / n));
  }
}

TEST(SecondToLast, DeterministicChain) {
  const auto c = MarkovSource::cycle(3);
  const auto d = exact_second_to_last_dist(c, std::vector<TokenId>{0}, 2);
  EXPECT_EQ(d, (std::vector<double>{0, 1, 0}));
  EXPECT_THROW(exact_second_to_last_dist(c, std::vector<TokenId>{0}, 0), ImpossiblePairError);
}

TEST(SecondToLast, UniformLastTokenIsUninformative) {
  const auto u = MarkovSource::uniform(4);
  const std::vector<TokenId> prefix{3, 1};
  EXPECT_EQ(exact_second_to_last_dist(u, prefix, 2), exact_next_dist(u, prefix));
}

TEST(SecondToLast, MatchesEnumerationOfCompletions) {
  for (std::size_t order : {1u, 2u}) {
    const auto s = MarkovSource::seeded(3, order, 100 + order);
    for (std::size_t len = 0; len <= 3; ++len) {
      for (std::size_t idx = 0; idx < static_cast<std::size_t>(std::pow(3, len)); ++idx) {
        const auto prefix = digits(idx, len, 3);
        for (TokenId last = 0; last < 3; ++last) {
          std::vector<double> want(3);
          double z = 0;
          for (TokenId x = 0; x < 3; ++x) {
            auto seq = prefix;
            seq.push_back(x);
            seq.push_back(last);
            z += want[x] = joint_from_tables(s, seq);
          }
          const auto got = exact_second_to_last_dist(s, prefix, last);
          for (std::size_t x = 0; x < 3; ++x) EXPECT_NEAR(got[x], want[x] / z, 1e-12);
        }
      }
    }
  }
}

TEST(SecondToLast, MonteCarloAgreementOnTenSources) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t V = 3 + seed % 3;
    const auto s = MarkovSource::seeded(V, 1, 500 + seed);
    std::mt19937_64 rng(seed);
    // Condition on y_1 = 0 and y_3 = 1 in sequences of length 4; estimate y_2.
    const std::vector<TokenId> prefix_tail{0};
    std::vector<double> hits(V, 0);
    double n = 0;
    for (int i = 0; i < 100000; ++i) {
      const auto seq = s.sample(4, rng);
      if (seq[1] != 0 || seq[3] != 1) continue;
      ++n;
      ++hits[seq[2]];
    }
    ASSERT_GT(n, 100);
    // Order 1: only y_1 matters from the prefix.
    const auto d = exact_second_to_last_dist(s, std::vector<TokenId>{2, 0}, 1);
    for (std::size_t x = 0; x < V; ++x) {
      const double se = std::sqrt(std::max(d[x] * (1 - d[x]), 1e-12) / n);
      EXPECT_NEAR(hits[x] / n, d[x], 3 * se + 1e-9) << "seed " << seed << " x " << x;
    }
  }
}

TEST(Locality, OrderOneSourcesHaveNonNegativeGap) {
  std::mt19937_64 pick(12);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t V = 2 + seed % 7;
    std::size_t t = 8;
    while (std::pow(static_cast<double>(V), static_cast<double>(t + 2)) > 4e6) --t;
    const auto s = MarkovSource::seeded(V, 1, 1000 + seed, 0.5);
    const auto r = locality_gap(s, t);
    EXPECT_NEAR(r.bi, 0.0, 1e-12) << "V=" << V << " t=" << t;
    EXPECT_GE(r.gap, -1e-12);
    EXPECT_GE(r.uni, 0.0);
    EXPECT_LE(r.uni, 1.0);
    EXPECT_LE(r.worst_bi, 1e-12);
  }
}

TEST(Locality, IidSourceHasZeroGap) {
  const auto s = MarkovSource::seeded(4, 0, 3);
  const auto r = locality_gap(s, 4);
  EXPECT_NEAR(r.uni, 0.0, 1e-12);
  EXPECT_NEAR(r.bi, 0.0, 1e-12);
  EXPECT_NEAR(r.gap, 0.0, 1e-12);
}

TEST(Locality, CopyLanguageReversesTheGap) {
  for (std::size_t V : {2u, 3u}) {
    for (std::size_t t : {2u, 4u}) {
      const auto r = locality_gap(MarkovSource::copy(V, t), t);
      EXPECT_NEAR(r.uni, 0.0, 1e-12);
      EXPECT_NEAR(r.bi, 1.0 - 1.0 / static_cast<double>(V), 1e-12);
      EXPECT_LT(r.gap, 0.0);
    }
  }
}

TEST(Locality, PointwiseEntriesAverageToTheReport) {
  const auto s = MarkovSource::seeded(3, 2, 8);
  const auto r = locality_gap(s, 3, true);
  double w = 0, u = 0, b = 0;
  for (const auto& p : r.pointwise) {
    EXPECT_EQ(p.context.size(), 4u);
    w += p.weight;
    u += p.weight * p.uni;
    b += p.weight * p.bi;
  }
  EXPECT_NEAR(w, 1.0, 1e-12);
  EXPECT_NEAR(u, r.uni, 1e-12);
  EXPECT_NEAR(b, r.bi, 1e-12);
  // Order 2 lets y_0 matter for y_2 but not for y_3: bi stays exact here.
  EXPECT_GT(r.uni, 0.0);
}

TEST(Locality, BudgetIsEnforced) {
  EXPECT_THROW(locality_gap(MarkovSource::uniform(8), 8, false, 1000), Error);
}

// Refinement with exact models equals a direct evaluation of
// argmax_y p(y | ctx) * (1 + w * [y_{t-1} = argmax_x p(x | ctx', y)]) over the
// top-k candidates, for every context up to length 6.
TEST(OracleEquivalence, RefinementMatchesBruteForce) {
  for (std::size_t V : {3u, 5u}) {
   std::size_t checked = 0, boosted_wins = 0;
   for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto s = MarkovSource::seeded(V, 1, seed + 40 + V, 0.3);
    OracleNext fn(s);
    OracleRefiner fs(s);
    const std::size_t max_len = V == 5 ? 5 : 6;
    for (std::size_t len = 1; len <= max_len; ++len) {
      std::vector<std::vector<TokenId>> contexts;
      for (std::size_t idx = 0; idx < static_cast<std::size_t>(std::pow(V, len)); ++idx) {
        contexts.push_back(digits(idx, len, V));
      }
      for (std::size_t k : {std::size_t{1}, std::size_t{2}, V}) {
        for (double w : {0.0, 0.05, 0.3, 2.0, 10.0}) {
          const auto traces = agr_predict_batch(fn, fs, contexts, RefineConfig{k, w, 2});
          for (std::size_t c = 0; c < contexts.size(); ++c) {
            const auto& ctx = contexts[c];
            const auto p = conditional_by_enumeration(s, ctx);
            std::vector<std::size_t> order(V);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] > p[b]; });
            std::size_t best = order[0];
            double best_score = -1;
            if (len >= 2) {
              for (std::size_t i = 0; i < k; ++i) {
                const std::size_t y = order[i];
                auto prefix = ctx;
                prefix.pop_back();
                std::vector<double> q(V);
                for (std::size_t x = 0; x < V; ++x) {
                  auto seq = prefix;
                  seq.push_back(static_cast<TokenId>(x));
                  seq.push_back(static_cast<TokenId>(y));
                  q[x] = joint_from_tables(s, seq);
                }
                const std::size_t guess = std::max_element(q.begin(), q.end()) - q.begin();
                const double score = p[y] * (1 + w * (guess == static_cast<std::size_t>(ctx.back()) ? 1 : 0));
                if (score > best_score) {
                  best_score = score;
                  best = y;
                }
              }
            }
            ASSERT_EQ(traces[c].chosen, static_cast<TokenId>(best)) << "V=" << V << " len=" << len << " k=" << k;
            ++checked;
            boosted_wins += best != order[0];
          }
        }
      }
    }
   }
    EXPECT_GT(checked, 1000u);
    EXPECT_GT(boosted_wins, 0u);
  }
}

TEST(Sweep, ZeroNoiseNeverHurtsAndZeroBoostIsNeutral) {
  const std::size_t ks[] = {2, 4};
  const double ws[] = {0.0, 0.01, 0.05, 0.1, 0.5, 3.0};
  const double eps[] = {0.0, 0.2, 0.5};
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto s = MarkovSource::seeded(4, 1, 70 + seed, 0.7);
    for (const auto& r : oracle_agr_sweep(s, 4, ks, ws, eps)) {
      EXPECT_GE(r.plain, 0.0);
      EXPECT_LE(r.agr, 1.0 + 1e-12);
      if (r.epsilon == 0.0) {
        EXPECT_GE(r.agr, r.plain - 1e-15);
      }
      if (r.w == 0.0) {
        EXPECT_EQ(r.agr, r.plain);
      }
    }
  }
}

// A flip to candidate i needs verdict(i) = 1 and verdict(top) = 0, which
// multiplies the odds of i against the top candidate by ((1 - e) / e)^2.
// Below the point where 1 + w exceeds that factor every flip helps; above it
// some sources lose accuracy.
TEST(Sweep, NoiseHurtsOnlyPastTheOddsThreshold) {
  const std::size_t ks[] = {2, 4};
  auto worst = [&](double w, double e) {
    const double ws[] = {w};
    const double eps[] = {e};
    double lo = 1.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto s = MarkovSource::seeded(5, 1, 300 + seed, 1.0);
      for (const auto& r : oracle_agr_sweep(s, 3, ks, ws, eps)) lo = std::min(lo, r.delta());
    }
    return lo;
  };
  EXPECT_GE(worst(0.1, 0.4), 0.0);   // (0.6/0.4)^2 = 2.25 > 1.1
  EXPECT_LT(worst(0.1, 0.5), 0.0);
  EXPECT_LT(worst(0.1, 0.6), 0.0);
  EXPECT_LT(worst(5.0, 0.4), 0.0);   // 6 > 2.25
  EXPECT_GE(worst(1.2, 0.4), 0.0);   // 2.2 < 2.25
}

TEST(Sweep, MatchesMonteCarloSimulation) {
  const auto s = MarkovSource::seeded(3, 1, 5, 0.8);
  const std::size_t ks[] = {3};
  const double ws[] = {0.5};
  const double eps[] = {0.3};
  const auto exact = oracle_agr_sweep(s, 3, ks, ws, eps)[0];
  std::mt19937_64 rng(1);
  std::bernoulli_distribution flip(0.3);
  double plain = 0, agr = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const auto seq = s.sample(4, rng);
    const std::vector<TokenId> ctx(seq.begin(), seq.begin() + 3);
    const auto p = exact_next_dist(s, ctx);
    const auto cands = top_k_candidates<double>(p, 3);
    std::vector<double> cp;
    std::vector<std::uint8_t> v;
    for (TokenId c : cands) {
      cp.push_back(p[c]);
      v.push_back((c == seq[3]) != flip(rng));
    }
    plain += cands[0] == seq[3];
    agr += cands[select_prob_space(cp, v, cands, 0.5)] == seq[3];
  }
  EXPECT_NEAR(plain / n, exact.plain, 4 * std::sqrt(0.25 / n));
  EXPECT_NEAR(agr / n, exact.agr, 4 * std::sqrt(0.25 / n));
}

TEST(Sweep, ExactRefinerVerdictsCannotBeatExactNextToken) {
  const std::size_t ks[] = {3};
  const double ws[] = {0.05, 0.5};
  const double eps[] = {0.0};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = MarkovSource::seeded(4, 1, 900 + seed, 0.6);
    for (const auto& r : oracle_agr_sweep(s, 3, ks, ws, eps, VerdictModel::kRefiner)) {
      EXPECT_LE(r.agr, r.plain + 1e-15);
    }
  }
}
