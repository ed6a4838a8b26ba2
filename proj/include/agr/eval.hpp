#pragma once

// Teacher-forced evaluation of f_n, f_s and AGR on randomly sampled positions,
// repeated over runs, with the per-run validation gain tested against zero.
//
// Model outputs are gathered once per sample at the largest k of the grid;
// every smaller k and every w is then scored from those outputs, since the
// top-k candidates are a prefix of the top-k_max candidates.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "agr/diagnostics.hpp"
#include "agr/parallel.hpp"
#include "agr/refine.hpp"
#include "agr/stats.hpp"

namespace agr {

struct EvalConfig {
  std::size_t samples = 5000;
  std::size_t runs = 10;
  std::uint64_t seed = 2024;
  std::size_t context_len = 64;  // tokens of context per prediction
  bool include_train = true;
  std::size_t chunk = 128;  // samples per model call
  std::size_t threads = 1;

  void validate() const {
    if (samples < 1) throw Error("eval config: samples must be >= 1");
    if (runs < 1) throw Error("eval config: runs must be >= 1");
    if (context_len < 1) throw Error("eval config: context_len must be >= 1");
    if (chunk < 1) throw Error("eval config: chunk must be >= 1");
  }
};

/// Everything needed to score one sampled position under any (k <= k_max, w).
struct SampleRecord {
  std::size_t position = 0;  // index of the target in the split
  TokenId target = 0;
  TokenId previous = 0;
  std::vector<double> logits;
  std::vector<TokenId> candidates;      // top k_max, empty on fallback
  std::vector<TokenId> refiner_argmax;  // per candidate
  std::optional<TokenId> refiner_on_truth;  // refiner's guess with the true token last
};

/// Positions are drawn uniformly (with replacement) among those that have a
/// full context of `context_len` tokens.
inline std::vector<std::size_t> sample_positions(std::size_t split_len, std::size_t context_len, std::size_t n,
                                                 std::uint64_t seed) {
  if (split_len < context_len + 1) {
    throw Error("evaluation split of " + std::to_string(split_len) + " tokens is too small for a context of " +
                std::to_string(context_len) + " tokens");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(context_len, split_len - 1);
  std::vector<std::size_t> out(n);
  for (auto& p : out) p = pick(rng);
  return out;
}

template <NextTokenModel Fn, SecondToLastModel Fs>
std::vector<SampleRecord> collect_samples(const Fn& f_n, const Fs& f_s, std::span<const TokenId> split,
                                          std::span<const std::size_t> positions, std::size_t k_max,
                                          std::size_t context_len, std::size_t chunk = 128,
                                          std::size_t threads = 1) {
  std::vector<SampleRecord> out(positions.size());
  const std::size_t n_chunks = (positions.size() + chunk - 1) / chunk;
  parallel_for(n_chunks, threads, [&](std::size_t c) {
    const std::size_t begin = c * chunk;
    const std::size_t end = std::min(positions.size(), begin + chunk);
    std::vector<std::vector<TokenId>> contexts;
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t pos = positions[i];
      if (pos < 1 || pos >= split.size()) throw Error("sample position " + std::to_string(pos) + " out of range");
      const std::size_t from = pos > context_len ? pos - context_len : 0;
      contexts.emplace_back(split.begin() + static_cast<std::ptrdiff_t>(from),
                            split.begin() + static_cast<std::ptrdiff_t>(pos));
    }
    auto logits = f_n.next_logits(contexts);
    std::vector<std::vector<TokenId>> ref_ctx, ref_cand;
    std::vector<std::size_t> refined;
    for (std::size_t j = 0; j < contexts.size(); ++j) {
      auto& r = out[begin + j];
      r.position = positions[begin + j];
      r.target = split[r.position];
      r.previous = contexts[j].back();
      r.logits = std::move(logits[j]);
      const std::size_t t = contexts[j].size();
      if (t < 2 || t < f_s.min_context()) continue;
      r.candidates = top_k_candidates<double>(r.logits, k_max);
      auto asked = r.candidates;
      asked.push_back(r.target);
      ref_ctx.push_back(contexts[j]);
      ref_cand.push_back(std::move(asked));
      refined.push_back(begin + j);
    }
    if (ref_ctx.empty()) return;
    const auto guesses = f_s.second_to_last_argmax(ref_ctx, ref_cand);
    for (std::size_t j = 0; j < refined.size(); ++j) {
      auto& r = out[refined[j]];
      if (guesses[j].size() != k_max + 1) {
        r.candidates.clear();  // the refiner declined this context
        continue;
      }
      r.refiner_argmax.assign(guesses[j].begin(), guesses[j].end() - 1);
      r.refiner_on_truth = guesses[j].back();
    }
  });
  return out;
}

inline RefineTrace trace_for(const SampleRecord& r, std::size_t k, double w) {
  if (r.candidates.empty()) return fallback_trace(r.logits);
  if (k > r.candidates.size()) {
    throw Error("trace_for: k=" + std::to_string(k) + " exceeds the " + std::to_string(r.candidates.size()) +
                " recorded candidates");
  }
  return combine(r.logits, r.previous, std::span(r.candidates).first(k), std::span(r.refiner_argmax).first(k), w);
}

struct SplitAccuracy {
  double n = 0;    // next-token argmax
  double s = 0;    // refiner with the true last token
  double agr = 0;  // refined prediction
};

inline SplitAccuracy score_samples(std::span<const SampleRecord> records, std::size_t k, double w,
                                   DiagnosticCounters* diag = nullptr) {
  std::size_t hit_n = 0, hit_s = 0, asked_s = 0, hit_agr = 0;
  for (const auto& r : records) {
    const auto tr = trace_for(r, k, w);
    hit_n += tr.plain == r.target;
    hit_agr += tr.chosen == r.target;
    if (r.refiner_on_truth) {
      ++asked_s;
      hit_s += *r.refiner_on_truth == r.previous;
    }
    if (diag) diag->add(tr, r.previous, r.target);
  }
  const double n = static_cast<double>(records.size());
  return SplitAccuracy{static_cast<double>(hit_n) / n,
                       asked_s ? static_cast<double>(hit_s) / static_cast<double>(asked_s) : 0.0,
                       static_cast<double>(hit_agr) / n};
}

struct EvalRun {
  std::uint64_t seed = 0;
  std::optional<SplitAccuracy> train;
  SplitAccuracy val;
  double delta() const { return val.agr - val.n; }
};

struct EvalReport {
  std::string dataset;
  RefineConfig refine;
  std::size_t samples = 0;
  std::vector<EvalRun> runs;
  std::optional<TTestResult> t_test;
  std::string t_test_note;  // why t_test is absent
  DiagnosticCounters diagnostics;  // validation, all runs

  std::vector<double> deltas() const {
    std::vector<double> d;
    for (const auto& r : runs) d.push_back(r.delta());
    return d;
  }
  /// Per-run values of one accuracy column; `which` is 'n', 's' or 'a'.
  std::vector<double> column(bool validation, char which) const {
    std::vector<double> v;
    for (const auto& r : runs) {
      if (!validation && !r.train) continue;
      const SplitAccuracy& a = validation ? r.val : *r.train;
      v.push_back(which == 'n' ? a.n : which == 's' ? a.s : a.agr);
    }
    return v;
  }
};

/// Seed of run r; runs never share a sampling stream.
inline std::uint64_t run_seed(std::uint64_t base, std::size_t run) {
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(run)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

inline void attach_t_test(EvalReport& rep) {
  if (rep.runs.size() < 2) {
    rep.t_test_note = "fewer than 2 runs";
    return;
  }
  try {
    rep.t_test = one_sample_t_test(rep.deltas());
  } catch (const ZeroVarianceError& e) {
    rep.t_test_note = e.what();
  }
}

/// Evaluates every (k, w) of the grid over ecfg.runs runs. Reports come back
/// in grid order (k outer, w inner).
template <NextTokenModel Fn, SecondToLastModel Fs>
std::vector<EvalReport> evaluate(const Fn& f_n, const Fs& f_s, std::span<const TokenId> train_split,
                                 std::span<const TokenId> val_split, const EvalConfig& ecfg,
                                 std::span<const std::size_t> ks, std::span<const double> ws, std::size_t l,
                                 const std::string& dataset = "") {
  ecfg.validate();
  if (ks.empty() || ws.empty()) throw Error("evaluate: empty (k, w) grid");
  std::vector<EvalReport> reports;
  for (std::size_t k : ks) {
    for (double w : ws) {
      RefineConfig rc{k, w, l};
      rc.validate(f_n.vocab_size());
      EvalReport rep;
      rep.dataset = dataset;
      rep.refine = rc;
      rep.samples = ecfg.samples;
      reports.push_back(std::move(rep));
    }
  }
  const std::size_t k_max = *std::max_element(ks.begin(), ks.end());
  for (std::size_t run = 0; run < ecfg.runs; ++run) {
    const std::uint64_t seed = run_seed(ecfg.seed, run);
    auto collect = [&](std::span<const TokenId> split, std::uint64_t s) {
      const auto pos = sample_positions(split.size(), ecfg.context_len, ecfg.samples, s);
      return collect_samples(f_n, f_s, split, pos, k_max, ecfg.context_len, ecfg.chunk, ecfg.threads);
    };
    const auto val = collect(val_split, seed);
    std::vector<SampleRecord> train;
    if (ecfg.include_train) train = collect(train_split, seed ^ 0x5DEECE66Dull);
    for (auto& rep : reports) {
      EvalRun er;
      er.seed = seed;
      er.val = score_samples(val, rep.refine.k, rep.refine.w, &rep.diagnostics);
      if (ecfg.include_train) er.train = score_samples(train, rep.refine.k, rep.refine.w);
      rep.runs.push_back(er);
    }
  }
  for (auto& rep : reports) attach_t_test(rep);
  return reports;
}

// ---------------------------------------------------------------------------
// Tables.

namespace detail {

inline std::string pct_mean_std(const std::vector<double>& v) {
  if (v.empty()) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * mean(v) << "+-" << 100.0 * sample_std(v);
  return os.str();
}

}  // namespace detail

/// Human-readable table: accuracies in percent as mean+-std over runs.
inline void report_table(std::ostream& os, std::span<const EvalReport> reports) {
  if (reports.empty()) throw Error("report_table: no reports");
  const char* cols[] = {"Dataset", "k", "w", "n tr", "n va", "s tr", "s va", "AGR tr", "AGR va", "Delta", "t", "p"};
  const int widths[] = {12, 4, 6, 13, 13, 13, 13, 13, 13, 13, 8, 8};
  for (std::size_t i = 0; i < 12; ++i) os << std::setw(widths[i]) << cols[i];
  os << '\n';
  for (const auto& r : reports) {
    std::ostringstream w;
    w << r.refine.w;
    std::string t = "-", p = "-";
    if (r.t_test) {
      std::ostringstream ts, ps;
      ts << std::fixed << std::setprecision(3) << r.t_test->t;
      ps << std::setprecision(3) << r.t_test->p;
      t = ts.str();
      p = ps.str();
    }
    const std::string cells[] = {r.dataset.empty() ? "-" : r.dataset,
                                 std::to_string(r.refine.k),
                                 w.str(),
                                 detail::pct_mean_std(r.column(false, 'n')),
                                 detail::pct_mean_std(r.column(true, 'n')),
                                 detail::pct_mean_std(r.column(false, 's')),
                                 detail::pct_mean_std(r.column(true, 's')),
                                 detail::pct_mean_std(r.column(false, 'a')),
                                 detail::pct_mean_std(r.column(true, 'a')),
                                 detail::pct_mean_std(r.deltas()),
                                 t,
                                 p};
    for (std::size_t i = 0; i < 12; ++i) os << std::setw(widths[i]) << cells[i];
    os << '\n';
  }
}

/// Machine-readable form: one row per (report, run), accuracies as fractions.
inline void report_csv(std::ostream& os, std::span<const EvalReport> reports) {
  os << "dataset,k,w,l,samples,run,seed,acc_n_tr,acc_n_va,acc_s_tr,acc_s_va,acc_agr_tr,acc_agr_va,delta,t,df,p\n";
  os << std::setprecision(10);
  for (const auto& r : reports) {
    for (std::size_t i = 0; i < r.runs.size(); ++i) {
      const auto& run = r.runs[i];
      os << r.dataset << ',' << r.refine.k << ',' << r.refine.w << ',' << r.refine.l << ',' << r.samples << ',' << i
         << ',' << run.seed << ',';
      if (run.train) {
        os << run.train->n << ',' << run.val.n << ',' << run.train->s << ',' << run.val.s << ',' << run.train->agr
           << ',' << run.val.agr << ',';
      } else {
        os << ',' << run.val.n << ',' << ',' << run.val.s << ',' << ',' << run.val.agr << ',';
      }
      os << run.delta() << ',';
      if (r.t_test) {
        os << r.t_test->t << ',' << r.t_test->df << ',' << r.t_test->p;
      } else {
        os << ",,";
      }
      os << '\n';
    }
  }
}

}  // namespace agr
