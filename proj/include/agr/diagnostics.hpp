#pragma once

// Counters for the ways the refiner fails to help: the true token is not a
// candidate, several candidates are confirmed, or the boost flips a correct
// prediction.

#include <algorithm>
#include <cstddef>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "agr/refine.hpp"

namespace agr {

struct TokenBreakdown {
  std::size_t occurrences = 0;   // samples whose previous token is this one
  std::size_t multi_verdict = 0;  // of those, with more than one confirmed candidate
};

struct DiagnosticCounters {
  std::size_t samples = 0;
  std::size_t fallback = 0;       // context too short for the refiner
  std::size_t miss = 0;           // true next token not among the candidates
  std::size_t multi_verdict = 0;  // more than one candidate confirmed
  std::size_t flips = 0;          // chosen != plain argmax
  std::size_t helped = 0;         // flip that turned wrong into right
  std::size_t hurt = 0;           // flip that turned right into wrong
  std::size_t plain_correct = 0;
  std::size_t agr_correct = 0;
  std::map<TokenId, TokenBreakdown> by_previous;

  double rate(std::size_t count) const {
    const std::size_t refined = samples - fallback;
    return refined == 0 ? 0.0 : static_cast<double>(count) / static_cast<double>(refined);
  }
  double miss_rate() const { return rate(miss); }
  double multi_verdict_rate() const { return rate(multi_verdict); }

  void add(const RefineTrace& tr, TokenId previous, TokenId target) {
    ++samples;
    plain_correct += tr.plain == target;
    agr_correct += tr.chosen == target;
    if (tr.fallback) {
      ++fallback;
      return;
    }
    miss += std::find(tr.candidates.begin(), tr.candidates.end(), target) == tr.candidates.end();
    const auto confirmed = std::count(tr.verdicts.begin(), tr.verdicts.end(), std::uint8_t{1});
    auto& tok = by_previous[previous];
    ++tok.occurrences;
    if (confirmed > 1) {
      ++multi_verdict;
      ++tok.multi_verdict;
    }
    if (tr.chosen != tr.plain) {
      ++flips;
      helped += tr.chosen == target;
      hurt += tr.plain == target;
    }
  }

  void merge(const DiagnosticCounters& o) {
    samples += o.samples;
    fallback += o.fallback;
    miss += o.miss;
    multi_verdict += o.multi_verdict;
    flips += o.flips;
    helped += o.helped;
    hurt += o.hurt;
    plain_correct += o.plain_correct;
    agr_correct += o.agr_correct;
    for (const auto& [id, b] : o.by_previous) {
      by_previous[id].occurrences += b.occurrences;
      by_previous[id].multi_verdict += b.multi_verdict;
    }
  }
};

struct LabeledTrace {
  RefineTrace trace;
  TokenId previous = 0;
  TokenId target = 0;
};

inline DiagnosticCounters collect_diagnostics(std::span<const LabeledTrace> traces) {
  DiagnosticCounters c;
  for (const auto& t : traces) c.add(t.trace, t.previous, t.target);
  return c;
}

/// CSV section: one summary row per configuration, then the per-token
/// breakdown for the `top_tokens` most frequent previous tokens.
inline void write_diagnostics_csv(std::ostream& os, const std::vector<std::pair<RefineConfig, DiagnosticCounters>>& rows,
                                  const std::vector<std::string>& vocab = {}, std::size_t top_tokens = 10) {
  os << "# diagnostics\n";
  os << "k,w,samples,fallback,miss,miss_rate,multi_verdict,multi_verdict_rate,flips,helped,hurt,plain_correct,"
        "agr_correct\n";
  for (const auto& [cfg, c] : rows) {
    os << cfg.k << ',' << cfg.w << ',' << c.samples << ',' << c.fallback << ',' << c.miss << ',' << c.miss_rate()
       << ',' << c.multi_verdict << ',' << c.multi_verdict_rate() << ',' << c.flips << ',' << c.helped << ','
       << c.hurt << ',' << c.plain_correct << ',' << c.agr_correct << '\n';
  }
  os << "# multi-verdict by previous token\n";
  os << "k,w,token,occurrences,multi_verdict,multi_verdict_rate\n";
  for (const auto& [cfg, c] : rows) {
    std::vector<std::pair<TokenId, TokenBreakdown>> toks(c.by_previous.begin(), c.by_previous.end());
    std::stable_sort(toks.begin(), toks.end(),
                     [](const auto& a, const auto& b) { return a.second.occurrences > b.second.occurrences; });
    if (toks.size() > top_tokens) toks.resize(top_tokens);
    for (const auto& [id, b] : toks) {
      std::string name = static_cast<std::size_t>(id) < vocab.size() ? vocab[id] : std::to_string(id);
      std::string quoted = "\"";
      for (char ch : name) {
        if (ch == '"') quoted += "\"\"";
        else if (ch == '\n') quoted += "\\n";
        else quoted += ch;
      }
      quoted += '"';
      os << cfg.k << ',' << cfg.w << ',' << quoted << ',' << b.occurrences << ',' << b.multi_verdict << ','
         << static_cast<double>(b.multi_verdict) / static_cast<double>(b.occurrences) << '\n';
    }
  }
}

}  // namespace agr
