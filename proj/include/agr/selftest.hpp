#pragma once

// Fast invariant suite behind `agr selftest`. Each check is independent and
// reports a one-line detail.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "agr/checkpoint.hpp"
#include "agr/data.hpp"
#include "agr/eval.hpp"
#include "agr/gradcheck.hpp"
#include "agr/oracle.hpp"
#include "agr/refine.hpp"
#include "agr/stats.hpp"
#include "agr/trainer.hpp"

namespace agr {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline std::string fmt(double x) {
  std::ostringstream os;
  os << std::setprecision(4) << x;
  return os.str();
}

inline CheckResult check_gradients() {
  std::mt19937_64 rng(1);
  struct Case {
    std::string name;
    std::vector<Tensor<double>> inputs;
    LossBuilder build;
  };
  static const std::vector<TokenId> ids{0, 3, 1, 1, 2, 3};
  static const std::vector<TokenId> targets{1, 0, 2, 2};
  static const std::vector<std::uint8_t> mask{1, 0, 1, 1};
  std::vector<Case> cases;
  cases.push_back({"matmul", {random_tensor({4, 6}, rng), random_tensor({6, 5}, rng)},
                   [](Graph<double>& g, const std::vector<Var>& v) {
                     return random_projection_loss(g, g.matmul(v[0], v[1]), 1);
                   }});
  cases.push_back({"add", {random_tensor({3, 4, 5}, rng), random_tensor({5}, rng)},
                   [](Graph<double>& g, const std::vector<Var>& v) {
                     return random_projection_loss(g, g.add(v[0], v[1]), 2);
                   }});
  cases.push_back({"scale", {random_tensor({8, 8}, rng)}, [](Graph<double>& g, const std::vector<Var>& v) {
                     return random_projection_loss(g, g.scale(v[0], 0.3), 3);
                   }});
  cases.push_back({"gelu", {random_tensor({8, 8}, rng)}, [](Graph<double>& g, const std::vector<Var>& v) {
                     return random_projection_loss(g, g.gelu(v[0]), 4);
                   }});
  cases.push_back({"softmax", {random_tensor({8, 8}, rng, 2.0)}, [](Graph<double>& g, const std::vector<Var>& v) {
                     return random_projection_loss(g, g.softmax_last_dim(v[0]), 5);
                   }});
  cases.push_back({"layer_norm", {random_tensor({6, 10}, rng), random_tensor({10}, rng), random_tensor({10}, rng)},
                   [](Graph<double>& g, const std::vector<Var>& v) {
                     return random_projection_loss(g, g.layer_norm(v[0], v[1], v[2]), 6);
                   }});
  cases.push_back({"embedding", {random_tensor({4, 16}, rng)}, [](Graph<double>& g, const std::vector<Var>& v) {
                     return random_projection_loss(g, g.embedding_lookup(v[0], ids, {2, 3}), 7);
                   }});
  cases.push_back({"cross_entropy", {random_tensor({4, 15}, rng, 2.0)},
                   [](Graph<double>& g, const std::vector<Var>& v) {
                     return g.cross_entropy_masked(v[0], targets, mask);
                   }});
  cases.push_back({"attention",
                   {random_tensor({1, 5, 12}, rng), random_tensor({1, 5, 12}, rng), random_tensor({1, 5, 12}, rng)},
                   [](Graph<double>& g, const std::vector<Var>& v) {
                     return random_projection_loss(g, g.attention(v[0], v[1], v[2], 2, true), 8);
                   }});
  double worst = 0;
  std::string worst_name;
  bool ok = true;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto r = grad_check(cases[i].inputs, cases[i].build, 50, 100 + i);
    ok = ok && r.coordinates >= 50 && r.max_rel_error < 1e-4;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = cases[i].name;
    }
  }
  return {"gradients", ok, "worst relative error " + fmt(worst) + " (" + worst_name + ")"};
}

inline CheckResult check_permutation() {
  std::vector<int> y(13);
  std::iota(y.begin(), y.end(), 0);
  bool ok = block_swap_permute<int>(y, 4) == std::vector<int>{0, 1, 2, 4, 3, 5, 6, 8, 7, 9, 10, 12, 11};
  std::mt19937_64 rng(2);
  for (std::size_t l : {2u, 3u, 4u, 8u}) {
    for (int i = 0; i < 250 && ok; ++i) {
      std::vector<TokenId> w(l + 1 + rng() % 30);
      for (auto& x : w) x = static_cast<TokenId>(rng() % 5);
      ok = block_swap_permute<TokenId>(block_swap_permute<TokenId>(w, l), l) == w;
    }
  }
  for (std::size_t l : {2u, 4u}) {
    const auto m = loss_mask(64, l);
    ok = ok && m.size() == 64 && static_cast<std::size_t>(std::count(m.begin(), m.end(), 1)) * l == 64;
  }
  return {"permutation", ok, "golden l=4 window, involution, 1/l loss positions"};
}

inline CheckResult check_schedule() {
  const bool ok = lr_schedule(100, 100, 2000, 1e-3) == 1e-3 && lr_schedule(2000, 100, 2000, 1e-3) == 0.1 * 1e-3;
  return {"lr schedule", ok, "lr(warmup) = lr_max, lr(max) = lr_max / 10"};
}

inline CheckResult check_tokenizer_and_checkpoint() {
  const std::string text = "generate, then refine; refine, then generate.";
  const auto ds = tokenize_corpus(text);
  bool ok = detokenize(ds, ds.ids) == text;
  ModelConfig c;
  c.n_layer = 1;
  c.n_head = 1;
  c.emb_dim = 8;
  c.block_size = 8;
  c.vocab_size = ds.vocab_size();
  Checkpoint ck{init_params<float>(c, 3), {}, 3, 0};
  std::stringstream buf;
  write_checkpoint(buf, ck);
  const auto back = read_checkpoint(buf);
  for (std::size_t i = 0; i < ck.params.tensors.size(); ++i) ok = ok && back.params.tensors[i] == ck.params.tensors[i];
  return {"tokenizer+checkpoint", ok, "text and parameters round-trip"};
}

inline CheckResult check_refinement() {
  const auto s = MarkovSource::seeded(4, 1, 11, 0.3);
  OracleNext fn(s);
  OracleRefiner fs(s);
  std::vector<std::vector<TokenId>> ctxs;
  for (std::size_t idx = 0; idx < 256; ++idx) {
    ctxs.push_back({static_cast<TokenId>(idx >> 6), static_cast<TokenId>((idx >> 4) & 3),
                    static_cast<TokenId>((idx >> 2) & 3), static_cast<TokenId>(idx & 3)});
  }
  bool ok = true;
  for (const auto& tr : agr_predict_batch(fn, fs, ctxs, RefineConfig{4, 0.0, 2})) ok = ok && tr.chosen == tr.plain;
  std::size_t agree = 0;
  const auto traces = agr_predict_batch(fn, fs, ctxs, RefineConfig{4, 2.0, 2});
  for (std::size_t i = 0; i < ctxs.size(); ++i) {
    const auto p = s.next_dist(ctxs[i]);
    std::vector<double> cp;
    for (TokenId c : traces[i].candidates) cp.push_back(p[c]);
    agree += traces[i].candidates[select_prob_space(cp, traces[i].verdicts, traces[i].candidates, 2.0)] ==
             traces[i].chosen;
  }
  ok = ok && agree == ctxs.size();
  return {"refinement", ok, "w=0 neutral; log/probability agreement " + std::to_string(agree) + "/256"};
}

inline CheckResult check_oracles() {
  bool ok = true;
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto r = locality_gap(MarkovSource::seeded(3 + seed, 1, seed, 0.5), 4);
    worst = std::min(worst, r.gap);
    ok = ok && r.gap >= -1e-12;
  }
  const double copy_gap = locality_gap(MarkovSource::copy(3, 3), 3).gap;
  ok = ok && copy_gap < 0;
  return {"locality", ok, "order-1 min gap " + fmt(worst) + ", copy-language gap " + fmt(copy_gap)};
}

inline CheckResult check_t_test() {
  const auto r = one_sample_t_test(std::vector<double>{1, 2, 3, 4, 5});
  const auto z = one_sample_t_test(std::vector<double>{-1, 0, 1});
  const bool ok = std::abs(r.t - 4.2426) < 1e-4 && std::abs(r.p - 0.0066) < 1e-3 && z.p == 0.5;
  return {"t-test", ok, "t=" + fmt(r.t) + " p=" + fmt(r.p)};
}

}  // namespace detail

inline std::vector<CheckResult> run_selftest() {
  std::vector<std::function<CheckResult()>> checks{
      detail::check_gradients, detail::check_permutation, detail::check_schedule,
      detail::check_tokenizer_and_checkpoint, detail::check_refinement, detail::check_oracles,
      detail::check_t_test};
  std::vector<CheckResult> out;
  for (const auto& c : checks) {
    try {
      out.push_back(c());
    } catch (const std::exception& e) {
      out.push_back({"(exception)", false, e.what()});
    }
  }
  return out;
}

}  // namespace agr
