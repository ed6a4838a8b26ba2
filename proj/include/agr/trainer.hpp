#pragma once

// Training loop for either objective: warmup plus cosine decay to a tenth of
// the peak rate, AdamW, global-norm clipping, periodic evaluation and
// checkpoints.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "agr/adamw.hpp"
#include "agr/checkpoint.hpp"
#include "agr/data.hpp"
#include "agr/kernels.hpp"
#include "agr/model.hpp"

namespace agr {

/// Learning rate for 1-based step `iter`. Linear warmup reaches lr_max at
/// iter = warmup_iters (starting from lr_max / warmup_iters, or from the floor
/// when warmup_from_floor is set); cosine decay then reaches exactly
/// min_ratio * lr_max at iter = max_iters.
inline double lr_schedule(std::size_t iter, std::size_t warmup_iters, std::size_t max_iters, double lr_max,
                          double min_ratio = 0.1, bool warmup_from_floor = false) {
  const double floor = min_ratio * lr_max;
  if (iter >= max_iters) return floor;
  if (iter == warmup_iters) return lr_max;
  if (iter < warmup_iters) {
    const double frac = static_cast<double>(iter) / static_cast<double>(warmup_iters);
    return warmup_from_floor ? floor + (lr_max - floor) * frac : lr_max * frac;
  }
  const double progress =
      static_cast<double>(iter - warmup_iters) / static_cast<double>(max_iters - warmup_iters);
  return floor + 0.5 * (1.0 + std::cos(std::numbers::pi * progress)) * (lr_max - floor);
}

struct TrainConfig {
  ModelConfig model;
  PermutationConfig perm;
  Objective objective = Objective::kNextToken;
  double lr_max = 1e-3;
  double min_lr_ratio = 0.1;
  bool warmup_from_floor = false;
  std::size_t warmup_iters = 100;
  std::size_t max_iters = 2000;
  std::size_t batch_size = 64;
  std::size_t eval_interval = 250;
  std::size_t eval_batches = 8;
  std::size_t log_interval = 10;
  double grad_clip = 1.0;
  double weight_decay = 0.1;
  std::uint64_t seed = 1337;
  std::filesystem::path checkpoint_path;  // empty: no checkpoints written

  void validate() const {
    model.validate();
    perm.validate();
    if (perm.T > model.block_size) {
      throw Error("train config: window length " + std::to_string(perm.T) + " exceeds block_size " +
                  std::to_string(model.block_size));
    }
    if (!(lr_max > 0)) throw Error("train config: lr_max must be > 0");
    if (warmup_iters >= max_iters && max_iters > 0) {
      throw Error("train config: warmup_iters must be smaller than max_iters");
    }
    if (batch_size < 1) throw Error("train config: batch_size must be >= 1");
  }
};

struct LogRow {
  std::size_t iter = 0;
  std::string split;
  double loss = 0;
  double masked_accuracy = 0;
  double lr = 0;

  friend bool operator==(const LogRow&, const LogRow&) = default;
};

inline void write_log_csv(std::ostream& os, const std::vector<LogRow>& rows) {
  os << "iter,split,loss,masked_accuracy,lr\n";
  for (const auto& r : rows) {
    os << r.iter << ',' << r.split << ',' << r.loss << ',' << r.masked_accuracy << ',' << r.lr << '\n';
  }
}

struct BatchScore {
  double loss = 0;
  std::size_t correct = 0;
  std::size_t positions = 0;
};

/// Masked positions of `b` whose argmax over `logits` [rows, V] is the target.
template <typename T>
std::size_t count_masked_hits(const Tensor<T>& logits, const PermutedBatch& b) {
  std::size_t hits = 0;
  for (std::size_t r = 0; r < b.mask.size(); ++r) {
    if (!b.mask[r]) continue;
    auto row = logits.row(r);
    hits += static_cast<TokenId>(kernels::argmax<T>(row)) == b.targets[r];
  }
  return hits;
}

template <typename T>
BatchScore score_batch(const TransformerParams<T>& p, const PermutedBatch& b) {
  Graph<T> g;
  auto vars = add_param_leaves(g, p, false);
  Var logits = forward(g, vars, p.config, b.inputs, b.batch, b.T);
  Var loss = g.cross_entropy_masked(logits, b.targets, b.mask);
  Tensor<T> flat = g.value(logits).reshaped({b.batch * b.T, p.config.vocab_size});
  return BatchScore{static_cast<double>(g.value(loss).item()), count_masked_hits(flat, b), b.masked_count()};
}

/// Loss and masked accuracy over `batches` fixed windows of a split.
template <typename T>
std::pair<double, double> estimate_split(const TransformerParams<T>& p, std::span<const TokenId> split,
                                         const PermutationConfig& perm, Objective objective, std::size_t batches,
                                         std::size_t batch_size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double loss = 0;
  std::size_t correct = 0, positions = 0;
  for (std::size_t i = 0; i < batches; ++i) {
    const auto offsets = sample_offsets(split.size(), perm.T, batch_size, rng);
    const auto s = score_batch(p, make_batch(split, offsets, perm, objective));
    loss += s.loss;
    correct += s.correct;
    positions += s.positions;
  }
  return {loss / static_cast<double>(batches), static_cast<double>(correct) / static_cast<double>(positions)};
}

namespace detail {

// Every step allocates and frees the same multi-megabyte activations. Keeping
// freed memory in the heap avoids re-faulting those pages on each step.
inline void retain_freed_memory() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace detail

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

struct TrainResult {
  TransformerParams<float> params;
  AdamWState<float> optimizer;
  std::vector<LogRow> log;
};

using LogCallback = std::function<void(const LogRow&)>;

/// Trains one model from init_params(config.model, config.seed). If the loss
/// turns non-finite the last good parameters are checkpointed (when a path is
/// set) and TrainingDiverged is thrown.
inline TrainResult train(const TrainConfig& config, const TokenDataset& ds, const LogCallback& on_log = {}) {
  TrainConfig cfg = config;
  cfg.model.vocab_size = ds.vocab_size();
  cfg.validate();
  detail::retain_freed_memory();
  const auto train_split = ds.train();
  const auto val_split = ds.validation();

  TrainResult result{init_params<float>(cfg.model, cfg.seed), {}, {}};
  result.optimizer.weight_decay = cfg.weight_decay;
  const auto names = param_names(cfg.model);
  std::mt19937_64 rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
  const std::uint64_t eval_seed = cfg.seed + 1;

  auto emit = [&](LogRow row) {
    result.log.push_back(row);
    if (on_log) on_log(row);
  };
  auto checkpoint = [&](std::size_t iter) {
    if (cfg.checkpoint_path.empty()) return;
    save_checkpoint(cfg.checkpoint_path, Checkpoint{result.params, result.optimizer, cfg.seed, iter});
  };
  auto evaluate = [&](std::size_t iter, double lr) {
    for (auto [name, split] : {std::pair{"train", train_split}, std::pair{"val", val_split}}) {
      const auto [loss, acc] =
          estimate_split(result.params, split, cfg.perm, cfg.objective, cfg.eval_batches, cfg.batch_size, eval_seed);
      emit(LogRow{iter, name, loss, acc, lr});
    }
  };

  if (cfg.max_iters == 0) {
    evaluate(0, 0.0);
    checkpoint(0);
    return result;
  }

  for (std::size_t iter = 1; iter <= cfg.max_iters; ++iter) {
    const double lr =
        lr_schedule(iter, cfg.warmup_iters, cfg.max_iters, cfg.lr_max, cfg.min_lr_ratio, cfg.warmup_from_floor);
    const auto offsets = sample_offsets(train_split.size(), cfg.perm.T, cfg.batch_size, rng);
    const auto batch = make_batch(train_split, offsets, cfg.perm, cfg.objective);

    double loss_value = 0;
    std::size_t hits = 0;
    std::vector<Tensor<float>> grads;
    try {
      Graph<float> g;
      auto vars = add_param_leaves(g, result.params, true);
      Var logits = forward(g, vars, cfg.model, batch.inputs, batch.batch, batch.T, true,
                           cfg.model.dropout > 0 ? cfg.seed * 1000003 + iter : 0);
      Var loss = g.cross_entropy_masked(logits, batch.targets, batch.mask);
      loss_value = g.value(loss).item();
      if (!std::isfinite(loss_value)) throw NonFiniteError("training loss is " + std::to_string(loss_value));
      g.backward(loss);
      if (iter % cfg.log_interval == 0) {
        hits = count_masked_hits(g.value(logits).reshaped({batch.batch * batch.T, cfg.model.vocab_size}), batch);
      }
      grads.reserve(vars.size());
      for (Var v : vars) grads.push_back(g.grad(v));
      if (cfg.grad_clip > 0) clip_grad_norm<float>(grads, cfg.grad_clip);
      adamw_step<float>(result.params.tensors, grads, result.optimizer, lr, names);
    } catch (const NonFiniteError& e) {
      checkpoint(iter - 1);
      throw TrainingDiverged("training diverged at iteration " + std::to_string(iter) + ": " + e.what() +
                             (cfg.checkpoint_path.empty() ? "" : "; last good state saved to " +
                                                                     cfg.checkpoint_path.string()));
    }

    if (iter % cfg.log_interval == 0) {
      emit(LogRow{iter, "batch", loss_value,
                  static_cast<double>(hits) / static_cast<double>(batch.masked_count()), lr});
    }
    if (cfg.eval_interval > 0 && (iter % cfg.eval_interval == 0 || iter == cfg.max_iters)) {
      evaluate(iter, lr);
      checkpoint(iter);
    }
  }
  if (cfg.eval_interval == 0) checkpoint(cfg.max_iters);
  return result;
}

}  // namespace agr
