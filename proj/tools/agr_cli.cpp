// agr: prepare data, train the two models, evaluate refinement, run the
// exact-oracle experiments and the self-test suite.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "agr/config.hpp"
#include "agr/diagnostics.hpp"
#include "agr/eval.hpp"
#include "agr/oracle.hpp"
#include "agr/parallel.hpp"
#include "agr/refine.hpp"
#include "agr/selftest.hpp"
#include "agr/trainer.hpp"

namespace fs = std::filesystem;
using namespace agr;

namespace {

// Exit codes.
constexpr int kOk = 0;
constexpr int kFailed = 1;       // selftest or invariant failure
constexpr int kUsageError = 2;   // bad config, missing files

struct Common {
  std::string config;
  std::string out;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k, l, samples, runs;
  std::optional<double> w;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "INI config file")->check(CLI::ExistingFile);
  app->add_option("--out", c.out, "run directory (default runs/<subcommand>)");
  app->add_option("--set", c.sets, "override any config key: section.key=value (repeatable)");
  app->add_option("--seed", c.seed, "seed for this subcommand");
  app->add_option("--k", c.k, "candidate count");
  app->add_option("--w", c.w, "boost factor");
  app->add_option("--l", c.l, "permutation block length");
  app->add_option("--samples", c.samples, "evaluation samples per run");
  app->add_option("--runs", c.runs, "evaluation runs");
}

struct Session {
  RunConfig cfg;
  RunManifest manifest;
  fs::path dir;
};

/// Loads the config, applies overrides in order (--set entries, then the
/// dedicated flags) and creates the run directory.
Session open_session(const std::string& sub, const Common& c) {
  Session s;
  s.cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  s.manifest.subcommand = sub;
  auto apply = [&](const std::string& key, const std::string& value) {
    set_config_value(s.cfg, key, value);
    s.manifest.overrides.emplace_back(key, value);
  };
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("--set expects section.key=value, got '" + kv + "'");
    apply(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) {
    const char* key = sub == "train" ? "train.seed" : sub == "oracle" ? "oracle.seed" : "eval.seed";
    apply(key, std::to_string(*c.seed));
  }
  if (c.k) {
    apply("agr.k", std::to_string(*c.k));
    apply("eval.grid_k", std::to_string(*c.k));
  }
  if (c.w) {
    std::ostringstream os;
    os << std::setprecision(17) << *c.w;
    apply("agr.w", os.str());
    apply("eval.grid_w", os.str());
  }
  if (c.l) apply("perm.l", std::to_string(*c.l));
  if (c.samples) apply("eval.samples", std::to_string(*c.samples));
  if (c.runs) apply("eval.runs", std::to_string(*c.runs));
  finalize_config(s.cfg);
  s.cfg.eval.threads = thread_count();
  s.manifest.config_ini = config_to_ini(s.cfg);
  s.dir = c.out.empty() ? fs::path("runs") / sub : fs::path(c.out);
  fs::create_directories(s.dir);
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

/// Loads the dataset (default: the sibling prepare run) and records it as an input.
TokenDataset require_dataset(const std::string& explicit_path, Session& s) {
  const fs::path p = explicit_path.empty() ? s.dir.parent_path() / "prepare" / "dataset.agrd" : fs::path(explicit_path);
  if (!fs::exists(p)) throw Error("dataset " + p.string() + " not found; run `agr prepare` or pass --dataset");
  s.manifest.artifacts["dataset"] = p.string();
  return load_dataset(p);
}

TransformerParams<float> require_checkpoint(const std::string& path, const TokenDataset& ds, Session& s,
                                            const std::string& role) {
  if (!fs::exists(path)) throw Error("checkpoint " + path + " not found; run `agr train` or pass its path");
  s.manifest.artifacts[role] = path;
  auto ck = load_checkpoint(path);
  if (ck.params.config.vocab_size != ds.vocab_size()) {
    throw Error("checkpoint " + path + " has vocabulary " + std::to_string(ck.params.config.vocab_size) +
                " but the dataset has " + std::to_string(ds.vocab_size()));
  }
  return std::move(ck.params);
}

// ---------------------------------------------------------------------------

int cmd_prepare(const Common& c, const std::string& corpus) {
  auto s = open_session("prepare", c);
  if (!corpus.empty()) {
    set_config_value(s.cfg, "data.corpus", corpus);
    s.manifest.overrides.emplace_back("data.corpus", corpus);
    s.manifest.config_ini = config_to_ini(s.cfg);
  }
  const auto ds = tokenize_corpus(read_text_file(s.cfg.corpus), s.cfg.scheme, s.cfg.bpe_merges);
  const auto path = s.dir / "dataset.agrd";
  save_dataset(path, ds);
  std::cout << "tokens " << ds.ids.size() << ", vocabulary " << ds.vocab_size() << ", train " << ds.train().size()
            << ", validation " << ds.validation().size() << "\n";
  s.manifest.artifacts["dataset"] = path.string();
  s.manifest.artifacts["dataset_metadata"] = path.string() + ".json";
  s.manifest.write(s.dir);
  return kOk;
}

int cmd_train(const Common& c, const std::string& objective, const std::string& dataset) {
  auto s = open_session("train", c);
  const auto ds = require_dataset(dataset, s);
  std::vector<Objective> todo;
  if (objective == "both") {
    todo = {Objective::kNextToken, Objective::kSecondToLast};
  } else {
    todo = {parse_objective(objective)};
  }
  s.manifest.seeds["train"] = s.cfg.train.seed;
  for (Objective obj : todo) {
    TrainConfig tc = s.cfg.train;
    tc.objective = obj;
    const std::string name = objective_name(obj);
    tc.checkpoint_path = s.dir / (name + ".ckpt");
    std::cerr << "training " << name << " model (" << tc.max_iters << " iterations)\n";
    auto on_log = [&](const LogRow& r) {
      if (r.split != "batch") {
        std::cerr << "  iter " << r.iter << " " << r.split << " loss " << r.loss << " masked acc "
                  << r.masked_accuracy << "\n";
      }
    };
    const auto result = train(tc, ds, on_log);
    std::ofstream log(s.dir / (name + "_log.csv"));
    write_log_csv(log, result.log);
    log.close();
    s.manifest.artifacts[name + "_checkpoint"] = tc.checkpoint_path.string();
    s.manifest.artifacts[name + "_log"] = (s.dir / (name + "_log.csv")).string();
  }
  s.manifest.write(s.dir);
  return kOk;
}

struct ModelPaths {
  std::string fn, fs, dataset;
  std::string split;  // agr only: "train" or "val"; empty evaluates per eval.include_train
};

std::string default_ckpt(const Session& s, const std::string& given, Objective o) {
  if (!given.empty()) return given;
  return (s.dir.parent_path() / "train" / (objective_name(o) + ".ckpt")).string();
}

/// Checks the report invariants; returns the list of violations.
std::vector<std::string> report_violations(const std::vector<EvalReport>& reports) {
  std::vector<std::string> bad;
  for (const auto& r : reports) {
    const std::string tag = "k=" + std::to_string(r.refine.k) + " w=" + detail::fmt_double(r.refine.w);
    for (const auto& run : r.runs) {
      for (double a : {run.val.n, run.val.s, run.val.agr}) {
        if (!(a >= 0 && a <= 1)) bad.push_back(tag + ": accuracy outside [0, 1]");
      }
      if (r.refine.w == 0 && run.val.agr != run.val.n) bad.push_back(tag + ": w=0 changed the accuracy");
    }
    const auto& d = r.diagnostics;
    if (static_cast<long>(d.helped) - static_cast<long>(d.hurt) !=
        static_cast<long>(d.agr_correct) - static_cast<long>(d.plain_correct)) {
      bad.push_back(tag + ": helped - hurt disagrees with the accuracy difference");
    }
  }
  return bad;
}

int run_evaluation(const std::string& sub, const Common& c, const ModelPaths& paths, const std::string& traces) {
  auto s = open_session(sub, c);
  const auto ds = require_dataset(paths.dataset, s);
  const auto pn = require_checkpoint(default_ckpt(s, paths.fn, Objective::kNextToken), ds, s, "next_checkpoint");
  const auto ps =
      require_checkpoint(default_ckpt(s, paths.fs, Objective::kSecondToLast), ds, s, "second_to_last_checkpoint");
  TransformerNext fn(pn);
  TransformerRefiner fsm(ps, s.cfg.train.perm.l);
  EvalConfig ec = s.cfg.eval;
  ec.context_len = std::min(pn.config.block_size, ps.config.block_size);
  std::vector<std::size_t> ks = s.cfg.grid_k;
  std::vector<double> ws = s.cfg.grid_w;
  std::string label = fs::path(s.cfg.corpus).stem().string();
  auto eval_split = ds.validation();
  if (sub == "agr") {
    ks = {s.cfg.refine.k};
    ws = {s.cfg.refine.w};
    if (!paths.split.empty()) {
      // A single split is reported in the validation columns, labelled by name.
      ec.include_train = false;
      if (paths.split == "train") eval_split = ds.train();
      label += ":" + paths.split;
    }
  }
  s.manifest.seeds["eval"] = ec.seed;
  const auto reports =
      evaluate(fn, fsm, ds.train(), eval_split, ec, ks, ws, s.cfg.train.perm.l, label);

  std::ostringstream table, csv;
  report_table(table, reports);
  report_csv(csv, reports);
  std::cout << table.str();
  for (const auto& r : reports) {
    if (r.t_test) {
      std::cout << "k=" << r.refine.k << " w=" << r.refine.w << ": t=" << r.t_test->t << " df=" << r.t_test->df
                << " one-sided p=" << r.t_test->p << "\n";
    } else {
      std::cout << "k=" << r.refine.k << " w=" << r.refine.w << ": " << r.t_test_note << "\n";
    }
  }
  write_text(s.dir / (sub + ".txt"), table.str());
  write_text(s.dir / (sub + ".csv"), csv.str());
  s.manifest.artifacts["table"] = (s.dir / (sub + ".txt")).string();
  s.manifest.artifacts["csv"] = (s.dir / (sub + ".csv")).string();
  if (s.cfg.diagnostics) {
    std::vector<std::pair<RefineConfig, DiagnosticCounters>> rows;
    for (const auto& r : reports) rows.emplace_back(r.refine, r.diagnostics);
    std::ofstream d(s.dir / "diagnostics.csv");
    write_diagnostics_csv(d, rows, ds.vocab);
    s.manifest.artifacts["diagnostics"] = (s.dir / "diagnostics.csv").string();
  }
  if (!traces.empty()) {
    // Per-sample traces of the first validation run.
    const auto pos = sample_positions(eval_split.size(), ec.context_len, ec.samples, run_seed(ec.seed, 0));
    const auto recs = collect_samples(fn, fsm, eval_split, pos, s.cfg.refine.k, ec.context_len, ec.chunk,
                                      ec.threads);
    std::ofstream t(traces);
    t << "position,previous,target,plain,chosen,fallback,candidates,verdicts,log_probs\n";
    for (const auto& r : recs) {
      const auto tr = trace_for(r, s.cfg.refine.k, s.cfg.refine.w);
      t << r.position << ',' << r.previous << ',' << r.target << ',' << tr.plain << ',' << tr.chosen << ','
        << tr.fallback << ",\"" << detail::join(tr.candidates) << "\",";
      std::vector<int> v(tr.verdicts.begin(), tr.verdicts.end());
      t << '"' << detail::join(v) << "\",\"" << detail::join(tr.log_probs) << "\"\n";
    }
    t.close();
    s.manifest.artifacts["traces"] = traces;
  }
  s.manifest.write(s.dir);
  const auto bad = report_violations(reports);
  for (const auto& b : bad) std::cerr << "invariant violated: " << b << "\n";
  return bad.empty() ? kOk : kFailed;
}

int cmd_oracle(const Common& c, const std::string& op, const std::string& context, int last, bool pointwise) {
  auto s = open_session("oracle", c);
  const auto& oc = s.cfg.oracle;
  auto make_source = [&](std::uint64_t seed) {
    if (oc.source == "seeded") return MarkovSource::seeded(oc.vocab, oc.order, seed, oc.alpha);
    if (oc.source == "uniform") return MarkovSource::uniform(oc.vocab, oc.order);
    if (oc.source == "identity") return MarkovSource::identity(oc.vocab);
    if (oc.source == "cycle") return MarkovSource::cycle(oc.vocab);
    if (oc.source == "copy") return MarkovSource::copy(oc.vocab, oc.order);
    if (oc.source == "table") return MarkovSource::load(oc.table);
    throw Error("oracle.source must be seeded, uniform, identity, cycle, copy or table; got '" + oc.source + "'");
  };
  const std::size_t n_sources = oc.source == "seeded" ? std::max<std::size_t>(1, oc.sources) : 1;
  s.manifest.seeds["oracle"] = oc.seed;
  std::ostringstream csv;
  csv << std::setprecision(12);
  auto parse_ids = [&](const std::string& text) {
    std::vector<TokenId> ids;
    if (!text.empty()) {
      for (auto v : detail::parse_list<std::uint64_t>("--context", text)) ids.push_back(static_cast<TokenId>(v));
    }
    return ids;
  };

  if (op == "next" || op == "second-to-last") {
    const auto src = make_source(oc.seed);
    const auto ids = parse_ids(context);
    std::vector<double> d;
    if (op == "next") {
      d = exact_next_dist(src, ids);
    } else {
      if (last < 0) throw Error("--last is required for op second-to-last");
      d = exact_second_to_last_dist(src, ids, static_cast<TokenId>(last));
    }
    csv << "token,probability\n";
    for (std::size_t i = 0; i < d.size(); ++i) csv << i << ',' << d[i] << '\n';
  } else if (op == "locality") {
    csv << "source_seed,t,uni,bi,gap,worst_uni,worst_bi,metric\n";
    std::ostringstream points;
    points << "source_seed,context,weight,uni,bi,gap\n" << std::setprecision(12);
    for (std::size_t i = 0; i < n_sources; ++i) {
      const auto r = locality_gap(make_source(oc.seed + i), oc.t, pointwise);
      csv << oc.seed + i << ',' << r.t << ',' << r.uni << ',' << r.bi << ',' << r.gap << ',' << r.worst_uni << ','
          << r.worst_bi << ',' << r.metric << '\n';
      for (const auto& p : r.pointwise) {
        points << oc.seed + i << ",\"" << detail::join(p.context) << "\"," << p.weight << ',' << p.uni << ','
               << p.bi << ',' << p.uni - p.bi << '\n';
      }
    }
    if (pointwise) {
      write_text(s.dir / "locality_pointwise.csv", points.str());
      s.manifest.artifacts["pointwise"] = (s.dir / "locality_pointwise.csv").string();
    }
  } else if (op == "sweep") {
    const auto model = oc.verdicts == "refiner" ? VerdictModel::kRefiner : VerdictModel::kCorrectness;
    csv << "source_seed,k,w,epsilon,plain,agr,delta\n";
    for (std::size_t i = 0; i < n_sources; ++i) {
      for (const auto& r :
           oracle_agr_sweep(make_source(oc.seed + i), oc.t, oc.grid_k, oc.grid_w, oc.epsilons, model)) {
        csv << oc.seed + i << ',' << r.k << ',' << r.w << ',' << r.epsilon << ',' << r.plain << ',' << r.agr << ','
            << r.delta() << '\n';
      }
    }
  } else {
    throw Error("--op must be next, second-to-last, locality or sweep; got '" + op + "'");
  }
  std::cout << csv.str();
  const auto path = s.dir / ("oracle_" + op + ".csv");
  write_text(path, csv.str());
  s.manifest.artifacts["csv"] = path.string();
  s.manifest.write(s.dir);
  return kOk;
}

int cmd_selftest() {
  bool all = true;
  for (const auto& r : run_selftest()) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    all = all && r.passed;
  }
  return all ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generate-then-refine next-token prediction lab"};
  app.require_subcommand(1);

  Common common;
  std::string corpus, objective = "both", dataset, traces, op = "locality", context;
  ModelPaths paths;
  int last = -1;
  bool pointwise = false;

  auto* prepare = app.add_subcommand("prepare", "tokenize the corpus into a dataset file");
  add_common(prepare, common);
  prepare->add_option("--corpus", corpus, "text file (overrides data.corpus)");

  auto* train_cmd = app.add_subcommand("train", "train the next-token and/or second-to-last model");
  add_common(train_cmd, common);
  train_cmd->add_option("--objective", objective, "next | second-to-last | both")
      ->check(CLI::IsMember({"next", "second-to-last", "both"}));
  train_cmd->add_option("--dataset", dataset, "dataset file (default runs/prepare/dataset.agrd)");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate f_n, f_s and AGR over the (k, w) grid");
  auto* agr_cmd = app.add_subcommand("agr", "evaluate AGR at a single (k, w)");
  for (auto* sub : {eval_cmd, agr_cmd}) {
    add_common(sub, common);
    sub->add_option("--fn", paths.fn, "next-token checkpoint (default runs/train/next.ckpt)");
    sub->add_option("--fs", paths.fs, "second-to-last checkpoint (default runs/train/second-to-last.ckpt)");
    sub->add_option("--dataset", paths.dataset, "dataset file (default runs/prepare/dataset.agrd)");
  }
  agr_cmd->add_option("--split", paths.split, "evaluate only this split: train | val")
      ->check(CLI::IsMember({"train", "val"}));
  agr_cmd->add_option("--traces", traces, "write per-sample traces of the first run to this CSV");

  auto* oracle_cmd = app.add_subcommand("oracle", "exact Markov-source experiments");
  add_common(oracle_cmd, common);
  oracle_cmd->add_option("--op", op, "next | second-to-last | locality | sweep");
  oracle_cmd->add_option("--context", context, "comma-separated token ids for next / second-to-last");
  oracle_cmd->add_option("--last", last, "last token for second-to-last");
  oracle_cmd->add_flag("--pointwise", pointwise, "also write per-context locality gaps");

  auto* selftest = app.add_subcommand("selftest", "run the invariant suite");

  CLI11_PARSE(app, argc, argv);
  try {
    if (prepare->parsed()) return cmd_prepare(common, corpus);
    if (train_cmd->parsed()) return cmd_train(common, objective, dataset);
    if (eval_cmd->parsed()) return run_evaluation("eval", common, paths, "");
    if (agr_cmd->parsed()) return run_evaluation("agr", common, paths, traces);
    if (oracle_cmd->parsed()) return cmd_oracle(common, op, context, last, pointwise);
    if (selftest->parsed()) return cmd_selftest();
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  }
  return kUsageError;
}
