#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "madf/config.hpp"
#include "madf/metrics_io.hpp"
#include "madf/serialize.hpp"
#include "madf/trainer.hpp"

namespace fs = std::filesystem;
using namespace madf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

fs::path artifact_root(const std::string& out_flag) {
  if (!out_flag.empty()) return out_flag;
  if (const char* env = std::getenv("MADF_RUN_DIR"); env && *env) return env;
  return "madf_runs";
}

// One command per run directory, enforced by an exclusive lock file.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / "lock") {
    fs::create_directories(dir);
    if (fs::exists(path_)) {
      throw IoError("run directory '" + dir.string() +
                    "' is locked by another command (remove 'lock' if stale)");
    }
    write_file_atomic(path_, "locked\n");
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
};

struct CommonFlags {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> rounds;
};

Config resolve_config(const CommonFlags& flags) {
  Config cfg = flags.config_path.empty() ? Config{} : load_config(flags.config_path);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.rounds) cfg.rounds = *flags.rounds;
  cfg.validate();
  return cfg;
}

void apply_system(Config& cfg, const std::string& system) {
  if (system == "sl" || system == "rl-1q1a") {
    cfg.pool_q = 1;
    cfg.pool_a = 1;
  } else if (system == "rl-1q3a") {
    cfg.pool_q = 1;
    cfg.pool_a = 3;
  } else if (system == "rl-3q1a") {
    cfg.pool_q = 3;
    cfg.pool_a = 1;
  } else {
    throw ConfigError("unknown --system '" + system + "'");
  }
}

std::string run_id(const std::string& system, const Config& cfg) {
  return system + "_seed" + std::to_string(cfg.seed);
}

Dataset load_dataset(const fs::path& root, const World& world) {
  const fs::path data = root / "data";
  if (!fs::exists(data / "manifest.json")) {
    throw IoError("no dataset under '" + data.string() + "' (run gen-data first)");
  }
  Dataset ds;
  ds.train = load_split_jsonl(data / "train.jsonl", world);
  ds.val = load_split_jsonl(data / "val.jsonl", world);
  ds.test = load_split_jsonl(data / "test.jsonl", world);
  return ds;
}

int cmd_gen_data(const CommonFlags& flags, bool force) {
  const Config cfg = resolve_config(flags);
  const fs::path root = artifact_root(flags.out);
  const fs::path data = root / "data";
  if (fs::exists(data / "manifest.json") && !force) {
    throw IoError("dataset already exists at '" + data.string() + "' (use --force to replace)");
  }
  fs::create_directories(data);
  RunLock lock(data);

  World world = world_from_config(cfg);
  Dataset ds = world.generate_dataset(cfg.seed, cfg.n_train, cfg.n_val, cfg.n_test, cfg.rounds);
  save_split_jsonl(data / "train.jsonl", ds.train);
  save_split_jsonl(data / "val.jsonl", ds.val);
  save_split_jsonl(data / "test.jsonl", ds.test);
  save_mixing_matrix(data / "mixing.bin", world.mixing(), world.embed_dim());
  write_file_atomic(data / "config.txt", cfg.canonical());

  nlohmann::json manifest;
  manifest["config_hash"] = cfg.hash();
  manifest["seed"] = cfg.seed;
  manifest["schema"] = cfg.schema;
  manifest["rounds"] = cfg.rounds;
  nlohmann::json files;
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "mixing.bin", "config.txt"}) {
    files[f] = fnv1a(read_file(data / f));
  }
  manifest["files"] = files;
  write_file_atomic(data / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "wrote dataset (" << ds.train.size() << " train / " << ds.val.size() << " val / "
            << ds.test.size() << " test) to " << data.string() << "\n";
  return kExitOk;
}

int cmd_train(const CommonFlags& flags, const std::string& system) {
  Config cfg = resolve_config(flags);
  apply_system(cfg, system);
  const fs::path root = artifact_root(flags.out);
  World world = world_from_config(cfg);
  Dataset ds = load_dataset(root, world);

  const fs::path run = root / "runs" / run_id(system, cfg);
  RunLock lock(run);
  write_file_atomic(run / "config.txt", cfg.canonical());

  Trainer trainer(cfg, world, ds, run, root / "sl_cache");
  TrainSummary sum = trainer.train(system != "sl");
  std::cout << "run " << run_id(system, cfg) << " complete\n"
            << "  sl val token acc: q " << sum.sl_final.q_token_acc << "% a "
            << sum.sl_final.a_token_acc << "%\n"
            << "  sl val round-T mse: " << sum.sl_final.mse_round_T << " (epoch 0: "
            << sum.sl_epoch0.mse_round_T << ")\n";
  if (system != "sl") {
    std::cout << "  rl epochs run: " << sum.rl_epochs_run << " (resumed from "
              << sum.rl_epochs_resumed_from << "), final mean reward " << sum.final_mean_reward
              << "\n";
  }
  std::cout << "  final checkpoint: " << sum.final_checkpoint.string() << "\n";
  return kExitOk;
}

int cmd_eval(const CommonFlags& flags, const std::string& system, std::string checkpoint_path) {
  Config cfg = resolve_config(flags);
  apply_system(cfg, system);
  const fs::path root = artifact_root(flags.out);
  World world = world_from_config(cfg);
  Dataset ds = load_dataset(root, world);

  const fs::path run = root / "runs" / run_id(system, cfg);
  if (checkpoint_path.empty()) checkpoint_path = (run / "final.ckpt").string();
  if (!fs::exists(checkpoint_path)) {
    throw IoError("checkpoint '" + checkpoint_path + "' not found");
  }

  RunLock lock(run);
  Trainer holder(cfg, world, ds, run, root / "sl_cache");
  holder.load_all(Checkpoint::load(checkpoint_path));

  // Frozen SL references for the drift metric: member 0's cached pretraining.
  // Drift is skipped (reported as 0) when the cache is absent.
  std::unique_ptr<QBot> refq;
  std::unique_ptr<ABot> refa;
  const fs::path q_cache = sl_cache_path(root / "sl_cache", cfg, true, 0);
  const fs::path a_cache = sl_cache_path(root / "sl_cache", cfg, false, 0);
  if (fs::exists(q_cache) && fs::exists(a_cache)) {
    refq = std::make_unique<QBot>(dims_from_config(cfg, world, true), member_seed(cfg, true, 0));
    refa = std::make_unique<ABot>(dims_from_config(cfg, world, false), member_seed(cfg, false, 0));
    Optimizer oq(opt_kind(cfg), cfg.lr_sl), oa(opt_kind(cfg), cfg.lr_sl);
    unpack_agent(Checkpoint::load(q_cache), "q0", refq->params, oq);
    unpack_agent(Checkpoint::load(a_cache), "a0", refa->params, oa);
  }

  MetricsReport rep = evaluate_system(holder.qbot(0), holder.abot(0), world, ds.test, cfg.rounds,
                                      cfg.n_candidates, cfg.recall_k, cfg.seed, refq.get(),
                                      refa.get());
  rep.system = system;
  write_file_atomic(run / "metrics.json", metrics_to_json(rep).dump(2) + "\n");
  write_file_atomic(run / "percentile.csv", percentile_csv(rep));
  std::cout << "system " << system << " seed " << cfg.seed << ": mrr " << rep.mrr << ", mean rank "
            << rep.mean_rank << ", R@" << rep.k << " " << rep.recall_at_k << "%\n"
            << "  grammar q/a: " << rep.grammar_rate_q << "% / " << rep.grammar_rate_a
            << "%, relevance " << rep.relevance_rate_q << "%, consistency "
            << rep.consistency_rate_a << "%\n"
            << "  final-round percentile: " << rep.percentile_by_round.back() << "\n"
            << "  wrote " << (run / "metrics.json").string() << "\n";
  return kExitOk;
}

int cmd_report(const std::vector<std::string>& paths, const std::string& out) {
  if (paths.size() < 2) throw ConfigError("report needs at least two metric JSON files");
  std::vector<MetricsReport> reps;
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw IoError("metrics file '" + p + "' not found");
    reps.push_back(metrics_from_json(nlohmann::json::parse(read_file(p))));
  }

  std::ostringstream table;
  table.precision(4);
  table << "system,seed,mrr,mean_rank,recall_at_k,grammar_q,grammar_a,relevance,consistency,"
           "final_percentile,drift_perplexity\n";
  for (const auto& r : reps) {
    table << r.system << ',' << r.seed << ',' << r.mrr << ',' << r.mean_rank << ','
          << r.recall_at_k << ',' << r.grammar_rate_q << ',' << r.grammar_rate_a << ','
          << r.relevance_rate_q << ',' << r.consistency_rate_a << ','
          << r.percentile_by_round.back() << ',' << r.drift_perplexity << '\n';
  }

  std::ostringstream tests;
  tests << "\npairwise Mann-Whitney U on per-scene grammar rates\n";
  for (std::size_t i = 0; i < reps.size(); ++i) {
    for (std::size_t j = i + 1; j < reps.size(); ++j) {
      auto r = mann_whitney_u(reps[i].per_scene_grammar, reps[j].per_scene_grammar);
      tests << "  " << reps[i].system << " seed " << reps[i].seed << " vs " << reps[j].system
            << " seed " << reps[j].seed << ": U=" << r.u << " p=" << r.p
            << (r.exact ? " (exact)" : " (normal approx)") << "\n";
    }
  }

  std::cout << table.str() << tests.str();
  if (!out.empty()) write_file_atomic(out, table.str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cooperative visual-dialog guessing game trainer"};
  app.require_subcommand(1);

  CommonFlags flags;
  bool force = false;
  std::string system = "sl";
  std::string checkpoint;
  std::vector<std::string> report_paths;
  std::string report_out;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config_path, "config file (key = value lines)");
    sub->add_option("--out", flags.out, "artifact root (default $MADF_RUN_DIR or ./madf_runs)");
    sub->add_option("--seed", flags.seed, "override config seed");
    sub->add_option("--rounds", flags.rounds, "override dialog rounds");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen);
  gen->add_flag("--force", force, "replace an existing dataset");

  CLI::App* train = app.add_subcommand("train", "run supervised and/or self-play training");
  add_common(train);
  train->add_option("--system", system, "sl | rl-1q1a | rl-1q3a | rl-3q1a");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a trained checkpoint");
  add_common(eval);
  eval->add_option("--system", system, "sl | rl-1q1a | rl-1q3a | rl-3q1a");
  eval->add_option("--checkpoint", checkpoint, "checkpoint path (default <run>/final.ckpt)");

  CLI::App* report = app.add_subcommand("report", "compare metric JSON files");
  report->add_option("files", report_paths, "metrics.json files (>= 2)");
  report->add_option("--report-out", report_out, "also write the comparison CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(flags, force);
    if (train->parsed()) return cmd_train(flags, system);
    if (eval->parsed()) return cmd_eval(flags, system, checkpoint);
    if (report->parsed()) return cmd_report(report_paths, report_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
