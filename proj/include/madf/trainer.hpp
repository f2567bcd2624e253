#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "madf/config.hpp"
#include "madf/serialize.hpp"
#include "madf/training.hpp"

namespace madf {

namespace salts {
constexpr std::uint64_t kMemberQ = 0x3170;
constexpr std::uint64_t kMemberA = 0xa170;
constexpr std::uint64_t kSlShuffle = 0x51a5;
constexpr std::uint64_t kRlShuffle = 0x1f1e;
constexpr std::uint64_t kPartner = 0x9a17;
constexpr std::uint64_t kEpisode = 0xe915;
}  // namespace salts

inline AgentDims dims_from_config(const Config& cfg, const World& world, bool qbot) {
  AgentDims d;
  d.vocab = world.vocab().size();
  d.embed = cfg.embed;
  d.hidden = cfg.hidden;
  d.attn = cfg.attn;
  d.enc = cfg.enc;
  d.img_dim = world.embed_dim();
  d.max_len = qbot ? cfg.qbot_max_len : cfg.abot_max_len;
  return d;
}

inline World world_from_config(const Config& cfg) {
  return World(cfg.schema == "tiny"     ? AttributeSchema::tiny_schema()
               : cfg.schema == "sparse" ? AttributeSchema::sparse_schema()
                                        : AttributeSchema::default_schema(),
               cfg.seed);
}

inline std::uint64_t member_seed(const Config& cfg, bool qbot, int index) {
  return Rng(cfg.seed)
      .derive(qbot ? salts::kMemberQ : salts::kMemberA, static_cast<std::uint64_t>(index))
      .next_u64();
}

// Hash of everything that determines a pretrained member, so the supervised
// cache can be shared across systems that differ only in pool sizes or RL
// settings.
inline std::uint64_t sl_cache_hash(const Config& cfg) {
  std::string key;
  for (const char* k : {"seed", "schema", "n_train", "n_val", "n_test", "rounds", "batch_size",
                        "sl_epochs", "lr_sl", "optimizer", "clip_norm", "embed", "hidden", "attn",
                        "enc", "qbot_max_len", "abot_max_len"}) {
    key += std::string(k) + "=" + cfg.get(k) + "\n";
  }
  return fnv1a(key);
}

inline std::filesystem::path sl_cache_path(const std::filesystem::path& cache_dir,
                                           const Config& cfg, bool is_q, int index) {
  std::ostringstream name;
  name << (is_q ? "q_" : "a_") << std::hex << sl_cache_hash(cfg) << "_"
       << member_seed(cfg, is_q, index) << ".ckpt";
  return cache_dir / name.str();
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

inline OptKind opt_kind(const Config& cfg) {
  return cfg.optimizer == "sgd" ? OptKind::Sgd : OptKind::Adam;
}

// ---------------------------------------------------------------------------
// Validation of the supervised phase
// ---------------------------------------------------------------------------

struct SlValidation {
  double q_token_acc = 0.0;  // percent
  double a_token_acc = 0.0;
  double mse_round_T = 0.0;  // Q-Bot image MSE at the final round, averaged
};

inline SlValidation validate_sl(QBot& qbot, ABot& abot, const World& world,
                                const std::vector<Scene>& scenes, int rounds) {
  SlValidation v;
  long long q_tok = 0, q_ok = 0, a_tok = 0, a_ok = 0;
  EpisodeOptions opt;
  opt.rounds = rounds;
  opt.K = rounds;
  opt.train_mode = false;
  for (const auto& s : scenes) {
    auto tr = run_dialog_episode(qbot, abot, world, s, opt, Rng(0));
    for (const auto& r : tr.rounds) {
      q_tok += r.q_token_count;
      q_ok += r.q_token_correct;
      a_tok += r.a_token_count;
      a_ok += r.a_token_correct;
    }
    v.mse_round_T += tr.rounds.back().img_mse.item();
  }
  v.q_token_acc = q_tok == 0 ? 0.0 : 100.0 * static_cast<double>(q_ok) / q_tok;
  v.a_token_acc = a_tok == 0 ? 0.0 : 100.0 * static_cast<double>(a_ok) / a_tok;
  v.mse_round_T /= static_cast<double>(scenes.size());
  return v;
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

struct TrainSummary {
  SlValidation sl_epoch0;        // untrained members (member 0 of each pool)
  SlValidation sl_final;         // after supervised pretraining
  double final_mean_reward = 0.0;
  int rl_epochs_run = 0;
  int rl_epochs_resumed_from = 0;
  std::filesystem::path final_checkpoint;
};

class Trainer {
 public:
  Trainer(Config cfg, const World& world, const Dataset& ds, std::filesystem::path run_dir,
          std::filesystem::path cache_dir)
      : cfg_(std::move(cfg)), world_(world), ds_(ds), run_dir_(std::move(run_dir)),
        cache_dir_(std::move(cache_dir)) {
    std::filesystem::create_directories(run_dir_);
    std::filesystem::create_directories(cache_dir_);
    for (int i = 0; i < cfg_.pool_q; ++i) {
      qbots_.push_back(std::make_unique<QBot>(dims_from_config(cfg_, world_, true),
                                              member_seed(cfg_, true, i)));
      q_opts_.push_back(std::make_unique<Optimizer>(opt_kind(cfg_), cfg_.lr_sl));
    }
    for (int i = 0; i < cfg_.pool_a; ++i) {
      abots_.push_back(std::make_unique<ABot>(dims_from_config(cfg_, world_, false),
                                              member_seed(cfg_, false, i)));
      a_opts_.push_back(std::make_unique<Optimizer>(opt_kind(cfg_), cfg_.lr_sl));
    }
  }

  QBot& qbot(int i) { return *qbots_[static_cast<std::size_t>(i)]; }
  ABot& abot(int i) { return *abots_[static_cast<std::size_t>(i)]; }

  // Runs phase 1 (with cache) and, when rl_phase is set, phase 2. Writes
  // per-epoch RL checkpoints and final.ckpt; resumes from the newest RL
  // checkpoint if one exists.
  TrainSummary train(bool rl_phase) {
    TrainSummary sum;
    sum.sl_epoch0 = validate_sl(qbot(0), abot(0), world_, ds_.val, cfg_.rounds);
    log_validation("sl_epoch0", sum.sl_epoch0);

    pretrain_members();
    sum.sl_final = validate_sl(qbot(0), abot(0), world_, ds_.val, cfg_.rounds);
    log_validation("sl_final", sum.sl_final);

    if (rl_phase && cfg_.rl_epochs > 0) {
      // RL uses fresh optimizers at the RL learning rate.
      for (auto& o : q_opts_) o = std::make_unique<Optimizer>(opt_kind(cfg_), cfg_.lr_rl);
      for (auto& o : a_opts_) o = std::make_unique<Optimizer>(opt_kind(cfg_), cfg_.lr_rl);
      int start_epoch = 0;
      for (int e = cfg_.rl_epochs - 1; e >= 0; --e) {
        const auto path = rl_checkpoint_path(e);
        if (std::filesystem::exists(path)) {
          load_all(Checkpoint::load(path));
          start_epoch = e + 1;
          break;
        }
      }
      sum.rl_epochs_resumed_from = start_epoch;
      for (int e = start_epoch; e < cfg_.rl_epochs; ++e) {
        sum.final_mean_reward = rl_epoch(e);
        Checkpoint ck = snapshot("rl", e);
        ck.save(rl_checkpoint_path(e));
      }
      sum.rl_epochs_run = cfg_.rl_epochs - start_epoch;
    }

    Checkpoint final = snapshot(rl_phase && cfg_.rl_epochs > 0 ? "rl" : "sl",
                                rl_phase ? cfg_.rl_epochs : cfg_.sl_epochs);
    sum.final_checkpoint = run_dir_ / "final.ckpt";
    final.save(sum.final_checkpoint);
    return sum;
  }

  Checkpoint snapshot(const std::string& phase, int epoch) const {
    Checkpoint ck;
    ck.run_id = run_dir_.filename().string();
    ck.phase = phase;
    ck.epoch = epoch;
    ck.config_hash = cfg_.hash();
    for (int i = 0; i < cfg_.pool_q; ++i) {
      pack_agent(ck, "q" + std::to_string(i), qbots_[static_cast<std::size_t>(i)]->params,
                 *q_opts_[static_cast<std::size_t>(i)]);
    }
    for (int i = 0; i < cfg_.pool_a; ++i) {
      pack_agent(ck, "a" + std::to_string(i), abots_[static_cast<std::size_t>(i)]->params,
                 *a_opts_[static_cast<std::size_t>(i)]);
    }
    return ck;
  }

  void load_all(const Checkpoint& ck) {
    if (ck.config_hash != cfg_.hash()) {
      throw IoError("checkpoint: config hash mismatch (checkpoint from a different config)");
    }
    for (int i = 0; i < cfg_.pool_q; ++i) {
      unpack_agent(ck, "q" + std::to_string(i), qbots_[static_cast<std::size_t>(i)]->params,
                   *q_opts_[static_cast<std::size_t>(i)]);
    }
    for (int i = 0; i < cfg_.pool_a; ++i) {
      unpack_agent(ck, "a" + std::to_string(i), abots_[static_cast<std::size_t>(i)]->params,
                   *a_opts_[static_cast<std::size_t>(i)]);
    }
  }

 private:
  std::filesystem::path rl_checkpoint_path(int epoch) const {
    std::ostringstream name;
    name << "rl_epoch_" << std::setw(3) << std::setfill('0') << epoch << ".ckpt";
    return run_dir_ / name.str();
  }

  std::filesystem::path cache_path(bool is_q, int index) const {
    return sl_cache_path(cache_dir_, cfg_, is_q, index);
  }

  void log_row(nlohmann::json j) {
    j["wall_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::steady_clock::now() - t0_)
                       .count();
    append_line(run_dir_ / "train_log.jsonl", j.dump());
  }

  void log_validation(const std::string& tag, const SlValidation& v) {
    log_row({{"event", tag},
             {"q_token_acc", v.q_token_acc},
             {"a_token_acc", v.a_token_acc},
             {"mse_round_T", v.mse_round_T}});
  }

  // Phase 1: every pool member is pretrained in isolation on oracle dialogs,
  // or restored from the shared cache when an identical pretraining exists.
  void pretrain_members() {
    for (int i = 0; i < cfg_.pool_q; ++i) pretrain_one(true, i);
    for (int i = 0; i < cfg_.pool_a; ++i) pretrain_one(false, i);
  }

  void pretrain_one(bool is_q, int index) {
    const auto path = cache_path(is_q, index);
    ParamStore& params = is_q ? qbots_[static_cast<std::size_t>(index)]->params
                              : abots_[static_cast<std::size_t>(index)]->params;
    Optimizer& opt = is_q ? *q_opts_[static_cast<std::size_t>(index)]
                          : *a_opts_[static_cast<std::size_t>(index)];
    const std::string tag = (is_q ? "q" : "a") + std::to_string(index);
    if (std::filesystem::exists(path)) {
      unpack_agent(Checkpoint::load(path), tag, params, opt);
      log_row({{"event", "sl_cache_hit"}, {"member", tag}});
      return;
    }
    const std::uint64_t mseed = member_seed(cfg_, is_q, index);
    const std::size_t bs = static_cast<std::size_t>(cfg_.batch_size);
    for (int epoch = 0; epoch < cfg_.sl_epochs; ++epoch) {
      auto order = shuffled_indices(ds_.train.size(),
                                    Rng(mseed).derive(salts::kSlShuffle,
                                                      static_cast<std::uint64_t>(epoch)));
      double mle = 0.0, mse_sum = 0.0;
      int batches = 0;
      for (std::size_t b0 = 0; b0 < order.size(); b0 += bs) {
        params.zero_grads();
        const std::size_t bend = std::min(b0 + bs, order.size());
        const double inv = 1.0 / static_cast<double>(bend - b0);
        double bmle = 0.0, bmse = 0.0;
        for (std::size_t k = b0; k < bend; ++k) {
          const Scene& scene = ds_.train[order[k]];
          if (is_q) {
            auto [loss, stats] =
                sl_qbot_pass(*qbots_[static_cast<std::size_t>(index)], world_, scene, cfg_.rounds);
            backward(scale(loss, inv));
            bmle += stats.mle * inv;
            bmse += stats.mse * inv;
          } else {
            auto [loss, stats] =
                sl_abot_pass(*abots_[static_cast<std::size_t>(index)], world_, scene, cfg_.rounds);
            backward(scale(loss, inv));
            bmle += stats.mle * inv;
          }
        }
        clip_global_norm(params, cfg_.clip_norm);
        opt.step(params);
        mle += bmle;
        mse_sum += bmse;
        ++batches;
      }
      log_row({{"phase", "sl"},
               {"member", tag},
               {"epoch", epoch},
               {"mle", mle / batches},
               {"mse", mse_sum / batches}});
    }
    Checkpoint ck;
    ck.run_id = "sl_cache";
    ck.phase = "sl";
    ck.epoch = cfg_.sl_epochs;
    ck.config_hash = cfg_.hash();
    pack_agent(ck, tag, params, opt);
    ck.save(path);
  }

  // Phase 2: curriculum self-play against sampled partners. Returns the epoch
  // mean per-round reward over the RL rounds.
  double rl_epoch(int epoch) {
    const int K = anneal_K({cfg_.start_k, cfg_.anneal_epochs}, epoch);
    auto order = shuffled_indices(
        ds_.train.size(), Rng(cfg_.seed).derive(salts::kRlShuffle,
                                                static_cast<std::uint64_t>(epoch)));
    const std::size_t bs = static_cast<std::size_t>(cfg_.batch_size);
    double epoch_reward = 0.0;
    long long epoch_rl_rounds = 0;
    int batch_index = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += bs, ++batch_index) {
      Rng prng = Rng(cfg_.seed).derive(salts::kPartner, static_cast<std::uint64_t>(epoch),
                                       static_cast<std::uint64_t>(batch_index));
      const std::size_t qi = sample_partner(qbots_.size(), prng);
      const std::size_t ai = sample_partner(abots_.size(), prng);
      QBot& qb = *qbots_[qi];
      ABot& ab = *abots_[ai];
      qb.params.zero_grads();
      ab.params.zero_grads();

      const std::size_t bend = std::min(b0 + bs, order.size());
      const double inv = 1.0 / static_cast<double>(bend - b0);
      double breward = 0.0, bqmle = 0.0, bqmse = 0.0, bamle = 0.0;
      long long brl = 0;
      for (std::size_t k = b0; k < bend; ++k) {
        const Scene& scene = ds_.train[order[k]];
        EpisodeOptions eopt;
        eopt.rounds = cfg_.rounds;
        eopt.K = K;
        eopt.train_mode = true;
        eopt.rl_img_through_encoder = cfg_.rl_img_through_encoder;
        eopt.alg1_reward_sign = cfg_.alg1_reward_sign;
        eopt.unsquared_distance = cfg_.unsquared_distance;
        eopt.gamma = cfg_.gamma;
        auto trace = run_dialog_episode(
            qb, ab, world_, scene, eopt,
            Rng(cfg_.seed).derive(salts::kEpisode, static_cast<std::uint64_t>(epoch),
                                  static_cast<std::uint64_t>(order[k])));
        auto losses = episode_losses(trace, cfg_.rl_img_weight);
        backward(scale(losses.qbot_loss, inv));
        backward(scale(losses.abot_loss, inv));
        for (const auto& r : trace.rounds) {
          if (!r.supervised) {
            breward += r.reward;
            ++brl;
          }
        }
        bqmle += losses.qbot_mle * inv;
        bqmse += losses.qbot_mse * inv;
        bamle += losses.abot_mle * inv;
      }
      clip_global_norm(qb.params, cfg_.clip_norm);
      clip_global_norm(ab.params, cfg_.clip_norm);
      q_opts_[qi]->step(qb.params);
      a_opts_[ai]->step(ab.params);

      const double mean_reward = brl == 0 ? 0.0 : breward / static_cast<double>(brl);
      epoch_reward += breward;
      epoch_rl_rounds += brl;
      log_row({{"phase", "rl"},
               {"epoch", epoch},
               {"batch", batch_index},
               {"K", K},
               {"qbot", static_cast<int>(qi)},
               {"abot", static_cast<int>(ai)},
               {"mean_reward", mean_reward},
               {"qbot_mle", bqmle},
               {"qbot_mse", bqmse},
               {"abot_mle", bamle}});
    }
    return epoch_rl_rounds == 0 ? 0.0 : epoch_reward / static_cast<double>(epoch_rl_rounds);
  }

  Config cfg_;
  const World& world_;
  const Dataset& ds_;
  std::filesystem::path run_dir_, cache_dir_;
  std::vector<std::unique_ptr<QBot>> qbots_;
  std::vector<std::unique_ptr<ABot>> abots_;
  std::vector<std::unique_ptr<Optimizer>> q_opts_, a_opts_;
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

}  // namespace madf
