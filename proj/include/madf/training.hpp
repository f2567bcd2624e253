#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "madf/agents.hpp"
#include "madf/optim.hpp"
#include "madf/rng.hpp"
#include "madf/tensor.hpp"
#include "madf/world.hpp"

namespace madf {

// ---------------------------------------------------------------------------
// Schedules, rewards, returns
// ---------------------------------------------------------------------------

struct CurriculumSchedule {
  int start_k = 9;
  int anneal_epochs = 10;
};

// Linear anneal start_k -> 0; K(epoch >= anneal_epochs - 1) == 0.
inline int anneal_K(const CurriculumSchedule& s, int epoch) {
  if (epoch < 0) throw std::invalid_argument("anneal_K: negative epoch");
  if (s.anneal_epochs <= 1) return 0;
  const double frac = 1.0 - static_cast<double>(epoch) / static_cast<double>(s.anneal_epochs - 1);
  const int k = static_cast<int>(std::llround(s.start_k * frac));
  return std::max(0, k);
}

// Information-gain reward: decrease in distance to the ground-truth embedding.
inline double compute_reward(double prev_dist_sq, double curr_dist_sq) {
  if (prev_dist_sq < 0.0 || curr_dist_sq < 0.0) {
    throw std::invalid_argument("compute_reward: distances must be nonnegative");
  }
  return prev_dist_sq - curr_dist_sq;
}

inline std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma) {
  std::vector<double> g(rewards.size(), 0.0);
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + gamma * acc;
    g[i] = acc;
  }
  return g;
}

inline std::size_t sample_partner(std::size_t pool_size, Rng& rng) {
  if (pool_size == 0) throw std::invalid_argument("sample_partner: empty pool");
  return static_cast<std::size_t>(rng.below(pool_size));
}

// ---------------------------------------------------------------------------
// Episode rollout
// ---------------------------------------------------------------------------

struct RoundRecord {
  bool supervised = false;
  std::vector<int> q_tokens, a_tokens;
  std::vector<double> q_logprobs, a_logprobs;  // generated rounds only
  std::vector<double> y;                       // y_t
  double dist_sq = 0.0;                        // l(y_t, y_gt)
  double reward = 0.0;
  double ret = 0.0;  // discounted return G_t
  // Graph handles for the updates (train mode).
  Tensor q_logprob_sum, a_logprob_sum;  // RL rounds
  Tensor q_mle, a_mle;                  // supervised rounds
  Tensor img_mse;                       // every round
  int q_token_count = 0, q_token_correct = 0;
  int a_token_count = 0, a_token_correct = 0;
};

struct EpisodeTrace {
  int scene_id = -1;
  int K = 0;
  std::vector<double> y0;
  double dist0_sq = 0.0;
  Tensor y0_mse;
  std::vector<RoundRecord> rounds;

  double reward_sum() const {
    double s = 0.0;
    for (const auto& r : rounds) s += r.reward;
    return s;
  }
};

struct EpisodeOptions {
  int rounds = 10;
  int K = 0;                  // teacher-forced prefix length
  bool train_mode = true;     // sample on RL rounds; eval uses greedy
  bool rl_img_through_encoder = false;  // RL image loss reaches only the head f by default
  bool truncate_bptt = true;            // detach history facts at round boundaries
  bool alg1_reward_sign = false;
  // Replays a recorded transcript on the generated rounds instead of sampling,
  // so the episode loss is a smooth function of the parameters.
  const std::vector<std::pair<std::vector<int>, std::vector<int>>>* forced_dialog = nullptr;
  bool unsquared_distance = false;
  double gamma = 1.0;
};

inline double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// One full dialog: rounds 1..K teacher-forced from the oracle dialog, the rest
// generated (sampled in train mode, greedy otherwise). History facts are
// detached at round boundaries; the current round's fact stays in-graph for
// the image prediction, which is what lets gradients reach the fact encoder.
inline EpisodeTrace run_dialog_episode(QBot& qbot, ABot& abot, const World& world,
                                       const Scene& scene, const EpisodeOptions& opt, Rng rng) {
  if (opt.K < 0 || opt.K > opt.rounds) {
    throw std::invalid_argument("run_dialog_episode: K must be in [0, rounds]");
  }
  if (opt.K > 0 && static_cast<int>(scene.oracle.size()) < opt.K) {
    throw std::invalid_argument("run_dialog_episode: scene lacks an oracle dialog of length >= K");
  }
  EpisodeTrace trace;
  trace.scene_id = scene.scene_id;
  trace.K = opt.K;

  Tensor y_gt = Tensor::from({static_cast<int>(scene.y_gt.size())}, scene.y_gt);
  Tensor image = Tensor::from({static_cast<int>(scene.y_gt.size())}, scene.y_gt);

  auto distance = [&](const std::vector<double>& y) {
    const double d2 = squared_distance(y, scene.y_gt);
    return opt.unsquared_distance ? std::sqrt(d2) : d2;
  };

  // Caption-only baseline prediction y_0.
  auto enc0 = qbot.encode(scene.caption_tokens, qbot.zero_fact(), {});
  Tensor y0 = qbot.predict_image(enc0.s);
  trace.y0 = y0.values();
  trace.dist0_sq = distance(trace.y0);
  trace.y0_mse = mse(y0, y_gt);

  Tensor abot_caption_fact = abot.encode_caption_fact(scene.caption_tokens);

  std::vector<Tensor> q_history, a_history;  // detached facts F_1..F_{t-1}
  Tensor q_key = qbot.zero_fact();           // detached F_{t-1} used as attention key
  double prev_dist = trace.dist0_sq;

  for (int t = 0; t < opt.rounds; ++t) {
    RoundRecord rec;
    rec.supervised = t < opt.K;

    // Question.
    auto q_enc = qbot.encode(scene.caption_tokens, q_key, q_history);
    if (rec.supervised) {
      rec.q_tokens = scene.oracle[static_cast<std::size_t>(t)].first;
      auto tf = qbot.teacher_force(q_enc.e, rec.q_tokens);
      rec.q_mle = tf.nll_sum;
      rec.q_token_count = tf.n_tokens;
      rec.q_token_correct = tf.n_correct;
    } else if (opt.forced_dialog) {
      rec.q_tokens = (*opt.forced_dialog)[static_cast<std::size_t>(t)].first;
      rec.q_logprob_sum = qbot.sequence_logprob(q_enc.e, rec.q_tokens);
    } else {
      Rng qrng = rng.derive(static_cast<std::uint64_t>(t), 1);
      auto dec = qbot.decode_utterance(q_enc.e, opt.train_mode ? DecodeMode::Sample : DecodeMode::Greedy,
                                       &qrng);
      rec.q_tokens = dec.tokens;
      rec.q_logprobs = dec.logprobs;
      rec.q_logprob_sum = dec.logprob_sum;
    }

    // Answer.
    auto a_enc = abot.encode(rec.q_tokens, abot_caption_fact, a_history, image);
    if (rec.supervised) {
      rec.a_tokens = scene.oracle[static_cast<std::size_t>(t)].second;
      auto tf = abot.teacher_force(a_enc.e, rec.a_tokens);
      rec.a_mle = tf.nll_sum;
      rec.a_token_count = tf.n_tokens;
      rec.a_token_correct = tf.n_correct;
    } else if (opt.forced_dialog) {
      rec.a_tokens = (*opt.forced_dialog)[static_cast<std::size_t>(t)].second;
      rec.a_logprob_sum = abot.sequence_logprob(a_enc.e, rec.a_tokens);
    } else {
      Rng arng = rng.derive(static_cast<std::uint64_t>(t), 2);
      auto dec = abot.decode_utterance(a_enc.e, opt.train_mode ? DecodeMode::Sample : DecodeMode::Greedy,
                                       &arng);
      rec.a_tokens = dec.tokens;
      rec.a_logprobs = dec.logprobs;
      rec.a_logprob_sum = dec.logprob_sum;
    }

    // Fact of the completed exchange; image prediction from the updated state.
    Tensor fact = qbot.encode_fact(rec.q_tokens, rec.a_tokens);
    auto y_enc = qbot.encode(scene.caption_tokens, fact, q_history);
    Tensor state = (!rec.supervised && !opt.rl_img_through_encoder) ? detach(y_enc.s) : y_enc.s;
    Tensor y = qbot.predict_image(state);
    rec.y = y.values();
    rec.img_mse = mse(y, y_gt);
    rec.dist_sq = distance(rec.y);
    const double r = compute_reward(prev_dist, rec.dist_sq);
    rec.reward = opt.alg1_reward_sign ? -r : r;
    prev_dist = rec.dist_sq;

    // Detach into history for the next round.
    q_key = opt.truncate_bptt ? detach(fact) : fact;
    q_history.push_back(q_key);
    Tensor a_fact = abot.encode_fact(rec.q_tokens, rec.a_tokens);
    a_history.push_back(opt.truncate_bptt ? detach(a_fact) : a_fact);

    trace.rounds.push_back(std::move(rec));
  }

  std::vector<double> rewards;
  rewards.reserve(trace.rounds.size());
  for (const auto& r : trace.rounds) rewards.push_back(r.reward);
  const auto returns = discounted_returns(rewards, opt.gamma);
  for (std::size_t i = 0; i < returns.size(); ++i) trace.rounds[i].ret = returns[i];
  return trace;
}

// ---------------------------------------------------------------------------
// Losses and updates
// ---------------------------------------------------------------------------

struct EpisodeLosses {
  Tensor qbot_loss;  // MLE + MSE + policy-gradient surrogate, scalar
  Tensor abot_loss;
  double qbot_mle = 0.0, qbot_mse = 0.0, abot_mle = 0.0;
  int rl_rounds = 0;
};

// Builds per-bot scalar losses from one trace. Supervised rounds contribute
// teacher-forced MLE (plus image MSE for the Q-Bot, including the round-0
// baseline); RL rounds contribute -G_t * logprob (plus the weighted image MSE
// for the Q-Bot, per the update rule). Policy terms treat G_t as a constant.
inline EpisodeLosses episode_losses(const EpisodeTrace& trace, double rl_img_weight,
                                    double baseline = 0.0) {
  EpisodeLosses out;
  Tensor q_loss = Tensor::scalar(0.0);
  Tensor a_loss = Tensor::scalar(0.0);
  int sl_rounds = 0;
  for (const auto& r : trace.rounds) {
    if (r.supervised) {
      q_loss = add(q_loss, add(r.q_mle, r.img_mse));
      a_loss = add(a_loss, r.a_mle);
      out.qbot_mle += r.q_mle.item();
      out.abot_mle += r.a_mle.item();
      ++sl_rounds;
    } else {
      const double advantage = r.ret - baseline;
      q_loss = add(q_loss, add(scale(r.q_logprob_sum, -advantage),
                               scale(r.img_mse, rl_img_weight)));
      a_loss = add(a_loss, scale(r.a_logprob_sum, -advantage));
      ++out.rl_rounds;
    }
    out.qbot_mse += r.img_mse.item();
  }
  if (sl_rounds > 0) {
    q_loss = add(q_loss, trace.y0_mse);
    out.qbot_mle /= sl_rounds;
    out.abot_mle /= sl_rounds;
  }
  out.qbot_mse = (out.qbot_mse + trace.y0_mse.item()) / (trace.rounds.size() + 1);
  const double inv = 1.0 / static_cast<double>(trace.rounds.size());
  out.qbot_loss = scale(q_loss, inv);
  out.abot_loss = scale(a_loss, inv);
  return out;
}

// REINFORCE step for a single trace (RL rounds only). No-op with a warning
// flag when the trace has no RL rounds.
inline bool reinforce_update(QBot& qbot, ABot& abot, const EpisodeTrace& trace,
                             Optimizer& q_opt, Optimizer& a_opt, double rl_img_weight,
                             double clip_norm) {
  bool any_rl = false;
  for (const auto& r : trace.rounds) any_rl = any_rl || !r.supervised;
  if (!any_rl) return false;
  Tensor q_loss = Tensor::scalar(0.0);
  Tensor a_loss = Tensor::scalar(0.0);
  int n = 0;
  for (const auto& r : trace.rounds) {
    if (r.supervised) continue;
    q_loss = add(q_loss, add(scale(r.q_logprob_sum, -r.ret), scale(r.img_mse, rl_img_weight)));
    a_loss = add(a_loss, scale(r.a_logprob_sum, -r.ret));
    ++n;
  }
  const double inv = 1.0 / static_cast<double>(n);
  qbot.params.zero_grads();
  abot.params.zero_grads();
  backward(scale(q_loss, inv));
  backward(scale(a_loss, inv));
  clip_global_norm(qbot.params, clip_norm);
  clip_global_norm(abot.params, clip_norm);
  q_opt.step(qbot.params);
  a_opt.step(abot.params);
  return true;
}

// ---------------------------------------------------------------------------
// Isolated supervised training (phase 1); the two agents never interact.
// ---------------------------------------------------------------------------

struct SlLossStats {
  double mle = 0.0;           // mean per-round MLE
  double mse = 0.0;           // mean per-round image MSE (Q-Bot only)
  int token_count = 0, token_correct = 0;
};

// Teacher-forced pass of one scene through the Q-Bot alone. Returns the
// per-scene loss tensor (graph) plus stats.
inline std::pair<Tensor, SlLossStats> sl_qbot_pass(QBot& qbot, const World& world,
                                                   const Scene& scene, int rounds) {
  SlLossStats stats;
  Tensor y_gt = Tensor::from({static_cast<int>(scene.y_gt.size())}, scene.y_gt);
  auto enc0 = qbot.encode(scene.caption_tokens, qbot.zero_fact(), {});
  Tensor loss = mse(qbot.predict_image(enc0.s), y_gt);
  stats.mse += loss.item();
  std::vector<Tensor> history;
  Tensor key = qbot.zero_fact();
  for (int t = 0; t < rounds; ++t) {
    const auto& [q_tokens, a_tokens] = scene.oracle[static_cast<std::size_t>(t)];
    auto enc = qbot.encode(scene.caption_tokens, key, history);
    auto tf = qbot.teacher_force(enc.e, q_tokens);
    stats.mle += tf.nll_sum.item();
    stats.token_count += tf.n_tokens;
    stats.token_correct += tf.n_correct;
    Tensor fact = qbot.encode_fact(q_tokens, a_tokens);
    auto y_enc = qbot.encode(scene.caption_tokens, fact, history);
    Tensor img = mse(qbot.predict_image(y_enc.s), y_gt);
    stats.mse += img.item();
    loss = add(loss, add(tf.nll_sum, img));
    key = detach(fact);
    history.push_back(key);
  }
  stats.mle /= rounds;
  stats.mse /= (rounds + 1);
  return {scale(loss, 1.0 / static_cast<double>(rounds)), stats};
}

inline std::pair<Tensor, SlLossStats> sl_abot_pass(ABot& abot, const World& world,
                                                   const Scene& scene, int rounds) {
  SlLossStats stats;
  Tensor image = Tensor::from({static_cast<int>(scene.y_gt.size())}, scene.y_gt);
  Tensor caption_fact = abot.encode_caption_fact(scene.caption_tokens);
  Tensor loss = Tensor::scalar(0.0);
  std::vector<Tensor> history;
  for (int t = 0; t < rounds; ++t) {
    const auto& [q_tokens, a_tokens] = scene.oracle[static_cast<std::size_t>(t)];
    auto enc = abot.encode(q_tokens, caption_fact, history, image);
    auto tf = abot.teacher_force(enc.e, a_tokens);
    stats.mle += tf.nll_sum.item();
    stats.token_count += tf.n_tokens;
    stats.token_correct += tf.n_correct;
    loss = add(loss, tf.nll_sum);
    history.push_back(detach(abot.encode_fact(q_tokens, a_tokens)));
  }
  stats.mle /= rounds;
  return {scale(loss, 1.0 / static_cast<double>(rounds)), stats};
}

struct SupervisedBatchLosses {
  double qbot_mle = 0.0, qbot_mse = 0.0, abot_mle = 0.0;
};

// One supervised batch update for an isolated Q-Bot / A-Bot pair: each bot
// consumes only oracle context and takes one optimizer step.
inline SupervisedBatchLosses supervised_update(QBot& qbot, ABot& abot, const World& world,
                                               const std::vector<const Scene*>& batch, int rounds,
                                               Optimizer& q_opt, Optimizer& a_opt,
                                               double clip_norm) {
  SupervisedBatchLosses out;
  const double inv = 1.0 / static_cast<double>(batch.size());
  qbot.params.zero_grads();
  abot.params.zero_grads();
  for (const Scene* s : batch) {
    auto [q_loss, q_stats] = sl_qbot_pass(qbot, world, *s, rounds);
    backward(scale(q_loss, inv));
    auto [a_loss, a_stats] = sl_abot_pass(abot, world, *s, rounds);
    backward(scale(a_loss, inv));
    out.qbot_mle += q_stats.mle * inv;
    out.qbot_mse += q_stats.mse * inv;
    out.abot_mle += a_stats.mle * inv;
  }
  clip_global_norm(qbot.params, clip_norm);
  clip_global_norm(abot.params, clip_norm);
  q_opt.step(qbot.params);
  a_opt.step(abot.params);
  return out;
}

}  // namespace madf
