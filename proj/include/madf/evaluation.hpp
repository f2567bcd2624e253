#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "madf/agents.hpp"
#include "madf/training.hpp"
#include "madf/world.hpp"

namespace madf {

// ---------------------------------------------------------------------------
// Ranking primitives
// ---------------------------------------------------------------------------

// Pessimistic 1-based rank of entry gt among scores (higher is better): ties
// count against the ground truth.
inline int rank_from_scores(const std::vector<double>& scores, int gt) {
  if (gt < 0 || gt >= static_cast<int>(scores.size())) {
    throw std::invalid_argument("rank_from_scores: gt index out of range");
  }
  int rank = 1;
  for (int i = 0; i < static_cast<int>(scores.size()); ++i) {
    if (i != gt && scores[static_cast<std::size_t>(i)] >= scores[static_cast<std::size_t>(gt)]) {
      ++rank;
    }
  }
  return rank;
}

using DialogContext = std::vector<std::pair<std::vector<int>, std::vector<int>>>;

// Scores each candidate answer by its sequence log-likelihood under the A-Bot
// conditioned on the given dialog context, and ranks the ground truth.
inline int rank_candidates(ABot& abot, const World& world, const Scene& scene,
                           const DialogContext& context, const std::vector<int>& question,
                           const std::vector<std::vector<int>>& candidates, int gt_index) {
  if (candidates.empty()) throw std::invalid_argument("rank_candidates: no candidates");
  Tensor image = Tensor::from({static_cast<int>(scene.y_gt.size())}, scene.y_gt);
  Tensor cap_fact = abot.encode_caption_fact(scene.caption_tokens);
  std::vector<Tensor> history;
  for (const auto& [q, a] : context) history.push_back(abot.encode_fact(q, a));
  auto enc = abot.encode(question, cap_fact, history, image);
  std::vector<double> scores;
  scores.reserve(candidates.size());
  for (const auto& cand : candidates) {
    scores.push_back(abot.sequence_logprob(enc.e, cand).item());
  }
  return rank_from_scores(scores, gt_index);
}

struct RankList {
  std::vector<std::vector<int>> by_round;

  std::vector<int> flat() const {
    std::vector<int> out;
    for (const auto& r : by_round) out.insert(out.end(), r.begin(), r.end());
    return out;
  }
};

struct RetrievalMetrics {
  double mrr = 0.0;
  double mean_rank = 0.0;
  double recall_at_k = 0.0;  // percent
};

inline RetrievalMetrics answer_retrieval_metrics(const std::vector<int>& ranks, int k,
                                                 bool strict = false) {
  if (ranks.empty()) throw std::invalid_argument("answer_retrieval_metrics: empty rank list");
  RetrievalMetrics m;
  int hits = 0;
  for (int r : ranks) {
    if (r < 1) throw std::invalid_argument("answer_retrieval_metrics: rank < 1");
    m.mrr += 1.0 / r;
    m.mean_rank += r;
    if (strict ? (r < k) : (r <= k)) ++hits;
  }
  const double n = static_cast<double>(ranks.size());
  m.mrr /= n;
  m.mean_rank /= n;
  m.recall_at_k = 100.0 * hits / n;
  return m;
}

// Percentile of the ground-truth gallery entry under distance to y_pred:
// 100 for rank 1, 0 for rank N. Ties count against the ground truth.
inline double image_retrieval_percentile(const std::vector<double>& y_pred,
                                         const std::vector<std::vector<double>>& gallery,
                                         int gt_index) {
  const int n = static_cast<int>(gallery.size());
  if (n < 2) throw std::invalid_argument("image_retrieval_percentile: gallery size must be >= 2");
  if (gt_index < 0 || gt_index >= n) {
    throw std::invalid_argument("image_retrieval_percentile: gt index out of range");
  }
  const double gt_dist = squared_distance(y_pred, gallery[static_cast<std::size_t>(gt_index)]);
  int rank = 1;
  for (int i = 0; i < n; ++i) {
    if (i == gt_index) continue;
    if (squared_distance(y_pred, gallery[static_cast<std::size_t>(i)]) <= gt_dist) ++rank;
  }
  return 100.0 * static_cast<double>(n - rank) / static_cast<double>(n - 1);
}

// ---------------------------------------------------------------------------
// Episode-level evaluation drivers (frozen parameters, greedy decoding)
// ---------------------------------------------------------------------------

// Answer retrieval over teacher-forced oracle context: for every scene and
// round, the oracle question is ranked against world.candidate_answers.
inline RankList evaluate_answer_retrieval(ABot& abot, const World& world,
                                          const std::vector<Scene>& scenes, int rounds,
                                          int n_candidates, std::uint64_t seed,
                                          bool self_generated_context = false, QBot* qbot = nullptr) {
  RankList out;
  out.by_round.assign(static_cast<std::size_t>(rounds), {});
  for (const auto& scene : scenes) {
    DialogContext context;
    EpisodeTrace trace;
    if (self_generated_context) {
      if (qbot == nullptr) {
        throw std::invalid_argument("evaluate_answer_retrieval: self-generated context needs a Q-Bot");
      }
      EpisodeOptions opt;
      opt.rounds = rounds;
      opt.K = 0;
      opt.train_mode = false;
      trace = run_dialog_episode(*qbot, abot, world, scene, opt, Rng(seed).derive(0x5e1f));
    }
    for (int t = 0; t < rounds; ++t) {
      const auto& question = self_generated_context
                                 ? trace.rounds[static_cast<std::size_t>(t)].q_tokens
                                 : scene.oracle[static_cast<std::size_t>(t)].first;
      const auto& answer = self_generated_context
                               ? trace.rounds[static_cast<std::size_t>(t)].a_tokens
                               : scene.oracle[static_cast<std::size_t>(t)].second;
      if (auto parsed = world.parse_question(question); parsed.has_value()) {
        const std::uint64_t salt =
            Rng(seed).derive(static_cast<std::uint64_t>(scene.scene_id), static_cast<std::uint64_t>(t))
                .next_u64();
        auto [cands, gt] = world.candidate_answers(scene, question, n_candidates, salt);
        out.by_round[static_cast<std::size_t>(t)].push_back(
            rank_candidates(abot, world, scene, context, question, cands, gt));
      }
      context.emplace_back(question, answer);
    }
  }
  return out;
}

struct PercentileCurve {
  std::vector<double> mean;    // length rounds + 1; index 0 is the caption-only round
  std::vector<double> stddev;  // same length
  int n_scenes = 0;
  std::vector<std::vector<double>> per_scene;  // [scene][round 0..rounds]
  std::vector<EpisodeTrace> traces;            // the greedy episodes, for reuse
};

inline PercentileCurve percentile_curve(QBot& qbot, ABot& abot, const World& world,
                                        const std::vector<Scene>& scenes, int rounds) {
  if (scenes.size() < 2) throw std::invalid_argument("percentile_curve: need >= 2 scenes");
  std::vector<std::vector<double>> gallery;
  gallery.reserve(scenes.size());
  for (const auto& s : scenes) gallery.push_back(s.y_gt);

  PercentileCurve out;
  out.n_scenes = static_cast<int>(scenes.size());
  EpisodeOptions opt;
  opt.rounds = rounds;
  opt.K = 0;
  opt.train_mode = false;
  for (int i = 0; i < static_cast<int>(scenes.size()); ++i) {
    auto trace = run_dialog_episode(qbot, abot, world, scenes[static_cast<std::size_t>(i)], opt,
                                    Rng(0));
    std::vector<double> row;
    row.push_back(image_retrieval_percentile(trace.y0, gallery, i));
    for (const auto& r : trace.rounds) {
      row.push_back(image_retrieval_percentile(r.y, gallery, i));
    }
    out.per_scene.push_back(std::move(row));
    out.traces.push_back(std::move(trace));
  }
  const std::size_t cols = static_cast<std::size_t>(rounds) + 1;
  out.mean.assign(cols, 0.0);
  out.stddev.assign(cols, 0.0);
  for (std::size_t t = 0; t < cols; ++t) {
    double s = 0.0;
    for (const auto& row : out.per_scene) s += row[t];
    const double mu = s / out.per_scene.size();
    double sq = 0.0;
    for (const auto& row : out.per_scene) sq += (row[t] - mu) * (row[t] - mu);
    out.mean[t] = mu;
    out.stddev[t] = std::sqrt(sq / out.per_scene.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Language quality
// ---------------------------------------------------------------------------

struct LanguageQualityReport {
  double grammar_rate_q = 0.0, grammar_rate_a = 0.0;  // percents
  double relevance_rate_q = 0.0, consistency_rate_a = 0.0;
  double drift_perplexity = 0.0;
  double distinct_1 = 0.0, distinct_2 = 0.0;
  int n_questions = 0, n_answers = 0;
  std::vector<double> per_scene_grammar;  // percent per scene, questions + answers pooled

  double grammar_rate_all() const {
    const int n = n_questions + n_answers;
    return n == 0 ? 0.0
                  : (grammar_rate_q * n_questions + grammar_rate_a * n_answers) / n;
  }
};

// Grammar / relevance / consistency via the world's grammar; drift perplexity
// scores the generated utterances under frozen reference decoders (the SL
// pretrained bots), replaying the transcript through the references' own
// encoders. Pass nullptrs to skip the drift term.
inline LanguageQualityReport language_quality_report(const std::vector<EpisodeTrace>& traces,
                                                     const World& world,
                                                     const std::vector<Scene>& scenes,
                                                     QBot* ref_qbot = nullptr,
                                                     ABot* ref_abot = nullptr) {
  std::map<int, const Scene*> by_id;
  for (const auto& s : scenes) by_id[s.scene_id] = &s;

  LanguageQualityReport rep;
  int gram_q = 0, gram_a = 0, rel_q = 0, cons_a = 0;
  double nll = 0.0;
  int nll_tokens = 0;
  std::set<int> unigrams;
  std::set<std::pair<int, int>> bigrams;
  int total_unigrams = 0, total_bigrams = 0;

  for (const auto& trace : traces) {
    auto it = by_id.find(trace.scene_id);
    if (it == by_id.end()) {
      throw std::invalid_argument("language_quality_report: trace references unknown scene");
    }
    const Scene& scene = *it->second;
    DialogContext history;
    int scene_gram = 0, scene_utts = 0;

    Tensor ref_cap_fact, image;
    std::vector<Tensor> ref_q_hist, ref_a_hist;
    Tensor ref_q_key;
    if (ref_qbot && ref_abot) {
      ref_cap_fact = ref_abot->encode_caption_fact(scene.caption_tokens);
      image = Tensor::from({static_cast<int>(scene.y_gt.size())}, scene.y_gt);
      ref_q_key = ref_qbot->zero_fact();
    }

    for (const auto& round : trace.rounds) {
      const auto& q = round.q_tokens;
      const auto& a = round.a_tokens;
      ++rep.n_questions;
      ++rep.n_answers;
      scene_utts += 2;
      if (world.is_grammatical(q)) {
        ++gram_q;
        ++scene_gram;
      }
      if (world.is_grammatical(a)) {
        ++gram_a;
        ++scene_gram;
      }
      if (world.question_relevant(scene.caption_tokens, history, q)) ++rel_q;
      if (world.answer_consistent(scene, q, a)) ++cons_a;
      history.emplace_back(q, a);

      for (const auto* utt : {&q, &a}) {
        for (std::size_t i = 0; i < utt->size(); ++i) {
          unigrams.insert((*utt)[i]);
          ++total_unigrams;
          if (i + 1 < utt->size()) {
            bigrams.emplace((*utt)[i], (*utt)[i + 1]);
            ++total_bigrams;
          }
        }
      }

      if (ref_qbot && ref_abot) {
        auto q_enc = ref_qbot->encode(scene.caption_tokens, ref_q_key, ref_q_hist);
        auto q_tf = ref_qbot->teacher_force(q_enc.e, q);
        nll += q_tf.nll_sum.item();
        nll_tokens += q_tf.n_tokens;
        auto a_enc = ref_abot->encode(q, ref_cap_fact, ref_a_hist, image);
        auto a_tf = ref_abot->teacher_force(a_enc.e, a);
        nll += a_tf.nll_sum.item();
        nll_tokens += a_tf.n_tokens;
        ref_q_key = ref_qbot->encode_fact(q, a);
        ref_q_hist.push_back(ref_q_key);
        ref_a_hist.push_back(ref_abot->encode_fact(q, a));
      }
    }
    rep.per_scene_grammar.push_back(scene_utts == 0 ? 0.0 : 100.0 * scene_gram / scene_utts);
  }

  if (rep.n_questions > 0) {
    rep.grammar_rate_q = 100.0 * gram_q / rep.n_questions;
    rep.relevance_rate_q = 100.0 * rel_q / rep.n_questions;
  }
  if (rep.n_answers > 0) {
    rep.grammar_rate_a = 100.0 * gram_a / rep.n_answers;
    rep.consistency_rate_a = 100.0 * cons_a / rep.n_answers;
  }
  if (nll_tokens > 0) rep.drift_perplexity = std::exp(nll / nll_tokens);
  if (total_unigrams > 0) rep.distinct_1 = static_cast<double>(unigrams.size()) / total_unigrams;
  if (total_bigrams > 0) rep.distinct_2 = static_cast<double>(bigrams.size()) / total_bigrams;
  return rep;
}

// ---------------------------------------------------------------------------
// Mann-Whitney U
// ---------------------------------------------------------------------------

struct MannWhitneyResult {
  double u = 0.0;       // min(U_x, U_y)
  double p = 1.0;       // two-sided
  bool exact = false;
};

namespace detail {

inline double u_statistic_x(const std::vector<double>& xs, const std::vector<double>& ys) {
  double u = 0.0;
  for (double x : xs) {
    for (double y : ys) {
      if (x > y) u += 1.0;
      else if (x == y) u += 0.5;
    }
  }
  return u;
}

inline double binomial(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace detail

// U = min(U_x, U_y) with half-counted ties; exact permutation p when the pooled
// enumeration is small enough, otherwise normal approximation with tie
// correction and continuity correction.
inline MannWhitneyResult mann_whitney_u(const std::vector<double>& xs,
                                        const std::vector<double>& ys) {
  if (xs.empty() || ys.empty()) throw std::invalid_argument("mann_whitney_u: empty sample");
  const int nx = static_cast<int>(xs.size());
  const int ny = static_cast<int>(ys.size());
  const double ux = detail::u_statistic_x(xs, ys);
  const double uy = static_cast<double>(nx) * ny - ux;
  MannWhitneyResult res;
  res.u = std::min(ux, uy);

  std::vector<double> pooled(xs);
  pooled.insert(pooled.end(), ys.begin(), ys.end());
  const int n = nx + ny;

  if (detail::binomial(n, nx) <= 2e5) {
    // Enumerate every split of the pooled values into an x-group of size nx.
    res.exact = true;
    long long total = 0, extreme = 0;
    std::vector<int> idx(static_cast<std::size_t>(nx));
    for (int i = 0; i < nx; ++i) idx[static_cast<std::size_t>(i)] = i;
    const double tol = 1e-12;
    while (true) {
      std::vector<bool> in_x(static_cast<std::size_t>(n), false);
      std::vector<double> gx, gy;
      for (int i : idx) in_x[static_cast<std::size_t>(i)] = true;
      for (int i = 0; i < n; ++i) {
        (in_x[static_cast<std::size_t>(i)] ? gx : gy).push_back(pooled[static_cast<std::size_t>(i)]);
      }
      const double u1 = detail::u_statistic_x(gx, gy);
      const double u = std::min(u1, static_cast<double>(nx) * ny - u1);
      ++total;
      if (u <= res.u + tol) ++extreme;
      // next combination
      int i = nx - 1;
      while (i >= 0 && idx[static_cast<std::size_t>(i)] == n - nx + i) --i;
      if (i < 0) break;
      ++idx[static_cast<std::size_t>(i)];
      for (int j = i + 1; j < nx; ++j) {
        idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
      }
    }
    res.p = static_cast<double>(extreme) / static_cast<double>(total);
  } else {
    std::sort(pooled.begin(), pooled.end());
    double tie_sum = 0.0;
    for (std::size_t i = 0; i < pooled.size();) {
      std::size_t j = i;
      while (j < pooled.size() && pooled[j] == pooled[i]) ++j;
      const double t = static_cast<double>(j - i);
      tie_sum += t * t * t - t;
      i = j;
    }
    const double mu = static_cast<double>(nx) * ny / 2.0;
    const double var = (static_cast<double>(nx) * ny / 12.0) *
                       ((n + 1) - tie_sum / (static_cast<double>(n) * (n - 1)));
    if (var <= 0.0) {
      res.p = 1.0;  // all values tied
    } else {
      const double z = std::max(0.0, std::abs(res.u - mu) - 0.5) / std::sqrt(var);
      res.p = std::min(1.0, 2.0 * detail::normal_sf(z));
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Aggregate report
// ---------------------------------------------------------------------------

struct MetricsReport {
  std::string system;
  std::uint64_t seed = 0;
  int rounds = 0;
  int k = 10;
  double mrr = 0.0, mean_rank = 0.0, recall_at_k = 0.0;
  std::vector<double> percentile_by_round;  // rounds + 1 entries, round 0 first
  std::vector<double> percentile_std_by_round;
  double grammar_rate_q = 0.0, grammar_rate_a = 0.0;
  double relevance_rate_q = 0.0, consistency_rate_a = 0.0;
  double drift_perplexity = 0.0;
  double distinct_1 = 0.0, distinct_2 = 0.0;
  int n_scenes = 0;
  std::vector<double> per_scene_grammar;
  std::vector<double> per_scene_final_percentile;
};

// Runs the full evaluation battery on frozen bots over a test gallery.
inline MetricsReport evaluate_system(QBot& qbot, ABot& abot, const World& world,
                                     const std::vector<Scene>& scenes, int rounds,
                                     int n_candidates, int k, std::uint64_t seed,
                                     QBot* ref_qbot = nullptr, ABot* ref_abot = nullptr) {
  MetricsReport rep;
  rep.seed = seed;
  rep.rounds = rounds;
  rep.k = k;
  rep.n_scenes = static_cast<int>(scenes.size());

  auto ranks = evaluate_answer_retrieval(abot, world, scenes, rounds, n_candidates, seed);
  auto rm = answer_retrieval_metrics(ranks.flat(), k);
  rep.mrr = rm.mrr;
  rep.mean_rank = rm.mean_rank;
  rep.recall_at_k = rm.recall_at_k;

  auto curve = percentile_curve(qbot, abot, world, scenes, rounds);
  rep.percentile_by_round = curve.mean;
  rep.percentile_std_by_round = curve.stddev;
  for (const auto& row : curve.per_scene) rep.per_scene_final_percentile.push_back(row.back());

  auto lang = language_quality_report(curve.traces, world, scenes, ref_qbot, ref_abot);
  rep.grammar_rate_q = lang.grammar_rate_q;
  rep.grammar_rate_a = lang.grammar_rate_a;
  rep.relevance_rate_q = lang.relevance_rate_q;
  rep.consistency_rate_a = lang.consistency_rate_a;
  rep.drift_perplexity = lang.drift_perplexity;
  rep.distinct_1 = lang.distinct_1;
  rep.distinct_2 = lang.distinct_2;
  rep.per_scene_grammar = lang.per_scene_grammar;
  return rep;
}

}  // namespace madf
