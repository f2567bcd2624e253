#pragma once

#include <sstream>
#include <string>

#include "json.hpp"
#include "madf/evaluation.hpp"
#include "madf/serialize.hpp"

namespace madf {

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["system"] = r.system;
  j["seed"] = r.seed;
  j["rounds"] = r.rounds;
  j["k"] = r.k;
  j["mrr"] = r.mrr;
  j["mean_rank"] = r.mean_rank;
  j["recall_at_k"] = r.recall_at_k;
  j["percentile_by_round"] = r.percentile_by_round;
  j["percentile_std_by_round"] = r.percentile_std_by_round;
  j["grammar_rate_q"] = r.grammar_rate_q;
  j["grammar_rate_a"] = r.grammar_rate_a;
  j["relevance_rate_q"] = r.relevance_rate_q;
  j["consistency_rate_a"] = r.consistency_rate_a;
  j["drift_perplexity"] = r.drift_perplexity;
  j["distinct_1"] = r.distinct_1;
  j["distinct_2"] = r.distinct_2;
  j["n_scenes"] = r.n_scenes;
  j["per_scene_grammar"] = r.per_scene_grammar;
  j["per_scene_final_percentile"] = r.per_scene_final_percentile;
  return j;
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.system = j.at("system").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.rounds = j.at("rounds").get<int>();
  r.k = j.at("k").get<int>();
  r.mrr = j.at("mrr").get<double>();
  r.mean_rank = j.at("mean_rank").get<double>();
  r.recall_at_k = j.at("recall_at_k").get<double>();
  r.percentile_by_round = j.at("percentile_by_round").get<std::vector<double>>();
  r.percentile_std_by_round = j.at("percentile_std_by_round").get<std::vector<double>>();
  r.grammar_rate_q = j.at("grammar_rate_q").get<double>();
  r.grammar_rate_a = j.at("grammar_rate_a").get<double>();
  r.relevance_rate_q = j.at("relevance_rate_q").get<double>();
  r.consistency_rate_a = j.at("consistency_rate_a").get<double>();
  r.drift_perplexity = j.at("drift_perplexity").get<double>();
  r.distinct_1 = j.at("distinct_1").get<double>();
  r.distinct_2 = j.at("distinct_2").get<double>();
  r.n_scenes = j.at("n_scenes").get<int>();
  r.per_scene_grammar = j.at("per_scene_grammar").get<std::vector<double>>();
  r.per_scene_final_percentile = j.at("per_scene_final_percentile").get<std::vector<double>>();
  return r;
}

// (round, mean, std, n) rows for plotting; round 0 is the caption-only state.
inline std::string percentile_csv(const MetricsReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "round,mean,std,n\n";
  for (std::size_t t = 0; t < r.percentile_by_round.size(); ++t) {
    os << t << ',' << r.percentile_by_round[t] << ',' << r.percentile_std_by_round[t] << ','
       << r.n_scenes << '\n';
  }
  return os.str();
}

}  // namespace madf
