#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace madf {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat key=value configuration with a closed key set. Unknown keys are an
// error so typos fail loudly instead of silently using a default.
struct Config {
  // World and data.
  std::uint64_t seed = 1;
  std::string schema = "default";  // default | sparse | tiny
  int n_train = 720;
  int n_val = 48;
  int n_test = 64;
  int rounds = 10;

  // Optimization.
  int batch_size = 8;
  int sl_epochs = 15;
  int rl_epochs = 10;
  double lr_sl = 3e-3;
  double lr_rl = 1e-4;
  std::string optimizer = "adam";  // adam | sgd
  double clip_norm = 5.0;
  double gamma = 1.0;
  int start_k = 9;
  int anneal_epochs = 10;

  // Pools.
  int pool_q = 1;
  int pool_a = 1;

  // Architecture.
  int embed = 32;
  int hidden = 64;
  int attn = 64;
  int enc = 64;
  int qbot_max_len = 8;
  int abot_max_len = 6;

  // Behavior flags.
  double rl_img_weight = 1.0;
  bool rl_img_through_encoder = false;
  bool alg1_reward_sign = false;
  bool unsquared_distance = false;

  // Evaluation.
  int n_candidates = 16;
  int recall_k = 10;
  bool strict_recall = false;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  std::string canonical() const {
    std::string out;
    for (const auto& k : keys()) out += k + "=" + get(k) + "\n";
    return out;
  }

  std::uint64_t hash() const {
    // FNV-1a over the canonical serialization.
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : canonical()) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    return h;
  }

  void validate() const {
    if (schema != "default" && schema != "sparse" && schema != "tiny") {
      throw ConfigError("config: schema must be 'default', 'sparse' or 'tiny'");
    }
    if (optimizer != "adam" && optimizer != "sgd") throw ConfigError("config: optimizer must be 'adam' or 'sgd'");
    for (auto [v, name] : {std::pair<int, const char*>{n_train, "n_train"}, {n_val, "n_val"},
                           {n_test, "n_test"}, {rounds, "rounds"}, {batch_size, "batch_size"},
                           {pool_q, "pool_q"}, {pool_a, "pool_a"}, {embed, "embed"},
                           {hidden, "hidden"}, {attn, "attn"}, {enc, "enc"},
                           {qbot_max_len, "qbot_max_len"}, {abot_max_len, "abot_max_len"},
                           {n_candidates, "n_candidates"}, {recall_k, "recall_k"}}) {
      if (v <= 0) throw ConfigError(std::string("config: ") + name + " must be positive");
    }
    for (auto [v, name] : {std::pair<int, const char*>{sl_epochs, "sl_epochs"},
                           {rl_epochs, "rl_epochs"}, {start_k, "start_k"},
                           {anneal_epochs, "anneal_epochs"}}) {
      if (v < 0) throw ConfigError(std::string("config: ") + name + " must be nonnegative");
    }
    if (start_k > rounds) throw ConfigError("config: start_k must not exceed rounds");
  }
};

namespace detail {

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

template <typename T>
T parse_num(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out;
  is >> out;
  if (is.fail() || !is.eof()) {
    throw ConfigError("config: key '" + key + "' has unparseable value '" + v + "'");
  }
  return out;
}

}  // namespace detail

inline const std::vector<std::string>& Config::keys() {
  static const std::vector<std::string> k = {
      "seed", "schema", "n_train", "n_val", "n_test", "rounds",
      "batch_size", "sl_epochs", "rl_epochs", "lr_sl", "lr_rl", "optimizer",
      "clip_norm", "gamma", "start_k", "anneal_epochs",
      "pool_q", "pool_a",
      "embed", "hidden", "attn", "enc", "qbot_max_len", "abot_max_len",
      "rl_img_weight", "rl_img_through_encoder", "alg1_reward_sign", "unsquared_distance",
      "n_candidates", "recall_k", "strict_recall"};
  return k;
}

inline void Config::set(const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_num;
  if (key == "seed") seed = parse_num<std::uint64_t>(key, value);
  else if (key == "schema") schema = value;
  else if (key == "n_train") n_train = parse_num<int>(key, value);
  else if (key == "n_val") n_val = parse_num<int>(key, value);
  else if (key == "n_test") n_test = parse_num<int>(key, value);
  else if (key == "rounds") rounds = parse_num<int>(key, value);
  else if (key == "batch_size") batch_size = parse_num<int>(key, value);
  else if (key == "sl_epochs") sl_epochs = parse_num<int>(key, value);
  else if (key == "rl_epochs") rl_epochs = parse_num<int>(key, value);
  else if (key == "lr_sl") lr_sl = parse_num<double>(key, value);
  else if (key == "lr_rl") lr_rl = parse_num<double>(key, value);
  else if (key == "optimizer") optimizer = value;
  else if (key == "clip_norm") clip_norm = parse_num<double>(key, value);
  else if (key == "gamma") gamma = parse_num<double>(key, value);
  else if (key == "start_k") start_k = parse_num<int>(key, value);
  else if (key == "anneal_epochs") anneal_epochs = parse_num<int>(key, value);
  else if (key == "pool_q") pool_q = parse_num<int>(key, value);
  else if (key == "pool_a") pool_a = parse_num<int>(key, value);
  else if (key == "embed") embed = parse_num<int>(key, value);
  else if (key == "hidden") hidden = parse_num<int>(key, value);
  else if (key == "attn") attn = parse_num<int>(key, value);
  else if (key == "enc") enc = parse_num<int>(key, value);
  else if (key == "qbot_max_len") qbot_max_len = parse_num<int>(key, value);
  else if (key == "abot_max_len") abot_max_len = parse_num<int>(key, value);
  else if (key == "rl_img_weight") rl_img_weight = parse_num<double>(key, value);
  else if (key == "rl_img_through_encoder") rl_img_through_encoder = parse_bool(key, value);
  else if (key == "alg1_reward_sign") alg1_reward_sign = parse_bool(key, value);
  else if (key == "unsquared_distance") unsquared_distance = parse_bool(key, value);
  else if (key == "n_candidates") n_candidates = parse_num<int>(key, value);
  else if (key == "recall_k") recall_k = parse_num<int>(key, value);
  else if (key == "strict_recall") strict_recall = parse_bool(key, value);
  else throw ConfigError("config: unknown key '" + key + "'");
}

inline std::string Config::get(const std::string& key) const {
  using detail::format_double;
  if (key == "seed") return std::to_string(seed);
  if (key == "schema") return schema;
  if (key == "n_train") return std::to_string(n_train);
  if (key == "n_val") return std::to_string(n_val);
  if (key == "n_test") return std::to_string(n_test);
  if (key == "rounds") return std::to_string(rounds);
  if (key == "batch_size") return std::to_string(batch_size);
  if (key == "sl_epochs") return std::to_string(sl_epochs);
  if (key == "rl_epochs") return std::to_string(rl_epochs);
  if (key == "lr_sl") return format_double(lr_sl);
  if (key == "lr_rl") return format_double(lr_rl);
  if (key == "optimizer") return optimizer;
  if (key == "clip_norm") return format_double(clip_norm);
  if (key == "gamma") return format_double(gamma);
  if (key == "start_k") return std::to_string(start_k);
  if (key == "anneal_epochs") return std::to_string(anneal_epochs);
  if (key == "pool_q") return std::to_string(pool_q);
  if (key == "pool_a") return std::to_string(pool_a);
  if (key == "embed") return std::to_string(embed);
  if (key == "hidden") return std::to_string(hidden);
  if (key == "attn") return std::to_string(attn);
  if (key == "enc") return std::to_string(enc);
  if (key == "qbot_max_len") return std::to_string(qbot_max_len);
  if (key == "abot_max_len") return std::to_string(abot_max_len);
  if (key == "rl_img_weight") return format_double(rl_img_weight);
  if (key == "rl_img_through_encoder") return rl_img_through_encoder ? "true" : "false";
  if (key == "alg1_reward_sign") return alg1_reward_sign ? "true" : "false";
  if (key == "unsquared_distance") return unsquared_distance ? "true" : "false";
  if (key == "n_candidates") return std::to_string(n_candidates);
  if (key == "recall_k") return std::to_string(recall_k);
  if (key == "strict_recall") return strict_recall ? "true" : "false";
  throw ConfigError("config: unknown key '" + key + "'");
}

// Parses "key = value" lines; '#' starts a comment; blank lines ignored.
inline Config parse_config_text(const std::string& text) {
  Config cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value'");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

inline Config load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_config_text(buf.str());
}

}  // namespace madf
