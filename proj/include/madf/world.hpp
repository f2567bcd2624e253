#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

#include "madf/rng.hpp"
#include "madf/tensor.hpp"

namespace madf {

// ---------------------------------------------------------------------------
// Schema and vocabulary
// ---------------------------------------------------------------------------

struct AttributeSchema {
  struct Attribute {
    std::string name;
    std::vector<std::string> values;
  };
  std::vector<Attribute> attributes;
  int reveal_count = 1;

  int embed_dim() const {
    int d = 0;
    for (const auto& a : attributes) d += static_cast<int>(a.values.size());
    return d;
  }

  std::int64_t capacity() const {
    std::int64_t c = 1;
    for (const auto& a : attributes) c *= static_cast<std::int64_t>(a.values.size());
    return c;
  }

  void validate() const {
    if (attributes.size() < 2) throw std::invalid_argument("schema: need >= 2 attributes");
    if (reveal_count < 1 || reveal_count >= static_cast<int>(attributes.size())) {
      throw std::invalid_argument("schema: reveal_count must be in [1, attribute count)");
    }
    std::unordered_set<std::string> seen;
    for (const auto& a : attributes) {
      if (a.values.size() < 2) throw std::invalid_argument("schema: attribute '" + a.name +
                                                           "' needs >= 2 values");
      for (const auto& v : a.values) {
        if (!seen.insert(v).second) {
          throw std::invalid_argument("schema: duplicate value token '" + v + "'");
        }
      }
    }
  }

  static AttributeSchema default_schema() {
    return AttributeSchema{
        {{"color", {"red", "blue", "green", "yellow", "black", "white"}},
         {"shape", {"cube", "sphere", "cone", "prism", "torus"}},
         {"count", {"one", "two", "three", "four"}},
         {"background", {"plain", "grid", "noise", "stripe"}}},
        3};
  }

  static AttributeSchema tiny_schema() {
    return AttributeSchema{{{"color", {"red", "blue"}}, {"shape", {"cube", "ball"}}}, 1};
  }

  // Same attributes as default_schema but the caption reveals only one value,
  // so most of the scene must be communicated through the dialog.
  static AttributeSchema sparse_schema() {
    AttributeSchema s = default_schema();
    s.reveal_count = 1;
    return s;
  }
};

struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kStart = 1;
  static constexpr int kStop = 2;
  static constexpr int kUnk = 3;

  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> index;

  static Vocabulary build(const AttributeSchema& schema) {
    Vocabulary v;
    v.push("<pad>");
    v.push("<start>");
    v.push("<stop>");
    v.push("<unk>");
    for (const char* w : {"a", "thing", "what", "is", "it", "?", "yes", "no"}) v.push(w);
    for (const auto& a : schema.attributes) v.push(a.name);
    for (const auto& a : schema.attributes)
      for (const auto& val : a.values) v.push(val);
    return v;
  }

  int id(const std::string& tok) const {
    auto it = index.find(tok);
    if (it == index.end()) throw std::invalid_argument("vocabulary: unknown token '" + tok + "'");
    return it->second;
  }

  const std::string& word(int id_) const {
    if (id_ < 0 || id_ >= static_cast<int>(tokens.size())) {
      throw std::invalid_argument("vocabulary: token index " + std::to_string(id_) +
                                  " out of range");
    }
    return tokens[static_cast<std::size_t>(id_)];
  }

  int size() const { return static_cast<int>(tokens.size()); }

  std::vector<int> encode(const std::vector<std::string>& words) const {
    std::vector<int> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += word(ids[i]);
    }
    return out;
  }

 private:
  void push(std::string tok) {
    index[tok] = static_cast<int>(tokens.size());
    tokens.push_back(std::move(tok));
  }
};

struct Scene {
  int scene_id = -1;
  std::vector<int> assignment;        // one value index per attribute
  std::vector<int> revealed;          // attribute indices disclosed by the caption
  std::vector<double> y_gt;           // ground-truth embedding
  std::vector<int> caption_tokens;
  std::vector<std::pair<std::vector<int>, std::vector<int>>> oracle;  // (q, a) per round
};

// Parsed utterances of the template grammar.
struct WhatQuestion { int attribute; };
struct IsItQuestion { int attribute; int value; };   // value local to attribute
struct ValueAnswer { int attribute; int value; bool it_is_form; };
struct YesNoAnswer { bool yes; };
using ParsedQuestion = std::variant<WhatQuestion, IsItQuestion>;
using ParsedAnswer = std::variant<ValueAnswer, YesNoAnswer>;

struct Dataset {
  std::vector<Scene> train, val, test;
};

// ---------------------------------------------------------------------------
// World: scenes, captions, oracle dialogs, grammar and relevance checkers
// ---------------------------------------------------------------------------

class World {
 public:
  World(AttributeSchema schema, std::uint64_t mixing_seed)
      : schema_(std::move(schema)), vocab_(Vocabulary::build(schema_)) {
    schema_.validate();
    build_value_lookup();
    mixing_ = make_orthonormal(schema_.embed_dim(), mixing_seed);
  }

  World(AttributeSchema schema, std::vector<double> mixing)
      : schema_(std::move(schema)), vocab_(Vocabulary::build(schema_)), mixing_(std::move(mixing)) {
    schema_.validate();
    build_value_lookup();
    const std::size_t d = static_cast<std::size_t>(schema_.embed_dim());
    if (mixing_.size() != d * d) throw std::invalid_argument("world: mixing matrix size mismatch");
  }

  const AttributeSchema& schema() const { return schema_; }
  const Vocabulary& vocab() const { return vocab_; }
  const std::vector<double>& mixing() const { return mixing_; }
  int embed_dim() const { return schema_.embed_dim(); }

  // One-hot blocks per attribute, mixed through the fixed orthonormal matrix.
  std::vector<double> scene_embedding(const std::vector<int>& assignment) const {
    if (assignment.size() != schema_.attributes.size()) {
      throw std::invalid_argument("scene_embedding: assignment length mismatch");
    }
    const int d = embed_dim();
    std::vector<double> onehot(static_cast<std::size_t>(d), 0.0);
    int off = 0;
    for (std::size_t a = 0; a < assignment.size(); ++a) {
      const int nvals = static_cast<int>(schema_.attributes[a].values.size());
      if (assignment[a] < 0 || assignment[a] >= nvals) {
        throw std::invalid_argument("scene_embedding: value index out of range for attribute '" +
                                    schema_.attributes[a].name + "'");
      }
      onehot[static_cast<std::size_t>(off + assignment[a])] = 1.0;
      off += nvals;
    }
    std::vector<double> out(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < d; ++i) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j) acc += mixing_[static_cast<std::size_t>(i) * d + j] * onehot[j];
      out[static_cast<std::size_t>(i)] = acc;
    }
    return out;
  }

  // "a <value>...<value> thing" over revealed attributes in schema order.
  std::vector<int> render_caption(const std::vector<int>& assignment,
                                  const std::vector<int>& revealed) const {
    std::vector<std::string> words{"a"};
    std::vector<int> sorted = revealed;
    std::sort(sorted.begin(), sorted.end());
    for (int a : sorted) {
      words.push_back(schema_.attributes[static_cast<std::size_t>(a)]
                          .values[static_cast<std::size_t>(assignment[a])]);
    }
    words.push_back("thing");
    return vocab_.encode(words);
  }

  // Deterministic truthful dialog: what-questions for unrevealed attributes in
  // schema order, then confirmation questions over every schema value (true
  // values of each attribute first, then the remaining values), never repeating.
  std::vector<std::pair<std::vector<int>, std::vector<int>>> oracle_dialog(
      const Scene& scene, int rounds) const {
    std::vector<std::pair<std::vector<int>, std::vector<int>>> out;
    std::set<int> revealed(scene.revealed.begin(), scene.revealed.end());
    for (std::size_t a = 0; a < schema_.attributes.size() && static_cast<int>(out.size()) < rounds;
         ++a) {
      if (revealed.count(static_cast<int>(a))) continue;
      const auto& attr = schema_.attributes[a];
      out.emplace_back(
          vocab_.encode({"what", attr.name, "?"}),
          vocab_.encode({attr.values[static_cast<std::size_t>(scene.assignment[a])]}));
    }
    // Confirmations sweep every (attribute, value) pair in schema order, so
    // the question sequence is predictable from the caption alone; only the
    // yes/no answers depend on the hidden assignment.
    std::vector<std::pair<std::string, bool>> confirmations;
    for (std::size_t a = 0; a < schema_.attributes.size(); ++a) {
      const auto& attr = schema_.attributes[a];
      for (std::size_t v = 0; v < attr.values.size(); ++v) {
        confirmations.emplace_back(attr.values[v], static_cast<int>(v) == scene.assignment[a]);
      }
    }
    for (std::size_t k = 0; static_cast<int>(out.size()) < rounds; ++k) {
      const auto& [value, truth] = confirmations[k % confirmations.size()];
      out.emplace_back(vocab_.encode({"is", "it", value, "?"}),
                       vocab_.encode({truth ? "yes" : "no"}));
    }
    return out;
  }

  // ---- grammar -----------------------------------------------------------

  std::optional<ParsedQuestion> parse_question(const std::vector<int>& tokens) const {
    std::vector<int> body = strip(tokens);
    if (body.size() == 3 && body[0] == vocab_.index.at("what") && body[2] == vocab_.index.at("?")) {
      auto it = attr_by_token_.find(body[1]);
      if (it != attr_by_token_.end()) return ParsedQuestion{WhatQuestion{it->second}};
    }
    if (body.size() == 4 && body[0] == vocab_.index.at("is") && body[1] == vocab_.index.at("it") &&
        body[3] == vocab_.index.at("?")) {
      auto it = value_by_token_.find(body[2]);
      if (it != value_by_token_.end()) {
        return ParsedQuestion{IsItQuestion{it->second.first, it->second.second}};
      }
    }
    return std::nullopt;
  }

  std::optional<ParsedAnswer> parse_answer(const std::vector<int>& tokens) const {
    std::vector<int> body = strip(tokens);
    if (body.size() == 1) {
      if (body[0] == vocab_.index.at("yes")) return ParsedAnswer{YesNoAnswer{true}};
      if (body[0] == vocab_.index.at("no")) return ParsedAnswer{YesNoAnswer{false}};
      auto it = value_by_token_.find(body[0]);
      if (it != value_by_token_.end()) {
        return ParsedAnswer{ValueAnswer{it->second.first, it->second.second, false}};
      }
    }
    if (body.size() == 3 && body[0] == vocab_.index.at("it") && body[1] == vocab_.index.at("is")) {
      auto it = value_by_token_.find(body[2]);
      if (it != value_by_token_.end()) {
        return ParsedAnswer{ValueAnswer{it->second.first, it->second.second, true}};
      }
    }
    return std::nullopt;
  }

  bool parse_caption(const std::vector<int>& tokens) const {
    std::vector<int> body = strip(tokens);
    if (body.size() < 3 || body.front() != vocab_.index.at("a") ||
        body.back() != vocab_.index.at("thing")) {
      return false;
    }
    int last_attr = -1;
    for (std::size_t i = 1; i + 1 < body.size(); ++i) {
      auto it = value_by_token_.find(body[i]);
      if (it == value_by_token_.end() || it->second.first <= last_attr) return false;
      last_attr = it->second.first;
    }
    return true;
  }

  // Exact membership in the template language (questions, answers or captions).
  bool is_grammatical(const std::vector<int>& tokens) const {
    for (int t : tokens) (void)vocab_.word(t);  // unknown index -> rejected
    if (strip(tokens).empty()) return false;
    return parse_question(tokens).has_value() || parse_answer(tokens).has_value() ||
           parse_caption(tokens);
  }

  // ---- relevance / consistency -------------------------------------------

  // Truth of `answer` as a reply to `question` about `scene`. Unparseable
  // input is simply inconsistent.
  bool answer_consistent(const Scene& scene, const std::vector<int>& question,
                         const std::vector<int>& answer) const {
    auto q = parse_question(question);
    auto a = parse_answer(answer);
    if (!q || !a) return false;
    if (const auto* wq = std::get_if<WhatQuestion>(&*q)) {
      const auto* va = std::get_if<ValueAnswer>(&*a);
      return va && va->attribute == wq->attribute &&
             va->value == scene.assignment[static_cast<std::size_t>(wq->attribute)];
    }
    const auto& iq = std::get<IsItQuestion>(*q);
    const auto* yn = std::get_if<YesNoAnswer>(&*a);
    if (!yn) return false;
    const bool holds = scene.assignment[static_cast<std::size_t>(iq.attribute)] == iq.value;
    return yn->yes == holds;
  }

  // A question is relevant iff it is grammatical and not redundant: a
  // what-question about an attribute whose value is already established by the
  // caption or a prior answer, or any repeat of an earlier question, is
  // irrelevant.
  bool question_relevant(const std::vector<int>& caption_tokens,
                         const std::vector<std::pair<std::vector<int>, std::vector<int>>>& history,
                         const std::vector<int>& question) const {
    auto q = parse_question(question);
    if (!q) return false;
    for (const auto& [pq, pa] : history) {
      if (strip(pq) == strip(question)) return false;
    }
    if (const auto* wq = std::get_if<WhatQuestion>(&*q)) {
      auto known = known_values(caption_tokens, history);
      return known.count(wq->attribute) == 0;
    }
    return true;
  }

  // Attribute -> value facts established by caption plus prior QA pairs.
  std::map<int, int> known_values(
      const std::vector<int>& caption_tokens,
      const std::vector<std::pair<std::vector<int>, std::vector<int>>>& history) const {
    std::map<int, int> known;
    std::vector<int> body = strip(caption_tokens);
    for (int tok : body) {
      auto it = value_by_token_.find(tok);
      if (it != value_by_token_.end()) known[it->second.first] = it->second.second;
    }
    for (const auto& [qt, at] : history) {
      auto q = parse_question(qt);
      auto a = parse_answer(at);
      if (!q || !a) continue;
      if (const auto* wq = std::get_if<WhatQuestion>(&*q)) {
        if (const auto* va = std::get_if<ValueAnswer>(&*a); va && va->attribute == wq->attribute) {
          known[wq->attribute] = va->value;
        }
      } else {
        const auto& iq = std::get<IsItQuestion>(*q);
        if (const auto* yn = std::get_if<YesNoAnswer>(&*a); yn && yn->yes) {
          known[iq.attribute] = iq.value;
        }
      }
    }
    return known;
  }

  // ---- candidate answers ---------------------------------------------------

  // Ground truth + distractors for an oracle-form question, shuffled by seed.
  std::pair<std::vector<std::vector<int>>, int> candidate_answers(const Scene& scene,
                                                                  const std::vector<int>& question,
                                                                  int n_candidates,
                                                                  std::uint64_t seed) const {
    auto q = parse_question(question);
    if (!q) throw std::invalid_argument("candidate_answers: question is not oracle-form");
    std::vector<std::vector<int>> pool;
    std::vector<int> gt;
    if (const auto* wq = std::get_if<WhatQuestion>(&*q)) {
      const auto& attr = schema_.attributes[static_cast<std::size_t>(wq->attribute)];
      gt = vocab_.encode({attr.values[static_cast<std::size_t>(scene.assignment[wq->attribute])]});
      for (std::size_t v = 0; v < attr.values.size(); ++v) {
        if (static_cast<int>(v) != scene.assignment[wq->attribute]) {
          pool.push_back(vocab_.encode({attr.values[v]}));
        }
      }
    } else {
      const auto& iq = std::get<IsItQuestion>(*q);
      const bool holds = scene.assignment[static_cast<std::size_t>(iq.attribute)] == iq.value;
      gt = vocab_.encode({holds ? "yes" : "no"});
      pool.push_back(vocab_.encode({holds ? "no" : "yes"}));
    }
    // Remaining grammatical answers as filler distractors, in a fixed order.
    std::vector<std::vector<int>> filler;
    for (const auto& a : schema_.attributes)
      for (const auto& v : a.values) filler.push_back(vocab_.encode({v}));
    for (const auto& a : schema_.attributes)
      for (const auto& v : a.values) filler.push_back(vocab_.encode({"it", "is", v}));
    for (const char* w : {"yes", "no"}) filler.push_back(vocab_.encode({w}));

    std::vector<std::vector<int>> cands{gt};
    auto try_add = [&](const std::vector<int>& c) {
      if (static_cast<int>(cands.size()) >= n_candidates) return;
      if (std::find(cands.begin(), cands.end(), c) == cands.end()) cands.push_back(c);
    };
    for (const auto& c : pool) try_add(c);
    for (const auto& c : filler) try_add(c);
    if (static_cast<int>(cands.size()) < n_candidates) {
      throw std::invalid_argument("candidate_answers: requested " + std::to_string(n_candidates) +
                                  " but only " + std::to_string(cands.size()) +
                                  " distinct grammatical answers exist");
    }
    // Seeded Fisher-Yates shuffle; then locate the ground truth.
    Rng rng(seed);
    for (std::size_t i = cands.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng.below(i));
      std::swap(cands[i - 1], cands[j]);
    }
    const int gt_index = static_cast<int>(
        std::find(cands.begin(), cands.end(), gt) - cands.begin());
    return {std::move(cands), gt_index};
  }

  // ---- dataset generation --------------------------------------------------

  Scene make_scene(int scene_id, const std::vector<int>& assignment,
                   const std::vector<int>& revealed, int rounds) const {
    Scene s;
    s.scene_id = scene_id;
    s.assignment = assignment;
    s.revealed = revealed;
    s.y_gt = scene_embedding(assignment);
    s.caption_tokens = render_caption(assignment, revealed);
    s.oracle = oracle_dialog(s, rounds);
    return s;
  }

  Dataset generate_dataset(std::uint64_t seed, int n_train, int n_val, int n_test,
                           int rounds) const {
    if (n_train < 1 || n_val < 1 || n_test < 1) {
      throw std::invalid_argument("generate_dataset: split sizes must be >= 1");
    }
    if (n_test > schema_.capacity()) {
      throw std::invalid_argument("generate_dataset: " + std::to_string(n_test) +
                                  " distinct test scenes exceed schema capacity " +
                                  std::to_string(schema_.capacity()));
    }
    Dataset ds;
    Rng rng = Rng(seed).derive(0xda7a);
    int next_id = 0;
    auto draw_assignment = [&](Rng& r) {
      std::vector<int> a(schema_.attributes.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = static_cast<int>(r.below(schema_.attributes[i].values.size()));
      }
      return a;
    };
    auto draw_revealed = [&](Rng& r) {
      std::vector<int> attrs(schema_.attributes.size());
      for (std::size_t i = 0; i < attrs.size(); ++i) attrs[i] = static_cast<int>(i);
      for (std::size_t i = attrs.size(); i > 1; --i) {
        std::swap(attrs[i - 1], attrs[static_cast<std::size_t>(r.below(i))]);
      }
      attrs.resize(static_cast<std::size_t>(schema_.reveal_count));
      std::sort(attrs.begin(), attrs.end());
      return attrs;
    };
    Rng train_rng = rng.derive(1);
    for (int i = 0; i < n_train; ++i) {
      ds.train.push_back(
          make_scene(next_id++, draw_assignment(train_rng), draw_revealed(train_rng), rounds));
    }
    Rng val_rng = rng.derive(2);
    for (int i = 0; i < n_val; ++i) {
      ds.val.push_back(
          make_scene(next_id++, draw_assignment(val_rng), draw_revealed(val_rng), rounds));
    }
    Rng test_rng = rng.derive(3);
    std::set<std::vector<int>> used;
    while (static_cast<int>(ds.test.size()) < n_test) {
      auto a = draw_assignment(test_rng);
      if (!used.insert(a).second) continue;
      ds.test.push_back(make_scene(next_id++, a, draw_revealed(test_rng), rounds));
    }
    return ds;
  }

  static std::vector<double> make_orthonormal(int d, std::uint64_t seed) {
    Rng rng = Rng(seed).derive(0x0b417);
    std::vector<double> m(static_cast<std::size_t>(d) * d);
    for (auto& x : m) x = rng.normal();
    // Gram-Schmidt over rows.
    for (int i = 0; i < d; ++i) {
      double* ri = m.data() + static_cast<std::size_t>(i) * d;
      for (int j = 0; j < i; ++j) {
        const double* rj = m.data() + static_cast<std::size_t>(j) * d;
        double proj = 0.0;
        for (int k = 0; k < d; ++k) proj += ri[k] * rj[k];
        for (int k = 0; k < d; ++k) ri[k] -= proj * rj[k];
      }
      double norm = 0.0;
      for (int k = 0; k < d; ++k) norm += ri[k] * ri[k];
      norm = std::sqrt(norm);
      for (int k = 0; k < d; ++k) ri[k] /= norm;
    }
    return m;
  }

 private:
  std::vector<int> strip(const std::vector<int>& tokens) const {
    std::vector<int> out;
    for (int t : tokens) {
      if (t == Vocabulary::kStart || t == Vocabulary::kStop || t == Vocabulary::kPad) continue;
      out.push_back(t);
    }
    return out;
  }

  void build_value_lookup() {
    for (std::size_t a = 0; a < schema_.attributes.size(); ++a) {
      attr_by_token_[vocab_.id(schema_.attributes[a].name)] = static_cast<int>(a);
      for (std::size_t v = 0; v < schema_.attributes[a].values.size(); ++v) {
        value_by_token_[vocab_.id(schema_.attributes[a].values[v])] = {static_cast<int>(a),
                                                                       static_cast<int>(v)};
      }
    }
  }

  AttributeSchema schema_;
  Vocabulary vocab_;
  std::vector<double> mixing_;  // row-major D x D orthonormal
  std::unordered_map<int, int> attr_by_token_;
  std::unordered_map<int, std::pair<int, int>> value_by_token_;  // token -> (attr, value)
};

}  // namespace madf
