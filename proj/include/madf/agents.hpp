#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "madf/lstm.hpp"
#include "madf/optim.hpp"
#include "madf/rng.hpp"
#include "madf/tensor.hpp"
#include "madf/world.hpp"

namespace madf {

struct AgentDims {
  int vocab = 0;
  int embed = 32;
  int hidden = 64;
  int attn = 64;     // additive-attention scorer width
  int enc = 64;      // encoder embedding e_t
  int img_dim = 0;   // D (Q-Bot regression target / A-Bot image input)
  int max_len = 8;   // decoder cap, excluding <stop>
};

struct AttentionResult {
  Tensor h;                     // attention-pooled history vector
  std::vector<double> weights;  // empty when the history is empty
};

// Additive attention over per-round fact embeddings:
//   score_i = v . tanh(Wk key + Wf F_i),  H = sum softmax(score)_i F_i.
inline AttentionResult attend_history(ParamStore& params, const Tensor& key,
                                      const std::vector<Tensor>& facts, int hidden_dim) {
  if (facts.empty()) {
    return {Tensor::zeros({hidden_dim}), {}};
  }
  Tensor keyed = matmul(params.at("attn.Wk"), key);
  std::vector<Tensor> scores;
  scores.reserve(facts.size());
  for (const auto& f : facts) {
    Tensor u = tanh_t(add(keyed, matmul(params.at("attn.Wf"), f)));
    scores.push_back(dot(params.at("attn.v"), u));
  }
  Tensor w = softmax(concat(scores));
  Tensor h = smul(slice(w, 0, 1), facts[0]);
  for (std::size_t i = 1; i < facts.size(); ++i) {
    h = add(h, smul(slice(w, static_cast<int>(i), static_cast<int>(i) + 1), facts[i]));
  }
  return {std::move(h), w.values()};
}

enum class DecodeMode { Greedy, Sample };

struct DecodeResult {
  std::vector<int> tokens;        // emitted tokens, <stop> excluded
  std::vector<double> logprobs;   // per emitted step, incl. the <stop> step if taken
  Tensor logprob_sum;             // graph-connected sum of the same log-probs
};

struct TeacherForceResult {
  Tensor nll_sum;   // sum of per-token cross entropies (incl. <stop>)
  int n_tokens = 0;
  int n_correct = 0;  // argmax agreement with the forced tokens
};

// Machinery shared by both bots: embedding table, fact encoder, decoder.
class AgentBase {
 public:
  AgentDims dims;
  ParamStore params;

  AgentBase(AgentDims d, std::uint64_t seed) : dims(d), params(seed) {}

  Tensor zero_fact() const { return Tensor::zeros({dims.hidden}); }

  // Final hidden state of the fact cell over concat(q, <stop>, a).
  Tensor encode_fact(const std::vector<int>& q_tokens, const std::vector<int>& a_tokens) {
    std::vector<int> seq = q_tokens;
    seq.push_back(Vocabulary::kStop);
    seq.insert(seq.end(), a_tokens.begin(), a_tokens.end());
    return encode_tokens(fact_spec_, seq);
  }

  DecodeResult decode_utterance(const Tensor& e, DecodeMode mode, Rng* rng) {
    if (mode == DecodeMode::Sample && rng == nullptr) {
      throw std::invalid_argument("decode_utterance: sampling requires an rng");
    }
    auto [h, c] = decoder_init(e);
    DecodeResult out;
    Tensor lp_sum = Tensor::scalar(0.0);
    int prev = Vocabulary::kStart;
    for (int step = 0; step < dims.max_len + 1; ++step) {
      Tensor x = embed_row(params.at("embed"), prev);
      std::tie(h, c) = lstm_step(dec_spec_, params, x, h, c);
      Tensor logits = add(matmul(params.at("out.W"), h), params.at("out.b"));
      int tok;
      if (mode == DecodeMode::Greedy) {
        const auto& v = logits.values();
        tok = 0;
        for (std::size_t i = 1; i < v.size(); ++i) {
          if (v[i] > v[static_cast<std::size_t>(tok)]) tok = static_cast<int>(i);
        }
      } else {
        tok = sample_index(softmax(logits).values(), *rng);
      }
      Tensor nll = cross_entropy(logits, tok);
      out.logprobs.push_back(-nll.item());
      lp_sum = add(lp_sum, scale(nll, -1.0));
      if (tok == Vocabulary::kStop) break;
      out.tokens.push_back(tok);
      prev = tok;
      if (static_cast<int>(out.tokens.size()) == dims.max_len) break;
    }
    out.logprob_sum = std::move(lp_sum);
    return out;
  }

  // Teacher-forced negative log likelihood of `tokens` (plus the trailing
  // <stop> when the sequence is shorter than max_len).
  TeacherForceResult teacher_force(const Tensor& e, const std::vector<int>& tokens) {
    std::vector<int> targets = tokens;
    if (static_cast<int>(targets.size()) < dims.max_len) targets.push_back(Vocabulary::kStop);
    auto [h, c] = decoder_init(e);
    TeacherForceResult out;
    out.nll_sum = Tensor::scalar(0.0);
    int prev = Vocabulary::kStart;
    for (int t : targets) {
      Tensor x = embed_row(params.at("embed"), prev);
      std::tie(h, c) = lstm_step(dec_spec_, params, x, h, c);
      Tensor logits = add(matmul(params.at("out.W"), h), params.at("out.b"));
      out.nll_sum = add(out.nll_sum, cross_entropy(logits, t));
      const auto& v = logits.values();
      int arg = 0;
      for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[static_cast<std::size_t>(arg)]) arg = static_cast<int>(i);
      }
      out.n_tokens += 1;
      out.n_correct += (arg == t) ? 1 : 0;
      prev = t;
    }
    return out;
  }

  // Sum of teacher-forced per-token log-probabilities (always <= 0).
  Tensor sequence_logprob(const Tensor& e, const std::vector<int>& tokens) {
    return scale(teacher_force(e, tokens).nll_sum, -1.0);
  }

 protected:
  RecurrentCellSpec fact_spec_;
  RecurrentCellSpec dec_spec_;

  Tensor encode_tokens(const RecurrentCellSpec& spec, const std::vector<int>& tokens) {
    Tensor h = Tensor::zeros({spec.hidden_dim});
    Tensor c = Tensor::zeros({spec.hidden_dim});
    for (int t : tokens) {
      Tensor x = embed_row(params.at("embed"), t);
      std::tie(h, c) = lstm_step(spec, params, x, h, c);
    }
    return h;
  }

  std::pair<Tensor, Tensor> decoder_init(const Tensor& e) {
    Tensor h = add(matmul(params.at("dec_init.Wh"), e), params.at("dec_init.bh"));
    Tensor c = add(matmul(params.at("dec_init.Wc"), e), params.at("dec_init.bc"));
    return {std::move(h), std::move(c)};
  }

  static int sample_index(const std::vector<double>& probs, Rng& rng) {
    const double u = rng.uniform01();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

  void init_shared(Rng& rng) {
    params.add_matrix("embed", dims.vocab, dims.embed, rng);
    fact_spec_ = {"fact", dims.embed, dims.hidden};
    init_lstm_params(params, fact_spec_, rng);
    params.add_matrix("attn.Wk", dims.attn, dims.hidden, rng);
    params.add_matrix("attn.Wf", dims.attn, dims.hidden, rng);
    Rng vrng = rng.derive(7);
    std::vector<double> v(static_cast<std::size_t>(dims.attn));
    const double a = std::sqrt(6.0 / static_cast<double>(dims.attn + 1));
    for (auto& x : v) x = vrng.uniform(-a, a);
    params.add("attn.v", Tensor::from({dims.attn}, std::move(v)));
  }

  void init_decoder(Rng& rng) {
    params.add_matrix("dec_init.Wh", dims.hidden, dims.enc, rng);
    params.add_vector("dec_init.bh", dims.hidden);
    params.add_matrix("dec_init.Wc", dims.hidden, dims.enc, rng);
    params.add_vector("dec_init.bc", dims.hidden);
    dec_spec_ = {"dec", dims.embed, dims.hidden};
    init_lstm_params(params, dec_spec_, rng);
    params.add_matrix("out.W", dims.vocab, dims.hidden, rng);
    params.add_vector("out.b", dims.vocab);
  }
};

struct QBotEncoding {
  Tensor e;  // encoder embedding e_t^Q
  Tensor s;  // fused state S_t^Q = concat(C, F_t, H_t^Q)
  std::vector<double> attn_weights;
};

// Questioner: caption encoder, fact encoder, hierarchical history attention,
// two-layer fusion, image regression head and question decoder.
class QBot : public AgentBase {
 public:
  QBot(AgentDims d, std::uint64_t seed) : AgentBase(d, seed) {
    Rng rng = Rng(seed).derive(0x9b07);
    init_shared(rng);
    cap_spec_ = {"cap", dims.embed, dims.hidden};
    init_lstm_params(params, cap_spec_, rng);
    const int state = 3 * dims.hidden;
    params.add_matrix("fuse.W1", dims.enc, state, rng);
    params.add_vector("fuse.b1", dims.enc);
    params.add_matrix("fuse.W2", dims.enc, dims.enc, rng);
    params.add_vector("fuse.b2", dims.enc);
    params.add_matrix("img.W", dims.img_dim, state, rng);
    params.add_vector("img.b", dims.img_dim);
    init_decoder(rng);
  }

  QBotEncoding encode(const std::vector<int>& caption_tokens, const Tensor& fact,
                      const std::vector<Tensor>& facts) {
    Tensor caption = encode_tokens(cap_spec_, caption_tokens);
    AttentionResult attn = attend_history(params, fact, facts, dims.hidden);
    Tensor s = concat({caption, fact, attn.h});
    Tensor e = tanh_t(add(matmul(params.at("fuse.W1"), s), params.at("fuse.b1")));
    e = tanh_t(add(matmul(params.at("fuse.W2"), e), params.at("fuse.b2")));
    return {std::move(e), std::move(s), std::move(attn.weights)};
  }

  // Single affine map; the regression target is unbounded.
  Tensor predict_image(const Tensor& s) {
    return add(matmul(params.at("img.W"), s), params.at("img.b"));
  }

 private:
  RecurrentCellSpec cap_spec_;
};

struct ABotEncoding {
  Tensor e;  // encoder embedding e_t^A
  std::vector<double> attn_weights;
};

// Answerer: question encoder, fact encoder (also encodes the caption as the
// first history element), history attention keyed by the question, fusion with
// the image embedding, answer decoder.
class ABot : public AgentBase {
 public:
  ABot(AgentDims d, std::uint64_t seed) : AgentBase(d, seed) {
    Rng rng = Rng(seed).derive(0xab07);
    init_shared(rng);
    ques_spec_ = {"ques", dims.embed, dims.hidden};
    init_lstm_params(params, ques_spec_, rng);
    const int state = 2 * dims.hidden + dims.img_dim;
    params.add_matrix("fuse.W", dims.enc, state, rng);
    params.add_vector("fuse.b", dims.enc);
    init_decoder(rng);
  }

  // The caption enters the history as its first element, encoded by the fact cell.
  Tensor encode_caption_fact(const std::vector<int>& caption_tokens) {
    return encode_tokens(fact_spec_, caption_tokens);
  }

  ABotEncoding encode(const std::vector<int>& q_tokens, const Tensor& caption_fact,
                      const std::vector<Tensor>& facts, const Tensor& image) {
    if (image.rank() != 1 || image.dim(0) != dims.img_dim) {
      throw ShapeError("abot_encode: image " + shape_str(image.shape()) + " does not match D=" +
                       std::to_string(dims.img_dim));
    }
    Tensor q = encode_tokens(ques_spec_, q_tokens);
    std::vector<Tensor> augmented;
    augmented.reserve(facts.size() + 1);
    augmented.push_back(caption_fact);
    augmented.insert(augmented.end(), facts.begin(), facts.end());
    AttentionResult attn = attend_history(params, q, augmented, dims.hidden);
    Tensor fused = concat({attn.h, q, image});
    Tensor e = tanh_t(add(matmul(params.at("fuse.W"), fused), params.at("fuse.b")));
    return {std::move(e), std::move(attn.weights)};
  }

 private:
  RecurrentCellSpec ques_spec_;
};

inline AgentDims qbot_dims(const World& world, int max_len = 8) {
  AgentDims d;
  d.vocab = world.vocab().size();
  d.img_dim = world.embed_dim();
  d.max_len = max_len;
  return d;
}

inline AgentDims abot_dims(const World& world, int max_len = 6) {
  AgentDims d;
  d.vocab = world.vocab().size();
  d.img_dim = world.embed_dim();
  d.max_len = max_len;
  return d;
}

}  // namespace madf
