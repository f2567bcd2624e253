#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "madf/agents.hpp"
#include "madf/world.hpp"

using namespace madf;

namespace {

AgentDims tiny_dims(const World& w) {
  AgentDims d;
  d.vocab = w.vocab().size();
  d.embed = 3;
  d.hidden = 4;
  d.attn = 4;
  d.enc = 4;
  d.img_dim = w.embed_dim();
  d.max_len = 4;
  return d;
}

Tensor random_vec(int n, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(-1, 1);
  return Tensor::from({n}, std::move(v));
}

}  // namespace

TEST_CASE("fact encoding") {
  World w(AttributeSchema::tiny_schema(), 3);
  QBot bot(tiny_dims(w), 5);
  auto q = w.vocab().encode({"what", "color", "?"});
  auto a = w.vocab().encode({"red"});

  SUBCASE("round zero uses an all-zero fact") {
    Tensor f0 = bot.zero_fact();
    for (double x : f0.values()) CHECK(x == 0.0);
  }
  SUBCASE("identical pairs encode identically") {
    CHECK(bot.encode_fact(q, a).values() == bot.encode_fact(q, a).values());
  }
  SUBCASE("token order matters") {
    auto q2 = q;
    std::swap(q2[0], q2[1]);
    CHECK(bot.encode_fact(q, a).values() != bot.encode_fact(q2, a).values());
  }
}

TEST_CASE("history attention") {
  World w(AttributeSchema::tiny_schema(), 3);
  QBot bot(tiny_dims(w), 11);
  Rng rng(2);

  SUBCASE("single fact gets weight one") {
    Tensor f = random_vec(4, rng);
    auto res = attend_history(bot.params, random_vec(4, rng), {f}, 4);
    REQUIRE(res.weights.size() == 1);
    CHECK(res.weights[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(res.h.values() == f.values());
  }

  SUBCASE("identical facts get uniform weights") {
    Tensor f = random_vec(4, rng);
    auto res = attend_history(bot.params, random_vec(4, rng), {f, f, f}, 4);
    for (double wi : res.weights) CHECK(wi == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }

  SUBCASE("empty history yields a zero vector") {
    auto res = attend_history(bot.params, random_vec(4, rng), {}, 4);
    CHECK(res.weights.empty());
    for (double x : res.h.values()) CHECK(x == 0.0);
  }

  SUBCASE("weights form a distribution and H is the stated convex combination") {
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<Tensor> facts;
      const int n = 2 + static_cast<int>(rng.below(4));
      for (int i = 0; i < n; ++i) facts.push_back(random_vec(4, rng));
      auto res = attend_history(bot.params, random_vec(4, rng), facts, 4);
      double sum = 0.0;
      for (double wi : res.weights) {
        CHECK(wi >= 0.0);
        sum += wi;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
      for (int k = 0; k < 4; ++k) {
        double expect = 0.0;
        for (int i = 0; i < n; ++i) expect += res.weights[i] * facts[i].values()[k];
        CHECK(res.h.values()[k] == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("qbot encoder") {
  World w(AttributeSchema::tiny_schema(), 3);
  QBot bot(tiny_dims(w), 21);
  Scene s = w.make_scene(0, {0, 1}, {0}, 4);

  SUBCASE("with zero fact and empty history, S carries only the caption") {
    auto enc = bot.encode(s.caption_tokens, bot.zero_fact(), {});
    const auto& sv = enc.s.values();
    REQUIRE(sv.size() == 12);  // 3 * hidden
    for (std::size_t i = 4; i < 12; ++i) CHECK(sv[i] == 0.0);
  }

  SUBCASE("deterministic repeat") {
    auto a = bot.encode(s.caption_tokens, bot.zero_fact(), {});
    auto b = bot.encode(s.caption_tokens, bot.zero_fact(), {});
    CHECK(a.e.values() == b.e.values());
  }

  SUBCASE("gradients flow from e back to the word embeddings") {
    auto f = [&]() {
      auto fact = bot.encode_fact(w.vocab().encode({"what", "shape", "?"}),
                                  w.vocab().encode({"cube"}));
      auto enc = bot.encode(s.caption_tokens, fact, {bot.zero_fact()});
      return reduce_sum(enc.e);
    };
    CHECK(finite_difference_check(f, bot.params) < 1e-4);
    f();
    bot.params.zero_grads();
    backward(f());
    double embed_grad_norm = 0.0;
    for (double g : bot.params.at("embed").grad()) embed_grad_norm += g * g;
    CHECK(embed_grad_norm > 0.0);
  }
}

TEST_CASE("qbot image head") {
  World w(AttributeSchema::tiny_schema(), 3);
  QBot bot(tiny_dims(w), 31);
  Scene s = w.make_scene(0, {1, 1}, {1}, 4);
  auto enc = bot.encode(s.caption_tokens, bot.zero_fact(), {});

  SUBCASE("prediction has the gallery dimension") {
    Tensor y = bot.predict_image(enc.s);
    CHECK(y.shape() == Shape{w.embed_dim()});
  }

  SUBCASE("zero weights reduce to the bias") {
    auto& wm = bot.params.at("img.W").mutable_values();
    std::fill(wm.begin(), wm.end(), 0.0);
    auto& b = bot.params.at("img.b").mutable_values();
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.5 * static_cast<double>(i);
    Tensor y = bot.predict_image(enc.s);
    CHECK(y.values() == b);
  }
}

TEST_CASE("abot encoder") {
  World w(AttributeSchema::tiny_schema(), 3);
  ABot bot(tiny_dims(w), 41);
  Scene s1 = w.make_scene(0, {0, 0}, {0}, 4);
  Scene s2 = w.make_scene(1, {0, 1}, {0}, 4);
  auto q = w.vocab().encode({"what", "shape", "?"});

  SUBCASE("image conditioning changes the encoding") {
    Tensor cap = bot.encode_caption_fact(s1.caption_tokens);
    auto e1 = bot.encode(q, cap, {}, Tensor::from({4}, s1.y_gt));
    auto e2 = bot.encode(q, cap, {}, Tensor::from({4}, s2.y_gt));
    CHECK(e1.e.values() != e2.e.values());
  }

  SUBCASE("round one attends entirely to the caption") {
    Tensor cap = bot.encode_caption_fact(s1.caption_tokens);
    auto e = bot.encode(q, cap, {}, Tensor::from({4}, s1.y_gt));
    REQUIRE(e.attn_weights.size() == 1);
    CHECK(e.attn_weights[0] == doctest::Approx(1.0).epsilon(1e-15));
  }

  SUBCASE("gradcheck through the image input") {
    ParamStore img_store;
    img_store.add("I", Tensor::from({4}, s1.y_gt));
    auto f = [&]() {
      Tensor cap = bot.encode_caption_fact(s1.caption_tokens);
      auto e = bot.encode(q, cap, {cap}, img_store.at("I"));
      return reduce_sum(e.e);
    };
    CHECK(finite_difference_check(f, img_store) < 1e-4);
  }
}

TEST_CASE("utterance decoding") {
  World w(AttributeSchema::tiny_schema(), 3);
  AgentDims d = tiny_dims(w);
  QBot bot(d, 51);
  Scene s = w.make_scene(0, {0, 1}, {0}, 4);
  auto enc = bot.encode(s.caption_tokens, bot.zero_fact(), {});

  SUBCASE("max_len caps the emission") {
    AgentDims d1 = d;
    d1.max_len = 1;
    QBot b1(d1, 51);
    // Suppress <stop> so the cap is what terminates the emission.
    b1.params.at("out.b").mutable_values()[Vocabulary::kStop] = -100.0;
    auto e1 = b1.encode(s.caption_tokens, b1.zero_fact(), {});
    auto res = b1.decode_utterance(e1.e, DecodeMode::Greedy, nullptr);
    CHECK(res.tokens.size() == 1);
  }

  SUBCASE("greedy is deterministic; sampling reproducible under a fixed rng") {
    auto a = bot.decode_utterance(enc.e, DecodeMode::Greedy, nullptr);
    auto b = bot.decode_utterance(enc.e, DecodeMode::Greedy, nullptr);
    CHECK(a.tokens == b.tokens);
    Rng r1(77), r2(77);
    auto sa = bot.decode_utterance(enc.e, DecodeMode::Sample, &r1);
    auto sb = bot.decode_utterance(enc.e, DecodeMode::Sample, &r2);
    CHECK(sa.tokens == sb.tokens);
    CHECK(sa.logprobs == sb.logprobs);
    CHECK_THROWS(bot.decode_utterance(enc.e, DecodeMode::Sample, nullptr));
  }

  SUBCASE("first-step sample frequencies match the decoder softmax within 3 sigma") {
    AgentDims d1 = d;
    d1.max_len = 1;
    QBot b1(d1, 53);
    auto e1 = b1.encode(s.caption_tokens, b1.zero_fact(), {});
    // Frozen first-step distribution.
    auto probe = b1.decode_utterance(e1.e, DecodeMode::Greedy, nullptr);
    (void)probe;
    // Recover the softmax by sampling; compare against observed frequencies.
    Rng rng(123);
    std::vector<int> counts(static_cast<std::size_t>(d1.vocab), 0);
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
      auto res = b1.decode_utterance(e1.e, DecodeMode::Sample, &rng);
      const int first = res.tokens.empty() ? Vocabulary::kStop : res.tokens[0];
      counts[static_cast<std::size_t>(first)]++;
    }
    // Independent softmax oracle from the first-step log-probs: exp(logprob).
    for (int t = 0; t < d1.vocab; ++t) {
      auto tf = b1.teacher_force(e1.e, {t});
      const double p = std::exp(-tf.nll_sum.item());
      const double sigma = std::sqrt(n * p * (1.0 - p));
      CHECK(std::abs(counts[static_cast<std::size_t>(t)] - n * p) <= 3.0 * sigma + 1.0);
    }
  }
}

TEST_CASE("sequence log probability") {
  World w(AttributeSchema::tiny_schema(), 3);
  QBot bot(tiny_dims(w), 61);
  Scene s = w.make_scene(0, {1, 0}, {1}, 4);
  auto enc = bot.encode(s.caption_tokens, bot.zero_fact(), {});

  SUBCASE("always nonpositive") {
    Rng rng(5);
    for (int i = 0; i < 10; ++i) {
      auto res = bot.decode_utterance(enc.e, DecodeMode::Sample, &rng);
      CHECK(bot.sequence_logprob(enc.e, res.tokens).item() <= 0.0);
    }
  }

  SUBCASE("re-scoring a sampled sequence reproduces the decode-time log-probs") {
    Rng rng(9);
    for (int i = 0; i < 10; ++i) {
      auto res = bot.decode_utterance(enc.e, DecodeMode::Sample, &rng);
      double decode_sum = 0.0;
      for (double lp : res.logprobs) decode_sum += lp;
      CHECK(bot.sequence_logprob(enc.e, res.tokens).item() ==
            doctest::Approx(decode_sum).epsilon(1e-12));
      CHECK(res.logprob_sum.item() == doctest::Approx(decode_sum).epsilon(1e-12));
    }
  }

  SUBCASE("greedy output is the per-step argmax under teacher forcing") {
    auto res = bot.decode_utterance(enc.e, DecodeMode::Greedy, nullptr);
    auto tf = bot.teacher_force(enc.e, res.tokens);
    CHECK(tf.n_correct == tf.n_tokens);
  }
}
