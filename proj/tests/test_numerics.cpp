#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "madf/lstm.hpp"
#include "madf/optim.hpp"
#include "madf/rng.hpp"
#include "madf/tensor.hpp"

using namespace madf;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("matmul identity leaves input unchanged") {
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor y = matmul(eye, x);
  CHECK(y.values() == x.values());

  Tensor v = Tensor::from({3}, {7, 8, 9});
  CHECK(matmul(eye, v).values() == v.values());
}

TEST_CASE("softmax symmetry and normalization") {
  Tensor s = softmax(Tensor::from({2}, {0.0, 0.0}));
  CHECK(s.values()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.values()[1] == doctest::Approx(0.5).epsilon(1e-15));

  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor t = random_tensor({9}, rng, false, 30.0);
    Tensor p = softmax(t);
    double sum = 0.0;
    for (double x : p.values()) {
      CHECK(x >= 0.0);
      sum += x;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("concat joins vectors in order") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = Tensor::from({1}, {3});
  Tensor c = concat({a, b});
  CHECK(c.values() == std::vector<double>{1, 2, 3});
}

TEST_CASE("shape mismatches are rejected with a diagnostic") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = Tensor::from({3}, {1, 2, 3});
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(mul(a, b), ShapeError);
  CHECK_THROWS_AS(mse(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), ShapeError);
}

TEST_CASE("cross entropy") {
  SUBCASE("uniform logits give ln V") {
    Tensor logits = Tensor::zeros({8});
    CHECK(cross_entropy(logits, 3).item() == doctest::Approx(std::log(8.0)).epsilon(1e-12));
  }
  SUBCASE("large margin on target drives loss to zero") {
    std::vector<double> v(8, 0.0);
    v[2] = 50.0;
    CHECK(cross_entropy(Tensor::from({8}, v), 2).item() < 1e-20);
  }
  SUBCASE("matches log-sum-exp oracle on random logits") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
      Tensor logits = random_tensor({5}, rng, false, 4.0);
      const int target = static_cast<int>(rng.below(5));
      // Independent direct-summation oracle.
      double z = 0.0;
      for (double x : logits.values()) z += std::exp(x);
      const double expected = std::log(z) - logits.values()[static_cast<std::size_t>(target)];
      CHECK(cross_entropy(logits, target).item() == doctest::Approx(expected).epsilon(1e-12));
    }
  }
  SUBCASE("target out of range rejected") {
    Tensor logits = Tensor::zeros({4});
    CHECK_THROWS_AS(cross_entropy(logits, 4), ShapeError);
    CHECK_THROWS_AS(cross_entropy(logits, -1), ShapeError);
  }
}

TEST_CASE("mse") {
  Tensor t = Tensor::from({3}, {1, 2, 3});
  CHECK(mse(t, t).item() == 0.0);
  CHECK(mse(Tensor::from({2}, {1, 1}), Tensor::zeros({2})).item() == doctest::Approx(1.0));

  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor a = random_tensor({7}, rng);
    Tensor b = random_tensor({7}, rng);
    double acc = 0.0;
    for (int i = 0; i < 7; ++i) {
      const double d = a.values()[i] - b.values()[i];
      acc += d * d;
    }
    CHECK(mse(a, b).item() == doctest::Approx(acc / 7.0).epsilon(1e-12));
  }
}

TEST_CASE("lstm step") {
  RecurrentCellSpec spec{"cell", 3, 4};

  SUBCASE("all-zero weights and inputs give zero hidden state") {
    ParamStore store;
    for (const char* g : {"i", "f", "o", "g"}) {
      store.add(std::string("cell.W") + g, Tensor::zeros({4, 3}));
      store.add(std::string("cell.U") + g, Tensor::zeros({4, 4}));
      store.add(std::string("cell.b") + g, Tensor::zeros({4}));
    }
    auto [h, c] = lstm_step(spec, store, Tensor::zeros({3}), Tensor::zeros({4}), Tensor::zeros({4}));
    for (double x : h.values()) CHECK(x == 0.0);
  }

  SUBCASE("saturated forget gate carries the cell state through") {
    ParamStore store;
    for (const char* g : {"i", "f", "o", "g"}) {
      store.add(std::string("cell.W") + g, Tensor::zeros({4, 3}));
      store.add(std::string("cell.U") + g, Tensor::zeros({4, 4}));
      const double bias = (g[0] == 'f') ? 40.0 : (g[0] == 'i' ? -40.0 : 0.0);
      store.add(std::string("cell.b") + g, Tensor::from({4}, std::vector<double>(4, bias)));
    }
    Tensor c0 = Tensor::from({4}, {0.3, -0.8, 1.4, 0.1});
    auto [h, c] = lstm_step(spec, store, Tensor::zeros({3}), Tensor::zeros({4}), c0);
    for (int i = 0; i < 4; ++i) {
      CHECK(c.values()[i] == doctest::Approx(c0.values()[i]).epsilon(1e-12));
    }
  }

  SUBCASE("matches hand-unrolled scalar gate equations") {
    Rng rng(23);
    ParamStore store;
    init_lstm_params(store, spec, rng);
    Tensor x = random_tensor({3}, rng);
    Tensor h0 = random_tensor({4}, rng);
    Tensor c0 = random_tensor({4}, rng);
    auto [h, c] = lstm_step(spec, store, x, h0, c0);

    // Scalar-loop oracle.
    auto gate_val = [&](const char* g, int row) {
      double acc = store.at(std::string("cell.b") + g).values()[row];
      for (int j = 0; j < 3; ++j)
        acc += store.at(std::string("cell.W") + g).values()[row * 3 + j] * x.values()[j];
      for (int j = 0; j < 4; ++j)
        acc += store.at(std::string("cell.U") + g).values()[row * 4 + j] * h0.values()[j];
      return acc;
    };
    auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
    for (int r = 0; r < 4; ++r) {
      const double ci = sig(gate_val("f", r)) * c0.values()[r] +
                        sig(gate_val("i", r)) * std::tanh(gate_val("g", r));
      const double hi = sig(gate_val("o", r)) * std::tanh(ci);
      CHECK(c.values()[r] == doctest::Approx(ci).epsilon(1e-12));
      CHECK(h.values()[r] == doctest::Approx(hi).epsilon(1e-12));
    }
  }

  SUBCASE("dimension mismatch rejected") {
    Rng rng(1);
    ParamStore store;
    init_lstm_params(store, spec, rng);
    CHECK_THROWS_AS(lstm_step(spec, store, Tensor::zeros({5}), Tensor::zeros({4}), Tensor::zeros({4})),
                    ShapeError);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives all-ones gradient") {
    ParamStore store;
    Tensor& w = store.add("w", Tensor::from({4}, {1, 2, 3, 4}));
    backward(reduce_sum(w));
    for (double g : w.grad()) CHECK(g == 1.0);
  }

  SUBCASE("mse against zero: d/dw w^2 = 2w") {
    ParamStore store;
    Tensor& w = store.add("w", Tensor::from({1}, {2.0}));
    backward(mse(w, Tensor::zeros({1})));
    CHECK(w.grad()[0] == doctest::Approx(4.0));
  }

  SUBCASE("non-scalar loss rejected") {
    ParamStore store;
    Tensor& w = store.add("w", Tensor::from({2}, {1, 2}));
    CHECK_THROWS_AS(backward(add(w, w)), ShapeError);
  }

  SUBCASE("accumulation is additive: L1 then L2 equals L1+L2") {
    Rng rng(3);
    ParamStore s1(0), s2(0);
    Tensor w1 = random_tensor({5}, rng);
    Tensor& a1 = s1.add("w", Tensor::from({5}, w1.values()));
    Tensor& a2 = s2.add("w", Tensor::from({5}, w1.values()));

    Tensor shared1 = tanh_t(a1);
    backward(reduce_sum(shared1));
    backward(mse(shared1, Tensor::zeros({5})));

    Tensor shared2 = tanh_t(a2);
    backward(add(reduce_sum(shared2), mse(shared2, Tensor::zeros({5}))));

    for (int i = 0; i < 5; ++i) {
      CHECK(a1.grad()[i] == doctest::Approx(a2.grad()[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("optimizer step") {
  SUBCASE("plain SGD") {
    ParamStore store;
    Tensor& w = store.add("w", Tensor::from({1}, {1.0}));
    w.grad()[0] = 0.5;
    Optimizer opt(OptKind::Sgd, 0.1);
    opt.step(store);
    CHECK(w.values()[0] == doctest::Approx(0.95).epsilon(1e-15));
  }

  SUBCASE("zero grads leave parameters unchanged") {
    ParamStore store;
    Tensor& w = store.add("w", Tensor::from({3}, {1, 2, 3}));
    store.zero_grads();
    Optimizer sgd(OptKind::Sgd, 0.1);
    sgd.step(store);
    CHECK(w.values() == std::vector<double>{1, 2, 3});
    Optimizer adam(OptKind::Adam, 0.1);
    store.zero_grads();
    adam.step(store);
    CHECK(w.values() == std::vector<double>{1, 2, 3});
  }

  SUBCASE("missing grads rejected with parameter name") {
    ParamStore store;
    store.add("unused", Tensor::from({2}, {0, 0}));
    Optimizer opt(OptKind::Sgd, 0.1);
    CHECK_THROWS_WITH_AS(opt.step(store), doctest::Contains("unused"), std::runtime_error);
  }

  SUBCASE("Adam matches a scalar re-implementation") {
    Rng rng(7);
    ParamStore store;
    Tensor& w = store.add("w", Tensor::from({3}, {0.5, -1.0, 2.0}));
    Optimizer opt(OptKind::Adam, 1e-2);

    std::vector<double> ref = w.values();
    std::vector<double> m(3, 0.0), v(3, 0.0);
    for (int step = 1; step <= 5; ++step) {
      std::vector<double> g(3);
      for (auto& x : g) x = rng.uniform(-1, 1);
      for (int i = 0; i < 3; ++i) w.grad()[i] = g[i];
      opt.step(store);
      for (int i = 0; i < 3; ++i) {
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
        const double mhat = m[i] / (1.0 - std::pow(0.9, step));
        const double vhat = v[i] / (1.0 - std::pow(0.999, step));
        ref[i] -= 1e-2 * mhat / (std::sqrt(vhat) + 1e-8);
        CHECK(w.values()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("gradient clipping rescales to the requested norm") {
  ParamStore store;
  Tensor& w = store.add("w", Tensor::zeros({2}));
  w.grad()[0] = 3.0;
  w.grad()[1] = 4.0;
  const double norm = clip_global_norm(store, 1.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(w.grad()[0] == doctest::Approx(0.6));
  CHECK(w.grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("finite difference check") {
  SUBCASE("sum of tanh(Wx)") {
    Rng rng(41);
    ParamStore store;
    store.add_matrix("W", 4, 4, rng);
    Tensor x = random_tensor({4}, rng);
    auto f = [&]() { return reduce_sum(tanh_t(matmul(store.at("W"), x))); };
    CHECK(finite_difference_check(f, store) < 1e-6);
  }

  SUBCASE("constant function has zero error") {
    ParamStore store;
    store.add("w", Tensor::from({2}, {1, 2}));
    auto f = []() { return Tensor::scalar(3.5); };
    CHECK(finite_difference_check(f, store) == 0.0);
  }

  SUBCASE("composite graph with every primitive") {
    Rng rng(43);
    ParamStore store;
    store.add_matrix("W", 3, 5, rng);
    store.add("b", random_tensor({3}, rng));
    store.add("table", random_tensor({4, 5}, rng));
    store.add("s", Tensor::scalar(0.7));
    auto f = [&]() {
      Tensor e = embed_row(store.at("table"), 2);
      Tensor y = add(matmul(store.at("W"), e), store.at("b"));
      Tensor p = softmax(concat({sigmoid(y), slice(e, 0, 2)}));
      Tensor loss = add(cross_entropy(scale(p, 3.0), 1), reduce_mean(smul(store.at("s"), y)));
      return add(loss, mse(tanh_t(y), Tensor::zeros({3})));
    };
    CHECK(finite_difference_check(f, store) < 1e-6);
  }
}

TEST_CASE("bitwise determinism of a repeated op sequence") {
  auto run = []() {
    Rng rng(99);
    ParamStore store(99);
    store.add_matrix("W", 6, 6, rng);
    Tensor x = random_tensor({6}, rng);
    Tensor h = tanh_t(matmul(store.at("W"), x));
    Tensor loss = mse(h, x);
    backward(loss);
    std::vector<double> out = h.values();
    const auto& g = store.at("W").grad();
    out.insert(out.end(), g.begin(), g.end());
    out.push_back(loss.item());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("non-finite values abort with the producing op named") {
  Tensor big = Tensor::from({1}, {1e308});
  CHECK_THROWS_AS(add(big, big), NumericError);
}
