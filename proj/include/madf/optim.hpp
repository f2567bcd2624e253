#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "madf/rng.hpp"
#include "madf/tensor.hpp"

namespace madf {

// Ordered collection of named learnable tensors. Iteration order is insertion
// order, which pins the optimizer sweep order and hence bit reproducibility.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t rng_seed = 0) : rng_seed_(rng_seed) {}

  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw std::invalid_argument("param '" + name + "' already registered");
    t.mark_param();
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  // Glorot-uniform matrix parameter.
  Tensor& add_matrix(const std::string& name, int rows, int cols, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::vector<double> v(static_cast<std::size_t>(rows) * cols);
    for (auto& x : v) x = rng.uniform(-a, a);
    return add(name, Tensor::from({rows, cols}, std::move(v)));
  }

  Tensor& add_vector(const std::string& name, int n) {
    return add(name, Tensor::zeros({n}));
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown param '" + name + "'");
    return entries_[it->second].second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown param '" + name + "'");
    return entries_[it->second].second;
  }

  std::size_t size() const { return entries_.size(); }
  std::uint64_t rng_seed() const { return rng_seed_; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grads() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

  // Deep copy with fresh graph leaves (no shared grads).
  ParamStore clone() const {
    ParamStore out(rng_seed_);
    for (const auto& [name, t] : entries_) {
      out.add(name, Tensor::from(t.shape(), t.values()));
    }
    return out;
  }

  void copy_values_from(const ParamStore& other) {
    for (auto& [name, t] : entries_) {
      t.mutable_values() = other.at(name).values();
    }
  }

  std::int64_t total_scalars() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::uint64_t rng_seed_;
};

// Global L2-norm gradient clip; returns the pre-clip norm.
inline double clip_global_norm(ParamStore& store, double max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : store) {
    if (!t.has_grad()) continue;
    for (double g : t.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, t] : store) {
      if (!t.has_grad()) continue;
      for (double& g : t.grad()) g *= s;
    }
  }
  return norm;
}

enum class OptKind { Sgd, Adam };

// SGD or Adam over a ParamStore. Updates in insertion order, then zeroes grads.
class Optimizer {
 public:
  Optimizer(OptKind kind, double lr) : kind_(kind), lr_(lr) {}

  OptKind kind() const { return kind_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::int64_t step_count() const { return step_; }

  void step(ParamStore& store) {
    for (auto& [name, t] : store) {
      if (!t.has_grad()) {
        throw std::runtime_error("optimizer_step: missing gradient for param '" + name + "'");
      }
    }
    ++step_;
    for (auto& [name, t] : store) {
      auto& vals = t.mutable_values();
      auto& grads = t.grad();
      if (kind_ == OptKind::Sgd) {
        for (std::size_t i = 0; i < vals.size(); ++i) vals[i] -= lr_ * grads[i];
      } else {
        auto& m = moment1_[name];
        auto& v = moment2_[name];
        if (m.empty()) m.assign(vals.size(), 0.0);
        if (v.empty()) v.assign(vals.size(), 0.0);
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
        for (std::size_t i = 0; i < vals.size(); ++i) {
          m[i] = beta1_ * m[i] + (1.0 - beta1_) * grads[i];
          v[i] = beta2_ * v[i] + (1.0 - beta2_) * grads[i] * grads[i];
          const double mhat = m[i] / bc1;
          const double vhat = v[i] / bc2;
          vals[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
      }
      check_finite("optimizer_step", vals);
      t.zero_grad();
    }
  }

  // Moment access for checkpointing.
  std::unordered_map<std::string, std::vector<double>>& moment1() { return moment1_; }
  std::unordered_map<std::string, std::vector<double>>& moment2() { return moment2_; }
  void set_step_count(std::int64_t s) { step_ = s; }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  OptKind kind_;
  double lr_;
  double beta1_ = kBeta1;
  double beta2_ = kBeta2;
  double eps_ = kEps;
  std::int64_t step_ = 0;
  std::unordered_map<std::string, std::vector<double>> moment1_;
  std::unordered_map<std::string, std::vector<double>> moment2_;
};

// Central-difference validation of backward(). `f` must rebuild its graph from
// the current store values on every call and be deterministic; returns the
// worst relative disagreement over every scalar in the store.
inline double finite_difference_check(const std::function<Tensor()>& f, ParamStore& store,
                                      double eps = 1e-5) {
  const double v1 = f().item();
  Tensor loss = f();
  if (loss.item() != v1) {
    throw std::runtime_error("finite_difference_check: f is not deterministic");
  }
  store.zero_grads();
  backward(loss);

  double worst = 0.0;
  for (auto& [name, t] : store) {
    auto& vals = t.mutable_values();
    const auto& grads = t.grad();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + eps;
      const double fp = f().item();
      vals[i] = keep - eps;
      const double fm = f().item();
      vals[i] = keep;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = grads[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1.0});
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
  }
  store.zero_grads();
  return worst;
}

}  // namespace madf
