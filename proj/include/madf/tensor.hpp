#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace madf {

// Shape mismatches and other contract violations at op boundaries.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Any non-finite value produced by an op aborts the run (no silent masking).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily; empty means "no grad yet"
  bool requires_grad = false;
  bool is_param = false;
  std::uint64_t id = 0;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backfn;  // pushes this->grad into parents
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

inline std::uint64_t next_node_id() {
  static std::uint64_t counter = 0;
  return ++counter;
}

// A dense 64-bit real tensor holding an optional handle into the autodiff
// graph. Copies are shallow (shared node); the graph is append-only.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from(std::move(shape), {}, requires_grad, true);
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false,
                     bool zero_fill = false) {
    auto n = std::make_shared<Node>();
    const std::int64_t count = numel(shape);
    if (zero_fill) {
      values.assign(static_cast<std::size_t>(count), 0.0);
    } else if (static_cast<std::int64_t>(values.size()) != count) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                       shape_str(shape));
    }
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    n->id = next_node_id();
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(n_->value.size()); }
  const std::vector<double>& values() const { return n_->value; }
  std::vector<double>& mutable_values() { return n_->value; }
  bool requires_grad() const { return n_->requires_grad; }

  double item() const {
    if (n_->value.size() != 1) throw ShapeError("item: tensor is not scalar");
    return n_->value[0];
  }

  std::vector<double>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  bool has_grad() const { return !n_->grad.empty(); }
  void zero_grad() { n_->grad.assign(n_->value.size(), 0.0); }

  const NodePtr& node() const { return n_; }

  // Leaf parameters accumulate gradients across backward sweeps.
  void mark_param() {
    n_->requires_grad = true;
    n_->is_param = true;
  }

 private:
  explicit Tensor(NodePtr n) : n_(std::move(n)) {}
  friend Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                        std::vector<Tensor> inputs, std::function<void(Node&)> backfn);

  NodePtr n_;
};

inline void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

inline Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                      std::vector<Tensor> inputs, std::function<void(Node&)> backfn) {
  check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  n->id = next_node_id();
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backfn = std::move(backfn);
  }
  return Tensor(std::move(n));
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

// [m x k] * [k x n] -> [m x n], or [m x k] * [k] -> [m].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2) shape_fail("matmul", a.shape(), b.shape());
  const int m = a.dim(0), k = a.dim(1);
  const bool vec = b.rank() == 1;
  const int n = vec ? 1 : b.dim(1);
  if ((vec && b.dim(0) != k) || (!vec && (b.rank() != 2 || b.dim(0) != k))) {
    shape_fail("matmul", a.shape(), b.shape());
  }
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < k; ++j) {
      const double aij = av[static_cast<std::size_t>(i) * k + j];
      if (aij == 0.0) continue;
      const double* brow = bv.data() + static_cast<std::size_t>(j) * n;
      double* orow = out.data() + static_cast<std::size_t>(i) * n;
      for (int c = 0; c < n; ++c) orow[c] += aij * brow[c];
    }
  }
  Shape os = vec ? Shape{m} : Shape{m, n};
  return make_op("matmul", std::move(os), std::move(out), {a, b}, [m, k, n](Node& node) {
    auto& pa = *node.parents[0];
    auto& pb = *node.parents[1];
    const auto& g = node.grad;
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) {
          double acc = 0.0;
          for (int c = 0; c < n; ++c)
            acc += g[static_cast<std::size_t>(i) * n + c] *
                   pb.value[static_cast<std::size_t>(j) * n + c];
          pa.grad[static_cast<std::size_t>(i) * k + j] += acc;
        }
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int j = 0; j < k; ++j)
        for (int c = 0; c < n; ++c) {
          double acc = 0.0;
          for (int i = 0; i < m; ++i)
            acc += pa.value[static_cast<std::size_t>(i) * k + j] *
                   g[static_cast<std::size_t>(i) * n + c];
          pb.grad[static_cast<std::size_t>(j) * n + c] += acc;
        }
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_op("add", a.shape(), std::move(out), {a, b}, [](Node& node) {
    for (auto& p : node.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) p->grad[i] += node.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_op("mul", a.shape(), std::move(out), {a, b}, [](Node& node) {
    auto& pa = *node.parents[0];
    auto& pb = *node.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i)
        pa.grad[i] += node.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i)
        pb.grad[i] += node.grad[i] * pa.value[i];
    }
  });
}

// Multiply a tensor by a scalar tensor (broadcast).
inline Tensor smul(const Tensor& s, const Tensor& t) {
  if (s.size() != 1) throw ShapeError("smul: first argument must be scalar");
  const double sv = s.values()[0];
  std::vector<double> out(t.values());
  for (auto& x : out) x *= sv;
  return make_op("smul", t.shape(), std::move(out), {s, t}, [](Node& node) {
    auto& ps = *node.parents[0];
    auto& pt = *node.parents[1];
    if (ps.requires_grad) {
      ps.ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < node.grad.size(); ++i) acc += node.grad[i] * pt.value[i];
      ps.grad[0] += acc;
    }
    if (pt.requires_grad) {
      pt.ensure_grad();
      const double sv2 = ps.value[0];
      for (std::size_t i = 0; i < node.grad.size(); ++i) pt.grad[i] += node.grad[i] * sv2;
    }
  });
}

// Multiply by a compile-time constant.
inline Tensor scale(const Tensor& t, double c) {
  std::vector<double> out(t.values());
  for (auto& x : out) x *= c;
  return make_op("scale", t.shape(), std::move(out), {t}, [c](Node& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i) p.grad[i] += node.grad[i] * c;
  });
}

inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: empty input list");
  std::vector<double> out;
  std::vector<int> sizes;
  for (const auto& p : parts) {
    if (p.rank() != 1) throw ShapeError("concat: only rank-1 tensors, got " + shape_str(p.shape()));
    out.insert(out.end(), p.values().begin(), p.values().end());
    sizes.push_back(static_cast<int>(p.size()));
  }
  const int total = static_cast<int>(out.size());
  return make_op("concat", {total}, std::move(out), parts,
                 [sizes](Node& node) {
                   std::size_t off = 0;
                   for (std::size_t k = 0; k < node.parents.size(); ++k) {
                     auto& p = *node.parents[k];
                     if (p.requires_grad) {
                       p.ensure_grad();
                       for (int i = 0; i < sizes[k]; ++i)
                         p.grad[static_cast<std::size_t>(i)] += node.grad[off + i];
                     }
                     off += static_cast<std::size_t>(sizes[k]);
                   }
                 });
}

inline Tensor tanh_t(const Tensor& t) {
  std::vector<double> out(t.values());
  for (auto& x : out) x = std::tanh(x);
  return make_op("tanh", t.shape(), std::move(out), {t}, [](Node& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i)
      p.grad[i] += node.grad[i] * (1.0 - node.value[i] * node.value[i]);
  });
}

inline Tensor sigmoid(const Tensor& t) {
  std::vector<double> out(t.values());
  for (auto& x : out) x = 1.0 / (1.0 + std::exp(-x));
  return make_op("sigmoid", t.shape(), std::move(out), {t}, [](Node& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i)
      p.grad[i] += node.grad[i] * node.value[i] * (1.0 - node.value[i]);
  });
}

// Softmax over the last (only) axis of a rank-1 tensor.
inline Tensor softmax(const Tensor& t) {
  if (t.rank() != 1) throw ShapeError("softmax: rank-1 expected, got " + shape_str(t.shape()));
  const auto& v = t.values();
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    z += out[i];
  }
  for (auto& x : out) x /= z;
  return make_op("softmax", t.shape(), std::move(out), {t}, [](Node& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    double dot = 0.0;
    for (std::size_t i = 0; i < node.grad.size(); ++i) dot += node.grad[i] * node.value[i];
    for (std::size_t i = 0; i < node.grad.size(); ++i)
      p.grad[i] += node.value[i] * (node.grad[i] - dot);
  });
}

// Row lookup into a [V x E] table; gradient scatters into the selected row.
inline Tensor embed_row(const Tensor& table, int row) {
  if (table.rank() != 2) throw ShapeError("embed: table must be rank-2");
  const int v = table.dim(0), e = table.dim(1);
  if (row < 0 || row >= v) {
    throw ShapeError("embed: row " + std::to_string(row) + " out of range [0, " +
                     std::to_string(v) + ")");
  }
  const auto& tv = table.values();
  std::vector<double> out(tv.begin() + static_cast<std::size_t>(row) * e,
                          tv.begin() + static_cast<std::size_t>(row + 1) * e);
  return make_op("embed", {e}, std::move(out), {table}, [row, e](Node& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < e; ++i)
      p.grad[static_cast<std::size_t>(row) * e + i] += node.grad[static_cast<std::size_t>(i)];
  });
}

inline Tensor slice(const Tensor& t, int lo, int hi) {
  if (t.rank() != 1 || lo < 0 || hi > t.dim(0) || lo >= hi) {
    throw ShapeError("slice: bad range [" + std::to_string(lo) + ", " + std::to_string(hi) +
                     ") for " + shape_str(t.shape()));
  }
  std::vector<double> out(t.values().begin() + lo, t.values().begin() + hi);
  return make_op("slice", {hi - lo}, std::move(out), {t}, [lo](Node& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i) p.grad[lo + i] += node.grad[i];
  });
}

inline Tensor reduce_sum(const Tensor& t) {
  double s = 0.0;
  for (double x : t.values()) s += x;
  return make_op("sum", {1}, {s}, {t}, [](Node& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (auto& g : p.grad) g += node.grad[0];
  });
}

inline Tensor reduce_mean(const Tensor& t) {
  const double inv = 1.0 / static_cast<double>(t.size());
  double s = 0.0;
  for (double x : t.values()) s += x;
  return make_op("mean", {1}, {s * inv}, {t}, [inv](Node& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (auto& g : p.grad) g += node.grad[0] * inv;
  });
}

// -log softmax(logits)[target]; numerically stable log-sum-exp form.
inline Tensor cross_entropy(const Tensor& logits, int target) {
  if (logits.rank() != 1) throw ShapeError("cross_entropy: logits must be rank-1");
  const int v = logits.dim(0);
  if (target < 0 || target >= v) {
    throw ShapeError("cross_entropy: target " + std::to_string(target) + " out of range [0, " +
                     std::to_string(v) + ")");
  }
  const auto& x = logits.values();
  const double mx = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (double xi : x) z += std::exp(xi - mx);
  const double loss = std::log(z) + mx - x[static_cast<std::size_t>(target)];
  return make_op("cross_entropy", {1}, {loss}, {logits}, [target, mx, z](Node& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = node.grad[0];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      double soft = std::exp(p.value[i] - mx) / z;
      if (static_cast<int>(i) == target) soft -= 1.0;
      p.grad[i] += g * soft;
    }
  });
}

inline Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) shape_fail("mse", pred.shape(), target.shape());
  const auto& a = pred.values();
  const auto& b = target.values();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  const double inv = 1.0 / static_cast<double>(a.size());
  return make_op("mse", {1}, {s * inv}, {pred, target}, [inv](Node& node) {
    auto& pa = *node.parents[0];
    auto& pb = *node.parents[1];
    const double g = node.grad[0];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < pa.value.size(); ++i)
        pa.grad[i] += g * 2.0 * inv * (pa.value[i] - pb.value[i]);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < pb.value.size(); ++i)
        pb.grad[i] -= g * 2.0 * inv * (pa.value[i] - pb.value[i]);
    }
  });
}

// Cut the graph: same values, no gradient path.
inline Tensor detach(const Tensor& t) {
  return Tensor::from(t.shape(), t.values());
}

inline Tensor dot(const Tensor& a, const Tensor& b) { return reduce_sum(mul(a, b)); }

// ---------------------------------------------------------------------------
// Reverse-mode sweep
// ---------------------------------------------------------------------------

// Accumulates d(loss)/d(p) into every reachable requires_grad tensor. Grads of
// intermediate (non-leaf) nodes are reset each sweep; leaf grads accumulate
// across sweeps until explicitly zeroed.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss must be scalar");
  if (!loss.requires_grad()) return;

  std::vector<NodePtr> order;
  std::unordered_set<std::uint64_t> seen;
  std::vector<NodePtr> work{loss.node()};
  while (!work.empty()) {
    NodePtr n = std::move(work.back());
    work.pop_back();
    if (!seen.insert(n->id).second) continue;
    for (const auto& p : n->parents)
      if (p->requires_grad && !seen.count(p->id)) work.push_back(p);
    order.push_back(std::move(n));
  }
  // Node ids are monotone in creation order, so descending id is topological.
  std::sort(order.begin(), order.end(),
            [](const NodePtr& a, const NodePtr& b) { return a->id > b->id; });

  // Fresh sweep for interior nodes (params keep accumulating).
  for (const auto& n : order) {
    if (!n->is_param) n->grad.assign(n->value.size(), 0.0);
    else n->ensure_grad();
  }
  loss.node()->grad[0] = 1.0;
  for (const auto& n : order) {
    if (n->backfn) n->backfn(*n);
  }
  for (const auto& n : order) check_finite("backward", n->grad);
}

}  // namespace madf
