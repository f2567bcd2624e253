#pragma once

#include <string>
#include <utility>

#include "madf/optim.hpp"
#include "madf/tensor.hpp"

namespace madf {

// Names the per-gate weight/bias tensors of one LSTM cell inside a ParamStore:
// <prefix>.W{i,f,o,g} [H x In], <prefix>.U{i,f,o,g} [H x H], <prefix>.b{i,f,o,g} [H].
struct RecurrentCellSpec {
  std::string prefix;
  int input_dim = 0;
  int hidden_dim = 0;
};

inline void init_lstm_params(ParamStore& store, const RecurrentCellSpec& spec, Rng& rng) {
  for (const char* g : {"i", "f", "o", "g"}) {
    store.add_matrix(spec.prefix + ".W" + g, spec.hidden_dim, spec.input_dim, rng);
    store.add_matrix(spec.prefix + ".U" + g, spec.hidden_dim, spec.hidden_dim, rng);
    store.add_vector(spec.prefix + ".b" + g, spec.hidden_dim);
  }
}

// One step of the standard LSTM gate equations.
inline std::pair<Tensor, Tensor> lstm_step(const RecurrentCellSpec& spec, ParamStore& store,
                                           const Tensor& x, const Tensor& h, const Tensor& c) {
  if (x.rank() != 1 || x.dim(0) != spec.input_dim) {
    throw ShapeError("lstm_step(" + spec.prefix + "): input " + shape_str(x.shape()) +
                     " does not match input_dim " + std::to_string(spec.input_dim));
  }
  if (h.rank() != 1 || h.dim(0) != spec.hidden_dim || c.rank() != 1 ||
      c.dim(0) != spec.hidden_dim) {
    throw ShapeError("lstm_step(" + spec.prefix + "): state " + shape_str(h.shape()) + "/" +
                     shape_str(c.shape()) + " does not match hidden_dim " +
                     std::to_string(spec.hidden_dim));
  }
  auto gate = [&](const char* g) {
    return add(add(matmul(store.at(spec.prefix + ".W" + g), x),
                   matmul(store.at(spec.prefix + ".U" + g), h)),
               store.at(spec.prefix + ".b" + g));
  };
  Tensor i = sigmoid(gate("i"));
  Tensor f = sigmoid(gate("f"));
  Tensor o = sigmoid(gate("o"));
  Tensor g = tanh_t(gate("g"));
  Tensor c_next = add(mul(f, c), mul(i, g));
  Tensor h_next = mul(o, tanh_t(c_next));
  return {std::move(h_next), std::move(c_next)};
}

}  // namespace madf
