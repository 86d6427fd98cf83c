// Small neural-network building blocks shared by the flow and the shift
// heads. Everything is built from the tensor ops, so gradients come for free
// whenever a tape is active.

#pragma once

#include <string>

#include "meow/tensor.hpp"

namespace meow {

// Controls stochastic layers. Dropout draws from ctx.rng only when training
// is set; evaluation paths leave ctx.training false and get deterministic
// outputs.
struct EvalCtx {
  bool training = false;
  Rng* rng = nullptr;
};

// Fully connected layer y = Wx + b with the usual uniform fan-in init,
// U(-1/sqrt(in), 1/sqrt(in)) for both W and b.
struct Linear {
  Tensor W;
  Tensor b;

  Linear() = default;
  Linear(int in, int out, Rng& rng);

  Tensor operator()(const Tensor& x) const { return affine(W, x, b); }

  void collect(const std::string& prefix, ParamList& out) const;
};

// Replaces this layer's init with explicit values. Used for the generator
// heads that must start the flow at the identity.
void fill_linear(Linear& layer, const std::vector<double>& w_values,
                 const std::vector<double>& b_values);

}  // namespace meow
