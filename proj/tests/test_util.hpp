// Shared helpers for poking at model parameters in tests. Handles returned
// by parameters() share storage with the model, so writing through them
// reparameterizes the live model.

#pragma once

#include <string>
#include <vector>

#include "meow/tensor.hpp"

namespace meow::testutil {

inline Tensor& find_param(ParamList& params, const std::string& name) {
  for (auto& [n, t] : params)
    if (n == name) return t;
  throw Error("no parameter named " + name);
}

inline void set_param(ParamList& params, const std::string& name,
                      const std::vector<double>& v) {
  Tensor& t = find_param(params, name);
  if (static_cast<int>(v.size()) != t.size())
    throw ShapeError("set_param: size mismatch for " + name);
  double* p = t.mutable_data();
  for (size_t i = 0; i < v.size(); ++i) p[i] = v[i];
}

inline void fill_param(ParamList& params, const std::string& name, double v) {
  Tensor& t = find_param(params, name);
  double* p = t.mutable_data();
  for (int i = 0; i < t.size(); ++i) p[i] = v;
}

inline void randomize_params(ParamList& params, Rng& rng, double lo,
                             double hi) {
  for (auto& [n, t] : params) {
    double* p = t.mutable_data();
    for (int i = 0; i < t.size(); ++i) p[i] = rng.uniform(lo, hi);
  }
}

inline std::vector<double> random_vec(Rng& rng, int n, double lo, double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace meow::testutil
