#include "meow/gradcheck.hpp"

#include <cmath>

namespace meow {

GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                  const ParamList& params, double eps) {
  if (eps <= 0.0) throw Error("finite_diff_check: eps must be positive");

  GradientMap grads;
  {
    Tape tape;
    Tape::Scope scope(&tape);
    Tensor loss = f();
    if (loss.shape().rank != 0)
      throw ShapeError("finite_diff_check: f must return a scalar");
    grads = tape.backward(loss);
  }

  GradCheckReport rep;
  Tape::Scope no_tape(nullptr);
  for (const auto& [name, param] : params) {
    Tensor p = param;  // handle copy, shares storage
    double* d = p.mutable_data();
    std::vector<double> g = grads.grad(param);
    for (int i = 0; i < p.size(); ++i) {
      double orig = d[i];
      d[i] = orig + eps;
      double fp = f().item();
      d[i] = orig - eps;
      double fm = f().item();
      d[i] = orig;
      double central = (fp - fm) / (2.0 * eps);
      double rel = std::abs(g[i] - central) / (std::abs(central) + 1e-12);
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = name;
        rep.worst_index = i;
        rep.analytic = g[i];
        rep.numeric = central;
      }
    }
  }
  return rep;
}

}  // namespace meow
