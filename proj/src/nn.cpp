#include "meow/nn.hpp"

#include <cmath>

namespace meow {

Linear::Linear(int in, int out, Rng& rng) {
  if (in <= 0 || out <= 0) throw Error("Linear: dimensions must be positive");
  double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(static_cast<size_t>(in) * out);
  std::vector<double> bias(out);
  for (double& v : w) v = rng.uniform(-bound, bound);
  for (double& v : bias) v = rng.uniform(-bound, bound);
  W = Tensor::parameter(Shape::mat(out, in), std::move(w));
  b = Tensor::parameter(Shape::vec(out), std::move(bias));
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.emplace_back(prefix + ".W", W);
  out.emplace_back(prefix + ".b", b);
}

void fill_linear(Linear& layer, const std::vector<double>& w_values,
                 const std::vector<double>& b_values) {
  if (static_cast<int>(w_values.size()) != layer.W.size() ||
      static_cast<int>(b_values.size()) != layer.b.size())
    throw ShapeError("fill_linear: value count does not match layer");
  layer.W = Tensor::parameter(layer.W.shape(), w_values);
  layer.b = Tensor::parameter(layer.b.shape(), b_values);
}

}  // namespace meow
