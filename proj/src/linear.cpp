#include "cgs/linear.hpp"

#include <stdexcept>

namespace cgs {

void Affine::forward(std::span<const double> x, std::span<double> y) const {
  if (x.size() != in || y.size() != out) throw std::invalid_argument("Affine: dimension mismatch");
  for (std::size_t o = 0; o < out; ++o) {
    const double* w = weight.data() + o * in;
    double s = bias[o];
    for (std::size_t i = 0; i < in; ++i) s += w[i] * x[i];
    y[o] = s;
  }
}

std::vector<double> Affine::forward(std::span<const double> x) const {
  std::vector<double> y(out);
  forward(x, y);
  return y;
}

void Affine::backward(std::span<const double> x, std::span<const double> dy, Affine& grad,
                      std::span<double> dx) const {
  if (x.size() != in || dy.size() != out) throw std::invalid_argument("Affine: dimension mismatch");
  for (std::size_t o = 0; o < out; ++o) {
    const double g = dy[o];
    if (g == 0.0) continue;
    grad.bias[o] += g;
    double* gw = grad.weight.data() + o * in;
    for (std::size_t i = 0; i < in; ++i) gw[i] += g * x[i];
    if (!dx.empty()) {
      const double* w = weight.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) dx[i] += g * w[i];
    }
  }
}

void Affine::init_uniform(Rng& rng, double scale) {
  const double bound = in > 0 ? scale / std::sqrt(static_cast<double>(in)) : 0.0;
  for (auto& w : weight) w = rng.uniform(-bound, bound);
  for (auto& b : bias) b = 0.0;
}

}  // namespace cgs
