#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cgs/common.hpp"

namespace cgs {

// Single affine map y = W x + b, W stored row-major (out x in).
struct Affine {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  Affine() = default;
  Affine(std::size_t in_dim, std::size_t out_dim)
      : in(in_dim), out(out_dim), weight(in_dim * out_dim, 0.0), bias(out_dim, 0.0) {}

  void forward(std::span<const double> x, std::span<double> y) const;
  std::vector<double> forward(std::span<const double> x) const;

  // Accumulates dW, db into grad (same shape as *this) and, when dx is
  // non-empty, accumulates W^T dy into dx.
  void backward(std::span<const double> x, std::span<const double> dy, Affine& grad,
                std::span<double> dx) const;

  // Uniform(-bound, bound) weights with bound = scale / sqrt(in), zero bias.
  void init_uniform(Rng& rng, double scale = 1.0);

  bool operator==(const Affine&) const = default;
};

}  // namespace cgs
