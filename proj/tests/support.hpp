#pragma once

#include <bit>
#include <cstring>
#include <functional>
#include <vector>

#include "cgs/primitives.hpp"
#include "cgs/renderer.hpp"

namespace cgs::test {

inline ModelConfig toy_config() {
  ModelConfig c;
  c.context_grid = {2, 4, 2, 8, 2};
  c.prior_grid = {2, 4, 2, 8, 2};
  c.coupled_per_anchor = 4;
  return c;
}

// Trainable-looking model with random parameters.
inline SceneModel random_model(Rng& rng, std::size_t anchors, const ModelConfig& config = toy_config()) {
  SceneModel m = make_model(config, {-1.0, -1.0, -1.0}, {1.0, 1.0, 1.0});
  init_networks(m, rng);
  for (auto* g : {&m.context_grid, &m.prior_grid})
    for (auto& t : g->tables)
      for (double& v : t) v = 0.2 * rng.normal();
  for (std::size_t i = 0; i < anchors; ++i) {
    AnchorPrimitive a;
    for (double& v : a.location) v = rng.uniform(-0.8, 0.8);
    for (double& v : a.log_scales) v = std::log(rng.uniform(0.02, 0.1));
    for (double& v : a.rotation) v = rng.normal();
    for (double& v : a.ref_embedding) v = 0.5 * rng.normal();
    std::vector<ResEmbedding> res(m.k());
    for (auto& r : res)
      for (double& v : r) v = 0.5 * rng.normal();
    add_anchor(m, a, res);
  }
  return m;
}

inline std::vector<std::uint64_t> bit_pattern(const SceneModel& m) {
  SceneModel copy = m;
  std::vector<std::uint64_t> out;
  for (const auto& s : parameter_spans(copy))
    for (double v : s.values) out.push_back(std::bit_cast<std::uint64_t>(v));
  return out;
}

// Bitwise equality of every learnable scalar plus structure.
inline bool bitwise_equal(const SceneModel& a, const SceneModel& b) {
  if (!(a.config == b.config) || a.anchors.size() != b.anchors.size() || a.coupled.size() != b.coupled.size())
    return false;
  for (std::size_t i = 0; i < a.coupled.size(); ++i)
    if (a.coupled[i].anchor_index != b.coupled[i].anchor_index) return false;
  if (a.context_grid.lo != b.context_grid.lo || a.context_grid.hi != b.context_grid.hi ||
      a.context_grid.primes != b.context_grid.primes)
    return false;
  return bit_pattern(a) == bit_pattern(b);
}

// Central finite difference of f with respect to x.
inline double central_difference(double& x, double h, const std::function<double()>& f) {
  const double x0 = x;
  x = x0 + h;
  const double fp = f();
  x = x0 - h;
  const double fm = f();
  x = x0;
  return (fp - fm) / (2.0 * h);
}

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Direct 11x11 window SSIM with zero padding outside the image, averaged over
// pixels and channels.
inline double brute_force_ssim(const Image& a, const Image& b) {
  double wsum = 0.0;
  double w2[11][11];
  for (int dy = -5; dy <= 5; ++dy)
    for (int dx = -5; dx <= 5; ++dx) {
      w2[dy + 5][dx + 5] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
      wsum += w2[dy + 5][dx + 5];
    }
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0.0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int dy = -5; dy <= 5; ++dy)
          for (int dx = -5; dx <= 5; ++dx) {
            const int xx = x + dx, yy = y + dy;
            if (xx < 0 || yy < 0 || xx >= a.width || yy >= a.height) continue;
            const double w = w2[dy + 5][dx + 5] / wsum;
            const double p = a.at(xx, yy, c), q = b.at(xx, yy, c);
            mx += w * p;
            my += w * q;
            sxx += w * p * p;
            syy += w * q * q;
            sxy += w * p * q;
          }
        const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
        total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
  return total / (3.0 * a.width * a.height);
}

}  // namespace cgs::test
