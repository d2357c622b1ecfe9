#include <gtest/gtest.h>

#include <cmath>

#include "cgs/feature_grid.hpp"
#include "support.hpp"

using namespace cgs;

namespace {

FeatureGrid random_grid(Rng& rng, const GridConfig& cfg, Vec3 lo = {-1, -1, -1}, Vec3 hi = {1, 1, 1}) {
  FeatureGrid g(cfg.make_levels(), lo, hi);
  for (auto& t : g.tables)
    for (double& v : t) v = rng.normal();
  return g;
}

Vec3 vertex(const FeatureGrid& g, std::size_t level, std::array<std::uint32_t, 3> ijk) {
  const double cells = g.levels[level].resolution - 1.0;
  Vec3 p;
  for (int a = 0; a < 3; ++a) p[a] = g.lo[a] + (g.hi[a] - g.lo[a]) * ijk[a] / cells;
  return p;
}

std::span<const double> feature(const FeatureGrid& g, std::size_t level, std::uint32_t slot) {
  const std::size_t fd = g.levels[level].feature_dim;
  return std::span(g.tables[level]).subspan(slot * fd, fd);
}

}  // namespace

TEST(FeatureGrid, ZeroTablesGiveZero) {
  const FeatureGrid g(GridConfig{}.make_levels(), {-1, -1, -1}, {1, 1, 1});
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const auto out = query(g, {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
    ASSERT_EQ(out.size(), 16u);
    for (double v : out) ASSERT_EQ(v, 0.0);
  }
}

TEST(FeatureGrid, DefaultConfiguration) {
  const GridConfig c;
  const auto lv = c.make_levels();
  ASSERT_EQ(lv.size(), 4u);
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_EQ(lv[l].resolution, 16u << l);
    EXPECT_EQ(lv[l].table_size, 1u << 14);
    EXPECT_EQ(lv[l].feature_dim, 4u);
  }
}

TEST(FeatureGrid, VertexReturnsHashedFeature) {
  Rng rng(2);
  const FeatureGrid g = random_grid(rng, {1, 5, 2, 6, 3});
  for (std::uint32_t i = 0; i < 5; ++i)
    for (std::uint32_t j : {0u, 2u, 4u})
      for (std::uint32_t k : {1u, 3u}) {
        const auto out = query(g, vertex(g, 0, {i, j, k}));
        const auto f = feature(g, 0, g.slot(0, i, j, k));
        for (std::size_t d = 0; d < 3; ++d) EXPECT_DOUBLE_EQ(out[d], f[d]);
      }
}

TEST(FeatureGrid, CellCenterIsMeanOfCorners) {
  Rng rng(3);
  const FeatureGrid g = random_grid(rng, {1, 2, 2, 4, 2});
  const auto out = query(g, {0.0, 0.0, 0.0});
  for (std::size_t d = 0; d < 2; ++d) {
    double sum = 0.0;
    for (std::uint32_t c = 0; c < 8; ++c) sum += feature(g, 0, g.slot(0, c & 1, (c >> 1) & 1, c >> 2))[d];
    EXPECT_NEAR(out[d], sum / 8.0, 1e-9);
  }
}

TEST(FeatureGrid, ExplicitTrilinearOracle) {
  Rng rng(4);
  const FeatureGrid g = random_grid(rng, {2, 3, 3, 5, 2});
  for (int t = 0; t < 50; ++t) {
    const Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const auto out = query(g, p);
    std::size_t off = 0;
    for (std::size_t l = 0; l < g.levels.size(); ++l) {
      const double cells = g.levels[l].resolution - 1.0;
      std::array<std::uint32_t, 3> base{};
      std::array<double, 3> f{};
      for (int a = 0; a < 3; ++a) {
        const double x = (p[a] + 1.0) / 2.0 * cells;
        base[a] = static_cast<std::uint32_t>(std::min(std::floor(x), cells - 1.0));
        f[a] = x - base[a];
      }
      for (std::size_t d = 0; d < 2; ++d) {
        double want = 0.0;
        for (std::uint32_t c = 0; c < 8; ++c) {
          const std::uint32_t bx = c & 1, by = (c >> 1) & 1, bz = c >> 2;
          const double w = (bx ? f[0] : 1 - f[0]) * (by ? f[1] : 1 - f[1]) * (bz ? f[2] : 1 - f[2]);
          want += w * feature(g, l, g.slot(l, base[0] + bx, base[1] + by, base[2] + bz))[d];
        }
        ASSERT_NEAR(out[off + d], want, 1e-12);
      }
      off += 2;
    }
  }
}

TEST(FeatureGrid, ClampsOutsideAndRejectsBadInput) {
  Rng rng(5);
  const FeatureGrid g = random_grid(rng, {2, 4, 2, 6, 2});
  EXPECT_EQ(query(g, {5.0, -7.0, 1.0}), query(g, {1.0, -1.0, 1.0}));
  EXPECT_THROW(query(g, {std::nan(""), 0.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(query(FeatureGrid{}, {0.0, 0.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(FeatureGrid({{8, 16, 2}, {4, 16, 2}}, {0, 0, 0}, {1, 1, 1}), std::invalid_argument);
  EXPECT_THROW(FeatureGrid({{8, 12, 2}}, {0, 0, 0}, {1, 1, 1}), std::invalid_argument);
}

TEST(FeatureGrid, HashIsDeterministic) {
  const FeatureGrid g(GridConfig{}.make_levels(), {0, 0, 0}, {1, 1, 1});
  const FeatureGrid h = g;
  for (std::uint32_t i = 0; i < 40; ++i) EXPECT_EQ(g.slot(2, i, 3 * i, 7 * i), h.slot(2, i, 3 * i, 7 * i));
  EXPECT_LT(g.slot(3, 100, 5, 9), g.levels[3].table_size);
}

TEST(FeatureGrid, PiecewiseTrilinearWithinCell) {
  Rng rng(6);
  const FeatureGrid g = random_grid(rng, {2, 5, 2, 6, 3});
  // finest cell width is 2 / 9; stay inside one cell of every level
  const double w = 2.0 / 9.0;
  for (int t = 0; t < 30; ++t) {
    const Vec3 p0{-1.0 + w * (1.1 + 0.7 * rng.uniform()), -1.0 + w * (3.2 + 0.5 * rng.uniform()), -1.0 + 4.15 * w};
    for (int a = 0; a < 3; ++a) {
      Vec3 p1 = p0, p2 = p0;
      p1[a] += 0.05 * w;
      p2[a] += 0.1 * w;
      const auto q0 = query(g, p0), q1 = query(g, p1), q2 = query(g, p2);
      for (std::size_t d = 0; d < q0.size(); ++d) ASSERT_NEAR(q1[d], 0.5 * (q0[d] + q2[d]), 1e-7);
    }
  }
}

TEST(FeatureGrid, BackpropZeroUpstream) {
  Rng rng(7);
  const FeatureGrid g = random_grid(rng, {2, 4, 2, 6, 2});
  FeatureGrid grad = g.zeros_like();
  const std::vector<double> up(g.output_dim(), 0.0);
  backprop_query(g, {0.3, -0.2, 0.1}, up, grad);
  for (const auto& t : grad.tables)
    for (double v : t) ASSERT_EQ(v, 0.0);
}

TEST(FeatureGrid, BackpropAtVertexHitsOneCornerPerLevel) {
  Rng rng(8);
  FeatureGrid g({{3, 256, 2}, {5, 256, 2}}, {-1, -1, -1}, {1, 1, 1});
  for (auto& t : g.tables)
    for (double& v : t) v = rng.normal();
  // (0,0,0) is a vertex of both levels
  FeatureGrid grad = g.zeros_like();
  const std::vector<double> up(g.output_dim(), 1.0);
  backprop_query(g, {0.0, 0.0, 0.0}, up, grad);
  for (std::size_t l = 0; l < 2; ++l) {
    std::size_t nonzero = 0;
    for (double v : grad.tables[l]) nonzero += v != 0.0;
    EXPECT_EQ(nonzero, 2u);  // one slot, two features
    const std::uint32_t c = (g.levels[l].resolution - 1) / 2;
    for (double v : feature(grad, l, g.slot(l, c, c, c))) EXPECT_DOUBLE_EQ(v, 1.0);
  }
}

TEST(FeatureGrid, BackpropMatchesFiniteDifferences) {
  Rng rng(9);
  FeatureGrid g = random_grid(rng, {2, 3, 2, 5, 2});
  std::vector<double> up(g.output_dim());
  for (double& u : up) u = rng.normal();
  for (int t = 0; t < 10; ++t) {
    const Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    FeatureGrid grad = g.zeros_like();
    backprop_query(g, p, up, grad);
    const auto f = [&] {
      const auto q = query(g, p);
      double s = 0.0;
      for (std::size_t d = 0; d < q.size(); ++d) s += up[d] * q[d];
      return s;
    };
    for (std::size_t l = 0; l < g.levels.size(); ++l)
      for (std::size_t i = 0; i < g.tables[l].size(); ++i) {
        const double fd = test::central_difference(g.tables[l][i], 1e-4, f);
        const double an = grad.tables[l][i];
        if (an == 0.0 && fd == 0.0) continue;
        ASSERT_LT(test::relative_error(an, fd, 1e-6), 1e-4) << "level " << l << " entry " << i;
      }
    // position gradient
    const Vec3 dp = query_position_gradient(g, p, up);
    for (int a = 0; a < 3; ++a) {
      Vec3 q = p;
      const double fd = test::central_difference(q[a], 1e-6, [&] {
        const auto v = query(g, q);
        double s = 0.0;
        for (std::size_t d = 0; d < v.size(); ++d) s += up[d] * v[d];
        return s;
      });
      ASSERT_LT(test::relative_error(dp[a], fd, 1e-6), 1e-4);
    }
  }
}
