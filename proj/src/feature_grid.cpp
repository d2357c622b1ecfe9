#include "cgs/feature_grid.hpp"

#include <algorithm>
#include <stdexcept>

namespace cgs {

std::vector<GridLevel> GridConfig::make_levels() const {
  std::vector<GridLevel> out;
  std::uint32_t res = base_resolution;
  for (std::uint32_t l = 0; l < levels; ++l) {
    out.push_back({res, 1u << log2_table_size, feature_dim});
    res *= growth;
  }
  return out;
}

FeatureGrid::FeatureGrid(std::vector<GridLevel> lv, Vec3 lo_, Vec3 hi_)
    : levels(std::move(lv)), lo(lo_), hi(hi_) {
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const auto& g = levels[l];
    if (g.resolution < 2) throw std::invalid_argument("FeatureGrid: resolution must be >= 2");
    if (g.table_size == 0 || (g.table_size & (g.table_size - 1)) != 0)
      throw std::invalid_argument("FeatureGrid: table_size must be a power of two");
    if (l > 0 && g.resolution <= levels[l - 1].resolution)
      throw std::invalid_argument("FeatureGrid: resolutions must increase");
    tables.emplace_back(static_cast<std::size_t>(g.table_size) * g.feature_dim, 0.0);
  }
  for (int a = 0; a < 3; ++a)
    if (!(hi[a] > lo[a])) throw std::invalid_argument("FeatureGrid: empty domain");
}

std::size_t FeatureGrid::output_dim() const {
  std::size_t d = 0;
  for (const auto& g : levels) d += g.feature_dim;
  return d;
}

std::size_t FeatureGrid::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tables) n += t.size();
  return n;
}

std::uint32_t FeatureGrid::slot(std::size_t level, std::uint32_t i, std::uint32_t j,
                                std::uint32_t k) const {
  const std::uint32_t h = (i * primes[0]) ^ (j * primes[1]) ^ (k * primes[2]);
  return h & (levels[level].table_size - 1u);
}

FeatureGrid FeatureGrid::zeros_like() const {
  FeatureGrid g = *this;
  for (auto& t : g.tables) std::fill(t.begin(), t.end(), 0.0);
  return g;
}

namespace {

struct Cell {
  std::array<std::uint32_t, 3> base;
  std::array<double, 3> frac;
  std::array<double, 3> dfrac;  // d frac / d position (0 when clamped)
};

Cell locate(const FeatureGrid& grid, std::size_t level, const Vec3& p) {
  Cell c{};
  const double cells = static_cast<double>(grid.levels[level].resolution - 1);
  for (int a = 0; a < 3; ++a) {
    const double extent = grid.hi[a] - grid.lo[a];
    double u = (p[a] - grid.lo[a]) / extent;
    double du = 1.0 / extent;
    if (u <= 0.0) {
      u = 0.0;
      du = 0.0;
    } else if (u >= 1.0) {
      u = 1.0;
      du = 0.0;
    }
    const double x = u * cells;
    double fl = std::floor(x);
    if (fl > cells - 1.0) fl = cells - 1.0;
    c.base[a] = static_cast<std::uint32_t>(fl);
    c.frac[a] = x - fl;
    c.dfrac[a] = du * cells;
  }
  return c;
}

void check_position(const FeatureGrid& grid, const Vec3& p) {
  if (grid.levels.empty()) throw std::invalid_argument("FeatureGrid: empty grid");
  for (double v : p)
    if (std::isnan(v)) throw std::invalid_argument("FeatureGrid: NaN position");
}

}  // namespace

void query(const FeatureGrid& grid, const Vec3& position, std::span<double> out) {
  check_position(grid, position);
  if (out.size() != grid.output_dim()) throw std::invalid_argument("FeatureGrid: output size");
  std::size_t offset = 0;
  for (std::size_t l = 0; l < grid.levels.size(); ++l) {
    const std::size_t fd = grid.levels[l].feature_dim;
    const Cell c = locate(grid, l, position);
    for (std::size_t f = 0; f < fd; ++f) out[offset + f] = 0.0;
    for (int corner = 0; corner < 8; ++corner) {
      const int bx = corner & 1, by = (corner >> 1) & 1, bz = (corner >> 2) & 1;
      const double w = (bx ? c.frac[0] : 1.0 - c.frac[0]) * (by ? c.frac[1] : 1.0 - c.frac[1]) *
                       (bz ? c.frac[2] : 1.0 - c.frac[2]);
      if (w == 0.0) continue;
      const std::uint32_t s = grid.slot(l, c.base[0] + bx, c.base[1] + by, c.base[2] + bz);
      const double* feat = grid.tables[l].data() + static_cast<std::size_t>(s) * fd;
      for (std::size_t f = 0; f < fd; ++f) out[offset + f] += w * feat[f];
    }
    offset += fd;
  }
}

std::vector<double> query(const FeatureGrid& grid, const Vec3& position) {
  std::vector<double> out(grid.output_dim());
  query(grid, position, out);
  return out;
}

void backprop_query(const FeatureGrid& grid, const Vec3& position, std::span<const double> upstream,
                    FeatureGrid& grad) {
  check_position(grid, position);
  if (upstream.size() != grid.output_dim()) throw std::invalid_argument("FeatureGrid: upstream size");
  std::size_t offset = 0;
  for (std::size_t l = 0; l < grid.levels.size(); ++l) {
    const std::size_t fd = grid.levels[l].feature_dim;
    bool any = false;
    for (std::size_t f = 0; f < fd; ++f) any = any || upstream[offset + f] != 0.0;
    if (any) {
      const Cell c = locate(grid, l, position);
      for (int corner = 0; corner < 8; ++corner) {
        const int bx = corner & 1, by = (corner >> 1) & 1, bz = (corner >> 2) & 1;
        const double w = (bx ? c.frac[0] : 1.0 - c.frac[0]) * (by ? c.frac[1] : 1.0 - c.frac[1]) *
                         (bz ? c.frac[2] : 1.0 - c.frac[2]);
        if (w == 0.0) continue;
        const std::uint32_t s = grid.slot(l, c.base[0] + bx, c.base[1] + by, c.base[2] + bz);
        double* g = grad.tables[l].data() + static_cast<std::size_t>(s) * fd;
        for (std::size_t f = 0; f < fd; ++f) g[f] += w * upstream[offset + f];
      }
    }
    offset += fd;
  }
}

Vec3 query_position_gradient(const FeatureGrid& grid, const Vec3& position,
                             std::span<const double> upstream) {
  check_position(grid, position);
  Vec3 g{0.0, 0.0, 0.0};
  std::size_t offset = 0;
  for (std::size_t l = 0; l < grid.levels.size(); ++l) {
    const std::size_t fd = grid.levels[l].feature_dim;
    const Cell c = locate(grid, l, position);
    for (int corner = 0; corner < 8; ++corner) {
      const int b[3] = {corner & 1, (corner >> 1) & 1, (corner >> 2) & 1};
      double wa[3], da[3];
      for (int a = 0; a < 3; ++a) {
        wa[a] = b[a] ? c.frac[a] : 1.0 - c.frac[a];
        da[a] = b[a] ? c.dfrac[a] : -c.dfrac[a];
      }
      const std::uint32_t s = grid.slot(l, c.base[0] + b[0], c.base[1] + b[1], c.base[2] + b[2]);
      const double* feat = grid.tables[l].data() + static_cast<std::size_t>(s) * fd;
      double proj = 0.0;
      for (std::size_t f = 0; f < fd; ++f) proj += feat[f] * upstream[offset + f];
      if (proj == 0.0) continue;
      g[0] += proj * da[0] * wa[1] * wa[2];
      g[1] += proj * wa[0] * da[1] * wa[2];
      g[2] += proj * wa[0] * wa[1] * da[2];
    }
    offset += fd;
  }
  return g;
}

}  // namespace cgs
