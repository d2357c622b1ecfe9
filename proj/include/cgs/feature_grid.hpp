#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "cgs/common.hpp"

namespace cgs {

struct GridLevel {
  std::uint32_t resolution = 0;  // lattice vertices per axis
  std::uint32_t table_size = 0;  // power of two
  std::uint32_t feature_dim = 0;

  bool operator==(const GridLevel&) const = default;
};

struct GridConfig {
  std::uint32_t levels = 4;
  std::uint32_t base_resolution = 16;
  std::uint32_t growth = 2;
  std::uint32_t log2_table_size = 14;
  std::uint32_t feature_dim = 4;

  std::vector<GridLevel> make_levels() const;
  bool operator==(const GridConfig&) const = default;
};

// Multiresolution hashed feature field over an axis-aligned box.
struct FeatureGrid {
  std::vector<GridLevel> levels;
  std::vector<std::vector<double>> tables;  // per level: table_size * feature_dim
  Vec3 lo{0.0, 0.0, 0.0};
  Vec3 hi{1.0, 1.0, 1.0};
  std::array<std::uint32_t, 3> primes{1u, 2654435761u, 805459861u};

  FeatureGrid() = default;
  FeatureGrid(std::vector<GridLevel> lv, Vec3 lo_, Vec3 hi_);

  std::size_t output_dim() const;
  std::size_t parameter_count() const;

  // Table slot of an integer lattice vertex at a level.
  std::uint32_t slot(std::size_t level, std::uint32_t i, std::uint32_t j, std::uint32_t k) const;

  // Zero-valued tables of the same layout; used as a gradient container.
  FeatureGrid zeros_like() const;

  bool operator==(const FeatureGrid&) const = default;
};

// Trilinear interpolation of hashed corner features, concatenated coarse to
// fine. Positions outside [lo, hi] are clamped to the box.
void query(const FeatureGrid& grid, const Vec3& position, std::span<double> out);
std::vector<double> query(const FeatureGrid& grid, const Vec3& position);

// Accumulates d(upstream . query)/d(table) into grad (a zeros_like container).
void backprop_query(const FeatureGrid& grid, const Vec3& position, std::span<const double> upstream,
                    FeatureGrid& grad);

// d(upstream . query)/d(position); zero along clamped axes.
Vec3 query_position_gradient(const FeatureGrid& grid, const Vec3& position,
                             std::span<const double> upstream);

}  // namespace cgs
