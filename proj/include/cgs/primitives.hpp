#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cgs/common.hpp"
#include "cgs/feature_grid.hpp"
#include "cgs/linear.hpp"

namespace cgs {

inline constexpr std::size_t kRefDim = 32;  // anchor reference embedding
inline constexpr std::size_t kResDim = 4;   // coupled residual embedding
inline constexpr std::size_t kCovParams = 7;  // 3 log-scales + 4 raw quaternion
inline constexpr std::size_t kViewDim = 4;

using RefEmbedding = std::array<double, kRefDim>;
using ResEmbedding = std::array<double, kResDim>;

struct FactoredCovariance {
  Vec3 scales{1.0, 1.0, 1.0};
  Quat rotation{1.0, 0.0, 0.0, 0.0};

  bool operator==(const FactoredCovariance&) const = default;
};

// R diag(s^2) R^T. Throws std::invalid_argument on a non-positive scale; a
// non-unit rotation is renormalized.
Mat3 densify_covariance(const FactoredCovariance& cov);

struct AnchorPrimitive {
  Vec3 location{0.0, 0.0, 0.0};
  Vec3 log_scales{0.0, 0.0, 0.0};
  Quat rotation{1.0, 0.0, 0.0, 0.0};  // unnormalized; normalized on use
  RefEmbedding ref_embedding{};

  FactoredCovariance covariance() const;
  std::array<double, kCovParams> cov_params() const;
  void set_cov_params(const std::array<double, kCovParams>& p);

  bool operator==(const AnchorPrimitive&) const = default;
};

struct CoupledPrimitive {
  ResEmbedding res_embedding{};
  std::uint32_t anchor_index = 0;

  bool operator==(const CoupledPrimitive&) const = default;
};

struct Gaussian3D {
  Vec3 mean{0.0, 0.0, 0.0};
  FactoredCovariance covariance;
  Vec3 color{0.0, 0.0, 0.0};
  double opacity = 0.5;

  bool operator==(const Gaussian3D&) const = default;
};

// Heads of the spatial prediction: geometry offsets from the prediction
// features, appearance from view embedding + prediction features.
struct PredictionNetworks {
  Affine translation;  // zeta -> 3
  Affine scaling;      // zeta -> 3 (log ratio)
  Affine rotation;     // zeta -> 4 (quaternion offset from identity)
  Affine color;        // view + zeta -> 3
  Affine opacity;      // view + zeta -> 1

  bool operator==(const PredictionNetworks&) const = default;
};

// Per-dimension piecewise-linear CDF with knots at the integers of
// [-support, support]; segment masses are softmax(logits).
struct FactorizedBottleneck {
  std::size_t dims = 0;
  int support = 8;
  std::vector<double> logits;  // dims * 2 * support

  FactorizedBottleneck() = default;
  FactorizedBottleneck(std::size_t d, int s)
      : dims(d), support(s), logits(d * 2 * static_cast<std::size_t>(s), 0.0) {}
  std::size_t segments() const { return 2 * static_cast<std::size_t>(support); }

  bool operator==(const FactorizedBottleneck&) const = default;
};

struct EntropyNetworks {
  Affine step_head;        // prior -> 3 quantization steps (ref, res, cov)
  Affine embedding_head;   // hyper + prior -> 2 * kRefDim
  Affine coupled_head;     // hyper + prior -> 2 * kResDim
  Affine covariance_head;  // prior -> 2 * kCovParams
  Affine anchor_hyper;     // ref embedding -> hyper
  Affine coupled_hyper;    // res embedding -> hyper
  FactorizedBottleneck anchor_bottleneck;
  FactorizedBottleneck coupled_bottleneck;

  bool operator==(const EntropyNetworks&) const = default;
};

struct ModelConfig {
  std::uint32_t coupled_per_anchor = 10;
  std::uint32_t hyper_dim = 8;
  int bottleneck_support = 8;
  GridConfig context_grid;
  GridConfig prior_grid{4, 16, 2, 14, 4};
  double location_step = 1e-3;
  double grid_step = 1.0 / 64.0;
  double lambda = 0.0005;

  bool operator==(const ModelConfig&) const = default;
};

struct SceneModel {
  ModelConfig config;
  std::vector<AnchorPrimitive> anchors;
  std::vector<CoupledPrimitive> coupled;  // grouped contiguously, K per anchor
  FeatureGrid context_grid;
  FeatureGrid prior_grid;
  PredictionNetworks prediction;
  EntropyNetworks entropy;

  std::size_t k() const { return config.coupled_per_anchor; }
  std::size_t zeta_dim() const { return kRefDim + kResDim + context_grid.output_dim(); }

  // Structural invariants: |coupled| = K |anchors|, linkage, dimensions.
  void validate() const;

  bool operator==(const SceneModel&) const = default;
};

// Empty model with allocated networks/grids. Weights are zero; call
// init_networks for a trainable start.
SceneModel make_model(const ModelConfig& config, const Vec3& lo, const Vec3& hi);

// Random small head weights, neutral biases.
void init_networks(SceneModel& model, Rng& rng);

// Appends an anchor with K coupled primitives.
void add_anchor(SceneModel& model, const AnchorPrimitive& anchor,
                std::span<const ResEmbedding> coupled);

// Removes anchors whose keep flag is false, keeping groups contiguous.
void retain_anchors(SceneModel& model, const std::vector<bool>& keep);

// The K coupled primitives of anchor i, in stored order.
std::vector<CoupledPrimitive> group_coupled(const SceneModel& model, std::size_t anchor_index);

// Same-shaped model with all learnable values zero (gradient/moment storage).
SceneModel zeros_like(const SceneModel& model);

enum class ParamGroup {
  kLocation,
  kCovariance,
  kAnchorEmbedding,
  kCoupledEmbedding,
  kPredictionNet,
  kEntropyNet,
  kContextGrid,
  kPriorGrid,
};

const char* group_name(ParamGroup g);

struct ParamSpan {
  ParamGroup group;
  std::span<double> values;
};

// Every learnable scalar of the model, as contiguous spans in a fixed order.
// Two models of identical shape yield spans that correspond element-wise.
std::vector<ParamSpan> parameter_spans(SceneModel& model);

}  // namespace cgs
