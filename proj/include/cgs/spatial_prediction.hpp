#pragma once

#include <array>
#include <span>
#include <vector>

#include "cgs/camera.hpp"
#include "cgs/primitives.hpp"

namespace cgs {

// Unit direction from the camera center to the anchor plus inverse distance.
struct ViewEmbedding {
  Vec3 direction{0.0, 0.0, 1.0};
  double inverse_distance = 0.0;

  std::array<double, kViewDim> values() const {
    return {direction[0], direction[1], direction[2], inverse_distance};
  }
};

ViewEmbedding make_view_embedding(const Vec3& camera_center, const Vec3& location);

// Affine offsets: translation, positive per-axis scale ratios, unit rotation.
struct AffineOffsets {
  Vec3 translation{0.0, 0.0, 0.0};
  Vec3 scaling{1.0, 1.0, 1.0};
  Quat rotation{1.0, 0.0, 0.0, 0.0};
};

struct Appearance {
  Vec3 color{0.5, 0.5, 0.5};
  double opacity = 0.5;
};

// zeta = ref ++ res ++ context, in that order.
std::vector<double> assemble_prediction_features(std::span<const double> ref_embedding,
                                                 std::span<const double> res_embedding,
                                                 std::span<const double> context);
std::vector<double> assemble_prediction_features(const AnchorPrimitive& anchor,
                                                 const CoupledPrimitive& coupled,
                                                 const FeatureGrid& context_grid);

AffineOffsets predict_affine_offsets(std::span<const double> zeta, const PredictionNetworks& nets);

// mean = location + t; scales = s * anchor scales; rotation = R o anchor rotation.
Gaussian3D apply_affine(const Vec3& location, const FactoredCovariance& cov, const AffineOffsets& nu);

Appearance predict_appearance(std::span<const double> zeta, const ViewEmbedding& view,
                              const PredictionNetworks& nets);

// The K Gaussians of one anchor seen from `camera`, in coupled order.
std::vector<Gaussian3D> derive_gaussians(const SceneModel& model, std::size_t anchor_index,
                                         const Camera& camera);

// Embedding/covariance values fed to prediction. During training these are
// the noisy surrogates; at coding time the quantized reconstructions.
struct PrimitiveValues {
  std::vector<RefEmbedding> ref;
  std::vector<std::array<double, kCovParams>> cov;
  std::vector<ResEmbedding> res;

  static PrimitiveValues from_model(const SceneModel& model);
  static PrimitiveValues zeros_like(const PrimitiveValues& v);
};

struct GaussianGrad {
  Vec3 mean{0.0, 0.0, 0.0};
  Vec3 scales{0.0, 0.0, 0.0};
  Quat rotation{0.0, 0.0, 0.0, 0.0};
  Vec3 color{0.0, 0.0, 0.0};
  double opacity = 0.0;
};

// Forward pass over every coupled primitive with intermediates kept for the
// reverse pass.
struct DerivedScene {
  std::vector<Gaussian3D> gaussians;  // one per coupled primitive
  std::vector<std::vector<double>> context;  // per anchor
  std::vector<ViewEmbedding> views;          // per anchor
  std::vector<std::vector<double>> zeta;     // per coupled
  std::vector<std::array<double, 7>> geometry_pre;    // per coupled: scaling(3) + rotation(4) raw
  std::vector<std::array<double, 4>> appearance_pre;  // per coupled: color(3) + opacity(1) raw
};

DerivedScene derive_scene(const SceneModel& model, const PrimitiveValues& values, const Camera& camera);

// Accumulates gradients of the Gaussians w.r.t. locations, context grid and
// prediction heads into grad, and w.r.t. the fed values into dvalues.
void backprop_derive_scene(const SceneModel& model, const PrimitiveValues& values,
                           const DerivedScene& scene, std::span<const GaussianGrad> dgaussians,
                           SceneModel& grad, PrimitiveValues& dvalues);

}  // namespace cgs
