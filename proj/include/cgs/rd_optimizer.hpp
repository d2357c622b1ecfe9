#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "cgs/camera.hpp"
#include "cgs/entropy_model.hpp"
#include "cgs/primitives.hpp"
#include "cgs/renderer.hpp"

namespace cgs {

struct LearningRates {
  double location = 1.6e-4;
  double covariance = 5e-3;
  double embedding = 2.5e-3;
  double network = 2e-3;
  double grid = 1e-2;

  double for_group(ParamGroup g) const;
};

struct TrainConfig {
  double lambda = 0.0005;
  int iterations = 5000;
  LearningRates lr;
  int densify_interval = 100;
  double densify_until = 0.6;  // fraction of iterations with density control
  double densify_grad_threshold = 2e-4;
  double prune_opacity = 0.005;
  std::size_t max_anchors = 20000;
  bool quantization_noise = true;
  std::uint64_t seed = 0;
};

// "low" -> 0.001, "middle" -> 0.0005, "high" -> 0.0001 (high rate, low lambda).
double lambda_preset(std::string_view name);

struct TrainView {
  Camera camera;
  Image image;
};

// Adam moments shaped like the model.
struct OptimizerState {
  SceneModel m;
  SceneModel v;
  std::uint64_t step = 0;

  static OptimizerState for_model(const SceneModel& model);
};

// D + lambda * rate_bits / primitives.
double rd_loss(const Image& render, const Image& target, double rate_bits, double lambda, std::size_t primitives);

struct ObjectiveResult {
  double distortion = 0.0;
  double rate_bits = 0.0;
  double loss = 0.0;
  Image render;
  std::vector<Gaussian3D> gaussians;
  std::vector<double> screen_gradient;  // per coupled primitive
};

// Full forward (noisy values -> derive -> rasterize -> distortion + rate) and,
// when grad is non-null, the reverse pass accumulated into grad.
ObjectiveResult evaluate_objective(const SceneModel& model, const TrainView& view, double lambda,
                                   const QuantizationNoise& noise, SceneModel* grad);

void adam_update(SceneModel& model, const SceneModel& grad, OptimizerState& state, const LearningRates& lr);

// Interval statistics for anchor density control.
struct DensityStats {
  std::vector<double> anchor_grad;   // summed mean screen gradient per anchor
  std::vector<std::uint32_t> seen;   // observations per anchor
  std::vector<double> coupled_grad;  // summed screen gradient per coupled
  std::vector<double> max_opacity;   // per anchor

  void reset(const SceneModel& model);
  void accumulate(const SceneModel& model, const ObjectiveResult& r);
};

// Spawns anchors at the highest-gradient derived Gaussian of anchors whose
// mean gradient exceeds the threshold, and prunes anchors whose Gaussians are
// all nearly transparent. Optimizer moments follow the anchors. Returns the
// number of (added, removed) anchors.
std::pair<std::size_t, std::size_t> anchor_density_control(SceneModel& model, const DensityStats& stats,
                                                           const TrainConfig& config, OptimizerState& state);

struct StepLog {
  int iteration = 0;
  double distortion = 0.0;
  double rate_bits = 0.0;
  double loss = 0.0;
  double psnr = 0.0;
};

// One forward/backward/update. Throws NumericError naming the offending
// parameter group if the loss or a gradient is not finite.
StepLog train_step(SceneModel& model, const TrainView& view, const TrainConfig& config, OptimizerState& state,
                   Rng& rng, DensityStats* stats = nullptr);

struct TrainResult {
  SceneModel model;
  std::vector<StepLog> log;
};

// Anchors from a voxel-downsampled point cloud (voxel 0.01 x scene extent).
SceneModel initialize_model(std::span<const Vec3> points, const ModelConfig& config, Rng& rng);

using ProgressFn = std::function<void(const StepLog&)>;

TrainResult train_static(std::span<const TrainView> views, std::span<const Vec3> points, const ModelConfig& model_config,
                         const TrainConfig& config, const ProgressFn& progress = {});

// Mean PSNR / SSIM of the model rendered at its quantization-free values.
struct EvalMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
};
EvalMetrics evaluate_views(const SceneModel& model, std::span<const TrainView> views);

// Renders a model (values used as stored).
Image render_model(const SceneModel& model, const Camera& camera);

void write_metrics_csv(const std::string& path, std::span<const StepLog> log);

}  // namespace cgs
