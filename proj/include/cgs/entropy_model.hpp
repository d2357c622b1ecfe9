#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cgs/primitives.hpp"
#include "cgs/spatial_prediction.hpp"

namespace cgs {

inline constexpr double kMinStep = 1e-4;
inline constexpr double kMinScale = 1e-6;
inline constexpr double kMinProb = 1.0 / 16777216.0;  // 2^-24

struct QuantizationSteps {
  double ref = 1.0;
  double res = 1.0;
  double cov = 1.0;
};

struct EntropyParams {
  std::vector<double> mean;
  std::vector<double> scale;
};

struct Quantized {
  std::int64_t index = 0;
  double value = 0.0;
};

// Round-half-even scalar quantization. Throws std::invalid_argument for step <= 0.
Quantized quantize(double value, double step);
double quantize_value(double value, double step);

// value + step * noise, noise in [-1/2, 1/2).
double noisy_surrogate(double value, double step, double noise);

// Mass of the quantization bin of width `step` centred on `value` under
// N(mean, scale^2).
double discrete_gaussian_mass(double value, double mean, double scale, double step);
// The same, clamped to >= 2^-24.
double discrete_gaussian_prob(double value, double mean, double scale, double step);
double discrete_gaussian_bits(double value, double mean, double scale, double step);

struct BitsGrad {
  double bits = 0.0;
  double d_value = 0.0;
  double d_mean = 0.0;
  double d_scale = 0.0;
  double d_step = 0.0;
};
BitsGrad discrete_gaussian_bits_grad(double value, double mean, double scale, double step);

QuantizationSteps predict_steps(const EntropyNetworks& nets, std::span<const double> prior);
EntropyParams predict_embedding_entropy_params(const EntropyNetworks& nets, std::span<const double> hyper,
                                               std::span<const double> prior);
EntropyParams predict_coupled_entropy_params(const EntropyNetworks& nets, std::span<const double> hyper,
                                             std::span<const double> prior);
EntropyParams predict_covariance_entropy_params(const EntropyNetworks& nets, std::span<const double> prior);

// Piecewise-linear CDF of one bottleneck dimension.
double bottleneck_cdf(const FactorizedBottleneck& b, std::size_t dim, double x);
// Segment masses softmax(logits) of one dimension.
std::vector<double> bottleneck_masses(const FactorizedBottleneck& b, std::size_t dim);
// Probability of integer bin q in [-support, support], clamped to >= 2^-24.
double bottleneck_pmf(const FactorizedBottleneck& b, std::size_t dim, int q);
// Bits of a latent; integers use the bin pmf, other values CDF(x+1/2)-CDF(x-1/2).
double bottleneck_bits(const FactorizedBottleneck& b, std::span<const double> latent);
// Same, accumulating d bits / d latent into d_latent and d bits / d logits
// (scaled by `upstream`) into grad.
double bottleneck_bits_grad(const FactorizedBottleneck& b, std::span<const double> latent, double upstream,
                            std::span<double> d_latent, FactorizedBottleneck& grad);

// Coding-time hyper latent: clamp(round(encoder(x)), -support, support).
std::vector<double> quantized_hyper(const Affine& encoder, std::span<const double> x, int support);

// Per-anchor side information derived from the decoded location.
struct AnchorContext {
  std::vector<double> prior;
  QuantizationSteps steps;
};
AnchorContext anchor_context(const SceneModel& model, const Vec3& location);

struct RateBreakdown {
  double anchor_embeddings = 0.0;
  double anchor_hyper = 0.0;
  double covariances = 0.0;
  double coupled_embeddings = 0.0;
  double coupled_hyper = 0.0;

  double total() const {
    return anchor_embeddings + anchor_hyper + covariances + coupled_embeddings + coupled_hyper;
  }
};

// Exact-mode rate: values are quantized with their predicted steps and hyper
// latents are rounded, as the coder does.
RateBreakdown model_rate(const SceneModel& model);

// Uniform noise in [-1/2, 1/2) for every quantized quantity.
struct QuantizationNoise {
  PrimitiveValues values;
  std::vector<std::vector<double>> anchor_hyper;
  std::vector<std::vector<double>> coupled_hyper;

  static QuantizationNoise zero(const SceneModel& model);
  static QuantizationNoise sample(const SceneModel& model, Rng& rng);
};

// Training-mode rate with the noisy surrogate, keeping what the reverse pass needs.
struct TrainingRate {
  RateBreakdown bits;
  PrimitiveValues values;  // noisy values fed to prediction
  std::vector<AnchorContext> contexts;
  std::vector<std::array<double, 3>> step_pre;  // raw step-head outputs
};

TrainingRate training_rate(const SceneModel& model, const QuantizationNoise& noise);

// Back-propagates rate_weight * bits plus the downstream gradient dvalues of
// the noisy values into grad.
void backprop_training_rate(const SceneModel& model, const QuantizationNoise& noise, const TrainingRate& fwd,
                            double rate_weight, const PrimitiveValues& dvalues, SceneModel& grad);

}  // namespace cgs
