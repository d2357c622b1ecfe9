#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cgs/camera.hpp"
#include "cgs/primitives.hpp"
#include "cgs/spatial_prediction.hpp"

namespace cgs {

// Row-major RGB image, interleaved channels, values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

  double& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::size_t size() const { return data.size(); }

  bool operator==(const Image&) const = default;
};

inline constexpr double kNearPlane = 0.01;
inline constexpr double kCovarianceBlur = 1e-6;
inline constexpr double kMaxAlpha = 0.999;
inline constexpr double kMinTransmittance = 1e-4;

struct ProjectedGaussian {
  bool visible = false;
  double u = 0.0;  // pixel coordinates of the mean
  double v = 0.0;
  std::array<double, 3> cov2d{};  // (xx, xy, yy), regularized
  double depth = 0.0;
};

ProjectedGaussian project_gaussian(const Gaussian3D& g, const Camera& cam);

struct RasterStats {
  std::size_t contributions = 0;  // (pixel, primitive) pairs composited
  std::size_t clamped = 0;        // pairs whose weight hit the alpha clamp
  std::size_t terminated = 0;     // pixels that stopped on low transmittance
  bool operator==(const RasterStats&) const = default;
};

Image rasterize(std::span<const Gaussian3D> gaussians, const Camera& cam, RasterStats* stats = nullptr);

struct RasterGradients {
  std::vector<GaussianGrad> gaussians;
  // |dL/d mean2d| in normalized device units, per primitive.
  std::vector<double> screen_gradient;
};

RasterGradients backprop_rasterize(std::span<const Gaussian3D> gaussians, const Camera& cam,
                                   const Image& image_gradient);

double mse(const Image& a, const Image& b);
double psnr(const Image& a, const Image& b);
double ssim(const Image& a, const Image& b);
// 0.8 * L1 + 0.2 * (1 - SSIM)
double distortion(const Image& a, const Image& b);
// d distortion / d a
Image distortion_gradient(const Image& a, const Image& b);
// d ssim / d a
Image ssim_gradient(const Image& a, const Image& b);

// 11-tap normalized Gaussian window, sigma 1.5.
std::array<double, 11> ssim_window();

void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);
// Planar float32 little-endian payload plus a JSON sidecar at path + ".json".
void write_float_raw(const std::string& path, const Image& img);
Image read_float_raw(const std::string& path);

}  // namespace cgs
