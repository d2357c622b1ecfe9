#pragma once

#include <cstdint>

#include "cgs/common.hpp"

namespace cgs {

// Pinhole camera; x_cam = R x_world + t, pixel = (fx x/z + cx, fy y/z + cy).
struct Camera {
  Mat3 rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 translation{0.0, 0.0, 0.0};
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  Vec3 to_camera(const Vec3& p) const { return add(matvec(rotation, p), translation); }
  // Camera center in world coordinates, -R^T t.
  Vec3 center() const { return scale(matvec(transpose(rotation), translation), -1.0); }

  bool operator==(const Camera&) const = default;
};

// Camera at `eye` looking at `target`; image y grows downward.
Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width, int height);

}  // namespace cgs
