#pragma once

#include <cstdint>
#include <vector>

#include "cgs/primitives.hpp"
#include "cgs/scene_io.hpp"

namespace cgs {

struct SyntheticOptions {
  std::size_t gaussians = 100;
  int views = 25;
  int holdout_every = 5;  // every n-th view is held out; 0 for none
  int width = 64;
  int height = 64;
  std::size_t points_per_gaussian = 4;
  std::uint64_t seed = 1;
};

// Random Gaussians inside [-1, 1]^3 seen from cameras on a sphere around the
// origin. Points are samples drawn from the Gaussians.
SceneData synthetic_scene(const SyntheticOptions& options, std::vector<Gaussian3D>* truth = nullptr);

struct BlobOptions {
  std::size_t background = 60;
  std::size_t blob = 12;
  double blob_radius = 0.25;
  Vec3 blob_start{-0.4, 0.0, 0.0};
  Vec3 velocity{0.06, 0.02, 0.0};  // per frame
  std::size_t frames = 8;
  int views = 16;
  int width = 48;
  int height = 48;
  std::size_t points_per_gaussian = 4;
  std::uint64_t seed = 1;
};

struct BlobTruth {
  std::vector<Gaussian3D> background;
  std::vector<Gaussian3D> blob;  // at frame 0
  std::vector<Vec3> centers;     // blob center per frame
};

// Static background plus a rigid blob translating by `velocity` each frame.
SceneData moving_blob_sequence(const BlobOptions& options, BlobTruth* truth = nullptr);

// Cameras on a Fibonacci sphere of the given radius looking at the origin.
std::vector<Camera> sphere_cameras(int count, double radius, double focal, int width, int height);

}  // namespace cgs
