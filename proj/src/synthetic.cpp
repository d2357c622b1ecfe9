#include "cgs/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "cgs/renderer.hpp"

namespace cgs {

std::vector<Camera> sphere_cameras(int count, double radius, double focal, int width, int height) {
  std::vector<Camera> cams;
  const double golden = kPi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < count; ++i) {
    // z in (-0.8, 0.8) keeps the up vector away from the view direction
    const double z = 0.8 - 1.6 * (i + 0.5) / count;
    const double r = std::sqrt(1.0 - z * z);
    const double phi = golden * i;
    const Vec3 eye{radius * r * std::cos(phi), radius * r * std::sin(phi), radius * z};
    cams.push_back(look_at(eye, {0.0, 0.0, 0.0}, {0.0, 0.0, 1.0}, focal, width, height));
  }
  return cams;
}

namespace {

Gaussian3D random_gaussian(Rng& rng, const Vec3& center, double spread, double min_scale, double max_scale) {
  Gaussian3D g;
  for (int a = 0; a < 3; ++a) g.mean[a] = center[a] + rng.uniform(-spread, spread);
  for (int a = 0; a < 3; ++a) g.covariance.scales[a] = rng.uniform(min_scale, max_scale);
  g.covariance.rotation = quat_normalize(Quat{rng.normal(), rng.normal(), rng.normal(), rng.normal()});
  for (int c = 0; c < 3; ++c) g.color[c] = rng.uniform(0.1, 0.95);
  g.opacity = rng.uniform(0.6, 0.95);
  return g;
}

void sample_points(Rng& rng, const Gaussian3D& g, std::size_t n, std::vector<Vec3>& out) {
  const Mat3 rot = quat_to_matrix(g.covariance.rotation);
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 local;
    for (int a = 0; a < 3; ++a) local[a] = g.covariance.scales[a] * std::clamp(rng.normal(), -2.0, 2.0);
    out.push_back(add(g.mean, matvec(rot, local)));
  }
}

std::vector<std::uint8_t> holdout_flags(int views, int every) {
  std::vector<std::uint8_t> h(static_cast<std::size_t>(views), 0);
  if (every > 0)
    for (int v = every - 1; v < views; v += every) h[static_cast<std::size_t>(v)] = 1;
  return h;
}

double focal_for(int width) { return 0.5 * width / std::tan(0.5 * 0.7); }

}  // namespace

SceneData synthetic_scene(const SyntheticOptions& o, std::vector<Gaussian3D>* truth) {
  if (o.gaussians == 0 || o.views <= 0 || o.width <= 0 || o.height <= 0)
    throw std::invalid_argument("synthetic_scene: empty scene");
  Rng rng(o.seed);
  std::vector<Gaussian3D> gs;
  for (std::size_t i = 0; i < o.gaussians; ++i) gs.push_back(random_gaussian(rng, {0.0, 0.0, 0.0}, 0.8, 0.04, 0.14));
  SceneData s;
  s.cameras = sphere_cameras(o.views, 4.0, focal_for(o.width), o.width, o.height);
  s.holdout = holdout_flags(o.views, o.holdout_every);
  for (int v = 0; v < o.views; ++v) s.view_names.push_back(std::to_string(v));
  s.frames.emplace_back();
  for (const auto& cam : s.cameras) s.frames[0].push_back(rasterize(gs, cam));
  for (const auto& g : gs) sample_points(rng, g, o.points_per_gaussian, s.points);
  if (truth) *truth = std::move(gs);
  return s;
}

SceneData moving_blob_sequence(const BlobOptions& o, BlobTruth* truth) {
  if (o.frames == 0 || o.views <= 0 || o.blob == 0) throw std::invalid_argument("moving_blob_sequence: empty sequence");
  Rng rng(o.seed);
  BlobTruth t;
  for (std::size_t i = 0; i < o.background; ++i) {
    // background shell away from the blob path
    Gaussian3D g = random_gaussian(rng, {0.0, 0.0, 0.0}, 0.9, 0.05, 0.14);
    g.mean[2] = (g.mean[2] < 0.0 ? -1.0 : 1.0) * (0.5 + 0.4 * std::abs(g.mean[2]) / 0.9);
    t.background.push_back(g);
  }
  for (std::size_t i = 0; i < o.blob; ++i) {
    Gaussian3D g = random_gaussian(rng, o.blob_start, 0.6 * o.blob_radius, 0.04, 0.08);
    g.color = {0.95, 0.3 + 0.2 * rng.uniform(), 0.1};
    t.blob.push_back(g);
  }
  SceneData s;
  s.cameras = sphere_cameras(o.views, 4.0, focal_for(o.width), o.width, o.height);
  s.holdout.assign(static_cast<std::size_t>(o.views), 0);
  for (int v = 0; v < o.views; ++v) s.view_names.push_back(std::to_string(v));
  for (std::size_t f = 0; f < o.frames; ++f) {
    const Vec3 shift = scale(o.velocity, static_cast<double>(f));
    t.centers.push_back(add(o.blob_start, shift));
    std::vector<Gaussian3D> gs = t.background;
    for (Gaussian3D g : t.blob) {
      g.mean = add(g.mean, shift);
      gs.push_back(g);
    }
    s.frames.emplace_back();
    for (const auto& cam : s.cameras) s.frames.back().push_back(rasterize(gs, cam));
  }
  for (const auto& g : t.background) sample_points(rng, g, o.points_per_gaussian, s.points);
  for (const auto& g : t.blob) sample_points(rng, g, o.points_per_gaussian, s.points);
  if (truth) *truth = std::move(t);
  return s;
}

}  // namespace cgs
