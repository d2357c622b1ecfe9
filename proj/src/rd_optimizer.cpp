#include "cgs/rd_optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

#include "cgs/spatial_prediction.hpp"

namespace cgs {

double LearningRates::for_group(ParamGroup g) const {
  switch (g) {
    case ParamGroup::kLocation: return location;
    case ParamGroup::kCovariance: return covariance;
    case ParamGroup::kAnchorEmbedding:
    case ParamGroup::kCoupledEmbedding: return embedding;
    case ParamGroup::kPredictionNet:
    case ParamGroup::kEntropyNet: return network;
    case ParamGroup::kContextGrid:
    case ParamGroup::kPriorGrid: return grid;
  }
  return 0.0;
}

double lambda_preset(std::string_view name) {
  if (name == "low") return 0.001;
  if (name == "middle") return 0.0005;
  if (name == "high") return 0.0001;
  throw std::invalid_argument("unknown lambda preset '" + std::string(name) + "' (low|middle|high)");
}

OptimizerState OptimizerState::for_model(const SceneModel& model) {
  return {zeros_like(model), zeros_like(model), 0};
}

double rd_loss(const Image& render, const Image& target, double rate_bits, double lambda, std::size_t primitives) {
  const double d = distortion(render, target);
  if (primitives == 0) return d;
  return d + lambda * (rate_bits / static_cast<double>(primitives));
}

ObjectiveResult evaluate_objective(const SceneModel& model, const TrainView& view, double lambda,
                                   const QuantizationNoise& noise, SceneModel* grad) {
  ObjectiveResult r;
  const TrainingRate rate = training_rate(model, noise);
  const DerivedScene scene = derive_scene(model, rate.values, view.camera);
  r.render = rasterize(scene.gaussians, view.camera);
  r.distortion = distortion(r.render, view.image);
  r.rate_bits = rate.bits.total();
  const std::size_t n = model.anchors.size() + model.coupled.size();
  const double weight = n == 0 ? 0.0 : lambda / static_cast<double>(n);
  r.loss = r.distortion + weight * r.rate_bits;
  r.gaussians = scene.gaussians;
  if (grad) {
    const Image dimg = distortion_gradient(r.render, view.image);
    const RasterGradients rg = backprop_rasterize(scene.gaussians, view.camera, dimg);
    PrimitiveValues dvalues = PrimitiveValues::zeros_like(rate.values);
    backprop_derive_scene(model, rate.values, scene, rg.gaussians, *grad, dvalues);
    backprop_training_rate(model, noise, rate, weight, dvalues, *grad);
    r.screen_gradient = rg.screen_gradient;
  }
  return r;
}

void adam_update(SceneModel& model, const SceneModel& grad, OptimizerState& state, const LearningRates& lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-15;
  ++state.step;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  auto p = parameter_spans(model);
  auto g = parameter_spans(const_cast<SceneModel&>(grad));
  auto m = parameter_spans(state.m);
  auto v = parameter_spans(state.v);
  if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size())
    throw std::logic_error("adam_update: shape mismatch");
  for (std::size_t s = 0; s < p.size(); ++s) {
    const double rate = lr.for_group(p[s].group);
    if (rate == 0.0) continue;
    auto& ps = p[s].values;
    const auto& gs = g[s].values;
    auto& ms = m[s].values;
    auto& vs = v[s].values;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      ms[i] = b1 * ms[i] + (1.0 - b1) * gs[i];
      vs[i] = b2 * vs[i] + (1.0 - b2) * gs[i] * gs[i];
      ps[i] -= rate * (ms[i] / c1) / (std::sqrt(vs[i] / c2) + eps);
    }
  }
}

void DensityStats::reset(const SceneModel& model) {
  anchor_grad.assign(model.anchors.size(), 0.0);
  seen.assign(model.anchors.size(), 0);
  coupled_grad.assign(model.coupled.size(), 0.0);
  max_opacity.assign(model.anchors.size(), 0.0);
}

void DensityStats::accumulate(const SceneModel& model, const ObjectiveResult& r) {
  const std::size_t k = model.k();
  for (std::size_t a = 0; a < model.anchors.size(); ++a) {
    double sum = 0.0;
    bool visible = false;
    for (std::size_t c = a * k; c < (a + 1) * k; ++c) {
      const double g = c < r.screen_gradient.size() ? r.screen_gradient[c] : 0.0;
      sum += g;
      coupled_grad[c] += g;
      visible = visible || g > 0.0;
      max_opacity[a] = std::max(max_opacity[a], r.gaussians[c].opacity);
    }
    if (visible) {
      anchor_grad[a] += sum / static_cast<double>(k);
      ++seen[a];
    }
  }
}

namespace {

// Copies per-anchor rows of every anchor-indexed container following origin
// (old index, or the parent for spawned anchors with fresh = true).
struct AnchorRemap {
  std::size_t origin;
  bool fresh;
};

void remap_model(SceneModel& m, const std::vector<AnchorRemap>& map, bool zero_fresh,
                 const std::vector<Vec3>* new_locations) {
  const std::size_t k = m.k();
  std::vector<AnchorPrimitive> anchors;
  std::vector<CoupledPrimitive> coupled;
  anchors.reserve(map.size());
  coupled.reserve(map.size() * k);
  for (std::size_t n = 0; n < map.size(); ++n) {
    AnchorPrimitive a = m.anchors[map[n].origin];
    if (map[n].fresh && new_locations) a.location = (*new_locations)[n];
    if (map[n].fresh && zero_fresh) a = AnchorPrimitive{{0, 0, 0}, {0, 0, 0}, {0, 0, 0, 0}, {}};
    anchors.push_back(a);
    for (std::size_t j = 0; j < k; ++j) {
      CoupledPrimitive c = m.coupled[map[n].origin * k + j];
      if (map[n].fresh && zero_fresh) c.res_embedding = {};
      c.anchor_index = static_cast<std::uint32_t>(n);
      coupled.push_back(c);
    }
  }
  m.anchors = std::move(anchors);
  m.coupled = std::move(coupled);
}

Vec3 clamp_to(const Vec3& p, const Vec3& lo, const Vec3& hi) {
  return {std::clamp(p[0], lo[0], hi[0]), std::clamp(p[1], lo[1], hi[1]), std::clamp(p[2], lo[2], hi[2])};
}

}  // namespace

std::pair<std::size_t, std::size_t> anchor_density_control(SceneModel& model, const DensityStats& stats,
                                                           const TrainConfig& config, OptimizerState& state) {
  const std::size_t na = model.anchors.size();
  const std::size_t k = model.k();
  if (stats.anchor_grad.size() != na) throw std::invalid_argument("anchor_density_control: stale statistics");
  std::vector<AnchorRemap> map;
  std::vector<Vec3> locations;
  std::size_t removed = 0;
  for (std::size_t a = 0; a < na; ++a) {
    if (stats.max_opacity[a] < config.prune_opacity) {
      ++removed;
      continue;
    }
    map.push_back({a, false});
    locations.push_back(model.anchors[a].location);
  }
  std::size_t added = 0;
  const Camera any;
  for (std::size_t a = 0; a < na; ++a) {
    if (stats.max_opacity[a] < config.prune_opacity || stats.seen[a] == 0) continue;
    if (map.size() >= config.max_anchors) break;
    const double mean_grad = stats.anchor_grad[a] / stats.seen[a];
    if (mean_grad <= config.densify_grad_threshold) continue;
    std::size_t best = a * k;
    for (std::size_t c = a * k; c < (a + 1) * k; ++c)
      if (stats.coupled_grad[c] > stats.coupled_grad[best]) best = c;
    const auto gs = derive_gaussians(model, a, any);
    map.push_back({a, true});
    locations.push_back(clamp_to(gs[best - a * k].mean, model.context_grid.lo, model.context_grid.hi));
    ++added;
  }
  if (added == 0 && removed == 0) return {0, 0};
  remap_model(model, map, false, &locations);
  remap_model(state.m, map, true, nullptr);
  remap_model(state.v, map, true, nullptr);
  model.validate();
  return {added, removed};
}

namespace {

void check_finite(const SceneModel& values, const char* what) {
  SceneModel& g = const_cast<SceneModel&>(values);
  for (const auto& s : parameter_spans(g))
    for (double v : s.values)
      if (!std::isfinite(v))
        throw NumericError(std::string("non-finite ") + what + " in parameter group " + group_name(s.group));
}

}  // namespace

StepLog train_step(SceneModel& model, const TrainView& view, const TrainConfig& config, OptimizerState& state,
                   Rng& rng, DensityStats* stats) {
  const QuantizationNoise noise =
      config.quantization_noise ? QuantizationNoise::sample(model, rng) : QuantizationNoise::zero(model);
  check_finite(model, "value");
  SceneModel grad = zeros_like(model);
  const ObjectiveResult r = evaluate_objective(model, view, config.lambda, noise, &grad);
  if (!std::isfinite(r.loss)) throw NumericError("non-finite loss");
  check_finite(grad, "gradient");
  if (stats) stats->accumulate(model, r);
  adam_update(model, grad, state, config.lr);
  StepLog log;
  log.iteration = static_cast<int>(state.step);
  log.distortion = r.distortion;
  log.rate_bits = r.rate_bits;
  log.loss = r.loss;
  log.psnr = psnr(r.render, view.image);
  return log;
}

SceneModel initialize_model(std::span<const Vec3> points, const ModelConfig& config, Rng& rng) {
  if (points.empty()) throw std::invalid_argument("initialize_model: empty point cloud");
  Vec3 lo = points[0], hi = points[0];
  for (const auto& p : points)
    for (int a = 0; a < 3; ++a) {
      if (!std::isfinite(p[a])) throw DataError("initialize_model: non-finite point");
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  const double extent = std::max(norm(sub(hi, lo)), 1e-3);
  const double voxel = 0.01 * extent;
  Vec3 glo, ghi;
  for (int a = 0; a < 3; ++a) {
    glo[a] = lo[a] - 0.1 * extent;
    ghi[a] = hi[a] + 0.1 * extent;
  }
  std::map<std::array<std::int64_t, 3>, std::pair<Vec3, int>> cells;
  for (const auto& p : points) {
    std::array<std::int64_t, 3> key;
    for (int a = 0; a < 3; ++a) key[a] = static_cast<std::int64_t>(std::floor((p[a] - lo[a]) / voxel));
    auto& cell = cells[key];
    cell.first = add(cell.first, p);
    ++cell.second;
  }
  std::vector<Vec3> centers;
  for (const auto& [key, cell] : cells) centers.push_back(scale(cell.first, 1.0 / cell.second));

  SceneModel m = make_model(config, glo, ghi);
  init_networks(m, rng);
  for (std::size_t i = 0; i < centers.size(); ++i) {
    double nn = 0.1 * extent;
    if (centers.size() <= 5000)
      for (std::size_t j = 0; j < centers.size(); ++j)
        if (j != i) nn = std::min(nn, norm(sub(centers[i], centers[j])));
    const double s = std::max(0.5 * nn, voxel);
    AnchorPrimitive a;
    a.location = centers[i];
    a.log_scales = {std::log(s), std::log(s), std::log(s)};
    for (double& v : a.ref_embedding) v = 0.1 * rng.normal();
    std::vector<ResEmbedding> res(m.k());
    for (auto& r : res)
      for (double& v : r) v = 0.5 * rng.normal();
    add_anchor(m, a, res);
  }
  return m;
}

TrainResult train_static(std::span<const TrainView> views, std::span<const Vec3> points, const ModelConfig& model_config,
                         const TrainConfig& config, const ProgressFn& progress) {
  if (views.size() < 2) throw std::invalid_argument("train_static: need at least two training views");
  if (config.iterations <= 0) throw std::invalid_argument("train_static: iterations must be positive");
  Rng rng(config.seed);
  TrainResult out;
  out.model = initialize_model(points, model_config, rng);
  out.model.config.lambda = config.lambda;
  OptimizerState state = OptimizerState::for_model(out.model);
  DensityStats stats;
  stats.reset(out.model);
  std::vector<std::size_t> order(views.size());
  std::iota(order.begin(), order.end(), 0);
  const int densify_stop = static_cast<int>(config.densify_until * config.iterations);
  for (int it = 0; it < config.iterations; ++it) {
    const std::size_t slot = static_cast<std::size_t>(it) % views.size();
    if (slot == 0)
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    StepLog log = train_step(out.model, views[order[slot]], config, state, rng, &stats);
    log.iteration = it + 1;
    out.log.push_back(log);
    if (progress) progress(log);
    if (config.densify_interval > 0 && (it + 1) % config.densify_interval == 0 && it + 1 <= densify_stop) {
      anchor_density_control(out.model, stats, config, state);
      stats.reset(out.model);
    }
  }
  return out;
}

Image render_model(const SceneModel& model, const Camera& camera) {
  const DerivedScene s = derive_scene(model, PrimitiveValues::from_model(model), camera);
  return rasterize(s.gaussians, camera);
}

EvalMetrics evaluate_views(const SceneModel& model, std::span<const TrainView> views) {
  EvalMetrics m;
  if (views.empty()) return m;
  for (const auto& v : views) {
    const Image img = render_model(model, v.camera);
    m.psnr += psnr(img, v.image);
    m.ssim += ssim(img, v.image);
  }
  m.psnr /= static_cast<double>(views.size());
  m.ssim /= static_cast<double>(views.size());
  return m;
}

void write_metrics_csv(const std::string& path, std::span<const StepLog> log) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << "iter,D,R_bits,loss,PSNR\n";
  f.precision(10);
  for (const auto& l : log) f << l.iteration << ',' << l.distortion << ',' << l.rate_bits << ',' << l.loss << ',' << l.psnr << '\n';
}

}  // namespace cgs
