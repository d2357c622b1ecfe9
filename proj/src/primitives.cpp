#include "cgs/primitives.hpp"

#include <algorithm>
#include <stdexcept>

namespace cgs {

Mat3 densify_covariance(const FactoredCovariance& cov) {
  for (double s : cov.scales)
    if (!(s > 0.0)) throw std::invalid_argument("densify_covariance: scales must be positive");
  const Mat3 r = quat_to_matrix(quat_normalize(cov.rotation));
  Mat3 out{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += r[i * 3 + k] * cov.scales[k] * cov.scales[k] * r[j * 3 + k];
      out[i * 3 + j] = s;
    }
  // exact symmetry
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j) out[j * 3 + i] = out[i * 3 + j];
  return out;
}

FactoredCovariance AnchorPrimitive::covariance() const {
  return {{std::exp(log_scales[0]), std::exp(log_scales[1]), std::exp(log_scales[2])},
          quat_normalize(rotation)};
}

std::array<double, kCovParams> AnchorPrimitive::cov_params() const {
  return {log_scales[0], log_scales[1], log_scales[2], rotation[0], rotation[1], rotation[2], rotation[3]};
}

void AnchorPrimitive::set_cov_params(const std::array<double, kCovParams>& p) {
  log_scales = {p[0], p[1], p[2]};
  rotation = {p[3], p[4], p[5], p[6]};
}

void SceneModel::validate() const {
  if (config.coupled_per_anchor == 0) throw std::logic_error("SceneModel: K must be positive");
  if (coupled.size() != anchors.size() * k())
    throw std::logic_error("SceneModel: |coupled| != K * |anchors|");
  for (std::size_t i = 0; i < coupled.size(); ++i)
    if (coupled[i].anchor_index != i / k()) throw std::logic_error("SceneModel: coupled linkage broken");
  for (const auto& a : anchors)
    for (double v : a.location)
      if (!std::isfinite(v)) throw std::logic_error("SceneModel: non-finite anchor location");
}

SceneModel make_model(const ModelConfig& config, const Vec3& lo, const Vec3& hi) {
  SceneModel m;
  m.config = config;
  m.context_grid = FeatureGrid(config.context_grid.make_levels(), lo, hi);
  m.prior_grid = FeatureGrid(config.prior_grid.make_levels(), lo, hi);
  const std::size_t zeta = m.zeta_dim();
  const std::size_t prior = m.prior_grid.output_dim();
  const std::size_t hyper = config.hyper_dim;
  m.prediction.translation = Affine(zeta, 3);
  m.prediction.scaling = Affine(zeta, 3);
  m.prediction.rotation = Affine(zeta, 4);
  m.prediction.color = Affine(kViewDim + zeta, 3);
  m.prediction.opacity = Affine(kViewDim + zeta, 1);
  m.entropy.step_head = Affine(prior, 3);
  m.entropy.embedding_head = Affine(hyper + prior, 2 * kRefDim);
  m.entropy.coupled_head = Affine(hyper + prior, 2 * kResDim);
  m.entropy.covariance_head = Affine(prior, 2 * kCovParams);
  m.entropy.anchor_hyper = Affine(kRefDim, hyper);
  m.entropy.coupled_hyper = Affine(kResDim, hyper);
  m.entropy.anchor_bottleneck = FactorizedBottleneck(hyper, config.bottleneck_support);
  m.entropy.coupled_bottleneck = FactorizedBottleneck(hyper, config.bottleneck_support);
  return m;
}

namespace {
double inverse_softplus(double y) { return std::log(std::expm1(y)); }
}  // namespace

void init_networks(SceneModel& m, Rng& rng) {
  auto& p = m.prediction;
  p.translation.init_uniform(rng, 0.1);
  p.scaling.init_uniform(rng, 0.1);
  p.rotation.init_uniform(rng, 0.1);
  p.color.init_uniform(rng, 0.5);
  p.opacity.init_uniform(rng, 0.1);

  auto& e = m.entropy;
  e.step_head.init_uniform(rng, 0.01);
  for (auto& b : e.step_head.bias) b = inverse_softplus(0.01);
  e.embedding_head.init_uniform(rng, 0.01);
  e.coupled_head.init_uniform(rng, 0.01);
  e.covariance_head.init_uniform(rng, 0.01);
  for (std::size_t i = 0; i < kRefDim; ++i) e.embedding_head.bias[kRefDim + i] = inverse_softplus(0.1);
  for (std::size_t i = 0; i < kResDim; ++i) e.coupled_head.bias[kResDim + i] = inverse_softplus(0.1);
  for (std::size_t i = 0; i < kCovParams; ++i)
    e.covariance_head.bias[kCovParams + i] = inverse_softplus(0.1);
  e.anchor_hyper.init_uniform(rng, 0.1);
  e.coupled_hyper.init_uniform(rng, 0.1);
}

void add_anchor(SceneModel& model, const AnchorPrimitive& anchor, std::span<const ResEmbedding> coupled) {
  if (coupled.size() != model.k()) throw std::invalid_argument("add_anchor: need exactly K coupled");
  const auto idx = static_cast<std::uint32_t>(model.anchors.size());
  model.anchors.push_back(anchor);
  for (const auto& e : coupled) model.coupled.push_back({e, idx});
}

void retain_anchors(SceneModel& model, const std::vector<bool>& keep) {
  if (keep.size() != model.anchors.size()) throw std::invalid_argument("retain_anchors: size mismatch");
  const std::size_t k = model.k();
  std::vector<AnchorPrimitive> anchors;
  std::vector<CoupledPrimitive> coupled;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (!keep[i]) continue;
    const auto idx = static_cast<std::uint32_t>(anchors.size());
    anchors.push_back(model.anchors[i]);
    for (std::size_t j = 0; j < k; ++j) {
      CoupledPrimitive c = model.coupled[i * k + j];
      c.anchor_index = idx;
      coupled.push_back(c);
    }
  }
  model.anchors = std::move(anchors);
  model.coupled = std::move(coupled);
}

std::vector<CoupledPrimitive> group_coupled(const SceneModel& model, std::size_t anchor_index) {
  if (anchor_index >= model.anchors.size()) throw std::out_of_range("group_coupled: anchor index");
  const std::size_t k = model.k();
  const auto first = model.coupled.begin() + static_cast<std::ptrdiff_t>(anchor_index * k);
  return {first, first + static_cast<std::ptrdiff_t>(k)};
}

SceneModel zeros_like(const SceneModel& model) {
  SceneModel g = model;
  for (auto& s : parameter_spans(g)) std::fill(s.values.begin(), s.values.end(), 0.0);
  return g;
}

const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kLocation: return "location";
    case ParamGroup::kCovariance: return "covariance";
    case ParamGroup::kAnchorEmbedding: return "anchor_embedding";
    case ParamGroup::kCoupledEmbedding: return "coupled_embedding";
    case ParamGroup::kPredictionNet: return "prediction_net";
    case ParamGroup::kEntropyNet: return "entropy_net";
    case ParamGroup::kContextGrid: return "context_grid";
    case ParamGroup::kPriorGrid: return "prior_grid";
  }
  return "?";
}

namespace {

void push_affine(std::vector<ParamSpan>& out, ParamGroup g, Affine& a) {
  out.push_back({g, a.weight});
  out.push_back({g, a.bias});
}

}  // namespace

std::vector<ParamSpan> parameter_spans(SceneModel& m) {
  std::vector<ParamSpan> out;
  for (auto& a : m.anchors) {
    out.push_back({ParamGroup::kLocation, a.location});
    out.push_back({ParamGroup::kCovariance, a.log_scales});
    out.push_back({ParamGroup::kCovariance, a.rotation});
    out.push_back({ParamGroup::kAnchorEmbedding, a.ref_embedding});
  }
  for (auto& c : m.coupled) out.push_back({ParamGroup::kCoupledEmbedding, c.res_embedding});
  for (auto& t : m.context_grid.tables) out.push_back({ParamGroup::kContextGrid, t});
  for (auto& t : m.prior_grid.tables) out.push_back({ParamGroup::kPriorGrid, t});
  auto& p = m.prediction;
  for (Affine* a : {&p.translation, &p.scaling, &p.rotation, &p.color, &p.opacity})
    push_affine(out, ParamGroup::kPredictionNet, *a);
  auto& e = m.entropy;
  for (Affine* a : {&e.step_head, &e.embedding_head, &e.coupled_head, &e.covariance_head,
                    &e.anchor_hyper, &e.coupled_hyper})
    push_affine(out, ParamGroup::kEntropyNet, *a);
  out.push_back({ParamGroup::kEntropyNet, e.anchor_bottleneck.logits});
  out.push_back({ParamGroup::kEntropyNet, e.coupled_bottleneck.logits});
  return out;
}

}  // namespace cgs
