#include "cgs/spatial_prediction.hpp"

#include <stdexcept>

namespace cgs {

Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double focal, int width, int height) {
  Vec3 f = sub(target, eye);
  f = scale(f, 1.0 / norm(f));
  // camera axes: x right, y down, z forward
  Vec3 r{f[1] * up[2] - f[2] * up[1], f[2] * up[0] - f[0] * up[2], f[0] * up[1] - f[1] * up[0]};
  r = scale(r, 1.0 / norm(r));
  const Vec3 d{f[1] * r[2] - f[2] * r[1], f[2] * r[0] - f[0] * r[2], f[0] * r[1] - f[1] * r[0]};
  Camera cam;
  cam.rotation = {r[0], r[1], r[2], d[0], d[1], d[2], f[0], f[1], f[2]};
  cam.translation = scale(matvec(cam.rotation, eye), -1.0);
  cam.fx = cam.fy = focal;
  cam.cx = 0.5 * (width - 1);
  cam.cy = 0.5 * (height - 1);
  cam.width = width;
  cam.height = height;
  return cam;
}

ViewEmbedding make_view_embedding(const Vec3& camera_center, const Vec3& location) {
  const Vec3 d = sub(location, camera_center);
  const double r = norm(d);
  if (!(r > 0.0)) return {};
  return {scale(d, 1.0 / r), 1.0 / r};
}

std::vector<double> assemble_prediction_features(std::span<const double> ref_embedding,
                                                 std::span<const double> res_embedding,
                                                 std::span<const double> context) {
  if (ref_embedding.size() != kRefDim || res_embedding.size() != kResDim)
    throw std::invalid_argument("assemble_prediction_features: embedding dimension mismatch");
  std::vector<double> zeta;
  zeta.reserve(kRefDim + kResDim + context.size());
  zeta.insert(zeta.end(), ref_embedding.begin(), ref_embedding.end());
  zeta.insert(zeta.end(), res_embedding.begin(), res_embedding.end());
  zeta.insert(zeta.end(), context.begin(), context.end());
  return zeta;
}

std::vector<double> assemble_prediction_features(const AnchorPrimitive& anchor,
                                                 const CoupledPrimitive& coupled,
                                                 const FeatureGrid& context_grid) {
  const auto ctx = query(context_grid, anchor.location);
  return assemble_prediction_features(anchor.ref_embedding, coupled.res_embedding, ctx);
}

namespace {

AffineOffsets offsets_from_raw(std::span<const double> t, std::span<const double> s,
                               std::span<const double> r) {
  AffineOffsets nu;
  for (int i = 0; i < 3; ++i) {
    nu.translation[i] = t[i];
    nu.scaling[i] = std::exp(s[i]);
  }
  nu.rotation = quat_normalize(Quat{1.0 + r[0], r[1], r[2], r[3]});
  return nu;
}

std::vector<double> view_zeta(const ViewEmbedding& view, std::span<const double> zeta) {
  std::vector<double> x(kViewDim + zeta.size());
  const auto v = view.values();
  std::copy(v.begin(), v.end(), x.begin());
  std::copy(zeta.begin(), zeta.end(), x.begin() + kViewDim);
  return x;
}

}  // namespace

AffineOffsets predict_affine_offsets(std::span<const double> zeta, const PredictionNetworks& nets) {
  if (zeta.size() != nets.translation.in)
    throw std::invalid_argument("predict_affine_offsets: feature dimension mismatch");
  const auto t = nets.translation.forward(zeta);
  const auto s = nets.scaling.forward(zeta);
  const auto r = nets.rotation.forward(zeta);
  return offsets_from_raw(t, s, r);
}

Gaussian3D apply_affine(const Vec3& location, const FactoredCovariance& cov, const AffineOffsets& nu) {
  Gaussian3D g;
  g.mean = add(location, nu.translation);
  for (int i = 0; i < 3; ++i) g.covariance.scales[i] = nu.scaling[i] * cov.scales[i];
  g.covariance.rotation = quat_mul(nu.rotation, cov.rotation);
  return g;
}

Appearance predict_appearance(std::span<const double> zeta, const ViewEmbedding& view,
                              const PredictionNetworks& nets) {
  const auto x = view_zeta(view, zeta);
  const auto c = nets.color.forward(x);
  const auto a = nets.opacity.forward(x);
  return {{sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])}, sigmoid(a[0])};
}

std::vector<Gaussian3D> derive_gaussians(const SceneModel& model, std::size_t anchor_index,
                                         const Camera& camera) {
  if (anchor_index >= model.anchors.size()) throw std::out_of_range("derive_gaussians: anchor index");
  const auto& anchor = model.anchors[anchor_index];
  const auto ctx = query(model.context_grid, anchor.location);
  const auto view = make_view_embedding(camera.center(), anchor.location);
  const auto cov = anchor.covariance();
  std::vector<Gaussian3D> out;
  for (const auto& c : group_coupled(model, anchor_index)) {
    const auto zeta = assemble_prediction_features(anchor.ref_embedding, c.res_embedding, ctx);
    Gaussian3D g = apply_affine(anchor.location, cov, predict_affine_offsets(zeta, model.prediction));
    const auto app = predict_appearance(zeta, view, model.prediction);
    g.color = app.color;
    g.opacity = app.opacity;
    out.push_back(g);
  }
  return out;
}

PrimitiveValues PrimitiveValues::from_model(const SceneModel& model) {
  PrimitiveValues v;
  for (const auto& a : model.anchors) {
    v.ref.push_back(a.ref_embedding);
    v.cov.push_back(a.cov_params());
  }
  for (const auto& c : model.coupled) v.res.push_back(c.res_embedding);
  return v;
}

PrimitiveValues PrimitiveValues::zeros_like(const PrimitiveValues& v) {
  PrimitiveValues z;
  z.ref.assign(v.ref.size(), RefEmbedding{});
  z.cov.assign(v.cov.size(), std::array<double, kCovParams>{});
  z.res.assign(v.res.size(), ResEmbedding{});
  return z;
}

namespace {

FactoredCovariance covariance_from_params(const std::array<double, kCovParams>& p) {
  return {{std::exp(p[0]), std::exp(p[1]), std::exp(p[2])}, quat_normalize(Quat{p[3], p[4], p[5], p[6]})};
}

}  // namespace

DerivedScene derive_scene(const SceneModel& model, const PrimitiveValues& values, const Camera& camera) {
  const std::size_t k = model.k();
  const std::size_t na = model.anchors.size();
  DerivedScene s;
  s.gaussians.resize(model.coupled.size());
  s.context.resize(na);
  s.views.resize(na);
  s.zeta.resize(model.coupled.size());
  s.geometry_pre.resize(model.coupled.size());
  s.appearance_pre.resize(model.coupled.size());
  const Vec3 center = camera.center();
  const auto& nets = model.prediction;
  for (std::size_t a = 0; a < na; ++a) {
    const auto& anchor = model.anchors[a];
    s.context[a] = query(model.context_grid, anchor.location);
    s.views[a] = make_view_embedding(center, anchor.location);
    const FactoredCovariance cov = covariance_from_params(values.cov[a]);
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t c = a * k + j;
      s.zeta[c] = assemble_prediction_features(values.ref[a], values.res[c], s.context[a]);
      const auto& zeta = s.zeta[c];
      double t[3], sc[3], r[4];
      nets.translation.forward(zeta, t);
      nets.scaling.forward(zeta, sc);
      nets.rotation.forward(zeta, r);
      for (int i = 0; i < 3; ++i) s.geometry_pre[c][i] = sc[i];
      for (int i = 0; i < 4; ++i) s.geometry_pre[c][3 + i] = r[i];
      Gaussian3D g = apply_affine(anchor.location, cov, offsets_from_raw(t, sc, r));
      const auto x = view_zeta(s.views[a], zeta);
      double col[3], op[1];
      nets.color.forward(x, col);
      nets.opacity.forward(x, op);
      for (int i = 0; i < 3; ++i) {
        s.appearance_pre[c][i] = col[i];
        g.color[i] = sigmoid(col[i]);
      }
      s.appearance_pre[c][3] = op[0];
      g.opacity = sigmoid(op[0]);
      s.gaussians[c] = g;
    }
  }
  return s;
}

void backprop_derive_scene(const SceneModel& model, const PrimitiveValues& values,
                           const DerivedScene& scene, std::span<const GaussianGrad> dgaussians,
                           SceneModel& grad, PrimitiveValues& dvalues) {
  const std::size_t k = model.k();
  const std::size_t na = model.anchors.size();
  const std::size_t zdim = model.zeta_dim();
  const std::size_t cdim = model.context_grid.output_dim();
  const auto& nets = model.prediction;
  auto& gnets = grad.prediction;
  using J8 = Jet<8>;

  std::vector<double> dzeta(zdim), dx(kViewDim + zdim), dctx(cdim);
  for (std::size_t a = 0; a < na; ++a) {
    auto& gloc = grad.anchors[a].location;
    std::fill(dctx.begin(), dctx.end(), 0.0);
    std::array<double, kViewDim> dview{};
    const auto& p = values.cov[a];
    std::array<double, kCovParams> dcov{};
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t c = a * k + j;
      const GaussianGrad& dg = dgaussians[c];
      const auto& g = scene.gaussians[c];
      const auto& zeta = scene.zeta[c];
      const auto& pre = scene.geometry_pre[c];

      std::fill(dzeta.begin(), dzeta.end(), 0.0);
      // translation
      for (int i = 0; i < 3; ++i) gloc[i] += dg.mean[i];
      nets.translation.backward(zeta, dg.mean, gnets.translation, dzeta);
      // scaling: scale_i = exp(pre_i) * exp(log_s_i)
      double dsc[3];
      for (int i = 0; i < 3; ++i) {
        const double v = dg.scales[i] * g.covariance.scales[i];
        dsc[i] = v;
        dcov[i] += v;
      }
      nets.scaling.backward(zeta, dsc, gnets.scaling, dzeta);
      // rotation = normalize(identity + r) o normalize(q)
      if (dg.rotation[0] != 0.0 || dg.rotation[1] != 0.0 || dg.rotation[2] != 0.0 || dg.rotation[3] != 0.0) {
        std::array<J8, 4> rq{J8(1.0 + pre[3], 0), J8(pre[4], 1), J8(pre[5], 2), J8(pre[6], 3)};
        std::array<J8, 4> aq{J8(p[3], 4), J8(p[4], 5), J8(p[5], 6), J8(p[6], 7)};
        const auto out = quat_mul(quat_normalize(rq), quat_normalize(aq));
        double dr[4] = {0, 0, 0, 0};
        for (int o = 0; o < 4; ++o) {
          for (int i = 0; i < 4; ++i) {
            dr[i] += dg.rotation[o] * out[o].v[i];
            dcov[3 + i] += dg.rotation[o] * out[o].v[4 + i];
          }
        }
        nets.rotation.backward(zeta, dr, gnets.rotation, dzeta);
      }
      // appearance
      const auto x = view_zeta(scene.views[a], zeta);
      double dcol[3];
      for (int i = 0; i < 3; ++i) dcol[i] = dg.color[i] * g.color[i] * (1.0 - g.color[i]);
      const double dop[1] = {dg.opacity * g.opacity * (1.0 - g.opacity)};
      std::fill(dx.begin(), dx.end(), 0.0);
      nets.color.backward(x, dcol, gnets.color, dx);
      nets.opacity.backward(x, dop, gnets.opacity, dx);
      for (std::size_t i = 0; i < kViewDim; ++i) dview[i] += dx[i];
      for (std::size_t i = 0; i < zdim; ++i) dzeta[i] += dx[kViewDim + i];
      // split zeta
      for (std::size_t i = 0; i < kRefDim; ++i) dvalues.ref[a][i] += dzeta[i];
      for (std::size_t i = 0; i < kResDim; ++i) dvalues.res[c][i] += dzeta[kRefDim + i];
      for (std::size_t i = 0; i < cdim; ++i) dctx[i] += dzeta[kRefDim + kResDim + i];
    }
    for (std::size_t i = 0; i < kCovParams; ++i) dvalues.cov[a][i] += dcov[i];

    const Vec3& loc = model.anchors[a].location;
    backprop_query(model.context_grid, loc, dctx, grad.context_grid);
    const Vec3 gp = query_position_gradient(model.context_grid, loc, dctx);
    for (int i = 0; i < 3; ++i) gloc[i] += gp[i];

    const ViewEmbedding& v = scene.views[a];
    if (v.inverse_distance > 0.0) {
      const double r = 1.0 / v.inverse_distance;
      const Vec3& d = v.direction;
      const double proj = d[0] * dview[0] + d[1] * dview[1] + d[2] * dview[2];
      for (int i = 0; i < 3; ++i)
        gloc[i] += (dview[i] - d[i] * proj) / r - dview[3] * d[i] / (r * r);
    }
  }
}

}  // namespace cgs
