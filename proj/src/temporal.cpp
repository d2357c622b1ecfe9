#include "cgs/temporal.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "cgs/entropy_model.hpp"
#include "cgs/jet.hpp"

namespace cgs {

std::size_t MotionMask::count() const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

MotionMask motion_mask(const Image& prev, const Image& curr, double diff_threshold, int dilation_radius) {
  if (prev.width != curr.width || prev.height != curr.height)
    throw std::invalid_argument("motion_mask: frame size mismatch");
  if (dilation_radius < 0) throw std::invalid_argument("motion_mask: negative dilation radius");
  const int w = prev.width, h = prev.height;
  MotionMask raw(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double d = 0.0;
      for (int c = 0; c < 3; ++c) d = std::max(d, std::abs(curr.at(x, y, c) - prev.at(x, y, c)));
      raw.at(x, y) = d > diff_threshold ? 1 : 0;
    }
  if (dilation_radius == 0) return raw;
  const int r = dilation_radius;
  MotionMask rows(w, h), out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::uint8_t v = 0;
      for (int i = std::max(0, x - r); i <= std::min(w - 1, x + r) && !v; ++i) v = raw.at(i, y);
      rows.at(x, y) = v;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::uint8_t v = 0;
      for (int j = std::max(0, y - r); j <= std::min(h - 1, y + r) && !v; ++j) v = rows.at(x, j);
      out.at(x, y) = v;
    }
  return out;
}

std::vector<MotionMask> compute_motion_masks(std::span<const Image> prev, std::span<const Image> curr,
                                             double diff_threshold, int dilation_radius) {
  if (prev.size() != curr.size()) throw std::invalid_argument("compute_motion_masks: view count mismatch");
  std::vector<MotionMask> out;
  for (std::size_t v = 0; v < prev.size(); ++v)
    out.push_back(motion_mask(prev[v], curr[v], diff_threshold, dilation_radius));
  return out;
}

int view_motion_confidence(std::span<const Gaussian3D> gaussians, const MotionMask& mask, const Camera& camera) {
  if (mask.width != camera.width || mask.height != camera.height)
    throw std::invalid_argument("view_motion_confidence: mask does not match the camera");
  for (const auto& g : gaussians) {
    const auto p = project_gaussian(g, camera);
    if (!p.visible) continue;
    const double rx = 3.0 * std::sqrt(p.cov2d[0]);
    const double ry = 3.0 * std::sqrt(p.cov2d[2]);
    const double fx0 = std::max(0.0, std::ceil(p.u - rx));
    const double fx1 = std::min(camera.width - 1.0, std::floor(p.u + rx));
    const double fy0 = std::max(0.0, std::ceil(p.v - ry));
    const double fy1 = std::min(camera.height - 1.0, std::floor(p.v + ry));
    if (!(fx0 <= fx1) || !(fy0 <= fy1)) continue;
    for (int y = static_cast<int>(fy0); y <= static_cast<int>(fy1); ++y)
      for (int x = static_cast<int>(fx0); x <= static_cast<int>(fx1); ++x)
        if (mask.at(x, y)) return 1;
  }
  return 0;
}

void TemporalThresholds::validate() const {
  if (!(creation > static_to_dynamic))
    throw std::invalid_argument("temporal thresholds: creation threshold must exceed the static-to-dynamic one");
}

std::size_t TemporalState::dynamic_count() const {
  return static_cast<std::size_t>(std::count(dynamic.begin(), dynamic.end(), std::uint8_t{1}));
}

void TemporalState::reset_accumulators() {
  std::fill(grad_accum.begin(), grad_accum.end(), 0.0);
  std::fill(significance_accum.begin(), significance_accum.end(), 0.0);
}

TemporalState disentangle(std::span<const Gaussian3D> gaussians, std::size_t k, std::span<const MotionMask> masks,
                          std::span<const Camera> cameras, double tau_m) {
  if (masks.empty() || masks.size() != cameras.size())
    throw std::invalid_argument("disentangle: need one mask per camera and at least one view");
  if (k == 0 || gaussians.size() % k != 0) throw std::invalid_argument("disentangle: gaussians not grouped by K");
  const std::size_t na = gaussians.size() / k;
  TemporalState s;
  s.dynamic.assign(na, 0);
  s.grad_accum.assign(na, 0.0);
  s.significance_accum.assign(na, 0.0);
  s.motion_confidence.assign(na, 0.0);
  for (std::size_t a = 0; a < na; ++a) {
    const auto group = gaussians.subspan(a * k, k);
    int hits = 0;
    for (std::size_t v = 0; v < masks.size(); ++v) hits += view_motion_confidence(group, masks[v], cameras[v]);
    s.motion_confidence[a] = static_cast<double>(hits) / static_cast<double>(masks.size());
    s.dynamic[a] = s.motion_confidence[a] >= tau_m ? 1 : 0;
  }
  return s;
}

std::vector<std::span<double>> TemporalResidues::parameters() {
  std::vector<std::span<double>> out;
  for (auto* g : {&motion, &compensation})
    for (auto& t : g->tables) out.emplace_back(t);
  for (Affine* a : {&translation, &scaling, &rotation, &color_dynamic, &opacity_dynamic, &color_static}) {
    out.emplace_back(a->weight);
    out.emplace_back(a->bias);
  }
  return out;
}

std::vector<bool> TemporalResidues::grid_mask() const {
  std::vector<bool> out(motion.tables.size() + compensation.tables.size(), true);
  out.resize(out.size() + 12, false);
  return out;
}

TemporalResidues make_residues(const GridConfig& motion, const GridConfig& compensation, const Vec3& lo,
                               const Vec3& hi) {
  TemporalResidues r;
  r.motion = FeatureGrid(motion.make_levels(), lo, hi);
  r.compensation = FeatureGrid(compensation.make_levels(), lo, hi);
  const std::size_t z = r.zeta_dim();
  r.translation = Affine(z, 3);
  r.scaling = Affine(z, 3);
  r.rotation = Affine(z, 4);
  r.color_dynamic = Affine(kViewDim + z, 3);
  r.opacity_dynamic = Affine(kViewDim + z, 1);
  r.color_static = Affine(kViewDim + r.compensation.output_dim(), 3);
  return r;
}

TemporalResidues zeros_like(const TemporalResidues& r) {
  TemporalResidues z = r;
  for (auto s : z.parameters()) std::fill(s.begin(), s.end(), 0.0);
  return z;
}

TemporalResidues quantize_residues(const TemporalResidues& r, double grid_step) {
  TemporalResidues q = r;
  quantize_grid(q.motion, grid_step);
  quantize_grid(q.compensation, grid_step);
  for (Affine* a : {&q.translation, &q.scaling, &q.rotation, &q.color_dynamic, &q.opacity_dynamic, &q.color_static})
    round_affine_to_half(*a);
  return q;
}

std::vector<double> dynamic_features(const ResEmbedding& res, const TemporalResidues& r, const Vec3& position) {
  std::vector<double> z(r.zeta_dim());
  std::copy(res.begin(), res.end(), z.begin());
  query(r.motion, position, std::span<double>(z).subspan(kResDim));
  return z;
}

Deformation predict_deformation(std::span<const double> zeta_d, const TemporalResidues& r) {
  if (zeta_d.size() != r.zeta_dim()) throw std::invalid_argument("predict_deformation: feature dimension mismatch");
  const auto t = r.translation.forward(zeta_d);
  const auto s = r.scaling.forward(zeta_d);
  const auto q = r.rotation.forward(zeta_d);
  Deformation psi;
  psi.translation = {t[0], t[1], t[2]};
  psi.scaling = {std::exp(s[0]), std::exp(s[1]), std::exp(s[2])};
  psi.rotation = quat_normalize(Quat{1.0 + q[0], q[1], q[2], q[3]});
  return psi;
}

namespace {

std::vector<double> view_features(const ViewEmbedding& view, std::span<const double> f) {
  std::vector<double> x(kViewDim + f.size());
  const auto v = view.values();
  std::copy(v.begin(), v.end(), x.begin());
  std::copy(f.begin(), f.end(), x.begin() + kViewDim);
  return x;
}

constexpr double kOpacityFloor = 1e-4;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }
double clamp_opacity(double v) { return std::clamp(v, kOpacityFloor, 1.0 - kOpacityFloor); }

}  // namespace

Gaussian3D deform_dynamic(const Gaussian3D& g, const Deformation& psi, std::span<const double> zeta_d,
                          const ViewEmbedding& view, const TemporalResidues& r) {
  Gaussian3D out = apply_affine(g.mean, g.covariance, psi);
  const auto x = view_features(view, zeta_d);
  const auto c = r.color_dynamic.forward(x);
  const auto a = r.opacity_dynamic.forward(x);
  for (int i = 0; i < 3; ++i) out.color[i] = clamp01(g.color[i] + c[i]);
  out.opacity = clamp_opacity(g.opacity + a[0]);
  return out;
}

Gaussian3D compensate_static(const Gaussian3D& g, std::span<const double> rho_s, const ViewEmbedding& view,
                             const TemporalResidues& r) {
  Gaussian3D out = g;
  const auto c = r.color_static.forward(view_features(view, rho_s));
  for (int i = 0; i < 3; ++i) out.color[i] = clamp01(g.color[i] + c[i]);
  return out;
}

double deformation_significance(const Deformation& psi) {
  double t = 0.0, s = 0.0;
  for (int i = 0; i < 3; ++i) {
    t += std::abs(psi.translation[i]);
    s += std::abs(std::log(psi.scaling[i]));
  }
  Quat q = psi.rotation;
  if (q[0] < 0.0)
    for (double& v : q) v = -v;
  const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  const double cosine = n > 0.0 ? q[0] / n : 1.0;
  return t + s + (1.0 - cosine);
}

ControlResult adaptive_control(TemporalState& state, const TemporalThresholds& thresholds, std::size_t max_created,
                               const std::function<Vec3(std::size_t)>& spawn_location) {
  thresholds.validate();
  const std::size_t n = state.dynamic.size();
  if (state.grad_accum.size() != n || state.significance_accum.size() != n)
    throw std::invalid_argument("adaptive_control: accumulator size mismatch");
  ControlResult r;
  std::vector<std::uint8_t> converted(n, 0);
  for (std::size_t a = 0; a < n; ++a)
    if (!state.dynamic[a] && state.grad_accum[a] > thresholds.static_to_dynamic) {
      state.dynamic[a] = 1;
      converted[a] = 1;
      ++r.to_dynamic;
    }
  for (std::size_t a = 0; a < n; ++a)
    if (state.dynamic[a] && !converted[a] && state.significance_accum[a] < thresholds.dynamic_to_static) {
      state.dynamic[a] = 0;
      converted[a] = 1;
      ++r.to_static;
    }
  for (std::size_t a = 0; a < n && r.created.size() < max_created; ++a)
    if (state.grad_accum[a] > thresholds.creation) r.created.push_back({a, spawn_location(a)});
  for (std::size_t i = 0; i < r.created.size(); ++i) {
    state.dynamic.push_back(1);
    state.grad_accum.push_back(0.0);
    state.significance_accum.push_back(0.0);
    if (state.motion_confidence.size() == n + i) state.motion_confidence.push_back(0.0);
  }
  return r;
}

namespace {

Gaussian3D geometry_only(const Gaussian3D& g) {
  Gaussian3D out;
  out.mean = g.mean;
  out.covariance = g.covariance;
  return out;
}

std::vector<Gaussian3D> anchor_geometry(const SceneModel& model, std::size_t first_anchor) {
  std::vector<Gaussian3D> out;
  const Camera any;
  for (std::size_t a = first_anchor; a < model.anchors.size(); ++a)
    for (const auto& g : derive_gaussians(model, a, any)) out.push_back(geometry_only(g));
  return out;
}

Gaussian3D deformed_geometry(const Gaussian3D& ref, const ResEmbedding& res, const TemporalResidues& r) {
  return geometry_only(apply_affine(ref.mean, ref.covariance, predict_deformation(dynamic_features(res, r, ref.mean), r)));
}

}  // namespace

FrameState intra_state(const SceneModel& decoded, std::uint32_t frame_index) {
  FrameState s;
  s.frame_index = frame_index;
  s.model = decoded;
  s.geometry = anchor_geometry(decoded, 0);
  s.reference = s.geometry;
  s.dynamic.assign(decoded.anchors.size(), 0);
  return s;
}

std::vector<Gaussian3D> frame_gaussians(const FrameState& s, const Camera& camera) {
  std::vector<Gaussian3D> base = derive_scene(s.model, PrimitiveValues::from_model(s.model), camera).gaussians;
  if (!s.predicted) return base;
  const std::size_t k = s.model.k();
  const Vec3 eye = camera.center();
  for (std::size_t c = 0; c < base.size(); ++c) {
    const Gaussian3D& ref = s.reference[c];
    Gaussian3D g = ref;
    g.color = base[c].color;
    g.opacity = base[c].opacity;
    const ViewEmbedding view = make_view_embedding(eye, ref.mean);
    if (s.dynamic[c / k]) {
      const auto z = dynamic_features(s.model.coupled[c].res_embedding, s.residues, ref.mean);
      base[c] = deform_dynamic(g, predict_deformation(z, s.residues), z, view, s.residues);
    } else {
      base[c] = compensate_static(g, query(s.residues.compensation, ref.mean), view, s.residues);
    }
  }
  return base;
}

Image render_frame(const FrameState& s, const Camera& camera) { return rasterize(frame_gaussians(s, camera), camera); }

FrameState advance_state(const FrameState& prev, const TemporalResidues& residues, std::vector<std::uint8_t> dynamic,
                         std::span<const AnchorPrimitive> created_anchors,
                         std::span<const std::vector<ResEmbedding>> created_res) {
  if (created_anchors.size() != created_res.size()) throw std::invalid_argument("advance_state: created size mismatch");
  FrameState s;
  s.frame_index = prev.frame_index + 1;
  s.model = prev.model;
  s.predicted = true;
  s.residues = residues;
  const std::size_t first = s.model.anchors.size();
  for (std::size_t i = 0; i < created_anchors.size(); ++i) add_anchor(s.model, created_anchors[i], created_res[i]);
  if (dynamic.size() != s.model.anchors.size()) throw DataError("partition size does not match the anchor count");
  s.dynamic = std::move(dynamic);
  s.reference = prev.geometry;
  for (const auto& g : anchor_geometry(s.model, first)) s.reference.push_back(g);
  const std::size_t k = s.model.k();
  s.geometry.resize(s.reference.size());
  for (std::size_t c = 0; c < s.reference.size(); ++c)
    s.geometry[c] = s.dynamic[c / k] ? deformed_geometry(s.reference[c], s.model.coupled[c].res_embedding, residues)
                                     : s.reference[c];
  return s;
}

namespace {

// Differentiable size proxy of the residue grids: 2 log2(1 + |v| / step)
// bits per entry.
double residue_rate_bits(const TemporalResidues& r, double step, TemporalResidues* grad, double weight) {
  double bits = 0.0;
  const FeatureGrid* grids[2] = {&r.motion, &r.compensation};
  FeatureGrid* grads[2] = {grad ? &grad->motion : nullptr, grad ? &grad->compensation : nullptr};
  for (int g = 0; g < 2; ++g)
    for (std::size_t l = 0; l < grids[g]->tables.size(); ++l) {
      const auto& t = grids[g]->tables[l];
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double a = std::abs(t[i]);
        bits += 2.0 * std::log2(1.0 + a / step);
        if (grads[g] && t[i] != 0.0)
          grads[g]->tables[l][i] += weight * 2.0 / (std::log(2.0) * (step + a)) * (t[i] > 0.0 ? 1.0 : -1.0);
      }
    }
  return bits;
}

struct ResidueAdam {
  TemporalResidues m, v;
  std::uint64_t step = 0;

  void update(TemporalResidues& p, TemporalResidues& g, double grid_lr, double net_lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-15;
    ++step;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    auto ps = p.parameters(), gs = g.parameters(), ms = m.parameters(), vs = v.parameters();
    const auto grid = p.grid_mask();
    for (std::size_t s = 0; s < ps.size(); ++s) {
      const double lr = grid[s] ? grid_lr : net_lr;
      for (std::size_t i = 0; i < ps[s].size(); ++i) {
        ms[s][i] = b1 * ms[s][i] + (1.0 - b1) * gs[s][i];
        vs[s][i] = b2 * vs[s][i] + (1.0 - b2) * gs[s][i] * gs[s][i];
        ps[s][i] -= lr * (ms[s][i] / c1) / (std::sqrt(vs[s][i] / c2) + eps);
      }
    }
  }
};

bool nonzero(const GaussianGrad& d) {
  for (int i = 0; i < 3; ++i)
    if (d.mean[i] != 0.0 || d.scales[i] != 0.0 || d.color[i] != 0.0) return true;
  for (int i = 0; i < 4; ++i)
    if (d.rotation[i] != 0.0) return true;
  return d.opacity != 0.0;
}

// Reverse pass of one predicted Gaussian into the residue gradient.
void backprop_dynamic(const Gaussian3D& ref, const Gaussian3D& out, std::span<const double> zeta,
                      const ViewEmbedding& view, const GaussianGrad& dg, const TemporalResidues& r,
                      TemporalResidues& grad) {
  std::vector<double> dzeta(zeta.size(), 0.0);
  r.translation.backward(zeta, dg.mean, grad.translation, dzeta);
  double ds[3];
  for (int i = 0; i < 3; ++i) ds[i] = dg.scales[i] * out.covariance.scales[i];
  r.scaling.backward(zeta, ds, grad.scaling, dzeta);
  if (dg.rotation[0] != 0.0 || dg.rotation[1] != 0.0 || dg.rotation[2] != 0.0 || dg.rotation[3] != 0.0) {
    using J4 = Jet<4>;
    const auto raw = r.rotation.forward(zeta);
    std::array<J4, 4> rq{J4(1.0 + raw[0], 0), J4(raw[1], 1), J4(raw[2], 2), J4(raw[3], 3)};
    const auto& q = ref.covariance.rotation;
    const std::array<J4, 4> base{J4(q[0]), J4(q[1]), J4(q[2]), J4(q[3])};
    const auto o = quat_mul(quat_normalize(rq), base);
    double dr[4] = {0, 0, 0, 0};
    for (int k = 0; k < 4; ++k)
      for (int i = 0; i < 4; ++i) dr[i] += dg.rotation[k] * o[k].v[i];
    r.rotation.backward(zeta, dr, grad.rotation, dzeta);
  }
  const auto x = view_features(view, zeta);
  std::vector<double> dx(x.size(), 0.0);
  double dc[3];
  for (int i = 0; i < 3; ++i) dc[i] = out.color[i] > 0.0 && out.color[i] < 1.0 ? dg.color[i] : 0.0;
  const double da[1] = {out.opacity > kOpacityFloor && out.opacity < 1.0 - kOpacityFloor ? dg.opacity : 0.0};
  r.color_dynamic.backward(x, dc, grad.color_dynamic, dx);
  r.opacity_dynamic.backward(x, da, grad.opacity_dynamic, dx);
  for (std::size_t i = 0; i < zeta.size(); ++i) dzeta[i] += dx[kViewDim + i];
  backprop_query(r.motion, ref.mean, std::span<const double>(dzeta).subspan(kResDim), grad.motion);
}

void backprop_static(const Gaussian3D& ref, const Gaussian3D& out, std::span<const double> rho,
                     const ViewEmbedding& view, const GaussianGrad& dg, const TemporalResidues& r,
                     TemporalResidues& grad) {
  double dc[3];
  bool any = false;
  for (int i = 0; i < 3; ++i) {
    dc[i] = out.color[i] > 0.0 && out.color[i] < 1.0 ? dg.color[i] : 0.0;
    any = any || dc[i] != 0.0;
  }
  if (!any) return;
  const auto x = view_features(view, rho);
  std::vector<double> dx(x.size(), 0.0);
  r.color_static.backward(x, dc, grad.color_static, dx);
  backprop_query(r.compensation, ref.mean, std::span<const double>(dx).subspan(kViewDim), grad.compensation);
}

Vec3 snap(const Vec3& p, double step) {
  return {round_even(p[0] / step) * step, round_even(p[1] / step) * step, round_even(p[2] / step) * step};
}

Bytes encode_partition(std::span<const std::uint8_t> flags) {
  RangeEncoder enc;
  AdaptiveModel lengths(65);
  if (flags.empty()) return enc.finish();
  encode_uint(enc, lengths, flags[0]);
  std::size_t run = 1;
  for (std::size_t i = 1; i <= flags.size(); ++i) {
    if (i < flags.size() && flags[i] == flags[i - 1]) {
      ++run;
      continue;
    }
    encode_uint(enc, lengths, run - 1);
    run = 1;
  }
  return enc.finish();
}

std::vector<std::uint8_t> decode_partition(std::span<const std::uint8_t> bytes, std::size_t count) {
  std::vector<std::uint8_t> flags;
  if (count == 0) return flags;
  RangeDecoder dec(bytes);
  AdaptiveModel lengths(65);
  const std::uint64_t first = decode_uint(dec, lengths);
  if (first > 1) throw DataError("temporal_residues: bad partition flag");
  std::uint8_t v = static_cast<std::uint8_t>(first);
  while (flags.size() < count) {
    const std::uint64_t run = decode_uint(dec, lengths) + 1;
    if (run > count - flags.size()) throw DataError("temporal_residues: partition run overflows the anchor count");
    flags.insert(flags.end(), static_cast<std::size_t>(run), v);
    v ^= 1;
  }
  return flags;
}

void write_residue_heads(ByteWriter& w, const TemporalResidues& r) {
  for (const Affine* a : {&r.translation, &r.scaling, &r.rotation, &r.color_dynamic, &r.opacity_dynamic, &r.color_static})
    write_affine(w, *a);
}

void read_residue_heads(ByteReader& rd, TemporalResidues& r) {
  for (Affine* a : {&r.translation, &r.scaling, &r.rotation, &r.color_dynamic, &r.opacity_dynamic, &r.color_static})
    read_affine(rd, *a);
}

const Section& require_section(const Bitstream& b, SectionId id) {
  const Section* s = b.find(id);
  if (!s) throw DataError(std::string("missing section ") + section_name(id));
  return *s;
}

Bytes write_p_frame(const FrameState& prev, const TemporalResidues& q, std::span<const std::uint8_t> flags,
                    const SceneModel* created, const TemporalConfig& config) {
  Bitstream b;
  b.header.type = FrameType::kPredicted;
  b.header.frame_index = prev.frame_index + 1;
  b.header.anchor_count = static_cast<std::uint32_t>(flags.size());
  b.header.config = prev.model.config;
  b.header.config.context_grid = config.motion_grid;
  b.header.config.prior_grid = config.compensation_grid;
  b.header.config.lambda = config.lambda;
  b.header.primes = q.motion.primes;
  b.header.lo = q.motion.lo;
  b.header.hi = q.motion.hi;
  {
    ByteWriter w;
    write_residue_heads(w, q);
    b.sections.push_back({SectionId::kNetworkWeights, std::move(w.out)});
  }
  {
    ByteWriter w;
    const Bytes m = encode_grid_tables(q.motion, prev.model.config.grid_step);
    w.varint(m.size());
    w.bytes(m);
    w.bytes(encode_grid_tables(q.compensation, prev.model.config.grid_step));
    b.sections.push_back({SectionId::kGridTables, std::move(w.out)});
  }
  b.sections.push_back({SectionId::kTemporalResidues, encode_partition(flags)});
  if (created && !created->anchors.empty())
    for (auto& s : encode_primitive_sections(*created)) b.sections.push_back(std::move(s));
  return b.serialize();
}

std::vector<std::vector<ResEmbedding>> res_groups(const SceneModel& m) {
  std::vector<std::vector<ResEmbedding>> out(m.anchors.size());
  for (std::size_t c = 0; c < m.coupled.size(); ++c) out[c / m.k()].push_back(m.coupled[c].res_embedding);
  return out;
}

}  // namespace

PredictedObjective evaluate_predicted(const SceneModel& model, std::span<const Gaussian3D> reference,
                                      std::span<const std::uint8_t> dynamic, std::span<const Gaussian3D> base,
                                      const TemporalResidues& res, const TrainView& view, double lambda,
                                      TemporalResidues* grad) {
  const std::size_t k = model.k();
  const std::size_t nc = model.coupled.size();
  if (reference.size() != nc || base.size() != nc || dynamic.size() != model.anchors.size())
    throw std::invalid_argument("evaluate_predicted: state size mismatch");
  const Vec3 eye = view.camera.center();
  PredictedObjective o;
  o.gaussians.resize(nc);
  o.significance.assign(nc, 0.0);
  std::vector<std::vector<double>> feats(nc);
  std::vector<ViewEmbedding> vemb(nc);
  for (std::size_t c = 0; c < nc; ++c) {
    const Gaussian3D& ref = reference[c];
    Gaussian3D g = ref;
    g.color = base[c].color;
    g.opacity = base[c].opacity;
    vemb[c] = make_view_embedding(eye, ref.mean);
    if (dynamic[c / k]) {
      feats[c] = dynamic_features(model.coupled[c].res_embedding, res, ref.mean);
      const Deformation psi = predict_deformation(feats[c], res);
      o.significance[c] = deformation_significance(psi);
      o.gaussians[c] = deform_dynamic(g, psi, feats[c], vemb[c], res);
    } else {
      feats[c] = query(res.compensation, ref.mean);
      o.gaussians[c] = compensate_static(g, feats[c], vemb[c], res);
    }
  }
  o.render = rasterize(o.gaussians, view.camera);
  o.distortion = distortion(o.render, view.image);
  const std::size_t prims = model.anchors.size() + nc;
  const double weight = prims == 0 ? 0.0 : lambda / static_cast<double>(prims);
  o.rate_bits = residue_rate_bits(res, model.config.grid_step, grad, weight);
  o.loss = o.distortion + weight * o.rate_bits;
  if (!grad) return o;
  const RasterGradients rg = backprop_rasterize(o.gaussians, view.camera, distortion_gradient(o.render, view.image));
  for (std::size_t c = 0; c < nc; ++c) {
    if (!nonzero(rg.gaussians[c])) continue;
    if (dynamic[c / k])
      backprop_dynamic(reference[c], o.gaussians[c], feats[c], vemb[c], rg.gaussians[c], res, *grad);
    else
      backprop_static(reference[c], o.gaussians[c], feats[c], vemb[c], rg.gaussians[c], res, *grad);
  }
  o.screen_gradient = rg.screen_gradient;
  return o;
}

PFrameResult encode_p_frame(const FrameState& prev, std::span<const TrainView> views,
                            std::span<const TrainView> prev_views, const TemporalConfig& config, std::uint64_t seed) {
  if (views.empty() || views.size() != prev_views.size())
    throw std::invalid_argument("encode_p_frame: need the same non-empty views for both frames");
  if (prev.model.prediction.translation.in == 0 || prev.geometry.size() != prev.model.coupled.size() ||
      prev.dynamic.size() != prev.model.anchors.size())
    throw std::invalid_argument("encode_p_frame: missing previous state");
  if (config.iterations <= 0 || config.control_interval <= 0)
    throw std::invalid_argument("encode_p_frame: iterations and control interval must be positive");
  config.thresholds.validate();
  const std::size_t k = prev.model.k();
  const double grid_step = prev.model.config.grid_step;

  TemporalResidues res =
      make_residues(config.motion_grid, config.compensation_grid, prev.model.context_grid.lo, prev.model.context_grid.hi);
  res.motion.primes = res.compensation.primes = prev.model.context_grid.primes;

  std::vector<Image> before, after;
  std::vector<Camera> cameras;
  for (std::size_t v = 0; v < views.size(); ++v) {
    before.push_back(prev_views[v].image);
    after.push_back(views[v].image);
    cameras.push_back(views[v].camera);
  }
  const auto masks = compute_motion_masks(before, after, config.diff_threshold, config.dilation_radius);
  PFrameResult out;
  TemporalState ts = disentangle(prev.geometry, k, masks, cameras, config.thresholds.motion);
  ts.frame_index = prev.frame_index + 1;

  SceneModel model = prev.model;
  const std::size_t first_created = model.anchors.size();
  std::vector<Gaussian3D> reference = prev.geometry;
  std::vector<Gaussian3D> current = reference;
  std::vector<double> coupled_grad(model.coupled.size(), 0.0);
  std::vector<std::vector<Gaussian3D>> base_cache(views.size());
  ResidueAdam adam{zeros_like(res), zeros_like(res), 0};
  Rng rng(seed);
  std::vector<std::size_t> order(views.size());
  std::iota(order.begin(), order.end(), 0);

  for (int it = 0; it < config.iterations; ++it) {
    const std::size_t slot = static_cast<std::size_t>(it) % views.size();
    if (slot == 0)
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    const std::size_t vi = order[slot];
    const TrainView& view = views[vi];
    if (base_cache[vi].empty())
      base_cache[vi] = derive_scene(model, PrimitiveValues::from_model(model), view.camera).gaussians;
    const auto& base = base_cache[vi];

    TemporalResidues grad = zeros_like(res);
    const PredictedObjective obj =
        evaluate_predicted(model, reference, ts.dynamic, base, res, view, config.lambda, &grad);
    if (!std::isfinite(obj.loss))
      throw NumericError("non-finite loss in predicted frame " + std::to_string(ts.frame_index));
    for (auto s : grad.parameters())
      for (double v : s)
        if (!std::isfinite(v)) throw NumericError("non-finite gradient in temporal residues");
    for (std::size_t c = 0; c < model.coupled.size(); ++c) current[c] = geometry_only(obj.gaussians[c]);
    const auto& screen = obj.screen_gradient;

    for (std::size_t a = 0; a < model.anchors.size(); ++a) {
      double sum = 0.0, sig = 0.0;
      bool visible = false;
      for (std::size_t c = a * k; c < (a + 1) * k; ++c) {
        sum += screen[c];
        coupled_grad[c] += screen[c];
        visible = visible || screen[c] > 0.0;
        sig += obj.significance[c];
      }
      if (visible) ts.grad_accum[a] += sum / static_cast<double>(k);
      if (ts.dynamic[a]) ts.significance_accum[a] += sig / static_cast<double>(k);
    }
    adam.update(res, grad, config.grid_lr, config.network_lr);

    StepLog log;
    log.iteration = it + 1;
    log.distortion = obj.distortion;
    log.rate_bits = obj.rate_bits;
    log.loss = obj.loss;
    log.psnr = psnr(obj.render, view.image);
    out.log.push_back(log);

    if ((it + 1) % config.control_interval == 0 && it + 1 < config.iterations) {
      const std::size_t budget = config.max_created - std::min(config.max_created, out.created);
      const ControlResult cr = adaptive_control(ts, config.thresholds, budget, [&](std::size_t a) {
        std::size_t best = a * k;
        for (std::size_t c = a * k; c < (a + 1) * k; ++c)
          if (coupled_grad[c] > coupled_grad[best]) best = c;
        const Vec3 p = current[best].mean;
        const Vec3& lo = model.context_grid.lo;
        const Vec3& hi = model.context_grid.hi;
        return Vec3{std::clamp(p[0], lo[0], hi[0]), std::clamp(p[1], lo[1], hi[1]), std::clamp(p[2], lo[2], hi[2])};
      });
      for (const auto& cr_anchor : cr.created) {
        AnchorPrimitive a = model.anchors[cr_anchor.parent];
        a.location = cr_anchor.location;
        const std::vector<ResEmbedding> group = res_groups(model)[cr_anchor.parent];
        const std::size_t idx = model.anchors.size();
        add_anchor(model, a, group);
        for (const auto& g : anchor_geometry(model, idx)) {
          reference.push_back(g);
          current.push_back(g);
        }
      }
      out.created += cr.created.size();
      if (!cr.created.empty())
        for (auto& b : base_cache) b.clear();
      ts.reset_accumulators();
      coupled_grad.assign(model.coupled.size(), 0.0);
    }
  }

  const TemporalResidues q = quantize_residues(res, grid_step);
  SceneModel created = model;
  created.anchors.assign(model.anchors.begin() + static_cast<std::ptrdiff_t>(first_created), model.anchors.end());
  created.coupled.assign(model.coupled.begin() + static_cast<std::ptrdiff_t>(first_created * k), model.coupled.end());
  for (auto& c : created.coupled) c.anchor_index -= static_cast<std::uint32_t>(first_created);
  std::vector<Vec3> snapped;
  for (const auto& a : created.anchors) snapped.push_back(snap(a.location, created.config.location_step));
  const auto coded_order = morton_order(snapped, created.config.location_step);
  const SceneModel qc = quantize_model(created);

  std::vector<std::uint8_t> flags(ts.dynamic.begin(), ts.dynamic.begin() + static_cast<std::ptrdiff_t>(first_created));
  for (std::size_t n = 0; n < coded_order.size(); ++n) flags.push_back(ts.dynamic[first_created + coded_order[n]]);
  ts.dynamic = flags;
  ts.reset_accumulators();

  out.stream = write_p_frame(prev, q, flags, &qc, config);
  out.state = advance_state(prev, q, flags, qc.anchors, res_groups(qc));
  out.temporal = std::move(ts);
  return out;
}

FrameState decode_p_frame(std::span<const std::uint8_t> bytes, const FrameState& prev) {
  const Bitstream b = Bitstream::parse(bytes);
  const auto& h = b.header;
  if (h.type != FrameType::kPredicted) throw DataError("not a predicted frame");
  const auto& pc = prev.model.config;
  if (h.config.coupled_per_anchor != pc.coupled_per_anchor || h.config.hyper_dim != pc.hyper_dim ||
      h.config.bottleneck_support != pc.bottleneck_support || h.config.location_step != pc.location_step ||
      h.config.grid_step != pc.grid_step)
    throw DataError("predicted frame does not match the previous frame's configuration");
  if (h.lo != prev.model.context_grid.lo || h.hi != prev.model.context_grid.hi)
    throw DataError("predicted frame domain differs from the previous frame");
  if (h.frame_index != prev.frame_index + 1) throw DataError("predicted frame out of order");
  if (h.anchor_count < prev.model.anchors.size()) throw DataError("predicted frame drops anchors");

  TemporalResidues r = make_residues(h.config.context_grid, h.config.prior_grid, h.lo, h.hi);
  r.motion.primes = r.compensation.primes = h.primes;
  {
    ByteReader rd(require_section(b, SectionId::kNetworkWeights).payload);
    read_residue_heads(rd, r);
    if (!rd.done()) throw DataError("network_weights: trailing bytes");
  }
  {
    const auto& payload = require_section(b, SectionId::kGridTables).payload;
    ByteReader rd(payload);
    const std::uint64_t n = rd.varint();
    if (n > payload.size()) throw DataError("grid_tables: bad length");
    decode_grid_tables(rd.bytes(static_cast<std::size_t>(n)), r.motion, pc.grid_step);
    decode_grid_tables(std::span<const std::uint8_t>(payload).subspan(rd.position()), r.compensation, pc.grid_step);
  }
  auto flags = decode_partition(require_section(b, SectionId::kTemporalResidues).payload, h.anchor_count);
  const std::size_t created = h.anchor_count - prev.model.anchors.size();
  SceneModel mini = prev.model;
  mini.anchors.clear();
  mini.coupled.clear();
  if (created > 0) decode_primitive_sections(b, created, mini);
  return advance_state(prev, r, std::move(flags), mini.anchors, res_groups(mini));
}

namespace {

bool same_bits(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

bool same_geometry(const std::vector<Gaussian3D>& a, const std::vector<Gaussian3D>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!same_bits(a[i].mean, b[i].mean) || !same_bits(a[i].covariance.scales, b[i].covariance.scales) ||
        !same_bits(a[i].covariance.rotation, b[i].covariance.rotation))
      return false;
  }
  return true;
}

}  // namespace

bool frame_states_equal(const FrameState& a, const FrameState& b) {
  if (a.frame_index != b.frame_index || a.predicted != b.predicted || a.dynamic != b.dynamic) return false;
  if (!(a.model.config == b.model.config) || a.model.anchors.size() != b.model.anchors.size() ||
      a.model.coupled.size() != b.model.coupled.size())
    return false;
  SceneModel ma = a.model, mb = b.model;
  const auto pa = parameter_spans(ma), pb = parameter_spans(mb);
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!same_bits(pa[i].values, pb[i].values)) return false;
  if (!same_geometry(a.reference, b.reference) || !same_geometry(a.geometry, b.geometry)) return false;
  TemporalResidues ra = a.residues, rb = b.residues;
  const auto qa = ra.parameters(), qb = rb.parameters();
  if (qa.size() != qb.size()) return false;
  for (std::size_t i = 0; i < qa.size(); ++i)
    if (!same_bits(qa[i], qb[i])) return false;
  return true;
}

SequenceResult train_sequence(std::span<const std::vector<TrainView>> frames, std::span<const Vec3> points,
                              const ModelConfig& model_config, const TrainConfig& intra,
                              const TemporalConfig& temporal, const SequenceProgressFn& progress) {
  if (frames.empty()) throw std::invalid_argument("train_sequence: no frames");
  for (const auto& f : frames)
    if (f.size() != frames[0].size()) throw std::invalid_argument("train_sequence: view count differs between frames");
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  auto mean_psnr = [](const FrameState& s, std::span<const TrainView> views) {
    double p = 0.0;
    for (const auto& v : views) p += psnr(render_frame(s, v.camera), v.image);
    return p / static_cast<double>(views.size());
  };
  SequenceResult out;
  say("frame 0: intra training");
  const TrainResult tr = train_static(frames[0], points, model_config, intra);
  out.streams.push_back(encode_model(tr.model, FrameType::kIntra, 0));
  out.states.push_back(intra_state(decode_model(out.streams.back()), 0));
  out.partitions.emplace_back();
  auto report = [&](std::size_t t, std::size_t created) {
    const FrameState& s = out.states.back();
    SequenceFrameReport r;
    r.frame = static_cast<std::uint32_t>(t);
    r.psnr = mean_psnr(s, frames[t]);
    r.bytes = out.streams.back().size();
    r.payload_bytes = r.bytes - Bitstream::parse(out.streams.back()).header_bytes();
    r.anchors = s.model.anchors.size();
    r.dynamic_anchors = static_cast<std::size_t>(std::count(s.dynamic.begin(), s.dynamic.end(), std::uint8_t{1}));
    r.created = created;
    out.report.push_back(r);
    say("frame " + std::to_string(t) + ": psnr " + std::to_string(r.psnr) + " dB, " + std::to_string(r.bytes) +
        " bytes, " + std::to_string(r.dynamic_anchors) + "/" + std::to_string(r.anchors) + " dynamic");
  };
  report(0, 0);
  for (std::size_t t = 1; t < frames.size(); ++t) {
    PFrameResult p = encode_p_frame(out.states.back(), frames[t], frames[t - 1], temporal, intra.seed + t);
    out.streams.push_back(std::move(p.stream));
    out.states.push_back(std::move(p.state));
    out.partitions.push_back(std::move(p.temporal));
    report(t, p.created);
  }
  return out;
}

std::vector<FrameState> decode_sequence(std::span<const Bytes> streams) {
  std::vector<FrameState> out;
  if (streams.empty()) return out;
  const Bitstream first = Bitstream::parse(streams[0]);
  if (first.header.type == FrameType::kPredicted) throw DataError("sequence must start with an intra frame");
  out.push_back(intra_state(decode_model(first), first.header.frame_index));
  for (std::size_t t = 1; t < streams.size(); ++t) out.push_back(decode_p_frame(streams[t], out.back()));
  return out;
}

void write_sequence_csv(const std::string& path, std::span<const SequenceFrameReport> report) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << "frame,psnr,bytes,payload_bytes,anchors,dynamic_anchors,created\n";
  f.precision(10);
  for (const auto& r : report)
    f << r.frame << ',' << r.psnr << ',' << r.bytes << ',' << r.payload_bytes << ',' << r.anchors << ','
      << r.dynamic_anchors << ',' << r.created << '\n';
}

}  // namespace cgs
