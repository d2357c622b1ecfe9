#include <gtest/gtest.h>

#include <cmath>

#include "cgs/codec.hpp"
#include "cgs/temporal.hpp"
#include "support.hpp"

using namespace cgs;

namespace {

Camera front_camera(int size) {
  return look_at({0.0, 0.0, 3.0}, {0.0, 0.0, 0.0}, {0.0, -1.0, 0.0}, 1.2 * size, size, size);
}

Gaussian3D small_gaussian(const Vec3& mean, double s) {
  Gaussian3D g;
  g.mean = mean;
  g.covariance.scales = {s, s, s};
  g.color = {0.4, 0.5, 0.6};
  g.opacity = 0.7;
  return g;
}

void randomize(TemporalResidues& r, Rng& rng, double scale) {
  for (auto s : r.parameters())
    for (double& v : s) v = scale * rng.normal();
}

std::vector<TrainView> ring_views(const FrameState& s, int count, int size) {
  std::vector<TrainView> out;
  for (int i = 0; i < count; ++i) {
    const double a = 2.0 * kPi * i / count;
    TrainView v;
    v.camera = look_at({2.5 * std::cos(a), 0.5, 2.5 * std::sin(a)}, {0.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, 1.1 * size,
                       size, size);
    v.image = render_frame(s, v.camera);
    out.push_back(std::move(v));
  }
  return out;
}

Quat random_quat(Rng& rng) { return {rng.normal(), rng.normal(), rng.normal(), rng.normal()}; }

}  // namespace

TEST(MotionMask, IdenticalFramesGiveEmptyMask) {
  Rng rng(1);
  Image a(32, 24);
  for (double& v : a.data) v = rng.uniform();
  EXPECT_EQ(motion_mask(a, a).count(), 0u);
}

TEST(MotionMask, MovedBlockCoversSourceAndDestination) {
  Image a(40, 40, 0.1), b(40, 40, 0.1);
  for (int y = 8; y < 16; ++y)
    for (int x = 8; x < 16; ++x)
      for (int c = 0; c < 3; ++c) a.at(x, y, c) = 0.9;
  for (int y = 8; y < 16; ++y)
    for (int x = 24; x < 32; ++x)
      for (int c = 0; c < 3; ++c) b.at(x, y, c) = 0.9;
  const MotionMask m = motion_mask(a, b, 0.05, 2);
  for (int y = 8; y < 16; ++y) {
    for (int x = 8; x < 16; ++x) EXPECT_EQ(m.at(x, y), 1);
    for (int x = 24; x < 32; ++x) EXPECT_EQ(m.at(x, y), 1);
  }
  EXPECT_EQ(m.at(6, 6), 1);   // dilation
  EXPECT_EQ(m.at(5, 5), 0);
  EXPECT_EQ(m.at(20, 12), 0);
  EXPECT_EQ(m.count(), 2u * 12u * 12u);
}

TEST(MotionMask, ZeroThresholdFlagsEveryDifferingPixel) {
  Image a(10, 10, 0.5), b(10, 10, 0.5);
  b.at(3, 4, 1) = 0.5000001;
  b.at(7, 1, 2) = 0.2;
  const MotionMask m = motion_mask(a, b, 0.0, 0);
  EXPECT_EQ(m.count(), 2u);
  EXPECT_EQ(m.at(3, 4), 1);
  EXPECT_EQ(m.at(7, 1), 1);
}

TEST(MotionMask, SizeMismatchThrows) {
  EXPECT_THROW(motion_mask(Image(4, 4), Image(5, 4)), std::invalid_argument);
}

TEST(MotionConfidence, EmptyMaskIsZero) {
  const Camera cam = front_camera(32);
  const std::vector<Gaussian3D> g{small_gaussian({0, 0, 0}, 0.1)};
  EXPECT_EQ(view_motion_confidence(g, MotionMask(32, 32), cam), 0);
}

TEST(MotionConfidence, OverlapWithOneMotionPixel) {
  const Camera cam = front_camera(32);
  const std::vector<Gaussian3D> g{small_gaussian({0, 0, 0}, 0.05)};
  const auto p = project_gaussian(g[0], cam);
  MotionMask m(32, 32);
  m.at(static_cast<int>(std::round(p.u)), static_cast<int>(std::round(p.v))) = 1;
  EXPECT_EQ(view_motion_confidence(g, m, cam), 1);
  MotionMask far(32, 32);
  far.at(0, 0) = 1;
  EXPECT_EQ(view_motion_confidence(g, far, cam), 0);
}

TEST(MotionConfidence, OutsideOrBehindIsZero) {
  const Camera cam = front_camera(32);
  MotionMask all(32, 32);
  std::fill(all.data.begin(), all.data.end(), std::uint8_t{1});
  const std::vector<Gaussian3D> outside{small_gaussian({5.0, 0, 0}, 0.05)};
  const std::vector<Gaussian3D> behind{small_gaussian({0, 0, 5.0}, 0.05)};
  EXPECT_EQ(view_motion_confidence(outside, all, cam), 0);
  EXPECT_EQ(view_motion_confidence(behind, all, cam), 0);
}

TEST(Disentangle, MeanConfidenceAndThreshold) {
  const Camera cam = front_camera(32);
  const std::vector<Gaussian3D> g{small_gaussian({0, 0, 0}, 0.05), small_gaussian({0, 0, 0}, 0.05),
                                  small_gaussian({0.6, 0.6, 0}, 0.02), small_gaussian({0.6, 0.6, 0}, 0.02)};
  const auto p = project_gaussian(g[0], cam);
  MotionMask hit(32, 32);
  hit.at(static_cast<int>(std::round(p.u)), static_cast<int>(std::round(p.v))) = 1;
  const std::vector<MotionMask> masks{hit, MotionMask(32, 32), hit, MotionMask(32, 32)};
  const std::vector<Camera> cams(4, cam);
  const TemporalState s = disentangle(g, 2, masks, cams, 0.25);
  EXPECT_DOUBLE_EQ(s.motion_confidence[0], 0.5);
  EXPECT_EQ(s.dynamic[0], 1);
  EXPECT_DOUBLE_EQ(s.motion_confidence[1], 0.0);
  EXPECT_EQ(s.dynamic[1], 0);
  const std::vector<MotionMask> none(4, MotionMask(32, 32));
  EXPECT_EQ(disentangle(g, 2, none, cams, 0.25).dynamic_count(), 0u);
}

TEST(Deformation, ZeroResiduesAreNeutral) {
  const TemporalResidues r = make_residues({2, 4, 2, 8, 2}, {2, 4, 2, 8, 2}, {-1, -1, -1}, {1, 1, 1});
  const auto z = dynamic_features({0.3, -0.2, 0.1, 0.5}, r, {0.1, 0.2, 0.3});
  const Deformation psi = predict_deformation(z, r);
  EXPECT_EQ(psi.translation, (Vec3{0, 0, 0}));
  EXPECT_EQ(psi.scaling, (Vec3{1, 1, 1}));
  EXPECT_EQ(psi.rotation, (Quat{1, 0, 0, 0}));
  EXPECT_EQ(deformation_significance(psi), 0.0);
}

TEST(Deformation, ScalesPositiveAndMatchSubEvaluation) {
  Rng rng(3);
  TemporalResidues r = make_residues({2, 4, 2, 8, 2}, {2, 4, 2, 8, 2}, {-1, -1, -1}, {1, 1, 1});
  randomize(r, rng, 2.0);
  for (int t = 0; t < 50; ++t) {
    const Vec3 pos{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const ResEmbedding res{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
    const auto z = dynamic_features(res, r, pos);
    const Deformation psi = predict_deformation(z, r);
    const auto grid = query(r.motion, pos);
    std::vector<double> zz(res.begin(), res.end());
    zz.insert(zz.end(), grid.begin(), grid.end());
    for (int i = 0; i < 3; ++i) {
      double t_i = r.translation.bias[i], s_i = r.scaling.bias[i];
      for (std::size_t j = 0; j < zz.size(); ++j) {
        t_i += r.translation.weight[i * zz.size() + j] * zz[j];
        s_i += r.scaling.weight[i * zz.size() + j] * zz[j];
      }
      EXPECT_NEAR(psi.translation[i], t_i, 1e-12);
      EXPECT_NEAR(psi.scaling[i], std::exp(s_i), 1e-12 * std::exp(s_i));
      EXPECT_GT(psi.scaling[i], 0.0);
    }
    double n = 0.0;
    for (double v : psi.rotation) n += v * v;
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
}

TEST(DeformDynamic, NeutralUnchangedAndTranslation) {
  const TemporalResidues r = make_residues({2, 4, 2, 8, 2}, {2, 4, 2, 8, 2}, {-1, -1, -1}, {1, 1, 1});
  const Gaussian3D g = small_gaussian({0.1, 0.2, 0.3}, 0.05);
  const auto z = dynamic_features({0.3, -0.2, 0.1, 0.5}, r, g.mean);
  const ViewEmbedding view = make_view_embedding({0, 0, 3}, g.mean);
  const Gaussian3D same = deform_dynamic(g, Deformation{}, z, view, r);
  EXPECT_EQ(same, g);
  Deformation shift;
  shift.translation = {1, 0, 0};
  const Gaussian3D moved = deform_dynamic(g, shift, z, view, r);
  EXPECT_EQ(moved.mean, (Vec3{1.1, 0.2, 0.3}));
}

TEST(DeformDynamic, LargeColorOffsetClampsToOne) {
  TemporalResidues r = make_residues({2, 4, 2, 8, 2}, {2, 4, 2, 8, 2}, {-1, -1, -1}, {1, 1, 1});
  r.color_dynamic.bias = {50.0, -50.0, 0.0};
  r.opacity_dynamic.bias = {50.0};
  const Gaussian3D g = small_gaussian({0, 0, 0}, 0.05);
  const auto z = dynamic_features({0, 0, 0, 0}, r, g.mean);
  const Gaussian3D out = deform_dynamic(g, Deformation{}, z, make_view_embedding({0, 0, 3}, g.mean), r);
  EXPECT_EQ(out.color[0], 1.0);
  EXPECT_EQ(out.color[1], 0.0);
  EXPECT_EQ(out.color[2], g.color[2]);
  EXPECT_LT(out.opacity, 1.0);
}

TEST(CompensateStatic, ZeroResiduesLeaveGaussianUnchanged) {
  const TemporalResidues r = make_residues({2, 4, 2, 8, 2}, {2, 4, 2, 8, 2}, {-1, -1, -1}, {1, 1, 1});
  const Gaussian3D g = small_gaussian({0.2, 0, 0}, 0.05);
  EXPECT_EQ(compensate_static(g, query(r.compensation, g.mean), make_view_embedding({0, 0, 3}, g.mean), r), g);
}

TEST(CompensateStatic, GeometryAndOpacityBitIdentical) {
  Rng rng(4);
  TemporalResidues r = make_residues({2, 4, 2, 8, 2}, {2, 4, 2, 8, 2}, {-1, -1, -1}, {1, 1, 1});
  randomize(r, rng, 0.5);
  for (int t = 0; t < 200; ++t) {
    Gaussian3D g = small_gaussian({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}, rng.uniform(0.01, 0.2));
    g.covariance.rotation = quat_normalize(random_quat(rng));
    g.opacity = rng.uniform(0.01, 0.99);
    const Gaussian3D out =
        compensate_static(g, query(r.compensation, g.mean), make_view_embedding({0, 0, 3}, g.mean), r);
    EXPECT_EQ(out.mean, g.mean);
    EXPECT_EQ(out.covariance, g.covariance);
    EXPECT_EQ(out.opacity, g.opacity);
  }
}

TEST(Significance, TranslationAndHalfTurn) {
  Deformation t;
  t.translation = {0.1, 0, 0};
  EXPECT_DOUBLE_EQ(deformation_significance(t), 0.1);
  Deformation half;
  half.rotation = {0, 0, 0, 1};
  EXPECT_NEAR(deformation_significance(half), 1.0, 1e-12);
  Deformation flipped;
  flipped.rotation = {-1, 0, 0, 0};
  EXPECT_EQ(deformation_significance(flipped), 0.0);
}

TEST(Significance, RotationTermBounded) {
  Rng rng(5);
  for (int i = 0; i < 10000; ++i) {
    Deformation d;
    d.rotation = quat_normalize(random_quat(rng));
    const double v = deformation_significance(d);
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 2.0);
  }
}

TEST(AdaptiveControl, QuietAccumulatorsChangeNothing) {
  TemporalState s;
  s.dynamic = {0, 1, 0};
  s.grad_accum = {0, 0, 0};
  s.significance_accum = {0.5, 0.5, 0.5};
  const auto r = adaptive_control(s, TemporalThresholds{}, 10, [](std::size_t) { return Vec3{}; });
  EXPECT_EQ(s.dynamic, (std::vector<std::uint8_t>{0, 1, 0}));
  EXPECT_TRUE(r.created.empty());
}

TEST(AdaptiveControl, ConvertWithoutDuplicatingBelowCreation) {
  TemporalState s;
  s.dynamic = {0};
  s.grad_accum = {3e-4};
  s.significance_accum = {0.0};
  const auto r = adaptive_control(s, TemporalThresholds{}, 10, [](std::size_t) { return Vec3{}; });
  EXPECT_EQ(s.dynamic, (std::vector<std::uint8_t>{1}));
  EXPECT_EQ(r.to_dynamic, 1u);
  EXPECT_EQ(r.to_static, 0u);  // converted at most once per call
  EXPECT_TRUE(r.created.empty());
}

TEST(AdaptiveControl, InsignificantDynamicBecomesStatic) {
  TemporalState s;
  s.dynamic = {1};
  s.grad_accum = {0.0};
  s.significance_accum = {0.0};
  const auto r = adaptive_control(s, TemporalThresholds{}, 10, [](std::size_t) { return Vec3{}; });
  EXPECT_EQ(s.dynamic, (std::vector<std::uint8_t>{0}));
  EXPECT_EQ(r.to_static, 1u);
}

TEST(AdaptiveControl, CreationAppendsDynamicAnchors) {
  TemporalState s;
  s.dynamic = {0, 0};
  s.grad_accum = {1e-3, 0.0};
  s.significance_accum = {0.0, 0.0};
  s.motion_confidence = {0.0, 0.0};
  const auto r = adaptive_control(s, TemporalThresholds{}, 10, [](std::size_t a) { return Vec3{double(a), 1, 2}; });
  ASSERT_EQ(r.created.size(), 1u);
  EXPECT_EQ(r.created[0].parent, 0u);
  EXPECT_EQ(r.created[0].location, (Vec3{0, 1, 2}));
  EXPECT_EQ(s.dynamic, (std::vector<std::uint8_t>{1, 0, 1}));
  EXPECT_EQ(s.grad_accum.size(), 3u);
}

TEST(AdaptiveControl, ThresholdOrderingValidated) {
  TemporalThresholds t;
  t.creation = t.static_to_dynamic;
  EXPECT_THROW(t.validate(), std::invalid_argument);
}

TEST(PredictedFrame, ResidueGradientMatchesFiniteDifferences) {
  Rng rng(6);
  const SceneModel m = decode_model(encode_model(test::random_model(rng, 6)));
  const FrameState prev = intra_state(m);
  TemporalResidues r = make_residues({2, 4, 2, 8, 2}, {2, 4, 2, 8, 2}, m.context_grid.lo, m.context_grid.hi);
  randomize(r, rng, 0.05);
  TrainView view;
  view.camera = look_at({0.4, 0.3, 2.5}, {0, 0, 0}, {0, 1, 0}, 30.0, 24, 24);
  view.image = Image(24, 24);
  for (double& v : view.image.data) v = rng.uniform(0.1, 0.9);
  std::vector<std::uint8_t> dyn(m.anchors.size());
  for (std::size_t a = 0; a < dyn.size(); ++a) dyn[a] = a % 2;
  const auto base = derive_scene(m, PrimitiveValues::from_model(m), view.camera).gaussians;
  TemporalResidues grad = zeros_like(r);
  (void)evaluate_predicted(m, prev.geometry, dyn, base, r, view, 0.01, &grad);
  auto loss = [&] { return evaluate_predicted(m, prev.geometry, dyn, base, r, view, 0.01, nullptr).loss; };
  auto ps = r.parameters();
  auto gs = grad.parameters();
  double scale = 0.0;
  for (auto s : gs)
    for (double g : s) scale = std::max(scale, std::abs(g));
  ASSERT_GT(scale, 0.0);
  int checked = 0;
  for (std::size_t s = 0; s < ps.size(); ++s)
    for (int t = 0; t < 4; ++t) {
      const std::size_t i = rng.index(ps[s].size());
      const double fd = test::central_difference(ps[s][i], 1e-6, loss);
      EXPECT_LT(test::relative_error(gs[s][i], fd, 1e-4 * scale), 1e-4)
          << "span " << s << " index " << i << ": analytic " << gs[s][i] << " numeric " << fd;
      ++checked;
    }
  EXPECT_GT(checked, 50);
}

TEST(PredictedFrame, ClosedLoopRoundTripAndStaticGeometry) {
  Rng rng(7);
  const FrameState prev = intra_state(decode_model(encode_model(test::random_model(rng, 12))));
  const auto before = ring_views(prev, 4, 24);
  auto after = before;
  for (auto& v : after)
    for (int y = 4; y < 12; ++y)
      for (int x = 4; x < 12; ++x) v.image.at(x, y, 0) = 1.0;
  TemporalConfig cfg;
  cfg.motion_grid = cfg.compensation_grid = {2, 4, 2, 8, 2};
  cfg.iterations = 60;
  cfg.control_interval = 20;
  cfg.max_created = 2;
  const PFrameResult p = encode_p_frame(prev, after, before, cfg, 1);
  const FrameState dec = decode_p_frame(p.stream, prev);
  EXPECT_GT(p.created, 0u);
  EXPECT_GT(p.temporal.dynamic_count(), 0u);
  EXPECT_TRUE(frame_states_equal(dec, p.state));
  EXPECT_EQ(dec.model.anchors.size(), prev.model.anchors.size() + p.created);
  EXPECT_EQ(dec.model.coupled.size(), dec.model.k() * dec.model.anchors.size());
  EXPECT_EQ(render_frame(dec, before[1].camera), render_frame(p.state, before[1].camera));
  const std::size_t k = prev.model.k();
  for (std::size_t c = 0; c < prev.geometry.size(); ++c)
    if (!dec.dynamic[c / k]) {
      EXPECT_EQ(dec.geometry[c].mean, prev.geometry[c].mean);
      EXPECT_EQ(dec.geometry[c].covariance, prev.geometry[c].covariance);
    }
  EXPECT_EQ(Bitstream::parse(p.stream).header.type, FrameType::kPredicted);
  EXPECT_THROW(decode_p_frame(p.stream, dec), DataError);  // out of order
}

TEST(PredictedFrame, StaticSequenceFrameIsSmall) {
  Rng rng(8);
  const Bytes intra = encode_model(test::random_model(rng, 30), FrameType::kIntra);
  const FrameState prev = intra_state(decode_model(intra));
  const auto views = ring_views(prev, 4, 24);
  TemporalConfig cfg;
  cfg.iterations = 100;
  const PFrameResult p = encode_p_frame(prev, views, views, cfg, 2);
  const auto payload = [](const Bytes& b) { return b.size() - Bitstream::parse(b).header_bytes(); };
  EXPECT_LT(payload(p.stream), payload(intra) / 10) << payload(p.stream) << " vs " << payload(intra);
  EXPECT_EQ(p.temporal.dynamic_count(), 0u);
}

TEST(PredictedFrame, CorruptStreamsFailCleanly) {
  Rng rng(9);
  const FrameState prev = intra_state(decode_model(encode_model(test::random_model(rng, 4))));
  const auto views = ring_views(prev, 2, 16);
  TemporalConfig cfg;
  cfg.iterations = 5;
  const PFrameResult p = encode_p_frame(prev, views, views, cfg, 3);
  for (std::size_t cut = 0; cut < p.stream.size(); cut += 17) {
    const Bytes part(p.stream.begin(), p.stream.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(decode_p_frame(part, prev), DataError);
  }
  EXPECT_THROW(decode_p_frame(encode_model(prev.model), prev), DataError);
}

TEST(PredictedFrame, MissingPreviousStateThrows) {
  FrameState empty;
  std::vector<TrainView> views(1);
  EXPECT_THROW(encode_p_frame(empty, views, views, TemporalConfig{}, 0), std::invalid_argument);
}
