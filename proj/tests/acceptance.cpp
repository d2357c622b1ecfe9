#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cgs/codec.hpp"
#include "cgs/entropy_model.hpp"
#include "cgs/rd_optimizer.hpp"
#include "cgs/renderer.hpp"
#include "cgs/synthetic.hpp"
#include "cgs/temporal.hpp"
#include "support.hpp"

using namespace cgs;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void progress(const std::string& s) {
  std::fprintf(stderr, "  %s\n", s.c_str());
  std::fflush(stderr);
}

ModelConfig small_model_config() {
  ModelConfig c;
  c.context_grid = {2, 8, 2, 10, 2};
  c.prior_grid = {2, 8, 2, 10, 2};
  return c;
}

// ------------------------------------------------------------------ 1

Outcome codec_round_trip() {
  Rng rng(101);
  int failures = 0;
  std::size_t total_bytes = 0;
  for (int t = 0; t < 50; ++t) {
    ModelConfig cfg = test::toy_config();
    cfg.coupled_per_anchor = 1 + static_cast<std::uint32_t>(rng.index(10));
    cfg.hyper_dim = 1 + static_cast<std::uint32_t>(rng.index(8));
    cfg.bottleneck_support = 2 + static_cast<int>(rng.index(10));
    const SceneModel m = test::random_model(rng, rng.index(60), cfg);
    const Bytes a = encode_model(m);
    const Bytes b = encode_model(m);
    const SceneModel d = decode_model(a);
    const SceneModel q = quantize_model(m);
    bool ok = a == b && test::bitwise_equal(d, q) && encode_model(d) == a;
    const Camera cam = look_at({rng.uniform(-3, 3), rng.uniform(-3, 3), 3.0}, {0, 0, 0}, {0, 1, 0}, 40.0, 32, 32);
    ok = ok && render_model(d, cam) == render_model(q, cam);
    failures += !ok;
    total_bytes += a.size();
  }
  return {failures == 0, fmt("50 models, %d mismatches, %zu bytes total", failures, total_bytes)};
}

// ------------------------------------------------------------------ 2

std::size_t coded_symbols(const SceneModel& m) {
  return m.anchors.size() * (kCovParams + m.config.hyper_dim + kRefDim) +
         m.coupled.size() * (m.config.hyper_dim + kResDim);
}

Outcome rate_fidelity() {
  Rng rng(202);
  std::vector<std::string> rows;
  bool pass = true;
  for (int t = 0; t < 4; ++t) {
    ModelConfig cfg = test::toy_config();
    cfg.coupled_per_anchor = 4 + 2 * t;
    SceneModel m = test::random_model(rng, 200 + 100 * t, cfg);
    if (t % 2 == 1) {
      // entropy model spread matched to the data
      for (std::size_t i = kRefDim; i < 2 * kRefDim; ++i) m.entropy.embedding_head.bias[i] = std::log(std::expm1(0.5));
      for (std::size_t i = kResDim; i < 2 * kResDim; ++i) m.entropy.coupled_head.bias[i] = std::log(std::expm1(0.5));
    }
    const SceneModel q = quantize_model(m);
    const double est = model_rate(q).total();
    const double actual = 8.0 * static_cast<double>(primitive_payload_bytes(Bitstream::parse(encode_model(q))));
    const std::size_t symbols = coded_symbols(q);
    const bool ok = symbols >= 10000 && std::abs(est - actual) <= 0.005 * est + 1024.0;
    pass = pass && ok;
    rows.push_back(fmt("%zu symbols est %.0f actual %.0f", symbols, est, actual));
  }
  {
    SyntheticOptions so;
    so.views = 12;
    so.holdout_every = 0;
    so.width = so.height = 40;
    const SceneData scene = synthetic_scene(so);
    TrainConfig tc;
    tc.iterations = 150;
    tc.seed = 2;
    const SceneModel q = quantize_model(train_static(scene.training_views(0), scene.points, small_model_config(), tc).model);
    const double est = model_rate(q).total();
    const double actual = 8.0 * static_cast<double>(primitive_payload_bytes(Bitstream::parse(encode_model(q))));
    const std::size_t symbols = coded_symbols(q);
    pass = pass && symbols >= 10000 && std::abs(est - actual) <= 0.005 * est + 1024.0;
    rows.push_back(fmt("trained: %zu symbols est %.0f actual %.0f", symbols, est, actual));
  }
  std::string detail;
  for (const auto& r : rows) detail += (detail.empty() ? "" : "; ") + r;
  return {pass, detail};
}

// ------------------------------------------------------------------ 3

Outcome gradient_check() {
  Rng rng(303);
  SceneModel m = test::random_model(rng, 6);
  for (auto& a : m.anchors)
    for (double& v : a.location) v *= 0.5;
  TrainView view;
  view.camera = look_at({0.3, -0.4, 3.0}, {0, 0, 0}, {0, -1, 0}, 30.0, 24, 24);
  view.image = Image(24, 24);
  for (double& v : view.image.data) v = rng.uniform(0.1, 0.9);
  const double lambda = 0.01;
  const QuantizationNoise noise = QuantizationNoise::sample(m, rng);
  SceneModel grad = zeros_like(m);
  (void)evaluate_objective(m, view, lambda, noise, &grad);
  const auto loss = [&] { return evaluate_objective(m, view, lambda, noise, nullptr).loss; };

  auto ps = parameter_spans(m);
  auto gs = parameter_spans(grad);
  double scale = 0.0;
  for (const auto& s : gs)
    for (double g : s.values) scale = std::max(scale, std::abs(g));
  const double floor = 1e-4 * scale;
  std::map<ParamGroup, int> checked;
  std::map<ParamGroup, double> worst;
  int sampled = 0, failed = 0;
  for (std::size_t s = 0; s < ps.size(); ++s) {
    const std::size_t n = ps[s].values.size();
    const ParamGroup g = ps[s].group;
    const bool renderer_path = g != ParamGroup::kEntropyNet && g != ParamGroup::kPriorGrid;
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < n; ++i)
      if (gs[s].values[i] != 0.0 || (g != ParamGroup::kContextGrid && g != ParamGroup::kPriorGrid)) candidates.push_back(i);
    for (int t = 0; t < 3 && !candidates.empty(); ++t) {
      const std::size_t i = candidates[rng.index(candidates.size())];
      const double fd = test::central_difference(ps[s].values[i], 1e-4, loss);
      const double err = test::relative_error(gs[s].values[i], fd, floor);
      ++checked[g];
      ++sampled;
      worst[g] = std::max(worst[g], err);
      if (err >= (renderer_path ? 1e-3 : 1e-4)) {
        ++failed;
        progress(fmt("%s span %zu index %zu: analytic %.9g numeric %.9g", group_name(g), s, i, gs[s].values[i], fd));
      }
    }
  }
  std::string detail = fmt("%d parameters, %d over tolerance; worst", sampled, failed);
  bool all_groups = true;
  for (ParamGroup g : {ParamGroup::kLocation, ParamGroup::kCovariance, ParamGroup::kAnchorEmbedding,
                       ParamGroup::kCoupledEmbedding, ParamGroup::kPredictionNet, ParamGroup::kEntropyNet,
                       ParamGroup::kContextGrid, ParamGroup::kPriorGrid}) {
    all_groups = all_groups && checked[g] > 0;
    detail += fmt(" %s %.1e", group_name(g), worst[g]);
  }
  return {failed == 0 && sampled >= 100 && all_groups, detail};
}

// ------------------------------------------------------------------ 4 and 5

struct StaticRun {
  std::size_t bytes = 0;
  std::size_t raw_bytes = 0;
  EvalMetrics held_out;
  std::size_t anchors = 0;
  double seconds = 0.0;
};

StaticRun train_and_code(const SceneData& scene, const ModelConfig& mc, const TrainConfig& tc, const std::string& tag) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto train = scene.training_views(0);
  TrainResult r = train_static(train, scene.points, mc, tc, [&](const StepLog& l) {
    if (l.iteration % 500 == 0) progress(fmt("%s iteration %d psnr %.2f rate %.0f", tag.c_str(), l.iteration, l.psnr, l.rate_bits));
  });
  const Bytes b = encode_model(r.model);
  const SceneModel d = decode_model(b);
  StaticRun out;
  out.bytes = b.size();
  out.raw_bytes = d.coupled.size() * 14 * sizeof(float);
  out.held_out = evaluate_views(d, scene.evaluation_views(0));
  out.anchors = d.anchors.size();
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

Outcome lambda_monotonicity() {
  const SceneData scene = synthetic_scene(SyntheticOptions{});
  const std::vector<double> lambdas{0.0001, 0.0005, 0.001};
  std::vector<StaticRun> runs;
  for (double lambda : lambdas) {
    TrainConfig tc;
    tc.lambda = lambda;
    tc.iterations = 2000;
    tc.max_anchors = 1000;
    tc.seed = 7;
    runs.push_back(train_and_code(scene, small_model_config(), tc, fmt("lambda %g", lambda)));
  }
  bool pass = true;
  std::string detail;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    detail += fmt("%slambda %g: %zu B %.2f dB", i ? "; " : "", lambdas[i], runs[i].bytes, runs[i].held_out.psnr);
    for (std::size_t j = i + 1; j < runs.size(); ++j) {
      if (runs[j].bytes > runs[i].bytes) pass = false;
      if (runs[j].bytes < runs[i].bytes && runs[j].held_out.psnr > runs[i].held_out.psnr) pass = false;
    }
  }
  return {pass, detail};
}

Outcome static_reconstruction() {
  const SceneData scene = synthetic_scene(SyntheticOptions{});
  TrainConfig tc;
  tc.iterations = 5000;
  tc.max_anchors = 1000;
  tc.seed = 1;
  const StaticRun r = train_and_code(scene, small_model_config(), tc, "static");
  const double ratio = static_cast<double>(r.bytes) / static_cast<double>(r.raw_bytes);
  return {r.held_out.psnr >= 30.0 && ratio <= 0.2,
          fmt("held-out %.2f dB ssim %.3f, %zu B = %.1f%% of %zu B raw, %zu anchors, %.0f s", r.held_out.psnr,
              r.held_out.ssim, r.bytes, 100.0 * ratio, r.raw_bytes, r.anchors, r.seconds)};
}

// ------------------------------------------------------------------ 6

Outcome entropy_normalization() {
  Rng rng(606);
  double worst_gauss = 0.0, worst_bottleneck = 0.0, min_bits = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const double mean = rng.uniform(-10, 10);
    const double scale = std::exp(rng.uniform(std::log(kMinScale), std::log(50.0)));
    const double step = std::max(std::exp(rng.uniform(std::log(kMinStep), std::log(4.0))), scale / 2000.0);
    const double c = std::round(mean / step);
    // the mass beyond 12 sigma is below 1e-32
    const long reach = static_cast<long>(std::ceil(12.0 * scale / step)) + 2;
    double sum = 0.0;
    for (long i = -reach; i <= reach; ++i) {
      const double v = (c + static_cast<double>(i)) * step;
      sum += discrete_gaussian_mass(v, mean, scale, step);
      min_bits = std::min(min_bits, discrete_gaussian_bits(v, mean, scale, step));
    }
    worst_gauss = std::max(worst_gauss, std::abs(sum - 1.0));
  }
  for (int t = 0; t < 200; ++t) {
    FactorizedBottleneck b(3, 1 + static_cast<int>(rng.index(16)));
    for (double& v : b.logits) v = 3.0 * rng.normal();
    for (std::size_t d = 0; d < b.dims; ++d) {
      double sum = 0.0;
      for (int q = -b.support; q <= b.support; ++q) sum += bottleneck_pmf(b, d, q);
      worst_bottleneck = std::max(worst_bottleneck, std::abs(sum - 1.0));
    }
    std::vector<double> latent(3);
    for (double& v : latent) v = std::round(rng.uniform(-20, 20));
    min_bits = std::min(min_bits, bottleneck_bits(b, latent));
  }
  const SceneModel m = test::random_model(rng, 40);
  const RateBreakdown r = model_rate(quantize_model(m));
  min_bits = std::min({min_bits, r.anchor_embeddings, r.anchor_hyper, r.covariances});
  return {worst_gauss <= 1e-6 && worst_bottleneck <= 1e-6 && min_bits >= 0.0,
          fmt("max |sum - 1|: gaussian %.1e bottleneck %.1e; min bits %.3g", worst_gauss, worst_bottleneck, min_bits)};
}

// ------------------------------------------------------------------ 7

Outcome temporal_pipeline() {
  BlobOptions bo;
  BlobTruth truth;
  const SceneData seq = moving_blob_sequence(bo, &truth);
  std::vector<std::vector<TrainView>> frames;
  for (std::size_t t = 0; t < seq.frame_count(); ++t) frames.push_back(seq.training_views(t));
  TrainConfig intra;
  intra.iterations = 3000;
  intra.max_anchors = 800;
  intra.seed = 3;
  TemporalConfig tc;
  const auto t0 = std::chrono::steady_clock::now();
  const SequenceResult r = train_sequence(frames, seq.points, small_model_config(), intra, tc, progress);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  // (a) anchors of the intra frame lying inside the blob move with it
  const SceneModel& iscene = r.states[0].model;
  std::vector<std::size_t> moving;
  for (std::size_t i = 0; i < iscene.anchors.size(); ++i)
    if (norm(sub(iscene.anchors[i].location, truth.centers[0])) <= bo.blob_radius) moving.push_back(i);
  double min_flagged = 1.0;
  for (std::size_t t = 1; t < r.states.size(); ++t) {
    std::size_t flagged = 0;
    for (std::size_t i : moving) flagged += r.states[t].dynamic[i] != 0;
    min_flagged = std::min(min_flagged, moving.empty() ? 0.0 : static_cast<double>(flagged) / moving.size());
  }
  const bool a = !moving.empty() && min_flagged >= 0.9;

  // (b) static anchors keep their geometry bit for bit
  std::size_t static_checked = 0, static_changed = 0;
  for (std::size_t t = 1; t < r.states.size(); ++t) {
    const FrameState& cur = r.states[t];
    const FrameState& prev = r.states[t - 1];
    const std::size_t k = cur.model.k();
    for (std::size_t c = 0; c < prev.geometry.size(); ++c) {
      if (cur.dynamic[c / k]) continue;
      ++static_checked;
      if (!(cur.geometry[c].mean == prev.geometry[c].mean) || !(cur.geometry[c].covariance == prev.geometry[c].covariance))
        ++static_changed;
    }
  }
  const bool b = static_checked > 0 && static_changed == 0;

  // (c) P-frame payload relative to the I-frame payload
  double p_mean = 0.0;
  for (std::size_t t = 1; t < r.report.size(); ++t) p_mean += static_cast<double>(r.report[t].payload_bytes);
  p_mean /= static_cast<double>(r.report.size() - 1);
  const double ratio = p_mean / static_cast<double>(r.report[0].payload_bytes);
  const bool c = ratio <= 0.3;

  // (d) decoder states match the encoder reference
  const std::vector<FrameState> decoded = decode_sequence(r.streams);
  std::size_t equal = 0;
  for (std::size_t t = 0; t < decoded.size() && t < r.states.size(); ++t) equal += frame_states_equal(decoded[t], r.states[t]);
  const bool d = decoded.size() == r.states.size() && equal == r.states.size();

  return {a && b && c && d,
          fmt("(a) %s min %.0f%% of %zu moving anchors dynamic (b) %s %zu static checks, %zu changed "
              "(c) %s P/I payload %.1f%% (%.0f / %zu B) (d) %s %zu/%zu frames equal; %.0f s",
              a ? "ok" : "FAIL", 100.0 * min_flagged, moving.size(), b ? "ok" : "FAIL", static_checked, static_changed,
              c ? "ok" : "FAIL", 100.0 * ratio, p_mean, r.report[0].payload_bytes, d ? "ok" : "FAIL", equal,
              r.states.size(), seconds)};
}

// ------------------------------------------------------------------ 8

Outcome significance() {
  const double neutral = deformation_significance(Deformation{});
  Rng rng(808);
  double lo = 2.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    Deformation d;
    d.rotation = quat_normalize(Quat{rng.normal(), rng.normal(), rng.normal(), rng.normal()});
    const double v = deformation_significance(d);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  double worst_half = 0.0;
  for (int i = 0; i < 100; ++i) {
    Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    axis = scale(axis, 1.0 / norm(axis));
    Deformation d;
    d.rotation = {0.0, axis[0], axis[1], axis[2]};
    worst_half = std::max(worst_half, std::abs(deformation_significance(d) - 1.0));
  }
  return {neutral == 0.0 && lo >= 0.0 && hi <= 2.0 && worst_half <= 1e-9,
          fmt("neutral %g, rotation term in [%.4f, %.4f], half turn error %.1e", neutral, lo, hi, worst_half)};
}

// ------------------------------------------------------------------ 9

Outcome ssim_oracle() {
  Rng rng(909);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    Image a(64, 64), b(64, 64);
    for (double& v : a.data) v = rng.uniform();
    for (std::size_t i = 0; i < b.size(); ++i)
      b.data[i] = t % 2 ? rng.uniform() : std::clamp(a.data[i] + 0.1 * (t % 5) * rng.normal(), 0.0, 1.0);
    worst = std::max(worst, std::abs(ssim(a, b) - test::brute_force_ssim(a, b)));
  }
  return {worst <= 1e-6, fmt("20 pairs, max difference %.1e", worst)};
}

struct Criterion {
  const char* name;
  std::function<Outcome()> run;
  double limit_seconds;
};

}  // namespace

int main(int argc, char** argv) {
  set_thread_count(1);
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const std::vector<Criterion> criteria{
      {"codec round trip", codec_round_trip, 60},
      {"rate model fidelity", rate_fidelity, 60},
      {"gradient correctness", gradient_check, 300},
      {"lambda monotonicity", lambda_monotonicity, 1800},
      {"toy static reconstruction", static_reconstruction, 1800},
      {"entropy normalization", entropy_normalization, 10},
      {"temporal pipeline", temporal_pipeline, 1800},
      {"deformation significance", significance, 60},
      {"ssim oracle", ssim_oracle, 60},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (s > criteria[i].limit_seconds) {
      o.pass = false;
      o.detail += fmt("; over the %.0f s limit", criteria[i].limit_seconds);
    }
    std::printf("%s %d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].name, o.detail.c_str(), s);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
