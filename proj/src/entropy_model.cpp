#include "cgs/entropy_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cgs/codec.hpp"

namespace cgs {

Quantized quantize(double value, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("quantize: step must be positive");
  const auto idx = static_cast<std::int64_t>(round_even(value / step));
  return {idx, static_cast<double>(idx) * step};
}

double quantize_value(double value, double step) { return quantize(value, step).value; }

double noisy_surrogate(double value, double step, double noise) { return value + step * noise; }

namespace {

struct BinProb {
  double p;
  double a, b;  // standardized upper and lower bin edges
};

BinProb bin_prob(double value, double mean, double scale, double step) {
  const double d = value - mean;
  const double a = (d + 0.5 * step) / scale;
  const double b = (d - 0.5 * step) / scale;
  // evaluate on the near tail to avoid cancellation
  const double p = d > 0.0 ? normal_cdf(-b) - normal_cdf(-a) : normal_cdf(a) - normal_cdf(b);
  return {p, a, b};
}

}  // namespace

double discrete_gaussian_mass(double value, double mean, double scale, double step) {
  return bin_prob(value, mean, scale, step).p;
}

double discrete_gaussian_prob(double value, double mean, double scale, double step) {
  return std::max(discrete_gaussian_mass(value, mean, scale, step), kMinProb);
}

double discrete_gaussian_bits(double value, double mean, double scale, double step) {
  return -std::log2(discrete_gaussian_prob(value, mean, scale, step));
}

BitsGrad discrete_gaussian_bits_grad(double value, double mean, double scale, double step) {
  const BinProb bp = bin_prob(value, mean, scale, step);
  BitsGrad g;
  if (bp.p <= kMinProb) {
    g.bits = -std::log2(kMinProb);
    return g;
  }
  g.bits = -std::log2(bp.p);
  const double pa = normal_pdf(bp.a), pb = normal_pdf(bp.b);
  const double k = -1.0 / (bp.p * kLn2);
  const double dp_dv = (pa - pb) / scale;
  g.d_value = k * dp_dv;
  g.d_mean = -k * dp_dv;
  g.d_step = k * (pa + pb) / (2.0 * scale);
  g.d_scale = k * -(bp.a * pa - bp.b * pb) / scale;
  return g;
}

namespace {

double step_activation(double x) { return std::max(softplus(x), kMinStep); }
double step_activation_grad(double x) { return softplus(x) > kMinStep ? softplus_grad(x) : 0.0; }
double scale_activation(double x) { return std::max(softplus(x), kMinScale); }
double scale_activation_grad(double x) { return softplus(x) > kMinScale ? softplus_grad(x) : 0.0; }

EntropyParams split_params(const std::vector<double>& out) {
  const std::size_t n = out.size() / 2;
  EntropyParams p;
  p.mean.assign(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(n));
  p.scale.resize(n);
  for (std::size_t i = 0; i < n; ++i) p.scale[i] = scale_activation(out[n + i]);
  return p;
}

std::vector<double> concat(std::span<const double> a, std::span<const double> b) {
  std::vector<double> x(a.begin(), a.end());
  x.insert(x.end(), b.begin(), b.end());
  return x;
}

void check_dim(const Affine& head, std::size_t n, const char* what) {
  if (head.in != n) throw std::invalid_argument(std::string(what) + ": input dimension mismatch");
}

}  // namespace

QuantizationSteps predict_steps(const EntropyNetworks& nets, std::span<const double> prior) {
  check_dim(nets.step_head, prior.size(), "predict_steps");
  const auto raw = nets.step_head.forward(prior);
  return {step_activation(raw[0]), step_activation(raw[1]), step_activation(raw[2])};
}

EntropyParams predict_embedding_entropy_params(const EntropyNetworks& nets, std::span<const double> hyper,
                                               std::span<const double> prior) {
  check_dim(nets.embedding_head, hyper.size() + prior.size(), "predict_embedding_entropy_params");
  return split_params(nets.embedding_head.forward(concat(hyper, prior)));
}

EntropyParams predict_coupled_entropy_params(const EntropyNetworks& nets, std::span<const double> hyper,
                                             std::span<const double> prior) {
  check_dim(nets.coupled_head, hyper.size() + prior.size(), "predict_coupled_entropy_params");
  return split_params(nets.coupled_head.forward(concat(hyper, prior)));
}

EntropyParams predict_covariance_entropy_params(const EntropyNetworks& nets, std::span<const double> prior) {
  check_dim(nets.covariance_head, prior.size(), "predict_covariance_entropy_params");
  return split_params(nets.covariance_head.forward(prior));
}

std::vector<double> bottleneck_masses(const FactorizedBottleneck& b, std::size_t dim) {
  const std::size_t s = b.segments();
  const double* l = b.logits.data() + dim * s;
  const double mx = *std::max_element(l, l + s);
  std::vector<double> m(s);
  double sum = 0.0;
  for (std::size_t i = 0; i < s; ++i) {
    m[i] = std::exp(l[i] - mx);
    sum += m[i];
  }
  for (auto& v : m) v /= sum;
  return m;
}

namespace {

// CDF at x plus its coefficients c_i (CDF = sum c_i m_i) and density.
struct CdfEval {
  double cdf = 0.0;
  double density = 0.0;
  int segment = -1;  // segment containing x, -1 below, segments() above
  double frac = 0.0;
};

CdfEval eval_cdf(const std::vector<double>& m, int support, double x) {
  CdfEval e;
  const int s = 2 * support;
  const double u = x + support;
  if (std::isnan(u)) throw NumericError("bottleneck: non-finite latent");
  if (u <= 0.0) {
    e.segment = -1;
    return e;
  }
  if (u >= s) {
    e.segment = s;
    e.cdf = 1.0;
    return e;
  }
  const int j = std::min(static_cast<int>(std::floor(u)), s - 1);
  e.segment = j;
  e.frac = u - j;
  double c = 0.0;
  for (int i = 0; i < j; ++i) c += m[static_cast<std::size_t>(i)];
  e.cdf = c + e.frac * m[static_cast<std::size_t>(j)];
  e.density = m[static_cast<std::size_t>(j)];
  return e;
}

double coef(const CdfEval& e, int i) {
  if (i < e.segment) return 1.0;
  if (i == e.segment) return e.frac;
  return 0.0;
}

bool is_integer(double x) { return std::floor(x) == x; }

}  // namespace

double bottleneck_cdf(const FactorizedBottleneck& b, std::size_t dim, double x) {
  return eval_cdf(bottleneck_masses(b, dim), b.support, x).cdf;
}

double bottleneck_pmf(const FactorizedBottleneck& b, std::size_t dim, int q) {
  if (q < -b.support || q > b.support) return kMinProb;
  const auto m = bottleneck_masses(b, dim);
  const int lo = q + b.support - 1, hi = q + b.support;
  double p = 0.0;
  if (lo >= 0) p += 0.5 * m[static_cast<std::size_t>(lo)];
  if (hi < static_cast<int>(m.size())) p += 0.5 * m[static_cast<std::size_t>(hi)];
  return std::max(p, kMinProb);
}

double bottleneck_bits(const FactorizedBottleneck& b, std::span<const double> latent) {
  if (latent.size() != b.dims) throw std::invalid_argument("bottleneck_bits: dimension mismatch");
  double bits = 0.0;
  for (std::size_t d = 0; d < b.dims; ++d) {
    const double x = latent[d];
    double p;
    if (is_integer(x) && std::abs(x) <= b.support) {
      p = bottleneck_pmf(b, d, static_cast<int>(x));
    } else {
      const auto m = bottleneck_masses(b, d);
      p = std::max(eval_cdf(m, b.support, x + 0.5).cdf - eval_cdf(m, b.support, x - 0.5).cdf, kMinProb);
    }
    bits -= std::log2(p);
  }
  return bits;
}

double bottleneck_bits_grad(const FactorizedBottleneck& b, std::span<const double> latent, double upstream,
                            std::span<double> d_latent, FactorizedBottleneck& grad) {
  if (latent.size() != b.dims || d_latent.size() != b.dims)
    throw std::invalid_argument("bottleneck_bits_grad: dimension mismatch");
  const int s = static_cast<int>(b.segments());
  double bits = 0.0;
  for (std::size_t d = 0; d < b.dims; ++d) {
    const auto m = bottleneck_masses(b, d);
    const CdfEval hi = eval_cdf(m, b.support, latent[d] + 0.5);
    const CdfEval lo = eval_cdf(m, b.support, latent[d] - 0.5);
    const double p = hi.cdf - lo.cdf;
    if (p <= kMinProb) {
      bits -= std::log2(kMinProb);
      continue;
    }
    bits -= std::log2(p);
    const double k = -upstream / (p * kLn2);
    d_latent[d] += k * (hi.density - lo.density);
    double* gl = grad.logits.data() + d * static_cast<std::size_t>(s);
    for (int i = 0; i < s; ++i) {
      const double mi = m[static_cast<std::size_t>(i)];
      // d CDF / d logit_i = m_i (c_i - CDF)
      const double dp = mi * (coef(hi, i) - hi.cdf) - mi * (coef(lo, i) - lo.cdf);
      gl[i] += k * dp;
    }
  }
  return bits;
}

std::vector<double> quantized_hyper(const Affine& encoder, std::span<const double> x, int support) {
  auto h = encoder.forward(x);
  for (auto& v : h) v = std::clamp(round_even(v), -static_cast<double>(support), static_cast<double>(support));
  return h;
}

AnchorContext anchor_context(const SceneModel& model, const Vec3& location) {
  AnchorContext c;
  c.prior = query(model.prior_grid, location);
  c.steps = predict_steps(model.entropy, c.prior);
  return c;
}

namespace {

double coded_bits(double value, double mean, double scale, double step) {
  return gaussian_index_bits(quantize(value, step).index, mean, scale, step);
}

}  // namespace

RateBreakdown model_rate(const SceneModel& model) {
  RateBreakdown r;
  const auto& e = model.entropy;
  const std::size_t k = model.k();
  for (std::size_t i = 0; i < model.anchors.size(); ++i) {
    const auto& a = model.anchors[i];
    const AnchorContext ctx = anchor_context(model, a.location);

    RefEmbedding f;
    for (std::size_t j = 0; j < kRefDim; ++j) f[j] = quantize_value(a.ref_embedding[j], ctx.steps.ref);
    const auto eta = quantized_hyper(e.anchor_hyper, f, e.anchor_bottleneck.support);
    r.anchor_hyper += bottleneck_bits(e.anchor_bottleneck, eta);
    const auto pf = predict_embedding_entropy_params(e, eta, ctx.prior);
    for (std::size_t j = 0; j < kRefDim; ++j)
      r.anchor_embeddings += coded_bits(f[j], pf.mean[j], pf.scale[j], ctx.steps.ref);

    const auto cov = a.cov_params();
    const auto pc = predict_covariance_entropy_params(e, ctx.prior);
    for (std::size_t j = 0; j < kCovParams; ++j)
      r.covariances += coded_bits(quantize_value(cov[j], ctx.steps.cov), pc.mean[j], pc.scale[j],
                                              ctx.steps.cov);

    for (std::size_t c = i * k; c < (i + 1) * k; ++c) {
      ResEmbedding res;
      for (std::size_t j = 0; j < kResDim; ++j)
        res[j] = quantize_value(model.coupled[c].res_embedding[j], ctx.steps.res);
      const auto eg = quantized_hyper(e.coupled_hyper, res, e.coupled_bottleneck.support);
      r.coupled_hyper += bottleneck_bits(e.coupled_bottleneck, eg);
      const auto pr = predict_coupled_entropy_params(e, eg, ctx.prior);
      for (std::size_t j = 0; j < kResDim; ++j)
        r.coupled_embeddings += coded_bits(res[j], pr.mean[j], pr.scale[j], ctx.steps.res);
    }
  }
  return r;
}

QuantizationNoise QuantizationNoise::zero(const SceneModel& model) {
  QuantizationNoise n;
  n.values = PrimitiveValues::zeros_like(PrimitiveValues::from_model(model));
  n.anchor_hyper.assign(model.anchors.size(), std::vector<double>(model.entropy.anchor_bottleneck.dims, 0.0));
  n.coupled_hyper.assign(model.coupled.size(), std::vector<double>(model.entropy.coupled_bottleneck.dims, 0.0));
  return n;
}

QuantizationNoise QuantizationNoise::sample(const SceneModel& model, Rng& rng) {
  QuantizationNoise n = zero(model);
  auto fill = [&](auto& range) {
    for (auto& v : range) v = rng.uniform() - 0.5;
  };
  for (auto& v : n.values.ref) fill(v);
  for (auto& v : n.values.cov) fill(v);
  for (auto& v : n.values.res) fill(v);
  for (auto& v : n.anchor_hyper) fill(v);
  for (auto& v : n.coupled_hyper) fill(v);
  return n;
}

TrainingRate training_rate(const SceneModel& model, const QuantizationNoise& noise) {
  TrainingRate t;
  const auto& e = model.entropy;
  const std::size_t k = model.k();
  t.values = PrimitiveValues::from_model(model);
  t.contexts.resize(model.anchors.size());
  t.step_pre.resize(model.anchors.size());
  for (std::size_t i = 0; i < model.anchors.size(); ++i) {
    const auto& a = model.anchors[i];
    AnchorContext& ctx = t.contexts[i];
    ctx.prior = query(model.prior_grid, a.location);
    const auto raw = e.step_head.forward(ctx.prior);
    t.step_pre[i] = {raw[0], raw[1], raw[2]};
    ctx.steps = {step_activation(raw[0]), step_activation(raw[1]), step_activation(raw[2])};

    auto& f = t.values.ref[i];
    for (std::size_t j = 0; j < kRefDim; ++j)
      f[j] = noisy_surrogate(a.ref_embedding[j], ctx.steps.ref, noise.values.ref[i][j]);
    auto eta = e.anchor_hyper.forward(a.ref_embedding);
    for (std::size_t j = 0; j < eta.size(); ++j) eta[j] += noise.anchor_hyper[i][j];
    t.bits.anchor_hyper += bottleneck_bits(e.anchor_bottleneck, eta);
    const auto pf = predict_embedding_entropy_params(e, eta, ctx.prior);
    for (std::size_t j = 0; j < kRefDim; ++j)
      t.bits.anchor_embeddings += discrete_gaussian_bits(f[j], pf.mean[j], pf.scale[j], ctx.steps.ref);

    auto& cv = t.values.cov[i];
    const auto cov = a.cov_params();
    const auto pc = predict_covariance_entropy_params(e, ctx.prior);
    for (std::size_t j = 0; j < kCovParams; ++j) {
      cv[j] = noisy_surrogate(cov[j], ctx.steps.cov, noise.values.cov[i][j]);
      t.bits.covariances += discrete_gaussian_bits(cv[j], pc.mean[j], pc.scale[j], ctx.steps.cov);
    }

    for (std::size_t c = i * k; c < (i + 1) * k; ++c) {
      auto& res = t.values.res[c];
      for (std::size_t j = 0; j < kResDim; ++j)
        res[j] = noisy_surrogate(model.coupled[c].res_embedding[j], ctx.steps.res, noise.values.res[c][j]);
      auto eg = e.coupled_hyper.forward(model.coupled[c].res_embedding);
      for (std::size_t j = 0; j < eg.size(); ++j) eg[j] += noise.coupled_hyper[c][j];
      t.bits.coupled_hyper += bottleneck_bits(e.coupled_bottleneck, eg);
      const auto pr = predict_coupled_entropy_params(e, eg, ctx.prior);
      for (std::size_t j = 0; j < kResDim; ++j)
        t.bits.coupled_embeddings += discrete_gaussian_bits(res[j], pr.mean[j], pr.scale[j], ctx.steps.res);
    }
  }
  return t;
}

namespace {

// Reverse pass of one coded vector under a head producing (mean, raw scale).
// Returns d loss / d head output; accumulates value and step gradients.
std::vector<double> coded_vector_backward(std::span<const double> values, const std::vector<double>& head_out,
                                          double step, double weight, std::span<double> d_values,
                                          double& d_step) {
  const std::size_t n = values.size();
  std::vector<double> dout(2 * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const double scale = scale_activation(head_out[n + j]);
    const BitsGrad g = discrete_gaussian_bits_grad(values[j], head_out[j], scale, step);
    d_values[j] += weight * g.d_value;
    d_step += weight * g.d_step;
    dout[j] = weight * g.d_mean;
    dout[n + j] = weight * g.d_scale * scale_activation_grad(head_out[n + j]);
  }
  return dout;
}

}  // namespace

void backprop_training_rate(const SceneModel& model, const QuantizationNoise& noise, const TrainingRate& fwd,
                            double rate_weight, const PrimitiveValues& dvalues, SceneModel& grad) {
  const auto& e = model.entropy;
  auto& ge = grad.entropy;
  const std::size_t k = model.k();
  const std::size_t hd = e.anchor_bottleneck.dims;
  const std::size_t hg = e.coupled_bottleneck.dims;
  for (std::size_t i = 0; i < model.anchors.size(); ++i) {
    const auto& a = model.anchors[i];
    auto& ga = grad.anchors[i];
    const AnchorContext& ctx = fwd.contexts[i];
    const std::size_t pd = ctx.prior.size();
    std::vector<double> d_prior(pd, 0.0);
    double d_step[3] = {0.0, 0.0, 0.0};

    // reference embedding
    {
      const auto& fbar = fwd.values.ref[i];
      auto eta = e.anchor_hyper.forward(a.ref_embedding);
      for (std::size_t j = 0; j < hd; ++j) eta[j] += noise.anchor_hyper[i][j];
      const auto x = concat(eta, ctx.prior);
      const auto out = e.embedding_head.forward(x);
      std::array<double, kRefDim> d_fbar{};
      for (std::size_t j = 0; j < kRefDim; ++j) d_fbar[j] = dvalues.ref[i][j];
      const auto dout = coded_vector_backward(fbar, out, ctx.steps.ref, rate_weight, d_fbar, d_step[0]);
      std::vector<double> dx(x.size(), 0.0);
      e.embedding_head.backward(x, dout, ge.embedding_head, dx);
      std::vector<double> d_eta(dx.begin(), dx.begin() + static_cast<std::ptrdiff_t>(hd));
      for (std::size_t j = 0; j < pd; ++j) d_prior[j] += dx[hd + j];
      bottleneck_bits_grad(e.anchor_bottleneck, eta, rate_weight, d_eta, ge.anchor_bottleneck);
      e.anchor_hyper.backward(a.ref_embedding, d_eta, ge.anchor_hyper, ga.ref_embedding);
      for (std::size_t j = 0; j < kRefDim; ++j) {
        ga.ref_embedding[j] += d_fbar[j];
        d_step[0] += d_fbar[j] * noise.values.ref[i][j];
      }
    }
    // covariance
    {
      const auto& cbar = fwd.values.cov[i];
      const auto out = e.covariance_head.forward(ctx.prior);
      std::array<double, kCovParams> d_cbar{};
      for (std::size_t j = 0; j < kCovParams; ++j) d_cbar[j] = dvalues.cov[i][j];
      const auto dout = coded_vector_backward(cbar, out, ctx.steps.cov, rate_weight, d_cbar, d_step[2]);
      e.covariance_head.backward(ctx.prior, dout, ge.covariance_head, d_prior);
      for (std::size_t j = 0; j < 3; ++j) ga.log_scales[j] += d_cbar[j];
      for (std::size_t j = 0; j < 4; ++j) ga.rotation[j] += d_cbar[3 + j];
      for (std::size_t j = 0; j < kCovParams; ++j) d_step[2] += d_cbar[j] * noise.values.cov[i][j];
    }
    // coupled embeddings
    for (std::size_t c = i * k; c < (i + 1) * k; ++c) {
      const auto& rbar = fwd.values.res[c];
      const auto& r = model.coupled[c].res_embedding;
      auto eta = e.coupled_hyper.forward(r);
      for (std::size_t j = 0; j < hg; ++j) eta[j] += noise.coupled_hyper[c][j];
      const auto x = concat(eta, ctx.prior);
      const auto out = e.coupled_head.forward(x);
      std::array<double, kResDim> d_rbar{};
      for (std::size_t j = 0; j < kResDim; ++j) d_rbar[j] = dvalues.res[c][j];
      const auto dout = coded_vector_backward(rbar, out, ctx.steps.res, rate_weight, d_rbar, d_step[1]);
      std::vector<double> dx(x.size(), 0.0);
      e.coupled_head.backward(x, dout, ge.coupled_head, dx);
      std::vector<double> d_eta(dx.begin(), dx.begin() + static_cast<std::ptrdiff_t>(hg));
      for (std::size_t j = 0; j < pd; ++j) d_prior[j] += dx[hg + j];
      bottleneck_bits_grad(e.coupled_bottleneck, eta, rate_weight, d_eta, ge.coupled_bottleneck);
      auto& gr = grad.coupled[c].res_embedding;
      e.coupled_hyper.backward(r, d_eta, ge.coupled_hyper, gr);
      for (std::size_t j = 0; j < kResDim; ++j) {
        gr[j] += d_rbar[j];
        d_step[1] += d_rbar[j] * noise.values.res[c][j];
      }
    }
    // steps
    std::array<double, 3> d_pre{};
    for (int j = 0; j < 3; ++j) d_pre[static_cast<std::size_t>(j)] = d_step[j] * step_activation_grad(fwd.step_pre[i][static_cast<std::size_t>(j)]);
    e.step_head.backward(ctx.prior, d_pre, ge.step_head, d_prior);
    backprop_query(model.prior_grid, a.location, d_prior, grad.prior_grid);
    const Vec3 dl = query_position_gradient(model.prior_grid, a.location, d_prior);
    for (int j = 0; j < 3; ++j) ga.location[static_cast<std::size_t>(j)] += dl[static_cast<std::size_t>(j)];
  }
}

}  // namespace cgs
