#include "cgs/renderer.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace cgs {

namespace {

// Screen-space footprint of a primitive; T is double or a Jet.
template <typename T>
struct Footprint {
  T u, v;
  T xx, xy, yy;  // regularized 2D covariance
  T depth;
};

template <typename T>
Footprint<T> project_generic(const std::array<T, 3>& mean, const std::array<T, 3>& scales,
                             const std::array<T, 4>& rotation, const Camera& cam) {
  const Mat3& w = cam.rotation;
  std::array<T, 3> p;
  for (int i = 0; i < 3; ++i)
    p[i] = mean[0] * w[i * 3 + 0] + mean[1] * w[i * 3 + 1] + mean[2] * w[i * 3 + 2] + cam.translation[i];
  const T& z = p[2];
  const T inv_z = T(1.0) / z;
  Footprint<T> f;
  f.depth = z;
  f.u = cam.fx * p[0] * inv_z + cam.cx;
  f.v = cam.fy * p[1] * inv_z + cam.cy;

  const auto r = quat_to_matrix(quat_normalize(rotation));
  // world covariance R diag(s^2) R^T
  std::array<T, 3> s2{scales[0] * scales[0], scales[1] * scales[1], scales[2] * scales[2]};
  std::array<T, 9> sigma;
  for (int i = 0; i < 3; ++i)
    for (int j = i; j < 3; ++j) {
      T acc = r[i * 3 + 0] * s2[0] * r[j * 3 + 0];
      acc += r[i * 3 + 1] * s2[1] * r[j * 3 + 1];
      acc += r[i * 3 + 2] * s2[2] * r[j * 3 + 2];
      sigma[i * 3 + j] = acc;
      sigma[j * 3 + i] = acc;
    }
  // camera-frame covariance W sigma W^T
  std::array<T, 9> ws;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      ws[i * 3 + j] = w[i * 3 + 0] * sigma[0 * 3 + j] + w[i * 3 + 1] * sigma[1 * 3 + j] +
                      w[i * 3 + 2] * sigma[2 * 3 + j];
  std::array<T, 9> m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      m[i * 3 + j] = ws[i * 3 + 0] * w[j * 3 + 0] + ws[i * 3 + 1] * w[j * 3 + 1] + ws[i * 3 + 2] * w[j * 3 + 2];
  // Jacobian of the perspective projection at the mean
  const T j00 = cam.fx * inv_z;
  const T j02 = -cam.fx * p[0] * inv_z * inv_z;
  const T j11 = cam.fy * inv_z;
  const T j12 = -cam.fy * p[1] * inv_z * inv_z;
  // rows of J M
  std::array<T, 3> a0, a1;
  for (int j = 0; j < 3; ++j) {
    a0[j] = j00 * m[0 * 3 + j] + j02 * m[2 * 3 + j];
    a1[j] = j11 * m[1 * 3 + j] + j12 * m[2 * 3 + j];
  }
  f.xx = a0[0] * j00 + a0[2] * j02 + kCovarianceBlur;
  f.xy = a0[1] * j11 + a0[2] * j12;
  f.yy = a1[1] * j11 + a1[2] * j12 + kCovarianceBlur;
  return f;
}

struct Prepared {
  std::uint32_t index;
  double u, v;
  double ca, cb, cc;  // conic (inverse 2D covariance)
  double color[3];
  double opacity;
  int x0, x1, y0, y1;
};

struct PreparedScene {
  std::vector<Prepared> items;                   // depth order
  std::vector<std::vector<std::uint32_t>> rows;  // per row: item positions overlapping it
};

PreparedScene prepare(std::span<const Gaussian3D> gaussians, const Camera& cam) {
  struct Keyed {
    double depth;
    std::uint32_t index;
    ProjectedGaussian p;
  };
  std::vector<Keyed> keyed;
  keyed.reserve(gaussians.size());
  for (std::size_t i = 0; i < gaussians.size(); ++i) {
    const auto p = project_gaussian(gaussians[i], cam);
    if (!p.visible) continue;
    keyed.push_back({p.depth, static_cast<std::uint32_t>(i), p});
  }
  std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
  });
  PreparedScene s;
  s.rows.resize(static_cast<std::size_t>(std::max(cam.height, 0)));
  for (const auto& k : keyed) {
    const auto& c = k.p.cov2d;
    const double det = c[0] * c[2] - c[1] * c[1];
    if (!(det > 0.0) || !std::isfinite(det)) continue;
    const double rx = 3.0 * std::sqrt(c[0]);
    const double ry = 3.0 * std::sqrt(c[2]);
    const double fx0 = std::max(0.0, std::ceil(k.p.u - rx));
    const double fx1 = std::min(cam.width - 1.0, std::floor(k.p.u + rx));
    const double fy0 = std::max(0.0, std::ceil(k.p.v - ry));
    const double fy1 = std::min(cam.height - 1.0, std::floor(k.p.v + ry));
    if (!(fx0 <= fx1) || !(fy0 <= fy1)) continue;
    const int x0 = static_cast<int>(fx0), x1 = static_cast<int>(fx1);
    const int y0 = static_cast<int>(fy0), y1 = static_cast<int>(fy1);
    const Gaussian3D& g = gaussians[k.index];
    Prepared it{k.index, k.p.u, k.p.v, c[2] / det, -c[1] / det, c[0] / det,
                {g.color[0], g.color[1], g.color[2]}, g.opacity, x0, x1, y0, y1};
    const auto pos = static_cast<std::uint32_t>(s.items.size());
    s.items.push_back(it);
    for (int y = y0; y <= y1; ++y) s.rows[static_cast<std::size_t>(y)].push_back(pos);
  }
  return s;
}

struct Contribution {
  std::uint32_t pos;
  double gauss;
  double weight;
  double transmittance;  // before this primitive
  bool clamped;
};

// Front-to-back compositing of one pixel; optionally records contributors.
inline void shade_pixel(const PreparedScene& s, int x, int y, double out[3],
                        std::vector<Contribution>* record, RasterStats* stats) {
  double t = 1.0;
  out[0] = out[1] = out[2] = 0.0;
  for (std::uint32_t pos : s.rows[static_cast<std::size_t>(y)]) {
    const Prepared& it = s.items[pos];
    if (x < it.x0 || x > it.x1) continue;
    const double dx = x - it.u, dy = y - it.v;
    const double power = 0.5 * (it.ca * dx * dx + 2.0 * it.cb * dx * dy + it.cc * dy * dy);
    const double gauss = std::exp(-power);
    double w = it.opacity * gauss;
    bool clamped = false;
    if (w > kMaxAlpha) {
      w = kMaxAlpha;
      clamped = true;
    }
    for (int c = 0; c < 3; ++c) out[c] += it.color[c] * w * t;
    if (record) record->push_back({pos, gauss, w, t, clamped});
    if (stats) {
      ++stats->contributions;
      if (clamped) ++stats->clamped;
    }
    t *= 1.0 - w;
    if (t < kMinTransmittance) {
      if (stats) ++stats->terminated;
      break;
    }
  }
}

}  // namespace

ProjectedGaussian project_gaussian(const Gaussian3D& g, const Camera& cam) {
  const auto f = project_generic<double>(g.mean, g.covariance.scales, g.covariance.rotation, cam);
  ProjectedGaussian p;
  p.depth = f.depth;
  if (!(f.depth > kNearPlane)) return p;
  p.visible = true;
  p.u = f.u;
  p.v = f.v;
  p.cov2d = {f.xx, f.xy, f.yy};
  return p;
}

Image rasterize(std::span<const Gaussian3D> gaussians, const Camera& cam, RasterStats* stats) {
  Image img(cam.width, cam.height, 0.0);
  const PreparedScene s = prepare(gaussians, cam);
  std::vector<RasterStats> chunk_stats(static_cast<std::size_t>(thread_count()));
  parallel_chunks(static_cast<std::size_t>(cam.height), [&](int chunk, std::size_t b, std::size_t e) {
    RasterStats* st = stats ? &chunk_stats[static_cast<std::size_t>(chunk)] : nullptr;
    for (std::size_t y = b; y < e; ++y)
      for (int x = 0; x < cam.width; ++x) {
        double out[3];
        shade_pixel(s, x, static_cast<int>(y), out, nullptr, st);
        for (int c = 0; c < 3; ++c) img.at(x, static_cast<int>(y), c) = out[c];
      }
  });
  if (stats) {
    *stats = {};
    for (const auto& st : chunk_stats) {
      stats->contributions += st.contributions;
      stats->clamped += st.clamped;
      stats->terminated += st.terminated;
    }
  }
  return img;
}

RasterGradients backprop_rasterize(std::span<const Gaussian3D> gaussians, const Camera& cam,
                                   const Image& image_gradient) {
  if (image_gradient.width != cam.width || image_gradient.height != cam.height)
    throw std::invalid_argument("backprop_rasterize: gradient size mismatch");
  const PreparedScene s = prepare(gaussians, cam);
  const std::size_t n = s.items.size();
  // per item: du, dv, dca, dcb, dcc, dopacity, dcolor[3]
  constexpr std::size_t kStride = 9;
  const int workers = thread_count();
  std::vector<std::vector<double>> partial(static_cast<std::size_t>(workers));
  parallel_chunks(static_cast<std::size_t>(cam.height), [&](int chunk, std::size_t b, std::size_t e) {
    auto& acc = partial[static_cast<std::size_t>(chunk)];
    acc.assign(n * kStride, 0.0);
    std::vector<Contribution> contrib;
    for (std::size_t yy = b; yy < e; ++yy) {
      const int y = static_cast<int>(yy);
      for (int x = 0; x < cam.width; ++x) {
        const double g[3] = {image_gradient.at(x, y, 0), image_gradient.at(x, y, 1),
                             image_gradient.at(x, y, 2)};
        if (g[0] == 0.0 && g[1] == 0.0 && g[2] == 0.0) continue;
        contrib.clear();
        double out[3];
        shade_pixel(s, x, y, out, &contrib, nullptr);
        double suffix[3] = {0.0, 0.0, 0.0};  // sum_{j>i} c_j w_j T_j
        for (std::size_t r = contrib.size(); r-- > 0;) {
          const Contribution& ct = contrib[r];
          const Prepared& it = s.items[ct.pos];
          double* a = acc.data() + static_cast<std::size_t>(ct.pos) * kStride;
          double dw = 0.0;
          for (int c = 0; c < 3; ++c) {
            a[6 + c] += g[c] * ct.weight * ct.transmittance;
            dw += g[c] * (it.color[c] * ct.transmittance - suffix[c] / (1.0 - ct.weight));
          }
          for (int c = 0; c < 3; ++c) suffix[c] += it.color[c] * ct.weight * ct.transmittance;
          if (ct.clamped) continue;
          a[5] += dw * ct.gauss;
          const double dpower = -dw * it.opacity * ct.gauss;
          const double dx = x - it.u, dy = y - it.v;
          a[0] += dpower * -(it.ca * dx + it.cb * dy);
          a[1] += dpower * -(it.cb * dx + it.cc * dy);
          a[2] += dpower * 0.5 * dx * dx;
          a[3] += dpower * dx * dy;
          a[4] += dpower * 0.5 * dy * dy;
        }
      }
    }
  });
  std::vector<double> acc(n * kStride, 0.0);
  for (const auto& p : partial)
    if (!p.empty())
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];

  RasterGradients out;
  out.gaussians.assign(gaussians.size(), GaussianGrad{});
  out.screen_gradient.assign(gaussians.size(), 0.0);
  using J10 = Jet<10>;
  for (std::size_t pos = 0; pos < n; ++pos) {
    const double* a = acc.data() + pos * kStride;
    const Prepared& it = s.items[pos];
    GaussianGrad& gg = out.gaussians[it.index];
    gg.opacity += a[5];
    for (int c = 0; c < 3; ++c) gg.color[c] += a[6 + c];
    out.screen_gradient[it.index] = std::hypot(a[0] * 0.5 * cam.width, a[1] * 0.5 * cam.height);
    if (a[0] == 0.0 && a[1] == 0.0 && a[2] == 0.0 && a[3] == 0.0 && a[4] == 0.0) continue;

    // conic -> covariance: dL/dSigma = -A (dL/dA) A for A = Sigma^-1
    const double ga = a[2], gb = 0.5 * a[3], gc = a[4];  // symmetric gradient w.r.t. conic matrix
    const double A[4] = {it.ca, it.cb, it.cb, it.cc};
    const double G[4] = {ga, gb, gb, gc};
    double AG[4], S[4];
    AG[0] = A[0] * G[0] + A[1] * G[2];
    AG[1] = A[0] * G[1] + A[1] * G[3];
    AG[2] = A[2] * G[0] + A[3] * G[2];
    AG[3] = A[2] * G[1] + A[3] * G[3];
    S[0] = -(AG[0] * A[0] + AG[1] * A[2]);
    S[1] = -(AG[0] * A[1] + AG[1] * A[3]);
    S[3] = -(AG[2] * A[1] + AG[3] * A[3]);
    const double dxx = S[0], dxy = 2.0 * S[1], dyy = S[3];

    const Gaussian3D& g = gaussians[it.index];
    std::array<J10, 3> mean, sc;
    std::array<J10, 4> rot;
    for (int i = 0; i < 3; ++i) {
      mean[i] = J10(g.mean[i], static_cast<std::size_t>(i));
      sc[i] = J10(g.covariance.scales[i], static_cast<std::size_t>(3 + i));
    }
    for (int i = 0; i < 4; ++i) rot[i] = J10(g.covariance.rotation[i], static_cast<std::size_t>(6 + i));
    const auto f = project_generic<J10>(mean, sc, rot, cam);
    for (std::size_t k = 0; k < 10; ++k) {
      const double d = a[0] * f.u.v[k] + a[1] * f.v.v[k] + dxx * f.xx.v[k] + dxy * f.xy.v[k] +
                       dyy * f.yy.v[k];
      if (k < 3)
        gg.mean[k] += d;
      else if (k < 6)
        gg.scales[k - 3] += d;
      else
        gg.rotation[k - 6] += d;
    }
  }
  return out;
}

double mse(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw std::invalid_argument("image size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return a.data.empty() ? 0.0 : s / static_cast<double>(a.data.size());
}

double psnr(const Image& a, const Image& b) {
  const double m = mse(a, b);
  if (m < 1e-10) return 100.0;
  return std::min(100.0, 10.0 * std::log10(1.0 / m));
}

std::array<double, 11> ssim_window() {
  std::array<double, 11> w{};
  double sum = 0.0;
  for (int i = 0; i < 11; ++i) {
    const double x = i - 5;
    w[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
    sum += w[static_cast<std::size_t>(i)];
  }
  for (auto& v : w) v /= sum;
  return w;
}

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

// Zero-padded separable Gaussian filter of one plane (w x h).
void blur(const std::vector<double>& in, std::vector<double>& out, int w, int h) {
  static const auto win = ssim_window();
  std::vector<double> tmp(in.size(), 0.0);
  out.assign(in.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -5; k <= 5; ++k) {
        const int xx = x + k;
        if (xx < 0 || xx >= w) continue;
        s += win[static_cast<std::size_t>(k + 5)] * in[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -5; k <= 5; ++k) {
        const int yy = y + k;
        if (yy < 0 || yy >= h) continue;
        s += win[static_cast<std::size_t>(k + 5)] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = s;
    }
}

struct SsimPlanes {
  std::vector<double> mx, my, sxx, syy, sxy;
};

SsimPlanes ssim_planes(const Image& a, const Image& b, int c) {
  const int w = a.width, h = a.height;
  const std::size_t n = static_cast<std::size_t>(w) * h;
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = a.data[i * 3 + c];
    y[i] = b.data[i * 3 + c];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  SsimPlanes p;
  blur(x, p.mx, w, h);
  blur(y, p.my, w, h);
  blur(xx, p.sxx, w, h);
  blur(yy, p.syy, w, h);
  blur(xy, p.sxy, w, h);
  return p;
}

void check_same(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw std::invalid_argument("image size mismatch");
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  check_same(a, b);
  const std::size_t n = static_cast<std::size_t>(a.width) * a.height;
  if (n == 0) return 1.0;
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    const auto p = ssim_planes(a, b, c);
    for (std::size_t i = 0; i < n; ++i) {
      const double mx = p.mx[i], my = p.my[i];
      const double vx = p.sxx[i] - mx * mx, vy = p.syy[i] - my * my, cxy = p.sxy[i] - mx * my;
      total += ((2.0 * mx * my + kC1) * (2.0 * cxy + kC2)) /
               ((mx * mx + my * my + kC1) * (vx + vy + kC2));
    }
  }
  return total / static_cast<double>(3 * n);
}

Image ssim_gradient(const Image& a, const Image& b) {
  check_same(a, b);
  const int w = a.width, h = a.height;
  const std::size_t n = static_cast<std::size_t>(w) * h;
  Image grad(w, h, 0.0);
  const double inv = 1.0 / static_cast<double>(3 * n);
  std::vector<double> dmu(n), dxx(n), dxy(n), bmu, bxx, bxy;
  for (int c = 0; c < 3; ++c) {
    const auto p = ssim_planes(a, b, c);
    for (std::size_t i = 0; i < n; ++i) {
      const double mx = p.mx[i], my = p.my[i];
      const double vx = p.sxx[i] - mx * mx, vy = p.syy[i] - my * my, cxy = p.sxy[i] - mx * my;
      const double ln = 2.0 * mx * my + kC1, ld = mx * mx + my * my + kC1;
      const double cn = 2.0 * cxy + kC2, cd = vx + vy + kC2;
      const double s = (ln * cn) / (ld * cd);
      const double d_mx = s * (2.0 * my / ln - 2.0 * mx / ld);
      const double d_vx = -s / cd;
      const double d_cxy = 2.0 * s / cn;
      dmu[i] = inv * (d_mx - 2.0 * mx * d_vx - my * d_cxy);
      dxx[i] = inv * d_vx;
      dxy[i] = inv * d_cxy;
    }
    blur(dmu, bmu, w, h);
    blur(dxx, bxx, w, h);
    blur(dxy, bxy, w, h);
    for (std::size_t i = 0; i < n; ++i) {
      const double x = a.data[i * 3 + c], y = b.data[i * 3 + c];
      grad.data[i * 3 + c] = bmu[i] + 2.0 * x * bxx[i] + y * bxy[i];
    }
  }
  return grad;
}

double distortion(const Image& a, const Image& b) {
  check_same(a, b);
  double l1 = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) l1 += std::abs(a.data[i] - b.data[i]);
  if (!a.data.empty()) l1 /= static_cast<double>(a.data.size());
  return 0.8 * l1 + 0.2 * (1.0 - ssim(a, b));
}

Image distortion_gradient(const Image& a, const Image& b) {
  Image g = ssim_gradient(a, b);
  const double inv = a.data.empty() ? 0.0 : 1.0 / static_cast<double>(a.data.size());
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
    g.data[i] = 0.8 * sgn * inv - 0.2 * g.data[i];
  }
  return g;
}

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double v = std::clamp(img.data[i], 0.0, 1.0);
    buf[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  while (in) {
    in >> std::ws;
    if (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      continue;
    }
    in >> tok;
    break;
  }
  return tok;
}

}  // namespace

Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  if (next_token(f) != "P6") throw DataError(path + ": not a binary PPM (P6)");
  int w = 0, h = 0, maxv = 0;
  try {
    w = std::stoi(next_token(f));
    h = std::stoi(next_token(f));
    maxv = std::stoi(next_token(f));
  } catch (const std::exception&) {
    throw DataError(path + ": malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxv <= 0 || maxv > 255) throw DataError(path + ": unsupported PPM header");
  f.get();
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (f.gcount() != static_cast<std::streamsize>(buf.size())) throw DataError(path + ": truncated PPM");
  Image img(w, h);
  for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / static_cast<double>(maxv);
  return img;
}

void write_float_raw(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i) {
      const float v = static_cast<float>(img.data[i * 3 + c]);
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      const unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                  static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
      f.write(reinterpret_cast<const char*>(b), 4);
    }
  nlohmann::json meta = {{"width", img.width}, {"height", img.height}, {"channels", 3},
                         {"layout", "planar"}, {"dtype", "float32"}, {"endian", "little"}};
  std::ofstream m(path + ".json");
  m << meta.dump(2) << "\n";
}

Image read_float_raw(const std::string& path) {
  std::ifstream m(path + ".json");
  if (!m) throw DataError("cannot open " + path + ".json");
  nlohmann::json meta;
  try {
    m >> meta;
  } catch (const std::exception& e) {
    throw DataError(path + ".json: " + e.what());
  }
  const int w = meta.value("width", 0), h = meta.value("height", 0);
  if (w <= 0 || h <= 0 || meta.value("channels", 0) != 3) throw DataError(path + ".json: bad metadata");
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  Image img(w, h);
  const std::size_t n = static_cast<std::size_t>(w) * h;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i) {
      unsigned char b[4];
      f.read(reinterpret_cast<char*>(b), 4);
      if (f.gcount() != 4) throw DataError(path + ": truncated float image");
      const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
      float v;
      std::memcpy(&v, &bits, 4);
      img.data[i * 3 + c] = v;
    }
  return img;
}

}  // namespace cgs
