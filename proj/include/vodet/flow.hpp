#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "vodet/image.hpp"

namespace vodet {

struct FlowParams {
  double pyramid_scale = 0.5;
  int levels = 3;
  int window_size = 15;
  int iterations = 3;
  int poly_n = 5;
  double poly_sigma = 1.1;

  void validate() const {
    if (!(pyramid_scale > 0.0 && pyramid_scale < 1.0))
      throw std::invalid_argument("FlowParams: pyramid_scale must be in (0,1)");
    if (levels < 1) throw std::invalid_argument("FlowParams: levels must be >= 1");
    if (window_size < 1 || window_size % 2 == 0)
      throw std::invalid_argument("FlowParams: window_size must be odd and positive");
    if (iterations < 1) throw std::invalid_argument("FlowParams: iterations must be >= 1");
    if (poly_n < 5 || poly_n % 2 == 0)
      throw std::invalid_argument("FlowParams: poly_n must be odd and >= 5");
    if (!(poly_sigma > 0.0)) throw std::invalid_argument("FlowParams: poly_sigma must be > 0");
  }
};

// Displacement d at pixel x satisfies preceding(x) ~ target(x + d): content
// moving right between the two frames yields positive u.
struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<double> u;
  std::vector<double> v;

  FlowField() = default;
  FlowField(int w, int h)
      : width(w), height(h),
        u(static_cast<size_t>(w) * h, 0.0),
        v(static_cast<size_t>(w) * h, 0.0) {}
  size_t index(int x, int y) const { return static_cast<size_t>(y) * width + x; }
};

// Local quadratic model around each pixel p:
//   f(p + (du,dv)) ~ c + bx*du + by*dv + axx*du^2 + ayy*dv^2 + 2*axy*du*dv
// i.e. A = [[axx, axy], [axy, ayy]], b = (bx, by) in f ~ x^T A x + b^T x + c.
struct PolyField {
  int width = 0;
  int height = 0;
  std::vector<double> c, bx, by, axx, ayy, axy;

  PolyField(int w, int h)
      : width(w), height(h) {
    size_t n = static_cast<size_t>(w) * h;
    c.assign(n, 0.0);
    bx.assign(n, 0.0);
    by.assign(n, 0.0);
    axx.assign(n, 0.0);
    ayy.assign(n, 0.0);
    axy.assign(n, 0.0);
  }
  size_t index(int x, int y) const { return static_cast<size_t>(y) * width + x; }
};

// Gaussian-weighted least-squares fit of the quadratic model at every pixel,
// computed with separable correlations. Border pixels use replicated samples.
inline PolyField poly_expansion(const Image& gray, int n, double sigma) {
  if (gray.channels != 1) throw std::invalid_argument("poly_expansion: image must be single-channel");
  if (n < 5 || n % 2 == 0) throw std::invalid_argument("poly_expansion: n must be odd and >= 5");
  if (!(sigma > 0.0)) throw std::invalid_argument("poly_expansion: sigma must be > 0");
  if (gray.width < n || gray.height < n)
    throw std::invalid_argument("poly_expansion: image smaller than neighborhood");

  const int w = gray.width, h = gray.height, r = n / 2;
  std::vector<double> g(static_cast<size_t>(n));
  double gsum = 0.0;
  for (int i = -r; i <= r; ++i) {
    g[static_cast<size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    gsum += g[static_cast<size_t>(i + r)];
  }
  for (double& x : g) x /= gsum;
  double s2 = 0.0, s4 = 0.0;
  for (int i = -r; i <= r; ++i) {
    double wi = g[static_cast<size_t>(i + r)];
    s2 += wi * i * i;
    s4 += wi * i * i * i * i;
  }

  // horizontal pass: correlate rows with g, u*g, u^2*g
  size_t npx = static_cast<size_t>(w) * h;
  std::vector<double> t0(npx), t1(npx), t2(npx);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double a0 = 0, a1 = 0, a2 = 0;
      for (int i = -r; i <= r; ++i) {
        double f = gray.data[gray.index(std::clamp(x + i, 0, w - 1), y, 0)];
        double wi = g[static_cast<size_t>(i + r)];
        a0 += wi * f;
        a1 += wi * i * f;
        a2 += wi * i * i * f;
      }
      size_t idx = static_cast<size_t>(y) * w + x;
      t0[idx] = a0;
      t1[idx] = a1;
      t2[idx] = a2;
    }

  PolyField out(w, h);
  const double denom = s4 - s2 * s2;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double m1 = 0, mu = 0, mv = 0, muu = 0, mvv = 0, muv = 0;
      for (int j = -r; j <= r; ++j) {
        int yy = std::clamp(y + j, 0, h - 1);
        size_t idx = static_cast<size_t>(yy) * w + x;
        double wj = g[static_cast<size_t>(j + r)];
        m1 += wj * t0[idx];
        mv += wj * j * t0[idx];
        mvv += wj * j * j * t0[idx];
        mu += wj * t1[idx];
        muv += wj * j * t1[idx];
        muu += wj * t2[idx];
      }
      size_t idx = out.index(x, y);
      out.bx[idx] = mu / s2;
      out.by[idx] = mv / s2;
      out.axy[idx] = muv / (2.0 * s2 * s2);
      double sum_a = (muu + mvv - 2.0 * s2 * m1) / denom;
      double diff_a = (muu - mvv) / denom;
      out.axx[idx] = 0.5 * (sum_a + diff_a);
      out.ayy[idx] = 0.5 * (sum_a - diff_a);
      out.c[idx] = m1 - s2 * sum_a;
    }
  return out;
}

namespace detail {

// Sliding-window box blur with replicated borders, normalized by window area.
inline void box_blur_plane(std::vector<double>& plane, int w, int h, int radius,
                           std::vector<double>& scratch) {
  if (radius <= 0) return;
  scratch.resize(plane.size());
  const double inv = 1.0 / (2 * radius + 1);
  for (int y = 0; y < h; ++y) {
    const double* row = plane.data() + static_cast<size_t>(y) * w;
    double* dst = scratch.data() + static_cast<size_t>(y) * w;
    double s = 0.0;
    for (int i = -radius; i <= radius; ++i) s += row[std::clamp(i, 0, w - 1)];
    dst[0] = s * inv;
    for (int x = 1; x < w; ++x) {
      s += row[std::clamp(x + radius, 0, w - 1)] - row[std::clamp(x - radius - 1, 0, w - 1)];
      dst[x] = s * inv;
    }
  }
  for (int x = 0; x < w; ++x) {
    double s = 0.0;
    for (int j = -radius; j <= radius; ++j)
      s += scratch[static_cast<size_t>(std::clamp(j, 0, h - 1)) * w + x];
    plane[static_cast<size_t>(0) * w + x] = s * inv;
    for (int y = 1; y < h; ++y) {
      s += scratch[static_cast<size_t>(std::clamp(y + radius, 0, h - 1)) * w + x] -
           scratch[static_cast<size_t>(std::clamp(y - radius - 1, 0, h - 1)) * w + x];
      plane[static_cast<size_t>(y) * w + x] = s * inv;
    }
  }
}

inline double border_scale(int x, int y, int w, int h) {
  int d = std::min(std::min(x, y), std::min(w - 1 - x, h - 1 - y));
  return d >= 5 ? 1.0 : (d + 1) / 6.0;
}

// One displacement refinement: build the per-pixel normal equations
// G d = h from the coefficient fields warped by the current flow, average
// them over the window, and solve. Updates flow in place.
inline void refine_flow(const PolyField& r0, const PolyField& r1, FlowField& flow,
                        int window_size) {
  const int w = r0.width, h = r0.height;
  size_t npx = static_cast<size_t>(w) * h;
  std::vector<double> g11(npx), g12(npx), g22(npx), h1(npx), h2(npx);

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      size_t i = flow.index(x, y);
      double du = flow.u[i], dv = flow.v[i];
      double fx = x + du, fy = y + dv;
      double a_xx, a_yy, a_xy, dbx, dby;
      if (fx >= 0.0 && fx <= w - 1 && fy >= 0.0 && fy <= h - 1) {
        int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
        int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
        double tx = fx - x0, ty = fy - y0;
        double w00 = (1 - tx) * (1 - ty), w01 = tx * (1 - ty);
        double w10 = (1 - tx) * ty, w11 = tx * ty;
        size_t i00 = r1.index(x0, y0), i01 = r1.index(x1, y0);
        size_t i10 = r1.index(x0, y1), i11 = r1.index(x1, y1);
        auto lerp = [&](const std::vector<double>& f) {
          return w00 * f[i00] + w01 * f[i01] + w10 * f[i10] + w11 * f[i11];
        };
        a_xx = 0.5 * (r0.axx[i] + lerp(r1.axx));
        a_yy = 0.5 * (r0.ayy[i] + lerp(r1.ayy));
        a_xy = 0.5 * (r0.axy[i] + lerp(r1.axy));
        dbx = 0.5 * (r0.bx[i] - lerp(r1.bx)) + a_xx * du + a_xy * dv;
        dby = 0.5 * (r0.by[i] - lerp(r1.by)) + a_xy * du + a_yy * dv;
      } else {
        // warped point fell outside: no evidence, vote for the current flow
        a_xx = r0.axx[i];
        a_yy = r0.ayy[i];
        a_xy = r0.axy[i];
        dbx = a_xx * du + a_xy * dv;
        dby = a_xy * du + a_yy * dv;
      }
      double sc = border_scale(x, y, w, h);
      a_xx *= sc;
      a_yy *= sc;
      a_xy *= sc;
      dbx *= sc;
      dby *= sc;
      g11[i] = a_xx * a_xx + a_xy * a_xy;
      g12[i] = a_xy * (a_xx + a_yy);
      g22[i] = a_yy * a_yy + a_xy * a_xy;
      h1[i] = a_xx * dbx + a_xy * dby;
      h2[i] = a_xy * dbx + a_yy * dby;
    }

  std::vector<double> scratch;
  int radius = window_size / 2;
  box_blur_plane(g11, w, h, radius, scratch);
  box_blur_plane(g12, w, h, radius, scratch);
  box_blur_plane(g22, w, h, radius, scratch);
  box_blur_plane(h1, w, h, radius, scratch);
  box_blur_plane(h2, w, h, radius, scratch);

  for (size_t i = 0; i < npx; ++i) {
    double det = g11[i] * g22[i] - g12[i] * g12[i];
    if (det > 1e-12) {
      flow.u[i] = (g22[i] * h1[i] - g12[i] * h2[i]) / det;
      flow.v[i] = (g11[i] * h2[i] - g12[i] * h1[i]) / det;
    }
    // degenerate neighborhood (e.g. constant region): keep current estimate
  }
}

inline Image as_gray(const Image& img) {
  return img.channels == 1 ? img : to_grayscale(img);
}

}  // namespace detail

// Coarse-to-fine dense flow. Each pyramid level smooths and downscales the
// full-resolution frames, fits polynomial expansions, and refines the flow
// warm-started from the coarser level.
inline FlowField farneback_flow(const Image& preceding, const Image& target,
                                const FlowParams& params = {}) {
  params.validate();
  if (preceding.width != target.width || preceding.height != target.height)
    throw std::invalid_argument("farneback_flow: frame dimensions differ");
  Image g0 = detail::as_gray(preceding);
  Image g1 = detail::as_gray(target);
  const int w = g0.width, h = g0.height;
  const int min_side = std::max(params.poly_n, 16);
  if (std::min(w, h) < params.poly_n)
    throw std::invalid_argument("farneback_flow: frames smaller than poly_n");

  // drop pyramid levels that would shrink below a usable size
  int top = 0;
  for (int k = 1; k < params.levels; ++k) {
    double s = std::pow(params.pyramid_scale, k);
    if (std::lround(w * s) >= min_side && std::lround(h * s) >= min_side)
      top = k;
    else
      break;
  }

  FlowField flow;
  for (int k = top; k >= 0; --k) {
    double s = std::pow(params.pyramid_scale, k);
    int sw = static_cast<int>(std::lround(w * s));
    int sh = static_cast<int>(std::lround(h * s));
    double smooth_sigma = (1.0 / s - 1.0) * 0.5;
    Image l0 = g0, l1 = g1;
    if (k > 0) {
      l0 = resize_bilinear(gaussian_blur(g0, smooth_sigma), sw, sh);
      l1 = resize_bilinear(gaussian_blur(g1, smooth_sigma), sw, sh);
    }
    PolyField r0 = poly_expansion(l0, params.poly_n, params.poly_sigma);
    PolyField r1 = poly_expansion(l1, params.poly_n, params.poly_sigma);

    if (flow.width == 0) {
      flow = FlowField(sw, sh);
    } else if (flow.width != sw || flow.height != sh) {
      Image packed(flow.width, flow.height, 2);
      for (size_t i = 0; i < flow.u.size(); ++i) {
        packed.data[i * 2] = flow.u[i];
        packed.data[i * 2 + 1] = flow.v[i];
      }
      Image up = resize_bilinear(packed, sw, sh);
      double ux = static_cast<double>(sw) / flow.width;
      double vy = static_cast<double>(sh) / flow.height;
      flow = FlowField(sw, sh);
      for (size_t i = 0; i < flow.u.size(); ++i) {
        flow.u[i] = up.data[i * 2] * ux;
        flow.v[i] = up.data[i * 2 + 1] * vy;
      }
    }
    for (int it = 0; it < params.iterations; ++it)
      detail::refine_flow(r0, r1, flow, params.window_size);
  }
  return flow;
}

class FlowEstimator {
 public:
  virtual ~FlowEstimator() = default;
  virtual FlowField compute(const Image& preceding, const Image& target) const = 0;
};

class FarnebackFlow : public FlowEstimator {
 public:
  explicit FarnebackFlow(FlowParams params = {}) : params_(params) { params_.validate(); }
  FlowField compute(const Image& preceding, const Image& target) const override {
    return farneback_flow(preceding, target, params_);
  }
  const FlowParams& params() const { return params_; }

 private:
  FlowParams params_;
};

// Exhaustive integer-displacement search minimizing patch SAD. Slow and
// coarse, but independent of the polynomial machinery, so it serves as a
// cross-check on small translations.
class BlockMatchingFlow : public FlowEstimator {
 public:
  BlockMatchingFlow(int max_displacement = 4, int patch_radius = 3)
      : max_d_(max_displacement), patch_(patch_radius) {
    if (max_d_ < 1 || patch_ < 1)
      throw std::invalid_argument("BlockMatchingFlow: radii must be >= 1");
  }

  FlowField compute(const Image& preceding, const Image& target) const override {
    if (preceding.width != target.width || preceding.height != target.height)
      throw std::invalid_argument("BlockMatchingFlow: frame dimensions differ");
    Image g0 = detail::as_gray(preceding);
    Image g1 = detail::as_gray(target);
    const int w = g0.width, h = g0.height;
    FlowField flow(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double best = std::numeric_limits<double>::infinity();
        int best_du = 0, best_dv = 0;
        for (int dv = -max_d_; dv <= max_d_; ++dv)
          for (int du = -max_d_; du <= max_d_; ++du) {
            double sad = 0.0;
            for (int j = -patch_; j <= patch_; ++j)
              for (int i = -patch_; i <= patch_; ++i) {
                double a = g0.data[g0.index(std::clamp(x + i, 0, w - 1),
                                            std::clamp(y + j, 0, h - 1), 0)];
                double b = g1.data[g1.index(std::clamp(x + du + i, 0, w - 1),
                                            std::clamp(y + dv + j, 0, h - 1), 0)];
                sad += std::abs(a - b);
              }
            int d2 = du * du + dv * dv;
            int b2 = best_du * best_du + best_dv * best_dv;
            if (sad < best - 1e-12 || (std::abs(sad - best) <= 1e-12 && d2 < b2)) {
              best = sad;
              best_du = du;
              best_dv = dv;
            }
          }
        flow.u[flow.index(x, y)] = best_du;
        flow.v[flow.index(x, y)] = best_dv;
      }
    return flow;
  }

 private:
  int max_d_;
  int patch_;
};

// Three-channel encoding of a flow field: X and Y components clamped to
// +-clamp_px and mapped linearly onto [0,1] (zero motion at 0.5), plus the
// norm mapped onto [0,1]. Matches the value range of image channels.
inline Image flow_image(const FlowField& field, double clamp_px = 16.0) {
  if (!(clamp_px > 0.0)) throw std::invalid_argument("flow_image: clamp_px must be > 0");
  Image out(field.width, field.height, 3);
  for (int y = 0; y < field.height; ++y)
    for (int x = 0; x < field.width; ++x) {
      size_t i = field.index(x, y);
      double u = field.u[i], v = field.v[i];
      out.at(x, y, 0) = (std::clamp(u, -clamp_px, clamp_px) + clamp_px) / (2.0 * clamp_px);
      out.at(x, y, 1) = (std::clamp(v, -clamp_px, clamp_px) + clamp_px) / (2.0 * clamp_px);
      out.at(x, y, 2) = std::min(std::hypot(u, v), clamp_px) / clamp_px;
    }
  return out;
}

// Flat binary dump: magic "FLO1", u32 width, u32 height, then row-major
// interleaved (u, v) as little-endian f32.
inline void write_flow_file(const std::string& path, const FlowField& field) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_flow_file: cannot open " + path);
  f.write("FLO1", 4);
  uint32_t wh[2] = {static_cast<uint32_t>(field.width), static_cast<uint32_t>(field.height)};
  f.write(reinterpret_cast<const char*>(wh), sizeof(wh));
  std::vector<float> row(static_cast<size_t>(field.width) * 2);
  for (int y = 0; y < field.height; ++y) {
    for (int x = 0; x < field.width; ++x) {
      size_t i = field.index(x, y);
      row[static_cast<size_t>(x) * 2] = static_cast<float>(field.u[i]);
      row[static_cast<size_t>(x) * 2 + 1] = static_cast<float>(field.v[i]);
    }
    f.write(reinterpret_cast<const char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!f) throw std::runtime_error("write_flow_file: write failed for " + path);
}

inline FlowField read_flow_file(const std::string& path) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_flow_file: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "FLO1", 4) != 0)
    throw std::runtime_error("read_flow_file: bad magic in " + path);
  uint32_t wh[2];
  f.read(reinterpret_cast<char*>(wh), sizeof(wh));
  if (!f || wh[0] == 0 || wh[1] == 0 || wh[0] > (1u << 20) || wh[1] > (1u << 20))
    throw std::runtime_error("read_flow_file: bad dimensions in " + path);
  FlowField field(static_cast<int>(wh[0]), static_cast<int>(wh[1]));
  std::vector<float> row(static_cast<size_t>(field.width) * 2);
  for (int y = 0; y < field.height; ++y) {
    f.read(reinterpret_cast<char*>(row.data()),
           static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!f) throw std::runtime_error("read_flow_file: truncated data in " + path);
    for (int x = 0; x < field.width; ++x) {
      size_t i = field.index(x, y);
      field.u[i] = row[static_cast<size_t>(x) * 2];
      field.v[i] = row[static_cast<size_t>(x) * 2 + 1];
    }
  }
  return field;
}

}  // namespace vodet
