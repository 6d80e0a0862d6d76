#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "vodet/flow.hpp"
#include "vodet/random.hpp"
#include "vodet/synthdata.hpp"

using namespace vodet;

namespace {

// Smooth random texture with structure at several scales.
Image make_texture(int w, int h, uint64_t seed) {
  Image img(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      img.at(x, y) = 0.55 * value_noise(seed, x, y, 9.0) +
                     0.30 * value_noise(seed ^ 0xabcdULL, x, y, 4.0) +
                     0.15 * value_noise(seed ^ 0x1234ULL, x, y, 2.0);
  return img;
}

// preceding/target pair where content moves by (dx, dy) from one to the next.
std::pair<Image, Image> shifted_pair(int w, int h, int dx, int dy, uint64_t seed) {
  Image prev(w, h, 1), next(w, h, 1);
  const int ox = 8, oy = 8;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      prev.at(x, y) = value_noise(seed, x + ox, y + oy, 6.0) * 0.7 +
                      value_noise(seed ^ 0x77ULL, x + ox, y + oy, 2.5) * 0.3;
      next.at(x, y) = value_noise(seed, x + ox - dx, y + oy - dy, 6.0) * 0.7 +
                      value_noise(seed ^ 0x77ULL, x + ox - dx, y + oy - dy, 2.5) * 0.3;
    }
  return {prev, next};
}

double median_of(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  return xs[xs.size() / 2];
}

// Per-pixel weighted least squares with an explicit 6x6 normal system,
// sampling values at clamped coordinates but basis functions at nominal
// offsets, exactly like the library's border handling.
void poly_ref_at(const Image& gray, int n, double sigma, int px, int py, double out[6]) {
  const int r = n / 2;
  std::vector<double> g(static_cast<size_t>(n));
  double gsum = 0;
  for (int i = -r; i <= r; ++i) {
    g[static_cast<size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    gsum += g[static_cast<size_t>(i + r)];
  }
  for (double& v : g) v /= gsum;

  // basis order: 1, u, v, u^2, v^2, uv  (model c + bx u + by v + axx u^2 + ayy v^2 + 2 axy uv)
  double N[6][6] = {};
  double b[6] = {};
  for (int j = -r; j <= r; ++j)
    for (int i = -r; i <= r; ++i) {
      double wgt = g[static_cast<size_t>(i + r)] * g[static_cast<size_t>(j + r)];
      double f = gray.at(std::clamp(px + i, 0, gray.width - 1),
                         std::clamp(py + j, 0, gray.height - 1));
      double phi[6] = {1.0, double(i), double(j), double(i) * i, double(j) * j,
                       2.0 * i * j};
      for (int a = 0; a < 6; ++a) {
        b[a] += wgt * phi[a] * f;
        for (int c = 0; c < 6; ++c) N[a][c] += wgt * phi[a] * phi[c];
      }
    }
  // Gaussian elimination with partial pivoting
  for (int col = 0; col < 6; ++col) {
    int piv = col;
    for (int row = col + 1; row < 6; ++row)
      if (std::abs(N[row][col]) > std::abs(N[piv][col])) piv = row;
    std::swap(N[col], N[piv]);
    std::swap(b[col], b[piv]);
    for (int row = col + 1; row < 6; ++row) {
      double f = N[row][col] / N[col][col];
      for (int c = col; c < 6; ++c) N[row][c] -= f * N[col][c];
      b[row] -= f * b[col];
    }
  }
  for (int row = 5; row >= 0; --row) {
    double s = b[row];
    for (int c = row + 1; c < 6; ++c) s -= N[row][c] * out[c];
    out[row] = s / N[row][row];
  }
}

}  // namespace

TEST_CASE("poly expansion recovers an exact quadratic in the interior") {
  const int W = 32, H = 24, n = 7;
  const double axx = 0.004, ayy = -0.003, k = 0.005, gx = 0.03, gy = -0.02, c0 = 0.4;
  Image img(W, H, 1);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      img.at(x, y) = c0 + gx * x + gy * y + axx * x * x + ayy * y * y + k * x * y;

  PolyField pf = poly_expansion(img, n, 1.2);
  const int r = n / 2;
  for (int y = r; y < H - r; ++y)
    for (int x = r; x < W - r; ++x) {
      size_t i = pf.index(x, y);
      CHECK(pf.c[i] == Catch::Approx(img.at(x, y)).margin(1e-9));
      CHECK(pf.bx[i] == Catch::Approx(gx + 2 * axx * x + k * y).margin(1e-9));
      CHECK(pf.by[i] == Catch::Approx(gy + 2 * ayy * y + k * x).margin(1e-9));
      CHECK(pf.axx[i] == Catch::Approx(axx).margin(1e-9));
      CHECK(pf.ayy[i] == Catch::Approx(ayy).margin(1e-9));
      CHECK(pf.axy[i] == Catch::Approx(0.5 * k).margin(1e-9));
    }
}

TEST_CASE("poly expansion matches the least-squares oracle everywhere") {
  Image img = make_texture(18, 14, 404);
  const int n = 5;
  const double sigma = 1.1;
  PolyField pf = poly_expansion(img, n, sigma);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double want[6];
      poly_ref_at(img, n, sigma, x, y, want);
      size_t i = pf.index(x, y);
      CHECK(pf.c[i] == Catch::Approx(want[0]).margin(1e-8));
      CHECK(pf.bx[i] == Catch::Approx(want[1]).margin(1e-8));
      CHECK(pf.by[i] == Catch::Approx(want[2]).margin(1e-8));
      CHECK(pf.axx[i] == Catch::Approx(want[3]).margin(1e-8));
      CHECK(pf.ayy[i] == Catch::Approx(want[4]).margin(1e-8));
      CHECK(pf.axy[i] == Catch::Approx(want[5]).margin(1e-8));
    }
}

TEST_CASE("poly expansion input validation") {
  Image ok(16, 16, 1);
  CHECK_THROWS(poly_expansion(Image(16, 16, 3), 5, 1.1));
  CHECK_THROWS(poly_expansion(ok, 4, 1.1));
  CHECK_THROWS(poly_expansion(ok, 3, 1.1));
  CHECK_THROWS(poly_expansion(ok, 5, 0.0));
  CHECK_THROWS(poly_expansion(Image(4, 16, 1), 5, 1.1));
}

TEST_CASE("flow params validation") {
  FlowParams p;
  p.pyramid_scale = 1.0;
  CHECK_THROWS(p.validate());
  p = {};
  p.window_size = 14;
  CHECK_THROWS(p.validate());
  p = {};
  p.poly_n = 3;
  CHECK_THROWS(p.validate());
  p = {};
  p.levels = 0;
  CHECK_THROWS(p.validate());
  CHECK_NOTHROW(FlowParams{}.validate());
}

TEST_CASE("farneback recovers integer translations") {
  struct Case {
    int dx, dy;
    uint64_t seed;
  } cases[] = {{2, 1, 5}, {-3, 2, 6}, {1, -1, 7}, {0, 3, 8}};
  for (const auto& c : cases) {
    auto [prev, next] = shifted_pair(64, 64, c.dx, c.dy, c.seed);
    FlowField f = farneback_flow(prev, next);
    std::vector<double> us(f.u), vs(f.v);
    INFO("shift " << c.dx << "," << c.dy);
    CHECK(std::abs(median_of(us) - c.dx) < 0.5);
    CHECK(std::abs(median_of(vs) - c.dy) < 0.5);
  }
}

TEST_CASE("identical frames give zero flow") {
  Image img3(48, 40, 3);
  Rng rng(12);
  for (double& v : img3.data) v = rng.uniform();
  FlowField f = farneback_flow(img3, img3);
  double m = 0.0;
  for (size_t i = 0; i < f.u.size(); ++i) m = std::max(m, std::hypot(f.u[i], f.v[i]));
  CHECK(m < 1e-9);
}

TEST_CASE("reversing the frames flips the flow") {
  auto [prev, next] = shifted_pair(64, 64, 2, -1, 42);
  FlowField fwd = farneback_flow(prev, next);
  FlowField bwd = farneback_flow(next, prev);
  CHECK(std::abs(median_of(fwd.u) + median_of(bwd.u)) < 0.3);
  CHECK(std::abs(median_of(fwd.v) + median_of(bwd.v)) < 0.3);
}

TEST_CASE("farneback rejects mismatched or undersized frames") {
  CHECK_THROWS(farneback_flow(Image(32, 32, 1), Image(16, 32, 1)));
  CHECK_THROWS(farneback_flow(Image(4, 4, 1), Image(4, 4, 1)));
}

TEST_CASE("block matching finds exact integer shifts in the interior") {
  auto [prev, next] = shifted_pair(48, 48, -2, 3, 77);
  BlockMatchingFlow bm(4, 3);
  FlowField f = bm.compute(prev, next);
  for (int y = 8; y < 40; ++y)
    for (int x = 8; x < 40; ++x) {
      CHECK(f.u[f.index(x, y)] == -2.0);
      CHECK(f.v[f.index(x, y)] == 3.0);
    }
}

TEST_CASE("estimators are interchangeable through the base class") {
  auto [prev, next] = shifted_pair(32, 32, 1, 0, 9);
  FarnebackFlow fb;
  BlockMatchingFlow bm(2, 2);
  for (const FlowEstimator* e : {static_cast<const FlowEstimator*>(&fb),
                                 static_cast<const FlowEstimator*>(&bm)}) {
    FlowField f = e->compute(prev, next);
    CHECK(f.width == 32);
    CHECK(f.height == 32);
  }
}

TEST_CASE("flow image encoding") {
  FlowField f(3, 1);
  f.u = {0.0, 16.0, -40.0};
  f.v = {0.0, -8.0, 16.0};
  Image img = flow_image(f, 16.0);
  CHECK(img.channels == 3);
  CHECK(img.at(0, 0, 0) == 0.5);
  CHECK(img.at(0, 0, 1) == 0.5);
  CHECK(img.at(0, 0, 2) == 0.0);
  CHECK(img.at(1, 0, 0) == 1.0);
  CHECK(img.at(1, 0, 1) == 0.25);
  CHECK(img.at(1, 0, 2) == 1.0);  // hypot(16, -8) > 16 saturates
  CHECK(img.at(2, 0, 0) == 0.0);  // clamped at -16
  CHECK(img.at(2, 0, 2) == 1.0);  // norm saturates
  CHECK_THROWS(flow_image(f, 0.0));
}

TEST_CASE("flow file round trip") {
  namespace fs = std::filesystem;
  FlowField f(7, 5);
  Rng rng(3);
  for (size_t i = 0; i < f.u.size(); ++i) {
    f.u[i] = rng.uniform(-20.0, 20.0);
    f.v[i] = rng.uniform(-20.0, 20.0);
  }
  fs::path p = fs::temp_directory_path() / "vodet_flow_test.flo";
  write_flow_file(p.string(), f);
  FlowField g = read_flow_file(p.string());
  REQUIRE(g.width == f.width);
  REQUIRE(g.height == f.height);
  for (size_t i = 0; i < f.u.size(); ++i) {
    CHECK(g.u[i] == static_cast<double>(static_cast<float>(f.u[i])));
    CHECK(g.v[i] == static_cast<double>(static_cast<float>(f.v[i])));
  }
  fs::remove(p);
}

TEST_CASE("flow file rejects corrupt input") {
  namespace fs = std::filesystem;
  fs::path p = fs::temp_directory_path() / "vodet_flow_bad.flo";
  {
    std::ofstream out(p, std::ios::binary);
    out << "NOPE1234";
  }
  CHECK_THROWS(read_flow_file(p.string()));
  {
    FlowField f(4, 4);
    write_flow_file(p.string(), f);
    // truncate
    fs::resize_file(p, 16);
  }
  CHECK_THROWS(read_flow_file(p.string()));
  CHECK_THROWS(read_flow_file((fs::temp_directory_path() / "vodet_missing.flo").string()));
  fs::remove(p);
}
