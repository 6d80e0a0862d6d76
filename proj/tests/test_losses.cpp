#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "vodet/losses.hpp"
#include "vodet/random.hpp"

using namespace vodet;

namespace {

// Scalar oracle in long double via log1p/expm1-style rearrangement.
long double focal_ref(long double p, int y, long double gamma, long double a, long double eps) {
  long double pc = p < eps ? eps : (p > 1.0L - eps ? 1.0L - eps : p);
  long double pt = y == 1 ? pc : 1.0L - pc;
  long double modulator = std::exp(gamma * std::log(1.0L - pt));
  return -a * modulator * std::log(pt);
}

long double smooth_l1_ref(long double x) {
  long double ax = x < 0 ? -x : x;
  if (ax < 1.0L) return 0.5L * ax * ax;
  return ax - 0.5L;
}

double central_diff(double (*f)(double, void*), void* ctx, double x, double h) {
  return (f(x + h, ctx) - f(x - h, ctx)) / (2.0 * h);
}

struct FocalCtx {
  FocalParams params;
  int y;
  int class_id;
};

double focal_eval(double p, void* ctx) {
  auto* c = static_cast<FocalCtx*>(ctx);
  return focal_loss(p, c->y, c->params, c->class_id);
}

double smooth_eval(double x, void*) { return smooth_l1(x); }

}  // namespace

TEST_CASE("focal loss hand values") {
  FocalParams plain = FocalParams::uniform(1, 0.0);
  CHECK(focal_loss(0.5, 1, plain, 0) == Catch::Approx(-std::log(0.5)).epsilon(1e-12));
  CHECK(focal_loss(0.9, 1, plain, 0) == Catch::Approx(-std::log(0.9)).epsilon(1e-12));

  FocalParams g2 = FocalParams::uniform(1, 2.0);
  CHECK(focal_loss(0.5, 1, g2, 0) == Catch::Approx(-0.25 * std::log(0.5)).epsilon(1e-12));
  // y=0 mirrors: pt = 1-p
  CHECK(focal_loss(0.3, 0, g2, 0) == focal_loss(0.7, 1, g2, 0));

  FocalParams weighted = FocalParams::uniform(1, 2.0);
  weighted.alpha = {2.0};
  CHECK(focal_loss(0.5, 1, weighted, 0) ==
        Catch::Approx(2.0 * focal_loss(0.5, 1, g2, 0)).epsilon(1e-12));
  // background outcome ignores the class alpha
  CHECK(focal_loss(0.5, 0, weighted, 0) == focal_loss(0.5, 0, g2, 0));
}

TEST_CASE("focal loss saturates via clamping, never inf") {
  FocalParams p = FocalParams::uniform(2);
  CHECK(std::isfinite(focal_loss(0.0, 1, p, 0)));
  CHECK(std::isfinite(focal_loss(1.0, 0, p, 1)));
  CHECK(focal_loss_grad(0.0, 1, p, 0) == 0.0);
  CHECK(focal_loss_grad(1.0, 1, p, 0) == 0.0);
}

TEST_CASE("focal loss rejects bad inputs") {
  FocalParams p = FocalParams::uniform(2);
  CHECK_THROWS(focal_loss(-0.1, 1, p, 0));
  CHECK_THROWS(focal_loss(1.1, 0, p, 0));
  CHECK_THROWS(focal_loss(0.5, 2, p, 0));
  CHECK_THROWS(focal_loss(0.5, 1, p, 5));
  FocalParams bad = FocalParams::uniform(1, -1.0);  // negative gamma
  CHECK_THROWS(bad.validate());
  bad = FocalParams::uniform(1);
  bad.alpha[0] = 0.0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("focal loss matches the scalar oracle") {
  Rng rng(31);
  for (int i = 0; i < 300; ++i) {
    double p = rng.uniform();
    int y = rng.uniform() < 0.5 ? 1 : 0;
    double gamma = rng.uniform(0.0, 4.0);
    double a = rng.uniform(0.1, 3.0);
    FocalParams fp = FocalParams::uniform(1, gamma);
    fp.alpha = {a};
    fp.background_alpha = a;
    double want = static_cast<double>(focal_ref(p, y, gamma, a, fp.prob_clamp));
    CHECK(focal_loss(p, y, fp, 0) == Catch::Approx(want).margin(1e-9).epsilon(1e-9));
  }
}

TEST_CASE("focal gradient matches finite differences") {
  Rng rng(32);
  const double h = 1e-6;
  int checked = 0;
  while (checked < 300) {
    double p = rng.uniform(0.01, 0.99);
    FocalCtx ctx;
    ctx.params = FocalParams::uniform(2, rng.uniform(0.0, 4.0));
    ctx.params.alpha = {rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0)};
    ctx.y = rng.uniform() < 0.5 ? 1 : 0;
    ctx.class_id = static_cast<int>(rng.uniform_int(uint64_t{2}));
    double fd = central_diff(focal_eval, &ctx, p, h);
    double an = focal_loss_grad(p, ctx.y, ctx.params, ctx.class_id);
    double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
    CHECK(rel < 1e-4);
    ++checked;
  }
}

TEST_CASE("smooth l1 values and gradient") {
  CHECK(smooth_l1(0.0) == 0.0);
  CHECK(smooth_l1(0.5) == Catch::Approx(0.125));
  CHECK(smooth_l1(-0.5) == Catch::Approx(0.125));
  CHECK(smooth_l1(1.0) == Catch::Approx(0.5));
  CHECK(smooth_l1(2.0) == Catch::Approx(1.5));
  CHECK(smooth_l1(-3.0) == Catch::Approx(2.5));
  CHECK(smooth_l1_grad(0.5) == 0.5);
  CHECK(smooth_l1_grad(4.0) == 1.0);
  CHECK(smooth_l1_grad(-4.0) == -1.0);

  Rng rng(33);
  for (int i = 0; i < 200; ++i) {
    double x = rng.uniform(-5.0, 5.0);
    CHECK(smooth_l1(x) == Catch::Approx(static_cast<double>(smooth_l1_ref(x))).margin(1e-12));
    if (std::abs(std::abs(x) - 1.0) < 1e-3) continue;  // kink
    double fd = central_diff(smooth_eval, nullptr, x, 1e-6);
    CHECK(std::abs(fd - smooth_l1_grad(x)) < 1e-6);
  }
}

TEST_CASE("inverse frequency alpha") {
  auto a = inverse_frequency_alpha({10, 40, 0});
  // inverse 0.1 and 0.025, mean over present 0.0625 -> 1.6 and 0.4
  REQUIRE(a.size() == 3);
  CHECK(a[0] == Catch::Approx(1.6).epsilon(1e-12));
  CHECK(a[1] == Catch::Approx(0.4).epsilon(1e-12));
  CHECK(a[2] == 1.0);

  auto even = inverse_frequency_alpha({7, 7, 7});
  for (double v : even) CHECK(v == Catch::Approx(1.0));

  auto none = inverse_frequency_alpha({0, 0});
  CHECK(none == std::vector<double>{1.0, 1.0});
}

namespace {

Assignment tiny_assignment() {
  // anchors: 0 positive (gt class 1), 1 negative, 2 ignored, 3 positive (gt class 0)
  Assignment asg;
  asg.states = {AnchorState::positive, AnchorState::negative, AnchorState::ignored,
                AnchorState::positive};
  asg.gt_index = {0, -1, -1, 1};
  asg.gt_class = {1, -1, -1, 0};
  asg.reg_targets = {{0.1, -0.2, 0.05, 0.0},
                     {0, 0, 0, 0},
                     {0, 0, 0, 0},
                     {-0.3, 0.4, -0.1, 0.2}};
  asg.num_positive = 2;
  return asg;
}

}  // namespace

TEST_CASE("detection loss counts the right terms") {
  Assignment asg = tiny_assignment();
  const int K = 2;
  std::vector<double> probs = {0.2, 0.7, 0.1, 0.05, 0.6, 0.4, 0.3, 0.8};
  std::vector<double> regs = {0.1, -0.2, 0.05, 0.0,  0.5, 0.5, 0.5, 0.5,
                              0.0, 0.0,  0.0,  0.0,  0.2, 0.4, -0.6, 0.25};
  FocalParams fp = FocalParams::uniform(K, 2.0);
  fp.alpha = {1.25, 0.75};

  double cls = 0.0;
  cls += focal_loss(probs[0], 0, fp, 0) + focal_loss(probs[1], 1, fp, 1);  // anchor 0, gt class 1
  cls += focal_loss(probs[2], 0, fp, 0) + focal_loss(probs[3], 0, fp, 1);  // anchor 1 negative
  // anchor 2 ignored contributes nothing
  cls += focal_loss(probs[6], 1, fp, 0) + focal_loss(probs[7], 0, fp, 1);  // anchor 3, gt class 0
  double reg = 0.0;
  for (int j = 0; j < 4; ++j) reg += smooth_l1(regs[static_cast<size_t>(j)] - asg.reg_targets[0][static_cast<size_t>(j)]);
  for (int j = 0; j < 4; ++j) reg += smooth_l1(regs[static_cast<size_t>(12 + j)] - asg.reg_targets[3][static_cast<size_t>(j)]);
  cls /= 2.0;
  reg /= 2.0;

  double lambda = 1.7;
  LossValue lv = detection_loss(probs, regs, asg, K, fp, lambda);
  CHECK(lv.classification == Catch::Approx(cls).epsilon(1e-12));
  CHECK(lv.regression == Catch::Approx(reg).epsilon(1e-12));
  CHECK(lv.total == Catch::Approx(cls + lambda * reg).epsilon(1e-12));
  CHECK(lv.num_positive == 2);
}

TEST_CASE("detection loss with no positives normalizes by one") {
  Assignment asg;
  asg.states = {AnchorState::negative, AnchorState::negative};
  asg.gt_index = {-1, -1};
  asg.gt_class = {-1, -1};
  asg.reg_targets = {{0, 0, 0, 0}, {0, 0, 0, 0}};
  asg.num_positive = 0;
  std::vector<double> probs = {0.1, 0.2};
  std::vector<double> regs(8, 0.3);
  FocalParams fp = FocalParams::uniform(1);
  LossValue lv = detection_loss(probs, regs, asg, 1, fp);
  CHECK(lv.classification ==
        Catch::Approx(focal_loss(0.1, 0, fp, 0) + focal_loss(0.2, 0, fp, 0)));
  CHECK(lv.regression == 0.0);
}

TEST_CASE("detection loss validates shapes") {
  Assignment asg = tiny_assignment();
  FocalParams fp = FocalParams::uniform(2);
  std::vector<double> probs(8, 0.5), regs(16, 0.0);
  CHECK_THROWS(detection_loss(probs, regs, asg, 3, FocalParams::uniform(3)));  // probs wrong for K=3
  CHECK_THROWS(detection_loss(std::vector<double>(7, 0.5), regs, asg, 2, fp));
  CHECK_THROWS(detection_loss(probs, std::vector<double>(15, 0.0), asg, 2, fp));
  CHECK_THROWS(detection_loss(probs, regs, asg, 2, FocalParams::uniform(3)));  // alpha size
}

TEST_CASE("detection loss gradients match finite differences and scale with lambda") {
  Assignment asg = tiny_assignment();
  const int K = 2;
  Rng rng(77);
  std::vector<double> probs(8), regs(16);
  for (double& p : probs) p = rng.uniform(0.05, 0.95);
  for (double& r : regs) r = rng.uniform(-2.0, 2.0);
  FocalParams fp = FocalParams::uniform(K, 2.0);
  fp.alpha = {0.5, 1.5};
  const double lambda = 2.5, h = 1e-6;

  DetectionLossGrads grads;
  detection_loss(probs, regs, asg, K, fp, lambda, &grads);

  for (size_t i = 0; i < probs.size(); ++i) {
    auto bump = probs;
    bump[i] += h;
    double up = detection_loss(bump, regs, asg, K, fp, lambda).total;
    bump[i] -= 2 * h;
    double dn = detection_loss(bump, regs, asg, K, fp, lambda).total;
    double fd = (up - dn) / (2 * h);
    CHECK(std::abs(fd - grads.dcls[i]) < 1e-5 * std::max(1.0, std::abs(fd)));
  }
  for (size_t i = 0; i < regs.size(); ++i) {
    double d = regs[i] - asg.reg_targets[i / 4][i % 4];
    if (std::abs(std::abs(d) - 1.0) < 1e-3) continue;  // kink
    auto bump = regs;
    bump[i] += h;
    double up = detection_loss(probs, bump, asg, K, fp, lambda).total;
    bump[i] -= 2 * h;
    double dn = detection_loss(probs, bump, asg, K, fp, lambda).total;
    double fd = (up - dn) / (2 * h);
    CHECK(std::abs(fd - grads.dreg[i]) < 1e-5 * std::max(1.0, std::abs(fd)));
  }

  DetectionLossGrads g1;
  detection_loss(probs, regs, asg, K, fp, 1.0, &g1);
  for (size_t i = 0; i < regs.size(); ++i)
    CHECK(grads.dreg[i] == Catch::Approx(lambda * g1.dreg[i]).margin(1e-15));
  for (size_t i = 0; i < probs.size(); ++i) CHECK(grads.dcls[i] == g1.dcls[i]);

  // ignored anchor rows stay zero
  for (int k = 0; k < K; ++k) CHECK(grads.dcls[static_cast<size_t>(2 * K + k)] == 0.0);
  for (int j = 0; j < 4; ++j) CHECK(grads.dreg[static_cast<size_t>(8 + j)] == 0.0);
}
