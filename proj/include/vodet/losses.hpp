#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "vodet/geometry.hpp"

namespace vodet {

// Focal loss parameters. alpha holds one weight per foreground class
// (inverse class frequency, normalized to mean 1); the background outcome
// uses its own weight, 1 by default.
struct FocalParams {
  double gamma = 2.0;
  std::vector<double> alpha;
  double background_alpha = 1.0;
  double prob_clamp = 1e-7;

  static FocalParams uniform(int num_classes, double gamma_ = 2.0) {
    FocalParams p;
    p.gamma = gamma_;
    p.alpha.assign(static_cast<size_t>(num_classes), 1.0);
    return p;
  }
  void validate() const {
    if (gamma < 0) throw std::invalid_argument("FocalParams: gamma must be >= 0");
    for (double a : alpha)
      if (a <= 0) throw std::invalid_argument("FocalParams: alpha entries must be positive");
  }
};

// Per-class alpha as inverse frequency of the given gt counts, scaled so the
// mean over classes is 1. Classes absent from the data get the mean weight.
inline std::vector<double> inverse_frequency_alpha(const std::vector<long long>& class_counts) {
  size_t k = class_counts.size();
  std::vector<double> alpha(k, 0.0);
  double sum = 0.0;
  int present = 0;
  for (size_t i = 0; i < k; ++i)
    if (class_counts[i] > 0) {
      alpha[i] = 1.0 / static_cast<double>(class_counts[i]);
      sum += alpha[i];
      ++present;
    }
  if (present == 0) return std::vector<double>(k, 1.0);
  double mean = sum / present;
  for (size_t i = 0; i < k; ++i) alpha[i] = (class_counts[i] > 0) ? alpha[i] / mean : 1.0;
  return alpha;
}

namespace detail {
inline double clamp_prob(double p, double eps) { return std::clamp(p, eps, 1.0 - eps); }

inline double alpha_for(const FocalParams& params, int y, int class_id) {
  if (y == 0) return params.background_alpha;
  if (class_id < 0 || static_cast<size_t>(class_id) >= params.alpha.size())
    throw std::invalid_argument("focal_loss: class_id out of range");
  return params.alpha[static_cast<size_t>(class_id)];
}
}  // namespace detail

// FL(p') = -alpha_t * (1 - p')^gamma * log(p'), with p' = p when y = 1 and
// 1 - p otherwise. p is clamped away from {0, 1} before the log.
inline double focal_loss(double p, int y, const FocalParams& params, int class_id) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("focal_loss: p outside [0, 1]");
  if (y != 0 && y != 1) throw std::invalid_argument("focal_loss: y must be 0 or 1");
  double pc = detail::clamp_prob(p, params.prob_clamp);
  double pt = (y == 1) ? pc : 1.0 - pc;
  double a = detail::alpha_for(params, y, class_id);
  return -a * std::pow(1.0 - pt, params.gamma) * std::log(pt);
}

// d(focal_loss)/dp of the clamped loss; zero in the clamped flats.
inline double focal_loss_grad(double p, int y, const FocalParams& params, int class_id) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("focal_loss_grad: p outside [0, 1]");
  if (y != 0 && y != 1) throw std::invalid_argument("focal_loss_grad: y must be 0 or 1");
  double eps = params.prob_clamp;
  if (p <= eps || p >= 1.0 - eps) return 0.0;
  double a = detail::alpha_for(params, y, class_id);
  double g = params.gamma;
  double pt = (y == 1) ? p : 1.0 - p;
  // d/dpt [-a (1-pt)^g log pt] = a*g*(1-pt)^(g-1)*log(pt) - a*(1-pt)^g/pt
  double one_minus = 1.0 - pt;
  double dpt = -a * std::pow(one_minus, g) / pt;
  if (g > 0.0) dpt += a * g * std::pow(one_minus, g - 1.0) * std::log(pt);
  return (y == 1) ? dpt : -dpt;
}

inline double smooth_l1(double x) {
  double ax = std::abs(x);
  return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
}

inline double smooth_l1_grad(double x) { return std::clamp(x, -1.0, 1.0); }

struct LossValue {
  double classification = 0.0;
  double regression = 0.0;
  double lambda = 1.0;
  double total = 0.0;
  int num_positive = 0;
};

// Gradients of LossValue::total (the lambda weighting is already applied to
// the regression part).
struct DetectionLossGrads {
  std::vector<double> dcls;  // same layout as cls_probs
  std::vector<double> dreg;  // same layout as reg_preds
};

// Combined detection loss over an anchor assignment.
//   cls_probs: anchor-major [num_anchors x num_classes] probabilities
//   reg_preds: anchor-major [num_anchors x 4] box deltas
// Classification sums focal terms over every non-ignored anchor and class;
// regression sums smooth L1 over the positive anchors' encode targets. Both
// are normalized by max(1, num_positive).
inline LossValue detection_loss(const std::vector<double>& cls_probs,
                                const std::vector<double>& reg_preds,
                                const Assignment& assignment, int num_classes,
                                const FocalParams& params, double lambda = 1.0,
                                DetectionLossGrads* grads = nullptr) {
  params.validate();
  const size_t n = assignment.size();
  if (num_classes <= 0 || params.alpha.size() != static_cast<size_t>(num_classes))
    throw std::invalid_argument("detection_loss: alpha size must equal num_classes");
  if (cls_probs.size() != n * static_cast<size_t>(num_classes))
    throw std::invalid_argument("detection_loss: cls_probs shape mismatch");
  if (reg_preds.size() != n * 4)
    throw std::invalid_argument("detection_loss: reg_preds shape mismatch");
  if (grads) {
    grads->dcls.assign(cls_probs.size(), 0.0);
    grads->dreg.assign(reg_preds.size(), 0.0);
  }

  double cls_sum = 0.0, reg_sum = 0.0;
  const double norm = 1.0 / std::max(1, assignment.num_positive);
  for (size_t a = 0; a < n; ++a) {
    AnchorState st = assignment.states[a];
    if (st == AnchorState::ignored) continue;
    int pos_class = (st == AnchorState::positive) ? assignment.gt_class[a] : -1;
    for (int k = 0; k < num_classes; ++k) {
      int y = (k == pos_class) ? 1 : 0;
      double p = cls_probs[a * num_classes + static_cast<size_t>(k)];
      cls_sum += focal_loss(p, y, params, k);
      if (grads) grads->dcls[a * num_classes + static_cast<size_t>(k)] =
          focal_loss_grad(p, y, params, k) * norm;
    }
    if (st == AnchorState::positive) {
      for (int j = 0; j < 4; ++j) {
        double d = reg_preds[a * 4 + static_cast<size_t>(j)] - assignment.reg_targets[a][j];
        reg_sum += smooth_l1(d);
        if (grads)
          grads->dreg[a * 4 + static_cast<size_t>(j)] = smooth_l1_grad(d) * norm * lambda;
      }
    }
  }

  LossValue out;
  out.classification = cls_sum * norm;
  out.regression = reg_sum * norm;
  out.lambda = lambda;
  out.total = out.classification + lambda * out.regression;
  out.num_positive = assignment.num_positive;
  return out;
}

}  // namespace vodet
