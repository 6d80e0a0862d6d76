#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

namespace vodet {

// Axis-aligned box in continuous half-open pixel coordinates.
// Area is (x2 - x1) * (y2 - y1); no +-1 pixel conventions anywhere.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  Box() = default;
  Box(double x1_, double y1_, double x2_, double y2_) : x1(x1_), y1(y1_), x2(x2_), y2(y2_) {}

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  bool valid() const {
    return x1 < x2 && y1 < y2 && std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
           std::isfinite(y2);
  }
  bool operator==(const Box& o) const {
    return x1 == o.x1 && y1 == o.y1 && x2 == o.x2 && y2 == o.y2;
  }
};

struct LabeledBox {
  Box box;
  int class_id = 0;
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;  // in [0, 1]
};

// Anchor grid description. One anchor per (level, cell, scale, ratio).
// base_size is the anchor side at the first stride; deeper levels scale
// proportionally to their stride.
struct AnchorConfig {
  std::vector<int> pyramid_strides;
  std::vector<double> scales;
  std::vector<double> aspect_ratios;  // width / height
  double base_size = 8.0;

  int anchors_per_cell() const {
    return static_cast<int>(scales.size() * aspect_ratios.size());
  }
  void validate() const {
    if (pyramid_strides.empty() || scales.empty() || aspect_ratios.empty())
      throw std::invalid_argument("AnchorConfig: empty stride/scale/ratio list");
    for (size_t i = 1; i < pyramid_strides.size(); ++i)
      if (pyramid_strides[i] <= pyramid_strides[i - 1])
        throw std::invalid_argument("AnchorConfig: strides must be strictly increasing");
    if (base_size <= 0) throw std::invalid_argument("AnchorConfig: base_size must be positive");
    for (double s : scales)
      if (s <= 0) throw std::invalid_argument("AnchorConfig: scales must be positive");
    for (double r : aspect_ratios)
      if (r <= 0) throw std::invalid_argument("AnchorConfig: ratios must be positive");
  }
};

inline double iou(const Box& a, const Box& b) {
  double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

// One anchor per (level, cell row-major, scale, ratio); centers at
// (stride * (i + 0.5), stride * (j + 0.5)). Sizes not divisible by a stride
// use the padded grid, i.e. ceil(dim / stride) cells.
inline std::vector<Box> generate_anchors(const AnchorConfig& cfg, int image_w, int image_h) {
  cfg.validate();
  if (image_w <= 0 || image_h <= 0) throw std::invalid_argument("generate_anchors: bad image size");
  std::vector<Box> anchors;
  const int stride0 = cfg.pyramid_strides.front();
  for (int stride : cfg.pyramid_strides) {
    int gw = (image_w + stride - 1) / stride;
    int gh = (image_h + stride - 1) / stride;
    double level_base = cfg.base_size * (static_cast<double>(stride) / stride0);
    anchors.reserve(anchors.size() +
                    static_cast<size_t>(gw) * gh * cfg.scales.size() * cfg.aspect_ratios.size());
    for (int j = 0; j < gh; ++j)
      for (int i = 0; i < gw; ++i) {
        double cx = stride * (i + 0.5);
        double cy = stride * (j + 0.5);
        for (double scale : cfg.scales)
          for (double ratio : cfg.aspect_ratios) {
            double side = level_base * scale;
            double w = side * std::sqrt(ratio);
            double h = side / std::sqrt(ratio);
            anchors.emplace_back(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
          }
      }
  }
  return anchors;
}

using BoxDelta = std::array<double, 4>;

// t = ((cx - cxa)/wa, (cy - cya)/ha, log(w/wa), log(h/ha))
inline BoxDelta encode_box(const Box& anchor, const Box& gt) {
  double wa = anchor.width(), ha = anchor.height();
  return {(gt.cx() - anchor.cx()) / wa, (gt.cy() - anchor.cy()) / ha,
          std::log(gt.width() / wa), std::log(gt.height() / ha)};
}

// Inverse of encode_box. Predictions with |t2| or |t3| > 20 would overflow
// exp into meaningless sizes and are rejected. An optional clip region
// bounds the output box.
inline std::optional<Box> decode_box(const Box& anchor, const BoxDelta& t,
                                     std::optional<Box> clip = std::nullopt) {
  for (double v : t)
    if (!std::isfinite(v)) return std::nullopt;
  if (std::abs(t[2]) > 20.0 || std::abs(t[3]) > 20.0) return std::nullopt;
  double wa = anchor.width(), ha = anchor.height();
  double cx = anchor.cx() + t[0] * wa;
  double cy = anchor.cy() + t[1] * ha;
  double w = wa * std::exp(t[2]);
  double h = ha * std::exp(t[3]);
  Box b(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
  if (clip) {
    b.x1 = std::clamp(b.x1, clip->x1, clip->x2);
    b.y1 = std::clamp(b.y1, clip->y1, clip->y2);
    b.x2 = std::clamp(b.x2, clip->x1, clip->x2);
    b.y2 = std::clamp(b.y2, clip->y1, clip->y2);
  }
  if (!b.valid()) return std::nullopt;
  return b;
}

enum class AnchorState : int8_t { negative = -1, ignored = 0, positive = 1 };

struct Assignment {
  std::vector<AnchorState> states;    // one per anchor
  std::vector<int> gt_index;          // valid where state == positive
  std::vector<int> gt_class;          // class of the matched gt, -1 elsewhere
  std::vector<BoxDelta> reg_targets;  // valid where state == positive
  int num_positive = 0;

  size_t size() const { return states.size(); }
};

// RetinaNet-style assignment: positive at max-IoU >= pos_thr (argmax gt),
// negative below neg_thr, ignored in between. Every gt overlapping at least
// one anchor is additionally force-matched to its best anchor so small
// objects never lose their only candidate.
inline Assignment assign_anchors(const std::vector<Box>& anchors,
                                 const std::vector<LabeledBox>& gts, double pos_thr = 0.5,
                                 double neg_thr = 0.4) {
  if (pos_thr < neg_thr) throw std::invalid_argument("assign_anchors: pos_thr < neg_thr");
  const size_t n = anchors.size(), m = gts.size();
  Assignment out;
  out.states.assign(n, AnchorState::negative);
  out.gt_index.assign(n, -1);
  out.gt_class.assign(n, -1);
  out.reg_targets.assign(n, BoxDelta{0, 0, 0, 0});
  if (m == 0) return out;

  std::vector<double> anchor_best_iou(n, 0.0);
  std::vector<double> gt_best_iou(m, 0.0);
  std::vector<int> gt_best_anchor(m, -1);
  for (size_t a = 0; a < n; ++a) {
    for (size_t g = 0; g < m; ++g) {
      double v = iou(anchors[a], gts[g].box);
      if (v > anchor_best_iou[a]) {
        anchor_best_iou[a] = v;
        out.gt_index[a] = static_cast<int>(g);
      }
      if (v > gt_best_iou[g]) {
        gt_best_iou[g] = v;
        gt_best_anchor[g] = static_cast<int>(a);
      }
    }
    if (anchor_best_iou[a] >= pos_thr)
      out.states[a] = AnchorState::positive;
    else if (anchor_best_iou[a] < neg_thr) {
      out.states[a] = AnchorState::negative;
      out.gt_index[a] = -1;
    } else {
      out.states[a] = AnchorState::ignored;
      out.gt_index[a] = -1;
    }
  }
  // force matches; when gts compete for one anchor the higher IoU wins,
  // ties by lower gt index. A threshold positive (forced_iou still -1) only
  // stays if its own match is strictly better than the forcing gt's.
  std::vector<double> forced_iou(n, -1.0);
  for (size_t g = 0; g < m; ++g) {
    int a = gt_best_anchor[g];
    if (a < 0 || gt_best_iou[g] <= 0.0) continue;
    if (out.states[a] == AnchorState::positive && forced_iou[static_cast<size_t>(a)] < 0.0 &&
        anchor_best_iou[static_cast<size_t>(a)] > gt_best_iou[g])
      continue;
    if (gt_best_iou[g] > forced_iou[a]) {
      forced_iou[a] = gt_best_iou[g];
      out.states[a] = AnchorState::positive;
      out.gt_index[a] = static_cast<int>(g);
    }
  }
  for (size_t a = 0; a < n; ++a)
    if (out.states[a] == AnchorState::positive) {
      out.reg_targets[a] = encode_box(anchors[a], gts[out.gt_index[a]].box);
      out.gt_class[a] = gts[out.gt_index[a]].class_id;
      ++out.num_positive;
    }
  return out;
}

// Greedy per-class suppression in descending score order; ties broken by
// lower original index. Survivors keep their input order fields.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thr) {
  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return a < b;
  });
  std::vector<char> removed(dets.size(), 0);
  std::vector<Detection> kept;
  for (size_t i = 0; i < order.size(); ++i) {
    size_t a = order[i];
    if (removed[a]) continue;
    kept.push_back(dets[a]);
    for (size_t j = i + 1; j < order.size(); ++j) {
      size_t b = order[j];
      if (removed[b] || dets[b].class_id != dets[a].class_id) continue;
      if (iou(dets[a].box, dets[b].box) > iou_thr) removed[b] = 1;
    }
  }
  return kept;
}

}  // namespace vodet
