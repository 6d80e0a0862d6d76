#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vodet/geometry.hpp"

namespace vodet {

// Ground truth box with scenario tags (bitmask defined by the data source).
struct GroundTruthBox {
  Box box;
  int class_id = 0;
  uint32_t tags = 0;
};

struct Stratum {
  uint32_t mask = 0;
  std::string name;
};

struct EvalConfig {
  double iou_threshold = 0.5;
  std::vector<Stratum> strata;  // empty: no stratified breakdown

  void validate() const {
    if (!(iou_threshold > 0.0 && iou_threshold < 1.0))
      throw std::invalid_argument("EvalConfig: iou_threshold must be in (0,1)");
  }
};

struct MatchResult {
  std::vector<bool> det_is_tp;      // per detection, input order
  std::vector<int> det_matched_gt;  // gt index or -1, input order
  std::vector<bool> gt_matched;
};

// Greedy matcher: detections in descending score (ties by input index) each
// take the highest-IoU unmatched gt at or above iou_thr (gt ties by lower
// index). Each gt matches at most once.
inline MatchResult match_detections(const std::vector<Detection>& dets,
                                    const std::vector<Box>& gts, double iou_thr) {
  MatchResult r;
  r.det_is_tp.assign(dets.size(), false);
  r.det_matched_gt.assign(dets.size(), -1);
  r.gt_matched.assign(gts.size(), false);

  std::vector<size_t> order(dets.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return a < b;
  });
  for (size_t oi : order) {
    double best_iou = 0.0;
    int best_gt = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (r.gt_matched[g]) continue;
      double v = iou(dets[oi].box, gts[g]);
      if (v >= iou_thr && v > best_iou) {
        best_iou = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      r.det_is_tp[oi] = true;
      r.det_matched_gt[oi] = best_gt;
      r.gt_matched[static_cast<size_t>(best_gt)] = true;
    }
  }
  return r;
}

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
  double score = 0.0;  // score of the detection producing this point
};

// Cumulative precision/recall after each detection, which must already be in
// descending score order. Zero gts put recall at 0 throughout.
inline std::vector<PrPoint> pr_curve(const std::vector<bool>& is_tp_in_score_order,
                                     long long num_gts,
                                     const std::vector<double>* scores = nullptr) {
  if (num_gts < 0) throw std::invalid_argument("pr_curve: negative gt count");
  std::vector<PrPoint> points;
  points.reserve(is_tp_in_score_order.size());
  long long tp = 0;
  for (size_t i = 0; i < is_tp_in_score_order.size(); ++i) {
    if (is_tp_in_score_order[i]) ++tp;
    PrPoint p;
    p.recall = num_gts > 0 ? static_cast<double>(tp) / static_cast<double>(num_gts) : 0.0;
    p.precision = static_cast<double>(tp) / static_cast<double>(i + 1);
    p.score = scores ? (*scores)[i] : 0.0;
    points.push_back(p);
  }
  return points;
}

// All-points interpolation: make the precision envelope monotone
// non-increasing from the right, then integrate the step function exactly.
inline double average_precision(const std::vector<PrPoint>& points) {
  if (points.empty()) return 0.0;
  std::vector<double> envelope(points.size());
  double running = 0.0;
  for (size_t ri = 0; ri < points.size(); ++ri) {
    size_t i = points.size() - 1 - ri;
    running = std::max(running, points[i].precision);
    envelope[i] = running;
  }
  double ap = 0.0, prev_recall = 0.0;
  for (size_t i = 0; i < points.size(); ++i) {
    ap += (points[i].recall - prev_recall) * envelope[i];
    prev_recall = points[i].recall;
  }
  return ap;
}

struct ClassEval {
  int class_id = 0;
  double ap = 0.0;
  long long num_gts = 0;
  long long tp = 0, fp = 0, fn = 0;
  std::vector<PrPoint> curve;
};

struct StratumEval {
  std::string name;
  double map = 0.0;
  std::vector<ClassEval> classes;
};

struct EvalReport {
  double map = 0.0;
  std::vector<ClassEval> classes;      // one entry per class id
  std::vector<int> classes_in_map;     // ids with at least one gt
  std::vector<StratumEval> strata;
};

namespace detail {

struct PooledDet {
  double score;
  size_t frame;
  size_t index;  // within frame, for deterministic tie-break
  bool is_tp;
};

inline ClassEval eval_from_pool(int class_id, std::vector<PooledDet> pool, long long num_gts) {
  std::sort(pool.begin(), pool.end(), [](const PooledDet& a, const PooledDet& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.frame != b.frame) return a.frame < b.frame;
    return a.index < b.index;
  });
  std::vector<bool> flags(pool.size());
  std::vector<double> scores(pool.size());
  for (size_t i = 0; i < pool.size(); ++i) {
    flags[i] = pool[i].is_tp;
    scores[i] = pool[i].score;
  }
  ClassEval ce;
  ce.class_id = class_id;
  ce.num_gts = num_gts;
  ce.curve = pr_curve(flags, num_gts, &scores);
  ce.ap = num_gts > 0 ? average_precision(ce.curve) : 0.0;
  for (bool f : flags) (f ? ce.tp : ce.fp)++;
  ce.fn = num_gts - ce.tp;
  return ce;
}

}  // namespace detail

// Full protocol: per-frame per-class greedy matching, detections pooled
// across frames per class, AP per class, mAP over classes that have ground
// truth. Stratified breakdowns match against the full gt set first, then
// keep detections that hit an in-stratum gt (TP) or nothing at all (FP);
// hits on out-of-stratum gts are excluded rather than counted against the
// stratum.
inline EvalReport evaluate(const std::vector<std::vector<Detection>>& dets_per_frame,
                           const std::vector<std::vector<GroundTruthBox>>& gts_per_frame,
                           const EvalConfig& config, int num_classes) {
  config.validate();
  if (num_classes < 1) throw std::invalid_argument("evaluate: num_classes must be >= 1");
  if (dets_per_frame.size() != gts_per_frame.size())
    throw std::invalid_argument("evaluate: frame count mismatch");
  for (const auto& fd : dets_per_frame)
    for (const auto& d : fd)
      if (d.class_id < 0 || d.class_id >= num_classes)
        throw std::invalid_argument("evaluate: unknown detection class id");
  for (const auto& fg : gts_per_frame)
    for (const auto& g : fg)
      if (g.class_id < 0 || g.class_id >= num_classes)
        throw std::invalid_argument("evaluate: unknown ground-truth class id");

  const size_t num_frames = dets_per_frame.size();
  const size_t num_strata = config.strata.size();
  std::vector<std::vector<detail::PooledDet>> pools(static_cast<size_t>(num_classes));
  std::vector<long long> gt_counts(static_cast<size_t>(num_classes), 0);
  std::vector<std::vector<std::vector<detail::PooledDet>>> stratum_pools(
      num_strata,
      std::vector<std::vector<detail::PooledDet>>(static_cast<size_t>(num_classes)));
  std::vector<std::vector<long long>> stratum_gt_counts(
      num_strata, std::vector<long long>(static_cast<size_t>(num_classes), 0));

  for (size_t f = 0; f < num_frames; ++f) {
    for (int k = 0; k < num_classes; ++k) {
      std::vector<Detection> cdets;
      std::vector<size_t> det_pos;
      for (size_t i = 0; i < dets_per_frame[f].size(); ++i)
        if (dets_per_frame[f][i].class_id == k) {
          cdets.push_back(dets_per_frame[f][i]);
          det_pos.push_back(i);
        }
      std::vector<Box> cgts;
      std::vector<uint32_t> cgt_tags;
      for (const auto& g : gts_per_frame[f])
        if (g.class_id == k) {
          cgts.push_back(g.box);
          cgt_tags.push_back(g.tags);
        }
      gt_counts[static_cast<size_t>(k)] += static_cast<long long>(cgts.size());
      for (size_t s = 0; s < num_strata; ++s)
        for (uint32_t tags : cgt_tags)
          if (tags & config.strata[s].mask)
            ++stratum_gt_counts[s][static_cast<size_t>(k)];

      if (cdets.empty()) continue;
      MatchResult mr = match_detections(cdets, cgts, config.iou_threshold);
      for (size_t i = 0; i < cdets.size(); ++i) {
        pools[static_cast<size_t>(k)].push_back(
            {cdets[i].score, f, det_pos[i], mr.det_is_tp[i]});
        for (size_t s = 0; s < num_strata; ++s) {
          uint32_t mask = config.strata[s].mask;
          if (mr.det_is_tp[i]) {
            uint32_t gtags = cgt_tags[static_cast<size_t>(mr.det_matched_gt[i])];
            if (gtags & mask)
              stratum_pools[s][static_cast<size_t>(k)].push_back(
                  {cdets[i].score, f, det_pos[i], true});
            // matched an out-of-stratum gt: excluded from this stratum
          } else {
            stratum_pools[s][static_cast<size_t>(k)].push_back(
                {cdets[i].score, f, det_pos[i], false});
          }
        }
      }
    }
  }

  EvalReport report;
  double ap_sum = 0.0;
  for (int k = 0; k < num_classes; ++k) {
    ClassEval ce = detail::eval_from_pool(k, pools[static_cast<size_t>(k)],
                                          gt_counts[static_cast<size_t>(k)]);
    if (ce.num_gts > 0) {
      report.classes_in_map.push_back(k);
      ap_sum += ce.ap;
    }
    report.classes.push_back(std::move(ce));
  }
  report.map = report.classes_in_map.empty()
                   ? 0.0
                   : ap_sum / static_cast<double>(report.classes_in_map.size());

  for (size_t s = 0; s < num_strata; ++s) {
    StratumEval se;
    se.name = config.strata[s].name;
    double sum = 0.0;
    int present = 0;
    for (int k = 0; k < num_classes; ++k) {
      ClassEval ce = detail::eval_from_pool(k, stratum_pools[s][static_cast<size_t>(k)],
                                            stratum_gt_counts[s][static_cast<size_t>(k)]);
      if (ce.num_gts > 0) {
        sum += ce.ap;
        ++present;
      }
      se.classes.push_back(std::move(ce));
    }
    se.map = present > 0 ? sum / present : 0.0;
    report.strata.push_back(std::move(se));
  }
  return report;
}

inline nlohmann::json eval_report_to_json(const EvalReport& r,
                                          const std::vector<std::string>& class_names = {}) {
  auto name_of = [&](int k) {
    return static_cast<size_t>(k) < class_names.size() ? class_names[static_cast<size_t>(k)]
                                                       : "class" + std::to_string(k);
  };
  auto class_json = [&](const ClassEval& ce) {
    return nlohmann::json{{"class_id", ce.class_id}, {"name", name_of(ce.class_id)},
                          {"ap", ce.ap},             {"num_gts", ce.num_gts},
                          {"tp", ce.tp},             {"fp", ce.fp},
                          {"fn", ce.fn}};
  };
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& ce : r.classes) classes.push_back(class_json(ce));
  nlohmann::json strata = nlohmann::json::array();
  for (const auto& se : r.strata) {
    nlohmann::json sc = nlohmann::json::array();
    for (const auto& ce : se.classes) sc.push_back(class_json(ce));
    strata.push_back({{"name", se.name}, {"map", se.map}, {"classes", sc}});
  }
  return {{"map", r.map},
          {"classes", classes},
          {"classes_in_map", r.classes_in_map},
          {"strata", strata}};
}

// Results directory: report.json, a per-class PR CSV (the plot-data
// interface), and a short human-readable summary.
inline void write_eval_report(const EvalReport& r, const std::string& dir,
                              const std::vector<std::string>& class_names = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto name_of = [&](int k) {
    return static_cast<size_t>(k) < class_names.size() ? class_names[static_cast<size_t>(k)]
                                                       : "class" + std::to_string(k);
  };
  {
    std::ofstream f((fs::path(dir) / "report.json").string());
    f << eval_report_to_json(r, class_names).dump(2) << "\n";
    if (!f) throw std::runtime_error("write_eval_report: cannot write report.json");
  }
  for (const auto& ce : r.classes) {
    std::ofstream f((fs::path(dir) / ("pr_" + name_of(ce.class_id) + ".csv")).string());
    f << "score,recall,precision\n";
    for (const auto& p : ce.curve)
      f << p.score << "," << p.recall << "," << p.precision << "\n";
  }
  std::ofstream s((fs::path(dir) / "summary.txt").string());
  s << "mAP " << r.map << "\n";
  for (const auto& ce : r.classes)
    s << name_of(ce.class_id) << " ap " << ce.ap << " gts " << ce.num_gts << " tp " << ce.tp
      << " fp " << ce.fp << " fn " << ce.fn << "\n";
  for (const auto& se : r.strata) s << "stratum " << se.name << " map " << se.map << "\n";
}

}  // namespace vodet
