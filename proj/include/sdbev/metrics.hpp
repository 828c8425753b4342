// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdbev/scene.hpp"

namespace sdbev {

// Detection evaluation follows the nuScenes protocol: greedy score-ordered
// matching on BEV center distance, AP normalized over recall/precision above
// 10%, TP errors at the 2 m threshold, NDS as the weighted composite.

inline const std::array<double, 4>& eval_distance_thresholds() {
  static const std::array<double, 4> t = {0.5, 1.0, 2.0, 4.0};
  return t;
}
inline constexpr double kTpThreshold = 2.0;  // meters

struct Detection {
  double x = 0, y = 0, z = 0;
  double w = 1, l = 1, h = 1;
  double yaw = 0;
  double vx = 0, vy = 0;
  int class_id = 0;
  int attr_id = 0;
  double score = 0;
};

struct EvalMatch {
  int pred = -1, gt = -1;  // indices into the per-sample lists
  double distance = 0.0;
};

struct MatchOutcome {
  std::vector<EvalMatch> matches;          // TPs in matched order
  std::vector<std::uint8_t> pred_is_tp;    // per prediction
};

/// Greedy matching: predictions in descending score order each claim the
/// nearest unmatched same-class ground truth within the threshold.
inline MatchOutcome match_for_eval(const std::vector<Detection>& preds,
                                   const std::vector<Box3D>& gts, int class_id,
                                   double threshold) {
  MatchOutcome out;
  out.pred_is_tp.assign(preds.size(), 0);
  std::vector<int> order;
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i].class_id == class_id) order.push_back(static_cast<int>(i));
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return preds[a].score > preds[b].score; });
  std::vector<char> gt_used(gts.size(), 0);
  for (int pi : order) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      if (gt_used[gi] || gts[gi].class_id != class_id) continue;
      const double d = std::hypot(preds[pi].x - gts[gi].center.x, preds[pi].y - gts[gi].center.y);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(gi);
      }
    }
    if (best >= 0 && best_d <= threshold) {
      gt_used[best] = 1;
      out.pred_is_tp[pi] = 1;
      out.matches.push_back({pi, best, best_d});
    }
  }
  return out;
}

/// One pooled (score, is_tp) pair per prediction of a class.
struct ScoredFlag {
  double score;
  bool tp;
};

/// nuScenes-convention AP: 101-point interpolated precision over recall, the
/// region below 10% recall and 10% precision clipped out and renormalized.
inline double average_precision(std::vector<ScoredFlag> flags, std::int64_t n_gt) {
  if (n_gt <= 0 || flags.empty()) return 0.0;
  std::stable_sort(flags.begin(), flags.end(),
                   [](const ScoredFlag& a, const ScoredFlag& b) { return a.score > b.score; });
  std::vector<double> rec, prec;
  std::int64_t tp = 0, fp = 0;
  for (const auto& f : flags) {
    f.tp ? ++tp : ++fp;
    rec.push_back(static_cast<double>(tp) / n_gt);
    prec.push_back(static_cast<double>(tp) / (tp + fp));
  }
  // Linear interpolation onto the 101-point recall grid, zero past max recall.
  double acc = 0.0;
  for (int i = 11; i <= 100; ++i) {
    const double r = i / 100.0;
    double p;
    if (r <= rec.front()) {
      p = prec.front();
    } else if (r > rec.back()) {
      p = 0.0;
    } else {
      size_t hi = std::lower_bound(rec.begin(), rec.end(), r) - rec.begin();
      const size_t lo = hi - 1;
      if (rec[hi] == rec[lo])
        p = prec[hi];
      else
        p = prec[lo] + (prec[hi] - prec[lo]) * (r - rec[lo]) / (rec[hi] - rec[lo]);
    }
    acc += std::max(0.0, p - 0.1);
  }
  return acc / 90.0 / 0.9;
}

struct TpErrors {
  double ate = 1, ase = 1, aoe = 1, ave = 1, aae = 1;

  std::array<double, 5> as_array() const { return {ate, ase, aoe, ave, aae}; }
};

/// Mean TP errors over matched pairs; the empty case is 1 by convention.
inline TpErrors tp_errors(const std::vector<std::pair<Detection, Box3D>>& pairs) {
  TpErrors e;
  if (pairs.empty()) return e;
  double ate = 0, ase = 0, aoe = 0, ave = 0, aae = 0;
  for (const auto& [p, g] : pairs) {
    ate += std::hypot(p.x - g.center.x, p.y - g.center.y);
    // Scale error: 1 - IoU of size-aligned, yaw-aligned boxes.
    const double inter = std::min(p.w, g.w) * std::min(p.l, g.l) * std::min(p.h, g.h);
    const double uni = p.w * p.l * p.h + g.w * g.l * g.h - inter;
    ase += 1.0 - inter / uni;
    double dyaw = std::fabs(p.yaw - g.yaw);
    dyaw = std::fmod(dyaw, 2.0 * M_PI);
    if (dyaw > M_PI) dyaw = 2.0 * M_PI - dyaw;
    aoe += dyaw;
    ave += std::hypot(p.vx - g.vx, p.vy - g.vy);
    aae += p.attr_id == g.attribute_id ? 0.0 : 1.0;
  }
  const double n = static_cast<double>(pairs.size());
  e.ate = ate / n;
  e.ase = ase / n;
  e.aoe = aoe / n;
  e.ave = ave / n;
  e.aae = aae / n;
  return e;
}

/// NDS = (1/10) * [5*mAP + sum_tp (1 - min(1, mTP))].
inline double compose_nds(double map, const std::array<double, 5>& tp_means) {
  double acc = 5.0 * map;
  for (double tp : tp_means) acc += 1.0 - std::min(1.0, tp);
  return acc / 10.0;
}

/// Per-channel IoU of thresholded probability grids; 1 when both are empty.
inline std::vector<double> bev_iou(const std::vector<double>& pred_probs,
                                   const std::vector<std::uint8_t>& gt, int channels,
                                   double threshold = 0.5) {
  if (pred_probs.size() != gt.size() || gt.size() % channels != 0)
    throw std::invalid_argument("bev_iou: shape mismatch");
  const size_t per = gt.size() / channels;
  std::vector<double> out(channels);
  for (int c = 0; c < channels; ++c) {
    std::int64_t inter = 0, uni = 0;
    for (size_t i = c * per; i < (c + 1) * per; ++i) {
      const bool p = pred_probs[i] >= threshold;
      const bool g = gt[i] != 0;
      inter += (p && g) ? 1 : 0;
      uni += (p || g) ? 1 : 0;
    }
    out[c] = uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
  }
  return out;
}

// ---- dataset-level accumulation ----

class DetEvalAccumulator {
 public:
  explicit DetEvalAccumulator(int n_classes) : n_classes_(n_classes) {
    flags_.resize(static_cast<size_t>(n_classes) * eval_distance_thresholds().size());
    n_gt_.assign(static_cast<size_t>(n_classes), 0);
    tp_pairs_.resize(static_cast<size_t>(n_classes));
  }

  void add_sample(const std::vector<Detection>& preds, const std::vector<Box3D>& gts) {
    for (int c = 0; c < n_classes_; ++c) {
      for (const auto& g : gts)
        if (g.class_id == c) ++n_gt_[static_cast<size_t>(c)];
      for (size_t ti = 0; ti < eval_distance_thresholds().size(); ++ti) {
        const auto outcome = match_for_eval(preds, gts, c, eval_distance_thresholds()[ti]);
        auto& dst = flags_[static_cast<size_t>(c) * eval_distance_thresholds().size() + ti];
        for (size_t pi = 0; pi < preds.size(); ++pi)
          if (preds[pi].class_id == c)
            dst.push_back({preds[pi].score, outcome.pred_is_tp[pi] != 0});
        if (eval_distance_thresholds()[ti] == kTpThreshold)
          for (const auto& m : outcome.matches)
            tp_pairs_[static_cast<size_t>(c)].push_back(
                {preds[static_cast<size_t>(m.pred)], gts[static_cast<size_t>(m.gt)]});
      }
    }
  }

  /// (per-class-per-threshold AP, mAP, class-averaged TP errors).
  struct Result {
    std::vector<std::vector<double>> ap;  // [class][threshold]
    double map = 0.0;
    TpErrors tp;
  };

  Result finalize() const {
    Result r;
    r.ap.assign(static_cast<size_t>(n_classes_),
                std::vector<double>(eval_distance_thresholds().size(), 0.0));
    double ap_sum = 0.0;
    for (int c = 0; c < n_classes_; ++c)
      for (size_t ti = 0; ti < eval_distance_thresholds().size(); ++ti) {
        const double ap = average_precision(
            flags_[static_cast<size_t>(c) * eval_distance_thresholds().size() + ti],
            n_gt_[static_cast<size_t>(c)]);
        r.ap[static_cast<size_t>(c)][ti] = ap;
        ap_sum += ap;
      }
    r.map = ap_sum / (n_classes_ * eval_distance_thresholds().size());
    double ate = 0, ase = 0, aoe = 0, ave = 0, aae = 0;
    for (int c = 0; c < n_classes_; ++c) {
      const TpErrors e = tp_errors(tp_pairs_[static_cast<size_t>(c)]);
      ate += e.ate; ase += e.ase; aoe += e.aoe; ave += e.ave; aae += e.aae;
    }
    r.tp.ate = ate / n_classes_;
    r.tp.ase = ase / n_classes_;
    r.tp.aoe = aoe / n_classes_;
    r.tp.ave = ave / n_classes_;
    r.tp.aae = aae / n_classes_;
    return r;
  }

 private:
  int n_classes_;
  std::vector<std::vector<ScoredFlag>> flags_;
  std::vector<std::int64_t> n_gt_;
  std::vector<std::vector<std::pair<Detection, Box3D>>> tp_pairs_;
};

// ---- report ----

struct EvalReport {
  // Flat dotted keys: ap.<class>.<thr>, tp.<name>, nds, iou.<class>,
  // timing.samples_per_s plus meta.* entries.
  nlohmann::json data = nlohmann::json::object();

  double get(const std::string& key) const { return data.at(key).get<double>(); }
  bool has(const std::string& key) const { return data.contains(key); }

  std::string dump(int indent = 2) const { return data.dump(indent); }
  static EvalReport parse(const std::string& s) {
    EvalReport r;
    r.data = nlohmann::json::parse(s);
    return r;
  }
};

inline std::string threshold_key(double t) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%.1f", t);
  return buf;
}

}  // namespace sdbev
