// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "sdbev/autodiff.hpp"
#include "sdbev/model.hpp"
#include "sdbev/scene.hpp"

namespace sdbev {

struct LossWeights {
  double gamma_seg = 3.0;  // semantics-to-depth ratio of 3 is the tuned default
  double gamma_dep = 1.0;
  double w_det = 1.0;
  double w_bev = 0.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double match_cls = 2.0;
  double match_l1 = 0.25;
  double bev_pos_weight = 2.0;  // weight on positive BEV cells, all classes
  double w_attr = 1.0;          // attribute-head supervision, outside L_det
  bool aux_per_layer = true;    // supervise every decoder layer

  void validate() const {
    if (gamma_seg < 0 || gamma_dep < 0 || w_det < 0 || w_bev < 0 || bev_pos_weight < 0 ||
        w_attr < 0)
      throw std::invalid_argument("loss weights must be >= 0");
  }
};

// ---- assignment ----

namespace loss_detail {

/// Rectangular Hungarian (rows <= cols) via shortest augmenting paths.
/// Returns the column assigned to each row.
inline std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  if (n == 0) return {};
  const int m = static_cast<int>(cost[0].size());
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);  // 1-based
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, std::numeric_limits<double>::infinity());
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = std::numeric_limits<double>::infinity();
      int j1 = -1;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

inline double assignment_cost(const std::vector<std::vector<double>>& cost,
                              const std::vector<int>& assign) {
  double total = 0.0;
  for (size_t i = 0; i < assign.size(); ++i) total += cost[i][static_cast<size_t>(assign[i])];
  return total;
}

/// Min assignment cost over rows `rows` restricted to the columns not in
/// `taken`. Used by the lexicographic tie refinement.
inline double min_cost_excluding(const std::vector<std::vector<double>>& cost,
                                 const std::vector<int>& rows, const std::vector<char>& taken) {
  if (rows.empty()) return 0.0;
  std::vector<int> cols;
  for (size_t j = 0; j < taken.size(); ++j)
    if (!taken[j]) cols.push_back(static_cast<int>(j));
  std::vector<std::vector<double>> sub(rows.size(), std::vector<double>(cols.size()));
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < cols.size(); ++j)
      sub[i][j] = cost[static_cast<size_t>(rows[i])][static_cast<size_t>(cols[j])];
  const auto assign = hungarian(sub);
  double total = 0.0;
  for (size_t i = 0; i < assign.size(); ++i)
    total += sub[i][static_cast<size_t>(assign[i])];
  return total;
}

}  // namespace loss_detail

/// Minimum-cost assignment of ground-truth rows to query columns, ties broken
/// toward the lowest query index in ground-truth order.
inline std::vector<int> min_cost_assignment(const std::vector<std::vector<double>>& cost) {
  using namespace loss_detail;
  const int n = cost.empty() ? 0 : static_cast<int>(cost.size());
  if (n == 0) return {};
  const int m = static_cast<int>(cost[0].size());
  if (n > m) throw std::invalid_argument("assignment: more ground truths than queries");
  for (const auto& row : cost)
    for (double c : row)
      if (!std::isfinite(c)) throw std::invalid_argument("assignment: non-finite cost");
  const auto base = hungarian(cost);
  const double optimal = assignment_cost(cost, base);
  const double tol = 1e-9 * (1.0 + std::fabs(optimal));

  std::vector<int> result(n, -1);
  std::vector<char> taken(static_cast<size_t>(m), 0);
  double fixed_cost = 0.0;
  for (int g = 0; g < n; ++g) {
    std::vector<int> rest;
    for (int r = g + 1; r < n; ++r) rest.push_back(r);
    for (int q = 0; q < m; ++q) {
      if (taken[static_cast<size_t>(q)]) continue;
      taken[static_cast<size_t>(q)] = 1;
      const double completion = min_cost_excluding(cost, rest, taken);
      const double total = fixed_cost + cost[static_cast<size_t>(g)][static_cast<size_t>(q)] +
                           completion;
      if (total <= optimal + tol) {
        result[g] = q;
        fixed_cost += cost[static_cast<size_t>(g)][static_cast<size_t>(q)];
        break;
      }
      taken[static_cast<size_t>(q)] = 0;
    }
    if (result[g] < 0) throw std::logic_error("assignment: refinement failed");
  }
  return result;
}

namespace loss_detail {

inline double sigmoid_scalar(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

/// DETR-style focal matching cost for assigning class c to a query.
inline double focal_cost(double prob, double alpha, double gamma) {
  const double p = std::min(1.0 - 1e-12, std::max(1e-12, prob));
  const double pos = alpha * std::pow(1.0 - p, gamma) * (-std::log(p));
  const double neg = (1.0 - alpha) * std::pow(p, gamma) * (-std::log(1.0 - p));
  return pos - neg;
}

}  // namespace loss_detail

/// Assigns each ground-truth box to a query by minimum cost
/// lambda_cls * focal + lambda_l1 * L1 over the 10-dim box parameterization.
/// cls_logits and boxes are detached values from one decoder layer.
inline std::vector<int> match_queries(const Tensor& cls_logits, const Tensor& boxes10,
                                      const std::vector<Box3D>& gts, const LossWeights& w) {
  const int n_q = cls_logits.dim(0);
  if (static_cast<int>(gts.size()) > n_q)
    throw std::invalid_argument("match_queries: more ground truths than queries");
  if (gts.empty()) return {};
  std::vector<std::vector<double>> cost(gts.size(), std::vector<double>(n_q));
  for (size_t g = 0; g < gts.size(); ++g) {
    const auto target = box_to_target10(gts[g]);
    for (int q = 0; q < n_q; ++q) {
      const double prob =
          loss_detail::sigmoid_scalar(cls_logits.at(q, gts[g].class_id));
      double l1 = 0.0;
      for (int k = 0; k < 10; ++k) l1 += std::fabs(boxes10.at(q, k) - target[k]);
      cost[g][q] = w.match_cls * loss_detail::focal_cost(prob, w.focal_alpha, w.focal_gamma) +
                   w.match_l1 * l1;
    }
  }
  return min_cost_assignment(cost);
}

// ---- differentiable losses ----

namespace loss_detail {

/// Stable log(sigmoid(z)) and log(1 - sigmoid(z)) as vars: -softplus(-z), -softplus(z).
inline ad::Var log_p(const ad::Var& z) { return ad::neg(ad::softplus(ad::neg(z))); }
inline ad::Var log_1mp(const ad::Var& z) { return ad::neg(ad::softplus(z)); }

}  // namespace loss_detail

/// Sigmoid focal loss against a {0,1} target tensor, summed, then normalized
/// by `norm`. Gradients flow through the modulating factor as usual.
inline ad::Var focal_loss(const ad::Var& logits, const Tensor& targets, double alpha, double gamma,
                          double norm) {
  if (!logits->val.same_shape(targets))
    throw std::invalid_argument("focal_loss: target shape mismatch");
  ad::Var p = ad::sigmoid(logits);
  ad::Var t = ad::constant(targets);
  Tensor one_minus_t = targets;
  for (auto& e : one_minus_t.v) e = 1.0 - e;
  ad::Var omt = ad::constant(one_minus_t);
  // positives: -alpha * (1-p)^gamma * log p
  ad::Var pos = ad::mul(t, ad::mul(ad::powc(ad::scalar_add(ad::neg(p), 1.0), gamma),
                                   ad::neg(loss_detail::log_p(logits))));
  // negatives: -(1-alpha) * p^gamma * log(1-p)
  ad::Var negv = ad::mul(omt, ad::mul(ad::powc(p, gamma),
                                      ad::neg(loss_detail::log_1mp(logits))));
  ad::Var total = ad::add(ad::scalar_mul(pos, alpha), ad::scalar_mul(negv, 1.0 - alpha));
  return ad::scalar_mul(ad::sum_all(total), 1.0 / norm);
}

struct DetectionLossOut {
  ad::Var total;
  double cls_value = 0.0, reg_value = 0.0;  // last-layer components, for logs
  std::vector<std::vector<int>> assignments;  // per layer, query index per GT
};

/// Focal classification + L1 regression, matched per decoder layer, summed
/// over layers when per-layer supervision is on.
inline DetectionLossOut detection_loss(const DetOut& det, const std::vector<Box3D>& gts,
                                       const LossWeights& w, const ModelConfig& cfg) {
  w.validate();
  DetectionLossOut out;
  std::vector<ad::Var> layer_losses;
  const size_t first_layer = w.aux_per_layer ? 0 : det.cls_logits.size() - 1;
  for (size_t li = first_layer; li < det.cls_logits.size(); ++li) {
    const ad::Var& logits = det.cls_logits[li];
    const ad::Var& boxes = det.boxes[li];
    const auto assign = match_queries(logits->val, boxes->val, gts, w);
    out.assignments.push_back(assign);
    const int n_q = logits->val.dim(0);
    const double norm = std::max<size_t>(1, gts.size());

    Tensor cls_target({n_q, cfg.n_classes});
    for (size_t g = 0; g < gts.size(); ++g) cls_target.at(assign[g], gts[g].class_id) = 1.0;
    ad::Var l_cls = focal_loss(logits, cls_target, w.focal_alpha, w.focal_gamma, norm);

    ad::Var l_reg;
    if (!gts.empty()) {
      std::vector<int> qidx(gts.size());
      Tensor box_target({static_cast<int>(gts.size()), 10});
      for (size_t g = 0; g < gts.size(); ++g) {
        qidx[g] = assign[g];
        const auto t10 = box_to_target10(gts[g]);
        for (int k = 0; k < 10; ++k) box_target.at(static_cast<int>(g), k) = t10[k];
      }
      ad::Var matched = ad::gather_rows(boxes, qidx);
      l_reg = ad::scalar_mul(ad::sum_all(ad::abs_(ad::sub(matched, ad::constant(box_target)))),
                             1.0 / norm);
    } else {
      l_reg = ad::constant(Tensor::scalar(0.0));
    }
    if (li + 1 == det.cls_logits.size()) {
      out.cls_value = l_cls->val.at(0);
      out.reg_value = l_reg->val.at(0);
    }
    layer_losses.push_back(ad::add(l_cls, l_reg));
  }
  out.total = ad::add_n(layer_losses);
  return out;
}

/// Focal supervision of the attribute head on matched queries, reusing the
/// detection assignments. Kept outside L_det so that stays focal + L1.
inline ad::Var attribute_loss(const DetOut& det, const std::vector<Box3D>& gts,
                              const std::vector<std::vector<int>>& assignments,
                              const LossWeights& w, const ModelConfig& cfg) {
  if (gts.empty() || assignments.empty()) return ad::constant(Tensor::scalar(0.0));
  std::vector<ad::Var> layer_losses;
  const size_t first_layer = det.attr_logits.size() - assignments.size();
  for (size_t li = 0; li < assignments.size(); ++li) {
    const auto& assign = assignments[li];
    std::vector<int> qidx(gts.size());
    Tensor attr_target({static_cast<int>(gts.size()), cfg.n_attributes});
    for (size_t g = 0; g < gts.size(); ++g) {
      qidx[g] = assign[g];
      attr_target.at(static_cast<int>(g), gts[g].attribute_id) = 1.0;
    }
    ad::Var matched = ad::gather_rows(det.attr_logits[first_layer + li], qidx);
    layer_losses.push_back(focal_loss(matched, attr_target, w.focal_alpha, w.focal_gamma,
                                      static_cast<double>(gts.size())));
  }
  return ad::add_n(layer_losses);
}

/// Per-channel binary cross-entropy with a positive-cell weight, mean over
/// all cells and channels.
inline ad::Var bev_loss(const ad::Var& bev_logits, const std::vector<std::uint8_t>& gt,
                        const LossWeights& w) {
  const std::int64_t n = bev_logits->val.numel();
  if (static_cast<std::int64_t>(gt.size()) != n)
    throw std::invalid_argument("bev_loss: shape mismatch");
  Tensor pos({static_cast<int>(n)});
  Tensor negm({static_cast<int>(n)});
  for (std::int64_t i = 0; i < n; ++i) {
    pos.v[i] = gt[i] ? w.bev_pos_weight : 0.0;
    negm.v[i] = gt[i] ? 0.0 : 1.0;
  }
  ad::Var flat = ad::reshape(bev_logits, {static_cast<int>(n)});
  ad::Var loss = ad::add(ad::mul(ad::constant(pos), ad::neg(loss_detail::log_p(flat))),
                         ad::mul(ad::constant(negm), ad::neg(loss_detail::log_1mp(flat))));
  return ad::mean_all(loss);
}

struct AuxLossOut {
  ad::Var l_seg, l_dep;
};

/// Binary cross-entropy on the auxiliary branches. Depth is restricted to
/// pixels with a valid bin and normalized by valid count times bins.
inline AuxLossOut auxiliary_losses(const ad::Var& seg_logits, const std::vector<std::uint8_t>& seg_gt,
                                   const ad::Var& dep_logits, const std::vector<std::uint8_t>& dep_gt,
                                   const std::vector<std::uint8_t>& dep_mask, int depth_bins) {
  AuxLossOut out;
  if (seg_logits) {
    const std::int64_t n = seg_logits->val.numel();
    if (static_cast<std::int64_t>(seg_gt.size()) != n)
      throw std::invalid_argument("auxiliary_losses: segmentation shape mismatch");
    Tensor t({static_cast<int>(n)});
    for (std::int64_t i = 0; i < n; ++i) t.v[i] = seg_gt[i];
    Tensor omt({static_cast<int>(n)});
    for (std::int64_t i = 0; i < n; ++i) omt.v[i] = 1.0 - t.v[i];
    ad::Var flat = ad::reshape(seg_logits, {static_cast<int>(n)});
    ad::Var loss = ad::add(ad::mul(ad::constant(t), ad::neg(loss_detail::log_p(flat))),
                           ad::mul(ad::constant(omt), ad::neg(loss_detail::log_1mp(flat))));
    out.l_seg = ad::mean_all(loss);
  } else {
    out.l_seg = ad::constant(Tensor::scalar(0.0));
  }

  if (dep_logits) {
    const std::int64_t n = dep_logits->val.numel();
    if (static_cast<std::int64_t>(dep_gt.size()) != n)
      throw std::invalid_argument("auxiliary_losses: depth shape mismatch");
    const std::int64_t n_px = static_cast<std::int64_t>(dep_mask.size());
    if (n_px * depth_bins != n)
      throw std::invalid_argument("auxiliary_losses: depth mask shape mismatch");
    std::int64_t n_valid = 0;
    for (auto m : dep_mask) n_valid += m ? 1 : 0;
    if (n_valid == 0) {
      out.l_dep = ad::constant(Tensor::scalar(0.0));
      return out;
    }
    // Expand the pixel mask across bins. Depth layout is [N, C_d, h, w] and
    // the mask [N, h, w]; pixel px = (n, y, x) with hw = h*w.
    const std::int64_t hw_total = n_px;  // pixels across all views
    const std::int64_t hw = dep_logits->val.dim(2) * static_cast<std::int64_t>(dep_logits->val.dim(3));
    Tensor t({static_cast<int>(n)});
    Tensor omt({static_cast<int>(n)});
    Tensor m({static_cast<int>(n)});
    const int n_views = dep_logits->val.dim(0);
    (void)hw_total;
    for (int vi = 0; vi < n_views; ++vi)
      for (int b = 0; b < depth_bins; ++b)
        for (std::int64_t p = 0; p < hw; ++p) {
          const std::int64_t idx = (static_cast<std::int64_t>(vi) * depth_bins + b) * hw + p;
          const std::int64_t pidx = static_cast<std::int64_t>(vi) * hw + p;
          t.v[idx] = dep_gt[idx];
          omt.v[idx] = 1.0 - t.v[idx];
          m.v[idx] = dep_mask[pidx] ? 1.0 : 0.0;
        }
    ad::Var flat = ad::reshape(dep_logits, {static_cast<int>(n)});
    ad::Var loss = ad::add(ad::mul(ad::constant(t), ad::neg(loss_detail::log_p(flat))),
                           ad::mul(ad::constant(omt), ad::neg(loss_detail::log_1mp(flat))));
    loss = ad::mul(loss, ad::constant(m));
    out.l_dep = ad::scalar_mul(ad::sum_all(loss), 1.0 / (static_cast<double>(n_valid) * depth_bins));
  } else {
    out.l_dep = ad::constant(Tensor::scalar(0.0));
  }
  return out;
}

/// L_total = w_det*L_det + w_bev*L_bev + gamma_seg*L_seg + gamma_dep*L_dep.
/// Terms with zero weight are dropped from the graph.
inline ad::Var total_loss(const ad::Var& l_det, const ad::Var& l_bev, const ad::Var& l_seg,
                          const ad::Var& l_dep, const LossWeights& w) {
  std::vector<ad::Var> terms;
  if (l_det && w.w_det != 0.0) terms.push_back(ad::scalar_mul(l_det, w.w_det));
  if (l_bev && w.w_bev != 0.0) terms.push_back(ad::scalar_mul(l_bev, w.w_bev));
  if (l_seg && w.gamma_seg != 0.0) terms.push_back(ad::scalar_mul(l_seg, w.gamma_seg));
  if (l_dep && w.gamma_dep != 0.0) terms.push_back(ad::scalar_mul(l_dep, w.gamma_dep));
  return ad::add_n(terms);
}

}  // namespace sdbev
