// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdbev/scene.hpp"

namespace sdbev {

enum class Task { detection, bev_segmentation, joint };

inline std::string task_name(Task t) {
  switch (t) {
    case Task::detection: return "detection";
    case Task::bev_segmentation: return "bev";
    case Task::joint: return "joint";
  }
  return "detection";
}

inline Task task_from_name(const std::string& s) {
  if (s == "detection") return Task::detection;
  if (s == "bev" || s == "bev_segmentation") return Task::bev_segmentation;
  if (s == "joint") return Task::joint;
  throw std::invalid_argument("unknown task: " + s);
}

struct LabelConfig {
  Task task = Task::detection;
  int n_object_classes = 3;
  int depth_bins = 32;       // C_d
  double depth_min = 1.0;    // meters
  double depth_max = 30.0;   // covers range * sqrt(2) plus margin at desk scale
  int bev_h = 40, bev_w = 40;
  double bev_cell = 1.0;     // meters per cell
  int stride = 16;           // labels live at the backbone feature resolution

  /// Road and object labels are concatenated for BEV segmentation; detection
  /// uses object labels only, so the drivable channel exists only off-task.
  bool has_drivable_channel() const { return task != Task::detection; }
  int semantic_channels() const { return n_object_classes + (has_drivable_channel() ? 1 : 0); }
  int bev_channels() const { return n_object_classes + 1; }  // drivable + objects

  void validate(double range) const {
    if (depth_bins < 2) throw std::invalid_argument("labels: depth_bins must be >= 2");
    if (depth_min <= 0.0 || depth_max <= depth_min)
      throw std::invalid_argument("labels: bad depth range");
    if (bev_h * bev_cell < 2.0 * range - 1e-9)
      throw std::invalid_argument("labels: BEV grid does not cover the perception range");
    if (stride < 1) throw std::invalid_argument("labels: bad stride");
  }
};

/// Camera with intrinsics scaled to label (stride-16) resolution.
inline Camera label_camera(const Camera& cam, int stride) {
  Camera out = cam;
  out.intr.fx /= stride;
  out.intr.fy /= stride;
  out.intr.cx /= stride;
  out.intr.cy /= stride;
  out.intr.width = cam.intr.width / stride;
  out.intr.height = cam.intr.height / stride;
  return out;
}

/// 2D semantic label maps at stride resolution, N*C_s*h*w binary.
/// Channel order: [drivable]? then object classes. Object channels are filled
/// convex hulls of the projected box corners; where hulls overlap, the nearer
/// box claims the pixel so the object group stays one-hot.
inline std::vector<std::uint8_t> make_semantic_labels(const Scene& scene, const LabelConfig& cfg,
                                                      double range) {
  cfg.validate(range);
  const int N = static_cast<int>(scene.rig.cameras.size());
  const int Cs = cfg.semantic_channels();
  const Camera lc0 = label_camera(scene.rig.cameras[0], cfg.stride);
  const int h = lc0.intr.height, w = lc0.intr.width;
  std::vector<std::uint8_t> out(static_cast<size_t>(N) * Cs * h * w, 0);
  const int drivable_off = cfg.has_drivable_channel() ? 1 : 0;

  for (int n = 0; n < N; ++n) {
    const Camera lc = label_camera(scene.rig.cameras[static_cast<size_t>(n)], cfg.stride);
    auto at = [&](int c, int y, int x) -> std::uint8_t& {
      return out[((static_cast<size_t>(n) * Cs + c) * h + y) * w + x];
    };

    if (cfg.has_drivable_channel()) {
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const auto hit = backproject_ground(x + 0.5, y + 0.5, lc, 0.0);
          if (!hit) continue;
          if (std::fabs(hit->x) > range || std::fabs(hit->y) > range) continue;
          for (const auto& poly : scene.drivable)
            if (point_in_polygon(hit->x, hit->y, poly)) {
              at(0, y, x) = 1;
              break;
            }
        }
    }

    // Projected-corner hulls per box; nearest box wins contested pixels.
    std::vector<double> best_depth(static_cast<size_t>(h) * w, 1e300);
    for (const auto& box : scene.boxes) {
      std::vector<Vec2> pts;
      for (const Vec3& c : box.corners()) {
        const ProjectedPoint pp = project_point(c, lc);
        if (pp.depth > kZNear) pts.push_back({pp.u, pp.v});
      }
      if (pts.size() < 3) continue;
      // Monotone-chain convex hull.
      std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
        return a.x != b.x ? a.x < b.x : a.y < b.y;
      });
      auto cross = [](const Vec2& o, const Vec2& a, const Vec2& b) {
        return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
      };
      std::vector<Vec2> hull(2 * pts.size());
      size_t k = 0;
      for (size_t i = 0; i < pts.size(); ++i) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) --k;
        hull[k++] = pts[i];
      }
      const size_t lower = k + 1;
      for (size_t i = pts.size() - 1; i-- > 0;) {
        while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) --k;
        hull[k++] = pts[i];
      }
      hull.resize(k > 1 ? k - 1 : k);
      if (hull.size() < 3) continue;
      const Vec3 pc = lc.extr.rotation * box.center + lc.extr.translation;
      const double depth = pc.z;
      double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
      for (const auto& p : hull) {
        umin = std::min(umin, p.x); umax = std::max(umax, p.x);
        vmin = std::min(vmin, p.y); vmax = std::max(vmax, p.y);
      }
      const int x0 = std::max(0, static_cast<int>(std::floor(umin)));
      const int x1 = std::min(w - 1, static_cast<int>(std::ceil(umax)));
      const int y0 = std::max(0, static_cast<int>(std::floor(vmin)));
      const int y1 = std::min(h - 1, static_cast<int>(std::ceil(vmax)));
      Polygon2D hp;
      hp.pts = hull;
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          if (!point_in_polygon(x + 0.5, y + 0.5, hp)) continue;
          const size_t idx = static_cast<size_t>(y) * w + x;
          if (depth >= best_depth[idx]) continue;
          best_depth[idx] = depth;
          for (int c = 0; c < cfg.n_object_classes; ++c) at(drivable_off + c, y, x) = 0;
          at(drivable_off + box.class_id, y, x) = 1;
        }
    }
  }
  return out;
}

struct DepthLabels {
  std::vector<std::uint8_t> onehot;  // N*C_d*h*w
  std::vector<std::uint8_t> mask;    // N*h*w, 1 where a depth bin is set
};

/// One-hot depth bins from the point cloud at stride resolution.
/// bin = floor((d - d_min) / delta), clamped to [0, C_d - 1].
inline DepthLabels make_depth_labels(const Scene& scene, const LabelConfig& cfg, double range) {
  cfg.validate(range);
  const int N = static_cast<int>(scene.rig.cameras.size());
  const Camera lc0 = label_camera(scene.rig.cameras[0], cfg.stride);
  const int h = lc0.intr.height, w = lc0.intr.width;
  const double delta = (cfg.depth_max - cfg.depth_min) / cfg.depth_bins;
  DepthLabels out;
  out.onehot.assign(static_cast<size_t>(N) * cfg.depth_bins * h * w, 0);
  out.mask.assign(static_cast<size_t>(N) * h * w, 0);
  for (int n = 0; n < N; ++n) {
    const Camera lc = label_camera(scene.rig.cameras[static_cast<size_t>(n)], cfg.stride);
    const DepthImage img = render_depth(scene.points, lc);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!img.is_valid(y, x)) continue;
        int bin = static_cast<int>(std::floor((img.at(y, x) - cfg.depth_min) / delta));
        bin = std::max(0, std::min(cfg.depth_bins - 1, bin));
        out.onehot[((static_cast<size_t>(n) * cfg.depth_bins + bin) * h + y) * w + x] = 1;
        out.mask[(static_cast<size_t>(n) * h + y) * w + x] = 1;
      }
  }
  return out;
}

/// BEV occupancy grid, C_b*H_b*W_b binary, ego at grid center.
/// Channel 0 is drivable area, then one channel per object class.
inline std::vector<std::uint8_t> make_bev_gt(const Scene& scene, const LabelConfig& cfg,
                                             double range) {
  cfg.validate(range);
  const int Cb = cfg.bev_channels();
  std::vector<std::uint8_t> out(static_cast<size_t>(Cb) * cfg.bev_h * cfg.bev_w, 0);
  const double half_h = cfg.bev_h * cfg.bev_cell / 2.0;
  const double half_w = cfg.bev_w * cfg.bev_cell / 2.0;
  auto cell_x = [&](int ix) { return (ix + 0.5) * cfg.bev_cell - half_w; };
  auto cell_y = [&](int iy) { return (iy + 0.5) * cfg.bev_cell - half_h; };
  auto at = [&](int c, int iy, int ix) -> std::uint8_t& {
    return out[(static_cast<size_t>(c) * cfg.bev_h + iy) * cfg.bev_w + ix];
  };

  for (const auto& poly : scene.drivable) {
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& p : poly.pts) {
      xmin = std::min(xmin, p.x); xmax = std::max(xmax, p.x);
      ymin = std::min(ymin, p.y); ymax = std::max(ymax, p.y);
    }
    for (int iy = 0; iy < cfg.bev_h; ++iy) {
      const double y = cell_y(iy);
      if (y < ymin || y > ymax) continue;
      for (int ix = 0; ix < cfg.bev_w; ++ix) {
        const double x = cell_x(ix);
        if (x < xmin || x > xmax) continue;
        if (point_in_polygon(x, y, poly)) at(0, iy, ix) = 1;
      }
    }
  }

  for (const auto& box : scene.boxes) {
    const double rad = std::hypot(box.l, box.w) / 2.0;
    const int ix0 = std::max(0, static_cast<int>(std::floor((box.center.x - rad + half_w) / cfg.bev_cell)));
    const int ix1 = std::min(cfg.bev_w - 1, static_cast<int>(std::ceil((box.center.x + rad + half_w) / cfg.bev_cell)));
    const int iy0 = std::max(0, static_cast<int>(std::floor((box.center.y - rad + half_h) / cfg.bev_cell)));
    const int iy1 = std::min(cfg.bev_h - 1, static_cast<int>(std::ceil((box.center.y + rad + half_h) / cfg.bev_cell)));
    for (int iy = iy0; iy <= iy1; ++iy)
      for (int ix = ix0; ix <= ix1; ++ix)
        if (box.contains_bev(cell_x(ix), cell_y(iy))) at(1 + box.class_id, iy, ix) = 1;
  }
  return out;
}

}  // namespace sdbev
