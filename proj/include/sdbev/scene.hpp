// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdbev/geometry.hpp"
#include "sdbev/rng.hpp"

namespace sdbev {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

/// 3D box in ego frame. Size is (w, l, h): width across, length along the
/// heading given by yaw, height up. yaw in (-pi, pi].
struct Box3D {
  Vec3 center;
  double w = 1.0, l = 1.0, h = 1.0;
  double yaw = 0.0;
  double vx = 0.0, vy = 0.0;
  int class_id = 0;
  int attribute_id = 0;

  void validate() const {
    if (w <= 0.0 || l <= 0.0 || h <= 0.0) throw std::invalid_argument("box: size must be > 0");
    if (!(yaw > -M_PI - 1e-12 && yaw <= M_PI + 1e-12))
      throw std::invalid_argument("box: yaw outside (-pi, pi]");
  }

  std::array<Vec2, 4> bev_corners() const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    std::array<Vec2, 4> out;
    const double hl = l / 2.0, hw = w / 2.0;
    const double dx[4] = {hl, hl, -hl, -hl};
    const double dy[4] = {hw, -hw, -hw, hw};
    for (int i = 0; i < 4; ++i)
      out[i] = {center.x + c * dx[i] - s * dy[i], center.y + s * dx[i] + c * dy[i]};
    return out;
  }

  std::array<Vec3, 8> corners() const {
    const auto bev = bev_corners();
    std::array<Vec3, 8> out;
    for (int i = 0; i < 4; ++i) {
      out[i] = {bev[i].x, bev[i].y, center.z - h / 2.0};
      out[i + 4] = {bev[i].x, bev[i].y, center.z + h / 2.0};
    }
    return out;
  }

  /// True when (x, y) lies inside the BEV footprint.
  bool contains_bev(double x, double y) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double dx = x - center.x, dy = y - center.y;
    const double lx = c * dx + s * dy;   // along heading
    const double ly = -s * dx + c * dy;  // across
    return std::fabs(lx) <= l / 2.0 && std::fabs(ly) <= w / 2.0;
  }
};

struct Polygon2D {
  std::vector<Vec2> pts;  // CCW or CW, simple (non-self-intersecting)
};

/// Even-odd point-in-polygon test.
inline bool point_in_polygon(double x, double y, const Polygon2D& poly) {
  bool inside = false;
  const size_t n = poly.pts.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2& a = poly.pts[i];
    const Vec2& b = poly.pts[j];
    if ((a.y > y) != (b.y > y)) {
      const double t = (y - a.y) / (b.y - a.y);
      if (x < a.x + t * (b.x - a.x)) inside = !inside;
    }
  }
  return inside;
}

/// Separating-axis overlap test for two convex BEV quads.
inline bool quads_overlap(const std::array<Vec2, 4>& a, const std::array<Vec2, 4>& b) {
  auto axis_separates = [](const std::array<Vec2, 4>& p, const std::array<Vec2, 4>& q) {
    for (int i = 0; i < 4; ++i) {
      const Vec2& p0 = p[i];
      const Vec2& p1 = p[(i + 1) % 4];
      const double nx = -(p1.y - p0.y), ny = p1.x - p0.x;
      double pmin = 1e300, pmax = -1e300, qmin = 1e300, qmax = -1e300;
      for (int k = 0; k < 4; ++k) {
        const double pp = nx * p[k].x + ny * p[k].y;
        const double qq = nx * q[k].x + ny * q[k].y;
        pmin = std::min(pmin, pp); pmax = std::max(pmax, pp);
        qmin = std::min(qmin, qq); qmax = std::max(qmax, qq);
      }
      if (pmax < qmin || qmax < pmin) return true;
    }
    return false;
  };
  return !axis_separates(a, b) && !axis_separates(b, a);
}

struct Scene {
  std::vector<Box3D> boxes;
  std::vector<Polygon2D> drivable;
  std::vector<Vec3> points;
  CameraRig rig;
  std::uint64_t seed = 0;
};

/// Per-class rendering / sampling spec. Three desk classes.
struct ClassSpec {
  const char* name;
  double l, w, h;   // nominal size, meters
  double max_speed; // m/s
  double r, g, b;   // base body color
};

inline const std::array<ClassSpec, 3>& class_specs() {
  static const std::array<ClassSpec, 3> specs = {{
      {"car", 4.4, 1.9, 1.6, 3.0, 0.20, 0.35, 0.85},
      {"pedestrian", 0.7, 0.7, 1.75, 1.0, 0.85, 0.25, 0.20},
      {"cyclist", 1.8, 0.6, 1.5, 2.0, 0.90, 0.80, 0.15},
  }};
  return specs;
}

struct SceneConfig {
  int n_cameras = 6;
  int image_height = 64;
  int image_width = 176;
  double cam_height = 1.6;
  double cam_pitch_deg = 10.0;
  double hfov_deg = 70.0;
  double range = 20.0;    // perception range R: x, y in [-R, R]
  double z_range = 3.0;   // z in [-z_range, z_range]
  int min_boxes = 2;
  int max_boxes = 6;
  int n_points = 2000;
  double box_point_frac = 0.7;
  int n_classes = 3;
  int n_attributes = 2;
  int max_place_attempts = 200;

  void validate() const {
    if (n_cameras < 1 || image_height < 16 || image_width < 16)
      throw std::invalid_argument("scene config: bad camera/image settings");
    if (range <= 0.0 || min_boxes < 0 || max_boxes < min_boxes || n_points < 0)
      throw std::invalid_argument("scene config: bad counts/range");
    if (n_classes < 1 || n_classes > static_cast<int>(class_specs().size()))
      throw std::invalid_argument("scene config: unsupported class count");
  }

  /// Full-scale preset matching the published input resolution and ranges.
  static SceneConfig paper_scale() {
    SceneConfig c;
    c.image_height = 512;
    c.image_width = 1408;
    c.range = 61.2;
    c.z_range = 10.0;
    return c;
  }
};

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Rotated road band through the scene used as a drivable-area polygon.
inline Polygon2D make_road_band(double cx, double cy, double heading, double half_len,
                                double half_width) {
  const double c = std::cos(heading), s = std::sin(heading);
  Polygon2D poly;
  const double dx[4] = {half_len, half_len, -half_len, -half_len};
  const double dy[4] = {half_width, -half_width, -half_width, half_width};
  for (int i = 0; i < 4; ++i)
    poly.pts.push_back({cx + c * dx[i] - s * dy[i], cy + s * dx[i] + c * dy[i]});
  return poly;
}

/// Procedural scene: surround rig, BEV-disjoint boxes (rejection sampled),
/// road bands, and a point cloud biased toward box surfaces.
inline Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(Rng::mix(seed, 0x5ce9e));
  Scene scene;
  scene.seed = seed;
  scene.rig = make_ring_rig(cfg.n_cameras, cfg.image_width, cfg.image_height, cfg.hfov_deg,
                            cfg.cam_height, cfg.cam_pitch_deg);

  // Drivable area: one or two road bands through the middle of the range.
  const int n_roads = 1 + rng.uniform_int(0, 1);
  for (int i = 0; i < n_roads; ++i) {
    const double heading = rng.uniform(0.0, M_PI);
    const double width = rng.uniform(3.5, 6.0);
    const double off = rng.uniform(-0.25 * cfg.range, 0.25 * cfg.range);
    scene.drivable.push_back(make_road_band(-std::sin(heading) * off, std::cos(heading) * off,
                                            heading, cfg.range * 1.4, width));
  }

  // Boxes: rejection-sample BEV-disjoint placements with a clearance margin.
  // Half the scenes draw classes uniformly; the rest lean on a theme class,
  // so the global class mix carries scene-level information.
  const int n_boxes = rng.uniform_int(cfg.min_boxes, cfg.max_boxes);
  const int theme = rng.uniform_int(0, cfg.n_classes - 1);
  const bool themed = rng.uniform() < 0.5;
  int attempts = 0;
  while (static_cast<int>(scene.boxes.size()) < n_boxes) {
    if (++attempts > cfg.max_place_attempts * std::max(1, n_boxes))
      throw GenerationError("scene generation: rejection sampling exceeded max attempts; "
                            "config too dense");
    const int cls = themed && rng.uniform() < 0.75 ? theme : rng.uniform_int(0, cfg.n_classes - 1);
    const ClassSpec& spec = class_specs()[cls];
    Box3D box;
    box.class_id = cls;
    box.attribute_id = rng.uniform_int(0, cfg.n_attributes - 1);
    const double radius = rng.uniform(3.0, cfg.range - 2.0);
    const double theta = rng.uniform(0.0, 2.0 * M_PI);
    box.l = spec.l * rng.uniform(0.85, 1.15);
    box.w = spec.w * rng.uniform(0.85, 1.15);
    box.h = spec.h * rng.uniform(0.9, 1.1);
    box.center = {radius * std::cos(theta), radius * std::sin(theta), box.h / 2.0};
    box.yaw = rng.uniform(-M_PI, M_PI);
    if (box.yaw <= -M_PI) box.yaw = M_PI;
    const double speed = rng.uniform(0.0, spec.max_speed);
    box.vx = speed * std::cos(box.yaw);
    box.vy = speed * std::sin(box.yaw);
    // Clearance check against already placed boxes.
    Box3D inflated = box;
    inflated.l += 0.6;
    inflated.w += 0.6;
    bool clear = true;
    for (const auto& other : scene.boxes)
      if (quads_overlap(inflated.bev_corners(), other.bev_corners())) {
        clear = false;
        break;
      }
    if (!clear) continue;
    box.validate();
    scene.boxes.push_back(box);
  }

  // Point cloud: box surfaces and ground, mimicking sparse lidar returns.
  const int n_box_pts = scene.boxes.empty()
                            ? 0
                            : static_cast<int>(cfg.n_points * cfg.box_point_frac);
  for (int i = 0; i < n_box_pts; ++i) {
    const Box3D& box = scene.boxes[static_cast<size_t>(rng.uniform_int(
        0, static_cast<int>(scene.boxes.size()) - 1))];
    // Sample one of the four vertical faces or the top.
    const int face = rng.uniform_int(0, 4);
    double lx, ly, lz;
    switch (face) {
      case 0: lx = box.l / 2.0; ly = rng.uniform(-box.w / 2.0, box.w / 2.0); lz = rng.uniform(0.0, box.h); break;
      case 1: lx = -box.l / 2.0; ly = rng.uniform(-box.w / 2.0, box.w / 2.0); lz = rng.uniform(0.0, box.h); break;
      case 2: ly = box.w / 2.0; lx = rng.uniform(-box.l / 2.0, box.l / 2.0); lz = rng.uniform(0.0, box.h); break;
      case 3: ly = -box.w / 2.0; lx = rng.uniform(-box.l / 2.0, box.l / 2.0); lz = rng.uniform(0.0, box.h); break;
      default: lz = box.h; lx = rng.uniform(-box.l / 2.0, box.l / 2.0); ly = rng.uniform(-box.w / 2.0, box.w / 2.0); break;
    }
    const double c = std::cos(box.yaw), s = std::sin(box.yaw);
    scene.points.push_back({box.center.x + c * lx - s * ly, box.center.y + s * lx + c * ly,
                            box.center.z - box.h / 2.0 + lz});
  }
  for (int i = n_box_pts; i < cfg.n_points; ++i) {
    const double r = std::sqrt(rng.uniform()) * cfg.range;
    const double t = rng.uniform(0.0, 2.0 * M_PI);
    scene.points.push_back({r * std::cos(t), r * std::sin(t), 0.0});
  }
  return scene;
}

}  // namespace sdbev
