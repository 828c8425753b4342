// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "sdbev/scene.hpp"

namespace sdbev {

// Toy rasterizer for the synthetic views: sky + ground first, then box faces
// painted far-to-near. Depth and primitive ids are kept per pixel so tests can
// check that every painted pixel is explained by a scene primitive.

enum class PrimKind : std::int8_t { background = 0, terrain = 1, drivable = 2, box = 3 };

struct ViewRender {
  int height = 0, width = 0;
  std::vector<float> rgb;          // 3*H*W, channel-major, [0, 1]
  std::vector<double> depth;       // H*W, +inf where background
  std::vector<PrimKind> kind;      // H*W
  std::vector<int> prim;           // H*W; polygon or box index, -1 otherwise

  float& px(int ch, int y, int x) { return rgb[(static_cast<size_t>(ch) * height + y) * width + x]; }
  float px(int ch, int y, int x) const {
    return rgb[(static_cast<size_t>(ch) * height + y) * width + x];
  }
};

namespace render_detail {

/// Cheap deterministic value noise in [-1, 1).
inline double hash_noise(std::uint64_t seed, int a, int b, int c) {
  std::uint64_t h = Rng::mix(seed, (static_cast<std::uint64_t>(a) << 40) ^
                                       (static_cast<std::uint64_t>(b) << 20) ^
                                       static_cast<std::uint64_t>(c));
  return static_cast<double>(h >> 11) * 0x1.0p-53 * 2.0 - 1.0;
}

inline float clamp01(double v) { return static_cast<float>(std::min(1.0, std::max(0.0, v))); }

inline bool point_in_convex(const std::vector<Vec2>& poly, double x, double y) {
  double sign = 0.0;
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[(i + 1) % n];
    const double cr = (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
    if (cr != 0.0) {
      if (sign == 0.0)
        sign = cr;
      else if ((cr > 0.0) != (sign > 0.0))
        return false;
    }
  }
  return true;
}

}  // namespace render_detail

/// Full render of one view with depth and primitive buffers.
inline ViewRender render_view(const Scene& scene, int view_idx, double max_ground_dist = 80.0) {
  using namespace render_detail;
  const Camera& cam = scene.rig.cameras[static_cast<size_t>(view_idx)];
  const int H = cam.intr.height, W = cam.intr.width;
  ViewRender out;
  out.height = H;
  out.width = W;
  out.rgb.assign(static_cast<size_t>(3) * H * W, 0.0f);
  out.depth.assign(static_cast<size_t>(H) * W, std::numeric_limits<double>::infinity());
  out.kind.assign(static_cast<size_t>(H) * W, PrimKind::background);
  out.prim.assign(static_cast<size_t>(H) * W, -1);
  const std::uint64_t nseed = Rng::mix(scene.seed, 0xbadcafe + static_cast<std::uint64_t>(view_idx));

  // Sky gradient and ground plane.
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const size_t idx = static_cast<size_t>(y) * W + x;
      const double noise = 0.02 * hash_noise(nseed, y, x, 0);
      const auto hit = backproject_ground(x + 0.5, y + 0.5, cam, 0.0);
      bool ground = false;
      if (hit) {
        const Vec3 p = *hit;
        const double dist = std::hypot(p.x, p.y);
        if (dist <= max_ground_dist) {
          ground = true;
          const Vec3 pc = cam.extr.rotation * p + cam.extr.translation;
          out.depth[idx] = pc.z;
          bool driv = false;
          for (size_t pi = 0; pi < scene.drivable.size(); ++pi)
            if (point_in_polygon(p.x, p.y, scene.drivable[pi])) {
              driv = true;
              out.kind[idx] = PrimKind::drivable;
              out.prim[idx] = static_cast<int>(pi);
              break;
            }
          if (!driv) {
            out.kind[idx] = PrimKind::terrain;
            out.prim[idx] = -1;
          }
          const double fade = 1.0 / (1.0 + 0.01 * dist);
          if (driv) {
            out.px(0, y, x) = clamp01((0.30 + noise) * fade);
            out.px(1, y, x) = clamp01((0.30 + noise) * fade);
            out.px(2, y, x) = clamp01((0.33 + noise) * fade);
          } else {
            out.px(0, y, x) = clamp01((0.16 + noise) * fade);
            out.px(1, y, x) = clamp01((0.22 + noise) * fade);
            out.px(2, y, x) = clamp01((0.13 + noise) * fade);
          }
        }
      }
      if (!ground) {
        const double t = static_cast<double>(y) / H;
        out.px(0, y, x) = clamp01(0.09 + 0.05 * t + noise);
        out.px(1, y, x) = clamp01(0.11 + 0.06 * t + noise);
        out.px(2, y, x) = clamp01(0.15 + 0.07 * t + noise);
      }
    }

  // Box faces, painter's algorithm far-to-near across all faces of all boxes.
  struct Face {
    int box;
    std::array<Vec3, 4> corners;  // ego frame
    double shade;
    double mean_depth;
  };
  std::vector<Face> faces;
  for (size_t bi = 0; bi < scene.boxes.size(); ++bi) {
    const Box3D& box = scene.boxes[bi];
    const auto c8 = box.corners();  // 0..3 bottom, 4..7 top
    const int quad[6][4] = {{0, 1, 5, 4}, {1, 2, 6, 5}, {2, 3, 7, 6},
                            {3, 0, 4, 7}, {4, 5, 6, 7}, {0, 3, 2, 1}};
    const double shade[6] = {1.0, 0.85, 0.7, 0.9, 1.15, 0.5};
    for (int f = 0; f < 6; ++f) {
      Face face;
      face.box = static_cast<int>(bi);
      face.shade = shade[f];
      double md = 0.0;
      bool ok = true;
      for (int k = 0; k < 4; ++k) {
        face.corners[k] = c8[static_cast<size_t>(quad[f][k])];
        const Vec3 pc = cam.extr.rotation * face.corners[k] + cam.extr.translation;
        if (pc.z <= kZNear) ok = false;
        md += pc.z;
      }
      if (!ok) continue;  // clipping at the near plane is not modeled
      face.mean_depth = md / 4.0;
      faces.push_back(face);
    }
  }
  std::sort(faces.begin(), faces.end(), [](const Face& a, const Face& b) {
    if (a.mean_depth != b.mean_depth) return a.mean_depth > b.mean_depth;  // far first
    return a.box < b.box;
  });

  for (const Face& face : faces) {
    const Box3D& box = scene.boxes[static_cast<size_t>(face.box)];
    const ClassSpec& spec = class_specs()[static_cast<size_t>(box.class_id)];
    const double attr_shade = box.attribute_id == 0 ? 0.72 : 1.18;
    std::vector<Vec2> poly2d;
    double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
    for (const Vec3& c : face.corners) {
      const Vec3 pc = cam.extr.rotation * c + cam.extr.translation;
      const double u = cam.intr.cx + cam.intr.fx * pc.x / pc.z;
      const double v = cam.intr.cy + cam.intr.fy * pc.y / pc.z;
      poly2d.push_back({u, v});
      umin = std::min(umin, u); umax = std::max(umax, u);
      vmin = std::min(vmin, v); vmax = std::max(vmax, v);
    }
    // Face plane in camera frame for exact per-pixel depth.
    const Vec3 p0 = cam.extr.rotation * face.corners[0] + cam.extr.translation;
    const Vec3 p1 = cam.extr.rotation * face.corners[1] + cam.extr.translation;
    const Vec3 p3 = cam.extr.rotation * face.corners[3] + cam.extr.translation;
    const Vec3 e1 = p1 - p0, e2 = p3 - p0;
    const Vec3 n{e1.y * e2.z - e1.z * e2.y, e1.z * e2.x - e1.x * e2.z,
                 e1.x * e2.y - e1.y * e2.x};
    const double ndotp = n.dot(p0);
    const int x0 = std::max(0, static_cast<int>(std::floor(umin)));
    const int x1 = std::min(W - 1, static_cast<int>(std::ceil(umax)));
    const int y0 = std::max(0, static_cast<int>(std::floor(vmin)));
    const int y1 = std::min(H - 1, static_cast<int>(std::ceil(vmax)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        if (!point_in_convex(poly2d, x + 0.5, y + 0.5)) continue;
        const Vec3 ray{(x + 0.5 - cam.intr.cx) / cam.intr.fx,
                       (y + 0.5 - cam.intr.cy) / cam.intr.fy, 1.0};
        const double denom = n.dot(ray);
        if (std::fabs(denom) < 1e-12) continue;
        const double z = ndotp / denom;  // camera depth along this pixel ray
        if (z <= kZNear) continue;
        const size_t idx = static_cast<size_t>(y) * W + x;
        const double noise = 0.02 * hash_noise(nseed, y, x, 1 + face.box);
        const double k = face.shade * attr_shade;
        out.px(0, y, x) = clamp01(spec.r * k + noise);
        out.px(1, y, x) = clamp01(spec.g * k + noise);
        out.px(2, y, x) = clamp01(spec.b * k + noise);
        out.depth[idx] = z;
        out.kind[idx] = PrimKind::box;
        out.prim[idx] = face.box;
      }
  }
  return out;
}

inline std::vector<ViewRender> render_views_full(const Scene& scene) {
  std::vector<ViewRender> out;
  out.reserve(scene.rig.cameras.size());
  for (size_t i = 0; i < scene.rig.cameras.size(); ++i)
    out.push_back(render_view(scene, static_cast<int>(i)));
  return out;
}

/// Images only, concatenated as N*3*H*W floats.
inline std::vector<float> render_views(const Scene& scene) {
  std::vector<float> out;
  for (size_t i = 0; i < scene.rig.cameras.size(); ++i) {
    ViewRender vr = render_view(scene, static_cast<int>(i));
    out.insert(out.end(), vr.rgb.begin(), vr.rgb.end());
  }
  return out;
}

}  // namespace sdbev
