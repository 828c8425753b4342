// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "sdbev/rng.hpp"

namespace sdbev {

// Conventions, fixed project-wide:
//   ego frame:    x forward, y left, z up (meters)
//   camera frame: x right, y down, z forward (meters)
//   extrinsics:   ego-to-camera, i.e. p_cam = R * p_ego + t

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    const double n = norm();
    return {x / n, y / n, z / n};
  }
};

struct Mat3 {
  // row-major
  double m[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }

  double operator()(int r, int c) const { return m[r * 3 + c]; }
  double& operator()(int r, int c) { return m[r * 3 + c]; }

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) acc += (*this)(i, k) * o(k, j);
        r(i, j) = acc;
      }
    return r;
  }

  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }

  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }

  /// Rodrigues rotation about a unit axis.
  static Mat3 axis_angle(const Vec3& axis, double angle) {
    const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
    const double x = axis.x, y = axis.y, z = axis.z;
    Mat3 r;
    r(0, 0) = t * x * x + c;
    r(0, 1) = t * x * y - s * z;
    r(0, 2) = t * x * z + s * y;
    r(1, 0) = t * x * y + s * z;
    r(1, 1) = t * y * y + c;
    r(1, 2) = t * y * z - s * x;
    r(2, 0) = t * x * z - s * y;
    r(2, 1) = t * y * z + s * x;
    r(2, 2) = t * z * z + c;
    return r;
  }
};

/// Max |R^T R - I| entry; used by the orthonormality invariant.
inline double orthonormality_error(const Mat3& r) {
  const Mat3 g = r.transposed() * r;
  double err = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) err = std::max(err, std::fabs(g(i, j) - (i == j ? 1.0 : 0.0)));
  return err;
}

struct Intrinsics {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
  int width = 0, height = 0;

  void validate() const {
    if (fx <= 0.0 || fy <= 0.0) throw std::invalid_argument("intrinsics: focal lengths must be > 0");
    if (cx < 0.0 || cx >= width || cy < 0.0 || cy >= height)
      throw std::invalid_argument("intrinsics: principal point outside image");
  }
};

struct Extrinsics {
  Mat3 rotation;     // ego-to-camera
  Vec3 translation;  // ego-to-camera, meters

  void validate(double tol = 1e-9) const {
    if (orthonormality_error(rotation) > tol)
      throw std::invalid_argument("extrinsics: rotation not orthonormal");
    if (std::fabs(rotation.det() - 1.0) > tol)
      throw std::invalid_argument("extrinsics: rotation determinant != +1");
  }
};

struct Camera {
  Intrinsics intr;
  Extrinsics extr;
};

struct CameraRig {
  std::vector<Camera> cameras;

  void validate() const {
    if (cameras.empty()) throw std::invalid_argument("rig: needs at least one camera");
    for (const auto& c : cameras) {
      c.intr.validate();
      c.extr.validate();
    }
    for (const auto& c : cameras)
      if (c.intr.width != cameras[0].intr.width || c.intr.height != cameras[0].intr.height)
        throw std::invalid_argument("rig: image sizes differ across views");
  }
};

inline constexpr double kZNear = 0.1;  // meters; projection validity cutoff

struct ProjectedPoint {
  double u = 0.0, v = 0.0, depth = 0.0;
  bool valid = false;
};

inline ProjectedPoint project_point(const Vec3& p_ego, const Camera& cam, double z_near = kZNear) {
  const Vec3 pc = cam.extr.rotation * p_ego + cam.extr.translation;
  ProjectedPoint out;
  out.depth = pc.z;
  if (pc.z <= z_near) return out;  // behind or too close, masked
  out.u = cam.intr.cx + cam.intr.fx * pc.x / pc.z;
  out.v = cam.intr.cy + cam.intr.fy * pc.y / pc.z;
  out.valid = out.u >= 0.0 && out.u < cam.intr.width && out.v >= 0.0 && out.v < cam.intr.height;
  return out;
}

inline std::vector<ProjectedPoint> project_points(const std::vector<Vec3>& points,
                                                  const Camera& cam, double z_near = kZNear) {
  std::vector<ProjectedPoint> out(points.size());
  for (size_t i = 0; i < points.size(); ++i) out[i] = project_point(points[i], cam, z_near);
  return out;
}

/// Intersect the viewing ray through pixel (u, v) with the ego plane
/// z = ground_height. Returns nothing when the ray misses the plane in front
/// of the camera.
inline std::optional<Vec3> backproject_ground(double u, double v, const Camera& cam,
                                              double ground_height, double z_near = kZNear) {
  const Vec3 dir_cam{(u - cam.intr.cx) / cam.intr.fx, (v - cam.intr.cy) / cam.intr.fy, 1.0};
  const Mat3 rt = cam.extr.rotation.transposed();
  const Vec3 origin = rt * (cam.extr.translation * -1.0);  // camera center in ego frame
  const Vec3 dir = rt * dir_cam;
  if (std::fabs(dir.z) < 1e-12) return std::nullopt;  // parallel to the plane
  const double s = (ground_height - origin.z) / dir.z;
  // s equals camera-frame depth because dir_cam.z == 1.
  if (s <= z_near) return std::nullopt;
  return origin + dir * s;
}

struct DepthImage {
  int height = 0, width = 0;
  std::vector<double> depth;   // meters; meaningful only where valid
  std::vector<std::uint8_t> valid;

  double at(int y, int x) const { return depth[static_cast<size_t>(y) * width + x]; }
  bool is_valid(int y, int x) const { return valid[static_cast<size_t>(y) * width + x] != 0; }
};

/// Min-depth z-buffer of a point cloud, nearest-pixel (floor) rasterization.
inline DepthImage render_depth(const std::vector<Vec3>& points, const Camera& cam,
                               double z_near = kZNear) {
  DepthImage img;
  img.height = cam.intr.height;
  img.width = cam.intr.width;
  img.depth.assign(static_cast<size_t>(img.height) * img.width,
                   std::numeric_limits<double>::infinity());
  img.valid.assign(img.depth.size(), 0);
  for (const auto& p : points) {
    const ProjectedPoint pp = project_point(p, cam, z_near);
    if (!pp.valid) continue;
    const int px = static_cast<int>(std::floor(pp.u));
    const int py = static_cast<int>(std::floor(pp.v));
    const size_t idx = static_cast<size_t>(py) * img.width + px;
    if (pp.depth < img.depth[idx]) img.depth[idx] = pp.depth;
    img.valid[idx] = 1;
  }
  return img;
}

/// Gaussian perturbation of every camera pose: rotation composed with a
/// random small rotation (axis uniform on the sphere, angle ~ N(0, sigma_rot)),
/// translation offset ~ N(0, sigma_trans * I). Deterministic given seed.
inline CameraRig perturb_extrinsics(const CameraRig& rig, double sigma_rot, double sigma_trans,
                                    std::uint64_t seed) {
  if (sigma_rot < 0.0 || sigma_trans < 0.0)
    throw std::invalid_argument("perturb_extrinsics: sigmas must be >= 0");
  Rng rng(seed);
  CameraRig out = rig;
  for (auto& cam : out.cameras) {
    Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
    if (axis.norm() < 1e-12) axis = {0.0, 0.0, 1.0};
    axis = axis.normalized();
    const double angle = rng.normal(0.0, sigma_rot);
    const Vec3 dt{rng.normal(0.0, sigma_trans), rng.normal(0.0, sigma_trans),
                  rng.normal(0.0, sigma_trans)};
    if (sigma_rot > 0.0) cam.extr.rotation = Mat3::axis_angle(axis, angle) * cam.extr.rotation;
    if (sigma_trans > 0.0)
      cam.extr.translation = cam.extr.translation + dt;
  }
  return out;
}

/// Ring of n cameras at the given height, pitched down, yaws spread over 360°.
inline CameraRig make_ring_rig(int n_cameras, int width, int height, double hfov_deg,
                               double cam_height, double pitch_down_deg,
                               double ring_radius = 0.5) {
  CameraRig rig;
  const double hfov = hfov_deg * M_PI / 180.0;
  const double fx = (width / 2.0) / std::tan(hfov / 2.0);
  for (int i = 0; i < n_cameras; ++i) {
    Camera cam;
    cam.intr = {fx, fx, width / 2.0, height / 2.0, width, height};
    const double yaw = 2.0 * M_PI * i / n_cameras;  // viewing direction in ego frame
    const double pitch = pitch_down_deg * M_PI / 180.0;
    // Camera basis in ego coordinates: z = viewing dir, x = image right, y = image down.
    const Vec3 fwd{std::cos(yaw) * std::cos(pitch), std::sin(yaw) * std::cos(pitch),
                   -std::sin(pitch)};
    const Vec3 right{std::sin(yaw), -std::cos(yaw), 0.0};
    const Vec3 down{fwd.y * right.z - fwd.z * right.y, fwd.z * right.x - fwd.x * right.z,
                    fwd.x * right.y - fwd.y * right.x};
    Mat3 r;  // rows are the camera axes, so r maps ego to camera
    r(0, 0) = right.x; r(0, 1) = right.y; r(0, 2) = right.z;
    r(1, 0) = down.x;  r(1, 1) = down.y;  r(1, 2) = down.z;
    r(2, 0) = fwd.x;   r(2, 1) = fwd.y;   r(2, 2) = fwd.z;
    cam.extr.rotation = r;
    const Vec3 center{std::cos(yaw) * ring_radius, std::sin(yaw) * ring_radius, cam_height};
    cam.extr.translation = (r * center) * -1.0;
    rig.cameras.push_back(cam);
  }
  rig.validate();
  return rig;
}

}  // namespace sdbev
