#include <catch2/catch.hpp>

#include "sdbev/labels.hpp"
#include "sdbev/scene.hpp"

using namespace sdbev;

namespace {

Scene base_scene(std::uint64_t seed = 31) {
  SceneConfig cfg;
  cfg.n_points = 400;
  cfg.min_boxes = cfg.max_boxes = 3;
  return generate_scene(cfg, seed);
}

LabelConfig bev_label_config() {
  LabelConfig lc;
  lc.task = Task::bev_segmentation;
  return lc;
}

/// Brute-force BEV oracle: full per-cell scan over every primitive with an
/// independent corner-cross-product inclusion test.
std::vector<std::uint8_t> bev_gt_oracle(const Scene& scene, const LabelConfig& cfg) {
  const int Cb = cfg.bev_channels();
  std::vector<std::uint8_t> out(static_cast<size_t>(Cb) * cfg.bev_h * cfg.bev_w, 0);
  const double half_h = cfg.bev_h * cfg.bev_cell / 2.0;
  const double half_w = cfg.bev_w * cfg.bev_cell / 2.0;
  for (int iy = 0; iy < cfg.bev_h; ++iy)
    for (int ix = 0; ix < cfg.bev_w; ++ix) {
      const double x = (ix + 0.5) * cfg.bev_cell - half_w;
      const double y = (iy + 0.5) * cfg.bev_cell - half_h;
      for (const auto& poly : scene.drivable)
        if (point_in_polygon(x, y, poly))
          out[(0 * static_cast<size_t>(cfg.bev_h) + iy) * cfg.bev_w + ix] = 1;
      for (const auto& box : scene.boxes) {
        // Inside iff on the same side of all four edges.
        const auto c4 = box.bev_corners();
        bool pos = false, neg = false;
        for (int k = 0; k < 4; ++k) {
          const Vec2& a = c4[static_cast<size_t>(k)];
          const Vec2& b = c4[static_cast<size_t>((k + 1) % 4)];
          const double cr = (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
          pos = pos || cr > 0;
          neg = neg || cr < 0;
        }
        if (!(pos && neg))
          out[((1 + static_cast<size_t>(box.class_id)) * cfg.bev_h + iy) * cfg.bev_w + ix] = 1;
      }
    }
  return out;
}

}  // namespace

TEST_CASE("semantic labels: channel layout per task", "[labels]") {
  LabelConfig det;
  det.task = Task::detection;
  REQUIRE(det.semantic_channels() == 3);
  REQUIRE_FALSE(det.has_drivable_channel());
  LabelConfig bev = bev_label_config();
  REQUIRE(bev.semantic_channels() == 4);
  REQUIRE(bev.has_drivable_channel());
}

TEST_CASE("semantic labels: drivable channel from ground back-projection", "[labels]") {
  const SceneConfig scfg;
  Scene scene;
  scene.rig = make_ring_rig(6, 176, 64, 70.0, 1.6, 10.0);
  scene.seed = 1;
  const LabelConfig lc = bev_label_config();

  SECTION("no polygons leaves the drivable channel empty") {
    const auto labels = make_semantic_labels(scene, lc, scfg.range);
    const int per_view = lc.semantic_channels() * 4 * 11;
    for (int n = 0; n < 6; ++n)
      for (int p = 0; p < 4 * 11; ++p) REQUIRE(labels[n * per_view + p] == 0);
  }

  SECTION("full-ground polygon marks every in-range ground pixel (per-pixel oracle)") {
    Polygon2D big;
    big.pts = {{-100, -100}, {100, -100}, {100, 100}, {-100, 100}};
    scene.drivable.push_back(big);
    const auto labels = make_semantic_labels(scene, lc, scfg.range);
    for (int n = 0; n < 6; ++n) {
      const Camera lcam = label_camera(scene.rig.cameras[static_cast<size_t>(n)], lc.stride);
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 11; ++x) {
          const auto hit = backproject_ground(x + 0.5, y + 0.5, lcam, 0.0);
          const bool expect =
              hit && std::fabs(hit->x) <= scfg.range && std::fabs(hit->y) <= scfg.range;
          const std::uint8_t got =
              labels[((static_cast<size_t>(n) * lc.semantic_channels() + 0) * 4 + y) * 11 + x];
          REQUIRE(got == (expect ? 1 : 0));
        }
    }
  }
}

TEST_CASE("semantic labels: object channel only where the box projects", "[labels]") {
  const SceneConfig scfg;
  Scene scene;
  scene.rig = make_ring_rig(6, 176, 64, 70.0, 1.6, 10.0);
  scene.seed = 2;
  Box3D box;
  box.center = {7.0, 0.0, 0.8};
  box.w = 1.9; box.l = 4.4; box.h = 1.6;
  box.class_id = 1;
  scene.boxes.push_back(box);
  LabelConfig lc;
  lc.task = Task::detection;
  const auto labels = make_semantic_labels(scene, lc, scfg.range);
  const int hw = 4 * 11;
  for (int n = 0; n < 6; ++n)
    for (int c = 0; c < 3; ++c) {
      int count = 0;
      for (int p = 0; p < hw; ++p)
        count += labels[(static_cast<size_t>(n) * 3 + c) * hw + p];
      if (n == 0 && c == 1) {
        REQUIRE(count > 0);
        // Projection oracle: labeled pixels sit inside the projected corner
        // bounding box of the label-resolution camera.
        const Camera lcam = label_camera(scene.rig.cameras[0], lc.stride);
        double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
        for (const auto& corner : box.corners()) {
          const auto pp = project_point(corner, lcam);
          umin = std::min(umin, pp.u); umax = std::max(umax, pp.u);
          vmin = std::min(vmin, pp.v); vmax = std::max(vmax, pp.v);
        }
        for (int y = 0; y < 4; ++y)
          for (int x = 0; x < 11; ++x)
            if (labels[(static_cast<size_t>(0) * 3 + 1) * hw + y * 11 + x]) {
              REQUIRE(x + 0.5 >= umin - 0.5);
              REQUIRE(x + 0.5 <= umax + 0.5);
              REQUIRE(y + 0.5 >= vmin - 0.5);
              REQUIRE(y + 0.5 <= vmax + 0.5);
            }
      } else {
        REQUIRE(count == 0);
      }
    }
}

TEST_CASE("semantic labels: object group stays one-hot per pixel", "[labels]") {
  const Scene scene = base_scene(77);
  const LabelConfig lc = bev_label_config();
  const auto labels = make_semantic_labels(scene, lc, 20.0);
  const int hw = 4 * 11;
  for (int n = 0; n < 6; ++n)
    for (int p = 0; p < hw; ++p) {
      int sum = 0;
      for (int c = 1; c < lc.semantic_channels(); ++c)
        sum += labels[(static_cast<size_t>(n) * lc.semantic_channels() + c) * hw + p];
      REQUIRE(sum <= 1);
    }
}

TEST_CASE("depth labels: binning arithmetic and masking", "[labels]") {
  const SceneConfig scfg;
  Scene scene;
  scene.rig = make_ring_rig(1, 176, 64, 70.0, 1.6, 10.0);
  scene.seed = 3;

  SECTION("no points leaves every pixel invalid") {
    LabelConfig lc;
    const DepthLabels d = make_depth_labels(scene, lc, scfg.range);
    for (auto m : d.mask) REQUIRE(m == 0);
    for (auto v : d.onehot) REQUIRE(v == 0);
  }

  SECTION("bin index floor((d - d_min)/delta), clamped") {
    LabelConfig lc;
    lc.depth_bins = 60;
    lc.depth_min = 1.0;
    lc.depth_max = 61.2;
    // A point straight along the principal ray of the pitched camera at
    // camera depth 3: build it from the ray directly.
    const Camera lcam = label_camera(scene.rig.cameras[0], lc.stride);
    const Camera& cam = scene.rig.cameras[0];
    const Vec3 dir = cam.extr.rotation.transposed() *
                     Vec3{(16 * 5.5 - cam.intr.cx) / cam.intr.fx,
                          (16 * 2.5 - cam.intr.cy) / cam.intr.fy, 1.0};
    const Vec3 origin = cam.extr.rotation.transposed() * (cam.extr.translation * -1.0);
    scene.points = {origin + dir * 3.0};
    const DepthLabels d = make_depth_labels(scene, lc, scfg.range);
    // delta = 60.2/60; floor((3-1)/delta) = floor(1.9933) = 1
    REQUIRE(d.mask[(static_cast<size_t>(2)) * 11 + 5] == 1);
    REQUIRE(d.onehot[((static_cast<size_t>(0) * 60 + 1) * 4 + 2) * 11 + 5] == 1);
    (void)lcam;

    // One-hot everywhere valid, all-zero where invalid.
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 11; ++x) {
        int sum = 0;
        for (int b = 0; b < 60; ++b)
          sum += d.onehot[((static_cast<size_t>(0) * 60 + b) * 4 + y) * 11 + x];
        REQUIRE(sum == (d.mask[static_cast<size_t>(y) * 11 + x] ? 1 : 0));
      }
  }

  SECTION("depth at or past d_max clamps into the last bin") {
    LabelConfig lc;
    lc.depth_bins = 8;
    lc.depth_min = 1.0;
    lc.depth_max = 10.0;
    const Camera& cam = scene.rig.cameras[0];
    const Vec3 dir = cam.extr.rotation.transposed() *
                     Vec3{(16 * 5.5 - cam.intr.cx) / cam.intr.fx,
                          (16 * 2.5 - cam.intr.cy) / cam.intr.fy, 1.0};
    const Vec3 origin = cam.extr.rotation.transposed() * (cam.extr.translation * -1.0);
    scene.points = {origin + dir * 25.0};
    const DepthLabels d = make_depth_labels(scene, lc, scfg.range);
    REQUIRE(d.onehot[((static_cast<size_t>(0) * 8 + 7) * 4 + 2) * 11 + 5] == 1);
  }
}

TEST_CASE("depth labels one-hot property on generated scenes", "[labels]") {
  const Scene scene = base_scene(41);
  LabelConfig lc = bev_label_config();
  const DepthLabels d = make_depth_labels(scene, lc, 20.0);
  const int hw = 4 * 11;
  for (int n = 0; n < 6; ++n)
    for (int p = 0; p < hw; ++p) {
      int sum = 0;
      for (int b = 0; b < lc.depth_bins; ++b)
        sum += d.onehot[(static_cast<size_t>(n) * lc.depth_bins + b) * hw + p];
      REQUIRE(sum == (d.mask[static_cast<size_t>(n) * hw + p] ? 1 : 0));
    }
}

TEST_CASE("BEV ground truth rasterization", "[labels]") {
  LabelConfig lc = bev_label_config();
  lc.bev_h = lc.bev_w = 40;
  lc.bev_cell = 0.5;  // covers [-10, 10]
  Scene scene;
  scene.rig = make_ring_rig(1, 176, 64, 70.0, 1.6, 10.0);

  SECTION("empty scene is all zeros") {
    const auto gt = make_bev_gt(scene, lc, 10.0);
    for (auto v : gt) REQUIRE(v == 0);
  }

  SECTION("axis-aligned 4x2 box at 0.5 m cells sets 8x4 cells") {
    Box3D box;
    box.center = {0, 0, 0.5};
    box.l = 4.0; box.w = 2.0; box.h = 1.0;
    box.class_id = 0;
    scene.boxes.push_back(box);
    const auto gt = make_bev_gt(scene, lc, 10.0);
    int count = 0;
    for (int iy = 0; iy < 40; ++iy)
      for (int ix = 0; ix < 40; ++ix)
        count += gt[(static_cast<size_t>(1) * 40 + iy) * 40 + ix];
    REQUIRE(count == 8 * 4);
  }

  SECTION("yaw pi/2 equals swapped width/length") {
    // Box edges kept away from cell centers so the fp noise in cos(pi/2)
    // cannot flip boundary cells.
    Box3D rot;
    rot.center = {2.3, -1.2, 0.5};
    rot.l = 4.0; rot.w = 2.0; rot.h = 1.0;
    rot.yaw = M_PI / 2.0;
    rot.class_id = 0;
    Box3D swapped = rot;
    swapped.yaw = 0.0;
    swapped.l = 2.0;
    swapped.w = 4.0;
    Scene a = scene, b = scene;
    a.boxes = {rot};
    b.boxes = {swapped};
    REQUIRE(make_bev_gt(a, lc, 10.0) == make_bev_gt(b, lc, 10.0));
  }
}

TEST_CASE("BEV ground truth equals the brute-force oracle on 50 scenes",
          "[labels][acceptance4]") {
  for (int i = 0; i < 50; ++i) {
    SceneConfig cfg;
    cfg.n_points = 50;
    cfg.min_boxes = 1;
    cfg.max_boxes = 6;
    const Scene scene = generate_scene(cfg, 500 + static_cast<std::uint64_t>(i));
    LabelConfig lc = bev_label_config();
    REQUIRE(make_bev_gt(scene, lc, cfg.range) == bev_gt_oracle(scene, lc));
  }
}

TEST_CASE("label spatial size matches the backbone stride", "[labels]") {
  const Scene scene = base_scene(51);
  const LabelConfig lc = bev_label_config();
  const auto labels = make_semantic_labels(scene, lc, 20.0);
  REQUIRE(labels.size() ==
          static_cast<size_t>(6) * lc.semantic_channels() * (64 / 16) * (176 / 16));
  const DepthLabels d = make_depth_labels(scene, lc, 20.0);
  REQUIRE(d.onehot.size() == static_cast<size_t>(6) * lc.depth_bins * 4 * 11);
  REQUIRE(d.mask.size() == static_cast<size_t>(6) * 4 * 11);
}

TEST_CASE("label config invariants", "[labels]") {
  LabelConfig lc;
  lc.depth_bins = 1;
  REQUIRE_THROWS_AS(lc.validate(20.0), std::invalid_argument);
  lc = LabelConfig{};
  lc.depth_min = -1;
  REQUIRE_THROWS_AS(lc.validate(20.0), std::invalid_argument);
  lc = LabelConfig{};
  lc.bev_h = 10;  // 10 cells * 1 m < 2 * 20 m
  REQUIRE_THROWS_AS(lc.validate(20.0), std::invalid_argument);
}
