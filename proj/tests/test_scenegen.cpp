#include <catch2/catch.hpp>

#include <filesystem>
#include <fstream>

#include "sdbev/dataset.hpp"
#include "sdbev/render.hpp"
#include "sdbev/scene.hpp"

using namespace sdbev;
namespace fs = std::filesystem;

namespace {

/// Sutherland-Hodgman convex clip + shoelace area; independent of the SAT
/// overlap test used by the generator.
double polygon_area(const std::vector<Vec2>& poly) {
  double a = 0.0;
  for (size_t i = 0; i < poly.size(); ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % poly.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return std::fabs(a) / 2.0;
}

std::vector<Vec2> clip_convex(std::vector<Vec2> subject, const std::vector<Vec2>& clip) {
  // Requires the clip polygon in CCW order.
  for (size_t i = 0; i < clip.size() && !subject.empty(); ++i) {
    const Vec2 a = clip[i];
    const Vec2 b = clip[(i + 1) % clip.size()];
    auto inside = [&](const Vec2& p) {
      return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x) >= 0.0;
    };
    auto intersect = [&](const Vec2& p, const Vec2& q) -> Vec2 {
      const double a1 = b.y - a.y, b1 = a.x - b.x, c1 = a1 * a.x + b1 * a.y;
      const double a2 = q.y - p.y, b2 = p.x - q.x, c2 = a2 * p.x + b2 * p.y;
      const double det = a1 * b2 - a2 * b1;
      return {(b2 * c1 - b1 * c2) / det, (a1 * c2 - a2 * c1) / det};
    };
    std::vector<Vec2> out;
    for (size_t j = 0; j < subject.size(); ++j) {
      const Vec2 cur = subject[j];
      const Vec2 prev = subject[(j + subject.size() - 1) % subject.size()];
      if (inside(cur)) {
        if (!inside(prev)) out.push_back(intersect(prev, cur));
        out.push_back(cur);
      } else if (inside(prev)) {
        out.push_back(intersect(prev, cur));
      }
    }
    subject = std::move(out);
  }
  return subject;
}

std::vector<Vec2> ccw(const std::array<Vec2, 4>& quad) {
  std::vector<Vec2> out(quad.begin(), quad.end());
  double a = 0.0;
  for (size_t i = 0; i < out.size(); ++i) {
    const Vec2& p = out[i];
    const Vec2& q = out[(i + 1) % out.size()];
    a += p.x * q.y - q.x * p.y;
  }
  if (a < 0.0) std::reverse(out.begin(), out.end());
  return out;
}

double bev_iou_oracle(const Box3D& a, const Box3D& b) {
  const auto pa = ccw(a.bev_corners());
  const auto pb = ccw(b.bev_corners());
  const double inter = polygon_area(clip_convex(pa, pb));
  const double uni = polygon_area(pa) + polygon_area(pb) - inter;
  return inter / uni;
}

SceneConfig small_config() {
  SceneConfig cfg;
  cfg.n_points = 300;
  return cfg;
}

}  // namespace

TEST_CASE("scene generation determinism and structure", "[scenegen]") {
  SECTION("zero boxes leaves only ground points and polygons") {
    SceneConfig cfg = small_config();
    cfg.min_boxes = cfg.max_boxes = 0;
    const Scene s = generate_scene(cfg, 3);
    REQUIRE(s.boxes.empty());
    REQUIRE_FALSE(s.drivable.empty());
    REQUIRE(static_cast<int>(s.points.size()) == cfg.n_points);
    for (const auto& p : s.points) REQUIRE(p.z == 0.0);
  }
  SECTION("same seed gives identical scenes") {
    const SceneConfig cfg = small_config();
    const Scene a = generate_scene(cfg, 17);
    const Scene b = generate_scene(cfg, 17);
    REQUIRE(a.boxes.size() == b.boxes.size());
    for (size_t i = 0; i < a.boxes.size(); ++i) {
      REQUIRE(a.boxes[i].center.x == b.boxes[i].center.x);
      REQUIRE(a.boxes[i].yaw == b.boxes[i].yaw);
      REQUIRE(a.boxes[i].vx == b.boxes[i].vx);
    }
    REQUIRE(a.points.size() == b.points.size());
    for (size_t i = 0; i < a.points.size(); ++i) REQUIRE(a.points[i].x == b.points[i].x);
  }
  SECTION("boxes are pairwise disjoint in BEV (polygon-intersection oracle)") {
    SceneConfig cfg = small_config();
    cfg.min_boxes = cfg.max_boxes = 5;
    const Scene s = generate_scene(cfg, 9);
    REQUIRE(s.boxes.size() == 5);
    for (size_t i = 0; i < s.boxes.size(); ++i)
      for (size_t j = i + 1; j < s.boxes.size(); ++j)
        REQUIRE(bev_iou_oracle(s.boxes[i], s.boxes[j]) == 0.0);
  }
  SECTION("over-dense config fails with a generation error") {
    SceneConfig cfg = small_config();
    cfg.min_boxes = cfg.max_boxes = 400;
    cfg.max_place_attempts = 2;
    REQUIRE_THROWS_AS(generate_scene(cfg, 1), GenerationError);
  }
}

TEST_CASE("rendering paints boxes only where they project", "[scenegen]") {
  SceneConfig cfg = small_config();
  Scene scene;
  scene.seed = 5;
  scene.rig = make_ring_rig(cfg.n_cameras, cfg.image_width, cfg.image_height, cfg.hfov_deg,
                            cfg.cam_height, cfg.cam_pitch_deg);

  SECTION("empty scene renders background only") {
    const auto views = render_views_full(scene);
    REQUIRE(views.size() == 6);
    for (const auto& v : views)
      for (const auto k : v.kind) REQUIRE((k == PrimKind::background || k == PrimKind::terrain));
  }

  SECTION("a box ahead appears only in the forward view, inside its projected hull") {
    Box3D box;
    box.center = {8.0, 0.0, 0.8};
    box.w = 1.9; box.l = 4.4; box.h = 1.6;
    box.class_id = 0;
    scene.boxes.push_back(box);
    const auto views = render_views_full(scene);
    int painted = 0;
    for (size_t vi = 0; vi < views.size(); ++vi) {
      bool any = false;
      for (const auto k : views[vi].kind) any = any || k == PrimKind::box;
      if (any) {
        ++painted;
        REQUIRE(vi == 0);
      }
    }
    REQUIRE(painted == 1);
    // Projection oracle: every box pixel lies within the projected corner
    // bounds padded by the 1 px rasterization tolerance.
    const Camera& cam = scene.rig.cameras[0];
    double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
    for (const auto& c : box.corners()) {
      const auto pp = project_point(c, cam);
      REQUIRE(pp.depth > 0);
      umin = std::min(umin, pp.u); umax = std::max(umax, pp.u);
      vmin = std::min(vmin, pp.v); vmax = std::max(vmax, pp.v);
    }
    int box_px = 0;
    for (int y = 0; y < views[0].height; ++y)
      for (int x = 0; x < views[0].width; ++x)
        if (views[0].kind[static_cast<size_t>(y) * views[0].width + x] == PrimKind::box) {
          ++box_px;
          REQUIRE(x + 0.5 >= umin - 1.0);
          REQUIRE(x + 0.5 <= umax + 1.0);
          REQUIRE(y + 0.5 >= vmin - 1.0);
          REQUIRE(y + 0.5 <= vmax + 1.0);
        }
    REQUIRE(box_px > 0);
  }

  SECTION("painter's order: the nearer box wins shared pixels") {
    Box3D near_box, far_box;
    near_box.center = {6.0, 0.0, 0.8};
    near_box.w = 1.9; near_box.l = 4.4; near_box.h = 1.6;
    near_box.class_id = 0;
    far_box = near_box;
    far_box.center = {14.0, 0.0, 0.8};
    far_box.class_id = 1;
    scene.boxes = {far_box, near_box};  // list order must not matter

    Scene only_far = scene;
    only_far.boxes = {far_box};
    Scene only_near = scene;
    only_near.boxes = {near_box};
    const ViewRender both = render_view(scene, 0);
    const ViewRender far_v = render_view(only_far, 0);
    const ViewRender near_v = render_view(only_near, 0);
    int shared = 0;
    for (size_t i = 0; i < both.kind.size(); ++i)
      if (far_v.kind[i] == PrimKind::box && near_v.kind[i] == PrimKind::box) {
        ++shared;
        REQUIRE(both.kind[i] == PrimKind::box);
        REQUIRE(both.prim[i] == 1);  // index of the near box in scene.boxes
      }
    REQUIRE(shared > 0);
  }
}

TEST_CASE("every painted pixel back-projects into a scene primitive", "[scenegen]") {
  SceneConfig cfg = small_config();
  cfg.min_boxes = cfg.max_boxes = 4;
  const Scene scene = generate_scene(cfg, 21);
  const auto views = render_views_full(scene);
  for (size_t vi = 0; vi < views.size(); ++vi) {
    const Camera& cam = scene.rig.cameras[vi];
    const ViewRender& vr = views[vi];
    for (int y = 0; y < vr.height; y += 3)
      for (int x = 0; x < vr.width; x += 3) {
        const size_t idx = static_cast<size_t>(y) * vr.width + x;
        if (vr.kind[idx] == PrimKind::background) continue;
        const double z = vr.depth[idx];
        const Vec3 ray{(x + 0.5 - cam.intr.cx) / cam.intr.fx,
                       (y + 0.5 - cam.intr.cy) / cam.intr.fy, 1.0};
        const Vec3 p_cam = ray * z;
        const Vec3 p = cam.extr.rotation.transposed() * (p_cam - cam.extr.translation);
        const double tol = z * 1.5 / cam.intr.fx + 0.05;  // ~1 px at this depth
        if (vr.kind[idx] == PrimKind::box) {
          const Box3D& b = scene.boxes[static_cast<size_t>(vr.prim[idx])];
          const double c = std::cos(b.yaw), s = std::sin(b.yaw);
          const double dx = p.x - b.center.x, dy = p.y - b.center.y;
          const double lx = c * dx + s * dy, ly = -s * dx + c * dy;
          REQUIRE(std::fabs(lx) <= b.l / 2 + tol);
          REQUIRE(std::fabs(ly) <= b.w / 2 + tol);
          REQUIRE(std::fabs(p.z - b.center.z) <= b.h / 2 + tol);
        } else {
          REQUIRE(std::fabs(p.z) <= 1e-9 + tol * 0.2);
        }
      }
  }
}

TEST_CASE("dataset round trip is bit exact", "[scenegen]") {
  const fs::path dir = fs::temp_directory_path() / "sdbev_ds_test";
  fs::remove_all(dir);
  SceneConfig scfg = small_config();
  LabelConfig lcfg;
  lcfg.task = Task::joint;
  std::vector<DatasetRecord> recs;
  for (int i = 0; i < 3; ++i) {
    DatasetRecord r;
    r.scene = generate_scene(scfg, 100 + static_cast<std::uint64_t>(i));
    r.sample = build_sample(r.scene, lcfg, scfg.range);
    recs.push_back(std::move(r));
  }
  write_dataset(recs, dir, lcfg, {{"purpose", "test"}});
  const auto back = read_dataset(dir);
  REQUIRE(back.size() == recs.size());
  for (size_t i = 0; i < recs.size(); ++i) {
    REQUIRE(back[i].sample.images == recs[i].sample.images);
    REQUIRE(back[i].sample.semantic == recs[i].sample.semantic);
    REQUIRE(back[i].sample.depth.onehot == recs[i].sample.depth.onehot);
    REQUIRE(back[i].sample.depth.mask == recs[i].sample.depth.mask);
    REQUIRE(back[i].sample.bev == recs[i].sample.bev);
    REQUIRE(back[i].scene.seed == recs[i].scene.seed);
    REQUIRE(back[i].scene.boxes.size() == recs[i].scene.boxes.size());
    for (size_t bi = 0; bi < recs[i].scene.boxes.size(); ++bi) {
      REQUIRE(back[i].scene.boxes[bi].center.x == recs[i].scene.boxes[bi].center.x);
      REQUIRE(back[i].scene.boxes[bi].yaw == recs[i].scene.boxes[bi].yaw);
      REQUIRE(back[i].scene.boxes[bi].vx == recs[i].scene.boxes[bi].vx);
      REQUIRE(back[i].scene.boxes[bi].class_id == recs[i].scene.boxes[bi].class_id);
    }
    for (size_t pi = 0; pi < recs[i].scene.points.size(); ++pi) {
      REQUIRE(back[i].scene.points[pi].x == recs[i].scene.points[pi].x);
      REQUIRE(back[i].scene.points[pi].z == recs[i].scene.points[pi].z);
    }
    for (size_t ci = 0; ci < recs[i].scene.rig.cameras.size(); ++ci)
      for (int k = 0; k < 9; ++k)
        REQUIRE(back[i].scene.rig.cameras[ci].extr.rotation.m[k] ==
                recs[i].scene.rig.cameras[ci].extr.rotation.m[k]);
  }
  fs::remove_all(dir);
}

TEST_CASE("a 50-scene dataset at 64x176 stays under 200 MB", "[scenegen]") {
  const fs::path dir = fs::temp_directory_path() / "sdbev_ds_size";
  fs::remove_all(dir);
  SceneConfig scfg;  // desk defaults: 6 cameras, 64x176
  LabelConfig lcfg;
  lcfg.task = Task::joint;
  std::vector<DatasetRecord> recs;
  for (int i = 0; i < 50; ++i) {
    DatasetRecord r;
    r.scene = generate_scene(scfg, 2000 + static_cast<std::uint64_t>(i));
    r.sample = build_sample(r.scene, lcfg, scfg.range);
    recs.push_back(std::move(r));
  }
  write_dataset(recs, dir, lcfg, {});
  std::uintmax_t total = 0;
  for (const auto& e : fs::directory_iterator(dir)) total += fs::file_size(e.path());
  REQUIRE(total < 200ull * 1024 * 1024);
  fs::remove_all(dir);
}

TEST_CASE("truncated record raises a corrupt-file error naming the record", "[scenegen]") {
  const fs::path dir = fs::temp_directory_path() / "sdbev_ds_trunc";
  fs::remove_all(dir);
  SceneConfig scfg = small_config();
  LabelConfig lcfg;
  std::vector<DatasetRecord> recs;
  for (int i = 0; i < 2; ++i) {
    DatasetRecord r;
    r.scene = generate_scene(scfg, 7 + static_cast<std::uint64_t>(i));
    r.sample = build_sample(r.scene, lcfg, scfg.range);
    recs.push_back(std::move(r));
  }
  write_dataset(recs, dir, lcfg, {});
  const fs::path victim = dir / "rec_00001.bin";
  const auto size = fs::file_size(victim);
  fs::resize_file(victim, size / 2);
  try {
    read_dataset(dir);
    FAIL("expected DatasetError");
  } catch (const DatasetError& e) {
    REQUIRE(e.record_index == 1);
    REQUIRE(std::string(e.what()).find("record 1") != std::string::npos);
  }
  fs::remove_all(dir);
}
