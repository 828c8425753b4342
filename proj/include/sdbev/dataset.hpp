// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdbev/labels.hpp"
#include "sdbev/render.hpp"
#include "sdbev/scene.hpp"
#include "sdbev/serialize.hpp"

namespace sdbev {

/// One rendered scene with its supervision targets. Detection ground truth is
/// the scene's box list; everything else is precomputed at generation time.
struct TrainingSample {
  std::vector<float> images;            // N*3*H_I*W_I
  std::vector<std::uint8_t> semantic;   // N*C_s*h*w
  DepthLabels depth;                    // N*C_d*h*w one-hot + N*h*w mask
  std::vector<std::uint8_t> bev;        // C_b*H_b*W_b
};

struct DatasetRecord {
  Scene scene;
  TrainingSample sample;
};

struct DatasetError : std::runtime_error {
  int record_index;
  DatasetError(const std::string& msg, int idx) : std::runtime_error(msg), record_index(idx) {}
};

inline TrainingSample build_sample(const Scene& scene, const LabelConfig& labels, double range) {
  TrainingSample s;
  s.images = render_views(scene);
  s.semantic = make_semantic_labels(scene, labels, range);
  s.depth = make_depth_labels(scene, labels, range);
  s.bev = make_bev_gt(scene, labels, range);
  return s;
}

namespace dataset_detail {

inline std::filesystem::path record_path(const std::filesystem::path& dir, int idx) {
  char name[32];
  std::snprintf(name, sizeof(name), "rec_%05d.bin", idx);
  return dir / name;
}

inline std::vector<double> boxes_to_f64(const std::vector<Box3D>& boxes) {
  std::vector<double> out;
  out.reserve(boxes.size() * 11);
  for (const auto& b : boxes) {
    const double vals[11] = {b.center.x, b.center.y, b.center.z, b.w, b.l, b.h,
                             b.yaw,      b.vx,       b.vy,       double(b.class_id),
                             double(b.attribute_id)};
    out.insert(out.end(), vals, vals + 11);
  }
  return out;
}

inline std::vector<Box3D> boxes_from_f64(const std::vector<double>& data) {
  if (data.size() % 11 != 0) throw RecordError("boxes field has bad length");
  std::vector<Box3D> out(data.size() / 11);
  for (size_t i = 0; i < out.size(); ++i) {
    const double* p = data.data() + i * 11;
    Box3D& b = out[i];
    b.center = {p[0], p[1], p[2]};
    b.w = p[3]; b.l = p[4]; b.h = p[5];
    b.yaw = p[6]; b.vx = p[7]; b.vy = p[8];
    b.class_id = static_cast<int>(p[9]);
    b.attribute_id = static_cast<int>(p[10]);
  }
  return out;
}

}  // namespace dataset_detail

/// Writes one dataset record. Scene geometry is stored at full precision so
/// evaluation-time re-rendering reproduces training images bit-exactly.
inline void write_record(const std::filesystem::path& path, const DatasetRecord& rec,
                         const LabelConfig& labels, int n_views) {
  RecordWriter w;
  const Scene& sc = rec.scene;
  const TrainingSample& s = rec.sample;
  const int H = sc.rig.cameras[0].intr.height, W = sc.rig.cameras[0].intr.width;
  const int h = H / labels.stride, wl = W / labels.stride;
  w.add_f32("images", {n_views, 3, H, W}, s.images);
  w.add_u8("semantic", {n_views, labels.semantic_channels(), h, wl}, s.semantic);
  w.add_u8("depth", {n_views, labels.depth_bins, h, wl}, s.depth.onehot);
  w.add_u8("depth_mask", {n_views, h, wl}, s.depth.mask);
  w.add_u8("bev", {labels.bev_channels(), labels.bev_h, labels.bev_w}, s.bev);
  w.add_f64("boxes", {static_cast<int>(sc.boxes.size()), 11},
            dataset_detail::boxes_to_f64(sc.boxes));

  std::vector<double> poly_xy;
  std::vector<std::int64_t> poly_off{0};
  for (const auto& poly : sc.drivable) {
    for (const auto& p : poly.pts) {
      poly_xy.push_back(p.x);
      poly_xy.push_back(p.y);
    }
    poly_off.push_back(static_cast<std::int64_t>(poly_xy.size() / 2));
  }
  w.add_f64("poly_xy", {static_cast<int>(poly_xy.size() / 2), 2}, poly_xy);
  w.add_i64("poly_offsets", {static_cast<int>(poly_off.size())}, poly_off);

  std::vector<double> pts;
  pts.reserve(sc.points.size() * 3);
  for (const auto& p : sc.points) {
    pts.push_back(p.x);
    pts.push_back(p.y);
    pts.push_back(p.z);
  }
  w.add_f64("points", {static_cast<int>(sc.points.size()), 3}, pts);

  std::vector<double> intr, rot, trans;
  for (const auto& cam : sc.rig.cameras) {
    intr.insert(intr.end(), {cam.intr.fx, cam.intr.fy, cam.intr.cx, cam.intr.cy,
                             double(cam.intr.width), double(cam.intr.height)});
    rot.insert(rot.end(), cam.extr.rotation.m, cam.extr.rotation.m + 9);
    trans.insert(trans.end(),
                 {cam.extr.translation.x, cam.extr.translation.y, cam.extr.translation.z});
  }
  w.add_f64("rig_intrinsics", {n_views, 6}, intr);
  w.add_f64("rig_rotation", {n_views, 9}, rot);
  w.add_f64("rig_translation", {n_views, 3}, trans);
  w.add_i64("seed", {1}, {static_cast<std::int64_t>(sc.seed)});
  w.write(path);
}

inline DatasetRecord read_record(const std::filesystem::path& path) {
  RecordReader r(path);
  DatasetRecord rec;
  TrainingSample& s = rec.sample;
  s.images = r.f32("images");
  s.semantic = r.u8("semantic");
  s.depth.onehot = r.u8("depth");
  s.depth.mask = r.u8("depth_mask");
  s.bev = r.u8("bev");
  rec.scene.boxes = dataset_detail::boxes_from_f64(r.f64("boxes"));

  const auto poly_xy = r.f64("poly_xy");
  const auto poly_off = r.i64("poly_offsets");
  for (size_t i = 0; i + 1 < poly_off.size(); ++i) {
    Polygon2D poly;
    for (std::int64_t j = poly_off[i]; j < poly_off[i + 1]; ++j)
      poly.pts.push_back({poly_xy[2 * j], poly_xy[2 * j + 1]});
    rec.scene.drivable.push_back(std::move(poly));
  }

  const auto pts = r.f64("points");
  for (size_t i = 0; i + 3 <= pts.size(); i += 3)
    rec.scene.points.push_back({pts[i], pts[i + 1], pts[i + 2]});

  const auto intr = r.f64("rig_intrinsics");
  const auto rot = r.f64("rig_rotation");
  const auto trans = r.f64("rig_translation");
  const int n_views = r.shape("rig_intrinsics")[0];
  for (int i = 0; i < n_views; ++i) {
    Camera cam;
    cam.intr = {intr[i * 6], intr[i * 6 + 1], intr[i * 6 + 2], intr[i * 6 + 3],
                static_cast<int>(intr[i * 6 + 4]), static_cast<int>(intr[i * 6 + 5])};
    std::copy(rot.begin() + i * 9, rot.begin() + (i + 1) * 9, cam.extr.rotation.m);
    cam.extr.translation = {trans[i * 3], trans[i * 3 + 1], trans[i * 3 + 2]};
    rec.scene.rig.cameras.push_back(cam);
  }
  rec.scene.seed = static_cast<std::uint64_t>(r.i64("seed")[0]);
  return rec;
}

/// Dataset directory: meta.json plus one binary record per sample.
inline void write_dataset(const std::vector<DatasetRecord>& records,
                          const std::filesystem::path& dir, const LabelConfig& labels,
                          nlohmann::json meta) {
  std::filesystem::create_directories(dir);
  meta["version"] = kRecordVersion;
  meta["count"] = records.size();
  std::ofstream mf(dir / "meta.json", std::ios::trunc);
  if (!mf) throw RecordError("cannot write meta.json in " + dir.string());
  mf << meta.dump(2) << "\n";
  for (size_t i = 0; i < records.size(); ++i) {
    const int n_views = static_cast<int>(records[i].scene.rig.cameras.size());
    write_record(dataset_detail::record_path(dir, static_cast<int>(i)), records[i], labels,
                 n_views);
  }
}

inline nlohmann::json read_dataset_meta(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "meta.json");
  if (!mf) throw RecordError("missing meta.json in " + dir.string());
  return nlohmann::json::parse(mf);
}

inline std::vector<DatasetRecord> read_dataset(const std::filesystem::path& dir) {
  const auto meta = read_dataset_meta(dir);
  const int count = meta.at("count").get<int>();
  std::vector<DatasetRecord> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    try {
      out.push_back(read_record(dataset_detail::record_path(dir, i)));
    } catch (const RecordError& e) {
      throw DatasetError("record " + std::to_string(i) + ": " + e.what(), i);
    }
  }
  return out;
}

/// Loads one record by index without touching the rest of the dataset.
inline DatasetRecord read_dataset_record(const std::filesystem::path& dir, int idx) {
  try {
    return read_record(dataset_detail::record_path(dir, idx));
  } catch (const RecordError& e) {
    throw DatasetError("record " + std::to_string(idx) + ": " + e.what(), idx);
  }
}

}  // namespace sdbev
