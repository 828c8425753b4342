// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdbev/dataset.hpp"
#include "sdbev/losses.hpp"
#include "sdbev/metrics.hpp"
#include "sdbev/model.hpp"
#include "sdbev/optim.hpp"

namespace sdbev {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainError : std::runtime_error {
  std::int64_t step;
  TrainError(const std::string& msg, std::int64_t s) : std::runtime_error(msg), step(s) {}
};

// ---- run configuration ----

struct RunConfig {
  std::string dataset;
  Task task = Task::detection;
  SceneConfig scene;
  LabelConfig labels;
  ModelConfig model;  // free architecture fields; derived fields filled by derived_model()
  LossWeights loss;
  OptimizerConfig optim;
  int train_scenes = 200;
  int val_scenes = 50;
  int epochs = 20;
  int batch_size = 4;
  std::uint64_t seed = 1;
  int threads = 2;
  int viz_samples = 0;
  bool seg_branch = true, depth_branch = true, pqb = true;

  /// Model config with every dataset-coupled field resolved.
  ModelConfig derived_model() const {
    ModelConfig m = model;
    m.task = task;
    m.n_classes = scene.n_classes;
    m.n_attributes = scene.n_attributes;
    LabelConfig lc = labels;
    lc.task = task;
    m.semantic_channels = lc.semantic_channels();
    m.depth_bins = labels.depth_bins;
    m.n_views = scene.n_cameras;
    m.feat_h = scene.image_height / labels.stride;
    m.feat_w = scene.image_width / labels.stride;
    m.range = scene.range;
    m.z_range = scene.z_range;
    m.seg_branch = seg_branch;
    m.depth_branch = depth_branch;
    m.pqb = pqb;
    return m;
  }

  LabelConfig derived_labels() const {
    LabelConfig lc = labels;
    lc.task = task;
    return lc;
  }

  void validate() const {
    scene.validate();
    derived_labels().validate(scene.range);
    const ModelConfig m = derived_model();
    m.validate();
    loss.validate();
    optim.validate();
    if (train_scenes < 1 || val_scenes < 1 || epochs < 1 || batch_size < 1 || threads < 1)
      throw ConfigError("run config: counts must be >= 1");
    if (m.has_bev_head() && m.bev_side() != labels.bev_h)
      throw ConfigError("run config: BEV head side " + std::to_string(m.bev_side()) +
                        " != label grid " + std::to_string(labels.bev_h));
    if (scene.image_height % labels.stride != 0 || scene.image_width % labels.stride != 0)
      throw ConfigError("run config: image size not divisible by label stride");
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["dataset"] = c.dataset;
  j["task"] = task_name(c.task);
  j["train_scenes"] = c.train_scenes;
  j["val_scenes"] = c.val_scenes;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["viz_samples"] = c.viz_samples;
  j["scene"] = {{"n_cameras", c.scene.n_cameras},
                {"image_height", c.scene.image_height},
                {"image_width", c.scene.image_width},
                {"cam_height", c.scene.cam_height},
                {"cam_pitch_deg", c.scene.cam_pitch_deg},
                {"hfov_deg", c.scene.hfov_deg},
                {"range", c.scene.range},
                {"z_range", c.scene.z_range},
                {"min_boxes", c.scene.min_boxes},
                {"max_boxes", c.scene.max_boxes},
                {"n_points", c.scene.n_points},
                {"box_point_frac", c.scene.box_point_frac},
                {"n_classes", c.scene.n_classes},
                {"n_attributes", c.scene.n_attributes}};
  j["labels"] = {{"depth_bins", c.labels.depth_bins},
                 {"depth_min", c.labels.depth_min},
                 {"depth_max", c.labels.depth_max},
                 {"bev_h", c.labels.bev_h},
                 {"bev_w", c.labels.bev_w},
                 {"bev_cell", c.labels.bev_cell},
                 {"stride", c.labels.stride}};
  j["model"] = {{"feat_channels", c.model.feat_channels},
                {"decoder_layers", c.model.decoder_layers},
                {"decoder_heads", c.model.decoder_heads},
                {"embed_dim", c.model.embed_dim},
                {"ffn_dim", c.model.ffn_dim},
                {"n_det_queries", c.model.n_det_queries},
                {"n_bev_queries", c.model.n_bev_queries},
                {"bev_patch", c.model.bev_patch}};
  j["loss"] = {{"gamma_seg", c.loss.gamma_seg},
               {"gamma_dep", c.loss.gamma_dep},
               {"w_det", c.loss.w_det},
               {"w_bev", c.loss.w_bev},
               {"focal_alpha", c.loss.focal_alpha},
               {"focal_gamma", c.loss.focal_gamma},
               {"match_cls", c.loss.match_cls},
               {"match_l1", c.loss.match_l1},
               {"bev_pos_weight", c.loss.bev_pos_weight},
               {"w_attr", c.loss.w_attr},
               {"aux_per_layer", c.loss.aux_per_layer}};
  j["optimizer"] = {{"lr", c.optim.lr},
                    {"weight_decay", c.optim.weight_decay},
                    {"schedule", c.optim.schedule},
                    {"grad_clip", c.optim.grad_clip}};
  j["toggles"] = {{"seg_branch", c.seg_branch}, {"depth_branch", c.depth_branch}, {"pqb", c.pqb}};
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.dataset = j.value("dataset", c.dataset);
  c.task = task_from_name(j.value("task", "detection"));
  c.train_scenes = j.value("train_scenes", c.train_scenes);
  c.val_scenes = j.value("val_scenes", c.val_scenes);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  c.viz_samples = j.value("viz_samples", c.viz_samples);
  if (j.contains("scene")) {
    const auto& s = j["scene"];
    c.scene.n_cameras = s.value("n_cameras", c.scene.n_cameras);
    c.scene.image_height = s.value("image_height", c.scene.image_height);
    c.scene.image_width = s.value("image_width", c.scene.image_width);
    c.scene.cam_height = s.value("cam_height", c.scene.cam_height);
    c.scene.cam_pitch_deg = s.value("cam_pitch_deg", c.scene.cam_pitch_deg);
    c.scene.hfov_deg = s.value("hfov_deg", c.scene.hfov_deg);
    c.scene.range = s.value("range", c.scene.range);
    c.scene.z_range = s.value("z_range", c.scene.z_range);
    c.scene.min_boxes = s.value("min_boxes", c.scene.min_boxes);
    c.scene.max_boxes = s.value("max_boxes", c.scene.max_boxes);
    c.scene.n_points = s.value("n_points", c.scene.n_points);
    c.scene.box_point_frac = s.value("box_point_frac", c.scene.box_point_frac);
    c.scene.n_classes = s.value("n_classes", c.scene.n_classes);
    c.scene.n_attributes = s.value("n_attributes", c.scene.n_attributes);
  }
  if (j.contains("labels")) {
    const auto& l = j["labels"];
    c.labels.depth_bins = l.value("depth_bins", c.labels.depth_bins);
    c.labels.depth_min = l.value("depth_min", c.labels.depth_min);
    c.labels.depth_max = l.value("depth_max", c.labels.depth_max);
    c.labels.bev_h = l.value("bev_h", c.labels.bev_h);
    c.labels.bev_w = l.value("bev_w", c.labels.bev_w);
    c.labels.bev_cell = l.value("bev_cell", c.labels.bev_cell);
    c.labels.stride = l.value("stride", c.labels.stride);
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    c.model.feat_channels = m.value("feat_channels", c.model.feat_channels);
    c.model.decoder_layers = m.value("decoder_layers", c.model.decoder_layers);
    c.model.decoder_heads = m.value("decoder_heads", c.model.decoder_heads);
    c.model.embed_dim = m.value("embed_dim", c.model.embed_dim);
    c.model.ffn_dim = m.value("ffn_dim", c.model.ffn_dim);
    c.model.n_det_queries = m.value("n_det_queries", c.model.n_det_queries);
    c.model.n_bev_queries = m.value("n_bev_queries", c.model.n_bev_queries);
    c.model.bev_patch = m.value("bev_patch", c.model.bev_patch);
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    c.loss.gamma_seg = l.value("gamma_seg", c.loss.gamma_seg);
    c.loss.gamma_dep = l.value("gamma_dep", c.loss.gamma_dep);
    c.loss.w_det = l.value("w_det", c.loss.w_det);
    c.loss.w_bev = l.value("w_bev", c.loss.w_bev);
    c.loss.focal_alpha = l.value("focal_alpha", c.loss.focal_alpha);
    c.loss.focal_gamma = l.value("focal_gamma", c.loss.focal_gamma);
    c.loss.match_cls = l.value("match_cls", c.loss.match_cls);
    c.loss.match_l1 = l.value("match_l1", c.loss.match_l1);
    c.loss.bev_pos_weight = l.value("bev_pos_weight", c.loss.bev_pos_weight);
    c.loss.w_attr = l.value("w_attr", c.loss.w_attr);
    c.loss.aux_per_layer = l.value("aux_per_layer", c.loss.aux_per_layer);
  }
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    c.optim.lr = o.value("lr", c.optim.lr);
    c.optim.weight_decay = o.value("weight_decay", c.optim.weight_decay);
    c.optim.schedule = o.value("schedule", c.optim.schedule);
    c.optim.grad_clip = o.value("grad_clip", c.optim.grad_clip);
  }
  if (j.contains("toggles")) {
    const auto& t = j["toggles"];
    c.seg_branch = t.value("seg_branch", c.seg_branch);
    c.depth_branch = t.value("depth_branch", c.depth_branch);
    c.pqb = t.value("pqb", c.pqb);
  }
  return c;
}

/// Loads a config file; the SDTR_SEED environment variable overrides its seed.
inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  RunConfig c = run_config_from_json(nlohmann::json::parse(in));
  if (const char* env = std::getenv("SDTR_SEED")) c.seed = std::strtoull(env, nullptr, 10);
  return c;
}

// ---- dataset generation ----

inline void generate_dataset(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  // Stored labels carry the full channel set (road + objects); the detection
  // task view drops the drivable channel at load time, so one dataset serves
  // every task of the ablation lattice.
  LabelConfig lc = cfg.derived_labels();
  lc.task = Task::joint;
  const int total = cfg.train_scenes + cfg.val_scenes;
  std::vector<DatasetRecord> records;
  records.reserve(static_cast<size_t>(total));
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < total; ++i) {
    const std::uint64_t scene_seed = Rng::mix(cfg.seed, static_cast<std::uint64_t>(i));
    seeds.push_back(scene_seed);
    DatasetRecord rec;
    rec.scene = generate_scene(cfg.scene, scene_seed);
    rec.sample = build_sample(rec.scene, lc, cfg.scene.range);
    records.push_back(std::move(rec));
  }
  nlohmann::json meta;
  meta["config"] = to_json(cfg);
  meta["seeds"] = seeds;
  write_dataset(records, out_dir, lc, std::move(meta));
}

// ---- prediction decoding and evaluation ----

inline std::vector<Detection> decode_detections(const Tensor& cls_logits, const Tensor& boxes10,
                                                const Tensor& attr_logits) {
  const int n_q = cls_logits.dim(0), n_cls = cls_logits.dim(1), n_attr = attr_logits.dim(1);
  std::vector<Detection> out;
  out.reserve(static_cast<size_t>(n_q));
  for (int q = 0; q < n_q; ++q) {
    Detection d;
    int best = 0;
    for (int c = 1; c < n_cls; ++c)
      if (cls_logits.at(q, c) > cls_logits.at(q, best)) best = c;
    d.class_id = best;
    d.score = loss_detail::sigmoid_scalar(cls_logits.at(q, best));
    d.x = boxes10.at(q, 0);
    d.y = boxes10.at(q, 1);
    d.z = boxes10.at(q, 2);
    d.w = boxes10.at(q, 3);
    d.l = boxes10.at(q, 4);
    d.h = boxes10.at(q, 5);
    d.yaw = std::atan2(boxes10.at(q, 6), boxes10.at(q, 7));
    d.vx = boxes10.at(q, 8);
    d.vy = boxes10.at(q, 9);
    int abest = 0;
    for (int a = 1; a < n_attr; ++a)
      if (attr_logits.at(q, a) > attr_logits.at(q, abest)) abest = a;
    d.attr_id = abest;
    out.push_back(d);
  }
  return out;
}

struct Perturbation {
  enum class Kind { none, extrinsic_noise, camera_drop };
  Kind kind = Kind::none;
  double sigma_rot = 0.0;    // radians
  double sigma_trans = 0.0;  // meters
  std::vector<int> drop_cameras;
  std::uint64_t seed = 7;

  void validate(int n_cameras) const {
    if (kind == Kind::camera_drop) {
      if (drop_cameras.empty()) throw ConfigError("camera drop: empty camera list");
      std::vector<char> seen(static_cast<size_t>(n_cameras), 0);
      for (int c : drop_cameras) {
        if (c < 0 || c >= n_cameras) throw ConfigError("camera drop: index out of range");
        seen[static_cast<size_t>(c)] = 1;
      }
      int left = 0;
      for (char s : seen) left += s ? 0 : 1;
      if (left == 0) throw ConfigError("camera drop: dropping every camera is not allowed");
    }
    if (kind == Kind::extrinsic_noise && (sigma_rot < 0.0 || sigma_trans < 0.0))
      throw ConfigError("extrinsic noise: sigmas must be >= 0");
  }
};

namespace harness_detail {

/// Applies a test-time perturbation to one record. Extrinsic noise re-renders
/// the views from the perturbed rig (ground truth stays in the ego frame);
/// camera drop zeroes the selected views' images and labels.
inline void apply_perturbation(DatasetRecord& rec, const Perturbation& pert, int record_idx,
                               const LabelConfig& lc) {
  if (pert.kind == Perturbation::Kind::none) return;
  if (pert.kind == Perturbation::Kind::extrinsic_noise) {
    Scene noisy = rec.scene;
    noisy.rig = perturb_extrinsics(rec.scene.rig, pert.sigma_rot, pert.sigma_trans,
                                   Rng::mix(pert.seed, static_cast<std::uint64_t>(record_idx)));
    rec.sample.images = render_views(noisy);
    return;
  }
  const int n_views = static_cast<int>(rec.scene.rig.cameras.size());
  const size_t img_per_view = rec.sample.images.size() / static_cast<size_t>(n_views);
  const size_t sem_per_view = rec.sample.semantic.size() / static_cast<size_t>(n_views);
  const size_t dep_per_view = rec.sample.depth.onehot.size() / static_cast<size_t>(n_views);
  const size_t msk_per_view = rec.sample.depth.mask.size() / static_cast<size_t>(n_views);
  for (int c : pert.drop_cameras) {
    std::fill_n(rec.sample.images.begin() + c * img_per_view, img_per_view, 0.0f);
    std::fill_n(rec.sample.semantic.begin() + c * sem_per_view, sem_per_view, std::uint8_t{0});
    std::fill_n(rec.sample.depth.onehot.begin() + c * dep_per_view, dep_per_view, std::uint8_t{0});
    std::fill_n(rec.sample.depth.mask.begin() + c * msk_per_view, msk_per_view, std::uint8_t{0});
  }
  (void)lc;
}

inline std::vector<std::string> bev_class_names(int n_obj) {
  std::vector<std::string> names{"drivable"};
  for (int c = 0; c < n_obj; ++c) names.push_back(class_specs()[static_cast<size_t>(c)].name);
  return names;
}

/// Semantic target channels for the active task. Stored labels may carry the
/// extra drivable channel; the detection view strips it.
inline std::vector<std::uint8_t> semantic_target_view(const std::vector<std::uint8_t>& stored,
                                                      int n_views, int hw, int n_obj,
                                                      bool want_drivable) {
  const int want_cs = n_obj + (want_drivable ? 1 : 0);
  const int stored_cs = static_cast<int>(stored.size() / (static_cast<size_t>(n_views) * hw));
  if (static_cast<size_t>(stored_cs) * n_views * hw != stored.size())
    throw ConfigError("semantic labels: stored size not divisible by views * pixels");
  if (stored_cs == want_cs) return stored;
  if (stored_cs == n_obj + 1 && !want_drivable) {
    std::vector<std::uint8_t> out(static_cast<size_t>(n_views) * n_obj * hw);
    for (int n = 0; n < n_views; ++n)
      std::copy(stored.begin() + (static_cast<size_t>(n) * stored_cs + 1) * hw,
                stored.begin() + (static_cast<size_t>(n) * stored_cs + stored_cs) * hw,
                out.begin() + static_cast<size_t>(n) * n_obj * hw);
    return out;
  }
  throw ConfigError("semantic labels: stored channels " + std::to_string(stored_cs) +
                    " incompatible with task channels " + std::to_string(want_cs));
}

}  // namespace harness_detail

/// Evaluates a model over dataset records. Returns the spec'd flat-key report.
inline EvalReport evaluate_records(const ModelState& state, const ModelConfig& mcfg,
                                   const LabelConfig& lc,
                                   const std::vector<DatasetRecord>& records,
                                   const Perturbation& pert = {}, int viz_samples = 0) {
  pert.validate(mcfg.n_views);
  DetEvalAccumulator det_acc(mcfg.n_classes);
  const int n_bev_ch = mcfg.n_classes + 1;
  std::vector<std::int64_t> bev_inter(static_cast<size_t>(n_bev_ch), 0);
  std::vector<std::int64_t> bev_union(static_cast<size_t>(n_bev_ch), 0);
  nlohmann::json viz;
  const auto t0 = std::chrono::steady_clock::now();

  for (size_t ri = 0; ri < records.size(); ++ri) {
    DatasetRecord rec = records[ri];
    harness_detail::apply_perturbation(rec, pert, static_cast<int>(ri), lc);
    Workspace ws = Workspace::bind(state);
    ForwardOutput out = model_forward(rec.sample.images, state, mcfg, ws);

    if (mcfg.has_det_head()) {
      const auto preds = decode_detections(out.det.cls_logits.back()->val,
                                           out.det.boxes.back()->val,
                                           out.det.attr_logits.back()->val);
      det_acc.add_sample(preds, rec.scene.boxes);
      if (static_cast<int>(ri) < viz_samples) {
        nlohmann::json dets = nlohmann::json::array();
        for (const auto& d : preds)
          dets.push_back({d.x, d.y, d.w, d.l, d.yaw, double(d.class_id), d.score});
        viz["viz.det_pred." + std::to_string(ri)] = dets;
        nlohmann::json gts = nlohmann::json::array();
        for (const auto& g : rec.scene.boxes)
          gts.push_back({g.center.x, g.center.y, g.w, g.l, g.yaw, double(g.class_id), 1.0});
        viz["viz.det_gt." + std::to_string(ri)] = gts;
      }
    }
    if (mcfg.has_bev_head()) {
      const Tensor& logits = out.bev_logits->val;
      const size_t per = static_cast<size_t>(lc.bev_h) * lc.bev_w;
      for (int c = 0; c < n_bev_ch; ++c)
        for (size_t i = 0; i < per; ++i) {
          const bool p = loss_detail::sigmoid_scalar(logits.v[c * per + i]) >= 0.5;
          const bool g = rec.sample.bev[c * per + i] != 0;
          bev_inter[static_cast<size_t>(c)] += (p && g) ? 1 : 0;
          bev_union[static_cast<size_t>(c)] += (p || g) ? 1 : 0;
        }
      if (static_cast<int>(ri) < viz_samples) {
        std::vector<double> probs(logits.v.size());
        for (size_t i = 0; i < probs.size(); ++i)
          probs[i] = loss_detail::sigmoid_scalar(logits.v[i]);
        viz["viz.bev_pred." + std::to_string(ri)] = probs;
        viz["viz.bev_gt." + std::to_string(ri)] = rec.sample.bev;
        viz["viz.bev_shape"] = {n_bev_ch, lc.bev_h, lc.bev_w};
      }
    }
    if (mcfg.seg_branch && static_cast<int>(ri) < viz_samples && out.sd.p_dep) {
      // Expected depth per pixel of view 0, from the binned sigmoid output.
      const Tensor& pd = out.sd.p_dep->val;
      const int h = pd.dim(2), w = pd.dim(3);
      std::vector<double> depth(static_cast<size_t>(h) * w, 0.0);
      const double delta = (lc.depth_max - lc.depth_min) / lc.depth_bins;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          int best = 0;
          for (int b = 1; b < lc.depth_bins; ++b)
            if (pd.at(0, b, y, x) > pd.at(0, best, y, x)) best = b;
          depth[static_cast<size_t>(y) * w + x] = lc.depth_min + (best + 0.5) * delta;
        }
      viz["viz.depth_pred." + std::to_string(ri)] = depth;
      viz["viz.depth_shape"] = {h, w};
    }
  }
  const auto t1 = std::chrono::steady_clock::now();
  const double secs = std::chrono::duration<double>(t1 - t0).count();

  EvalReport rep;
  if (mcfg.has_det_head()) {
    const auto res = det_acc.finalize();
    for (int c = 0; c < mcfg.n_classes; ++c)
      for (size_t ti = 0; ti < eval_distance_thresholds().size(); ++ti)
        rep.data["ap." + std::string(class_specs()[static_cast<size_t>(c)].name) + "." +
                 threshold_key(eval_distance_thresholds()[ti])] = res.ap[static_cast<size_t>(c)][ti];
    rep.data["map"] = res.map;
    rep.data["tp.ate"] = res.tp.ate;
    rep.data["tp.ase"] = res.tp.ase;
    rep.data["tp.aoe"] = res.tp.aoe;
    rep.data["tp.ave"] = res.tp.ave;
    rep.data["tp.aae"] = res.tp.aae;
    rep.data["nds"] = compose_nds(res.map, res.tp.as_array());
  }
  if (mcfg.has_bev_head()) {
    const auto names = harness_detail::bev_class_names(mcfg.n_classes);
    double mean = 0.0;
    for (int c = 0; c < n_bev_ch; ++c) {
      const double iou = bev_union[static_cast<size_t>(c)] == 0
                             ? 1.0
                             : double(bev_inter[static_cast<size_t>(c)]) /
                                   double(bev_union[static_cast<size_t>(c)]);
      rep.data["iou." + names[static_cast<size_t>(c)]] = iou;
      mean += iou;
    }
    rep.data["iou.mean"] = mean / n_bev_ch;
  }
  rep.data["timing.samples_per_s"] = secs > 0.0 ? records.size() / secs : 0.0;
  rep.data["meta.samples"] = records.size();
  switch (pert.kind) {
    case Perturbation::Kind::none:
      rep.data["meta.perturbation.kind"] = "none";
      break;
    case Perturbation::Kind::extrinsic_noise:
      rep.data["meta.perturbation.kind"] = "extrinsic_noise";
      rep.data["meta.perturbation.sigma_rot"] = pert.sigma_rot;
      rep.data["meta.perturbation.sigma_trans"] = pert.sigma_trans;
      break;
    case Perturbation::Kind::camera_drop:
      rep.data["meta.perturbation.kind"] = "camera_drop";
      rep.data["meta.perturbation.dropped"] = pert.drop_cameras;
      break;
  }
  for (auto& [k, v] : viz.items()) rep.data[k] = v;
  return rep;
}

// ---- training ----

struct SampleLoss {
  double total = 0.0, det = 0.0, bev = 0.0, seg = 0.0, dep = 0.0, attr = 0.0;
  std::map<std::string, Tensor> grads;
};

namespace harness_detail {

/// Forward + losses + backward for one sample; pure given the state.
inline SampleLoss sample_grads(const DatasetRecord& rec, const ModelState& state,
                               const ModelConfig& mcfg, const LabelConfig& lc,
                               const LossWeights& lw) {
  Workspace ws = Workspace::bind(state);
  ForwardOutput out = model_forward(rec.sample.images, state, mcfg, ws);
  SampleLoss sl;

  // A diverged state produces non-finite outputs; bail before the matcher
  // sees them so the trainer can abort with the step number.
  bool finite = true;
  if (mcfg.has_det_head())
    finite = finite && all_finite(out.det.cls_logits.back()->val) &&
             all_finite(out.det.boxes.back()->val);
  if (mcfg.has_bev_head()) finite = finite && all_finite(out.bev_logits->val);
  if (!finite) {
    sl.total = std::numeric_limits<double>::quiet_NaN();
    return sl;
  }

  ad::Var l_det, l_bev, l_attr;
  if (mcfg.has_det_head()) {
    DetectionLossOut dl = detection_loss(out.det, rec.scene.boxes, lw, mcfg);
    l_det = dl.total;
    sl.det = dl.total->val.at(0);
    if (lw.w_attr > 0.0) {
      l_attr = attribute_loss(out.det, rec.scene.boxes, dl.assignments, lw, mcfg);
      sl.attr = l_attr->val.at(0);
    }
  }
  if (mcfg.has_bev_head()) {
    l_bev = bev_loss(out.bev_logits, rec.sample.bev, lw);
    sl.bev = l_bev->val.at(0);
  }
  std::vector<std::uint8_t> seg_target;
  if (mcfg.seg_branch)
    seg_target = semantic_target_view(rec.sample.semantic, mcfg.n_views,
                                      mcfg.feat_h * mcfg.feat_w, mcfg.n_classes,
                                      lc.has_drivable_channel());
  AuxLossOut aux = auxiliary_losses(
      mcfg.seg_branch ? out.sd.seg_logits : ad::Var{}, seg_target,
      mcfg.depth_branch ? out.sd.dep_logits : ad::Var{}, rec.sample.depth.onehot,
      rec.sample.depth.mask, lc.depth_bins);
  sl.seg = aux.l_seg->val.at(0);
  sl.dep = aux.l_dep->val.at(0);

  LossWeights tw = lw;
  if (!mcfg.has_det_head()) tw.w_det = 0.0;
  if (!mcfg.has_bev_head()) tw.w_bev = 0.0;
  ad::Var total = total_loss(l_det, l_bev, aux.l_seg, aux.l_dep, tw);
  if (l_attr && lw.w_attr > 0.0) total = ad::add(total, ad::scalar_mul(l_attr, lw.w_attr));
  sl.total = total->val.at(0);
  ad::backward(total);
  sl.grads = ws.grads();
  return sl;
}

}  // namespace harness_detail

struct TrainResult {
  ModelState state;
  nlohmann::json history;
  std::filesystem::path checkpoint_path;
};

/// Full training run: AdamW with cosine decay, per-epoch validation, NaN
/// abort, deterministic given the config seed. Batch gradients may be
/// computed on worker threads; accumulation order is fixed by sample index.
inline TrainResult train(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  const ModelConfig mcfg = cfg.derived_model();
  const LabelConfig lc = cfg.derived_labels();
  const auto all = read_dataset(cfg.dataset);
  if (static_cast<int>(all.size()) < cfg.train_scenes + cfg.val_scenes)
    throw ConfigError("dataset too small: has " + std::to_string(all.size()) + ", need " +
                      std::to_string(cfg.train_scenes + cfg.val_scenes));
  const std::vector<DatasetRecord> train_recs(all.begin(), all.begin() + cfg.train_scenes);
  const std::vector<DatasetRecord> val_recs(all.begin() + cfg.train_scenes,
                                            all.begin() + cfg.train_scenes + cfg.val_scenes);

  ModelState state = init_model(mcfg, cfg.seed);
  AdamW opt(cfg.optim);
  const std::int64_t steps_per_epoch =
      (cfg.train_scenes + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;

  nlohmann::json history;
  history["config"] = to_json(cfg);
  history["total_steps"] = total_steps;
  nlohmann::json epochs_json = nlohmann::json::array();

  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Deterministic shuffle.
    std::vector<int> order(train_recs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng shuffle_rng(Rng::mix(cfg.seed, 0xe90c4 + static_cast<std::uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(
                                  0, static_cast<int>(i) - 1))]);

    double epoch_loss = 0.0;
    double comp_det = 0, comp_bev = 0, comp_seg = 0, comp_dep = 0, comp_attr = 0;
    std::int64_t n_samples = 0;
    for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
      const size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(cfg.batch_size));
      std::vector<std::future<SampleLoss>> futs;
      for (size_t i = b0; i < b1; ++i) {
        const DatasetRecord& rec = train_recs[static_cast<size_t>(order[i])];
        futs.push_back(std::async(
            cfg.threads > 1 ? std::launch::async : std::launch::deferred,
            [&rec, &state, &mcfg, &lc, &cfg]() {
              return harness_detail::sample_grads(rec, state, mcfg, lc, cfg.loss);
            }));
      }
      std::map<std::string, Tensor> batch_grads;
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      for (auto& f : futs) {
        SampleLoss sl = f.get();
        if (!std::isfinite(sl.total))
          throw TrainError("non-finite loss at step " + std::to_string(step), step);
        epoch_loss += sl.total;
        comp_det += sl.det; comp_bev += sl.bev; comp_seg += sl.seg; comp_dep += sl.dep;
        comp_attr += sl.attr;
        ++n_samples;
        for (auto& [name, g] : sl.grads) {
          auto it = batch_grads.find(name);
          if (it == batch_grads.end()) {
            for (auto& e : g.v) e *= inv;
            batch_grads.emplace(name, std::move(g));
          } else {
            for (std::int64_t k = 0; k < g.numel(); ++k) it->second.v[k] += g.v[k] * inv;
          }
        }
      }
      opt.step(state, batch_grads, scheduled_lr(cfg.optim, step, total_steps));
      ++step;
    }

    EvalReport val_rep = evaluate_records(state, mcfg, lc, val_recs);
    val_rep.data.erase("timing.samples_per_s");  // wall clock is not part of the history
    nlohmann::json e;
    e["epoch"] = epoch;
    e["train_loss"] = epoch_loss / n_samples;
    e["loss_components"] = {{"det", comp_det / n_samples}, {"bev", comp_bev / n_samples},
                            {"seg", comp_seg / n_samples}, {"dep", comp_dep / n_samples},
                            {"attr", comp_attr / n_samples}};
    e["val"] = val_rep.data;
    epochs_json.push_back(std::move(e));
  }
  history["epochs"] = epochs_json;

  TrainResult res;
  res.history = std::move(history);
  std::filesystem::create_directories(out_dir);
  res.checkpoint_path = out_dir / "checkpoint.bin";
  save_checkpoint(res.checkpoint_path, state, to_json(cfg), step, cfg.seed);
  std::ofstream hf(out_dir / "history.json", std::ios::trunc);
  hf << res.history.dump(2) << "\n";
  res.state = std::move(state);
  return res;
}

/// Evaluates a checkpoint against a dataset split, with optional test-time
/// perturbation. Split is "val", "train" or "all" relative to the config
/// stored in the checkpoint.
inline EvalReport evaluate(const std::filesystem::path& ckpt_path,
                           const std::filesystem::path& dataset_dir, const Perturbation& pert = {},
                           const std::string& split = "val", int viz_samples = 0) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  RunConfig cfg = run_config_from_json(ck.config);
  const ModelConfig mcfg = cfg.derived_model();
  const LabelConfig lc = cfg.derived_labels();
  const auto meta = read_dataset_meta(dataset_dir);
  const int count = meta.at("count").get<int>();
  int lo = 0, hi = count;
  if (split == "val") {
    lo = std::min(count, cfg.train_scenes);
    hi = std::min(count, cfg.train_scenes + cfg.val_scenes);
  } else if (split == "train") {
    hi = std::min(count, cfg.train_scenes);
  } else if (split != "all") {
    throw ConfigError("unknown split: " + split);
  }
  std::vector<DatasetRecord> records;
  for (int i = lo; i < hi; ++i) records.push_back(read_dataset_record(dataset_dir, i));
  EvalReport rep = evaluate_records(ck.state, mcfg, lc, records, pert, viz_samples);
  rep.data["meta.split"] = split;
  rep.data["meta.checkpoint"] = ckpt_path.string();
  return rep;
}

}  // namespace sdbev
