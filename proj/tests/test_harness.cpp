#include <catch2/catch.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "sdbev/ablate.hpp"
#include "sdbev/harness.hpp"

using namespace sdbev;
namespace fs = std::filesystem;

namespace {

/// Micro configuration: 2 cameras, 32x32 images, tiny model. Fast enough for
/// end-to-end train/evaluate tests.
RunConfig micro_config(const std::string& dataset = "") {
  RunConfig c;
  c.dataset = dataset;
  c.task = Task::detection;
  c.scene.n_cameras = 2;
  c.scene.image_height = 32;
  c.scene.image_width = 32;
  c.scene.hfov_deg = 90.0;
  c.scene.n_points = 200;
  c.scene.min_boxes = 1;
  c.scene.max_boxes = 2;
  c.labels.depth_bins = 4;
  c.labels.bev_h = c.labels.bev_w = 8;
  c.labels.bev_cell = 5.0;
  c.model.feat_channels = 8;
  c.model.decoder_layers = 2;
  c.model.decoder_heads = 2;
  c.model.embed_dim = 8;
  c.model.ffn_dim = 16;
  c.model.n_det_queries = 12;  // divisible by C_s = 3 (detection) and 4 (joint)
  c.model.n_bev_queries = 4;
  c.model.bev_patch = 4;
  c.train_scenes = 3;
  c.val_scenes = 2;
  c.epochs = 2;
  c.batch_size = 2;
  c.threads = 1;
  c.seed = 5;
  return c;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("run config serializes and parses losslessly", "[harness]") {
  RunConfig c = micro_config("/tmp/somewhere");
  c.loss.gamma_seg = 2.5;
  c.optim.lr = 3e-4;
  c.pqb = false;
  c.task = Task::joint;
  c.viz_samples = 2;
  const nlohmann::json j = to_json(c);
  const RunConfig back = run_config_from_json(j);
  REQUIRE(to_json(back) == j);
  REQUIRE(back.loss.gamma_seg == 2.5);
  REQUIRE(back.pqb == false);
  REQUIRE(back.task == Task::joint);
}

TEST_CASE("SDTR_SEED environment variable overrides the config seed", "[harness]") {
  TempDir dir("sdbev_cfg_env");
  const fs::path cfg_path = dir.path / "config.json";
  RunConfig c = micro_config();
  c.seed = 5;
  std::ofstream(cfg_path) << to_json(c).dump();
  setenv("SDTR_SEED", "9001", 1);
  const RunConfig loaded = load_run_config(cfg_path);
  unsetenv("SDTR_SEED");
  REQUIRE(loaded.seed == 9001);
  const RunConfig plain = load_run_config(cfg_path);
  REQUIRE(plain.seed == 5);
}

TEST_CASE("cosine schedule endpoints", "[harness]") {
  OptimizerConfig oc;
  REQUIRE(scheduled_lr(oc, 0, 1000) == Approx(2e-4));
  REQUIRE(cosine_lr(2e-4, 1000, 1000) == Approx(0.0).margin(1e-18));
  REQUIRE(cosine_lr(2e-4, 500, 1000) == Approx(1e-4));
  oc.schedule = "constant";
  REQUIRE(scheduled_lr(oc, 999, 1000) == Approx(2e-4));
}

TEST_CASE("training is deterministic given the seed", "[harness]") {
  TempDir dir("sdbev_train_det");
  RunConfig cfg = micro_config((dir.path / "data").string());
  generate_dataset(cfg, dir.path / "data");
  const TrainResult a = train(cfg, dir.path / "run_a");
  const TrainResult b = train(cfg, dir.path / "run_b");
  REQUIRE(a.history.dump() == b.history.dump());
  for (const auto& [name, t] : a.state.params) REQUIRE(b.state.at(name).v == t.v);

  SECTION("training reduces the loss on a slightly longer run") {
    RunConfig longer = cfg;
    longer.epochs = 6;
    const TrainResult r = train(longer, dir.path / "run_c");
    const auto& epochs = r.history["epochs"];
    REQUIRE(epochs.back()["train_loss"].get<double>() <
            epochs.front()["train_loss"].get<double>());
  }

  SECTION("worker count does not change the result (fixed accumulation order)") {
    RunConfig threaded = cfg;
    threaded.threads = 2;
    const TrainResult t2 = train(threaded, dir.path / "run_t2");
    REQUIRE(t2.history["epochs"].dump() == a.history["epochs"].dump());
    for (const auto& [name, t] : a.state.params) REQUIRE(t2.state.at(name).v == t.v);
  }
}

TEST_CASE("disabled branches contribute no loss and no gradient", "[harness]") {
  TempDir dir("sdbev_toggle");
  RunConfig cfg = micro_config((dir.path / "data").string());
  generate_dataset(cfg, dir.path / "data");
  const auto recs = read_dataset(cfg.dataset);
  const ModelConfig mfull = cfg.derived_model();

  ModelConfig moff = mfull;
  moff.seg_branch = false;
  moff.depth_branch = false;
  moff.pqb = false;
  const ModelState st = init_model(moff, 3);
  const SampleLoss sl =
      harness_detail::sample_grads(recs[0], st, moff, cfg.derived_labels(), cfg.loss);
  REQUIRE(sl.seg == 0.0);
  REQUIRE(sl.dep == 0.0);
  for (const auto& [name, g] : sl.grads) {
    if (name.rfind("sd.", 0) == 0 || name == "pqb.s_w") {
      for (double e : g.v) REQUIRE(e == 0.0);
    }
  }

  SECTION("with PQB disabled, queries equal the table bitwise") {
    Workspace ws = Workspace::bind(st);
    const ForwardOutput out = model_forward(recs[0].sample.images, st, moff, ws);
    REQUIRE(out.q1_det->val.v == st.at("query.det").v);
  }
}

TEST_CASE("evaluation with and without perturbations", "[harness]") {
  TempDir dir("sdbev_eval");
  RunConfig cfg = micro_config((dir.path / "data").string());
  generate_dataset(cfg, dir.path / "data");
  const TrainResult tr = train(cfg, dir.path / "run");

  SECTION("sigma-zero noise reproduces the unperturbed report") {
    const EvalReport plain = evaluate(tr.checkpoint_path, cfg.dataset);
    Perturbation zero;
    zero.kind = Perturbation::Kind::extrinsic_noise;
    zero.sigma_rot = 0.0;
    zero.sigma_trans = 0.0;
    EvalReport noisy = evaluate(tr.checkpoint_path, cfg.dataset, zero);
    // Identical metrics; only the perturbation metadata and timing differ.
    for (auto& [k, v] : plain.data.items()) {
      if (k.rfind("meta.", 0) == 0 || k.rfind("timing.", 0) == 0) continue;
      REQUIRE(noisy.data.contains(k));
      if (v.is_number()) REQUIRE(noisy.data[k].get<double>() == v.get<double>());
    }
  }
  SECTION("nonzero noise produces a valid report with metadata") {
    Perturbation pert;
    pert.kind = Perturbation::Kind::extrinsic_noise;
    pert.sigma_rot = 0.05;
    pert.sigma_trans = 0.2;
    const EvalReport rep = evaluate(tr.checkpoint_path, cfg.dataset, pert);
    REQUIRE(rep.data["meta.perturbation.kind"] == "extrinsic_noise");
    REQUIRE(rep.get("meta.perturbation.sigma_rot") == 0.05);
    REQUIRE(rep.get("nds") >= 0.0);
  }
  SECTION("dropping every camera is rejected") {
    Perturbation pert;
    pert.kind = Perturbation::Kind::camera_drop;
    pert.drop_cameras = {0, 1};
    REQUIRE_THROWS_AS(evaluate(tr.checkpoint_path, cfg.dataset, pert), ConfigError);
    pert.drop_cameras = {7};
    REQUIRE_THROWS_AS(evaluate(tr.checkpoint_path, cfg.dataset, pert), ConfigError);
    pert.drop_cameras = {};
    REQUIRE_THROWS_AS(evaluate(tr.checkpoint_path, cfg.dataset, pert), ConfigError);
  }
  SECTION("report carries the spec'd key names") {
    const EvalReport rep = evaluate(tr.checkpoint_path, cfg.dataset);
    REQUIRE(rep.has("ap.car.0.5"));
    REQUIRE(rep.has("ap.pedestrian.4.0"));
    REQUIRE(rep.has("tp.ate"));
    REQUIRE(rep.has("tp.aae"));
    REQUIRE(rep.has("nds"));
    REQUIRE(rep.has("timing.samples_per_s"));
  }
}

TEST_CASE("dropping the only informative view removes that object's AP", "[harness]") {
  TempDir dir("sdbev_drop");
  // Single-object scenes with the car at varied positions ahead of camera 0,
  // so localization must come from the image. Camera 1 faces backward and
  // only ever sees terrain. With the view dropped, the trained queries fall
  // back to blind position priors that cluster far from the val car, so no
  // prediction lands within the 2 m matching threshold.
  RunConfig cfg = micro_config((dir.path / "data").string());
  cfg.scene.hfov_deg = 70.0;
  cfg.train_scenes = 40;
  cfg.val_scenes = 1;
  cfg.epochs = 300;
  cfg.batch_size = 2;
  cfg.threads = 2;
  cfg.optim.lr = 1e-3;
  cfg.loss.w_attr = 0.0;
  cfg.model.embed_dim = 12;

  auto make_car_scene = [&](std::uint64_t seed, double x, double y) {
    Scene scene;
    scene.seed = seed;
    scene.rig = make_ring_rig(cfg.scene.n_cameras, cfg.scene.image_width, cfg.scene.image_height,
                              cfg.scene.hfov_deg, cfg.scene.cam_height, cfg.scene.cam_pitch_deg);
    Box3D box;
    box.center = {x, y, 0.8};
    box.w = 1.9; box.l = 4.4; box.h = 1.6;
    box.class_id = 0;
    scene.boxes.push_back(box);
    Rng prng(seed);
    for (int i = 0; i < 200; ++i)
      scene.points.push_back({prng.uniform(-15, 15), prng.uniform(-15, 15), 0.0});
    DatasetRecord rec;
    rec.scene = scene;
    LabelConfig store = cfg.derived_labels();
    store.task = Task::joint;  // datasets store the full label channel set
    rec.sample = build_sample(scene, store, cfg.scene.range);
    return rec;
  };

  std::vector<DatasetRecord> recs;
  Rng rng(9);
  for (int i = 0; i < cfg.train_scenes; ++i) {
    const double x = rng.uniform(4.0, 16.0);
    const double y = rng.uniform(-0.45, 0.45) * x;
    recs.push_back(make_car_scene(static_cast<std::uint64_t>(100 + i), x, y));
  }
  recs.push_back(make_car_scene(777, 5.0, 1.0));  // val: inside the blind-prior gap
  LabelConfig store = cfg.derived_labels();
  store.task = Task::joint;
  write_dataset(recs, dir.path / "data", store, {});

  const TrainResult tr = train(cfg, dir.path / "run");
  const EvalReport plain = evaluate(tr.checkpoint_path, cfg.dataset);
  REQUIRE(plain.get("ap.car.2.0") > 0.0);  // the trained model finds the box

  Perturbation drop;
  drop.kind = Perturbation::Kind::camera_drop;
  drop.drop_cameras = {0};
  const EvalReport dropped = evaluate(tr.checkpoint_path, cfg.dataset, drop);
  REQUIRE(dropped.get("ap.car.2.0") == 0.0);
}

TEST_CASE("diverged training aborts with the offending step", "[harness]") {
  TempDir dir("sdbev_nan");
  RunConfig cfg = micro_config((dir.path / "data").string());
  cfg.optim.lr = 1e14;
  cfg.optim.grad_clip = 0.0;
  cfg.epochs = 4;
  generate_dataset(cfg, dir.path / "data");
  try {
    train(cfg, dir.path / "run");
    FAIL("expected TrainError");
  } catch (const TrainError& e) {
    REQUIRE(std::string(e.what()).find("step") != std::string::npos);
    REQUIRE(e.step >= 0);
  }
}

TEST_CASE("ablation harness emits the spec'd row structure", "[harness][ablation]") {
  TempDir dir("sdbev_ablate");
  RunConfig cfg = micro_config((dir.path / "data").string());
  cfg.train_scenes = 2;
  cfg.val_scenes = 1;
  cfg.epochs = 1;
  generate_dataset(cfg, dir.path / "data");
  AblationOptions opts;
  opts.seeds = {1};
  const auto table = ablate(cfg, dir.path / "out", opts);
  const auto& rows = table["rows"];

  std::vector<std::string> lattice, gamma, joint;
  for (const auto& r : rows) {
    const std::string block = r["block"];
    if (block == "lattice") lattice.push_back(r["name"]);
    if (block == "gamma_sweep") {
      gamma.push_back(r["name"]);
      REQUIRE(r["gamma_dep"].get<double>() == 1.0);
    }
    if (block == "joint_grid") joint.push_back(r["name"]);
  }
  REQUIRE(lattice == std::vector<std::string>{"baseline", "seg", "seg_pqb", "seg_dep",
                                              "seg_dep_pqb"});
  REQUIRE(gamma.size() == 4);
  REQUIRE(joint.size() == 4);
  for (const auto& r : rows) {
    REQUIRE(r.contains("wall_clock_s"));
    REQUIRE(r["seeds"].size() == 1);
    INFO(r.dump());
    REQUIRE_FALSE(r["seeds"][0].contains("error"));
  }
  REQUIRE(fs::exists(dir.path / "out" / "ablation.json"));
  REQUIRE(fs::exists(dir.path / "out" / "ablation.csv"));
  // Header plus one line per row.
  std::ifstream csv(dir.path / "out" / "ablation.csv");
  int lines = 0;
  std::string line;
  while (std::getline(csv, line))
    if (!line.empty()) ++lines;
  REQUIRE(lines == 1 + 13);
}

TEST_CASE("ablation rows keep going after a failing row", "[harness][ablation]") {
  TempDir dir("sdbev_ablate_err");
  RunConfig cfg = micro_config((dir.path / "nonexistent_dataset").string());
  AblationOptions opts;
  opts.blocks = {"gamma_sweep"};
  opts.seeds = {1};
  const auto table = ablate(cfg, dir.path / "out", opts);
  REQUIRE(table["rows"].size() == 4);
  for (const auto& r : table["rows"]) REQUIRE(r["seeds"][0].contains("error"));
}
