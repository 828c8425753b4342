// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sdbev/ablate.hpp"
#include "sdbev/harness.hpp"
#include "sdbev/plot.hpp"

namespace fs = std::filesystem;

namespace {

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      if (!cur.empty()) out.push_back(std::stoi(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic multi-camera 3D perception pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_path, ckpt_path, data_path, reports_path;
  std::string drop_cams, split = "val", blocks = "lattice,gamma_sweep,joint_grid", seeds = "1,2,3";
  double noise_rot = -1.0, noise_trans = -1.0;
  int viz = 0, parallel_rows = 1;

  auto* gen = app.add_subcommand("generate-data", "render a synthetic dataset");
  gen->add_option("--config", config_path, "run config JSON")->required();
  gen->add_option("--out", out_path, "output dataset directory")->required();

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--config", config_path, "run config JSON")->required();
  tr->add_option("--out", out_path, "output run directory")->required();

  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  ev->add_option("--data", data_path, "dataset directory")->required();
  ev->add_option("--noise-rot", noise_rot, "extrinsic rotation noise sigma (rad)");
  ev->add_option("--noise-trans", noise_trans, "extrinsic translation noise sigma (m)");
  ev->add_option("--drop-cams", drop_cams, "comma-separated camera indices to drop");
  ev->add_option("--split", split, "val|train|all (default val)");
  ev->add_option("--viz", viz, "embed visualization payloads for N samples");
  ev->add_option("--out", out_path, "write report JSON here (default stdout)");

  auto* ab = app.add_subcommand("ablate", "run ablation blocks");
  ab->add_option("--config", config_path, "run config JSON")->required();
  ab->add_option("--out", out_path, "output directory")->required();
  ab->add_option("--blocks", blocks, "lattice,gamma_sweep,joint_grid subset");
  ab->add_option("--seeds", seeds, "comma-separated seeds");
  ab->add_option("--parallel-rows", parallel_rows, "rows trained concurrently");

  double plot_range = 20.0, plot_depth_max = 30.0;
  auto* pl = app.add_subcommand("plot", "emit SVG figures from reports");
  pl->add_option("--reports", reports_path, "report JSON file/dir (repeatable via dir)")
      ->required();
  pl->add_option("--out", out_path, "output directory")->required();
  pl->add_option("--range", plot_range, "perception range for detection overlays");
  pl->add_option("--depth-max", plot_depth_max, "depth colormap maximum");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      sdbev::RunConfig cfg = sdbev::load_run_config(config_path);
      sdbev::generate_dataset(cfg, out_path);
      std::cout << "wrote dataset with " << cfg.train_scenes + cfg.val_scenes << " scenes to "
                << out_path << "\n";
    } else if (*tr) {
      sdbev::RunConfig cfg = sdbev::load_run_config(config_path);
      sdbev::TrainResult res = sdbev::train(cfg, out_path);
      const auto& epochs = res.history["epochs"];
      std::cout << "trained " << epochs.size() << " epochs; checkpoint at "
                << res.checkpoint_path.string() << "\n";
      if (!epochs.empty()) {
        const auto& last = epochs.back();
        std::cout << "final train loss " << last["train_loss"].get<double>();
        if (last["val"].contains("nds"))
          std::cout << ", val NDS " << last["val"]["nds"].get<double>();
        std::cout << "\n";
      }
    } else if (*ev) {
      sdbev::Perturbation pert;
      if (noise_rot >= 0.0 || noise_trans >= 0.0) {
        pert.kind = sdbev::Perturbation::Kind::extrinsic_noise;
        pert.sigma_rot = std::max(0.0, noise_rot);
        pert.sigma_trans = std::max(0.0, noise_trans);
      }
      if (!drop_cams.empty()) {
        if (pert.kind != sdbev::Perturbation::Kind::none)
          throw sdbev::ConfigError("choose either extrinsic noise or camera drop, not both");
        pert.kind = sdbev::Perturbation::Kind::camera_drop;
        pert.drop_cameras = parse_int_list(drop_cams);
      }
      sdbev::EvalReport rep = sdbev::evaluate(ckpt_path, data_path, pert, split, viz);
      if (out_path.empty()) {
        std::cout << rep.dump() << "\n";
      } else {
        std::ofstream f(out_path, std::ios::trunc);
        f << rep.dump() << "\n";
        std::cout << "wrote report to " << out_path << "\n";
      }
    } else if (*ab) {
      sdbev::RunConfig cfg = sdbev::load_run_config(config_path);
      sdbev::AblationOptions opts;
      opts.blocks.clear();
      {
        std::string cur;
        for (char c : blocks + ",") {
          if (c == ',') {
            if (!cur.empty()) opts.blocks.push_back(cur);
            cur.clear();
          } else {
            cur += c;
          }
        }
      }
      opts.seeds.clear();
      for (int s : parse_int_list(seeds)) opts.seeds.push_back(static_cast<std::uint64_t>(s));
      opts.parallel_rows = parallel_rows;
      const auto table = sdbev::ablate(cfg, out_path, opts);
      std::cout << "ablation finished: " << table["rows"].size() << " rows written to "
                << out_path << "\n";
    } else if (*pl) {
      std::vector<sdbev::EvalReport> reports;
      const fs::path rp(reports_path);
      auto load = [&](const fs::path& p) {
        std::ifstream f(p);
        if (!f) throw sdbev::PlotError("cannot open report " + p.string());
        std::stringstream ss;
        ss << f.rdbuf();
        reports.push_back(sdbev::EvalReport::parse(ss.str()));
      };
      if (fs::is_directory(rp)) {
        std::vector<fs::path> paths;
        for (const auto& e : fs::directory_iterator(rp))
          if (e.path().extension() == ".json") paths.push_back(e.path());
        std::sort(paths.begin(), paths.end());
        for (const auto& p : paths) load(p);
      } else {
        load(rp);
      }
      const auto files = sdbev::plot_reports(
          reports, out_path, sdbev::harness_detail::bev_class_names(3), plot_range,
          plot_depth_max);
      std::cout << "wrote " << files.size() << " figures to " << out_path << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
