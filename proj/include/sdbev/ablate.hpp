// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <string>
#include <vector>

#include "sdbev/harness.hpp"

namespace sdbev {

// Ablation harness: the module toggle lattice, the auxiliary-loss-weight
// sweep, and the joint task-weight grid. Every row is a full train+eval per
// seed; rows report seed mean/std and wall-clock time and failures do not
// stop the remaining rows.

struct AblationRow {
  std::string block;  // "lattice", "gamma_sweep", "joint_grid"
  std::string name;
  RunConfig config;
};

inline std::vector<AblationRow> ablation_lattice(const RunConfig& base) {
  std::vector<AblationRow> rows;
  auto mk = [&](const char* name, bool seg, bool dep, bool pqb) {
    AblationRow r;
    r.block = "lattice";
    r.name = name;
    r.config = base;
    r.config.task = Task::detection;
    r.config.seg_branch = seg;
    r.config.depth_branch = dep;
    r.config.pqb = pqb;
    rows.push_back(std::move(r));
  };
  mk("baseline", false, false, false);
  mk("seg", true, false, false);
  mk("seg_pqb", true, false, true);
  mk("seg_dep", true, true, false);
  mk("seg_dep_pqb", true, true, true);
  return rows;
}

inline std::vector<AblationRow> ablation_gamma_sweep(const RunConfig& base) {
  std::vector<AblationRow> rows;
  for (double g : {1.0, 2.0, 3.0, 4.0}) {
    AblationRow r;
    r.block = "gamma_sweep";
    r.name = "gamma_seg_" + std::to_string(static_cast<int>(g));
    r.config = base;
    r.config.task = Task::detection;
    r.config.loss.gamma_seg = g;
    r.config.loss.gamma_dep = 1.0;
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::vector<AblationRow> ablation_joint_grid(const RunConfig& base) {
  std::vector<AblationRow> rows;
  const std::pair<double, double> grid[4] = {{1, 0}, {0, 1}, {1, 1}, {1, 2}};
  // Joint labels add the drivable channel, so the detection query count is
  // rounded up to the next multiple of the joint channel count.
  const int cs = base.scene.n_classes + 1;
  const int n_det = ((base.model.n_det_queries + cs - 1) / cs) * cs;
  for (const auto& [wd, wb] : grid) {
    AblationRow r;
    r.block = "joint_grid";
    r.name = "det_" + std::to_string(static_cast<int>(wd)) + "_bev_" +
             std::to_string(static_cast<int>(wb));
    r.config = base;
    r.config.task = Task::joint;
    r.config.model.n_det_queries = n_det;
    r.config.loss.w_det = wd;
    r.config.loss.w_bev = wb;
    rows.push_back(std::move(r));
  }
  return rows;
}

struct AblationOptions {
  std::vector<std::string> blocks{"lattice", "gamma_sweep", "joint_grid"};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int parallel_rows = 1;  // opt-in row-level parallelism; rows are independent
};

namespace ablate_detail {

inline nlohmann::json run_row(const AblationRow& row, const std::filesystem::path& out_dir,
                              const std::vector<std::uint64_t>& seeds) {
  nlohmann::json rj;
  rj["block"] = row.block;
  rj["name"] = row.name;
  rj["toggles"] = {{"seg_branch", row.config.seg_branch},
                   {"depth_branch", row.config.depth_branch},
                   {"pqb", row.config.pqb}};
  rj["gamma_seg"] = row.config.loss.gamma_seg;
  rj["gamma_dep"] = row.config.loss.gamma_dep;
  rj["w_det"] = row.config.loss.w_det;
  rj["w_bev"] = row.config.loss.w_bev;
  const auto t0 = std::chrono::steady_clock::now();
  nlohmann::json per_seed = nlohmann::json::array();
  std::vector<double> nds_vals, map_vals, iou_vals;
  for (std::uint64_t seed : seeds) {
    nlohmann::json sj;
    sj["seed"] = seed;
    try {
      RunConfig cfg = row.config;
      cfg.seed = seed;
      const auto run_dir = out_dir / row.name / ("seed_" + std::to_string(seed));
      TrainResult tr = train(cfg, run_dir);
      EvalReport rep = evaluate(tr.checkpoint_path, cfg.dataset);
      sj["metrics"] = rep.data;
      if (rep.has("nds")) nds_vals.push_back(rep.get("nds"));
      if (rep.has("map")) map_vals.push_back(rep.get("map"));
      if (rep.has("iou.mean")) iou_vals.push_back(rep.get("iou.mean"));
    } catch (const std::exception& e) {
      sj["error"] = e.what();  // keep going; failures are per-row data
    }
    per_seed.push_back(std::move(sj));
  }
  const auto t1 = std::chrono::steady_clock::now();
  rj["seeds"] = per_seed;
  rj["wall_clock_s"] = std::chrono::duration<double>(t1 - t0).count();
  auto mean_std = [](const std::vector<double>& xs) -> std::pair<double, double> {
    if (xs.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= xs.size();
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var = xs.size() > 1 ? var / (xs.size() - 1) : 0.0;
    return {mean, std::sqrt(var)};
  };
  if (!nds_vals.empty()) {
    const auto [m, s] = mean_std(nds_vals);
    rj["nds_mean"] = m;
    rj["nds_std"] = s;
  }
  if (!map_vals.empty()) {
    const auto [m, s] = mean_std(map_vals);
    rj["map_mean"] = m;
    rj["map_std"] = s;
  }
  if (!iou_vals.empty()) {
    const auto [m, s] = mean_std(iou_vals);
    rj["iou_mean"] = m;
    rj["iou_std"] = s;
  }
  return rj;
}

}  // namespace ablate_detail

/// Runs the requested ablation blocks and writes ablation.json / ablation.csv.
inline nlohmann::json ablate(const RunConfig& base, const std::filesystem::path& out_dir,
                             const AblationOptions& opts = {}) {
  std::vector<AblationRow> rows;
  for (const auto& b : opts.blocks) {
    std::vector<AblationRow> blk;
    if (b == "lattice") blk = ablation_lattice(base);
    else if (b == "gamma_sweep") blk = ablation_gamma_sweep(base);
    else if (b == "joint_grid") blk = ablation_joint_grid(base);
    else throw ConfigError("unknown ablation block: " + b);
    rows.insert(rows.end(), blk.begin(), blk.end());
  }
  std::filesystem::create_directories(out_dir);

  std::vector<nlohmann::json> results(rows.size());
  if (opts.parallel_rows > 1) {
    std::vector<std::future<void>> futs;
    std::atomic<size_t> next{0};
    for (int t = 0; t < opts.parallel_rows; ++t)
      futs.push_back(std::async(std::launch::async, [&]() {
        for (size_t i = next.fetch_add(1); i < rows.size(); i = next.fetch_add(1))
          results[i] = ablate_detail::run_row(rows[i], out_dir, opts.seeds);
      }));
    for (auto& f : futs) f.get();
  } else {
    for (size_t i = 0; i < rows.size(); ++i)
      results[i] = ablate_detail::run_row(rows[i], out_dir, opts.seeds);
  }

  nlohmann::json table;
  table["rows"] = results;
  table["seeds"] = opts.seeds;
  std::ofstream jf(out_dir / "ablation.json", std::ios::trunc);
  jf << table.dump(2) << "\n";

  std::ofstream cf(out_dir / "ablation.csv", std::ios::trunc);
  cf << "block,name,seg,dep,pqb,gamma_seg,gamma_dep,w_det,w_bev,"
        "nds_mean,nds_std,map_mean,map_std,iou_mean,iou_std,wall_clock_s\n";
  for (const auto& r : results) {
    auto num = [&](const char* k) {
      return r.contains(k) ? std::to_string(r[k].get<double>()) : std::string();
    };
    cf << r["block"].get<std::string>() << "," << r["name"].get<std::string>() << ","
       << (r["toggles"]["seg_branch"].get<bool>() ? 1 : 0) << ","
       << (r["toggles"]["depth_branch"].get<bool>() ? 1 : 0) << ","
       << (r["toggles"]["pqb"].get<bool>() ? 1 : 0) << "," << r["gamma_seg"].get<double>() << ","
       << r["gamma_dep"].get<double>() << "," << r["w_det"].get<double>() << ","
       << r["w_bev"].get<double>() << "," << num("nds_mean") << "," << num("nds_std") << ","
       << num("map_mean") << "," << num("map_std") << "," << num("iou_mean") << ","
       << num("iou_std") << "," << r["wall_clock_s"].get<double>() << "\n";
  }
  return table;
}

}  // namespace sdbev
