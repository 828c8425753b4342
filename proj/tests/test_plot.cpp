#include <catch2/catch.hpp>

#include <filesystem>
#include <fstream>

#include "sdbev/plot.hpp"

using namespace sdbev;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int count_occurrences(const std::string& hay, const std::string& needle) {
  int n = 0;
  for (size_t pos = hay.find(needle); pos != std::string::npos;
       pos = hay.find(needle, pos + needle.size()))
    ++n;
  return n;
}

EvalReport noise_report(double sr, double st, double nds, double map) {
  EvalReport r;
  r.data["meta.perturbation.kind"] = "extrinsic_noise";
  r.data["meta.perturbation.sigma_rot"] = sr;
  r.data["meta.perturbation.sigma_trans"] = st;
  r.data["nds"] = nds;
  r.data["map"] = map;
  r.data["tp.ate"] = 0.5;
  r.data["tp.aoe"] = 0.4;
  r.data["tp.aae"] = 0.3;
  return r;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("empty report list produces no files and succeeds", "[plot]") {
  TempDir dir("sdbev_plot_empty");
  const auto files = plot_reports({}, dir.path, {"drivable", "car"}, 20.0, 30.0);
  REQUIRE(files.empty());
  REQUIRE_FALSE(fs::exists(dir.path));
}

TEST_CASE("three noise levels produce one curve with three points per metric", "[plot]") {
  TempDir dir("sdbev_plot_noise");
  const std::vector<EvalReport> reports = {noise_report(0.02, 0.1, 0.21, 0.18),
                                           noise_report(0.0, 0.0, 0.3, 0.25),
                                           noise_report(0.05, 0.25, 0.1, 0.08)};
  const auto files = plot_reports(reports, dir.path, {"drivable", "car"}, 20.0, 30.0);
  REQUIRE(files.size() == 1);
  const std::string svg = slurp(files[0]);
  REQUIRE(count_occurrences(svg, "<polyline") == 2);  // nds + map
  REQUIRE(count_occurrences(svg, "<circle") == 6);    // 3 points per metric
}

TEST_CASE("noise report missing a sigma field names the key", "[plot]") {
  TempDir dir("sdbev_plot_missing");
  EvalReport bad = noise_report(0.01, 0.05, 0.2, 0.15);
  bad.data.erase("meta.perturbation.sigma_trans");
  try {
    plot_noise_curve({bad, noise_report(0, 0, 0.3, 0.2)}, dir.path / "x.svg");
    FAIL("expected PlotError");
  } catch (const PlotError& e) {
    REQUIRE(std::string(e.what()).find("meta.perturbation.sigma_trans") != std::string::npos);
  }
}

TEST_CASE("camera-drop radar renders one polygon per report", "[plot]") {
  TempDir dir("sdbev_plot_radar");
  EvalReport drop;
  drop.data["meta.perturbation.kind"] = "camera_drop";
  drop.data["nds"] = 0.2;
  drop.data["map"] = 0.15;
  drop.data["tp.ate"] = 0.6;
  drop.data["tp.aoe"] = 0.5;
  drop.data["tp.aae"] = 0.4;
  EvalReport base = drop;
  base.data["meta.perturbation.kind"] = "none";
  base.data["nds"] = 0.3;
  const auto files = plot_reports({base, drop}, dir.path, {"drivable", "car"}, 20.0, 30.0);
  REQUIRE(files.size() == 1);
  REQUIRE(count_occurrences(slurp(files[0]), "<polygon") == 2);
}

TEST_CASE("BEV overlay uses the fixed class palette", "[plot]") {
  // The published figure convention: vehicle blue, drivable orange, lane cyan.
  REQUIRE(std::string(kColorVehicle) != std::string(kColorDrivable));
  REQUIRE(std::string(kColorVehicle) != std::string(kColorLane));
  REQUIRE(std::string(kColorDrivable) != std::string(kColorLane));
  REQUIRE(bev_class_color("car") == kColorVehicle);
  REQUIRE(bev_class_color("vehicle") == kColorVehicle);
  REQUIRE(bev_class_color("drivable") == kColorDrivable);
  REQUIRE(bev_class_color("lane") == kColorLane);

  TempDir dir("sdbev_plot_bev");
  EvalReport rep;
  rep.data["viz.bev_shape"] = {2, 2, 2};
  rep.data["viz.bev_pred.0"] = std::vector<double>{0.9, 0.1, 0.2, 0.1, 0.8, 0.1, 0.1, 0.2};
  rep.data["viz.bev_gt.0"] = std::vector<int>{1, 0, 0, 0, 1, 0, 0, 0};
  fs::create_directories(dir.path);
  plot_bev_overlay(rep, 0, {"drivable", "car"}, dir.path / "bev.svg");
  const std::string svg = slurp(dir.path / "bev.svg");
  REQUIRE(svg.find(kColorDrivable) != std::string::npos);
  REQUIRE(svg.find(kColorVehicle) != std::string::npos);
}

TEST_CASE("detection overlay and depth map render from viz payloads", "[plot]") {
  TempDir dir("sdbev_plot_viz");
  EvalReport rep;
  rep.data["viz.det_pred.0"] =
      nlohmann::json::array({{3.0, 2.0, 1.9, 4.4, 0.3, 0.0, 0.8}});
  rep.data["viz.det_gt.0"] = nlohmann::json::array({{3.1, 2.1, 1.9, 4.4, 0.3, 0.0, 1.0}});
  rep.data["viz.depth_pred.0"] = std::vector<double>{5.0, 10.0, 20.0, 29.0};
  rep.data["viz.depth_shape"] = {2, 2};
  const auto files = plot_reports({rep}, dir.path, {"drivable", "car"}, 20.0, 30.0);
  REQUIRE(files.size() == 2);
  for (const auto& f : files) REQUIRE(fs::file_size(f) > 100);
}
