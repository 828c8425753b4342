// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sdbev/metrics.hpp"

namespace sdbev {

// Deterministic SVG figure emission: BEV overlays, detection overlays, depth
// maps, extrinsic-noise degradation curves and the camera-drop radar.

struct PlotError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Fixed BEV overlay palette: vehicles blue, drivable area orange, lanes cyan.
inline constexpr const char* kColorVehicle = "#4472c4";
inline constexpr const char* kColorDrivable = "#ed7d31";
inline constexpr const char* kColorLane = "#2ec8d8";

inline std::string bev_class_color(const std::string& name) {
  if (name == "drivable") return kColorDrivable;
  if (name == "lane") return kColorLane;
  if (name == "car" || name == "vehicle") return kColorVehicle;
  if (name == "pedestrian") return "#d62728";
  if (name == "cyclist") return "#9467bd";
  return "#7f7f7f";
}

namespace plot_detail {

class Svg {
 public:
  Svg(double w, double h) : w_(w), h_(h) {
    out_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
         << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
    out_ << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  }

  void rect(double x, double y, double w, double h, const std::string& fill,
            double opacity = 1.0, const std::string& stroke = "none") {
    out_ << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h
         << "\" fill=\"" << fill << "\" fill-opacity=\"" << opacity << "\" stroke=\"" << stroke
         << "\"/>\n";
  }

  void line(double x1, double y1, double x2, double y2, const std::string& stroke,
            double width = 1.0) {
    out_ << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2
         << "\" stroke=\"" << stroke << "\" stroke-width=\"" << width << "\"/>\n";
  }

  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke,
                double width = 1.5) {
    out_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"" << width
         << "\" points=\"";
    for (const auto& [x, y] : pts) out_ << x << "," << y << " ";
    out_ << "\"/>\n";
  }

  void polygon(const std::vector<std::pair<double, double>>& pts, const std::string& fill,
               double opacity, const std::string& stroke) {
    out_ << "<polygon fill=\"" << fill << "\" fill-opacity=\"" << opacity << "\" stroke=\""
         << stroke << "\" points=\"";
    for (const auto& [x, y] : pts) out_ << x << "," << y << " ";
    out_ << "\"/>\n";
  }

  void circle(double x, double y, double r, const std::string& fill) {
    out_ << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"" << r << "\" fill=\"" << fill
         << "\"/>\n";
  }

  void text(double x, double y, const std::string& s, int size = 11) {
    out_ << "<text x=\"" << x << "\" y=\"" << y << "\" font-family=\"sans-serif\" font-size=\""
         << size << "\">" << s << "</text>\n";
  }

  void save(const std::filesystem::path& path) {
    out_ << "</svg>\n";
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw PlotError("cannot write " + path.string());
    f << out_.str();
  }

 private:
  double w_, h_;
  std::ostringstream out_;
};

inline double require(const EvalReport& r, const std::string& key) {
  if (!r.has(key)) throw PlotError("report missing field: " + key);
  return r.get(key);
}

}  // namespace plot_detail

/// Degradation curve over an extrinsic-noise sweep: one polyline per metric,
/// points sorted by noise magnitude.
inline void plot_noise_curve(std::vector<EvalReport> reports, const std::filesystem::path& file) {
  using plot_detail::require;
  for (const auto& r : reports) {
    if (!r.has("meta.perturbation.sigma_rot"))
      throw PlotError("report missing field: meta.perturbation.sigma_rot");
    if (!r.has("meta.perturbation.sigma_trans"))
      throw PlotError("report missing field: meta.perturbation.sigma_trans");
  }
  std::sort(reports.begin(), reports.end(), [](const EvalReport& a, const EvalReport& b) {
    return a.get("meta.perturbation.sigma_rot") + a.get("meta.perturbation.sigma_trans") <
           b.get("meta.perturbation.sigma_rot") + b.get("meta.perturbation.sigma_trans");
  });
  const double W = 480, H = 320, mx = 56, my = 36;
  plot_detail::Svg svg(W, H);
  svg.line(mx, H - my, W - 16, H - my, "#333");
  svg.line(mx, H - my, mx, 16, "#333");
  svg.text(W / 2 - 40, H - 8, "noise level (sorted)");
  svg.text(8, 14, "metric");
  const char* metrics[2] = {"nds", "map"};
  const char* colors[2] = {"#1f77b4", "#d62728"};
  const int n = static_cast<int>(reports.size());
  for (int mi = 0; mi < 2; ++mi) {
    std::vector<std::pair<double, double>> pts;
    for (int i = 0; i < n; ++i) {
      const double v = require(reports[static_cast<size_t>(i)], metrics[mi]);
      const double x = mx + (W - mx - 24) * (n == 1 ? 0.0 : double(i) / (n - 1));
      const double y = (H - my) - (H - my - 24) * std::min(1.0, std::max(0.0, v));
      pts.push_back({x, y});
      svg.circle(x, y, 2.5, colors[mi]);
    }
    svg.polyline(pts, colors[mi]);
    svg.text(W - 70, 20 + 14 * mi, metrics[mi]);
    svg.rect(W - 84, 12 + 14 * mi, 10, 8, colors[mi]);
  }
  svg.save(file);
}

/// Camera-drop radar: one spoke per metric, a polygon per report.
inline void plot_camdrop_radar(const std::vector<EvalReport>& reports,
                               const std::filesystem::path& file) {
  const std::vector<std::string> axes{"nds", "map", "tp.ate", "tp.aoe", "tp.aae"};
  const double W = 420, H = 420, cx = W / 2, cy = H / 2, R = 150;
  plot_detail::Svg svg(W, H);
  for (size_t a = 0; a < axes.size(); ++a) {
    const double ang = 2.0 * M_PI * a / axes.size() - M_PI / 2;
    svg.line(cx, cy, cx + R * std::cos(ang), cy + R * std::sin(ang), "#bbb");
    svg.text(cx + (R + 10) * std::cos(ang) - 14, cy + (R + 10) * std::sin(ang), axes[a], 10);
  }
  const char* colors[6] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  for (size_t ri = 0; ri < reports.size(); ++ri) {
    std::vector<std::pair<double, double>> pts;
    for (size_t a = 0; a < axes.size(); ++a) {
      double v = plot_detail::require(reports[ri], axes[a]);
      if (axes[a].rfind("tp.", 0) == 0) v = 1.0 - std::min(1.0, v);  // errors: closer is worse
      const double ang = 2.0 * M_PI * a / axes.size() - M_PI / 2;
      pts.push_back({cx + R * v * std::cos(ang), cy + R * v * std::sin(ang)});
    }
    pts.push_back(pts.front());
    svg.polygon(pts, colors[ri % 6], 0.15, colors[ri % 6]);
  }
  svg.save(file);
}

/// BEV overlay: predicted cells filled with the class palette over ground
/// truth outlines.
inline void plot_bev_overlay(const EvalReport& rep, int sample_idx,
                             const std::vector<std::string>& class_names,
                             const std::filesystem::path& file) {
  const std::string pk = "viz.bev_pred." + std::to_string(sample_idx);
  const std::string gk = "viz.bev_gt." + std::to_string(sample_idx);
  if (!rep.data.contains(pk)) throw PlotError("report missing field: " + pk);
  if (!rep.data.contains(gk)) throw PlotError("report missing field: " + gk);
  if (!rep.data.contains("viz.bev_shape")) throw PlotError("report missing field: viz.bev_shape");
  const auto shape = rep.data["viz.bev_shape"].get<std::vector<int>>();
  const int C = shape[0], Hb = shape[1], Wb = shape[2];
  const auto pred = rep.data[pk].get<std::vector<double>>();
  const auto gt = rep.data[gk].get<std::vector<int>>();
  const double cell = 8.0;
  plot_detail::Svg svg(Wb * cell, Hb * cell);
  for (int c = 0; c < C; ++c) {
    const std::string color = bev_class_color(class_names[static_cast<size_t>(c)]);
    for (int y = 0; y < Hb; ++y)
      for (int x = 0; x < Wb; ++x) {
        const size_t i = (static_cast<size_t>(c) * Hb + y) * Wb + x;
        if (gt[i]) svg.rect(x * cell, y * cell, cell, cell, "none", 1.0, color);
        if (pred[i] >= 0.5) svg.rect(x * cell, y * cell, cell, cell, color, 0.55);
      }
  }
  svg.save(file);
}

/// Detection overlay: predicted BEV rectangles over ground truth, ego at the
/// image center.
inline void plot_det_overlay(const EvalReport& rep, int sample_idx, double range,
                             const std::filesystem::path& file, double min_score = 0.3) {
  const std::string pk = "viz.det_pred." + std::to_string(sample_idx);
  const std::string gk = "viz.det_gt." + std::to_string(sample_idx);
  if (!rep.data.contains(pk)) throw PlotError("report missing field: " + pk);
  if (!rep.data.contains(gk)) throw PlotError("report missing field: " + gk);
  const double W = 480;
  const double scale = W / (2.0 * range);
  plot_detail::Svg svg(W, W);
  auto draw = [&](const nlohmann::json& boxes, bool pred) {
    for (const auto& b : boxes) {
      const double x = b[0].get<double>(), y = b[1].get<double>();
      const double bw = b[2].get<double>(), bl = b[3].get<double>(), yaw = b[4].get<double>();
      const int cls = static_cast<int>(b[5].get<double>());
      const double score = b[6].get<double>();
      if (pred && score < min_score) continue;
      const double c = std::cos(yaw), s = std::sin(yaw);
      std::vector<std::pair<double, double>> pts;
      const double dx[4] = {bl / 2, bl / 2, -bl / 2, -bl / 2};
      const double dy[4] = {bw / 2, -bw / 2, -bw / 2, bw / 2};
      for (int k = 0; k < 4; ++k) {
        const double px = x + c * dx[k] - s * dy[k];
        const double py = y + s * dx[k] + c * dy[k];
        pts.push_back({W / 2 + px * scale, W / 2 - py * scale});
      }
      pts.push_back(pts.front());
      const std::string color =
          bev_class_color(class_specs()[static_cast<size_t>(cls % 3)].name);
      if (pred)
        svg.polygon(pts, color, 0.35, color);
      else
        svg.polygon(pts, "none", 0.0, "#222");
    }
  };
  draw(rep.data[gk], false);
  draw(rep.data[pk], true);
  svg.circle(W / 2, W / 2, 3, "#000");
  svg.save(file);
}

/// Grayscale depth map of view 0 at label resolution.
inline void plot_depth_map(const EvalReport& rep, int sample_idx, double depth_max,
                           const std::filesystem::path& file) {
  const std::string dk = "viz.depth_pred." + std::to_string(sample_idx);
  if (!rep.data.contains(dk)) throw PlotError("report missing field: " + dk);
  if (!rep.data.contains("viz.depth_shape"))
    throw PlotError("report missing field: viz.depth_shape");
  const auto shape = rep.data["viz.depth_shape"].get<std::vector<int>>();
  const int h = shape[0], w = shape[1];
  const auto depth = rep.data[dk].get<std::vector<double>>();
  const double cell = 24.0;
  plot_detail::Svg svg(w * cell, h * cell);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int v = static_cast<int>(
          255.0 * std::min(1.0, std::max(0.0, 1.0 - depth[static_cast<size_t>(y) * w + x] / depth_max)));
      char color[8];
      std::snprintf(color, sizeof(color), "#%02x%02x%02x", v, v, v);
      svg.rect(x * cell, y * cell, cell, cell, color);
    }
  svg.save(file);
}

/// Renders every figure the given reports support. Reports are grouped by
/// their perturbation metadata; an empty input produces no files.
inline std::vector<std::filesystem::path> plot_reports(const std::vector<EvalReport>& reports,
                                                       const std::filesystem::path& out_dir,
                                                       const std::vector<std::string>& bev_classes,
                                                       double range, double depth_max) {
  std::vector<std::filesystem::path> files;
  if (reports.empty()) return files;
  std::filesystem::create_directories(out_dir);

  std::vector<EvalReport> noise, drops;
  for (const auto& r : reports) {
    const std::string kind =
        r.data.contains("meta.perturbation.kind") ? r.data["meta.perturbation.kind"] : "none";
    if (kind == "extrinsic_noise") {
      noise.push_back(r);
    } else if (kind == "none" && r.has("nds")) {
      // Unperturbed baselines join the sweep as its zero-noise point.
      EvalReport zero = r;
      zero.data["meta.perturbation.sigma_rot"] = 0.0;
      zero.data["meta.perturbation.sigma_trans"] = 0.0;
      noise.push_back(std::move(zero));
    }
    if (kind == "camera_drop" || kind == "none") drops.push_back(r);
  }
  const bool has_noise_sweep =
      std::count_if(noise.begin(), noise.end(), [](const EvalReport& r) {
        return r.data.value("meta.perturbation.kind", "none") == std::string("extrinsic_noise");
      }) > 0;
  if (has_noise_sweep && noise.size() >= 2) {
    const auto f = out_dir / "noise_degradation.svg";
    plot_noise_curve(noise, f);
    files.push_back(f);
  }
  const bool has_drop = std::count_if(drops.begin(), drops.end(), [](const EvalReport& r) {
                          return r.data.value("meta.perturbation.kind", "none") ==
                                 std::string("camera_drop");
                        }) > 0;
  if (has_drop) {
    std::vector<EvalReport> with_nds;
    for (const auto& r : drops)
      if (r.has("nds")) with_nds.push_back(r);
    if (!with_nds.empty()) {
      const auto f = out_dir / "camdrop_radar.svg";
      plot_camdrop_radar(with_nds, f);
      files.push_back(f);
    }
  }
  for (size_t ri = 0; ri < reports.size(); ++ri) {
    const EvalReport& r = reports[ri];
    for (int si = 0; si < 4; ++si) {
      if (r.data.contains("viz.bev_pred." + std::to_string(si))) {
        const auto f = out_dir / ("bev_overlay_r" + std::to_string(ri) + "_s" +
                                  std::to_string(si) + ".svg");
        plot_bev_overlay(r, si, bev_classes, f);
        files.push_back(f);
      }
      if (r.data.contains("viz.det_pred." + std::to_string(si))) {
        const auto f = out_dir / ("det_overlay_r" + std::to_string(ri) + "_s" +
                                  std::to_string(si) + ".svg");
        plot_det_overlay(r, si, range, f);
        files.push_back(f);
      }
      if (r.data.contains("viz.depth_pred." + std::to_string(si))) {
        const auto f = out_dir / ("depth_r" + std::to_string(ri) + "_s" + std::to_string(si) +
                                  ".svg");
        plot_depth_map(r, si, depth_max, f);
        files.push_back(f);
      }
    }
  }
  return files;
}

}  // namespace sdbev
