#pragma once

// Label volumetry and polynomial growth trajectories over the condition.

#include <condatlas/config.hpp>
#include <condatlas/csv.hpp>
#include <condatlas/dataset.hpp>
#include <condatlas/metrics.hpp>
#include <condatlas/nets.hpp>

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace condatlas {

/// Hard-label volume of each tissue (channels 1..6) in cm^3.
inline std::array<double, kNumTissues> label_volume(const OneHotLabelMap& m) {
  std::array<double, kNumTissues> counts{};
  const std::size_t n = m.dims.voxels();
  for (std::size_t v = 0; v < n; ++v) {
    const int l = m.label(v);
    if (l > 0) counts[l - 1] += 1.0;
  }
  const double cm3 = m.spacing.voxel_volume_mm3() / 1000.0;
  for (auto& c : counts) c *= cm3;
  return counts;
}

struct TrajectoryPoint {
  double a_raw = 0.0;
  double volume = 0.0;
};

/// Polynomial in the standardized condition z = (a_raw - mean) / std.
struct TrajectoryModel {
  int label = 0;
  int degree = 2;
  std::vector<double> coef;  // in z, lowest order first
  double mean = 0.0;
  double std = 1.0;
  double residual_std = 0.0;

  double predict(double a_raw) const {
    const double z = (a_raw - mean) / std;
    double y = 0.0;
    for (auto it = coef.rbegin(); it != coef.rend(); ++it) y = y * z + *it;
    return y;
  }

  /// Coefficients c0..cd of the same polynomial in a_raw itself.
  std::vector<double> raw_coefficients() const {
    // Expand sum_k b_k ((a - mean) / std)^k with the binomial theorem.
    std::vector<double> out(coef.size(), 0.0);
    for (std::size_t k = 0; k < coef.size(); ++k) {
      const double scale = coef[k] / std::pow(std, static_cast<double>(k));
      double binom = 1.0;
      for (std::size_t j = 0; j <= k; ++j) {
        // term: binom(k, j) a^j (-mean)^(k-j)
        out[j] += scale * binom * std::pow(-mean, static_cast<double>(k - j));
        binom = binom * static_cast<double>(k - j) / static_cast<double>(j + 1);
      }
    }
    return out;
  }
};

/// Least squares through the normal equations on a standardized Vandermonde design.
inline TrajectoryModel fit_trajectory(const std::vector<TrajectoryPoint>& pts, int degree, int label = 0) {
  if (degree < 0) throw std::invalid_argument("trajectory degree must be >= 0");
  if (pts.size() < static_cast<std::size_t>(degree) + 1) {
    throw std::invalid_argument("trajectory fit needs at least " + std::to_string(degree + 1) + " points, got " +
                                std::to_string(pts.size()));
  }
  TrajectoryModel m;
  m.label = label;
  m.degree = degree;
  const auto n = static_cast<Eigen::Index>(pts.size());
  double mean = 0.0;
  for (const auto& p : pts) mean += p.a_raw;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (const auto& p : pts) var += (p.a_raw - mean) * (p.a_raw - mean);
  var /= static_cast<double>(n);
  m.mean = mean;
  m.std = var > 0.0 ? std::sqrt(var) : 1.0;
  if (var == 0.0 && degree > 0) throw std::invalid_argument("trajectory fit: all conditions equal");

  Eigen::MatrixXd a(n, degree + 1);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double z = (pts[i].a_raw - m.mean) / m.std;
    double p = 1.0;
    for (int k = 0; k <= degree; ++k, p *= z) a(i, k) = p;
    y(i) = pts[i].volume;
  }
  const Eigen::MatrixXd ata = a.transpose() * a;
  const Eigen::VectorXd aty = a.transpose() * y;
  const Eigen::VectorXd c = ata.ldlt().solve(aty);
  m.coef.assign(c.data(), c.data() + c.size());
  const Eigen::VectorXd r = y - a * c;
  const auto dof = n - (degree + 1);
  m.residual_std = dof > 0 ? std::sqrt(r.squaredNorm() / static_cast<double>(dof)) : 0.0;
  return m;
}

inline double trajectory_rmse(const TrajectoryModel& m, const std::vector<TrajectoryPoint>& pts) {
  if (pts.empty()) return kNaN;
  double s = 0.0;
  for (const auto& p : pts) {
    const double r = p.volume - m.predict(p.a_raw);
    s += r * r;
  }
  return std::sqrt(s / static_cast<double>(pts.size()));
}

/// Average slope of the fitted curve over [lo, hi] (volume per condition unit).
inline double mean_slope(const TrajectoryModel& m, double lo, double hi) {
  return (m.predict(hi) - m.predict(lo)) / (hi - lo);
}

// ---------------------------------------------------------------------------
// Report

struct LabelSeries {
  std::vector<TrajectoryPoint> train, fit, atlas, test, pred;
};

struct TrajectoryResult {
  int label = 0;
  TrajectoryModel model;
  LabelSeries series;
  double rmse_atlas = kNaN;
  double rmse_pred = kNaN;
  double rmse_test = kNaN;
  double slope = kNaN;
};

inline constexpr int kAtlasSweepSteps = 17;
inline constexpr int kFitCurveSamples = 50;

namespace detail {

inline std::string svg_number(double v) { return csv::format_number(std::round(v * 100.0) / 100.0); }

/// Line plot of the fit plus one marker path per scatter series.
inline std::string trajectory_svg(const TrajectoryResult& r, double lo, double hi) {
  const double w = 480, h = 320, ml = 60, mr = 20, mt = 30, mb = 40;
  double vmin = std::numeric_limits<double>::infinity(), vmax = -vmin;
  for (const auto* s : {&r.series.train, &r.series.fit, &r.series.atlas, &r.series.test, &r.series.pred}) {
    for (const auto& p : *s) {
      vmin = std::min(vmin, p.volume);
      vmax = std::max(vmax, p.volume);
    }
  }
  if (!(vmax > vmin)) {
    vmin -= 1.0;
    vmax += 1.0;
  }
  auto px = [&](double a) { return ml + (a - lo) / (hi - lo) * (w - ml - mr); };
  auto py = [&](double v) { return h - mb - (v - vmin) / (vmax - vmin) * (h - mt - mb); };
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"320\" viewBox=\"0 0 480 320\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"480\" height=\"320\" fill=\"white\"/>\n";
  s += "<text x=\"" + svg_number(ml) + "\" y=\"20\" font-size=\"14\" font-family=\"sans-serif\">" +
       std::string(kTissueNames[r.label]) + " volume (cm3) vs condition</text>\n";
  s += "<line x1=\"" + svg_number(ml) + "\" y1=\"" + svg_number(h - mb) + "\" x2=\"" + svg_number(w - mr) +
       "\" y2=\"" + svg_number(h - mb) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + svg_number(ml) + "\" y1=\"" + svg_number(mt) + "\" x2=\"" + svg_number(ml) + "\" y2=\"" +
       svg_number(h - mb) + "\" stroke=\"black\"/>\n";
  s += "<text x=\"" + svg_number(ml) + "\" y=\"" + svg_number(h - 10) + "\" font-size=\"11\">" + csv::format_number(lo) +
       "</text>\n";
  s += "<text x=\"" + svg_number(w - mr - 20) + "\" y=\"" + svg_number(h - 10) + "\" font-size=\"11\">" +
       csv::format_number(hi) + "</text>\n";

  std::string d;
  for (std::size_t i = 0; i < r.series.fit.size(); ++i) {
    d += (i ? " L " : "M ") + svg_number(px(r.series.fit[i].a_raw)) + " " + svg_number(py(r.series.fit[i].volume));
  }
  s += "<path id=\"fit\" d=\"" + d + "\" fill=\"none\" stroke=\"black\" stroke-width=\"2\"/>\n";

  auto markers = [&](const char* id, const std::vector<TrajectoryPoint>& pts, const char* color, int shape) {
    std::string md;
    for (const auto& p : pts) {
      const double x = px(p.a_raw), y = py(p.volume);
      if (shape == 0) {  // square
        md += "M " + svg_number(x - 3) + " " + svg_number(y - 3) + " h 6 v 6 h -6 Z ";
      } else if (shape == 1) {  // triangle
        md += "M " + svg_number(x) + " " + svg_number(y - 4) + " l 4 7 h -8 Z ";
      } else {  // diamond
        md += "M " + svg_number(x) + " " + svg_number(y - 4) + " l 4 4 l -4 4 l -4 -4 Z ";
      }
    }
    if (md.empty()) md = "M 0 0";
    s += std::string("<path id=\"") + id + "\" d=\"" + md + "\" fill=\"" + color + "\" fill-opacity=\"0.7\"/>\n";
  };
  markers("train", r.series.train, "#999999", 2);
  markers("atlas", r.series.atlas, "#d62728", 0);
  markers("test", r.series.test, "#1f77b4", 1);
  markers("pred", r.series.pred, "#2ca02c", 2);
  s += "</svg>\n";
  return s;
}

}  // namespace detail

/// Fits each tissue's training volumes and compares generated-atlas,
/// test-truth and predicted (warped atlas) volumes against the fit.
inline std::vector<TrajectoryResult> trajectory_analysis(const ParamStore& ps, const TrainConfig& cfg,
                                                         const Manifest& m, int degree = 2) {
  std::vector<TrajectoryResult> out(kNumTissues);
  for (int l = 0; l < kNumTissues; ++l) out[l].label = l + 1;
  for (const auto& e : m.split("train")) {
    const auto vol = label_volume(read_labels(m.root / label_path_for(e.path)));
    for (int l = 0; l < kNumTissues; ++l) out[l].series.train.push_back({e.a_raw, vol[l]});
  }
  for (int i = 0; i < kAtlasSweepSteps; ++i) {
    const double t = static_cast<double>(i) / (kAtlasSweepSteps - 1);
    const double raw = cfg.raw_min + t * (cfg.raw_max - cfg.raw_min);
    const auto vol = label_volume(argmax_labels(generate_template(ps, cfg.arch, t).labels));
    for (int l = 0; l < kNumTissues; ++l) out[l].series.atlas.push_back({raw, vol[l]});
  }
  for (const auto& e : m.split("test")) {
    const Subject s = load_subject(m, e);
    const auto truth = label_volume(s.labels);
    const auto pred = label_volume(register_subject(ps, cfg.arch, s.image, e.a_norm).warped_labels);
    for (int l = 0; l < kNumTissues; ++l) {
      out[l].series.test.push_back({e.a_raw, truth[l]});
      out[l].series.pred.push_back({e.a_raw, pred[l]});
    }
  }
  for (auto& r : out) {
    r.model = fit_trajectory(r.series.train, degree, r.label);
    for (int i = 0; i < kFitCurveSamples; ++i) {
      const double a = cfg.raw_min + (cfg.raw_max - cfg.raw_min) * i / (kFitCurveSamples - 1);
      r.series.fit.push_back({a, r.model.predict(a)});
    }
    r.rmse_atlas = trajectory_rmse(r.model, r.series.atlas);
    r.rmse_pred = trajectory_rmse(r.model, r.series.pred);
    r.rmse_test = trajectory_rmse(r.model, r.series.test);
    r.slope = mean_slope(r.model, cfg.raw_min, cfg.raw_max);
  }
  return out;
}

/// Writes trajectory.csv (label, series, a_raw, volume_cm3),
/// trajectory_summary.csv and one trajectory_<label>.svg per tissue.
inline void write_trajectory_report(const std::vector<TrajectoryResult>& results, const TrainConfig& cfg,
                                    const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    csv::Writer w(dir / "trajectory.csv");
    w.row({"label", "series", "a_raw", "volume_cm3"});
    for (const auto& r : results) {
      const std::string name(kTissueNames[r.label]);
      auto dump = [&](const char* series, const std::vector<TrajectoryPoint>& pts) {
        for (const auto& p : pts) w.row({name, series, csv::format_number(p.a_raw), csv::format_number(p.volume)});
      };
      dump("train", r.series.train);
      dump("fit", r.series.fit);
      dump("atlas", r.series.atlas);
      dump("test", r.series.test);
      dump("pred", r.series.pred);
    }
  }
  {
    csv::Writer w(dir / "trajectory_summary.csv");
    csv::Row h{"label", "degree"};
    for (int k = 0; k <= 4; ++k) h.push_back("c" + std::to_string(k));
    for (const char* c : {"residual_std", "mean_slope", "rmse_atlas", "rmse_test", "rmse_pred"}) h.push_back(c);
    w.row(h);
    for (const auto& r : results) {
      csv::Row row{std::string(kTissueNames[r.label]), std::to_string(r.model.degree)};
      const auto c = r.model.raw_coefficients();
      for (std::size_t k = 0; k <= 4; ++k) row.push_back(k < c.size() ? csv::format_number(c[k]) : "");
      for (double v : {r.model.residual_std, r.slope, r.rmse_atlas, r.rmse_test, r.rmse_pred}) {
        row.push_back(csv::format_number(v));
      }
      w.row(row);
    }
  }
  for (const auto& r : results) {
    std::ofstream os(dir / ("trajectory_" + std::string(kTissueNames[r.label]) + ".svg"), std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write SVG in " + dir.string());
    os << detail::trajectory_svg(r, cfg.raw_min, cfg.raw_max);
  }
}

}  // namespace condatlas
