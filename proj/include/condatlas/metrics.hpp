#pragma once

// Evaluation suite: Jacobian determinant, deformation norm, EFC, DSC, HD95,
// and the per-subject / aggregate / per-bin reports built from them.

#include <condatlas/config.hpp>
#include <condatlas/csv.hpp>
#include <condatlas/dataset.hpp>
#include <condatlas/nets.hpp>
#include <condatlas/volume.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <tuple>
#include <vector>

namespace condatlas {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Jacobian determinant of phi = id + u, voxel units.

/// Central differences inside, one-sided at the faces (zero along axes of extent 1).
inline Volume3D jacobian_det(const VectorField3D& u) {
  const Dims d = u.dims;
  Volume3D out(d, u.spacing, 0.0, false);
  auto deriv = [&](int comp, int axis, int x, int y, int z) {
    const int n = d[axis];
    if (n == 1) return 0.0;
    int c[3] = {x, y, z};
    const int i = c[axis];
    int lo = i - 1, hi = i + 1;
    double h = 2.0;
    if (i == 0) {
      lo = 0;
      h = 1.0;
    } else if (i == n - 1) {
      hi = n - 1;
      h = 1.0;
    }
    int a[3] = {x, y, z}, b[3] = {x, y, z};
    a[axis] = hi;
    b[axis] = lo;
    return (u.at(comp, d.index(a[0], a[1], a[2])) - u.at(comp, d.index(b[0], b[1], b[2]))) / h;
  };
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        double j[3][3];
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c) j[r][c] = (r == c ? 1.0 : 0.0) + deriv(r, c, x, y, z);
        out.at(x, y, z) = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                          j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                          j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
      }
  return out;
}

inline bool is_interior(Dims d, int x, int y, int z) {
  return x > 0 && y > 0 && z > 0 && x < d.nx - 1 && y < d.ny - 1 && z < d.nz - 1;
}

struct JacobianStats {
  double positive_fraction = kNaN;  // interior voxels with det > 0
  double mean = kNaN;               // interior mean determinant
  double min = kNaN;
};

inline JacobianStats jacobian_stats(const Volume3D& det) {
  const Dims d = det.dims;
  double pos = 0.0, sum = 0.0, mn = std::numeric_limits<double>::infinity();
  std::size_t n = 0;
  for (int z = 1; z < d.nz - 1; ++z)
    for (int y = 1; y < d.ny - 1; ++y)
      for (int x = 1; x < d.nx - 1; ++x) {
        const double v = det.at(x, y, z);
        pos += v > 0.0 ? 1.0 : 0.0;
        sum += v;
        mn = std::min(mn, v);
        ++n;
      }
  if (n == 0) return {};
  return {pos / static_cast<double>(n), sum / static_cast<double>(n), mn};
}

// ---------------------------------------------------------------------------
// Deformation norm

/// Sum over voxels of |u(x)|, voxel units.
inline double deformation_norm(const VectorField3D& u) {
  const std::size_t n = u.dims.voxels();
  double s = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    const double a = u.at(0, v), b = u.at(1, v), c = u.at(2, v);
    s += std::sqrt(a * a + b * b + c * c);
  }
  return s;
}

inline double deformation_norm_mean(const VectorField3D& u) {
  return deformation_norm(u) / static_cast<double>(u.dims.voxels());
}

// ---------------------------------------------------------------------------
// Entropy focus criterion

inline constexpr double kEfcEpsilon = 1e-12;

/// In [0, 1]; 0 for a single bright voxel, 1 for a uniform image. The
/// reference intensity is the Euclidean norm of the image. NaN for an
/// all-zero image.
inline double efc(const Volume3D& img) {
  const double n = static_cast<double>(img.data.size());
  double ss = 0.0;
  for (double x : img.data) ss += x * x;
  const double xmax = std::sqrt(ss);
  if (!(xmax > 0.0)) return kNaN;
  double e = 0.0;
  for (double x : img.data) {
    const double r = x / xmax;
    e += r * std::log(r + kEfcEpsilon);
  }
  const double emax = n / std::sqrt(n) * std::log(1.0 / std::sqrt(n));
  if (emax == 0.0) return 0.0;  // single-voxel image
  return e / emax;
}

// ---------------------------------------------------------------------------
// Overlap and surface distance, per tissue (channels 1..6).

struct PerLabel {
  std::array<double, kNumTissues> value{};
  double mean = kNaN;  // over defined (non-NaN) labels
};

inline double nan_mean(const std::array<double, kNumTissues>& v) {
  double s = 0.0;
  int n = 0;
  for (double x : v) {
    if (!std::isnan(x)) {
      s += x;
      ++n;
    }
  }
  return n ? s / n : kNaN;
}

inline void check_same_grid(const OneHotLabelMap& a, const OneHotLabelMap& b) {
  if (!(a.dims == b.dims)) throw std::invalid_argument("label maps differ in dims");
}

/// 2|P and T| / (|P| + |T|) on hard labels; NaN where the label is absent from both.
inline PerLabel dsc(const OneHotLabelMap& pred, const OneHotLabelMap& truth) {
  check_same_grid(pred, truth);
  const auto p = label_indices(pred), t = label_indices(truth);
  std::array<double, kNumClasses> np{}, nt{}, ni{};
  for (std::size_t v = 0; v < p.size(); ++v) {
    np[p[v]] += 1;
    nt[t[v]] += 1;
    if (p[v] == t[v]) ni[p[v]] += 1;
  }
  PerLabel out;
  for (int c = 1; c < kNumClasses; ++c) {
    const double den = np[c] + nt[c];
    out.value[c - 1] = den > 0 ? 2.0 * ni[c] / den : kNaN;
  }
  out.mean = nan_mean(out.value);
  return out;
}

/// Label voxels with at least one 6-neighbour outside the label (grid
/// exterior counts as outside), as voxel coordinates.
inline std::vector<std::array<int, 3>> surface_voxels(const std::vector<int>& labels, Dims d, int label) {
  std::vector<std::array<int, 3>> out;
  auto inside = [&](int x, int y, int z) {
    if (x < 0 || y < 0 || z < 0 || x >= d.nx || y >= d.ny || z >= d.nz) return false;
    return labels[d.index(x, y, z)] == label;
  };
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        if (!inside(x, y, z)) continue;
        if (!inside(x - 1, y, z) || !inside(x + 1, y, z) || !inside(x, y - 1, z) || !inside(x, y + 1, z) ||
            !inside(x, y, z - 1) || !inside(x, y, z + 1)) {
          out.push_back({x, y, z});
        }
      }
  return out;
}

/// Linear-interpolation percentile (q in [0, 100]) of an unsorted sample.
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return v[lo] + f * (v[hi] - v[lo]);
}

/// Directed nearest-surface distances (mm) from each voxel in `from` to `to`.
inline std::vector<double> surface_distances(const std::vector<std::array<int, 3>>& from,
                                             const std::vector<std::array<int, 3>>& to, Spacing s) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : to) {
      const double dx = (a[0] - b[0]) * s.sx, dy = (a[1] - b[1]) * s.sy, dz = (a[2] - b[2]) * s.sz;
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

/// 95th percentile of the pooled directed surface distances in both
/// directions, in mm. NaN where the label is empty on either side.
inline PerLabel hd95(const OneHotLabelMap& pred, const OneHotLabelMap& truth, Spacing spacing) {
  check_same_grid(pred, truth);
  const auto p = label_indices(pred), t = label_indices(truth);
  PerLabel out;
  for (int c = 1; c < kNumClasses; ++c) {
    const auto sp = surface_voxels(p, pred.dims, c);
    const auto st = surface_voxels(t, truth.dims, c);
    if (sp.empty() || st.empty()) {
      out.value[c - 1] = kNaN;
      continue;
    }
    auto d = surface_distances(sp, st, spacing);
    const auto back = surface_distances(st, sp, spacing);
    d.insert(d.end(), back.begin(), back.end());
    out.value[c - 1] = percentile(std::move(d), 95.0);
  }
  out.mean = nan_mean(out.value);
  return out;
}

// ---------------------------------------------------------------------------
// Inference path shared by evaluation and the CLI.

struct Registration {
  TemplateOutput atlas;          // generator output at the subject's condition
  VectorField3D velocity;
  VectorField3D displacement;    // phi = id + u maps subject space into template space
  Volume3D warped_template;      // template o phi
  OneHotLabelMap warped_labels;  // hard labels of (template labels o phi)
};

inline Registration register_subject(const ParamStore& ps, const ArchConfig& arch, const Volume3D& subject,
                                     double a_norm) {
  Registration r;
  r.atlas = generate_template(ps, arch, a_norm);
  r.velocity = predict_velocity(ps, arch, r.atlas.image, subject);
  r.displacement = integrate_velocity(r.velocity, arch.int_steps);
  r.warped_template = warp_volume(r.atlas.image, r.displacement);
  r.warped_labels = argmax_labels(warp_labels(r.atlas.labels, r.displacement));
  return r;
}

struct EvalRow {
  std::string subject;
  double a_raw = 0.0;
  JacobianStats jacobian;
  double def_norm = 0.0;
  double def_norm_mean = 0.0;
  double efc = 0.0;  // of the generated template
  PerLabel dsc;
  PerLabel hd95;
  double seconds = 0.0;
};

inline EvalRow evaluate_subject(const std::string& name, double a_raw, const Registration& r,
                                const OneHotLabelMap& truth) {
  EvalRow row;
  row.subject = name;
  row.a_raw = a_raw;
  row.jacobian = jacobian_stats(jacobian_det(r.displacement));
  row.def_norm = deformation_norm(r.displacement);
  row.def_norm_mean = deformation_norm_mean(r.displacement);
  row.efc = efc(r.atlas.image);
  row.dsc = dsc(r.warped_labels, truth);
  row.hd95 = hd95(r.warped_labels, truth, truth.spacing);
  return row;
}

struct EvalReport {
  std::vector<EvalRow> rows;
};

/// Registers every subject of `split` to the template at its condition and
/// scores the warped template labels against the phantom truth.
inline EvalReport evaluate(const ParamStore& ps, const TrainConfig& cfg, const Manifest& m,
                           const std::string& split = "test") {
  EvalReport rep;
  for (const auto& e : m.split(split)) {
    const Subject s = load_subject(m, e);
    if (!(s.image.dims == cfg.arch.dims)) {
      throw std::invalid_argument("subject " + e.path + " has dims " + to_string(s.image.dims) +
                                  ", checkpoint expects " + to_string(cfg.arch.dims));
    }
    const auto t0 = std::chrono::steady_clock::now();
    const Registration r = register_subject(ps, cfg.arch, s.image, e.a_norm);
    EvalRow row = evaluate_subject(e.path, e.a_raw, r, s.labels);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Report files

inline csv::Row report_header() {
  csv::Row h{"subject", "a_raw", "jac_pos_frac", "jac_mean", "jac_min", "def_norm", "def_norm_mean", "efc"};
  for (int c = 1; c < kNumClasses; ++c) h.push_back("dsc_" + std::string(kTissueNames[c]));
  h.push_back("dsc_mean");
  for (int c = 1; c < kNumClasses; ++c) h.push_back("hd95_" + std::string(kTissueNames[c]));
  h.push_back("hd95_mean");
  return h;
}

/// Numeric columns of a report row (everything after subject, a_raw).
inline std::vector<double> report_values(const EvalRow& r) {
  std::vector<double> v{r.jacobian.positive_fraction, r.jacobian.mean, r.jacobian.min, r.def_norm,
                        r.def_norm_mean, r.efc};
  v.insert(v.end(), r.dsc.value.begin(), r.dsc.value.end());
  v.push_back(r.dsc.mean);
  v.insert(v.end(), r.hd95.value.begin(), r.hd95.value.end());
  v.push_back(r.hd95.mean);
  return v;
}

inline csv::Row report_row(const EvalRow& r) {
  csv::Row row{r.subject, csv::format_number(r.a_raw)};
  for (double v : report_values(r)) row.push_back(csv::format_number(v));
  return row;
}

struct Aggregate {
  double mean = kNaN;
  double std = kNaN;  // sample standard deviation
  int n = 0;
};

inline Aggregate aggregate(const std::vector<double>& v) {
  Aggregate a;
  double s = 0.0;
  for (double x : v) {
    if (std::isnan(x)) continue;
    s += x;
    ++a.n;
  }
  if (a.n == 0) return a;
  a.mean = s / a.n;
  double ss = 0.0;
  for (double x : v) {
    if (!std::isnan(x)) ss += (x - a.mean) * (x - a.mean);
  }
  a.std = a.n > 1 ? std::sqrt(ss / (a.n - 1)) : 0.0;
  return a;
}

/// Column-wise mean/std over subjects for every numeric report column.
inline std::vector<std::pair<std::string, Aggregate>> summarize(const EvalReport& rep) {
  const auto header = report_header();
  std::vector<std::pair<std::string, Aggregate>> out;
  std::vector<std::vector<double>> values;
  for (const auto& r : rep.rows) values.push_back(report_values(r));
  for (std::size_t c = 2; c < header.size(); ++c) {
    std::vector<double> col;
    for (const auto& v : values) col.push_back(v[c - 2]);
    out.emplace_back(header[c], aggregate(col));
  }
  return out;
}

/// Mean DSC per (condition bin, tissue).
inline std::vector<std::tuple<long long, int, double>> radar_table(const EvalReport& rep) {
  std::map<long long, std::array<std::vector<double>, kNumTissues>> bins;
  for (const auto& r : rep.rows) {
    auto& b = bins[condition_bin(r.a_raw)];
    for (int l = 0; l < kNumTissues; ++l) b[l].push_back(r.dsc.value[l]);
  }
  std::vector<std::tuple<long long, int, double>> out;
  for (const auto& [bin, labels] : bins) {
    for (int l = 0; l < kNumTissues; ++l) out.emplace_back(bin, l + 1, aggregate(labels[l]).mean);
  }
  return out;
}

inline std::filesystem::path sibling(const std::filesystem::path& p, const std::string& suffix) {
  return p.parent_path() / (p.stem().string() + suffix + p.extension().string());
}

/// Writes <out>, <out stem>_summary.csv and <out stem>_radar.csv.
inline void write_report(const EvalReport& rep, const std::filesystem::path& out) {
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  {
    csv::Writer w(out);
    w.row(report_header());
    for (const auto& r : rep.rows) w.row(report_row(r));
  }
  {
    csv::Writer w(sibling(out, "_summary"));
    w.row({"metric", "mean", "std", "n"});
    for (const auto& [name, a] : summarize(rep)) {
      w.row({name, csv::format_number(a.mean), csv::format_number(a.std), std::to_string(a.n)});
    }
  }
  {
    csv::Writer w(sibling(out, "_radar"));
    w.row({"bin", "label", "dsc"});
    for (const auto& [bin, label, v] : radar_table(rep)) {
      w.row({std::to_string(bin), std::string(kTissueNames[label]), csv::format_number(v)});
    }
  }
}

}  // namespace condatlas
