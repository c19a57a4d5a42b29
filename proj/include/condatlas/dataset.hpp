#pragma once

// Dataset manifest: one CSV row per subject (path, a_raw, a_norm, seed, split).
// `path` names the image volume relative to the manifest's directory; the
// label map sits next to it with the "_img.vvol" suffix replaced by "_lab.vvol".

#include <condatlas/csv.hpp>
#include <condatlas/vvol_io.hpp>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace condatlas {

struct ManifestEntry {
  std::string path;
  double a_raw = 0.0;
  double a_norm = 0.0;
  std::uint64_t seed = 0;
  std::string split;  // "train" or "test"
};

struct Manifest {
  std::filesystem::path root;  // directory holding manifest.csv
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> split(const std::string& which) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
      if (e.split == which) out.push_back(e);
    }
    return out;
  }
};

inline constexpr const char* kManifestName = "manifest.csv";
inline constexpr std::string_view kImageSuffix = "_img.vvol";
inline constexpr std::string_view kLabelSuffix = "_lab.vvol";

inline std::string label_path_for(const std::string& image_path) {
  if (image_path.size() < kImageSuffix.size() ||
      image_path.compare(image_path.size() - kImageSuffix.size(), kImageSuffix.size(), kImageSuffix) != 0) {
    throw std::invalid_argument("image path must end in _img.vvol: " + image_path);
  }
  return image_path.substr(0, image_path.size() - kImageSuffix.size()) + std::string(kLabelSuffix);
}

/// 1-unit condition bin used for balanced sampling and per-bin reports.
inline long long condition_bin(double a_raw) { return static_cast<long long>(std::floor(a_raw)); }

inline void write_manifest(const std::filesystem::path& dir, const std::vector<ManifestEntry>& entries) {
  csv::Writer w(dir / kManifestName);
  w.row({"path", "a_raw", "a_norm", "seed", "split"});
  for (const auto& e : entries) {
    w.row({e.path, csv::format_number(e.a_raw), csv::format_number(e.a_norm), std::to_string(e.seed), e.split});
  }
}

/// Accepts either the dataset directory or the manifest file itself.
inline Manifest read_manifest(const std::filesystem::path& where) {
  const auto file = std::filesystem::is_directory(where) ? where / kManifestName : where;
  csv::Table t(csv::read_file(file));
  Manifest m;
  m.root = file.parent_path();
  for (std::size_t r = 0; r < t.size(); ++r) {
    ManifestEntry e;
    e.path = t.get(r, "path");
    e.a_raw = t.number(r, "a_raw");
    e.a_norm = t.number(r, "a_norm");
    e.seed = std::stoull(t.get(r, "seed"));
    e.split = t.get(r, "split");
    if (e.split != "train" && e.split != "test") throw csv::CsvError("unknown split '" + e.split + "'");
    m.entries.push_back(std::move(e));
  }
  return m;
}

struct Subject {
  ManifestEntry entry;
  Volume3D image;
  OneHotLabelMap labels;
};

inline Subject load_subject(const Manifest& m, const ManifestEntry& e) {
  Subject s;
  s.entry = e;
  s.image = read_image(m.root / e.path);
  s.labels = read_labels(m.root / label_path_for(e.path));
  if (!(s.image.dims == s.labels.dims)) throw std::invalid_argument("image/label dims differ for " + e.path);
  return s;
}

inline std::vector<Subject> load_split(const Manifest& m, const std::string& which) {
  std::vector<Subject> out;
  for (const auto& e : m.split(which)) out.push_back(load_subject(m, e));
  return out;
}

}  // namespace condatlas
