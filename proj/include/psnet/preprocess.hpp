#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "psnet/common.hpp"
#include "psnet/csv.hpp"
#include "psnet/nifti.hpp"
#include "psnet/volume.hpp"

namespace psnet {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Controls the per-case preprocessing chain. The registration, bias-field
/// and skull-strip stages are external command templates ({input}/{output}
/// placeholders) so clinical data can run the full chain while synthetic,
/// pre-aligned data skips it.
struct PreprocessConfig {
  std::optional<std::string> registration_command;
  std::optional<std::string> bias_correction_command;
  std::optional<std::string> skull_strip_command;
  std::optional<std::string> brain_mask_path;  // shared atlas-space mask
  double normalization_epsilon = 1e-8;
  bool smooth_training_masks = false;
  bool crop_to_brain_bbox = true;
  bool store_half_precision = false;
};

// ---------------------------------------------------------------------------
// Case loading

inline const std::array<const char*, kNumChannels>& channel_file_stems() {
  // filename -> canonical channel order (preT1, postT1, T2, FLAIR)
  static const std::array<const char*, kNumChannels> v = {"t1", "t1gd", "t2",
                                                          "flair"};
  return v;
}

inline std::optional<std::string> find_volume_file(const fs::path& dir,
                                                   const std::string& stem) {
  for (const char* ext : {".nii", ".nii.gz"}) {
    fs::path p = dir / (stem + ext);
    if (fs::exists(p)) return p.string();
  }
  return std::nullopt;
}

/// Labels CSV row: case_id,idh,codeletion,grade with empty cells = unknown.
struct LabelsRow {
  std::string case_id;
  std::optional<std::string> idh, codeletion, grade;
};

inline std::map<std::string, LabelsRow> read_labels_csv(
    const std::string& path) {
  CsvTable t = read_csv(path);
  int c_id = t.require_column("case_id", path);
  int c_idh = t.require_column("idh", path);
  int c_codel = t.require_column("codeletion", path);
  int c_grade = t.require_column("grade", path);
  std::map<std::string, LabelsRow> rows;
  for (const auto& r : t.rows) {
    LabelsRow row;
    row.case_id = r[c_id];
    auto cell = [&](int c) -> std::optional<std::string> {
      std::string v = trim(r[c]);
      if (v.empty()) return std::nullopt;
      return v;
    };
    row.idh = cell(c_idh);
    row.codeletion = cell(c_codel);
    row.grade = cell(c_grade);
    rows[row.case_id] = row;
  }
  return rows;
}

/// Load one case directory (t1/t1gd/t2/flair volumes, optional seg) and its
/// labels row. Missing channels are reported by name.
inline Case load_case(const std::string& dir_path, const LabelsRow& labels) {
  fs::path dir(dir_path);
  if (!fs::is_directory(dir))
    throw DataError("case directory '" + dir_path + "' does not exist");
  Case c;
  c.case_id = labels.case_id.empty() ? dir.filename().string() : labels.case_id;
  std::vector<std::string> missing;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    auto p = find_volume_file(dir, channel_file_stems()[ch]);
    if (!p) {
      missing.push_back(channel_names()[ch]);
      continue;
    }
    c.channels[ch] = read_nifti(*p, VolumeKind::intensity);
  }
  if (!missing.empty()) {
    std::string names;
    for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
    throw DataError("case '" + c.case_id + "' is missing channel file(s): " +
                    names);
  }
  std::map<std::string, std::optional<std::string>> raw;
  raw["idh"] = labels.idh;
  raw["codeletion"] = labels.codeletion;
  raw["grade"] = labels.grade;
  c.labels = encode_labelset(raw);
  if (auto p = find_volume_file(dir, "seg")) {
    VolumeGrid seg = read_nifti(*p, VolumeKind::intensity);
    c.segmentation = seg;  // may be multi-label; collapsed later
    c.segmentation_source = SegSource::manual;
  } else {
    c.segmentation_source = SegSource::none;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Preprocessing operations

struct NormalizeResult {
  VolumeGrid volume;
  bool degenerate = false;  // constant image inside the mask
};

/// Zero-mean/unit-std within the brain mask; voxels outside the mask are set
/// to the minimum normalized in-mask value. A constant in-mask image maps to
/// all zeros with the degenerate flag set.
inline NormalizeResult normalize_in_mask(const VolumeGrid& volume,
                                         const VolumeGrid& mask,
                                         double eps = 1e-8) {
  if (!volume.values.same_shape(mask.values))
    throw DataError("normalize_in_mask: volume and mask shapes differ");
  size_t n = volume.voxels();
  double sum = 0.0, count = 0.0;
  for (size_t i = 0; i < n; ++i)
    if (mask.values[i] != 0.f) {
      sum += volume.values[i];
      count += 1.0;
    }
  if (count == 0.0) throw DataError("normalize_in_mask: empty brain mask");
  double mean = sum / count;
  double ss = 0.0;
  for (size_t i = 0; i < n; ++i)
    if (mask.values[i] != 0.f) {
      double d = volume.values[i] - mean;
      ss += d * d;
    }
  double std = std::sqrt(ss / count);
  NormalizeResult res;
  res.volume = volume;
  if (std <= eps) {
    res.degenerate = true;
    res.volume.values.fill(0.f);
    return res;
  }
  float min_in = 0.f;
  bool first = true;
  for (size_t i = 0; i < n; ++i)
    if (mask.values[i] != 0.f) {
      float v = static_cast<float>((volume.values[i] - mean) / std);
      res.volume.values[i] = v;
      if (first || v < min_in) {
        min_in = v;
        first = false;
      }
    }
  for (size_t i = 0; i < n; ++i)
    if (mask.values[i] == 0.f) res.volume.values[i] = min_in;
  return res;
}

struct CropOffset {
  std::array<int, 3> lo{0, 0, 0};
  std::array<int, 3> shape{0, 0, 0};           // cropped shape
  std::array<int, 3> original_shape{0, 0, 0};  // for uncropping
};

inline CropOffset mask_bounding_box(const VolumeGrid& mask) {
  CropOffset off;
  off.original_shape = {mask.nx(), mask.ny(), mask.nz()};
  int lo[3] = {mask.nx(), mask.ny(), mask.nz()};
  int hi[3] = {-1, -1, -1};
  for (int x = 0; x < mask.nx(); ++x)
    for (int y = 0; y < mask.ny(); ++y)
      for (int z = 0; z < mask.nz(); ++z)
        if (mask.values.at(x, y, z) != 0.f) {
          int c[3] = {x, y, z};
          for (int i = 0; i < 3; ++i) {
            lo[i] = std::min(lo[i], c[i]);
            hi[i] = std::max(hi[i], c[i]);
          }
        }
  if (hi[0] < 0) throw DataError("crop_to_mask_bbox: empty mask");
  for (int i = 0; i < 3; ++i) {
    off.lo[i] = lo[i];
    off.shape[i] = hi[i] - lo[i] + 1;
  }
  return off;
}

inline VolumeGrid crop_volume(const VolumeGrid& v, const CropOffset& off) {
  VolumeGrid out(off.shape[0], off.shape[1], off.shape[2], v.kind);
  out.spacing = v.spacing;
  for (int x = 0; x < off.shape[0]; ++x)
    for (int y = 0; y < off.shape[1]; ++y)
      for (int z = 0; z < off.shape[2]; ++z)
        out.values.at(x, y, z) =
            v.values.at(x + off.lo[0], y + off.lo[1], z + off.lo[2]);
  return out;
}

/// Tight bounding-box crop of all volumes around the mask; the returned
/// offset maps cropped coordinates back into the original frame.
inline std::pair<std::vector<VolumeGrid>, CropOffset> crop_to_mask_bbox(
    const std::vector<VolumeGrid>& volumes, const VolumeGrid& mask) {
  for (const auto& v : volumes)
    if (!v.values.same_shape(mask.values))
      throw DataError("crop_to_mask_bbox: volume/mask shape mismatch");
  CropOffset off = mask_bounding_box(mask);
  std::vector<VolumeGrid> out;
  out.reserve(volumes.size());
  for (const auto& v : volumes) out.push_back(crop_volume(v, off));
  return {out, off};
}

/// Place a cropped volume back into the original frame (zero background).
inline VolumeGrid uncrop_volume(const VolumeGrid& v, const CropOffset& off) {
  VolumeGrid out(off.original_shape[0], off.original_shape[1],
                 off.original_shape[2], v.kind);
  out.spacing = v.spacing;
  for (int x = 0; x < v.nx(); ++x)
    for (int y = 0; y < v.ny(); ++y)
      for (int z = 0; z < v.nz(); ++z)
        out.values.at(x + off.lo[0], y + off.lo[1], z + off.lo[2]) =
            v.values.at(x, y, z);
  return out;
}

/// 3x3x3 median filter on a binary mask, zero-padded at the borders. For
/// binary data the median of 27 equals a majority vote (>= 14 ones).
inline VolumeGrid median_smooth_mask(const VolumeGrid& mask) {
  VolumeGrid out = mask;
  const int nx = mask.nx(), ny = mask.ny(), nz = mask.nz();
  for (int x = 0; x < nx; ++x)
    for (int y = 0; y < ny; ++y)
      for (int z = 0; z < nz; ++z) {
        int ones = 0;
        for (int dx = -1; dx <= 1; ++dx)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dz = -1; dz <= 1; ++dz) {
              int X = x + dx, Y = y + dy, Z = z + dz;
              if (X < 0 || Y < 0 || Z < 0 || X >= nx || Y >= ny || Z >= nz)
                continue;  // zero padding contributes zeros
              if (mask.values.at(X, Y, Z) != 0.f) ++ones;
            }
        out.values.at(x, y, z) = ones >= 14 ? 1.f : 0.f;
      }
  out.kind = VolumeKind::binary_mask;
  return out;
}

/// Collapse a multi-label segmentation into a single whole-tumor mask.
inline VolumeGrid collapse_labels(const VolumeGrid& multilabel) {
  VolumeGrid out = multilabel;
  out.kind = VolumeKind::binary_mask;
  for (size_t i = 0; i < out.values.size(); ++i)
    out.values[i] = multilabel.values[i] > 0.f ? 1.f : 0.f;
  return out;
}

// ---------------------------------------------------------------------------
// External stages

/// Run one external stage command template with {input}/{output} substituted.
inline void run_external_stage(const std::string& command_template,
                               const std::string& input,
                               const std::string& output) {
  std::string cmd = command_template;
  auto replace_all = [&](const std::string& from, const std::string& to) {
    size_t pos = 0;
    while ((pos = cmd.find(from, pos)) != std::string::npos) {
      cmd.replace(pos, from.size(), to);
      pos += to.size();
    }
  };
  replace_all("{input}", input);
  replace_all("{output}", output);
  int rc = std::system(cmd.c_str());
  if (rc != 0)
    throw DataError("external stage failed (exit " + std::to_string(rc) +
                    "): " + cmd);
}

// ---------------------------------------------------------------------------
// Preprocessed case bundles: raw tensor container + JSON manifest sidecar.

struct CaseBundle {
  std::string case_id;
  std::array<VolumeGrid, kNumChannels> channels;  // normalized, cropped
  LabelSet labels;
  std::optional<VolumeGrid> segmentation;  // binary, cropped
  SegSource segmentation_source = SegSource::none;
  CropOffset offset;
  bool normalize_degenerate = false;
  bool stored_half = false;
};

namespace bundle_detail {

constexpr uint32_t kMagic = 0x42534e50;  // "PNSB" little-endian

inline void put_u32(std::ofstream& f, uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), 4);
}

inline uint32_t get_u32(std::ifstream& f) {
  uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

inline void write_volume(std::ofstream& f, const VolumeGrid& v, bool half) {
  if (half) {
    std::vector<uint16_t> buf(v.voxels());
    for (size_t i = 0; i < buf.size(); ++i)
      buf[i] = float_to_half(v.values[i]);
    f.write(reinterpret_cast<const char*>(buf.data()), buf.size() * 2);
  } else {
    f.write(reinterpret_cast<const char*>(v.values.data()), v.voxels() * 4);
  }
}

inline void read_volume(std::ifstream& f, VolumeGrid& v, bool half) {
  if (half) {
    std::vector<uint16_t> buf(v.voxels());
    f.read(reinterpret_cast<char*>(buf.data()), buf.size() * 2);
    for (size_t i = 0; i < buf.size(); ++i)
      v.values[i] = half_to_float(buf[i]);
  } else {
    f.read(reinterpret_cast<char*>(v.values.data()), v.voxels() * 4);
  }
}

}  // namespace bundle_detail

inline void write_bundle(const CaseBundle& b, const std::string& dir) {
  fs::create_directories(dir);
  fs::path bin_path = fs::path(dir) / (b.case_id + ".bin");
  fs::path man_path = fs::path(dir) / (b.case_id + ".json");

  std::ofstream f(bin_path, std::ios::binary);
  if (!f) throw DataError("cannot write bundle '" + bin_path.string() + "'");
  bundle_detail::put_u32(f, bundle_detail::kMagic);
  bundle_detail::put_u32(f, b.stored_half ? 1u : 0u);
  for (int d = 0; d < 3; ++d)
    bundle_detail::put_u32(f, static_cast<uint32_t>(b.channels[0].values.dim(d)));
  bundle_detail::put_u32(f, b.segmentation.has_value() ? 1u : 0u);
  for (int ch = 0; ch < kNumChannels; ++ch)
    bundle_detail::write_volume(f, b.channels[ch], b.stored_half);
  if (b.segmentation)
    bundle_detail::write_volume(f, *b.segmentation, b.stored_half);
  if (!f) throw DataError("short write to '" + bin_path.string() + "'");

  json man;
  man["case_id"] = b.case_id;
  man["shape"] = {b.channels[0].nx(), b.channels[0].ny(), b.channels[0].nz()};
  man["spacing"] = b.channels[0].spacing;
  man["dtype"] = b.stored_half ? "float16" : "float32";
  man["labels"] = {
      {"idh", b.labels.idh},
      {"codeletion", b.labels.codeletion},
      {"grade", b.labels.grade},
  };
  man["segmentation"] = b.segmentation.has_value();
  man["segmentation_source"] = to_string(b.segmentation_source);
  man["crop_offset"] = b.offset.lo;
  man["original_shape"] = b.offset.original_shape;
  man["normalize_degenerate"] = b.normalize_degenerate;
  std::ofstream mf(man_path, std::ios::binary);
  mf << man.dump(2) << "\n";
}

inline CaseBundle read_bundle(const std::string& dir,
                              const std::string& case_id) {
  fs::path bin_path = fs::path(dir) / (case_id + ".bin");
  fs::path man_path = fs::path(dir) / (case_id + ".json");
  std::ifstream mf(man_path);
  if (!mf) throw DataError("cannot open manifest '" + man_path.string() + "'");
  json man = json::parse(mf, nullptr, true);

  CaseBundle b;
  b.case_id = man.at("case_id").get<std::string>();
  auto shape = man.at("shape").get<std::array<int, 3>>();
  auto spacing = man.at("spacing").get<std::array<double, 3>>();
  b.stored_half = man.at("dtype").get<std::string>() == "float16";
  b.labels.idh = man.at("labels").at("idh").get<std::array<float, 2>>();
  b.labels.codeletion =
      man.at("labels").at("codeletion").get<std::array<float, 2>>();
  b.labels.grade = man.at("labels").at("grade").get<std::array<float, 3>>();
  b.segmentation_source =
      seg_source_from_string(man.at("segmentation_source").get<std::string>());
  b.offset.lo = man.at("crop_offset").get<std::array<int, 3>>();
  b.offset.original_shape = man.at("original_shape").get<std::array<int, 3>>();
  b.offset.shape = shape;
  b.normalize_degenerate = man.value("normalize_degenerate", false);

  std::ifstream f(bin_path, std::ios::binary);
  if (!f) throw DataError("cannot open bundle '" + bin_path.string() + "'");
  if (bundle_detail::get_u32(f) != bundle_detail::kMagic)
    throw DataError("'" + bin_path.string() + "' is not a case bundle");
  bool half = bundle_detail::get_u32(f) != 0;
  int nx = static_cast<int>(bundle_detail::get_u32(f));
  int ny = static_cast<int>(bundle_detail::get_u32(f));
  int nz = static_cast<int>(bundle_detail::get_u32(f));
  bool has_seg = bundle_detail::get_u32(f) != 0;
  if (nx != shape[0] || ny != shape[1] || nz != shape[2])
    throw DataError("bundle/manifest shape mismatch for case '" + case_id +
                    "'");
  for (int ch = 0; ch < kNumChannels; ++ch) {
    b.channels[ch] = VolumeGrid(nx, ny, nz, VolumeKind::intensity);
    b.channels[ch].spacing = spacing;
    bundle_detail::read_volume(f, b.channels[ch], half);
  }
  if (has_seg) {
    VolumeGrid seg(nx, ny, nz, VolumeKind::binary_mask);
    seg.spacing = spacing;
    bundle_detail::read_volume(f, seg, half);
    b.segmentation = seg;
  }
  if (!f) throw DataError("truncated bundle '" + bin_path.string() + "'");
  return b;
}

inline std::vector<std::string> list_bundle_ids(const std::string& dir) {
  std::vector<std::string> ids;
  if (!fs::is_directory(dir))
    throw DataError("bundle directory '" + dir + "' does not exist");
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".bin")
      ids.push_back(e.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------------------
// Full chain for one case

/// Apply the preprocessing chain to a loaded case: optional external stages
/// are expected to have run already (they operate on files); here we
/// normalize, crop, and prepare masks.
inline CaseBundle preprocess_case(const Case& c, const PreprocessConfig& cfg) {
  auto violations = validate_case(c);
  if (!violations.empty())
    throw DataError("case '" + c.case_id + "' failed validation: " +
                    violations[0].path + ": " + violations[0].message);

  // Brain mask: explicit file, else everything (synthetic pre-aligned data).
  VolumeGrid mask(c.channels[0].nx(), c.channels[0].ny(), c.channels[0].nz(),
                  VolumeKind::binary_mask);
  mask.spacing = c.channels[0].spacing;
  if (cfg.brain_mask_path) {
    mask = read_nifti(*cfg.brain_mask_path, VolumeKind::intensity);
    mask = collapse_labels(mask);
    if (!mask.values.same_shape(c.channels[0].values))
      throw DataError("brain mask shape differs from case '" + c.case_id +
                      "'");
  } else {
    mask.values.fill(1.f);
  }

  CaseBundle b;
  b.case_id = c.case_id;
  b.labels = c.labels;
  b.segmentation_source = c.segmentation_source;
  b.stored_half = cfg.store_half_precision;

  std::array<VolumeGrid, kNumChannels> normalized;
  for (int ch = 0; ch < kNumChannels; ++ch) {
    auto res =
        normalize_in_mask(c.channels[ch], mask, cfg.normalization_epsilon);
    normalized[ch] = std::move(res.volume);
    b.normalize_degenerate = b.normalize_degenerate || res.degenerate;
  }

  std::optional<VolumeGrid> seg;
  if (c.segmentation) {
    seg = collapse_labels(*c.segmentation);
    if (cfg.smooth_training_masks) seg = median_smooth_mask(*seg);
  }

  if (cfg.crop_to_brain_bbox) {
    std::vector<VolumeGrid> vols(normalized.begin(), normalized.end());
    if (seg) vols.push_back(*seg);
    auto [cropped, off] = crop_to_mask_bbox(vols, mask);
    for (int ch = 0; ch < kNumChannels; ++ch)
      b.channels[ch] = std::move(cropped[ch]);
    if (seg) b.segmentation = std::move(cropped[kNumChannels]);
    b.offset = off;
  } else {
    b.channels = std::move(normalized);
    b.segmentation = std::move(seg);
    b.offset.original_shape = {c.channels[0].nx(), c.channels[0].ny(),
                               c.channels[0].nz()};
    b.offset.shape = b.offset.original_shape;
  }
  return b;
}

}  // namespace psnet
