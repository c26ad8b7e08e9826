#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psnet/common.hpp"
#include "psnet/tensor.hpp"

namespace psnet {

enum class VolumeKind { intensity, binary_mask, probability };

inline const char* to_string(VolumeKind k) {
  switch (k) {
    case VolumeKind::intensity: return "intensity";
    case VolumeKind::binary_mask: return "binary_mask";
    case VolumeKind::probability: return "probability";
  }
  return "?";
}

/// One 3D scalar field: an MRI channel, a mask, or a probability map.
struct VolumeGrid {
  Tensor<float> values;                      // rank 3, (x, y, z)
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm
  VolumeKind kind = VolumeKind::intensity;

  VolumeGrid() = default;
  VolumeGrid(int nx, int ny, int nz, VolumeKind k = VolumeKind::intensity)
      : values({nx, ny, nz}), kind(k) {}

  int nx() const { return values.dim(0); }
  int ny() const { return values.dim(1); }
  int nz() const { return values.dim(2); }
  size_t voxels() const { return values.size(); }
};

// Fixed label vocabularies. Index order is load-bearing: the positive class
// for metrics is "mutated" (idh index 1) and "co-deleted" (codeletion index 1).
inline const std::vector<std::string>& idh_vocabulary() {
  static const std::vector<std::string> v = {"wildtype", "mutated"};
  return v;
}
inline const std::vector<std::string>& codeletion_vocabulary() {
  static const std::vector<std::string> v = {"intact", "co-deleted"};
  return v;
}
inline const std::vector<std::string>& grade_vocabulary() {
  static const std::vector<std::string> v = {"II", "III", "IV"};
  return v;
}

inline const std::vector<std::string>& output_names() {
  static const std::vector<std::string> v = {"idh", "codeletion", "grade"};
  return v;
}

/// Per-output one-hot rows. Unknown ground truth is the all-zeros row, so a
/// row sum of 0 marks a masked sample and a row sum of 1 a known one.
struct LabelSet {
  std::array<float, 2> idh{0.f, 0.f};
  std::array<float, 2> codeletion{0.f, 0.f};
  std::array<float, 3> grade{0.f, 0.f, 0.f};

  bool idh_known() const { return idh[0] + idh[1] > 0.5f; }
  bool codeletion_known() const { return codeletion[0] + codeletion[1] > 0.5f; }
  bool grade_known() const { return grade[0] + grade[1] + grade[2] > 0.5f; }

  int idh_index() const { return idh[1] > idh[0] ? 1 : 0; }
  int codeletion_index() const { return codeletion[1] > codeletion[0] ? 1 : 0; }
  int grade_index() const {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (grade[i] > grade[best]) best = i;
    return best;
  }
};

enum class SegSource { manual, automatic, none };

inline const char* to_string(SegSource s) {
  switch (s) {
    case SegSource::manual: return "manual";
    case SegSource::automatic: return "automatic";
    case SegSource::none: return "none";
  }
  return "?";
}

inline SegSource seg_source_from_string(const std::string& s) {
  if (s == "manual") return SegSource::manual;
  if (s == "automatic") return SegSource::automatic;
  if (s == "none") return SegSource::none;
  throw DataError("unknown segmentation source '" + s + "'");
}

constexpr int kNumChannels = 4;

inline const std::array<const char*, kNumChannels>& channel_names() {
  static const std::array<const char*, kNumChannels> v = {"preT1", "postT1",
                                                          "T2", "FLAIR"};
  return v;
}

/// One patient: four co-registered channels in fixed (preT1, postT1, T2,
/// FLAIR) order, labels, and an optional whole-tumor mask.
struct Case {
  std::string case_id;
  std::array<VolumeGrid, kNumChannels> channels;
  LabelSet labels;
  std::optional<VolumeGrid> segmentation;
  SegSource segmentation_source = SegSource::none;
};

enum class WhoSubtype {
  oligodendroglioma,
  astro_idh_mut,
  astro_idh_wt,
  gbm_idh_mut,
  gbm_idh_wt,
  other
};

inline const char* to_string(WhoSubtype s) {
  switch (s) {
    case WhoSubtype::oligodendroglioma: return "oligodendroglioma";
    case WhoSubtype::astro_idh_mut: return "astro_idh_mut";
    case WhoSubtype::astro_idh_wt: return "astro_idh_wt";
    case WhoSubtype::gbm_idh_mut: return "gbm_idh_mut";
    case WhoSubtype::gbm_idh_wt: return "gbm_idh_wt";
    case WhoSubtype::other: return "other";
  }
  return "?";
}

inline const std::vector<std::string>& who_subtype_names() {
  static const std::vector<std::string> v = {
      "oligodendroglioma", "astro_idh_mut", "astro_idh_wt",
      "gbm_idh_mut",       "gbm_idh_wt",    "other"};
  return v;
}

/// Final per-case outputs after post-processing.
struct PredictionRecord {
  std::string case_id;
  std::array<double, 2> idh_scores{0, 0};
  std::array<double, 2> codeletion_scores{0, 0};
  std::array<double, 3> grade_scores{0, 0, 0};
  std::array<double, 2> lgg_hgg_scores{0, 0};  // (II+III, IV)
  VolumeGrid tumor_probability;
  int idh_label = 0;
  int codeletion_label = 0;
  int grade_label = 0;
  WhoSubtype who_subtype = WhoSubtype::other;
};

namespace detail {

inline int vocab_index(const std::vector<std::string>& vocab,
                       const std::string& value, const std::string& output) {
  for (size_t i = 0; i < vocab.size(); ++i)
    if (vocab[i] == value) return static_cast<int>(i);
  std::string allowed;
  for (const auto& v : vocab) allowed += (allowed.empty() ? "" : ", ") + v;
  throw DataError("unrecognized " + output + " category '" + value +
                  "' (allowed: " + allowed + ")");
}

}  // namespace detail

/// Map raw category strings (or absent values) onto one-hot rows. Absent or
/// null entries become the all-zeros UNKNOWN row.
inline LabelSet encode_labelset(
    const std::map<std::string, std::optional<std::string>>& raw) {
  LabelSet out;
  for (const auto& [key, value] : raw) {
    if (key != "idh" && key != "codeletion" && key != "grade")
      throw DataError("unknown output name '" + key + "'");
    if (!value.has_value() || value->empty()) continue;
    if (key == "idh")
      out.idh[detail::vocab_index(idh_vocabulary(), *value, "idh")] = 1.f;
    else if (key == "codeletion")
      out.codeletion[detail::vocab_index(codeletion_vocabulary(), *value,
                                         "codeletion")] = 1.f;
    else
      out.grade[detail::vocab_index(grade_vocabulary(), *value, "grade")] = 1.f;
  }
  return out;
}

/// Inverse of encode_labelset; unknown rows decode to absent values.
inline std::map<std::string, std::optional<std::string>> decode_labelset(
    const LabelSet& ls) {
  std::map<std::string, std::optional<std::string>> out;
  out["idh"] = ls.idh_known()
                   ? std::optional<std::string>(idh_vocabulary()[ls.idh_index()])
                   : std::nullopt;
  out["codeletion"] =
      ls.codeletion_known()
          ? std::optional<std::string>(
                codeletion_vocabulary()[ls.codeletion_index()])
          : std::nullopt;
  out["grade"] = ls.grade_known() ? std::optional<std::string>(
                                        grade_vocabulary()[ls.grade_index()])
                                  : std::nullopt;
  return out;
}

struct Violation {
  std::string path;     // e.g. "channels[3].values"
  std::string message;
};

inline void validate_volume(const VolumeGrid& v, const std::string& path,
                            std::vector<Violation>& out) {
  if (v.values.rank() != 3 || v.nx() < 1 || v.ny() < 1 || v.nz() < 1)
    out.push_back({path + ".values", "all three dimensions must be >= 1"});
  for (int i = 0; i < 3; ++i)
    if (!(v.spacing[i] > 0.0))
      out.push_back({path + ".spacing[" + std::to_string(i) + "]",
                     "spacing components must be strictly positive"});
  if (v.kind == VolumeKind::binary_mask) {
    for (size_t i = 0; i < v.values.size(); ++i) {
      float x = v.values[i];
      if (x != 0.f && x != 1.f) {
        out.push_back({path + ".values",
                       "binary mask contains value " + format_real(x) +
                           " at linear index " + std::to_string(i)});
        break;
      }
    }
  } else if (v.kind == VolumeKind::probability) {
    for (size_t i = 0; i < v.values.size(); ++i) {
      float x = v.values[i];
      if (!(x >= 0.f && x <= 1.f)) {
        out.push_back({path + ".values",
                       "probability volume contains value " + format_real(x) +
                           " at linear index " + std::to_string(i)});
        break;
      }
    }
  }
}

/// Collect every invariant violation of a Case. Violations are data, not
/// exceptions: an empty result means the case is well-formed.
inline std::vector<Violation> validate_case(const Case& c) {
  std::vector<Violation> out;
  for (int ch = 0; ch < kNumChannels; ++ch)
    validate_volume(c.channels[ch],
                    "channels[" + std::to_string(ch) + "]", out);
  const VolumeGrid& ref = c.channels[0];
  for (int ch = 1; ch < kNumChannels; ++ch) {
    const VolumeGrid& v = c.channels[ch];
    if (v.nx() != ref.nx() || v.ny() != ref.ny() || v.nz() != ref.nz())
      out.push_back({"channels[" + std::to_string(ch) + "].values",
                     std::string(channel_names()[ch]) +
                         " shape differs from preT1"});
    if (v.spacing != ref.spacing)
      out.push_back({"channels[" + std::to_string(ch) + "].spacing",
                     std::string(channel_names()[ch]) +
                         " spacing differs from preT1"});
  }
  if (c.segmentation.has_value()) {
    const VolumeGrid& m = *c.segmentation;
    if (m.kind != VolumeKind::binary_mask)
      out.push_back({"segmentation.kind", "segmentation must be a binary mask"});
    validate_volume(m, "segmentation", out);
    if (m.nx() != ref.nx() || m.ny() != ref.ny() || m.nz() != ref.nz())
      out.push_back({"segmentation.values", "mask shape differs from channels"});
    if (m.spacing != ref.spacing)
      out.push_back({"segmentation.spacing",
                     "mask spacing differs from channels"});
  }
  auto check_onehot = [&](const float* row, int n, const std::string& name) {
    float sum = 0.f;
    for (int i = 0; i < n; ++i) {
      if (row[i] != 0.f && row[i] != 1.f)
        out.push_back({"labels." + name, "label row entries must be 0 or 1"});
      sum += row[i];
    }
    if (sum != 0.f && sum != 1.f)
      out.push_back({"labels." + name, "label row must sum to 0 or 1"});
  };
  check_onehot(c.labels.idh.data(), 2, "idh");
  check_onehot(c.labels.codeletion.data(), 2, "codeletion");
  check_onehot(c.labels.grade.data(), 3, "grade");
  return out;
}

}  // namespace psnet
