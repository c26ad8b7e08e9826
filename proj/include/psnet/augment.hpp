#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "psnet/common.hpp"
#include "psnet/rng.hpp"
#include "psnet/tensor.hpp"

namespace psnet {

/// Training-time augmentation settings. `probability` applies independently
/// per augmentation type per stream item; `factor` is how many times each
/// sample is parsed per epoch.
struct AugmentConfig {
  double probability = 0.35;
  int factor = 2;
  int crop_max = 20;
  double rotation_max_deg = 30.0;
  double brightness_max = 0.2;
  std::array<double, 2> contrast_range{0.85, 1.15};
  uint64_t seed = 0;

  void validate() const {
    if (probability < 0.0 || probability > 1.0)
      throw ConfigError("augment probability must be in [0,1]");
    if (factor < 1) throw ConfigError("augment factor must be >= 1");
    if (crop_max < 0) throw ConfigError("augment crop_max must be >= 0");
  }
};

/// One sample's tensors: channel volumes (C,X,Y,Z) plus an optional mask
/// (X,Y,Z). Geometric augmentations treat channels and mask identically;
/// intensity augmentations never touch the mask.
struct CaseTensors {
  Tensor<float> channels;  // (C, X, Y, Z)
  std::optional<Tensor<float>> mask;  // (X, Y, Z), binary
};

namespace aug_detail {

inline void zero_border(Tensor<float>& t, int dim_offset, int axis, int front,
                        int back) {
  // dim_offset 1 for (C,X,Y,Z), 0 for (X,Y,Z)
  int dims[3] = {t.dim(dim_offset), t.dim(dim_offset + 1),
                 t.dim(dim_offset + 2)};
  int nc = dim_offset == 1 ? t.dim(0) : 1;
  auto in_zeroed = [&](int coord) {
    return coord < front || coord >= dims[axis] - back;
  };
  for (int c = 0; c < nc; ++c)
    for (int x = 0; x < dims[0]; ++x)
      for (int y = 0; y < dims[1]; ++y)
        for (int z = 0; z < dims[2]; ++z) {
          int coord = axis == 0 ? x : axis == 1 ? y : z;
          if (!in_zeroed(coord)) continue;
          if (dim_offset == 1)
            t.at(c, x, y, z) = 0.f;
          else
            t.at(x, y, z) = 0.f;
        }
}

// Rotation matrix for intrinsic rotations about x, then y, then z.
inline std::array<double, 9> euler_matrix(double ax, double ay, double az) {
  double cx = std::cos(ax), sx = std::sin(ax);
  double cy = std::cos(ay), sy = std::sin(ay);
  double cz = std::cos(az), sz = std::sin(az);
  // R = Rz * Ry * Rx
  return {cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx,
          sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx,
          -sy,     cy * sx,                cy * cx};
}

}  // namespace aug_detail

/// Parameters fully describing one item's augmentation, drawn ahead of time
/// so streams are reproducible regardless of consumption order.
struct AugPlan {
  bool do_crop = false;
  std::array<int, 3> crop_front{0, 0, 0};
  std::array<int, 3> crop_back{0, 0, 0};
  bool do_rotate = false;
  std::array<double, 3> angles_deg{0, 0, 0};
  bool do_brightness = false;
  double brightness_delta = 0.0;
  bool do_contrast = false;
  double contrast_factor = 1.0;
};

inline AugPlan draw_plan(const AugmentConfig& cfg, Rng& rng) {
  AugPlan p;
  p.do_crop = rng.bernoulli(cfg.probability);
  for (int d = 0; d < 3; ++d) {
    int k = static_cast<int>(rng.uniform_int(0, cfg.crop_max));
    int front = static_cast<int>(rng.uniform_int(0, k));
    p.crop_front[d] = front;
    p.crop_back[d] = k - front;
  }
  p.do_rotate = rng.bernoulli(cfg.probability);
  for (int d = 0; d < 3; ++d)
    p.angles_deg[d] = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg);
  p.do_brightness = rng.bernoulli(cfg.probability);
  p.brightness_delta = rng.uniform(0.0, cfg.brightness_max);
  p.do_contrast = rng.bernoulli(cfg.probability);
  p.contrast_factor =
      rng.uniform(cfg.contrast_range[0], cfg.contrast_range[1]);
  return p;
}

/// Zero-fill a random number of voxels (already drawn into the plan) from the
/// borders of each dimension. Shapes stay fixed; the same crop is applied to
/// every channel and the mask.
inline void random_crop(CaseTensors& t, const std::array<int, 3>& front,
                        const std::array<int, 3>& back) {
  for (int axis = 0; axis < 3; ++axis) {
    int dim = t.channels.dim(axis + 1);
    if (front[axis] + back[axis] >= dim)
      throw DataError("random_crop: dimension " + std::to_string(axis) +
                      " too small for crop");
    if (front[axis] == 0 && back[axis] == 0) continue;
    aug_detail::zero_border(t.channels, 1, axis, front[axis], back[axis]);
    if (t.mask) aug_detail::zero_border(*t.mask, 0, axis, front[axis], back[axis]);
  }
}

/// Rotate by the same three Euler angles around the volume center: trilinear
/// resampling for channels, nearest-neighbor for the mask, zeros outside.
inline void random_rotate(CaseTensors& t, const std::array<double, 3>& deg) {
  constexpr double kPi = 3.14159265358979323846;
  auto rot = aug_detail::euler_matrix(deg[0] * kPi / 180.0,
                                      deg[1] * kPi / 180.0,
                                      deg[2] * kPi / 180.0);
  const int nx = t.channels.dim(1), ny = t.channels.dim(2),
            nz = t.channels.dim(3);
  const int nc = t.channels.dim(0);
  const double cx = (nx - 1) / 2.0, cy = (ny - 1) / 2.0, cz = (nz - 1) / 2.0;
  Tensor<float> out_ch({nc, nx, ny, nz});
  Tensor<float> out_mask;
  if (t.mask) out_mask.reshape({nx, ny, nz});

  // Inverse mapping: output voxel -> source coordinate via R^T.
  for (int x = 0; x < nx; ++x)
    for (int y = 0; y < ny; ++y)
      for (int z = 0; z < nz; ++z) {
        double vx = x - cx, vy = y - cy, vz = z - cz;
        double sx = rot[0] * vx + rot[3] * vy + rot[6] * vz + cx;
        double sy = rot[1] * vx + rot[4] * vy + rot[7] * vz + cy;
        double sz = rot[2] * vx + rot[5] * vy + rot[8] * vz + cz;
        int x0 = static_cast<int>(std::floor(sx));
        int y0 = static_cast<int>(std::floor(sy));
        int z0 = static_cast<int>(std::floor(sz));
        double fx = sx - x0, fy = sy - y0, fz = sz - z0;
        bool inside = sx >= -0.5 && sx <= nx - 0.5 && sy >= -0.5 &&
                      sy <= ny - 0.5 && sz >= -0.5 && sz <= nz - 0.5;
        if (inside) {
          for (int c = 0; c < nc; ++c) {
            double acc = 0.0;
            for (int dx = 0; dx <= 1; ++dx)
              for (int dy = 0; dy <= 1; ++dy)
                for (int dz = 0; dz <= 1; ++dz) {
                  int X = x0 + dx, Y = y0 + dy, Z = z0 + dz;
                  if (X < 0 || Y < 0 || Z < 0 || X >= nx || Y >= ny || Z >= nz)
                    continue;
                  double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) *
                             (dz ? fz : 1 - fz);
                  acc += w * t.channels.at(c, X, Y, Z);
                }
            out_ch.at(c, x, y, z) = static_cast<float>(acc);
          }
          if (t.mask) {
            int Xn = static_cast<int>(std::lround(sx));
            int Yn = static_cast<int>(std::lround(sy));
            int Zn = static_cast<int>(std::lround(sz));
            float m = 0.f;
            if (Xn >= 0 && Yn >= 0 && Zn >= 0 && Xn < nx && Yn < ny && Zn < nz)
              m = t.mask->at(Xn, Yn, Zn);
            out_mask.at(x, y, z) = m;
          }
        } else {
          for (int c = 0; c < nc; ++c) out_ch.at(c, x, y, z) = 0.f;
          if (t.mask) out_mask.at(x, y, z) = 0.f;
        }
      }
  t.channels = std::move(out_ch);
  if (t.mask) *t.mask = std::move(out_mask);
}

/// Add delta to every voxel of every channel.
inline void brightness_shift(Tensor<float>& channels, double delta) {
  for (size_t i = 0; i < channels.size(); ++i)
    channels[i] += static_cast<float>(delta);
}

/// Scale each channel about its own mean: v' = mean + f * (v - mean).
inline void contrast_shift(Tensor<float>& channels, double factor) {
  const int nc = channels.dim(0);
  const size_t per = channels.size() / nc;
  for (int c = 0; c < nc; ++c) {
    float* p = channels.data() + c * per;
    double mean = 0.0;
    for (size_t i = 0; i < per; ++i) mean += p[i];
    mean /= static_cast<double>(per);
    for (size_t i = 0; i < per; ++i)
      p[i] = static_cast<float>(mean + factor * (p[i] - mean));
  }
}

inline void apply_plan(CaseTensors& t, const AugPlan& plan) {
  if (plan.do_crop) random_crop(t, plan.crop_front, plan.crop_back);
  if (plan.do_rotate) random_rotate(t, plan.angles_deg);
  if (plan.do_brightness) brightness_shift(t.channels, plan.brightness_delta);
  if (plan.do_contrast) contrast_shift(t.channels, plan.contrast_factor);
}

struct StreamItem {
  int sample_index;
  AugPlan plan;
};

/// Build one epoch's ordered stream: every sample appears exactly `factor`
/// times, each appearance with independent augmentation draws, in a seeded
/// permutation. All randomness flows from the config seed plus the epoch.
inline std::vector<StreamItem> augment_epoch_stream(int n_samples,
                                                    const AugmentConfig& cfg,
                                                    uint64_t epoch = 0) {
  cfg.validate();
  if (n_samples < 1) throw DataError("augment_epoch_stream: empty dataset");
  Rng rng(cfg.seed ^ (0x5851F42D4C957F2Dull * (epoch + 1)));
  std::vector<StreamItem> stream;
  stream.reserve(static_cast<size_t>(n_samples) * cfg.factor);
  std::vector<int> order;
  for (int f = 0; f < cfg.factor; ++f)
    for (int i = 0; i < n_samples; ++i) order.push_back(i);
  rng.shuffle(order);
  for (int idx : order) {
    StreamItem item;
    item.sample_index = idx;
    item.plan = draw_plan(cfg, rng);
    stream.push_back(item);
  }
  return stream;
}

}  // namespace psnet
