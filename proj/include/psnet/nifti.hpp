#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "psnet/common.hpp"
#include "psnet/volume.hpp"

namespace psnet {

// Minimal single-file NIfTI-1 (.nii / .nii.gz) I/O. Covers what the pipeline
// emits and consumes: 3D volumes, little-endian, no affine beyond pixdim.

namespace nifti_detail {

#pragma pack(push, 1)
struct Nifti1Header {
  int32_t sizeof_hdr;      // 348
  char data_type[10];
  char db_name[18];
  int32_t extents;
  int16_t session_error;
  char regular;
  char dim_info;
  int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  int16_t intent_code;
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope, scl_inter;
  int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration, toffset;
  int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)

static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr int16_t kDtUint8 = 2;
constexpr int16_t kDtInt16 = 4;
constexpr int16_t kDtInt32 = 8;
constexpr int16_t kDtFloat32 = 16;
constexpr int16_t kDtFloat64 = 64;

inline bool has_gz_suffix(const std::string& path) {
  return path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
}

inline std::vector<char> read_file(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw DataError("cannot open '" + path + "'");
  std::vector<char> out;
  char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0)
    out.insert(out.end(), buf, buf + n);
  bool bad = n < 0;
  gzclose(f);
  if (bad) throw DataError("decompression error reading '" + path + "'");
  return out;
}

inline void write_file(const std::string& path, const char* data, size_t n) {
  if (has_gz_suffix(path)) {
    gzFile f = gzopen(path.c_str(), "wb6");
    if (!f) throw DataError("cannot write '" + path + "'");
    size_t off = 0;
    while (off < n) {
      unsigned chunk = static_cast<unsigned>(std::min<size_t>(n - off, 1u << 28));
      if (gzwrite(f, data + off, chunk) != static_cast<int>(chunk)) {
        gzclose(f);
        throw DataError("compression error writing '" + path + "'");
      }
      off += chunk;
    }
    gzclose(f);
  } else {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw DataError("cannot write '" + path + "'");
    size_t written = std::fwrite(data, 1, n, f);
    std::fclose(f);
    if (written != n) throw DataError("short write to '" + path + "'");
  }
}

}  // namespace nifti_detail

inline VolumeGrid read_nifti(const std::string& path,
                             VolumeKind kind = VolumeKind::intensity) {
  using namespace nifti_detail;
  std::vector<char> raw = read_file(path);
  if (raw.size() < sizeof(Nifti1Header))
    throw DataError("'" + path + "' too small for a NIfTI-1 header");
  Nifti1Header hdr;
  std::memcpy(&hdr, raw.data(), sizeof(hdr));
  if (hdr.sizeof_hdr != 348)
    throw DataError("'" + path + "' is not little-endian NIfTI-1");
  if (std::strncmp(hdr.magic, "n+1", 3) != 0)
    throw DataError("'" + path + "' lacks the n+1 magic (single-file NIfTI)");
  int ndim = hdr.dim[0];
  if (ndim < 3)
    throw DataError("'" + path + "' has dim " + std::to_string(ndim) +
                    ", expected a 3D volume");
  for (int i = 4; i <= ndim; ++i)
    if (hdr.dim[i] > 1)
      throw DataError("'" + path + "' has a non-singleton dim beyond 3D");
  int nx = hdr.dim[1], ny = hdr.dim[2], nz = hdr.dim[3];
  size_t n = static_cast<size_t>(nx) * ny * nz;
  size_t offset = static_cast<size_t>(hdr.vox_offset);
  VolumeGrid vol(nx, ny, nz, kind);
  vol.spacing = {hdr.pixdim[1] > 0 ? hdr.pixdim[1] : 1.0,
                 hdr.pixdim[2] > 0 ? hdr.pixdim[2] : 1.0,
                 hdr.pixdim[3] > 0 ? hdr.pixdim[3] : 1.0};
  float slope = hdr.scl_slope == 0.f ? 1.f : hdr.scl_slope;
  float inter = hdr.scl_inter;
  auto require = [&](size_t bytes) {
    if (raw.size() < offset + bytes)
      throw DataError("'" + path + "' truncated voxel data");
  };
  const char* src = raw.data() + offset;
  // NIfTI stores x fastest; Tensor stores z fastest, so transpose on load.
  auto store = [&](auto get) {
    size_t idx = 0;
    for (int z = 0; z < nz; ++z)
      for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x, ++idx)
          vol.values.at(x, y, z) = get(idx) * slope + inter;
  };
  switch (hdr.datatype) {
    case kDtUint8:
      require(n);
      store([&](size_t i) {
        return static_cast<float>(
            reinterpret_cast<const uint8_t*>(src)[i]);
      });
      break;
    case kDtInt16: {
      require(n * 2);
      store([&](size_t i) {
        int16_t v;
        std::memcpy(&v, src + i * 2, 2);
        return static_cast<float>(v);
      });
      break;
    }
    case kDtInt32: {
      require(n * 4);
      store([&](size_t i) {
        int32_t v;
        std::memcpy(&v, src + i * 4, 4);
        return static_cast<float>(v);
      });
      break;
    }
    case kDtFloat32: {
      require(n * 4);
      store([&](size_t i) {
        float v;
        std::memcpy(&v, src + i * 4, 4);
        return v;
      });
      break;
    }
    case kDtFloat64: {
      require(n * 8);
      store([&](size_t i) {
        double v;
        std::memcpy(&v, src + i * 8, 8);
        return static_cast<float>(v);
      });
      break;
    }
    default:
      throw DataError("'" + path + "' has unsupported NIfTI datatype " +
                      std::to_string(hdr.datatype));
  }
  return vol;
}

inline void write_nifti(const std::string& path, const VolumeGrid& vol) {
  using namespace nifti_detail;
  Nifti1Header hdr;
  std::memset(&hdr, 0, sizeof(hdr));
  hdr.sizeof_hdr = 348;
  hdr.regular = 'r';
  hdr.dim[0] = 3;
  hdr.dim[1] = static_cast<int16_t>(vol.nx());
  hdr.dim[2] = static_cast<int16_t>(vol.ny());
  hdr.dim[3] = static_cast<int16_t>(vol.nz());
  for (int i = 4; i < 8; ++i) hdr.dim[i] = 1;
  hdr.datatype = kDtFloat32;
  hdr.bitpix = 32;
  hdr.pixdim[0] = 1.f;
  hdr.pixdim[1] = static_cast<float>(vol.spacing[0]);
  hdr.pixdim[2] = static_cast<float>(vol.spacing[1]);
  hdr.pixdim[3] = static_cast<float>(vol.spacing[2]);
  hdr.vox_offset = 352.f;
  hdr.scl_slope = 1.f;
  hdr.xyzt_units = 2;  // mm
  hdr.sform_code = 1;
  hdr.srow_x[0] = hdr.pixdim[1];
  hdr.srow_y[1] = hdr.pixdim[2];
  hdr.srow_z[2] = hdr.pixdim[3];
  std::memcpy(hdr.magic, "n+1", 4);
  std::vector<char> out(352 + vol.voxels() * 4, 0);
  std::memcpy(out.data(), &hdr, sizeof(hdr));
  float* dst = reinterpret_cast<float*>(out.data() + 352);
  size_t idx = 0;
  for (int z = 0; z < vol.nz(); ++z)
    for (int y = 0; y < vol.ny(); ++y)
      for (int x = 0; x < vol.nx(); ++x, ++idx)
        dst[idx] = vol.values.at(x, y, z);
  write_file(path, out.data(), out.size());
}

}  // namespace psnet
