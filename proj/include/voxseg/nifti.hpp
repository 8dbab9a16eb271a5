#ifndef VOXSEG_NIFTI_HPP
#define VOXSEG_NIFTI_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "voxseg/volume.hpp"

namespace voxseg {

static_assert(std::endian::native == std::endian::little,
              "NIfTI reader/writer assumes a little-endian host");

namespace nifti {

constexpr int32_t kHeaderSize = 348;
constexpr float kVoxOffset = 352.0f;
constexpr int16_t kDtUint8 = 2;
constexpr int16_t kDtFloat32 = 16;

#pragma pack(push, 1)
struct Header {
  int32_t sizeof_hdr;
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
  float scl_slope;
  float scl_inter;
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
static_assert(sizeof(Header) == kHeaderSize, "NIfTI-1 header must pack to 348 bytes");

template <typename T>
constexpr int16_t datatype_code();
template <>
constexpr int16_t datatype_code<uint8_t>() { return kDtUint8; }
template <>
constexpr int16_t datatype_code<float>() { return kDtFloat32; }

}  // namespace nifti

// Single-file uncompressed NIfTI-1 writer: header size 348, magic "n+1",
// vox_offset 352 (4 zero extension bytes), little-endian payload.
template <typename T>
void write_volume(const Volume<T>& vol, const std::string& path) {
  nifti::Header h;
  std::memset(&h, 0, sizeof(h));
  h.sizeof_hdr = nifti::kHeaderSize;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<int16_t>(vol.dims[0]);
  h.dim[2] = static_cast<int16_t>(vol.dims[1]);
  h.dim[3] = static_cast<int16_t>(vol.dims[2]);
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = nifti::datatype_code<T>();
  h.bitpix = static_cast<int16_t>(8 * sizeof(T));
  h.pixdim[0] = 1.0f;
  for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = static_cast<float>(vol.spacing[i]);
  for (int i = 4; i < 8; ++i) h.pixdim[i] = 1.0f;
  h.vox_offset = nifti::kVoxOffset;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2;  // mm
  h.qform_code = 0;
  h.sform_code = 1;
  for (int j = 0; j < 4; ++j) {
    h.srow_x[j] = static_cast<float>(vol.affine[0][j]);
    h.srow_y[j] = static_cast<float>(vol.affine[1][j]);
    h.srow_z[j] = static_cast<float>(vol.affine[2][j]);
  }
  h.magic[0] = 'n';
  h.magic[1] = '+';
  h.magic[2] = '1';
  h.magic[3] = '\0';

  std::ofstream f(path, std::ios::binary);
  check(f.good(), ErrorKind::Data, "nifti: cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(&h), sizeof(h));
  const char ext[4] = {0, 0, 0, 0};
  f.write(ext, 4);
  f.write(reinterpret_cast<const char*>(vol.data.data()),
          static_cast<std::streamsize>(vol.data.size() * sizeof(T)));
  check(f.good(), ErrorKind::Data, "nifti: write failed: " + path);
}

namespace nifti {

inline Header read_header(std::ifstream& f, const std::string& path) {
  Header h;
  f.read(reinterpret_cast<char*>(&h), sizeof(h));
  check(f.gcount() == kHeaderSize, ErrorKind::Data,
        "nifti: " + path + ": file shorter than the 348-byte header");
  if (h.sizeof_hdr != kHeaderSize) {
    check(h.sizeof_hdr != 0x5C010000, ErrorKind::Data,
          "nifti: " + path + ": field sizeof_hdr is byte-swapped; only little-endian supported");
    fail(ErrorKind::Data, "nifti: " + path + ": field sizeof_hdr = " +
                              std::to_string(h.sizeof_hdr) + ", expected 348");
  }
  check(std::memcmp(h.magic, "n+1", 4) == 0, ErrorKind::Data,
        "nifti: " + path + ": field magic is not \"n+1\" (single-file uncompressed expected)");
  check(h.dim[0] == 3, ErrorKind::Data,
        "nifti: " + path + ": field dim[0] = " + std::to_string(h.dim[0]) + ", expected 3");
  check(h.scl_slope == 0.0f || h.scl_slope == 1.0f, ErrorKind::Data,
        "nifti: " + path + ": field scl_slope = " + std::to_string(h.scl_slope) +
            " unsupported (expected 0 or 1)");
  check(h.scl_inter == 0.0f, ErrorKind::Data,
        "nifti: " + path + ": field scl_inter = " + std::to_string(h.scl_inter) +
            " unsupported (expected 0)");
  return h;
}

}  // namespace nifti

template <typename T>
Volume<T> read_volume(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), ErrorKind::Data, "nifti: cannot open: " + path);
  nifti::Header h = nifti::read_header(f, path);
  check(h.datatype == nifti::datatype_code<T>(), ErrorKind::Data,
        "nifti: " + path + ": field datatype = " + std::to_string(h.datatype) +
            " does not match requested element type (code " +
            std::to_string(nifti::datatype_code<T>()) + ")");

  Volume<T> vol;
  for (int i = 0; i < 3; ++i) {
    check(h.dim[i + 1] > 0, ErrorKind::Data,
          "nifti: " + path + ": field dim[" + std::to_string(i + 1) + "] must be positive");
    vol.dims[i] = h.dim[i + 1];
    check(h.pixdim[i + 1] > 0, ErrorKind::Data,
          "nifti: " + path + ": field pixdim[" + std::to_string(i + 1) + "] must be positive");
    vol.spacing[i] = static_cast<double>(h.pixdim[i + 1]);
  }
  if (h.sform_code > 0) {
    for (int j = 0; j < 4; ++j) {
      vol.affine[0][j] = h.srow_x[j];
      vol.affine[1][j] = h.srow_y[j];
      vol.affine[2][j] = h.srow_z[j];
    }
  } else {
    vol.affine = {{{vol.spacing[0], 0, 0, 0}, {0, vol.spacing[1], 0, 0},
                   {0, 0, vol.spacing[2], 0}}};
  }

  const int64_t offset = static_cast<int64_t>(h.vox_offset);
  check(offset >= nifti::kHeaderSize, ErrorKind::Data,
        "nifti: " + path + ": field vox_offset = " + std::to_string(offset) + " is invalid");
  f.seekg(offset, std::ios::beg);
  vol.data.resize(static_cast<size_t>(vol.numel()));
  f.read(reinterpret_cast<char*>(vol.data.data()),
         static_cast<std::streamsize>(vol.data.size() * sizeof(T)));
  check(f.gcount() == static_cast<std::streamsize>(vol.data.size() * sizeof(T)), ErrorKind::Data,
        "nifti: " + path + ": truncated payload (expected " +
            std::to_string(vol.data.size() * sizeof(T)) + " bytes)");
  return vol;
}

// Peeks at the datatype field so callers can dispatch without guessing.
inline int16_t probe_datatype(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check(f.good(), ErrorKind::Data, "nifti: cannot open: " + path);
  nifti::Header h = nifti::read_header(f, path);
  return h.datatype;
}

// Loads either supported datatype as a binary label mask (nonzero -> 1).
inline Volume<uint8_t> read_label_volume(const std::string& path) {
  if (probe_datatype(path) == nifti::kDtUint8) {
    Volume<uint8_t> v = read_volume<uint8_t>(path);
    for (auto& b : v.data) b = b ? 1 : 0;
    return v;
  }
  Volume<float> f = read_volume<float>(path);
  Volume<uint8_t> v;
  v.dims = f.dims;
  v.spacing = f.spacing;
  v.affine = f.affine;
  v.data.resize(f.data.size());
  for (size_t i = 0; i < f.data.size(); ++i) v.data[i] = f.data[i] > 0.5f ? 1 : 0;
  return v;
}

}  // namespace voxseg

#endif  // VOXSEG_NIFTI_HPP
