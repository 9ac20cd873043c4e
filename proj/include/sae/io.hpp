#ifndef SAE_IO_HPP
#define SAE_IO_HPP

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include <zlib.h>

#include <nlohmann/json.hpp>

#include "sae/error.hpp"
#include "sae/volume.hpp"

namespace sae::io {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() &&
         s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::IoUnreadable, "cannot open file: " + path);
  in.seekg(0, std::ios::end);
  const auto n = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<char> buf(static_cast<std::size_t>(n));
  in.read(buf.data(), n);
  require(in.good(), ErrorCode::IoUnreadable, "read failed: " + path);
  return buf;
}

inline std::vector<char> read_file_gz(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  require(f != nullptr, ErrorCode::IoUnreadable, "cannot open file: " + path);
  std::vector<char> buf;
  char chunk[1 << 16];
  int n;
  while ((n = gzread(f, chunk, sizeof(chunk))) > 0)
    buf.insert(buf.end(), chunk, chunk + n);
  int err = 0;
  gzerror(f, &err);
  gzclose(f);
  require(err == Z_OK || err == Z_STREAM_END, ErrorCode::IoCorruptPayload,
          "corrupt gzip stream: " + path);
  return buf;
}

inline void write_file(const std::string& path, const void* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::IoUnreadable, "cannot open for write: " + path);
  out.write(static_cast<const char*>(data), std::streamsize(n));
  require(out.good(), ErrorCode::IoUnreadable, "write failed: " + path);
}

inline void write_file_gz(const std::string& path, const void* data,
                          std::size_t n) {
  gzFile f = gzopen(path.c_str(), "wb");
  require(f != nullptr, ErrorCode::IoUnreadable, "cannot open for write: " + path);
  const char* p = static_cast<const char*>(data);
  std::size_t off = 0;
  while (off < n) {
    const unsigned chunk = unsigned(std::min<std::size_t>(n - off, 1u << 28));
    const int w = gzwrite(f, p + off, chunk);
    if (w <= 0) {
      gzclose(f);
      fail(ErrorCode::IoUnreadable, "gzip write failed: " + path);
    }
    off += std::size_t(w);
  }
  gzclose(f);
}

inline bool is_gz_payload(const std::vector<char>& b) {
  return b.size() >= 2 && std::uint8_t(b[0]) == 0x1f && std::uint8_t(b[1]) == 0x8b;
}

inline void bswap16(void* p) {
  std::uint16_t v;
  std::memcpy(&v, p, 2);
  v = __builtin_bswap16(v);
  std::memcpy(p, &v, 2);
}
inline void bswap32(void* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  v = __builtin_bswap32(v);
  std::memcpy(p, &v, 4);
}
inline void bswap64(void* p) {
  std::uint64_t v;
  std::memcpy(&v, p, 8);
  v = __builtin_bswap64(v);
  std::memcpy(p, &v, 8);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// NIfTI-1 (single-file .nii, optionally gzip-compressed .nii.gz)
// ---------------------------------------------------------------------------

#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;  // must be 348
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope, scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration, toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

// NIfTI datatype codes (subset supported here)
enum : std::int16_t {
  kNiftiUint8 = 2,
  kNiftiInt16 = 4,
  kNiftiInt32 = 8,
  kNiftiFloat32 = 16,
  kNiftiFloat64 = 64,
  kNiftiInt8 = 256,
  kNiftiUint16 = 512,
};

namespace detail {

inline int nifti_bytes_per_elem(std::int16_t dt) {
  switch (dt) {
    case kNiftiUint8:
    case kNiftiInt8:
      return 1;
    case kNiftiInt16:
    case kNiftiUint16:
      return 2;
    case kNiftiInt32:
    case kNiftiFloat32:
      return 4;
    case kNiftiFloat64:
      return 8;
    default:
      return 0;
  }
}

inline void swap_nifti_header(Nifti1Header& h) {
  bswap32(&h.sizeof_hdr);
  bswap32(&h.extents);
  bswap16(&h.session_error);
  for (auto& d : h.dim) bswap16(&d);
  bswap32(&h.intent_p1);
  bswap32(&h.intent_p2);
  bswap32(&h.intent_p3);
  bswap16(&h.intent_code);
  bswap16(&h.datatype);
  bswap16(&h.bitpix);
  bswap16(&h.slice_start);
  for (auto& p : h.pixdim) bswap32(&p);
  bswap32(&h.vox_offset);
  bswap32(&h.scl_slope);
  bswap32(&h.scl_inter);
  bswap16(&h.slice_end);
  bswap32(&h.cal_max);
  bswap32(&h.cal_min);
  bswap32(&h.slice_duration);
  bswap32(&h.toffset);
  bswap32(&h.glmax);
  bswap32(&h.glmin);
  bswap16(&h.qform_code);
  bswap16(&h.sform_code);
  bswap32(&h.quatern_b);
  bswap32(&h.quatern_c);
  bswap32(&h.quatern_d);
  bswap32(&h.qoffset_x);
  bswap32(&h.qoffset_y);
  bswap32(&h.qoffset_z);
  for (auto& v : h.srow_x) bswap32(&v);
  for (auto& v : h.srow_y) bswap32(&v);
  for (auto& v : h.srow_z) bswap32(&v);
}

struct NiftiPayload {
  GridMeta meta;
  int channels = 1;
  std::int16_t datatype = 0;
  float intent_p1 = 0.0f;
  std::vector<double> values;  // (C, D, H, W), scl applied for float targets
  bool scl_applied = false;
};

inline NiftiPayload parse_nifti(const std::vector<char>& raw,
                                const std::string& path, bool apply_scl) {
  require(raw.size() >= sizeof(Nifti1Header) + 4, ErrorCode::IoCorruptPayload,
          "NIfTI file too small: " + path);
  Nifti1Header h;
  std::memcpy(&h, raw.data(), sizeof(h));
  bool swapped = false;
  if (h.sizeof_hdr != 348) {
    swap_nifti_header(h);
    swapped = true;
    require(h.sizeof_hdr == 348, ErrorCode::IoUnknownFormat,
            "not a NIfTI-1 file (bad sizeof_hdr): " + path);
  }
  const bool magic_ok =
      std::memcmp(h.magic, "n+1", 4) == 0 || std::memcmp(h.magic, "ni1", 4) == 0;
  require(magic_ok, ErrorCode::IoUnknownFormat, "bad NIfTI magic: " + path);
  require(std::memcmp(h.magic, "ni1", 4) != 0, ErrorCode::Unsupported,
          "two-file NIfTI (.hdr/.img) is not supported: " + path);

  const int ndim = h.dim[0];
  require(ndim >= 3 && ndim <= 5, ErrorCode::IoHeaderMismatch,
          "unsupported NIfTI dimensionality: " + path);
  const int nx = h.dim[1], ny = h.dim[2], nz = h.dim[3];
  int nc = 1;
  for (int d = 4; d <= ndim; ++d) nc *= std::max<int>(1, h.dim[d]);
  require(nx >= 1 && ny >= 1 && nz >= 1 && nc >= 1, ErrorCode::IoHeaderMismatch,
          "bad NIfTI dims: " + path);

  const int bpe = nifti_bytes_per_elem(h.datatype);
  require(bpe > 0, ErrorCode::Unsupported,
          "unsupported NIfTI datatype " + std::to_string(h.datatype) + ": " + path);

  std::size_t off = std::size_t(h.vox_offset);
  if (off < sizeof(Nifti1Header) + 4) off = sizeof(Nifti1Header) + 4;
  const std::size_t n_elem = std::size_t(nx) * ny * nz * nc;
  require(raw.size() >= off + n_elem * bpe, ErrorCode::IoCorruptPayload,
          "truncated NIfTI payload: " + path);

  NiftiPayload out;
  // NIfTI stores x fastest; our axis order is (D, H, W) = (z, y, x).
  out.meta.shape = {nz, ny, nx};
  out.meta.spacing = {std::fabs(h.pixdim[3]) > 0 ? double(std::fabs(h.pixdim[3])) : 1.0,
                      std::fabs(h.pixdim[2]) > 0 ? double(std::fabs(h.pixdim[2])) : 1.0,
                      std::fabs(h.pixdim[1]) > 0 ? double(std::fabs(h.pixdim[1])) : 1.0};
  char desc[81] = {0};
  std::memcpy(desc, h.descrip, 80);
  out.meta.space_tag = desc;
  out.channels = nc;
  out.datatype = h.datatype;
  out.intent_p1 = h.intent_p1;
  out.values.resize(n_elem);

  const char* p = raw.data() + off;
  auto load_elems = [&](auto tag) {
    using E = decltype(tag);
    for (std::size_t i = 0; i < n_elem; ++i) {
      E e;
      std::memcpy(&e, p + i * sizeof(E), sizeof(E));
      if (swapped) {
        if constexpr (sizeof(E) == 2) bswap16(&e);
        if constexpr (sizeof(E) == 4) bswap32(&e);
        if constexpr (sizeof(E) == 8) bswap64(&e);
      }
      out.values[i] = double(e);
    }
  };
  switch (h.datatype) {
    case kNiftiUint8: load_elems(std::uint8_t{}); break;
    case kNiftiInt8: load_elems(std::int8_t{}); break;
    case kNiftiInt16: load_elems(std::int16_t{}); break;
    case kNiftiUint16: load_elems(std::uint16_t{}); break;
    case kNiftiInt32: load_elems(std::int32_t{}); break;
    case kNiftiFloat32: load_elems(float{}); break;
    case kNiftiFloat64: load_elems(double{}); break;
  }

  const bool has_scl = h.scl_slope != 0.0f && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f);
  if (has_scl && apply_scl) {
    for (double& v : out.values) v = v * double(h.scl_slope) + double(h.scl_inter);
    out.scl_applied = true;
  } else if (has_scl) {
    fail(ErrorCode::IoHeaderMismatch,
         "NIfTI intensity scaling is not valid for integer label data: " + path);
  }
  return out;
}

inline Nifti1Header make_nifti_header(const GridMeta& g, int channels,
                                      std::int16_t datatype, float intent_p1) {
  Nifti1Header h;
  std::memset(&h, 0, sizeof(h));
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = std::int16_t(channels > 1 ? 4 : 3);
  h.dim[1] = std::int16_t(g.shape[2]);  // nx = W
  h.dim[2] = std::int16_t(g.shape[1]);
  h.dim[3] = std::int16_t(g.shape[0]);
  h.dim[4] = std::int16_t(channels > 1 ? channels : 1);
  for (int d = 5; d < 8; ++d) h.dim[d] = 1;
  h.intent_p1 = intent_p1;
  h.datatype = datatype;
  h.bitpix = std::int16_t(8 * nifti_bytes_per_elem(datatype));
  h.pixdim[0] = 1.0f;
  h.pixdim[1] = float(g.spacing[2]);
  h.pixdim[2] = float(g.spacing[1]);
  h.pixdim[3] = float(g.spacing[0]);
  h.pixdim[4] = 1.0f;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2;  // NIFTI_UNITS_MM
  std::strncpy(h.descrip, g.space_tag.c_str(), sizeof(h.descrip) - 1);
  h.sform_code = 2;  // aligned to some template
  h.srow_x[0] = float(g.spacing[2]);
  h.srow_y[1] = float(g.spacing[1]);
  h.srow_z[2] = float(g.spacing[0]);
  std::memcpy(h.magic, "n+1", 4);
  return h;
}

template <class E>
inline void write_nifti_blob(const std::string& path, const Nifti1Header& h,
                             const std::vector<E>& data) {
  std::vector<char> blob(sizeof(Nifti1Header) + 4 + data.size() * sizeof(E), 0);
  std::memcpy(blob.data(), &h, sizeof(h));
  std::memcpy(blob.data() + sizeof(h) + 4, data.data(), data.size() * sizeof(E));
  if (ends_with(path, ".gz"))
    write_file_gz(path, blob.data(), blob.size());
  else
    write_file(path, blob.data(), blob.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Raw format: <name>.json header + <name>.bin little-endian payload.
// Header schema: {"shape":[D,H,W],"spacing":[sd,sh,sw],"dtype":"f32"|"i32",
//                 "order":"DHW"} with optional "channels", "num_labels",
//                 "space" fields. See docs/file_formats.md.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string raw_header_path(const std::string& path) {
  if (ends_with(path, ".bin")) return path.substr(0, path.size() - 4) + ".json";
  return path;
}

inline std::string raw_payload_path(const std::string& header_path) {
  std::string p = header_path;
  if (ends_with(p, ".json")) p = p.substr(0, p.size() - 5);
  return p + ".bin";
}

struct RawHeader {
  GridMeta meta;
  std::string dtype;
  int channels = 1;
  int num_labels = 0;
};

inline RawHeader parse_raw_header(const std::string& path) {
  const auto buf = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(buf.begin(), buf.end());
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::IoUnknownFormat, "raw header is not valid JSON: " + path);
  }
  RawHeader h;
  try {
    const auto shape = j.at("shape");
    require(shape.is_array() && shape.size() == 3, ErrorCode::IoHeaderMismatch,
            "raw header: 'shape' must be [D,H,W]: " + path);
    for (int i = 0; i < 3; ++i) h.meta.shape[i] = shape[i].get<int>();
    if (j.contains("spacing")) {
      const auto sp = j.at("spacing");
      require(sp.is_array() && sp.size() == 3, ErrorCode::IoHeaderMismatch,
              "raw header: 'spacing' must have 3 entries: " + path);
      for (int i = 0; i < 3; ++i) h.meta.spacing[i] = sp[i].get<double>();
    }
    h.dtype = j.at("dtype").get<std::string>();
    require(h.dtype == "f32" || h.dtype == "i32", ErrorCode::IoHeaderMismatch,
            "raw header: dtype must be 'f32' or 'i32': " + path);
    const std::string order = j.value("order", std::string("DHW"));
    require(order == "DHW", ErrorCode::IoHeaderMismatch,
            "raw header: only order 'DHW' is supported: " + path);
    h.channels = j.value("channels", 1);
    h.num_labels = j.value("num_labels", 0);
    h.meta.space_tag = j.value("space", std::string());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::IoHeaderMismatch,
         std::string("raw header field error: ") + e.what() + ": " + path);
  }
  try {
    h.meta.validate();
  } catch (const SaeError&) {
    fail(ErrorCode::IoHeaderMismatch, "raw header: invalid shape/spacing: " + path);
  }
  require(h.channels >= 1, ErrorCode::IoHeaderMismatch,
          "raw header: channels must be >= 1: " + path);
  return h;
}

template <class E>
inline std::vector<E> read_raw_payload(const RawHeader& h,
                                       const std::string& header_path) {
  const std::string bin = raw_payload_path(header_path);
  const auto buf = read_file(bin);
  const std::size_t expect = std::size_t(h.meta.voxels()) * h.channels * sizeof(E);
  require(buf.size() == expect, ErrorCode::IoCorruptPayload,
          "corrupt payload: " + bin + " has " + std::to_string(buf.size()) +
              " bytes, expected " + std::to_string(expect));
  std::vector<E> out(buf.size() / sizeof(E));
  std::memcpy(out.data(), buf.data(), buf.size());
  return out;
}

inline void write_raw(const std::string& header_path, const GridMeta& meta,
                      const std::string& dtype, int channels, int num_labels,
                      const void* data, std::size_t bytes) {
  nlohmann::json j;
  j["shape"] = {meta.shape[0], meta.shape[1], meta.shape[2]};
  j["spacing"] = {meta.spacing[0], meta.spacing[1], meta.spacing[2]};
  j["dtype"] = dtype;
  j["order"] = "DHW";
  if (channels > 1) j["channels"] = channels;
  if (num_labels > 0) j["num_labels"] = num_labels;
  if (!meta.space_tag.empty()) j["space"] = meta.space_tag;
  const std::string body = j.dump(2) + "\n";
  write_file(header_path, body.data(), body.size());
  write_file(raw_payload_path(header_path), data, bytes);
}

enum class Format { Raw, Nifti };

inline Format detect_format(const std::string& path) {
  if (ends_with(path, ".json") || ends_with(path, ".bin")) return Format::Raw;
  if (ends_with(path, ".nii") || ends_with(path, ".nii.gz")) return Format::Nifti;
  // Sniff: JSON object -> raw header; gzip or 348 header -> NIfTI.
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::IoUnreadable, "cannot open file: " + path);
  char head[4] = {0};
  in.read(head, 4);
  if (head[0] == '{') return Format::Raw;
  if ((std::uint8_t(head[0]) == 0x1f && std::uint8_t(head[1]) == 0x8b)) return Format::Nifti;
  std::int32_t first = 0;
  std::memcpy(&first, head, 4);
  if (first == 348 || __builtin_bswap32(first) == 348) return Format::Nifti;
  fail(ErrorCode::IoUnknownFormat, "unrecognized volume format: " + path);
}

inline std::vector<char> read_maybe_gz(const std::string& path) {
  if (ends_with(path, ".gz")) return read_file_gz(path);
  auto buf = read_file(path);
  if (is_gz_payload(buf)) return read_file_gz(path);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public volume I/O
// ---------------------------------------------------------------------------

inline void save_volume(const IntensityVolume& vol, const std::string& path) {
  vol.meta.validate();
  if (detail::ends_with(path, ".nii") || detail::ends_with(path, ".nii.gz")) {
    auto h = detail::make_nifti_header(vol.meta, 1, kNiftiFloat32, 0.0f);
    detail::write_nifti_blob(path, h, vol.values);
    return;
  }
  detail::write_raw(detail::raw_header_path(path), vol.meta, "f32", 1, 0,
                    vol.values.data(), vol.values.size() * sizeof(float));
}

inline void save_volume(const LabelVolume& vol, const std::string& path) {
  vol.meta.validate();
  if (detail::ends_with(path, ".nii") || detail::ends_with(path, ".nii.gz")) {
    auto h = detail::make_nifti_header(vol.meta, 1, kNiftiInt32,
                                       float(vol.num_labels));
    detail::write_nifti_blob(path, h, vol.labels);
    return;
  }
  detail::write_raw(detail::raw_header_path(path), vol.meta, "i32", 1,
                    vol.num_labels, vol.labels.data(),
                    vol.labels.size() * sizeof(std::int32_t));
}

inline IntensityVolume load_intensity(const std::string& path) {
  IntensityVolume out;
  if (detail::detect_format(path) == detail::Format::Raw) {
    const std::string hp = detail::raw_header_path(path);
    const auto h = detail::parse_raw_header(hp);
    require(h.channels == 1, ErrorCode::IoHeaderMismatch,
            "expected single-channel volume: " + path);
    require(h.dtype == "f32", ErrorCode::IoHeaderMismatch,
            "expected f32 payload for intensity volume: " + path);
    out.meta = h.meta;
    out.values = detail::read_raw_payload<float>(h, hp);
  } else {
    const auto blob = detail::read_maybe_gz(path);
    const auto p = detail::parse_nifti(blob, path, /*apply_scl=*/true);
    require(p.channels == 1, ErrorCode::IoHeaderMismatch,
            "expected single-channel volume: " + path);
    out.meta = p.meta;
    out.values.assign(p.values.begin(), p.values.end());
  }
  out.validate();
  return out;
}

inline LabelVolume load_labels(const std::string& path) {
  LabelVolume out;
  if (detail::detect_format(path) == detail::Format::Raw) {
    const std::string hp = detail::raw_header_path(path);
    const auto h = detail::parse_raw_header(hp);
    require(h.channels == 1, ErrorCode::IoHeaderMismatch,
            "expected single-channel volume: " + path);
    require(h.dtype == "i32", ErrorCode::IoHeaderMismatch,
            "expected i32 payload for label volume: " + path);
    out.meta = h.meta;
    out.labels = detail::read_raw_payload<std::int32_t>(h, hp);
    out.num_labels = h.num_labels;
  } else {
    const auto blob = detail::read_maybe_gz(path);
    const auto p = detail::parse_nifti(blob, path, /*apply_scl=*/false);
    require(p.channels == 1, ErrorCode::IoHeaderMismatch,
            "expected single-channel volume: " + path);
    out.meta = p.meta;
    out.labels.resize(p.values.size());
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      const double v = p.values[i];
      require(std::fabs(v - std::llround(v)) < 1e-3, ErrorCode::IoHeaderMismatch,
              "label volume contains non-integer values: " + path);
      out.labels[i] = std::int32_t(std::llround(v));
    }
    if (p.intent_p1 > 0.0f) out.num_labels = int(std::lround(p.intent_p1));
  }
  if (out.num_labels <= 0) {
    std::int32_t mx = 0;
    for (auto v : out.labels) mx = std::max(mx, v);
    out.num_labels = mx + 1;
  }
  out.validate();
  return out;
}

// Generic entry point: dispatches on the stored element type.
inline std::variant<IntensityVolume, LabelVolume> load_volume(
    const std::string& path) {
  if (detail::detect_format(path) == detail::Format::Raw) {
    const auto h = detail::parse_raw_header(detail::raw_header_path(path));
    if (h.dtype == "i32") return load_labels(path);
    return load_intensity(path);
  }
  const auto blob = detail::read_maybe_gz(path);
  Nifti1Header hdr;
  require(blob.size() >= sizeof(hdr), ErrorCode::IoCorruptPayload,
          "NIfTI file too small: " + path);
  std::memcpy(&hdr, blob.data(), sizeof(hdr));
  if (hdr.sizeof_hdr != 348) detail::swap_nifti_header(hdr);
  const bool integral = hdr.datatype == kNiftiUint8 || hdr.datatype == kNiftiInt8 ||
                        hdr.datatype == kNiftiInt16 || hdr.datatype == kNiftiUint16 ||
                        hdr.datatype == kNiftiInt32;
  if (integral) return load_labels(path);
  return load_intensity(path);
}

// Multi-channel fields (probabilistic atlases). Channel-major (L, D, H, W)
// matches the NIfTI 4-D layout with the channel as the slowest axis.
inline void save_multichannel(const GridMeta& meta, int channels,
                              const std::vector<float>& data,
                              const std::string& path) {
  require(std::int64_t(data.size()) == meta.voxels() * channels,
          ErrorCode::ArgumentError, "multichannel payload size mismatch");
  if (detail::ends_with(path, ".nii") || detail::ends_with(path, ".nii.gz")) {
    auto h = detail::make_nifti_header(meta, channels, kNiftiFloat32, 0.0f);
    detail::write_nifti_blob(path, h, data);
    return;
  }
  detail::write_raw(detail::raw_header_path(path), meta, "f32", channels, 0,
                    data.data(), data.size() * sizeof(float));
}

struct MultiChannelVolume {
  GridMeta meta;
  int channels = 0;
  std::vector<float> data;  // (C, D, H, W)
};

inline MultiChannelVolume load_multichannel(const std::string& path) {
  MultiChannelVolume out;
  if (detail::detect_format(path) == detail::Format::Raw) {
    const std::string hp = detail::raw_header_path(path);
    const auto h = detail::parse_raw_header(hp);
    require(h.dtype == "f32", ErrorCode::IoHeaderMismatch,
            "expected f32 payload for multichannel volume: " + path);
    out.meta = h.meta;
    out.channels = h.channels;
    out.data = detail::read_raw_payload<float>(h, hp);
  } else {
    const auto blob = detail::read_maybe_gz(path);
    const auto p = detail::parse_nifti(blob, path, /*apply_scl=*/true);
    out.meta = p.meta;
    out.channels = p.channels;
    out.data.assign(p.values.begin(), p.values.end());
  }
  require(out.channels >= 1, ErrorCode::IoHeaderMismatch,
          "expected at least one channel: " + path);
  return out;
}

}  // namespace sae::io

#endif  // SAE_IO_HPP
