#pragma once

// Intensity and label grids plus their on-disk format.
//
// A volume is stored as two files sharing a stem:
//   <stem>.raw   little-endian payload, f32 (intensity) or u8 (labels), x fastest
//   <stem>.json  sidecar {"format":"aunet-volume","version":1,"kind":...,
//                "dtype":...,"dims":[D,H,W],"spacing":[sd,sh,sw],"extra":{...}}

#include <array>
#include <bit>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "aunet/errors.hpp"
#include "aunet/tensor.hpp"

namespace aunet {

using Dims3 = std::array<std::size_t, 3>;
using Spacing3 = std::array<double, 3>;

inline std::size_t voxel_count(const Dims3& d) { return d[0] * d[1] * d[2]; }

struct Volume {
  Dims3 dims{0, 0, 0};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<double> data;

  Volume() = default;
  Volume(Dims3 d, Spacing3 s, double fill = 0.0) : dims(d), spacing(s), data(voxel_count(d), fill) {}

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * dims[1] + y) * dims[2] + x; }
  double& at(std::size_t z, std::size_t y, std::size_t x) { return data[index(z, y, x)]; }
  double at(std::size_t z, std::size_t y, std::size_t x) const { return data[index(z, y, x)]; }
  bool operator==(const Volume&) const = default;
};

struct LabelVolume {
  Dims3 dims{0, 0, 0};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> labels;

  LabelVolume() = default;
  LabelVolume(Dims3 d, Spacing3 s, std::uint8_t fill = 0) : dims(d), spacing(s), labels(voxel_count(d), fill) {}

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * dims[1] + y) * dims[2] + x; }
  std::uint8_t& at(std::size_t z, std::size_t y, std::size_t x) { return labels[index(z, y, x)]; }
  std::uint8_t at(std::size_t z, std::size_t y, std::size_t x) const { return labels[index(z, y, x)]; }
  bool operator==(const LabelVolume&) const = default;
};

inline void validate_grid(const Dims3& dims, const Spacing3& spacing, const char* what) {
  for (std::size_t a = 0; a < 3; ++a) {
    if (dims[a] == 0) throw ConfigError(std::string(what) + ": dims must be positive");
    if (!(spacing[a] > 0.0)) throw ConfigError(std::string(what) + ": spacing must be positive");
  }
}

/// Stack single-channel volumes into an (N,1,D,H,W) tensor.
inline Tensor to_tensor(const std::vector<const Volume*>& vols) {
  if (vols.empty()) throw DimensionError("to_tensor: no volumes");
  const Dims3 d = vols.front()->dims;
  std::vector<double> data;
  data.reserve(vols.size() * voxel_count(d));
  for (const Volume* v : vols) {
    if (v->dims != d) throw DimensionError("to_tensor: volumes differ in dims");
    data.insert(data.end(), v->data.begin(), v->data.end());
  }
  return Tensor(Shape{vols.size(), 1, d[0], d[1], d[2]}, std::move(data));
}

/// One-hot (N, n_classes, D, H, W) encoding of a list of label grids.
inline Tensor one_hot(const std::vector<const LabelVolume*>& labels, std::size_t n_classes) {
  if (labels.empty()) throw DimensionError("one_hot: no label volumes");
  const Dims3 d = labels.front()->dims;
  const std::size_t sp = voxel_count(d);
  Tensor out(Shape{labels.size(), n_classes, d[0], d[1], d[2]}, 0.0);
  auto o = out.mutable_data();
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b]->dims != d) throw DimensionError("one_hot: label volumes differ in dims");
    for (std::size_t i = 0; i < sp; ++i) {
      const std::size_t c = labels[b]->labels[i];
      if (c >= n_classes) {
        throw DimensionError("one_hot: label " + std::to_string(c) + " >= n_classes " + std::to_string(n_classes));
      }
      o[(b * n_classes + c) * sp + i] = 1.0;
    }
  }
  return out;
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "volume I/O assumes a little-endian host");

inline nlohmann::json sidecar(const Dims3& dims, const Spacing3& spacing, const char* kind, const char* dtype,
                              const nlohmann::json& extra) {
  nlohmann::json j;
  j["format"] = "aunet-volume";
  j["version"] = 1;
  j["kind"] = kind;
  j["dtype"] = dtype;
  j["dims"] = {dims[0], dims[1], dims[2]};
  j["spacing"] = {spacing[0], spacing[1], spacing[2]};
  if (!extra.is_null()) j["extra"] = extra;
  return j;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

inline void write_bytes(const std::string& path, const void* p, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed for " + path);
}

struct SidecarInfo {
  Dims3 dims;
  Spacing3 spacing;
  std::string kind, dtype;
  nlohmann::json extra;
};

inline SidecarInfo read_sidecar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path + ": missing sidecar");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt sidecar: " + e.what());
  }
  SidecarInfo s;
  try {
    if (j.at("format").get<std::string>() != "aunet-volume") throw FormatError(path + ": unknown format tag");
    if (j.at("version").get<int>() != 1) throw FormatError(path + ": unsupported sidecar version");
    s.kind = j.at("kind").get<std::string>();
    s.dtype = j.at("dtype").get<std::string>();
    const auto dims = j.at("dims").get<std::vector<std::size_t>>();
    const auto spacing = j.at("spacing").get<std::vector<double>>();
    if (dims.size() != 3 || spacing.size() != 3) throw FormatError(path + ": dims/spacing must have 3 entries");
    for (std::size_t a = 0; a < 3; ++a) {
      s.dims[a] = dims[a];
      s.spacing[a] = spacing[a];
      if (dims[a] == 0 || !(spacing[a] > 0.0)) throw FormatError(path + ": non-positive dims or spacing");
    }
    if (j.contains("extra")) s.extra = j["extra"];
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt sidecar: " + e.what());
  }
  return s;
}

inline std::vector<char> read_payload(const std::string& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError(path + ": missing payload");
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size != expected) {
    throw FormatError(path + ": payload has " + std::to_string(size) + " bytes, sidecar implies " +
                      std::to_string(expected));
  }
  in.seekg(0);
  std::vector<char> buf(size);
  in.read(buf.data(), static_cast<std::streamsize>(size));
  return buf;
}

}  // namespace detail

/// Intensities are written as f32; reading back is bit-exact for any volume
/// whose values are representable in f32.
inline void write_volume(const std::string& stem, const Volume& v, const char* kind = "intensity",
                         const nlohmann::json& extra = nullptr) {
  if (v.data.size() != voxel_count(v.dims)) throw DimensionError("write_volume: data length does not match dims");
  std::vector<float> f(v.data.begin(), v.data.end());
  detail::write_bytes(stem + ".raw", f.data(), f.size() * sizeof(float));
  detail::write_text(stem + ".json", detail::sidecar(v.dims, v.spacing, kind, "f32", extra).dump(2) + "\n");
}

inline void write_labels(const std::string& stem, const LabelVolume& l, const nlohmann::json& extra = nullptr) {
  if (l.labels.size() != voxel_count(l.dims)) throw DimensionError("write_labels: data length does not match dims");
  detail::write_bytes(stem + ".raw", l.labels.data(), l.labels.size());
  detail::write_text(stem + ".json", detail::sidecar(l.dims, l.spacing, "label", "u8", extra).dump(2) + "\n");
}

inline Volume read_volume(const std::string& stem) {
  const auto info = detail::read_sidecar(stem + ".json");
  if (info.dtype != "f32") throw FormatError(stem + ".json: expected dtype f32, got " + info.dtype);
  if (info.kind == "label") throw FormatError(stem + ".json: expected an intensity volume, got kind label");
  const std::size_t n = voxel_count(info.dims);
  const auto buf = detail::read_payload(stem + ".raw", n * sizeof(float));
  Volume v(info.dims, info.spacing);
  for (std::size_t i = 0; i < n; ++i) {
    float f;
    std::memcpy(&f, buf.data() + i * sizeof(float), sizeof(float));
    v.data[i] = f;
  }
  return v;
}

inline LabelVolume read_labels(const std::string& stem) {
  const auto info = detail::read_sidecar(stem + ".json");
  if (info.dtype != "u8" || info.kind != "label") {
    throw FormatError(stem + ".json: expected kind label / dtype u8, got " + info.kind + " / " + info.dtype);
  }
  const std::size_t n = voxel_count(info.dims);
  const auto buf = detail::read_payload(stem + ".raw", n);
  LabelVolume l(info.dims, info.spacing);
  std::memcpy(l.labels.data(), buf.data(), n);
  return l;
}

/// Sidecar "extra" object of a stored volume (null if absent).
inline nlohmann::json read_volume_extra(const std::string& stem) { return detail::read_sidecar(stem + ".json").extra; }

}  // namespace aunet
