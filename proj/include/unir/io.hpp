// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "unir/color.hpp"
#include "unir/network.hpp"
#include "unir/synthesis.hpp"

namespace unir::io {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;
using net::NetWeights;

// ---------------------------------------------------------------- images

namespace detail {

inline std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("IoError", "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& path, const void* data, std::size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("IoError", "cannot create '" + path.string() + "'");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw Error("IoError", "write failed for '" + path.string() + "'");
}

inline std::string lower_ext(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

// Reads the IHDR fields directly; libpng's simplified reader would
// silently narrow 16-bit samples.
inline void check_png_header(const std::vector<std::uint8_t>& bytes, const fs::path& path) {
  if (bytes.size() < 33) throw Error("TruncatedFile", "'" + path.string() + "' is too short for a PNG header");
  const std::uint8_t depth = bytes[24];
  if (depth == 16) throw Error("UnsupportedDepth", "'" + path.string() + "' has 16-bit samples; only 8-bit is supported");
}

inline ImageU8 decode_png(const std::vector<std::uint8_t>& bytes, const fs::path& path) {
  check_png_header(bytes, path);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw Error("DecodeError", "'" + path.string() + "': " + image.message);
  // Decode with alpha so it can be dropped rather than composited.
  image.format = PNG_FORMAT_RGBA;
  std::vector<std::uint8_t> rgba(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgba.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw Error("TruncatedFile", "'" + path.string() + "': " + msg);
  }
  ImageU8 out(image.height, image.width);
  for (std::size_t i = 0; i < out.pixels(); ++i) std::memcpy(&out.data[i * 3], &rgba[i * 4], 3);
  return out;
}

inline void encode_png(const ImageU8& img, const fs::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(image, size, 0, img.data.data(), 0, nullptr))
    throw Error("EncodeError", "'" + path.string() + "': " + image.message);
  std::vector<std::uint8_t> buf(size);
  if (!png_image_write_to_memory(&image, buf.data(), &size, 0, img.data.data(), 0, nullptr))
    throw Error("EncodeError", "'" + path.string() + "': " + image.message);
  write_file(path, buf.data(), size);
}

inline ImageU8 decode_ppm(const std::vector<std::uint8_t>& bytes, const fs::path& path) {
  std::size_t pos = 2;
  auto next_token = [&]() -> long {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    long v = 0;
    bool any = false;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0'), any = true;
    if (!any) throw Error("DecodeError", "'" + path.string() + "': malformed PPM header");
    return v;
  };
  const long w = next_token(), h = next_token(), maxval = next_token();
  if (maxval != 255) throw Error("UnsupportedDepth", "'" + path.string() + "': PPM maxval " + std::to_string(maxval));
  ++pos;  // single whitespace before raster
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (bytes.size() < pos + need) throw Error("TruncatedFile", "'" + path.string() + "': PPM raster is truncated");
  return ImageU8(static_cast<std::size_t>(h), static_cast<std::size_t>(w),
                 std::vector<std::uint8_t>(bytes.begin() + static_cast<long>(pos),
                                           bytes.begin() + static_cast<long>(pos + need)));
}

}  // namespace detail

// PNG (8-bit gray/RGB/RGBA/palette; alpha dropped) or binary PPM (P6).
inline ImageU8 load_image(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  static constexpr std::array<std::uint8_t, 8> png_sig = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(png_sig.begin(), png_sig.end(), bytes.begin()))
    return detail::decode_png(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return detail::decode_ppm(bytes, path);
  throw Error("UnsupportedFormat", "'" + path.string() + "' is neither PNG nor binary PPM");
}

// Format chosen by extension: .ppm writes P6, anything else PNG.
inline void save_image(const ImageU8& img, const fs::path& path) {
  if (detail::lower_ext(path) == ".ppm") {
    std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> buf(header.begin(), header.end());
    buf.insert(buf.end(), img.data.begin(), img.data.end());
    detail::write_file(path, buf.data(), buf.size());
    return;
  }
  detail::encode_png(img, path);
}

// A pixel belongs to the mask when any channel exceeds 127.
inline synth::BinaryMask load_mask(const fs::path& path) {
  const ImageU8 img = load_image(path);
  synth::BinaryMask mask(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels(); ++i)
    mask.data[i] = (img.data[i * 3] > 127 || img.data[i * 3 + 1] > 127 || img.data[i * 3 + 2] > 127) ? 1 : 0;
  return mask;
}

// ---------------------------------------------------------------- weights

inline constexpr char kMagic[4] = {'U', 'N', 'I', 'R'};
inline constexpr std::uint32_t kFormatVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
  bool operator==(const NamedTensor&) const = default;
};

namespace detail {

class Writer {
public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  const std::string& str() const { return buf_; }

private:
  std::string buf_;
};

class Reader {
public:
  Reader(const std::vector<std::uint8_t>& data, std::string source) : data_(data), source_(std::move(source)) {}
  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n, "string");
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

private:
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n)
      throw Error("TruncatedFile", "'" + source_ + "' ends inside a " + what + " at byte " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& data_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline void write_entries(Writer& w, const std::vector<NamedTensor>& entries) {
  std::set<std::string> seen;
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (!seen.insert(e.name).second) throw Error("DuplicateName", "tensor '" + e.name + "' written twice");
    if (e.values.size() != shape_numel(e.shape)) throw Error("ShapeMismatch", "tensor '" + e.name + "' payload size");
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : e.values) w.f32(v);
  }
}

inline std::vector<NamedTensor> read_entries(Reader& r) {
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    e.name = r.bytes(r.u32());
    if (!seen.insert(e.name).second) throw Error("DuplicateName", "tensor '" + e.name + "' stored twice");
    const std::uint32_t ndim = r.u32();
    for (std::uint32_t d = 0; d < ndim; ++d) e.shape.push_back(r.u32());
    const std::size_t n = shape_numel(e.shape);
    if (r.remaining() / 4 < n) throw Error("TruncatedFile", "payload of '" + e.name + "' is truncated");
    e.values.resize(n);
    for (auto& v : e.values) v = r.f32();
    out.push_back(std::move(e));
  }
  return out;
}

inline void read_header(Reader& r, const std::string& source) {
  const std::string magic = r.bytes(4);
  if (magic != std::string(kMagic, 4)) throw Error("BadMagic", "'" + source + "' is not a UNIR weight file");
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw Error("UnknownVersion", "'" + source + "' has format version " + std::to_string(version));
}

inline std::vector<NamedTensor> to_entries(const std::vector<Parameter>& params, const std::string& prefix = "") {
  std::vector<NamedTensor> out;
  for (const auto& p : params)
    out.push_back({prefix + p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  return out;
}

// Fill `weights` (already shaped from a config) from stored entries.
inline void assign(NetWeights& weights, const std::vector<NamedTensor>& entries, const std::string& prefix,
                   const std::string& source) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& e : entries)
    if (e.name.starts_with(prefix)) by_name[e.name.substr(prefix.size())] = &e;
  for (auto& p : weights.params()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end())
      throw Error("MissingParameter", "'" + source + "' has no tensor '" + prefix + p.name + "'");
    if (it->second->shape != p.tensor.shape())
      throw Error("ShapeMismatch", "tensor '" + prefix + p.name + "' in '" + source + "' has shape " +
                                       shape_str(it->second->shape) + ", config expects " +
                                       shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    std::copy(it->second->values.begin(), it->second->values.end(), dst.begin());
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw Error("UnexpectedParameter", "'" + source + "' has tensor '" + prefix + by_name.begin()->first +
                                           "' not produced by the config");
}

}  // namespace detail

inline std::string encode_weights(const std::vector<NamedTensor>& entries) {
  detail::Writer w;
  w.bytes(kMagic, 4);
  w.u32(kFormatVersion);
  detail::write_entries(w, entries);
  return w.str();
}

inline std::vector<NamedTensor> read_weight_entries(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  detail::Reader r(bytes, path.string());
  detail::read_header(r, path.string());
  return detail::read_entries(r);
}

inline void save_weights(const NetWeights& weights, const fs::path& path) {
  const std::string buf = encode_weights(detail::to_entries(weights.params()));
  detail::write_file(path, buf.data(), buf.size());
}

// Entries must match the config's names and shapes exactly. Also accepts a
// checkpoint, whose first section is a weight file.
inline NetWeights load_weights(const fs::path& path, const net::NetConfig& config) {
  NetWeights weights = net::make_weights(config);
  detail::assign(weights, read_weight_entries(path), "", path.string());
  return weights;
}

// ---------------------------------------------------------------- checkpoints

struct Checkpoint {
  NetWeights weights;
  NetWeights adam_m;  // first moments, same names as weights
  NetWeights adam_v;  // second moments
  Json meta;          // step, epoch, configs, RNG state
};

inline void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  detail::Writer w;
  w.bytes(kMagic, 4);
  w.u32(kFormatVersion);
  detail::write_entries(w, detail::to_entries(ckpt.weights.params()));
  auto moments = detail::to_entries(ckpt.adam_m.params(), "m:");
  auto second = detail::to_entries(ckpt.adam_v.params(), "v:");
  moments.insert(moments.end(), second.begin(), second.end());
  detail::write_entries(w, moments);
  const std::string trailer = ckpt.meta.dump();
  w.u32(static_cast<std::uint32_t>(trailer.size()));
  w.bytes(trailer.data(), trailer.size());
  detail::write_file(path, w.str().data(), w.str().size());
}

inline Checkpoint load_checkpoint(const fs::path& path, const net::NetConfig& config) {
  const auto bytes = detail::read_file(path);
  const std::string source = path.string();
  detail::Reader r(bytes, source);
  detail::read_header(r, source);
  Checkpoint ckpt{net::make_weights(config), net::make_weights(config), net::make_weights(config), Json::object()};
  detail::assign(ckpt.weights, detail::read_entries(r), "", source);
  const auto moments = detail::read_entries(r);
  std::vector<NamedTensor> m, v;
  for (const auto& e : moments) (e.name.starts_with("m:") ? m : v).push_back(e);
  detail::assign(ckpt.adam_m, m, "m:", source);
  detail::assign(ckpt.adam_v, v, "v:", source);
  const std::string trailer = r.bytes(r.u32());
  try {
    ckpt.meta = Json::parse(trailer);
  } catch (const nlohmann::json::exception& e) {
    throw Error("DecodeError", "'" + source + "' checkpoint trailer: " + e.what());
  }
  return ckpt;
}

// Reads only the JSON trailer, e.g. to recover the config before shaping weights.
inline Json read_checkpoint_meta(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  detail::Reader r(bytes, path.string());
  detail::read_header(r, path.string());
  detail::read_entries(r);
  detail::read_entries(r);
  return Json::parse(r.bytes(r.u32()));
}

// ---------------------------------------------------------------- manifests

struct ManifestRecord {
  std::string id;
  std::string low_path;
  std::string gt_path;
  std::optional<std::string> mask_path;
  std::optional<Json> synth_params;
  Json extra = Json::object();  // unknown keys, preserved in order

  bool operator==(const ManifestRecord&) const = default;
};

inline Json to_json(const ManifestRecord& r) {
  Json j = Json::object();
  j["id"] = r.id;
  j["low_path"] = r.low_path;
  j["gt_path"] = r.gt_path;
  if (r.mask_path) j["mask_path"] = *r.mask_path;
  if (r.synth_params) j["synth_params"] = *r.synth_params;
  for (const auto& [k, v] : r.extra.items()) j[k] = v;
  return j;
}

inline void write_manifest(const std::vector<ManifestRecord>& records, const fs::path& path) {
  std::set<std::string> ids;
  std::string out;
  for (const auto& r : records) {
    if (!ids.insert(r.id).second) throw Error("DuplicateId", "manifest id '" + r.id + "' repeated");
    out += to_json(r).dump() + "\n";
  }
  detail::write_file(path, out.data(), out.size());
}

inline std::vector<ManifestRecord> parse_manifest(std::istream& in, const std::string& source) {
  std::vector<ManifestRecord> records;
  std::set<std::string> ids;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto where = [&] { return source + " line " + std::to_string(lineno); };
    Json j;
    try {
      j = Json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error("ParseError", where() + ": " + e.what());
    }
    if (!j.is_object()) throw Error("ParseError", where() + ": expected a JSON object");
    ManifestRecord r;
    auto required = [&](const char* key) {
      if (!j.contains(key) || !j[key].is_string()) throw Error("InvalidManifest", where() + ": missing string '" + key + "'");
      return j[key].get<std::string>();
    };
    r.id = required("id");
    r.low_path = required("low_path");
    r.gt_path = required("gt_path");
    for (const auto& [k, v] : j.items()) {
      if (k == "id" || k == "low_path" || k == "gt_path") continue;
      if (k == "mask_path" && v.is_string()) r.mask_path = v.get<std::string>();
      else if (k == "synth_params") r.synth_params = v;
      else r.extra[k] = v;
    }
    if (!ids.insert(r.id).second) throw Error("DuplicateId", where() + ": id '" + r.id + "' repeated");
    records.push_back(std::move(r));
  }
  return records;
}

inline std::vector<ManifestRecord> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("IoError", "cannot open manifest '" + path.string() + "'");
  return parse_manifest(in, path.string());
}

// Relative manifest paths are relative to the manifest's directory.
inline fs::path resolve(const fs::path& manifest, const std::string& entry) {
  const fs::path p(entry);
  return p.is_absolute() ? p : manifest.parent_path() / p;
}

// Every referenced file must exist; reports the first missing path.
inline void check_manifest_files(const std::vector<ManifestRecord>& records, const fs::path& manifest) {
  for (const auto& r : records)
    for (const std::string* p : {&r.low_path, &r.gt_path})
      if (!fs::exists(resolve(manifest, *p)))
        throw Error("MissingFile", "manifest '" + manifest.string() + "' id '" + r.id + "' references missing '" +
                                       resolve(manifest, *p).string() + "'");
}

}  // namespace unir::io
