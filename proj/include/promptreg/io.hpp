#pragma once

// File formats:
//   * 2D images: 8-bit grayscale PGM (P5) and PNG. Width is axis 0 (x),
//     height is axis 1 (y). Values are clamped to [0, 255] and rounded.
//   * 3D (or 2D) raw volumes: `<path>` holds little-endian float32 values in
//     grid order, `<path>.json` holds {"dims": [...], "spacing": [...]}.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "promptreg/codec.hpp"
#include "promptreg/grid.hpp"

namespace promptreg::io {

struct RgbImage {
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::vector<std::uint8_t> rgb;  // row-major by y, 3 bytes per pixel

  std::uint8_t* px(std::int64_t x, std::int64_t y) {
    return rgb.data() + static_cast<std::size_t>((y * width + x) * 3);
  }
  const std::uint8_t* px(std::int64_t x, std::int64_t y) const {
    return rgb.data() + static_cast<std::size_t>((y * width + x) * 3);
  }
};

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::IoError, "short write to " + path.string());
}

inline std::string extension(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

// Grid order (x-major) <-> scanline order (y rows).
inline std::vector<std::uint8_t> to_scanlines(const Image& img) {
  const auto w = img.shape().dim(0), h = img.shape().dim(1);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(w * h));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      out[static_cast<std::size_t>(y * w + x)] = to_byte(img[static_cast<std::size_t>(x * h + y)]);
  return out;
}

inline Image from_scanlines(std::int64_t w, std::int64_t h, const std::uint8_t* data) {
  std::vector<float> v(static_cast<std::size_t>(w * h));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      v[static_cast<std::size_t>(x * h + y)] = static_cast<float>(data[y * w + x]);
  return Image(GridShape{w, h}, std::move(v));
}

inline void require_2d(const Image& img, const char* what) {
  if (img.shape().ndim() != 2) throw Error(Errc::FormatError, std::string(what) + " supports 2D images only");
}

}  // namespace detail

// ---- PGM -------------------------------------------------------------------

inline Image decode_pgm(std::string_view bytes) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_ws();
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw Error(Errc::FormatError, "malformed PGM header");
    return std::stol(std::string(bytes.substr(start, pos - start)));
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw Error(Errc::FormatError, "not a binary PGM (P5)");
  pos = 2;
  const long w = read_int(), h = read_int(), maxval = read_int();
  if (w < 1 || h < 1) throw Error(Errc::FormatError, "PGM dims must be positive");
  if (maxval < 1 || maxval > 255) throw Error(Errc::FormatError, "only 8-bit PGM is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw Error(Errc::FormatError, "malformed PGM header");
  }
  ++pos;
  if (bytes.size() - pos != static_cast<std::size_t>(w * h)) throw Error(Errc::FormatError, "PGM payload size mismatch");
  return detail::from_scanlines(w, h, reinterpret_cast<const std::uint8_t*>(bytes.data() + pos));
}

inline std::string encode_pgm(const Image& img) {
  detail::require_2d(img, "PGM");
  const auto lines = detail::to_scanlines(img);
  std::string out = "P5\n" + std::to_string(img.shape().dim(0)) + " " + std::to_string(img.shape().dim(1)) + "\n255\n";
  out.append(reinterpret_cast<const char*>(lines.data()), lines.size());
  return out;
}

// ---- PNG -------------------------------------------------------------------

inline Image decode_png(std::string_view bytes) {
  png_image pimg{};
  pimg.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pimg, bytes.data(), bytes.size())) {
    throw Error(Errc::FormatError, std::string("PNG: ") + pimg.message);
  }
  pimg.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(pimg));
  if (!png_image_finish_read(&pimg, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&pimg);
    throw Error(Errc::FormatError, std::string("PNG: ") + pimg.message);
  }
  return detail::from_scanlines(pimg.width, pimg.height, buf.data());
}

inline std::string encode_png_raw(std::int64_t w, std::int64_t h, std::uint32_t format, const std::uint8_t* data) {
  png_image pimg{};
  pimg.version = PNG_IMAGE_VERSION;
  pimg.width = static_cast<png_uint_32>(w);
  pimg.height = static_cast<png_uint_32>(h);
  pimg.format = format;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&pimg, nullptr, &size, 0, data, 0, nullptr)) {
    throw Error(Errc::IoError, std::string("PNG encode: ") + pimg.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&pimg, out.data(), &size, 0, data, 0, nullptr)) {
    throw Error(Errc::IoError, std::string("PNG encode: ") + pimg.message);
  }
  out.resize(size);
  return out;
}

inline std::string encode_png(const Image& img) {
  detail::require_2d(img, "PNG");
  const auto lines = detail::to_scanlines(img);
  return encode_png_raw(img.shape().dim(0), img.shape().dim(1), PNG_FORMAT_GRAY, lines.data());
}

inline std::string encode_png(const RgbImage& img) {
  return encode_png_raw(img.width, img.height, PNG_FORMAT_RGB, img.rgb.data());
}

inline RgbImage decode_png_rgb(std::string_view bytes) {
  png_image pimg{};
  pimg.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pimg, bytes.data(), bytes.size())) {
    throw Error(Errc::FormatError, std::string("PNG: ") + pimg.message);
  }
  pimg.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.width = pimg.width;
  out.height = pimg.height;
  out.rgb.resize(PNG_IMAGE_SIZE(pimg));
  if (!png_image_finish_read(&pimg, nullptr, out.rgb.data(), 0, nullptr)) {
    png_image_free(&pimg);
    throw Error(Errc::FormatError, std::string("PNG: ") + pimg.message);
  }
  return out;
}

inline void save_png(const std::filesystem::path& path, const RgbImage& img) { detail::write_file(path, encode_png(img)); }

// ---- raw volume -------------------------------------------------------------

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

inline Image decode_volume(std::string_view header_json, std::string_view payload) {
  nlohmann::json hdr;
  try {
    hdr = nlohmann::json::parse(header_json);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::FormatError, std::string("volume header: ") + e.what());
  }
  if (!hdr.is_object() || !hdr.contains("dims") || !hdr["dims"].is_array()) {
    throw Error(Errc::FormatError, "volume header needs a dims array");
  }
  std::vector<std::int64_t> dims;
  std::vector<double> spacing;
  try {
    dims = hdr["dims"].get<std::vector<std::int64_t>>();
    if (hdr.contains("spacing")) spacing = hdr["spacing"].get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::FormatError, std::string("volume header: ") + e.what());
  }
  GridShape shape;
  try {
    shape = GridShape(dims, spacing);
  } catch (const Error& e) {
    throw Error(Errc::FormatError, e.what());
  }
  auto values = codec::unpack_f32_le(payload);
  if (values.size() != shape.size()) {
    throw Error(Errc::FormatError, "volume payload has " + std::to_string(values.size()) + " values, dims imply " +
                                       std::to_string(shape.size()));
  }
  try {
    return Image(shape, std::move(values));
  } catch (const Error& e) {
    throw Error(Errc::FormatError, e.what());
  }
}

inline nlohmann::json volume_header(const GridShape& shape) {
  return {{"dims", std::vector<std::int64_t>(shape.dims().begin(), shape.dims().end())},
          {"spacing", std::vector<double>(shape.spacings().begin(), shape.spacings().end())}};
}

inline Image load_volume(const std::filesystem::path& path) {
  return decode_volume(detail::read_file(sidecar_path(path)), detail::read_file(path));
}

inline void save_volume(const std::filesystem::path& path, const Image& img) {
  detail::write_file(path, codec::pack_f32_le(img.values()));
  detail::write_file(sidecar_path(path), volume_header(img.shape()).dump() + "\n");
}

// ---- dispatch by extension -------------------------------------------------

inline Image load_image(const std::filesystem::path& path) {
  const auto ext = detail::extension(path);
  if (ext == ".pgm") return decode_pgm(detail::read_file(path));
  if (ext == ".png") return decode_png(detail::read_file(path));
  if (ext == ".raw") return load_volume(path);
  throw Error(Errc::FormatError, "unsupported image extension '" + ext + "'");
}

inline void save_image(const std::filesystem::path& path, const Image& img) {
  const auto ext = detail::extension(path);
  if (ext == ".pgm") return detail::write_file(path, encode_pgm(img));
  if (ext == ".png") return detail::write_file(path, encode_png(img));
  if (ext == ".raw") return save_volume(path, img);
  throw Error(Errc::FormatError, "unsupported image extension '" + ext + "'");
}

inline LabelMap labels_from_image(const Image& img) {
  std::vector<std::int32_t> v(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const float x = img[i];
    if (x < 0.0f) throw Error(Errc::FormatError, "negative label value");
    v[i] = static_cast<std::int32_t>(std::lround(x));
  }
  return LabelMap(img.shape(), std::move(v));
}

inline Image image_from_labels(const LabelMap& labels) {
  std::vector<float> v(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) v[i] = static_cast<float>(labels[i]);
  return Image(labels.shape(), std::move(v));
}

inline LabelMap load_labels(const std::filesystem::path& path) { return labels_from_image(load_image(path)); }
inline void save_labels(const std::filesystem::path& path, const LabelMap& labels) {
  save_image(path, image_from_labels(labels));
}

// JSON embedding used by the HTTP surfaces: {"dims", "spacing"?, "data": base64 float32-LE}.
inline nlohmann::json image_to_json(const Image& img) {
  auto j = volume_header(img.shape());
  j["data"] = codec::encode_f32_base64(img.values());
  return j;
}

inline Image image_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("data") || !j["data"].is_string()) {
    throw Error(Errc::FormatError, "image object needs dims and a base64 data string");
  }
  for (const auto& [key, _] : j.items()) {
    if (key != "dims" && key != "spacing" && key != "data") throw Error(Errc::FormatError, "unexpected image field '" + key + "'");
  }
  nlohmann::json hdr = j;
  hdr.erase("data");
  return decode_volume(hdr.dump(), codec::base64_decode(j["data"].get<std::string>()));
}

}  // namespace promptreg::io
