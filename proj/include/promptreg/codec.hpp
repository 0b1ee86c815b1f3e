#pragma once

// Byte-level helpers for the wire and file formats: little-endian float32
// payloads and base64 text.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <boost/beast/core/detail/base64.hpp>

#include "promptreg/error.hpp"

namespace promptreg::codec {

inline std::uint32_t byteswap32(std::uint32_t v) {
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

template <typename T>
std::string pack_f32_le(std::span<const T> values) {
  std::string out(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    if constexpr (std::endian::native == std::endian::big) bits = byteswap32(bits);
    std::memcpy(out.data() + i * 4, &bits, 4);
  }
  return out;
}

inline std::vector<float> unpack_f32_le(std::string_view bytes) {
  if (bytes.size() % 4 != 0) throw Error(Errc::FormatError, "float32 payload length is not a multiple of 4");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + i * 4, 4);
    if constexpr (std::endian::native == std::endian::big) bits = byteswap32(bits);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

// float64 variant, used where maps must cross the wire bit for bit.
inline std::string pack_f64_le(std::span<const double> values) {
  std::string out(values.size() * 8, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(values[i]);
    if constexpr (std::endian::native == std::endian::big) {
      bits = (static_cast<std::uint64_t>(byteswap32(static_cast<std::uint32_t>(bits))) << 32) |
             byteswap32(static_cast<std::uint32_t>(bits >> 32));
    }
    std::memcpy(out.data() + i * 8, &bits, 8);
  }
  return out;
}

inline std::vector<double> unpack_f64_le(std::string_view bytes) {
  if (bytes.size() % 8 != 0) throw Error(Errc::FormatError, "float64 payload length is not a multiple of 8");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, bytes.data() + i * 8, 8);
    if constexpr (std::endian::native == std::endian::big) {
      bits = (static_cast<std::uint64_t>(byteswap32(static_cast<std::uint32_t>(bits))) << 32) |
             byteswap32(static_cast<std::uint32_t>(bits >> 32));
    }
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

inline std::string base64_encode(std::string_view bytes) {
  namespace b64 = boost::beast::detail::base64;
  std::string out(b64::encoded_size(bytes.size()), '\0');
  out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

inline std::string base64_decode(std::string_view text) {
  namespace b64 = boost::beast::detail::base64;
  std::string out(b64::decoded_size(text.size()), '\0');
  const auto [written, consumed] = b64::decode(out.data(), text.data(), text.size());
  // beast stops silently at the first invalid character or at padding
  std::size_t pad = 0;
  while (consumed + pad < text.size() && text[consumed + pad] == '=') ++pad;
  if (consumed + pad != text.size() || pad > 2) throw Error(Errc::FormatError, "invalid base64 payload");
  out.resize(written);
  return out;
}

template <typename T>
std::string encode_f32_base64(std::span<const T> values) {
  return base64_encode(pack_f32_le(values));
}

inline std::vector<float> decode_f32_base64(std::string_view text) { return unpack_f32_le(base64_decode(text)); }

}  // namespace promptreg::codec
