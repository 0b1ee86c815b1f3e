#pragma once

// Prompt/ROI visualisation: grayscale image, one coloured contour per mask,
// and a plus-shaped marker per prompt point (green positive, red negative).
// Volumes are rendered as one axial slice (fixed z).

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "promptreg/geometry.hpp"
#include "promptreg/grid.hpp"
#include "promptreg/io.hpp"
#include "promptreg/segmenter.hpp"

namespace promptreg {

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr Rgb kPositiveColor{0, 255, 0};
inline constexpr Rgb kNegativeColor{255, 0, 0};
inline constexpr int kMarkerArm = 2;

// Contour colours; none equals a marker colour.
inline constexpr std::array<Rgb, 6> kContourPalette{{
    {255, 255, 0}, {0, 255, 255}, {255, 0, 255}, {255, 128, 0}, {64, 128, 255}, {255, 255, 255}}};

inline Rgb contour_color(std::size_t i) { return kContourPalette[i % kContourPalette.size()]; }

namespace detail {

// 2D view of an image or mask: the grid itself, or the axial slice z of a volume.
inline GridShape slice_shape(const GridShape& s) { return GridShape({s.dim(0), s.dim(1)}); }

inline std::int64_t check_slice(const GridShape& s, std::optional<std::int64_t> slice) {
  if (s.ndim() == 2) return 0;
  const auto z = slice.value_or(s.dim(2) / 2);
  if (z < 0 || z >= s.dim(2)) throw Error(Errc::PointOutOfBounds, "slice index outside the volume");
  return z;
}

inline RoiMask mask_slice(const RoiMask& m, std::int64_t z) {
  if (m.shape().ndim() == 2) return m;
  const auto s2 = slice_shape(m.shape());
  std::vector<std::uint8_t> out(s2.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    GridIndex idx = s2.unravel(i);
    idx[2] = z;
    out[i] = m.at(idx);
  }
  return RoiMask(s2, std::move(out));
}

}  // namespace detail

inline io::RgbImage render_overlay(const Image& img, std::span<const RoiMask> masks, std::span<const PromptPoint> prompts,
                                   std::optional<std::int64_t> slice = std::nullopt) {
  const auto& shape = img.shape();
  const auto z = detail::check_slice(shape, slice);
  io::RgbImage out{shape.dim(0), shape.dim(1), {}};
  out.rgb.resize(static_cast<std::size_t>(out.width * out.height * 3));
  for (std::int64_t y = 0; y < out.height; ++y) {
    for (std::int64_t x = 0; x < out.width; ++x) {
      GridIndex idx = make_index({x, y});
      if (shape.ndim() == 3) idx[2] = z;
      const auto g = io::detail::to_byte(img.at(idx));
      auto* p = out.px(x, y);
      p[0] = p[1] = p[2] = g;
    }
  }
  auto paint = [&](std::int64_t x, std::int64_t y, const Rgb& c) {
    if (x < 0 || y < 0 || x >= out.width || y >= out.height) return;
    auto* p = out.px(x, y);
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  };

  for (std::size_t k = 0; k < masks.size(); ++k) {
    if (!masks[k].shape().same_extent(shape)) throw Error(Errc::ShapeMismatch, "overlay mask differs from image grid");
    const auto m2 = detail::mask_slice(masks[k], z);
    if (cardinality(m2) == 0) continue;
    for (const auto& c : extract_contour(m2)) paint(c[0], c[1], contour_color(k));
  }
  for (const auto& p : prompts) {
    if (!shape.contains(p.location)) throw Error(Errc::PointOutOfBounds, "overlay prompt outside image grid");
    if (shape.ndim() == 3 && p.location[2] != z) continue;
    const auto& c = p.polarity == Polarity::Positive ? kPositiveColor : kNegativeColor;
    for (int d = -kMarkerArm; d <= kMarkerArm; ++d) {
      paint(p.location[0] + d, p.location[1], c);
      paint(p.location[0], p.location[1] + d, c);
    }
  }
  return out;
}

inline void save_overlay(const std::filesystem::path& path, const Image& img, std::span<const RoiMask> masks,
                         std::span<const PromptPoint> prompts, std::optional<std::int64_t> slice = std::nullopt) {
  io::save_png(path, render_overlay(img, masks, prompts, slice));
}

}  // namespace promptreg
