#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <vector>

#include "promptreg/grid.hpp"

namespace promptreg {

using Coord = std::vector<double>;

namespace detail {

// Calls fn(neighbor_linear_index) for each in-grid face neighbour of `idx`;
// returns the number of out-of-grid faces.
template <typename Fn>
int for_each_face_neighbor(const GridShape& shape, const GridIndex& idx, Fn&& fn) {
  int outside = 0;
  const std::size_t base = shape.linear(idx);
  for (int a = 0; a < shape.ndim(); ++a) {
    const std::size_t st = shape.stride(a);
    if (idx[a] > 0) fn(base - st); else ++outside;
    if (idx[a] + 1 < shape.dim(a)) fn(base + st); else ++outside;
  }
  return outside;
}

// Labels face-connected regions in which every member satisfies `member(i)`
// and neighbours are joined when `same(i, j)` holds. Labels start at 1 in
// scan order; 0 marks non-members.
template <typename Member, typename Same>
std::vector<std::int32_t> label_regions(const GridShape& shape, Member&& member, Same&& same, std::int32_t& count) {
  std::vector<std::int32_t> labels(shape.size(), 0);
  count = 0;
  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < shape.size(); ++seed) {
    if (labels[seed] != 0 || !member(seed)) continue;
    ++count;
    labels[seed] = count;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      for_each_face_neighbor(shape, shape.unravel(cur), [&](std::size_t nb) {
        if (labels[nb] == 0 && member(nb) && same(cur, nb)) {
          labels[nb] = count;
          stack.push_back(nb);
        }
      });
    }
  }
  return labels;
}

}  // namespace detail

/// Member locations with at least one non-member face neighbour. Faces on the
/// grid boundary count as non-member. Result is in lexicographic order.
inline std::vector<GridIndex> extract_contour(const RoiMask& mask) {
  const auto& shape = mask.shape();
  std::vector<GridIndex> contour;
  bool any = false;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    any = true;
    const GridIndex idx = shape.unravel(i);
    bool boundary = false;
    const int outside = detail::for_each_face_neighbor(shape, idx, [&](std::size_t nb) {
      if (!mask[nb]) boundary = true;
    });
    if (boundary || outside > 0) contour.push_back(idx);
  }
  if (!any) throw Error(Errc::EmptyMask, "cannot extract contour of an empty mask");
  return contour;
}

inline Coord centroid(const RoiMask& mask, bool spacing_aware = false) {
  const auto& shape = mask.shape();
  Coord sum(static_cast<std::size_t>(shape.ndim()), 0.0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const GridIndex idx = shape.unravel(i);
    for (int a = 0; a < shape.ndim(); ++a) sum[static_cast<std::size_t>(a)] += static_cast<double>(idx[a]);
    ++n;
  }
  if (n == 0) throw Error(Errc::EmptyMask, "centroid of an empty mask");
  for (int a = 0; a < shape.ndim(); ++a) {
    auto& s = sum[static_cast<std::size_t>(a)];
    s /= static_cast<double>(n);
    if (spacing_aware) s *= shape.spacing(a);
  }
  return sum;
}

/// Face-connected components, ordered by their lowest member index.
inline std::vector<RoiMask> connected_components(const RoiMask& mask) {
  std::int32_t count = 0;
  const auto labels = detail::label_regions(
      mask.shape(), [&](std::size_t i) { return mask[i] != 0; }, [](std::size_t, std::size_t) { return true; },
      count);
  std::vector<std::vector<std::uint8_t>> parts(static_cast<std::size_t>(count),
                                               std::vector<std::uint8_t>(mask.size(), 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > 0) parts[static_cast<std::size_t>(labels[i] - 1)][i] = 1;
  }
  std::vector<RoiMask> out;
  out.reserve(parts.size());
  for (auto& p : parts) out.emplace_back(mask.shape(), std::move(p));
  return out;
}

/// Nearest-neighbour resampling with grid extents aligned corner to corner:
/// target index t maps to source coordinate t * (src - 1) / (tgt - 1).
inline RoiMask resample_mask(const RoiMask& mask, const GridShape& target) {
  const auto& src = mask.shape();
  if (src.ndim() != target.ndim()) throw Error(Errc::AxisMismatch, "resample_mask: axis count differs");
  if (src.same_extent(target)) return RoiMask(target, std::vector<std::uint8_t>(mask.values().begin(), mask.values().end()));

  std::vector<std::vector<std::int64_t>> lut(static_cast<std::size_t>(src.ndim()));
  for (int a = 0; a < src.ndim(); ++a) {
    auto& l = lut[static_cast<std::size_t>(a)];
    const auto tn = target.dim(a);
    const auto sn = src.dim(a);
    l.resize(static_cast<std::size_t>(tn));
    for (std::int64_t t = 0; t < tn; ++t) {
      const double s = tn == 1 ? 0.5 * static_cast<double>(sn - 1)
                               : static_cast<double>(t) * static_cast<double>(sn - 1) / static_cast<double>(tn - 1);
      l[static_cast<std::size_t>(t)] = std::clamp<std::int64_t>(std::llround(s), 0, sn - 1);
    }
  }
  std::vector<std::uint8_t> out(target.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const GridIndex t = target.unravel(i);
    GridIndex s;
    for (int a = 0; a < src.ndim(); ++a) s[a] = lut[static_cast<std::size_t>(a)][static_cast<std::size_t>(t[a])];
    out[i] = mask.at(s);
  }
  return RoiMask(target, std::move(out));
}

}  // namespace promptreg
