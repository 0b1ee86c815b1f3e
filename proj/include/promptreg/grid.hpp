#pragma once

// Grid containers shared by every module.
//
// Coordinates are written (x, y[, z]); axis 0 is x. Values are stored in
// row-major order over the index tuple, i.e. the last axis varies fastest:
//   linear(i) = (i0 * d1 + i1) * d2 + i2
// so scanning the buffer front to back visits indices in lexicographic order.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "promptreg/error.hpp"

namespace promptreg {

inline constexpr int kMaxAxes = 3;

struct GridIndex {
  std::array<std::int64_t, kMaxAxes> c{};

  constexpr std::int64_t& operator[](int axis) { return c[static_cast<std::size_t>(axis)]; }
  constexpr std::int64_t operator[](int axis) const { return c[static_cast<std::size_t>(axis)]; }

  friend constexpr auto operator<=>(const GridIndex&, const GridIndex&) = default;
};

inline GridIndex make_index(std::initializer_list<std::int64_t> coords) {
  if (coords.size() > kMaxAxes) throw Error(Errc::InvalidArgument, "too many coordinates");
  GridIndex idx;
  std::size_t a = 0;
  for (auto v : coords) idx.c[a++] = v;
  return idx;
}

class GridShape {
 public:
  GridShape() = default;

  GridShape(std::initializer_list<std::int64_t> dims)
      : GridShape(std::span<const std::int64_t>(dims.begin(), dims.size())) {}

  explicit GridShape(std::span<const std::int64_t> dims, std::span<const double> spacing = {}) {
    if (dims.size() != 2 && dims.size() != 3) {
      throw Error(Errc::InvalidArgument, "grid must have 2 or 3 axes, got " + std::to_string(dims.size()));
    }
    if (!spacing.empty() && spacing.size() != dims.size()) {
      throw Error(Errc::AxisMismatch, "spacing axis count differs from dims");
    }
    ndim_ = static_cast<int>(dims.size());
    for (std::size_t a = 0; a < dims.size(); ++a) {
      if (dims[a] < 1) throw Error(Errc::InvalidArgument, "grid dims must be >= 1");
      dims_[a] = dims[a];
      if (!spacing.empty()) {
        if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) {
          throw Error(Errc::InvalidArgument, "grid spacing must be finite and > 0");
        }
        spacing_[a] = spacing[a];
      }
    }
  }

  GridShape with_spacing(std::span<const double> spacing) const {
    return GridShape(dims(), spacing);
  }

  int ndim() const { return ndim_; }
  std::int64_t dim(int axis) const { return dims_[static_cast<std::size_t>(axis)]; }
  double spacing(int axis) const { return spacing_[static_cast<std::size_t>(axis)]; }
  std::span<const std::int64_t> dims() const { return {dims_.data(), static_cast<std::size_t>(ndim_)}; }
  std::span<const double> spacings() const { return {spacing_.data(), static_cast<std::size_t>(ndim_)}; }

  std::size_t size() const {
    std::size_t n = 1;
    for (int a = 0; a < ndim_; ++a) n *= static_cast<std::size_t>(dims_[static_cast<std::size_t>(a)]);
    return n;
  }

  bool contains(const GridIndex& idx) const {
    for (int a = 0; a < ndim_; ++a) {
      if (idx[a] < 0 || idx[a] >= dim(a)) return false;
    }
    return true;
  }

  std::size_t linear(const GridIndex& idx) const {
    std::size_t off = 0;
    for (int a = 0; a < ndim_; ++a) off = off * static_cast<std::size_t>(dim(a)) + static_cast<std::size_t>(idx[a]);
    return off;
  }

  GridIndex unravel(std::size_t off) const {
    GridIndex idx;
    for (int a = ndim_ - 1; a >= 0; --a) {
      const auto d = static_cast<std::size_t>(dim(a));
      idx[a] = static_cast<std::int64_t>(off % d);
      off /= d;
    }
    return idx;
  }

  std::size_t stride(int axis) const {
    std::size_t s = 1;
    for (int a = ndim_ - 1; a > axis; --a) s *= static_cast<std::size_t>(dim(a));
    return s;
  }

  /// Same axis count and dims; spacing is not compared.
  bool same_extent(const GridShape& o) const {
    if (ndim_ != o.ndim_) return false;
    for (int a = 0; a < ndim_; ++a) {
      if (dim(a) != o.dim(a)) return false;
    }
    return true;
  }

  std::string str() const {
    std::string s;
    for (int a = 0; a < ndim_; ++a) {
      if (a) s += "x";
      s += std::to_string(dim(a));
    }
    return s;
  }

  friend bool operator==(const GridShape& l, const GridShape& r) {
    if (!l.same_extent(r)) return false;
    for (int a = 0; a < l.ndim_; ++a) {
      if (l.spacing(a) != r.spacing(a)) return false;
    }
    return true;
  }

 private:
  int ndim_ = 2;
  std::array<std::int64_t, kMaxAxes> dims_{1, 1, 1};
  std::array<double, kMaxAxes> spacing_{1.0, 1.0, 1.0};
};

// Value policies: each grid flavour validates its payload once, at construction.
struct ImageValues {
  static bool valid(float v) { return std::isfinite(v); }
  static constexpr const char* name = "image";
};
struct ProbabilityValues {
  static bool valid(double v) { return v >= 0.0 && v <= 1.0; }
  static constexpr const char* name = "probability map";
};
struct MaskValues {
  static bool valid(std::uint8_t v) { return v <= 1; }
  static constexpr const char* name = "mask";
};
struct LabelValues {
  static bool valid(std::int32_t v) { return v >= 0; }
  static constexpr const char* name = "label map";
};

/// Immutable N-d grid of scalars. The policy type both validates values and
/// makes Image / ProbabilityMap / RoiMask distinct types.
template <typename T, typename Policy>
class Grid {
 public:
  using value_type = T;

  Grid() : values_(1, T{}) {}

  explicit Grid(GridShape shape, T fill = T{}) : shape_(shape), values_(shape.size(), fill) {
    if (!Policy::valid(fill)) throw Error(Errc::InvalidArgument, std::string("invalid fill for ") + Policy::name);
  }

  Grid(GridShape shape, std::vector<T> values) : shape_(shape), values_(std::move(values)) {
    if (values_.size() != shape_.size()) {
      throw Error(Errc::ShapeMismatch, std::string(Policy::name) + " value count " + std::to_string(values_.size()) +
                                           " != grid size " + std::to_string(shape_.size()));
    }
    for (const auto& v : values_) {
      if (!Policy::valid(v)) throw Error(Errc::InvalidArgument, std::string("invalid value in ") + Policy::name);
    }
  }

  const GridShape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::span<const T> values() const { return values_; }
  T operator[](std::size_t i) const { return values_[i]; }
  T at(const GridIndex& idx) const { return values_[shape_.linear(idx)]; }

  friend bool operator==(const Grid& l, const Grid& r) { return l.shape_ == r.shape_ && l.values_ == r.values_; }

 private:
  GridShape shape_;
  std::vector<T> values_;
};

using Image = Grid<float, ImageValues>;
using ProbabilityMap = Grid<double, ProbabilityValues>;
using RoiMask = Grid<std::uint8_t, MaskValues>;
using LabelMap = Grid<std::int32_t, LabelValues>;

/// Per-location feature vectors on the (possibly coarser) feature grid.
class FeatureVolume {
 public:
  FeatureVolume() = default;
  FeatureVolume(GridShape shape, std::size_t channels, std::vector<double> data)
      : shape_(shape), channels_(channels), data_(std::move(data)) {
    if (channels_ == 0) throw Error(Errc::InvalidArgument, "feature volume needs >= 1 channel");
    if (data_.size() != shape_.size() * channels_) {
      throw Error(Errc::ShapeMismatch, "feature payload size does not match dims x channels");
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw Error(Errc::InvalidArgument, "non-finite feature value");
    }
  }

  const GridShape& shape() const { return shape_; }
  std::size_t channels() const { return channels_; }
  std::size_t locations() const { return shape_.size(); }
  std::span<const double> vector(std::size_t loc) const { return {data_.data() + loc * channels_, channels_}; }
  std::span<const double> data() const { return data_; }

 private:
  GridShape shape_;
  std::size_t channels_ = 1;
  std::vector<double> data_ = std::vector<double>(1, 0.0);
};

inline constexpr double kDefaultBinarizeThreshold = 0.5;

inline RoiMask binarize(const ProbabilityMap& p, double threshold = kDefaultBinarizeThreshold) {
  std::vector<std::uint8_t> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = p[i] >= threshold ? 1 : 0;
  return RoiMask(p.shape(), std::move(m));
}

inline ProbabilityMap to_probability(const RoiMask& m) {
  std::vector<double> p(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) p[i] = m[i] ? 1.0 : 0.0;
  return ProbabilityMap(m.shape(), std::move(p));
}

inline std::size_t cardinality(const RoiMask& m) {
  return static_cast<std::size_t>(std::count(m.values().begin(), m.values().end(), std::uint8_t{1}));
}

inline RoiMask mask_from_indices(const GridShape& shape, std::span<const GridIndex> members) {
  std::vector<std::uint8_t> m(shape.size(), 0);
  for (const auto& idx : members) {
    if (!shape.contains(idx)) throw Error(Errc::PointOutOfBounds, "mask member outside grid");
    m[shape.linear(idx)] = 1;
  }
  return RoiMask(shape, std::move(m));
}

inline RoiMask label_mask(const LabelMap& labels, std::int32_t label) {
  std::vector<std::uint8_t> m(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) m[i] = labels[i] == label ? 1 : 0;
  return RoiMask(labels.shape(), std::move(m));
}

/// Sorted, de-duplicated positive label ids present in the map.
inline std::vector<std::int32_t> label_ids(const LabelMap& labels) {
  std::vector<std::int32_t> ids;
  for (auto v : labels.values()) {
    if (v > 0) ids.push_back(v);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

}  // namespace promptreg
