#pragma once

// Spatial transforms about the grid centre, used to augment the moving image
// and its prompt jointly. A transform maps an input location p to
//   p' = c + M (p - c),   c = (dims - 1) / 2
// Flips act on x (flip-h) or y (flip-v); rotations turn the x-y plane (the
// axial plane for volumes); scaling is isotropic.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "promptreg/grid.hpp"
#include "promptreg/segmenter.hpp"

namespace promptreg {

enum class TransformKind { Identity, FlipH, FlipV, Rotation, Scaling, Composite };

inline std::string to_string(TransformKind k) {
  switch (k) {
    case TransformKind::Identity: return "identity";
    case TransformKind::FlipH: return "flip-h";
    case TransformKind::FlipV: return "flip-v";
    case TransformKind::Rotation: return "rotation";
    case TransformKind::Scaling: return "scaling";
    case TransformKind::Composite: return "composite";
  }
  return "unknown";
}

inline TransformKind parse_transform_kind(const std::string& s) {
  for (auto k : {TransformKind::Identity, TransformKind::FlipH, TransformKind::FlipV, TransformKind::Rotation,
                 TransformKind::Scaling, TransformKind::Composite}) {
    if (to_string(k) == s) return k;
  }
  throw Error(Errc::ConfigError, "unknown transform kind '" + s + "'");
}

inline constexpr double kMinScale = 0.5;
inline constexpr double kMaxScale = 2.5;

struct SpatialTransform {
  TransformKind kind = TransformKind::Identity;
  double angle_deg = 0.0;  // rotation, in [0, 360)
  double factor = 1.0;     // scaling
  std::vector<SpatialTransform> parts;  // composite, applied first to last

  static SpatialTransform identity() { return {}; }
  static SpatialTransform flip_h() { return {TransformKind::FlipH, 0.0, 1.0, {}}; }
  static SpatialTransform flip_v() { return {TransformKind::FlipV, 0.0, 1.0, {}}; }
  static SpatialTransform rotation(double deg) {
    double a = std::fmod(deg, 360.0);
    if (a < 0.0) a += 360.0;
    if (a >= 360.0) a = 0.0;
    return {TransformKind::Rotation, a, 1.0, {}};
  }
  static SpatialTransform scaling(double f) {
    if (!(f > 0.0) || !std::isfinite(f)) throw Error(Errc::InvalidArgument, "scaling factor must be finite and > 0");
    return {TransformKind::Scaling, 0.0, f, {}};
  }
  static SpatialTransform composite(std::vector<SpatialTransform> parts) {
    return {TransformKind::Composite, 0.0, 1.0, std::move(parts)};
  }

  friend bool operator==(const SpatialTransform&, const SpatialTransform&) = default;
};

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 mat_identity() { return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }

inline Mat3 mat_mul(const Mat3& l, const Mat3& r) {
  Mat3 m{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) m[i][j] += l[i][k] * r[k][j];
  return m;
}

namespace detail {

// Exact values at multiples of 90 degrees.
inline std::pair<double, double> cos_sin_deg(double deg) {
  if (deg == 0.0) return {1.0, 0.0};
  if (deg == 90.0) return {0.0, 1.0};
  if (deg == 180.0) return {-1.0, 0.0};
  if (deg == 270.0) return {0.0, -1.0};
  const double r = deg * std::numbers::pi / 180.0;
  return {std::cos(r), std::sin(r)};
}

}  // namespace detail

inline Mat3 linear_part(const SpatialTransform& t) {
  Mat3 m = mat_identity();
  switch (t.kind) {
    case TransformKind::Identity: break;
    case TransformKind::FlipH: m[0][0] = -1.0; break;
    case TransformKind::FlipV: m[1][1] = -1.0; break;
    case TransformKind::Rotation: {
      const auto [c, s] = detail::cos_sin_deg(t.angle_deg);
      m[0][0] = c; m[0][1] = -s;
      m[1][0] = s; m[1][1] = c;
      break;
    }
    case TransformKind::Scaling:
      for (int i = 0; i < 3; ++i) m[i][i] = t.factor;
      break;
    case TransformKind::Composite:
      for (const auto& p : t.parts) m = mat_mul(linear_part(p), m);
      break;
  }
  return m;
}

inline bool is_identity(const SpatialTransform& t) { return linear_part(t) == mat_identity(); }

inline SpatialTransform invert(const SpatialTransform& t) {
  switch (t.kind) {
    case TransformKind::Identity:
    case TransformKind::FlipH:
    case TransformKind::FlipV: return t;
    case TransformKind::Rotation: return SpatialTransform::rotation(t.angle_deg == 0.0 ? 0.0 : 360.0 - t.angle_deg);
    case TransformKind::Scaling: return SpatialTransform::scaling(1.0 / t.factor);
    case TransformKind::Composite: {
      std::vector<SpatialTransform> inv;
      for (auto it = t.parts.rbegin(); it != t.parts.rend(); ++it) inv.push_back(invert(*it));
      return SpatialTransform::composite(std::move(inv));
    }
  }
  return t;
}

struct TransformSampling {
  std::vector<TransformKind> kinds;
  std::uint64_t seed = 0;
};

namespace detail {

inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0, 1)
}

}  // namespace detail

/// Draw `draw_index` of the stream defined by `seed`: a kind uniformly among the
/// enabled ones, then its parameters uniformly over their ranges.
inline SpatialTransform sample_transform(const TransformSampling& cfg, std::uint64_t draw_index) {
  if (cfg.kinds.empty()) throw Error(Errc::NoKindsEnabled, "no transform kinds enabled");
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(draw_index), static_cast<std::uint32_t>(draw_index >> 32)};
  std::mt19937_64 rng(seq);
  const auto kind = cfg.kinds[static_cast<std::size_t>(rng() % cfg.kinds.size())];
  auto angle = [&] { return SpatialTransform::rotation(360.0 * detail::unit_uniform(rng)); };
  auto scale = [&] { return SpatialTransform::scaling(kMinScale + (kMaxScale - kMinScale) * detail::unit_uniform(rng)); };
  switch (kind) {
    case TransformKind::Identity: return SpatialTransform::identity();
    case TransformKind::FlipH: return SpatialTransform::flip_h();
    case TransformKind::FlipV: return SpatialTransform::flip_v();
    case TransformKind::Rotation: return angle();
    case TransformKind::Scaling: return scale();
    case TransformKind::Composite: {
      std::vector<SpatialTransform> parts;
      const auto flip = rng() % 3;
      if (flip == 1) parts.push_back(SpatialTransform::flip_h());
      if (flip == 2) parts.push_back(SpatialTransform::flip_v());
      parts.push_back(angle());
      parts.push_back(scale());
      return SpatialTransform::composite(std::move(parts));
    }
  }
  return SpatialTransform::identity();
}

namespace detail {

inline std::array<double, 3> grid_center(const GridShape& s) {
  std::array<double, 3> c{};
  for (int a = 0; a < s.ndim(); ++a) c[static_cast<std::size_t>(a)] = 0.5 * static_cast<double>(s.dim(a) - 1);
  return c;
}

// Multilinear sample with zero outside the grid.
template <typename T>
double sample_linear(std::span<const T> values, const GridShape& shape, const std::array<double, 3>& pos) {
  const int nd = shape.ndim();
  std::array<std::int64_t, 3> base{};
  std::array<double, 3> frac{};
  for (int a = 0; a < nd; ++a) {
    const double fl = std::floor(pos[static_cast<std::size_t>(a)]);
    base[static_cast<std::size_t>(a)] = static_cast<std::int64_t>(fl);
    frac[static_cast<std::size_t>(a)] = pos[static_cast<std::size_t>(a)] - fl;
  }
  double acc = 0.0;
  for (int corner = 0; corner < (1 << nd); ++corner) {
    double w = 1.0;
    GridIndex idx;
    bool inside = true;
    for (int a = 0; a < nd; ++a) {
      const bool hi = (corner >> a) & 1;
      const auto ua = static_cast<std::size_t>(a);
      idx[a] = base[ua] + (hi ? 1 : 0);
      w *= hi ? frac[ua] : 1.0 - frac[ua];
      if (idx[a] < 0 || idx[a] >= shape.dim(a)) inside = false;
    }
    if (w == 0.0 || !inside) continue;
    acc += w * static_cast<double>(values[shape.linear(idx)]);
  }
  return acc;
}

template <typename T>
std::vector<double> resample(std::span<const T> values, const GridShape& shape, const SpatialTransform& t) {
  const Mat3 inv = linear_part(invert(t));
  const auto c = grid_center(shape);
  const int nd = shape.ndim();
  std::vector<double> out(shape.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const GridIndex q = shape.unravel(i);
    std::array<double, 3> pos{};
    for (int r = 0; r < nd; ++r) {
      double v = c[static_cast<std::size_t>(r)];
      for (int k = 0; k < nd; ++k) v += inv[r][k] * (static_cast<double>(q[k]) - c[static_cast<std::size_t>(k)]);
      pos[static_cast<std::size_t>(r)] = v;
    }
    out[i] = sample_linear(values, shape, pos);
  }
  return out;
}

}  // namespace detail

inline Image apply_to_image(const SpatialTransform& t, const Image& img) {
  if (is_identity(t)) return img;
  const auto v = detail::resample(img.values(), img.shape(), t);
  return Image(img.shape(), std::vector<float>(v.begin(), v.end()));
}

inline ProbabilityMap apply_to_map(const SpatialTransform& t, const ProbabilityMap& map) {
  if (is_identity(t)) return map;
  auto v = detail::resample(map.values(), map.shape(), t);
  for (auto& x : v) x = std::clamp(x, 0.0, 1.0);
  return ProbabilityMap(map.shape(), std::move(v));
}

inline PromptSet apply_to_points(const SpatialTransform& t, const PromptSet& pts, const GridShape& shape) {
  const Mat3 m = linear_part(t);
  const auto c = detail::grid_center(shape);
  const int nd = shape.ndim();
  PromptSet out;
  out.class_tag = pts.class_tag;
  for (const auto& p : pts.points) {
    GridIndex q;
    for (int r = 0; r < nd; ++r) {
      double v = c[static_cast<std::size_t>(r)];
      for (int k = 0; k < nd; ++k) v += m[r][k] * (static_cast<double>(p.location[k]) - c[static_cast<std::size_t>(k)]);
      q[r] = std::llround(v);
    }
    if (!shape.contains(q)) throw Error(Errc::PointOutOfBounds, "transformed prompt leaves the grid");
    out.points.push_back(PromptPoint{q, p.polarity});
  }
  return out;
}

}  // namespace promptreg
