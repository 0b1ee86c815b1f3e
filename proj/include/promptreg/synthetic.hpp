#pragma once

// Synthetic registration pairs with known ground truth: piecewise-constant
// ellipse/ellipsoid blobs on a flat background, each blob in its own toy
// intensity bin, and a fixed image produced by warping the moving one with an
// analytic backward field.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "promptreg/deformation.hpp"
#include "promptreg/geometry.hpp"
#include "promptreg/grid.hpp"

namespace promptreg {

enum class WarpKind { Translation, Rotation, Smooth };

inline std::string to_string(WarpKind k) {
  switch (k) {
    case WarpKind::Translation: return "translation";
    case WarpKind::Rotation: return "rotation";
    case WarpKind::Smooth: return "smooth";
  }
  return "unknown";
}

inline WarpKind parse_warp_kind(const std::string& s) {
  if (s == "translation") return WarpKind::Translation;
  if (s == "rotation") return WarpKind::Rotation;
  if (s == "smooth" || s == "smooth-sinusoidal") return WarpKind::Smooth;
  throw Error(Errc::SpecError, "unknown warp kind '" + s + "'");
}

// Intensity layout matching the default toy segmenter: 8 bins of width 32 over
// [0, 255]; background in bin 0, blobs and occluders at bin centres.
inline constexpr int kSynthBins = 8;
inline constexpr float kSynthBackground = 16.0f;
inline float synth_intensity(int bin) { return static_cast<float>(bin * 32 + 16); }

struct SyntheticSpec {
  std::vector<std::int64_t> dims{64, 64};
  int blobs = 3;
  WarpKind warp = WarpKind::Smooth;
  // translation/smooth: displacement in px; rotation: degrees
  double magnitude = 4.0;
  // translation only; empty means `magnitude` along x
  std::vector<double> offset;
  double min_radius = 6.0;
  double max_radius = 10.0;
  // unlabelled background structures: nearest-seed cells, each in its own
  // spare intensity bin (capped by the bins left over); 0 gives a flat background
  int tissue_regions = 4;
  // cut one blob of the fixed image in two with a stripe of foreign intensity
  bool occlude = false;
  std::uint64_t seed = 0;

  std::vector<double> translation() const {
    if (!offset.empty()) return offset;
    std::vector<double> t(dims.size(), 0.0);
    t[0] = magnitude;
    return t;
  }

  void validate() const {
    if (dims.size() != 2 && dims.size() != 3) throw Error(Errc::SpecError, "synthetic grid must be 2D or 3D");
    const auto min_dim = *std::min_element(dims.begin(), dims.end());
    if (min_dim < 16) throw Error(Errc::SpecError, "synthetic grid needs every axis >= 16");
    if (blobs < 1 || blobs > kSynthBins - 1 - (occlude ? 1 : 0)) {
      throw Error(Errc::SpecError, "blob count must leave one intensity bin per blob (and occluder)");
    }
    if (tissue_regions < 0) throw Error(Errc::SpecError, "tissue_regions must be >= 0");
    if (!(min_radius >= 2.0) || !(max_radius >= min_radius)) throw Error(Errc::SpecError, "bad blob radius range");
    if (!std::isfinite(magnitude) || magnitude < 0.0) throw Error(Errc::SpecError, "magnitude must be finite and >= 0");
    switch (warp) {
      case WarpKind::Translation: {
        const auto t = translation();
        if (t.size() != dims.size()) throw Error(Errc::SpecError, "translation offset axis count mismatch");
        for (std::size_t a = 0; a < t.size(); ++a) {
          if (!std::isfinite(t[a]) || std::abs(t[a]) > 0.25 * static_cast<double>(dims[a])) {
            throw Error(Errc::SpecError, "translation exceeds a quarter of the grid");
          }
        }
        break;
      }
      case WarpKind::Rotation:
        if (magnitude > 180.0) throw Error(Errc::SpecError, "rotation magnitude must be <= 180 degrees");
        break;
      case WarpKind::Smooth:
        if (magnitude > 0.125 * static_cast<double>(min_dim)) throw Error(Errc::SpecError, "smooth warp exceeds grid/8");
        break;
    }
  }
};

struct SyntheticPair {
  Image moving;
  Image fixed;
  LabelMap moving_labels;
  LabelMap fixed_labels;
  DeformationField truth;  // dense backward field, fixed grid -> moving grid
  std::optional<std::int32_t> occluded_label;
};

namespace detail {

inline double synth_uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

struct Blob {
  std::array<double, 3> center{};
  std::array<double, 3> radius{};
  int bin = 1;
};

// Ground-truth displacement at integer location v (grid units, spacing 1).
struct TruthField {
  WarpKind kind;
  int nd;
  std::array<double, 3> center{};
  std::array<double, 3> shift{};
  double cos_t = 1.0, sin_t = 0.0;
  double amp = 0.0;
  std::array<std::array<double, 3>, 3> phase{};
  std::array<double, 3> extent{};

  std::array<double, 3> at(const GridIndex& v) const {
    std::array<double, 3> u{};
    switch (kind) {
      case WarpKind::Translation:
        for (int a = 0; a < nd; ++a) u[static_cast<std::size_t>(a)] = -shift[static_cast<std::size_t>(a)];
        break;
      case WarpKind::Rotation: {
        // fixed = moving rotated by +theta, so sample the moving image at R(-theta)(v - c) + c
        const double dx = static_cast<double>(v[0]) - center[0];
        const double dy = static_cast<double>(v[1]) - center[1];
        u[0] = center[0] + cos_t * dx + sin_t * dy - static_cast<double>(v[0]);
        u[1] = center[1] - sin_t * dx + cos_t * dy - static_cast<double>(v[1]);
        break;
      }
      case WarpKind::Smooth:
        // each component is a product of one-period sines, |u_d| <= amp
        for (int d = 0; d < nd; ++d) {
          double s = amp;
          for (int a = 0; a < nd; ++a) {
            const auto ua = static_cast<std::size_t>(a);
            s *= std::sin(2.0 * std::numbers::pi * static_cast<double>(v[a]) / extent[ua] +
                          phase[static_cast<std::size_t>(d)][ua]);
          }
          u[static_cast<std::size_t>(d)] = s;
        }
        break;
    }
    return u;
  }
};

}  // namespace detail

inline SyntheticPair gen_synthetic_pair(const SyntheticSpec& spec) {
  spec.validate();
  const GridShape shape(spec.dims);
  const int nd = shape.ndim();
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32), 0x5eedu};
  std::mt19937_64 rng(seq);

  // warp parameters first so the blob margins can account for them
  detail::TruthField tf{spec.warp, nd};
  for (int a = 0; a < nd; ++a) {
    tf.center[static_cast<std::size_t>(a)] = 0.5 * static_cast<double>(shape.dim(a) - 1);
    tf.extent[static_cast<std::size_t>(a)] = static_cast<double>(shape.dim(a));
  }
  double warp_margin = 0.0;
  if (spec.warp == WarpKind::Translation) {
    const auto t = spec.translation();
    for (int a = 0; a < nd; ++a) {
      tf.shift[static_cast<std::size_t>(a)] = t[static_cast<std::size_t>(a)];
      warp_margin = std::max(warp_margin, std::abs(t[static_cast<std::size_t>(a)]));
    }
  } else if (spec.warp == WarpKind::Rotation) {
    const auto cs = detail::cos_sin_deg(spec.magnitude);
    tf.cos_t = cs.first;
    tf.sin_t = cs.second;
  } else {
    tf.amp = spec.magnitude / std::sqrt(static_cast<double>(nd));
    for (auto& row : tf.phase) {
      for (auto& p : row) p = detail::synth_uniform(rng, 0.0, 2.0 * std::numbers::pi);
    }
    warp_margin = spec.magnitude;
  }

  // intensity bins: a seeded permutation of 1..7, the last one kept for the occluder
  std::vector<int> bins;
  for (int b = 1; b < kSynthBins; ++b) bins.push_back(b);
  for (std::size_t i = bins.size(); i > 1; --i) std::swap(bins[i - 1], bins[static_cast<std::size_t>(rng() % i)]);

  std::vector<detail::Blob> blobs;
  const double gap = 2.0;
  for (int b = 0; b < spec.blobs; ++b) {
    bool placed = false;
    for (int attempt = 0; attempt < 20000 && !placed; ++attempt) {
      detail::Blob blob;
      blob.bin = bins[static_cast<std::size_t>(b)];
      double rmax = 0.0;
      for (int a = 0; a < nd; ++a) {
        blob.radius[static_cast<std::size_t>(a)] = detail::synth_uniform(rng, spec.min_radius, spec.max_radius);
        rmax = std::max(rmax, blob.radius[static_cast<std::size_t>(a)]);
      }
      bool ok = true;
      for (int a = 0; a < nd && ok; ++a) {
        const double lo = rmax + warp_margin + gap;
        const double hi = static_cast<double>(shape.dim(a) - 1) - lo;
        if (hi < lo) ok = false;
        else blob.center[static_cast<std::size_t>(a)] = std::round(detail::synth_uniform(rng, lo, hi));
      }
      if (ok && spec.warp == WarpKind::Rotation) {
        // stay inside the inscribed circle of the axial plane so rotation keeps the blob on the grid
        const double half = 0.5 * static_cast<double>(std::min(shape.dim(0), shape.dim(1)) - 1);
        const double r = std::hypot(blob.center[0] - tf.center[0], blob.center[1] - tf.center[1]);
        if (r + rmax + gap > half) ok = false;
      }
      for (const auto& other : blobs) {
        if (!ok) break;
        double d = 0.0, ro = 0.0;
        for (int a = 0; a < nd; ++a) {
          const auto ua = static_cast<std::size_t>(a);
          d += (blob.center[ua] - other.center[ua]) * (blob.center[ua] - other.center[ua]);
          ro = std::max(ro, other.radius[ua]);
        }
        if (std::sqrt(d) < rmax + ro + gap) ok = false;
      }
      if (ok) {
        blobs.push_back(blob);
        placed = true;
      }
    }
    if (!placed) throw Error(Errc::SpecError, "cannot place " + std::to_string(spec.blobs) + " blobs on " + shape.str());
  }

  // background cells: cell 0 keeps bin 0, the others take the unused blob bins
  const int spare = kSynthBins - 2 - spec.blobs;
  const int cells = spec.tissue_regions == 0 ? 0 : std::min(spec.tissue_regions, spare + 1);
  std::vector<std::array<double, 3>> seeds(static_cast<std::size_t>(cells));
  for (auto& sd : seeds) {
    for (int a = 0; a < nd; ++a) sd[static_cast<std::size_t>(a)] = detail::synth_uniform(rng, 0.0, static_cast<double>(shape.dim(a) - 1));
  }

  std::vector<float> mov(shape.size(), kSynthBackground);
  std::vector<std::int32_t> mlab(shape.size(), 0);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const GridIndex v = shape.unravel(i);
    if (cells > 1) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < seeds.size(); ++c) {
        double d = 0.0;
        for (int a = 0; a < nd; ++a) {
          const double t = static_cast<double>(v[a]) - seeds[c][static_cast<std::size_t>(a)];
          d += t * t;
        }
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (best > 0) mov[i] = synth_intensity(bins[static_cast<std::size_t>(spec.blobs) + best - 1]);
    }
    for (std::size_t b = 0; b < blobs.size(); ++b) {
      double r2 = 0.0;
      for (int a = 0; a < nd; ++a) {
        const auto ua = static_cast<std::size_t>(a);
        const double t = (static_cast<double>(v[a]) - blobs[b].center[ua]) / blobs[b].radius[ua];
        r2 += t * t;
      }
      if (r2 <= 1.0) {
        mov[i] = synth_intensity(blobs[b].bin);
        mlab[i] = static_cast<std::int32_t>(b + 1);
      }
    }
  }

  std::vector<float> fix(shape.size(), kSynthBackground);
  std::vector<std::int32_t> flab(shape.size(), 0);
  std::vector<double> dense(shape.size() * static_cast<std::size_t>(nd), 0.0);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    const GridIndex v = shape.unravel(i);
    const auto u = tf.at(v);
    GridIndex src;
    for (int a = 0; a < nd; ++a) {
      const auto ua = static_cast<std::size_t>(a);
      dense[i * static_cast<std::size_t>(nd) + ua] = u[ua];
      src[a] = std::llround(static_cast<double>(v[a]) + u[ua]);
    }
    if (shape.contains(src)) {
      const auto j = shape.linear(src);
      fix[i] = mov[j];
      flab[i] = mlab[j];
    }
  }

  SyntheticPair out{Image(shape, mov), Image(shape, fix), LabelMap(shape, mlab), LabelMap(shape, flab),
                    DeformationField::from_dense(shape, std::move(dense)), std::nullopt};

  if (spec.occlude) {
    // stripe three voxels wide across the whole blob, through its fixed-image centroid
    const auto target = static_cast<std::int32_t>(1 + rng() % blobs.size());
    const auto axis = static_cast<int>(rng() % static_cast<std::uint64_t>(nd));
    const auto m = label_mask(out.fixed_labels, target);
    if (cardinality(m) > 0) {
      const auto c = centroid(m);
      const auto mid = std::llround(c[static_cast<std::size_t>(axis)]);
      const float occ = synth_intensity(bins[static_cast<std::size_t>(kSynthBins - 2)]);
      for (std::size_t i = 0; i < shape.size(); ++i) {
        if (!m[i]) continue;
        if (std::abs(shape.unravel(i)[axis] - mid) <= 1) fix[i] = occ;
      }
      out.fixed = Image(shape, std::move(fix));
      out.occluded_label = target;
    }
  }
  return out;
}

// ---- suites -------------------------------------------------------------------

struct SuiteSpec {
  int pairs = 20;
  SyntheticSpec base;
  double occluded_fraction = 0.0;
  std::uint64_t seed = 0;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Pair i gets seed splitmix64(seed + i). Occluded pairs are spread evenly:
/// pair i is occluded when floor((i + 1) f) > floor(i f).
inline std::vector<SyntheticPair> make_suite(const SuiteSpec& suite) {
  if (suite.pairs < 1) throw Error(Errc::SpecError, "suite needs at least one pair");
  if (!(suite.occluded_fraction >= 0.0 && suite.occluded_fraction <= 1.0)) {
    throw Error(Errc::SpecError, "occluded fraction must be in [0, 1]");
  }
  std::vector<SyntheticPair> out;
  for (int i = 0; i < suite.pairs; ++i) {
    SyntheticSpec s = suite.base;
    s.seed = splitmix64(suite.seed + static_cast<std::uint64_t>(i));
    const double f = suite.occluded_fraction;
    s.occlude = std::floor((i + 1) * f) > std::floor(i * f);
    out.push_back(gen_synthetic_pair(s));
  }
  return out;
}

}  // namespace promptreg
