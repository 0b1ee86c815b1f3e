#pragma once

// Corresponding-prompt search: given a prompt on the moving image, find a
// prompt set on the fixed image whose segmentation is the same structure.
//
//   1. segment the moving image with the given prompt -> moving ROI
//   2. prototype = ROI-weighted mean of the moving features
//   3. cosine similarity of the prototype against the fixed features
//   4. primary prompt(s) at the similarity maximum
//   5. auxiliary prompts from the directed Hausdorff discrepancy between the
//      two ROI contours, added until the discrepancy falls below sigma

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "promptreg/geometry.hpp"
#include "promptreg/grid.hpp"
#include "promptreg/segmenter.hpp"

namespace promptreg {

struct Prototype {
  std::vector<double> vector;
  std::optional<std::string> class_tag;
};

class SimilarityMap {
 public:
  SimilarityMap(GridShape shape, std::vector<double> values) : shape_(shape), values_(std::move(values)) {
    if (values_.size() != shape_.size()) throw Error(Errc::ShapeMismatch, "similarity map size mismatch");
    for (double v : values_) {
      if (!(v >= -1.0 && v <= 1.0)) throw Error(Errc::InvalidArgument, "similarity outside [-1, 1]");
    }
  }

  const GridShape& shape() const { return shape_; }
  std::span<const double> values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }

 private:
  GridShape shape_;
  std::vector<double> values_;
};

struct ContourDiscrepancy {
  double d_xy = 0.0;  // directed Hausdorff, moving contour -> fixed contour
  double d_yx = 0.0;  // fixed contour -> moving contour
  GridIndex x_star;   // on the moving contour, realises d_xy
  GridIndex y_star;   // on the fixed contour, realises d_yx
};

enum class GradientSign {
  AsWritten,  // x* + eps * (x* - y*)
  Descent,    // x* + eps * (y* - x*)
};

struct AuxConfig {
  double sigma = 20.0;
  double epsilon = 2.0;
  int max_iters = 10;
  GradientSign gradient_sign = GradientSign::Descent;
  // Quantile defining the high-similarity region used when a prompt set has
  // several positive points.
  double top_quantile = 0.9;

  void validate() const {
    if (!(sigma > 0.0)) throw Error(Errc::ConfigError, "aux sigma must be > 0");
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw Error(Errc::ConfigError, "aux epsilon must be finite and > 0");
    if (max_iters < 1) throw Error(Errc::ConfigError, "aux max_iters must be >= 1");
    if (!(top_quantile >= 0.0 && top_quantile < 1.0)) throw Error(Errc::ConfigError, "top_quantile must be in [0, 1)");
  }
};

struct Converged {
  friend bool operator==(const Converged&, const Converged&) = default;
};
using AuxDecision = std::variant<Converged, PromptPoint>;

enum class SearchStop { Converged, IterationCap, FixedRoiEmptied, PrimaryEmpty };

constexpr const char* to_string(SearchStop s) {
  switch (s) {
    case SearchStop::Converged: return "converged";
    case SearchStop::IterationCap: return "iteration_cap";
    case SearchStop::FixedRoiEmptied: return "fixed_roi_emptied";
    case SearchStop::PrimaryEmpty: return "primary_empty";
  }
  return "unknown";
}

struct Correspondence {
  PromptSet prompts_y;
  ProbabilityMap roi_x;
  ProbabilityMap roi_y;
  std::size_t primary_count = 0;
  int aux_steps = 0;
  SearchStop stop = SearchStop::Converged;
  std::vector<ContourDiscrepancy> history;
};

// ---- prototype and similarity ---------------------------------------------

/// Area-average an image-grid map down to the feature grid.
inline std::vector<double> downsample_weights(const ProbabilityMap& roi, const GridShape& feature_shape) {
  const auto f = feature_downscale(roi.shape(), feature_shape);
  if (f == 1) return {roi.values().begin(), roi.values().end()};
  std::vector<double> w(feature_shape.size(), 0.0);
  const double cell = std::pow(static_cast<double>(f), roi.shape().ndim());
  for (std::size_t i = 0; i < roi.size(); ++i) {
    GridIndex idx = roi.shape().unravel(i);
    for (int a = 0; a < roi.shape().ndim(); ++a) idx[a] /= f;
    w[feature_shape.linear(idx)] += roi[i];
  }
  for (auto& v : w) v /= cell;
  return w;
}

inline Prototype masked_prototype(const ProbabilityMap& roi, const FeatureVolume& features) {
  const auto w = downsample_weights(roi, features.shape());
  const std::size_t ch = features.channels();
  std::vector<double> g(ch, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] == 0.0) continue;
    total += w[i];
    const auto f = features.vector(i);
    for (std::size_t c = 0; c < ch; ++c) g[c] += w[i] * f[c];
  }
  if (!(total > 0.0)) throw Error(Errc::EmptyRoi, "ROI has zero weight on the feature grid");
  for (auto& v : g) v /= total;
  if (std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) {
    throw Error(Errc::ZeroPrototype, "prototype vector is all zero");
  }
  return Prototype{std::move(g), std::nullopt};
}

inline SimilarityMap similarity_map(const Prototype& proto, const FeatureVolume& features) {
  if (proto.vector.size() != features.channels()) throw Error(Errc::ShapeMismatch, "prototype length != feature channels");
  double gn = 0.0;
  for (double v : proto.vector) gn += v * v;
  gn = std::sqrt(gn);
  if (!(gn > 0.0)) throw Error(Errc::ZeroPrototype, "similarity against a zero prototype");

  std::vector<double> s(features.locations(), 0.0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto f = features.vector(i);
    double dot = 0.0, fn = 0.0;
    for (std::size_t c = 0; c < f.size(); ++c) {
      dot += proto.vector[c] * f[c];
      fn += f[c] * f[c];
    }
    if (fn == 0.0) continue;  // zero-norm features have no direction
    s[i] = std::clamp(dot / (gn * std::sqrt(fn)), -1.0, 1.0);
  }
  return SimilarityMap(features.shape(), std::move(s));
}

// ---- primary prompts --------------------------------------------------------

/// Centre of a feature cell on the image grid.
inline GridIndex feature_to_image(const GridIndex& cell, std::int64_t factor, int ndim) {
  GridIndex p;
  for (int a = 0; a < ndim; ++a) p[a] = cell[a] * factor + factor / 2;
  return p;
}

/// Positive prompt at the global similarity maximum; ties go to the lowest
/// feature index.
inline PromptPoint primary_prompt(const SimilarityMap& sim, const GridShape& image_shape) {
  const auto f = feature_downscale(image_shape, sim.shape());
  std::size_t best = 0;
  for (std::size_t i = 1; i < sim.values().size(); ++i) {
    if (sim[i] > sim[best]) best = i;
  }
  return PromptPoint{feature_to_image(sim.shape().unravel(best), f, image_shape.ndim()), Polarity::Positive};
}

/// One primary prompt per anchor (a positive moving-image point). Each anchor is
/// mapped proportionally onto the feature grid, snapped to the nearest location
/// of the top-quantile similarity region, and replaced by the maximum of the
/// region component it lands in.
inline std::vector<PromptPoint> primary_prompts(const SimilarityMap& sim, const GridShape& image_shape,
                                                std::span<const PromptPoint> anchors, const GridShape& moving_shape,
                                                double top_quantile) {
  if (anchors.size() <= 1) return {primary_prompt(sim, image_shape)};

  const auto f = feature_downscale(image_shape, sim.shape());
  const auto& fs = sim.shape();
  std::vector<double> sorted(sim.values().begin(), sim.values().end());
  const auto k = static_cast<std::size_t>(std::floor(top_quantile * static_cast<double>(sorted.size() - 1)));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
  const double threshold = sorted[k];

  std::int32_t count = 0;
  const auto comp = detail::label_regions(
      fs, [&](std::size_t i) { return sim[i] >= threshold; }, [](std::size_t, std::size_t) { return true; }, count);
  std::vector<std::size_t> comp_best(static_cast<std::size_t>(count) + 1, 0);
  std::vector<bool> seen(static_cast<std::size_t>(count) + 1, false);
  for (std::size_t i = 0; i < comp.size(); ++i) {
    const auto c = static_cast<std::size_t>(comp[i]);
    if (c == 0) continue;
    if (!seen[c] || sim[i] > sim[comp_best[c]]) comp_best[c] = i;
    seen[c] = true;
  }

  std::vector<PromptPoint> out;
  for (const auto& anchor : anchors) {
    std::array<double, kMaxAxes> target{};
    for (int a = 0; a < fs.ndim(); ++a) {
      const double rel = moving_shape.dim(a) > 1
                             ? static_cast<double>(anchor.location[a]) / static_cast<double>(moving_shape.dim(a) - 1)
                             : 0.5;
      target[static_cast<std::size_t>(a)] = rel * static_cast<double>(fs.dim(a) - 1);
    }
    std::size_t nearest = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < comp.size(); ++i) {
      if (comp[i] == 0) continue;
      const GridIndex idx = fs.unravel(i);
      double d = 0.0;
      for (int a = 0; a < fs.ndim(); ++a) {
        const double diff = static_cast<double>(idx[a]) - target[static_cast<std::size_t>(a)];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        nearest = i;
      }
    }
    const auto cell = comp_best[static_cast<std::size_t>(comp[nearest])];
    out.push_back(PromptPoint{feature_to_image(fs.unravel(cell), f, image_shape.ndim()), Polarity::Positive});
  }
  return out;
}

// ---- contour discrepancy ------------------------------------------------------

struct HausdorffResult {
  double distance = 0.0;
  GridIndex argmax;
};

/// max over p in a of min over q in b of the spacing-scaled Euclidean distance.
/// The argmax is the first maximiser in the order of `a`. The inner scan stops
/// as soon as p provably cannot beat the running maximum.
inline HausdorffResult directed_hausdorff(std::span<const GridIndex> a, std::span<const GridIndex> b,
                                          std::span<const double> spacing) {
  if (a.empty() || b.empty()) throw Error(Errc::EmptyContour, "directed Hausdorff needs two non-empty sets");
  const auto nd = spacing.size();
  double cmax = -1.0;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double cmin = std::numeric_limits<double>::infinity();
    for (const auto& q : b) {
      double d = 0.0;
      for (std::size_t ax = 0; ax < nd; ++ax) {
        const double diff = static_cast<double>(a[i].c[ax] - q.c[ax]) * spacing[ax];
        d += diff * diff;
      }
      if (d < cmin) cmin = d;
      if (cmin <= cmax) break;
    }
    if (cmin > cmax) {
      cmax = cmin;
      arg = i;
    }
  }
  return {std::sqrt(cmax), a[arg]};
}

/// Both masks must live on the same grid.
inline ContourDiscrepancy contour_discrepancy(const RoiMask& moving, const RoiMask& fixed) {
  if (!moving.shape().same_extent(fixed.shape())) throw Error(Errc::ShapeMismatch, "contour_discrepancy grids differ");
  const auto cx = extract_contour(moving);
  const auto cy = extract_contour(fixed);
  const auto sp = fixed.shape().spacings();
  const auto xy = directed_hausdorff(cx, cy, sp);
  const auto yx = directed_hausdorff(cy, cx, sp);
  return {xy.distance, yx.distance, xy.argmax, yx.argmax};
}

inline AuxDecision auxiliary_step(const ContourDiscrepancy& disc, const AuxConfig& cfg, const GridShape& fixed_shape) {
  if (std::abs(disc.d_xy - disc.d_yx) < cfg.sigma) return Converged{};
  if (disc.d_xy > disc.d_yx) return PromptPoint{disc.y_star, Polarity::Negative};

  GridIndex p;
  for (int a = 0; a < fixed_shape.ndim(); ++a) {
    const double x = static_cast<double>(disc.x_star[a]);
    const double y = static_cast<double>(disc.y_star[a]);
    const double g = cfg.gradient_sign == GradientSign::Descent ? (y - x) : (x - y);
    p[a] = std::clamp<std::int64_t>(std::llround(x + cfg.epsilon * g), 0, fixed_shape.dim(a) - 1);
  }
  return PromptPoint{p, Polarity::Positive};
}

// ---- full search ---------------------------------------------------------------

/// Search from an already-segmented moving ROI. `given` supplies the positive
/// anchors (moving-grid coordinates) and the class tag.
inline Correspondence search_from_moving_roi(const ProbabilityMap& roi_x, const FeatureVolume& features_x,
                                             const Image& img_y, const FeatureVolume& features_y,
                                             const PromptSet& given, const Segmenter& seg, const AuxConfig& cfg) {
  cfg.validate();
  const RoiMask mask_x = binarize(roi_x);
  if (cardinality(mask_x) == 0) throw Error(Errc::EmptyRoi, "moving prompt segments nothing");

  auto proto = masked_prototype(roi_x, features_x);
  proto.class_tag = given.class_tag;
  const auto sim = similarity_map(proto, features_y);
  const auto anchors = given.positives();

  Correspondence out;
  out.roi_x = roi_x;
  out.prompts_y.class_tag = given.class_tag;
  for (const auto& p : primary_prompts(sim, img_y.shape(), anchors, roi_x.shape(), cfg.top_quantile)) {
    out.prompts_y.points.push_back(p);
  }
  out.primary_count = out.prompts_y.points.size();
  out.roi_y = seg.segment(img_y, features_y, out.prompts_y);

  RoiMask mask_y = binarize(out.roi_y);
  if (cardinality(mask_y) == 0) {
    out.stop = SearchStop::PrimaryEmpty;
    return out;
  }
  const RoiMask mask_x_fixed =
      roi_x.shape().same_extent(img_y.shape()) ? mask_x : resample_mask(mask_x, img_y.shape());

  out.stop = SearchStop::IterationCap;
  for (int s = 0; s < cfg.max_iters; ++s) {
    const auto disc = contour_discrepancy(mask_x_fixed, mask_y);
    out.history.push_back(disc);
    const auto decision = auxiliary_step(disc, cfg, img_y.shape());
    if (std::holds_alternative<Converged>(decision)) {
      out.stop = SearchStop::Converged;
      return out;
    }
    PromptSet grown = out.prompts_y;
    grown.points.push_back(std::get<PromptPoint>(decision));
    auto roi = seg.segment(img_y, features_y, grown);
    auto mask = binarize(roi);
    if (cardinality(mask) == 0) {
      // keep the last non-empty state
      out.stop = SearchStop::FixedRoiEmptied;
      return out;
    }
    out.prompts_y = std::move(grown);
    out.roi_y = std::move(roi);
    mask_y = std::move(mask);
    ++out.aux_steps;
  }
  const auto disc = contour_discrepancy(mask_x_fixed, mask_y);
  out.history.push_back(disc);
  if (std::holds_alternative<Converged>(auxiliary_step(disc, cfg, img_y.shape()))) out.stop = SearchStop::Converged;
  return out;
}

inline Correspondence search_corresponding_prompt(const Image& img_x, const Image& img_y, const PromptSet& z_x,
                                                  const Segmenter& seg, const AuxConfig& cfg) {
  check_prompts(img_x.shape(), z_x);
  const auto fx = seg.encode(img_x);
  const auto fy = seg.encode(img_y);
  const auto roi_x = seg.segment(img_x, fx, z_x);
  return search_from_moving_roi(roi_x, fx, img_y, fy, z_x, seg, cfg);
}

}  // namespace promptreg
