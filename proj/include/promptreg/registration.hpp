#pragma once

// Dense displacement fitting from corresponding ROI pairs, plus the overlap
// and centroid metrics.
//
// Objective over K pairs (moving map m_k on the moving grid, fixed map f_k):
//   L(u) = sum_k [1 - (2 <f_k, W_u m_k> + s) / (|f_k| + |W_u m_k| + s)]
//        + lambda * mean_{v, axis b, component d} (u_d(v + e_b) - u_d(v))^2
// W_u is the backward multilinear warp, u the lattice-interpolated field.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "promptreg/deformation.hpp"
#include "promptreg/geometry.hpp"
#include "promptreg/grid.hpp"
#include "promptreg/segmenter.hpp"

namespace promptreg {

inline constexpr double kSoftDiceSmooth = 1e-6;

inline double dice(const RoiMask& a, const RoiMask& b) {
  if (!a.shape().same_extent(b.shape())) throw Error(Errc::ShapeMismatch, "dice: masks differ in shape");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i];
    nb += b[i];
    both += a[i] & b[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

struct RoiPair {
  std::string class_tag;
  ProbabilityMap moving;
  ProbabilityMap fixed;
  PromptSet moving_prompts;
  PromptSet fixed_prompts;

  void validate() const {
    if (!moving.shape().same_extent(fixed.shape())) throw Error(Errc::ShapeMismatch, "ROI pair maps differ in shape");
    if (cardinality(binarize(moving)) == 0 || cardinality(binarize(fixed)) == 0) {
      throw Error(Errc::EmptyRoi, "ROI pair '" + class_tag + "' has an empty map");
    }
  }
};

struct RoiPairSet {
  std::vector<RoiPair> pairs;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }

  void validate() const {
    if (pairs.empty()) throw Error(Errc::EmptyPairSet, "no ROI pairs to fit");
    std::set<std::string> tags;
    for (const auto& p : pairs) {
      p.validate();
      if (!tags.insert(p.class_tag).second) throw Error(Errc::InvalidArgument, "duplicate class tag '" + p.class_tag + "'");
      if (!p.fixed.shape().same_extent(pairs.front().fixed.shape())) {
        throw Error(Errc::ShapeMismatch, "ROI pairs live on different grids");
      }
    }
  }
};

/// Spacing-scaled distance between the centroid of the warped, binarized
/// moving map and the centroid of the binarized fixed map.
inline double tre(const RoiPair& pair, const DeformationField& field) {
  const auto warped = binarize(warp(pair.moving, field));
  if (cardinality(warped) == 0) throw Error(Errc::EmptyAfterWarp, "warped ROI '" + pair.class_tag + "' is empty");
  const auto a = centroid(warped, true);
  const auto b = centroid(binarize(pair.fixed), true);
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(d);
}

inline double pair_dice(const RoiPair& pair, const DeformationField& field) {
  return dice(binarize(warp(pair.moving, field)), binarize(pair.fixed));
}

// ---- loss and gradient --------------------------------------------------------

struct AlignmentEval {
  double loss = 0.0;
  double overlap = 0.0;   // summed soft-Dice losses
  double smooth = 0.0;    // lambda-weighted smoothness term
  std::vector<double> grad;  // d loss / d control displacements, empty unless requested
};

namespace detail {

// Multilinear sample (zero outside) and its right-sided derivative along each
// axis in grid units.
inline double sample_one_sided(std::span<const double> values, const GridShape& shape, const std::array<double, 3>& pos,
                               std::array<double, 3>& dpos) {
  const int nd = shape.ndim();
  std::array<std::int64_t, 3> base{};
  std::array<double, 3> frac{};
  for (int a = 0; a < nd; ++a) {
    const auto ua = static_cast<std::size_t>(a);
    const double fl = std::floor(pos[ua]);
    base[ua] = static_cast<std::int64_t>(fl);
    frac[ua] = pos[ua] - fl;
  }
  dpos = {0.0, 0.0, 0.0};
  double acc = 0.0;
  for (int corner = 0; corner < (1 << nd); ++corner) {
    GridIndex idx;
    bool inside = true;
    for (int a = 0; a < nd; ++a) {
      idx[a] = base[static_cast<std::size_t>(a)] + ((corner >> a) & 1);
      if (idx[a] < 0 || idx[a] >= shape.dim(a)) inside = false;
    }
    if (!inside) continue;
    const double val = values[shape.linear(idx)];
    if (val == 0.0) continue;
    std::array<double, 3> w1{};
    double w = 1.0;
    for (int a = 0; a < nd; ++a) {
      const auto ua = static_cast<std::size_t>(a);
      w1[ua] = ((corner >> a) & 1) ? frac[ua] : 1.0 - frac[ua];
      w *= w1[ua];
    }
    acc += w * val;
    for (int a = 0; a < nd; ++a) {
      double d = ((corner >> a) & 1) ? 1.0 : -1.0;
      for (int b = 0; b < nd; ++b) {
        if (b != a) d *= w1[static_cast<std::size_t>(b)];
      }
      dpos[static_cast<std::size_t>(a)] += d * val;
    }
  }
  return acc;
}

// As above, but on an integer coordinate the derivative along that axis is the
// mean of the two one-sided slopes. At the zero field every sample sits on the
// grid and the right-sided slope alone is often not a descent direction.
inline double sample_with_grad(std::span<const double> values, const GridShape& shape, const std::array<double, 3>& pos,
                               std::array<double, 3>& dpos) {
  const double v = sample_one_sided(values, shape, pos, dpos);
  std::array<double, 3> unused{};
  for (int a = 0; a < shape.ndim(); ++a) {
    const auto ua = static_cast<std::size_t>(a);
    if (pos[ua] != std::floor(pos[ua])) continue;
    auto lo = pos;
    lo[ua] -= 1.0;
    dpos[ua] = 0.5 * (dpos[ua] + v - sample_one_sided(values, shape, lo, unused));
  }
  return v;
}

}  // namespace detail

inline AlignmentEval evaluate_alignment(const RoiPairSet& pairs, const DeformationField& field, double lambda,
                                        bool want_grad = true) {
  const auto& shape = field.fixed_shape();
  const auto nd = static_cast<std::size_t>(shape.ndim());
  const std::size_t n = shape.size();
  const auto u = field.dense();

  AlignmentEval out;
  std::vector<double> dense_grad(want_grad ? n * nd : 0, 0.0);

  std::vector<double> q(n);
  std::vector<double> dq(want_grad ? n * nd : 0);
  for (const auto& pair : pairs.pairs) {
    if (!pair.moving.shape().same_extent(shape) || !pair.fixed.shape().same_extent(shape)) {
      throw Error(Errc::ShapeMismatch, "ROI pair grid differs from the field grid");
    }
    double sp = 0.0, sq = 0.0, si = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
      const GridIndex idx = shape.unravel(v);
      std::array<double, 3> pos{};
      for (std::size_t a = 0; a < nd; ++a) {
        pos[a] = static_cast<double>(idx[static_cast<int>(a)]) + u[v * nd + a] / shape.spacing(static_cast<int>(a));
      }
      std::array<double, 3> dpos{};
      q[v] = detail::sample_with_grad(pair.moving.values(), shape, pos, dpos);
      if (want_grad) {
        for (std::size_t a = 0; a < nd; ++a) dq[v * nd + a] = dpos[a] / shape.spacing(static_cast<int>(a));
      }
      const double p = pair.fixed[v];
      sp += p;
      sq += q[v];
      si += p * q[v];
    }
    const double num = 2.0 * si + kSoftDiceSmooth;
    const double den = sp + sq + kSoftDiceSmooth;
    out.overlap += 1.0 - num / den;
    if (!want_grad) continue;
    const double den2 = den * den;
    for (std::size_t v = 0; v < n; ++v) {
      const double dl = -(2.0 * pair.fixed[v] * den - num) / den2;
      if (dl == 0.0) continue;
      for (std::size_t a = 0; a < nd; ++a) dense_grad[v * nd + a] += dl * dq[v * nd + a];
    }
  }

  if (lambda > 0.0) {
    std::size_t terms = 0;
    double sum = 0.0;
    for (int b = 0; b < shape.ndim(); ++b) {
      terms += (shape.size() / static_cast<std::size_t>(shape.dim(b))) * static_cast<std::size_t>(shape.dim(b) - 1) * nd;
    }
    if (terms > 0) {
      const double scale = lambda / static_cast<double>(terms);
      for (std::size_t v = 0; v < n; ++v) {
        const GridIndex idx = shape.unravel(v);
        for (int b = 0; b < shape.ndim(); ++b) {
          if (idx[b] + 1 >= shape.dim(b)) continue;
          const std::size_t w = v + shape.stride(b);
          for (std::size_t d = 0; d < nd; ++d) {
            const double diff = u[w * nd + d] - u[v * nd + d];
            sum += diff * diff;
            if (want_grad) {
              dense_grad[w * nd + d] += 2.0 * scale * diff;
              dense_grad[v * nd + d] -= 2.0 * scale * diff;
            }
          }
        }
      }
      out.smooth = scale * sum;
    }
  }

  out.loss = out.overlap + out.smooth;
  if (want_grad) out.grad = field.pullback(dense_grad);
  return out;
}

inline double alignment_loss(const RoiPairSet& pairs, const DeformationField& field, double lambda) {
  return evaluate_alignment(pairs, field, lambda, false).loss;
}

// ---- optimiser ------------------------------------------------------------------

struct FitConfig {
  double lambda_smooth = 0.1;
  int max_iters = 200;
  double step = 1.0;  // largest control displacement change per iteration, physical units
  int control_spacing = 8;
  double tol = 1e-5;
  double min_step = 1e-3;

  void validate() const {
    if (!(lambda_smooth >= 0.0) || !std::isfinite(lambda_smooth)) throw Error(Errc::ConfigError, "lambda_smooth must be >= 0");
    if (max_iters < 0) throw Error(Errc::ConfigError, "max_iters must be >= 0");
    if (!(step > 0.0) || !std::isfinite(step)) throw Error(Errc::ConfigError, "step must be > 0");
    if (control_spacing < 1) throw Error(Errc::ConfigError, "control_spacing must be >= 1");
    if (!(tol >= 0.0)) throw Error(Errc::ConfigError, "tol must be >= 0");
    if (!(min_step > 0.0) || min_step > step) throw Error(Errc::ConfigError, "min_step must be in (0, step]");
  }
};

struct FitResult {
  DeformationField field;
  std::vector<double> loss_trace;  // [0] is the loss of the zero field
};

/// Normalised gradient descent: each trial moves the control displacements by
/// alpha * g / max|g|, halving alpha until the loss does not increase. An
/// accepted step grows alpha by half again, capped at 4x the initial step.
inline FitResult fit_ddf(const RoiPairSet& pairs, const FitConfig& cfg) {
  cfg.validate();
  pairs.validate();
  const GridShape shape = pairs.pairs.front().fixed.shape();

  FitResult out{DeformationField(shape, cfg.control_spacing), {}};
  auto cur = evaluate_alignment(pairs, out.field, cfg.lambda_smooth);
  out.loss_trace.push_back(cur.loss);

  double alpha = cfg.step;
  for (int it = 0; it < cfg.max_iters; ++it) {
    double gmax = 0.0;
    for (double g : cur.grad) gmax = std::max(gmax, std::abs(g));
    if (!(gmax > 0.0)) break;

    const auto params = out.field.params();
    std::optional<std::pair<DeformationField, AlignmentEval>> accepted;
    while (alpha >= cfg.min_step) {
      std::vector<double> trial(params.begin(), params.end());
      for (std::size_t i = 0; i < trial.size(); ++i) trial[i] -= alpha * cur.grad[i] / gmax;
      auto f = out.field.with_params(std::move(trial));
      auto e = evaluate_alignment(pairs, f, cfg.lambda_smooth);
      if (e.loss <= cur.loss) {
        accepted.emplace(std::move(f), std::move(e));
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;

    const double prev = cur.loss;
    out.field = std::move(accepted->first);
    cur = std::move(accepted->second);
    out.loss_trace.push_back(cur.loss);
    alpha = std::min(alpha * 1.5, 4.0 * cfg.step);
    if ((prev - cur.loss) <= cfg.tol * std::max(std::abs(prev), 1e-12)) break;
  }
  return out;
}

// ---- label-level evaluation -------------------------------------------------------

struct LabelMetric {
  std::int32_t label = 0;
  double dice = 0.0;
  double tre = 0.0;
};

/// Per-label Dice and centroid distance of the moving labels warped by the
/// field against the fixed labels. Labels absent from either side are skipped;
/// a label that vanishes under the warp scores Dice 0 and no TRE entry.
inline std::vector<LabelMetric> evaluate_labels(const LabelMap& moving, const LabelMap& fixed,
                                                const DeformationField& field) {
  std::vector<LabelMetric> out;
  const auto fixed_ids = label_ids(fixed);
  for (const auto id : label_ids(moving)) {
    if (!std::binary_search(fixed_ids.begin(), fixed_ids.end(), id)) continue;
    const auto warped = binarize(warp(to_probability(label_mask(moving, id)), field));
    const auto ref = label_mask(fixed, id);
    LabelMetric m;
    m.label = id;
    m.dice = dice(warped, ref);
    if (cardinality(warped) == 0) {
      m.tre = std::numeric_limits<double>::quiet_NaN();
    } else {
      const auto a = centroid(warped, true);
      const auto b = centroid(ref, true);
      double d = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
      m.tre = std::sqrt(d);
    }
    out.push_back(m);
  }
  return out;
}

}  // namespace promptreg
