#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <vector>

#include "promptreg/promptreg.hpp"

namespace promptreg::testing {

// Piecewise-constant 2D image: background `bg` with axis-aligned boxes.
struct Box {
  std::int64_t x0, y0, x1, y1;  // inclusive
  float value;
};

inline Image boxes_image(std::int64_t w, std::int64_t h, std::initializer_list<Box> boxes, float bg = 16.0f) {
  const GridShape s{w, h};
  std::vector<float> v(s.size(), bg);
  for (const auto& b : boxes) {
    for (std::int64_t y = b.y0; y <= b.y1; ++y) {
      for (std::int64_t x = b.x0; x <= b.x1; ++x) v[s.linear(make_index({x, y}))] = b.value;
    }
  }
  return Image(s, std::move(v));
}

inline Image disc_image(std::int64_t w, std::int64_t h, double cx, double cy, double r, float fg = 208.0f,
                        float bg = 16.0f) {
  const GridShape s{w, h};
  std::vector<float> v(s.size(), bg);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto idx = s.unravel(i);
    const double dx = static_cast<double>(idx[0]) - cx, dy = static_cast<double>(idx[1]) - cy;
    if (dx * dx + dy * dy <= r * r) v[i] = fg;
  }
  return Image(s, std::move(v));
}

inline RoiMask box_mask(const GridShape& s, std::int64_t x0, std::int64_t y0, std::int64_t x1, std::int64_t y1) {
  std::vector<std::uint8_t> m(s.size(), 0);
  for (std::int64_t y = y0; y <= y1; ++y) {
    for (std::int64_t x = x0; x <= x1; ++x) m[s.linear(make_index({x, y}))] = 1;
  }
  return RoiMask(s, std::move(m));
}

inline std::set<GridIndex> members(const RoiMask& m) {
  std::set<GridIndex> out;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i]) out.insert(m.shape().unravel(i));
  }
  return out;
}

inline RoiMask random_mask(const GridShape& s, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution d(p);
  std::vector<std::uint8_t> m(s.size());
  for (auto& v : m) v = d(rng) ? 1 : 0;
  return RoiMask(s, std::move(m));
}

// Smooth random map in (0, 1), so warps sample a non-trivial landscape.
inline ProbabilityMap random_soft_map(const GridShape& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<double> v(s.size());
  for (auto& x : v) x = u(rng);
  return ProbabilityMap(s, std::move(v));
}

// Random K-pair instance on an 8x8 grid with a random non-zero field; returns the
// relative error ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||) of the
// loss gradient against central differences with step h.
struct GradCheck {
  double rel_error = 0.0;
  std::size_t params = 0;
};

inline GradCheck gradient_check(std::uint64_t seed, int pairs = 2, double h = 1e-3, double lambda = 0.1,
                                int control_spacing = 2) {
  std::mt19937_64 rng(seed);
  const GridShape s{8, 8};
  RoiPairSet set;
  for (int k = 0; k < pairs; ++k) {
    set.pairs.push_back(RoiPair{"k" + std::to_string(k), random_soft_map(s, rng), random_soft_map(s, rng), {}, {}});
  }
  DeformationField field(s, control_spacing);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  std::vector<double> p(field.num_params());
  // Bilinear sampling has kinks on grid lines; redraw until no sample position
  // lies within h of one, so the +-h stencil stays on a single linear piece.
  for (bool clear = false; !clear;) {
    for (auto& v : p) v = u(rng);
    field = field.with_params(p);
    const auto d = field.dense();
    clear = true;
    for (std::size_t i = 0; i < d.size() && clear; ++i) {
      const double frac = d[i] - std::floor(d[i]);
      clear = std::min(frac, 1.0 - frac) > 2.0 * h;
    }
  }

  const auto analytic = evaluate_alignment(set, field, lambda).grad;
  double num = 0.0, na = 0.0, nf = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto plus = p, minus = p;
    plus[i] += h;
    minus[i] -= h;
    const double fd =
        (alignment_loss(set, field.with_params(plus), lambda) - alignment_loss(set, field.with_params(minus), lambda)) /
        (2.0 * h);
    num += (analytic[i] - fd) * (analytic[i] - fd);
    na += analytic[i] * analytic[i];
    nf += fd * fd;
  }
  return {std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nf), 1e-300}), p.size()};
}

}  // namespace promptreg::testing
