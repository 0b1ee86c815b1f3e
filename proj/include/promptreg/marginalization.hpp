#pragma once

// Prompt marginalisation: run the corresponding-prompt search under J random
// spatial transforms of the moving side (image and prompt transformed
// together), map each moving ROI back with the inverse transform, and average
// the resulting probability maps. Branch 0 is always the untransformed search.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "promptreg/prompt_search.hpp"
#include "promptreg/transform.hpp"

namespace promptreg {

struct MarginalizationConfig {
  int num_transforms = 0;
  std::vector<TransformKind> kinds = {TransformKind::FlipH, TransformKind::FlipV, TransformKind::Rotation,
                                      TransformKind::Scaling};
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (num_transforms < 0) throw Error(Errc::ConfigError, "num_transforms must be >= 0");
    if (num_transforms > 0 && kinds.empty()) throw Error(Errc::NoKindsEnabled, "marginalisation has no transform kinds");
  }
};

/// Moving/fixed images with their encoder features, computed once and shared
/// across prompts.
struct EncodedPair {
  Image moving;
  Image fixed;
  FeatureVolume moving_features;
  FeatureVolume fixed_features;

  static EncodedPair encode(const Image& moving, const Image& fixed, const Segmenter& seg) {
    return {moving, fixed, seg.encode(moving), seg.encode(fixed)};
  }
};

struct BranchRecord {
  int index = 0;
  SpatialTransform transform;
  PromptSet moving_prompts;  // the prompt after the branch transform
  bool ok = false;
  std::string failure;
  std::optional<Correspondence> result;
};

struct MarginalResult {
  ProbabilityMap roi_x;
  ProbabilityMap roi_y;
  PromptSet prompts_y;
  std::vector<BranchRecord> branches;

  std::size_t valid_branches() const {
    return static_cast<std::size_t>(std::count_if(branches.begin(), branches.end(), [](const auto& b) { return b.ok; }));
  }
  std::size_t failed_branches() const { return branches.size() - valid_branches(); }
};

/// Per-location mean over maps, reduced in ascending branch order whatever the
/// input order. Uses the running form m += (x - m) / n, which returns x
/// exactly when every map holds x.
inline ProbabilityMap average_maps(std::vector<std::pair<int, ProbabilityMap>> maps) {
  if (maps.empty()) throw Error(Errc::AllBranchesFailed, "nothing to average");
  std::stable_sort(maps.begin(), maps.end(), [](const auto& l, const auto& r) { return l.first < r.first; });
  const auto& shape = maps.front().second.shape();
  std::vector<double> mean(maps.front().second.values().begin(), maps.front().second.values().end());
  for (std::size_t n = 1; n < maps.size(); ++n) {
    const auto& m = maps[n].second;
    if (!m.shape().same_extent(shape)) throw Error(Errc::ShapeMismatch, "averaged maps differ in shape");
    const double inv = 1.0 / static_cast<double>(n + 1);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += (m[i] - mean[i]) * inv;
  }
  for (auto& v : mean) v = std::clamp(v, 0.0, 1.0);
  return ProbabilityMap(shape, std::move(mean));
}

inline SpatialTransform branch_transform(const MarginalizationConfig& cfg, int index) {
  if (index == 0) return SpatialTransform::identity();
  return sample_transform(TransformSampling{cfg.kinds, cfg.rng_seed}, static_cast<std::uint64_t>(index));
}

/// Runs one branch. The same transform record drives the image and the prompt.
inline BranchRecord run_branch(const EncodedPair& pair, const PromptSet& z_x, const Segmenter& seg,
                               const AuxConfig& aux, int index, const SpatialTransform& t) {
  BranchRecord rec;
  rec.index = index;
  rec.transform = t;
  try {
    rec.moving_prompts = apply_to_points(rec.transform, z_x, pair.moving.shape());
    ProbabilityMap roi_x;
    if (index == 0 && is_identity(rec.transform)) {
      roi_x = seg.segment(pair.moving, pair.moving_features, rec.moving_prompts);
    } else {
      const Image moved = apply_to_image(rec.transform, pair.moving);
      const auto features = seg.encode(moved);
      const auto roi = seg.segment(moved, features, rec.moving_prompts);
      roi_x = apply_to_map(invert(rec.transform), roi);
    }
    rec.result = search_from_moving_roi(roi_x, pair.moving_features, pair.fixed, pair.fixed_features, z_x, seg, aux);
    rec.ok = true;
  } catch (const Error& e) {
    if (e.code() != Errc::PointOutOfBounds && e.code() != Errc::EmptyRoi) throw;
    rec.failure = e.what();
  }
  return rec;
}

/// Averages the valid branches of `branches` (any order) into a result.
inline MarginalResult combine_branches(std::vector<BranchRecord> branches) {
  std::stable_sort(branches.begin(), branches.end(), [](const auto& l, const auto& r) { return l.index < r.index; });
  MarginalResult out;
  out.branches = std::move(branches);
  std::vector<std::pair<int, ProbabilityMap>> xs, ys;
  for (const auto& b : out.branches) {
    if (!b.ok) continue;
    xs.emplace_back(b.index, b.result->roi_x);
    ys.emplace_back(b.index, b.result->roi_y);
  }
  if (xs.empty()) throw Error(Errc::AllBranchesFailed, "every marginalisation branch failed");
  out.roi_x = average_maps(std::move(xs));
  out.roi_y = average_maps(std::move(ys));
  // lowest valid branch, i.e. the identity branch whenever it succeeded
  for (const auto& b : out.branches) {
    if (b.ok) {
      out.prompts_y = b.result->prompts_y;
      break;
    }
  }
  return out;
}

/// Branch j runs under transforms[j]; callers put the identity first.
inline MarginalResult marginalize_over(const EncodedPair& pair, const PromptSet& z_x, const Segmenter& seg,
                                       const AuxConfig& aux, std::span<const SpatialTransform> transforms) {
  check_prompts(pair.moving.shape(), z_x);
  std::vector<BranchRecord> branches;
  for (std::size_t j = 0; j < transforms.size(); ++j) {
    branches.push_back(run_branch(pair, z_x, seg, aux, static_cast<int>(j), transforms[j]));
  }
  return combine_branches(std::move(branches));
}

inline MarginalResult marginalized_correspondence(const EncodedPair& pair, const PromptSet& z_x, const Segmenter& seg,
                                                  const AuxConfig& aux, const MarginalizationConfig& marg) {
  marg.validate();
  std::vector<SpatialTransform> ts;
  for (int j = 0; j <= marg.num_transforms; ++j) ts.push_back(branch_transform(marg, j));
  return marginalize_over(pair, z_x, seg, aux, ts);
}

inline MarginalResult marginalized_correspondence(const Image& img_x, const Image& img_y, const PromptSet& z_x,
                                                  const Segmenter& seg, const AuxConfig& aux,
                                                  const MarginalizationConfig& marg) {
  return marginalized_correspondence(EncodedPair::encode(img_x, img_y, seg), z_x, seg, aux, marg);
}

}  // namespace promptreg
