#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "promptreg/geometry.hpp"
#include "promptreg/grid.hpp"

namespace promptreg {

enum class Polarity { Positive, Negative };

struct PromptPoint {
  GridIndex location;
  Polarity polarity = Polarity::Positive;

  friend auto operator<=>(const PromptPoint&, const PromptPoint&) = default;
};

struct PromptSet {
  std::vector<PromptPoint> points;
  std::optional<std::string> class_tag;

  std::size_t positive_count() const {
    return static_cast<std::size_t>(std::count_if(points.begin(), points.end(),
                                                  [](const PromptPoint& p) { return p.polarity == Polarity::Positive; }));
  }

  std::vector<PromptPoint> positives() const {
    std::vector<PromptPoint> out;
    for (const auto& p : points) {
      if (p.polarity == Polarity::Positive) out.push_back(p);
    }
    return out;
  }

  friend bool operator==(const PromptSet&, const PromptSet&) = default;
};

inline PromptSet single_positive(const GridIndex& at, std::optional<std::string> tag = std::nullopt) {
  return PromptSet{{PromptPoint{at, Polarity::Positive}}, std::move(tag)};
}

inline void check_prompts(const GridShape& shape, const PromptSet& prompts) {
  if (prompts.positive_count() == 0) throw Error(Errc::NoPositivePrompt, "prompt set has no positive point");
  for (const auto& p : prompts.points) {
    if (!shape.contains(p.location)) throw Error(Errc::PointOutOfBounds, "prompt outside image grid " + shape.str());
  }
}

/// Promptable segmentation capability: an image encoder plus a prompt-conditioned
/// mask decoder. Implementations must be deterministic and safe to call from
/// several threads at once.
class Segmenter {
 public:
  virtual ~Segmenter() = default;

  virtual FeatureVolume encode(const Image& image) const = 0;
  virtual ProbabilityMap segment(const Image& image, const FeatureVolume& features, const PromptSet& prompts) const = 0;
};

/// Integer factor between an image grid and its feature grid; throws if the
/// feature grid is not a uniform integer downscale.
inline std::int64_t feature_downscale(const GridShape& image, const GridShape& features) {
  if (image.ndim() != features.ndim()) throw Error(Errc::AxisMismatch, "feature grid axis count differs from image");
  std::int64_t factor = 0;
  for (int a = 0; a < image.ndim(); ++a) {
    if (image.dim(a) % features.dim(a) != 0) {
      throw Error(Errc::ShapeMismatch, "feature grid " + features.str() + " does not divide image grid " + image.str());
    }
    const auto f = image.dim(a) / features.dim(a);
    if (factor != 0 && f != factor) throw Error(Errc::ShapeMismatch, "feature downscale differs between axes");
    factor = f;
  }
  return factor;
}

struct ToyConfig {
  int bins = 8;
  double range_lo = 0.0;
  double range_hi = 255.0;
  int box_radius = 1;
  // Multipliers for the raw smoothed intensity and the [0, 1] coordinates.
  double smooth_weight = 1.0 / 255.0;
  double coord_weight = 1.0;
  int downscale = 1;
};

/// Deterministic stand-in for a foundation segmenter. Features are
/// [one-hot intensity bin | box-smoothed intensity | normalised coordinates];
/// a segmentation is the union of intensity-bin components hit by positive
/// points minus those hit by negative points.
class ToySegmenter final : public Segmenter {
 public:
  explicit ToySegmenter(ToyConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.bins < 1) throw Error(Errc::InvalidArgument, "toy segmenter needs >= 1 bin");
    if (!(cfg_.range_hi > cfg_.range_lo)) throw Error(Errc::InvalidArgument, "toy intensity range is empty");
    if (cfg_.box_radius < 0 || cfg_.downscale < 1) throw Error(Errc::InvalidArgument, "invalid toy config");
  }

  const ToyConfig& config() const { return cfg_; }

  int bin_of(float v) const {
    const double t = (static_cast<double>(v) - cfg_.range_lo) / (cfg_.range_hi - cfg_.range_lo + 1.0);
    return std::clamp(static_cast<int>(std::floor(t * cfg_.bins)), 0, cfg_.bins - 1);
  }

  FeatureVolume encode(const Image& image) const override {
    const auto& shape = image.shape();
    const int nd = shape.ndim();
    const std::size_t channels = static_cast<std::size_t>(cfg_.bins) + 1 + static_cast<std::size_t>(nd);
    const std::size_t n = shape.size();
    std::vector<double> full(n * channels, 0.0);

    const auto smooth = box_mean(image);
    for (std::size_t i = 0; i < n; ++i) {
      double* f = full.data() + i * channels;
      f[bin_of(image[i])] = 1.0;
      f[cfg_.bins] = smooth[i] * cfg_.smooth_weight;
      const GridIndex idx = shape.unravel(i);
      for (int a = 0; a < nd; ++a) {
        const double extent = shape.dim(a) > 1 ? static_cast<double>(shape.dim(a) - 1) : 1.0;
        f[cfg_.bins + 1 + a] = cfg_.coord_weight * static_cast<double>(idx[a]) / extent;
      }
    }
    if (cfg_.downscale == 1) return FeatureVolume(shape, channels, std::move(full));
    return pool(shape, channels, full);
  }

  ProbabilityMap segment(const Image& image, const FeatureVolume& features, const PromptSet& prompts) const override {
    const auto& shape = image.shape();
    feature_downscale(shape, features.shape());
    check_prompts(shape, prompts);

    std::vector<int> bins(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) bins[i] = bin_of(image[i]);
    std::int32_t count = 0;
    const auto comp = detail::label_regions(
        shape, [](std::size_t) { return true; }, [&](std::size_t a, std::size_t b) { return bins[a] == bins[b]; },
        count);

    std::vector<std::uint8_t> keep(static_cast<std::size_t>(count) + 1, 0);
    for (const auto& p : prompts.points) {
      if (p.polarity == Polarity::Positive) keep[static_cast<std::size_t>(comp[shape.linear(p.location)])] = 1;
    }
    for (const auto& p : prompts.points) {
      if (p.polarity == Polarity::Negative) keep[static_cast<std::size_t>(comp[shape.linear(p.location)])] = 0;
    }
    std::vector<double> probs(image.size());
    for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = keep[static_cast<std::size_t>(comp[i])] ? 1.0 : 0.0;
    return ProbabilityMap(shape, std::move(probs));
  }

 private:
  // Mean over the in-grid part of a (2r+1)^n box, separable per axis.
  std::vector<double> box_mean(const Image& image) const {
    const auto& shape = image.shape();
    std::vector<double> sum(image.values().begin(), image.values().end());
    std::vector<double> cnt(image.size(), 1.0);
    const int r = cfg_.box_radius;
    for (int a = 0; a < shape.ndim() && r > 0; ++a) {
      std::vector<double> s2(sum.size(), 0.0), c2(cnt.size(), 0.0);
      const std::size_t st = shape.stride(a);
      for (std::size_t i = 0; i < sum.size(); ++i) {
        const auto pos = shape.unravel(i)[a];
        for (std::int64_t d = -r; d <= r; ++d) {
          const auto q = pos + d;
          if (q < 0 || q >= shape.dim(a)) continue;
          const std::size_t j = static_cast<std::size_t>(static_cast<std::int64_t>(i) + d * static_cast<std::int64_t>(st));
          s2[i] += sum[j];
          c2[i] += cnt[j];
        }
      }
      sum.swap(s2);
      cnt.swap(c2);
    }
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] /= cnt[i];
    return sum;
  }

  FeatureVolume pool(const GridShape& shape, std::size_t channels, const std::vector<double>& full) const {
    const std::int64_t f = cfg_.downscale;
    std::vector<std::int64_t> dims;
    for (int a = 0; a < shape.ndim(); ++a) {
      if (shape.dim(a) % f != 0) {
        throw Error(Errc::ShapeMismatch, "image grid " + shape.str() + " not divisible by downscale " + std::to_string(f));
      }
      dims.push_back(shape.dim(a) / f);
    }
    const GridShape fshape(dims);
    std::vector<double> out(fshape.size() * channels, 0.0);
    std::vector<double> cnt(fshape.size(), 0.0);
    for (std::size_t i = 0; i < shape.size(); ++i) {
      GridIndex idx = shape.unravel(i);
      for (int a = 0; a < shape.ndim(); ++a) idx[a] /= f;
      const std::size_t o = fshape.linear(idx);
      cnt[o] += 1.0;
      for (std::size_t c = 0; c < channels; ++c) out[o * channels + c] += full[i * channels + c];
    }
    for (std::size_t o = 0; o < fshape.size(); ++o)
      for (std::size_t c = 0; c < channels; ++c) out[o * channels + c] /= cnt[o];
    return FeatureVolume(fshape, channels, std::move(out));
  }

  ToyConfig cfg_;
};

}  // namespace promptreg
