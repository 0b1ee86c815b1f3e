#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "support.hpp"

using namespace promptreg;
using namespace promptreg::testing;

namespace {

PromptPoint pos(std::int64_t x, std::int64_t y) { return {make_index({x, y}), Polarity::Positive}; }

FeatureVolume features_2(const GridShape& s, std::vector<double> data) { return FeatureVolume(s, 2, std::move(data)); }

double brute_hausdorff(const std::vector<GridIndex>& a, const std::vector<GridIndex>& b) {
  double best = -1.0;
  for (const auto& p : a) {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& q : b) {
      const double dx = static_cast<double>(p[0] - q[0]), dy = static_cast<double>(p[1] - q[1]);
      m = std::min(m, std::sqrt(dx * dx + dy * dy));
    }
    best = std::max(best, m);
  }
  return best;
}

}  // namespace

// ---- prototype / similarity ------------------------------------------------------

TEST(MaskedPrototype, ConstantFeature) {
  const GridShape s{3, 3};
  std::vector<double> d;
  for (std::size_t i = 0; i < s.size(); ++i) d.insert(d.end(), {2.0, -1.0});
  std::mt19937_64 rng(1);
  const auto roi = random_soft_map(s, rng);
  const auto g = masked_prototype(roi, features_2(s, d));
  EXPECT_NEAR(g.vector[0], 2.0, 1e-12);
  EXPECT_NEAR(g.vector[1], -1.0, 1e-12);
}

TEST(MaskedPrototype, HardAndSoftWeights) {
  const GridShape s{2, 1};
  const auto f = features_2(s, {1.0, 0.0, 0.0, 1.0});
  const auto g = masked_prototype(ProbabilityMap(s, std::vector<double>{1.0, 1.0}), f);
  EXPECT_EQ(g.vector, (std::vector<double>{0.5, 0.5}));
  const auto h = masked_prototype(ProbabilityMap(s, std::vector<double>{0.25, 0.75}), f);
  EXPECT_DOUBLE_EQ(h.vector[0], 0.25);
  EXPECT_DOUBLE_EQ(h.vector[1], 0.75);
}

TEST(MaskedPrototype, Errors) {
  const GridShape s{2, 1};
  try {
    masked_prototype(ProbabilityMap(s, 0.0), features_2(s, {1.0, 0.0, 0.0, 1.0}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyRoi);
  }
  try {
    masked_prototype(ProbabilityMap(s, 1.0), features_2(s, {0.0, 0.0, 0.0, 0.0}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ZeroPrototype);
  }
}

TEST(MaskedPrototype, AreaAveragedDownsampling) {
  // 4x2 image onto a 2x1 feature grid: cell 0 gets mean weight 0.5, cell 1 gets 0
  const GridShape img{4, 2};
  std::vector<double> w(8, 0.0);
  w[img.linear(make_index({0, 0}))] = 1.0;
  w[img.linear(make_index({1, 1}))] = 1.0;
  const auto down = downsample_weights(ProbabilityMap(img, w), GridShape{2, 1});
  EXPECT_EQ(down, (std::vector<double>{0.5, 0.0}));
}

TEST(MaskedPrototype, PropertyConvexHull) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    const GridShape s{5, 4};
    std::vector<double> d(s.size() * 2);
    for (auto& v : d) v = n(rng);
    const auto f = features_2(s, d);
    const auto roi = random_soft_map(s, rng);
    const auto g = masked_prototype(roi, f);
    for (int c = 0; c < 2; ++c) {
      double lo = 1e9, hi = -1e9;
      for (std::size_t i = 0; i < s.size(); ++i) {
        lo = std::min(lo, f.vector(i)[static_cast<std::size_t>(c)]);
        hi = std::max(hi, f.vector(i)[static_cast<std::size_t>(c)]);
      }
      EXPECT_GE(g.vector[static_cast<std::size_t>(c)], lo - 1e-12);
      EXPECT_LE(g.vector[static_cast<std::size_t>(c)], hi + 1e-12);
    }
  }
}

TEST(SimilarityMap, Examples) {
  const GridShape s{4, 1};
  const auto f = features_2(s, {3.0, 4.0, -4.0, 3.0, 4.0, 3.0, 0.0, 0.0});
  const auto sim = similarity_map(Prototype{{3.0, 4.0}, {}}, f);
  EXPECT_DOUBLE_EQ(sim[0], 1.0);
  EXPECT_DOUBLE_EQ(sim[1], 0.0);
  EXPECT_DOUBLE_EQ(sim[2], 24.0 / 25.0);
  EXPECT_EQ(sim[3], 0.0);  // zero-norm feature
  try {
    similarity_map(Prototype{{0.0, 0.0}, {}}, f);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ZeroPrototype);
  }
}

TEST(SimilarityMap, PropertyRangeAndScaleInvariance) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  for (int t = 0; t < 30; ++t) {
    const GridShape s{6, 5};
    std::vector<double> d(s.size() * 2);
    for (auto& v : d) v = n(rng);
    const auto f = features_2(s, d);
    const Prototype p{{n(rng), n(rng)}, {}};
    const double c = scale(rng);
    const Prototype q{{p.vector[0] * c, p.vector[1] * c}, {}};
    const auto a = similarity_map(p, f);
    const auto b = similarity_map(q, f);
    for (std::size_t i = 0; i < s.size(); ++i) {
      EXPECT_GE(a[i], -1.0);
      EXPECT_LE(a[i], 1.0);
      EXPECT_NEAR(a[i], b[i], 1e-12);
    }
    EXPECT_EQ(primary_prompt(a, s), primary_prompt(b, s));
  }
}

TEST(SimilarityMap, ExactScaleInvarianceForPowersOfTwo) {
  const GridShape s{3, 2};
  const auto f = features_2(s, {1, 2, 3, -1, 0.5, 0.25, -2, 7, 0.1, 0.3, 5, 5});
  const auto a = similarity_map(Prototype{{0.3, 0.7}, {}}, f);
  const auto b = similarity_map(Prototype{{0.3 * 8, 0.7 * 8}, {}}, f);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}

// ---- primary prompt -------------------------------------------------------------

TEST(PrimaryPrompt, UniqueMax) {
  const GridShape s{5, 4};
  std::vector<double> v(s.size(), 0.1);
  v[s.linear(make_index({3, 2}))] = 0.9;
  EXPECT_EQ(primary_prompt(SimilarityMap(s, v), s), pos(3, 2));
}

TEST(PrimaryPrompt, TieGoesToLowestIndex) {
  const GridShape s{4, 4};
  std::vector<double> v(s.size(), 0.0);
  v[s.linear(make_index({1, 1}))] = 0.5;
  v[s.linear(make_index({2, 0}))] = 0.5;
  EXPECT_EQ(primary_prompt(SimilarityMap(s, v), s), pos(1, 1));
}

TEST(PrimaryPrompt, CellCentreUnderDownscale) {
  const GridShape fs{4, 4};
  std::vector<double> v(fs.size(), 0.0);
  v[fs.linear(make_index({1, 1}))] = 1.0;
  EXPECT_EQ(primary_prompt(SimilarityMap(fs, v), GridShape{16, 16}), pos(6, 6));
}

// ---- Hausdorff --------------------------------------------------------------------

TEST(DirectedHausdorff, Examples) {
  const std::vector<double> sp{1.0, 1.0};
  const std::vector<GridIndex> a{make_index({2, 1}), make_index({0, 3})};
  const auto same = directed_hausdorff(a, a, sp);
  EXPECT_EQ(same.distance, 0.0);
  EXPECT_EQ(same.argmax, a[0]);

  const std::vector<GridIndex> o{make_index({0, 0})}, t{make_index({3, 4})};
  const auto r = directed_hausdorff(o, t, sp);
  EXPECT_EQ(r.distance, 5.0);
  EXPECT_EQ(r.argmax, o[0]);

  const std::vector<GridIndex> two{make_index({0, 0}), make_index({10, 0})};
  const auto r2 = directed_hausdorff(two, o, sp);
  EXPECT_EQ(r2.distance, 10.0);
  EXPECT_EQ(r2.argmax, make_index({10, 0}));

  try {
    directed_hausdorff(std::vector<GridIndex>{}, o, sp);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyContour);
  }
}

TEST(DirectedHausdorff, SpacingScaled) {
  const std::vector<double> sp{1.0, 2.0};
  const std::vector<GridIndex> a{make_index({0, 0})}, b{make_index({3, 2})};
  EXPECT_EQ(directed_hausdorff(a, b, sp).distance, 5.0);
}

TEST(DirectedHausdorff, PropertyBruteForceOracle) {
  std::mt19937_64 rng(4242);
  std::uniform_int_distribution<std::int64_t> c(0, 63);
  std::uniform_int_distribution<int> n(1, 200);
  const std::vector<double> sp{1.0, 1.0};
  for (int t = 0; t < 100; ++t) {
    std::vector<GridIndex> a(static_cast<std::size_t>(n(rng))), b(static_cast<std::size_t>(n(rng)));
    for (auto& p : a) p = make_index({c(rng), c(rng)});
    for (auto& p : b) p = make_index({c(rng), c(rng)});
    const auto r = directed_hausdorff(a, b, sp);
    EXPECT_EQ(r.distance, brute_hausdorff(a, b));
    // argmax realises the distance and is the first such point
    const auto first = std::find_if(a.begin(), a.end(), [&](const GridIndex& p) {
      return brute_hausdorff({p}, b) == r.distance;
    });
    EXPECT_EQ(r.argmax, *first);
    // zero iff a is a subset of b
    const bool sub = std::all_of(a.begin(), a.end(), [&](const GridIndex& p) { return std::count(b.begin(), b.end(), p) > 0; });
    EXPECT_EQ(directed_hausdorff(a, b, sp).distance == 0.0, sub);
    std::vector<GridIndex> ab = b;
    ab.insert(ab.end(), a.begin(), a.end());
    EXPECT_EQ(directed_hausdorff(a, ab, sp).distance, 0.0);
  }
}

TEST(ContourDiscrepancy, ArgmaxPointsLieOnContours) {
  const GridShape s{20, 20};
  const auto mx = box_mask(s, 2, 2, 6, 6);
  const auto my = box_mask(s, 4, 3, 14, 8);
  const auto d = contour_discrepancy(mx, my);
  const auto cx = extract_contour(mx), cy = extract_contour(my);
  EXPECT_TRUE(std::count(cx.begin(), cx.end(), d.x_star));
  EXPECT_TRUE(std::count(cy.begin(), cy.end(), d.y_star));
  EXPECT_EQ(d.d_xy, brute_hausdorff(cx, cy));
  EXPECT_EQ(d.d_yx, brute_hausdorff(cy, cx));
  EXPECT_EQ(brute_hausdorff({d.x_star}, cy), d.d_xy);
  EXPECT_EQ(brute_hausdorff({d.y_star}, cx), d.d_yx);
}

// ---- auxiliary step ---------------------------------------------------------------

TEST(AuxiliaryStep, NegativeAtYStar) {
  const ContourDiscrepancy d{35.0, 10.0, make_index({1, 1}), make_index({7, 8})};
  const auto r = auxiliary_step(d, AuxConfig{}, GridShape{32, 32});
  ASSERT_TRUE(std::holds_alternative<PromptPoint>(r));
  EXPECT_EQ(std::get<PromptPoint>(r), (PromptPoint{make_index({7, 8}), Polarity::Negative}));
}

TEST(AuxiliaryStep, ConvergedWithinSigma) {
  const ContourDiscrepancy d{5.0, 10.0, make_index({1, 1}), make_index({7, 8})};
  EXPECT_TRUE(std::holds_alternative<Converged>(auxiliary_step(d, AuxConfig{}, GridShape{32, 32})));
}

TEST(AuxiliaryStep, PositiveDescentAndAsWritten) {
  const ContourDiscrepancy d{10.0, 40.0, make_index({10, 10}), make_index({14, 13})};
  AuxConfig cfg;
  auto r = auxiliary_step(d, cfg, GridShape{32, 32});
  ASSERT_TRUE(std::holds_alternative<PromptPoint>(r));
  EXPECT_EQ(std::get<PromptPoint>(r), pos(18, 16));
  cfg.gradient_sign = GradientSign::AsWritten;
  r = auxiliary_step(d, cfg, GridShape{32, 32});
  EXPECT_EQ(std::get<PromptPoint>(r), pos(2, 4));
  // clamped to the grid
  r = auxiliary_step(d, cfg, GridShape{32, 32});
  const ContourDiscrepancy edge{10.0, 40.0, make_index({1, 1}), make_index({5, 5})};
  EXPECT_EQ(std::get<PromptPoint>(auxiliary_step(edge, cfg, GridShape{32, 32})), pos(0, 0));
}

TEST(AuxConfig, Validation) {
  AuxConfig c;
  c.sigma = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.epsilon = -1.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.max_iters = 0;
  EXPECT_THROW(c.validate(), Error);
}

// ---- full search ----------------------------------------------------------------

TEST(SearchCorrespondingPrompt, IdenticalImages) {
  const ToySegmenter seg;
  const auto img = boxes_image(32, 32, {{4, 4, 12, 12, 208.0f}, {18, 20, 28, 27, 112.0f}});
  const auto r = search_corresponding_prompt(img, img, single_positive(make_index({20, 22})), seg, AuxConfig{});
  ASSERT_GE(r.prompts_y.points.size(), 1u);
  const auto blob = box_mask(img.shape(), 18, 20, 28, 27);
  EXPECT_TRUE(blob.at(r.prompts_y.points[0].location));
  EXPECT_EQ(dice(binarize(r.roi_x), binarize(r.roi_y)), 1.0);
}

TEST(SearchCorrespondingPrompt, TranslatedBlobIsRecoveredExactly) {
  const ToySegmenter seg;
  const auto x = boxes_image(40, 32, {{5, 6, 13, 14, 208.0f}, {22, 18, 30, 26, 80.0f}});
  const auto y = boxes_image(40, 32, {{10, 6, 18, 14, 208.0f}, {27, 18, 35, 26, 80.0f}});
  const auto r = search_corresponding_prompt(x, y, single_positive(make_index({8, 9})), seg, AuxConfig{});
  EXPECT_EQ(binarize(r.roi_y), box_mask(y.shape(), 10, 6, 18, 14));
  EXPECT_EQ(r.stop, SearchStop::Converged);
}

TEST(SearchCorrespondingPrompt, OnePrimaryPerPositivePoint) {
  const ToySegmenter seg;
  const auto img = boxes_image(32, 32, {{2, 2, 10, 10, 208.0f}, {20, 20, 29, 29, 208.0f}, {2, 20, 10, 29, 208.0f}});
  PromptSet z{{pos(5, 5), pos(24, 24), pos(5, 25)}, {}};
  const auto r = search_corresponding_prompt(img, img, z, seg, AuxConfig{});
  EXPECT_EQ(r.primary_count, 3u);
  ASSERT_GE(r.prompts_y.points.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(r.prompts_y.points[i].polarity, Polarity::Positive);
}

TEST(SearchCorrespondingPrompt, EmptyMovingRoi) {
  // a remote-like segmenter that never finds anything
  struct Nothing final : Segmenter {
    FeatureVolume encode(const Image& img) const override { return ToySegmenter().encode(img); }
    ProbabilityMap segment(const Image& img, const FeatureVolume&, const PromptSet&) const override {
      return ProbabilityMap(img.shape(), 0.0);
    }
  } seg;
  const auto img = disc_image(24, 24, 12, 12, 5);
  try {
    search_corresponding_prompt(img, img, single_positive(make_index({12, 12})), seg, AuxConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyRoi);
  }
}

TEST(SearchCorrespondingPrompt, PropertyIterationBoundAndStopReason) {
  const ToySegmenter seg;
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    SyntheticSpec spec;
    spec.seed = seed;
    spec.occlude = seed % 3 == 0;
    const auto p = gen_synthetic_pair(spec);
    auto rng = prompt_rng(seed);
    const auto zs = sample_prompts(p.moving, PromptPolicy::RandomAnywhere, 3, nullptr, rng);
    for (double sigma : {1.0, 5.0, 20.0}) {
      AuxConfig cfg;
      cfg.sigma = sigma;
      cfg.max_iters = 4;
      for (const auto& z : zs) {
        const auto r = search_corresponding_prompt(p.moving, p.fixed, z, seg, cfg);
        EXPECT_LE(r.aux_steps, cfg.max_iters);
        EXPECT_GE(r.prompts_y.points.size(), r.primary_count);
        EXPECT_EQ(r.prompts_y.points.size(), r.primary_count + static_cast<std::size_t>(r.aux_steps));
        if (r.stop == SearchStop::Converged) {
          ASSERT_FALSE(r.history.empty());
          EXPECT_LT(std::abs(r.history.back().d_xy - r.history.back().d_yx), sigma);
        } else {
          EXPECT_TRUE(r.stop == SearchStop::IterationCap || r.stop == SearchStop::FixedRoiEmptied ||
                      r.stop == SearchStop::PrimaryEmpty)
              << to_string(r.stop);
        }
        if (r.stop == SearchStop::IterationCap) EXPECT_EQ(r.aux_steps, cfg.max_iters);
      }
    }
  }
}

TEST(SearchCorrespondingPrompt, NegativeThatEmptiesIsRolledBack) {
  const ToySegmenter seg;
  // moving: big square; fixed: small square of the same intensity, so d_xy > d_yx
  // and the negative lands on the fixed ROI itself
  const auto x = boxes_image(40, 40, {{5, 5, 34, 34, 208.0f}});
  const auto y = boxes_image(40, 40, {{17, 17, 21, 21, 208.0f}});
  AuxConfig cfg;
  cfg.sigma = 1.0;
  const auto r = search_corresponding_prompt(x, y, single_positive(make_index({19, 19})), seg, cfg);
  EXPECT_EQ(r.stop, SearchStop::FixedRoiEmptied);
  EXPECT_GT(cardinality(binarize(r.roi_y)), 0u);
  EXPECT_EQ(r.prompts_y.points.size(), r.primary_count);
}

// ---- transforms ---------------------------------------------------------------

TEST(SpatialTransform, FlipMapsPointAboutCentre) {
  const GridShape s{5, 7};
  const auto out = apply_to_points(SpatialTransform::flip_h(), PromptSet{{pos(1, 4)}, {}}, s);
  EXPECT_EQ(out.points[0], pos(3, 4));
  const auto v = apply_to_points(SpatialTransform::flip_v(), PromptSet{{pos(1, 4)}, {}}, s);
  EXPECT_EQ(v.points[0], pos(1, 2));
}

TEST(SpatialTransform, FullTurnIsIdentity) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(0.0f, 255.0f);
  std::vector<float> v(15 * 11);
  for (auto& x : v) x = u(rng);
  const Image img(GridShape{15, 11}, v);
  const auto out = apply_to_image(SpatialTransform::rotation(360.0), img);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(out[i], v[i], 1e-6);
}

TEST(SpatialTransform, ScalingRoundTripKeepsBlob) {
  const auto img = disc_image(48, 48, 23.5, 23.5, 8.0, 1.0f, 0.0f);
  std::vector<double> pv(img.values().begin(), img.values().end());
  const ProbabilityMap m(img.shape(), pv);
  const auto back = apply_to_map(SpatialTransform::scaling(0.5), apply_to_map(SpatialTransform::scaling(2.0), m));
  EXPECT_GE(dice(binarize(back), binarize(m)), 0.9);
}

TEST(SpatialTransform, Inverses) {
  EXPECT_EQ(invert(SpatialTransform::flip_v()), SpatialTransform::flip_v());
  EXPECT_EQ(invert(SpatialTransform::rotation(90.0)), SpatialTransform::rotation(270.0));
  EXPECT_EQ(invert(SpatialTransform::scaling(2.0)), SpatialTransform::scaling(0.5));
  const auto c = SpatialTransform::composite({SpatialTransform::flip_h(), SpatialTransform::rotation(90.0)});
  const auto m = mat_mul(linear_part(invert(c)), linear_part(c));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(m[i][j], i == j ? 1.0 : 0.0, 1e-12);
}

TEST(SpatialTransform, OutOfGridPromptThrows) {
  try {
    apply_to_points(SpatialTransform::scaling(2.5), PromptSet{{pos(0, 0)}, {}}, GridShape{10, 10});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::PointOutOfBounds);
  }
}

TEST(SampleTransform, KindsRangesDeterminism) {
  const TransformSampling only{{TransformKind::FlipH}, 3};
  EXPECT_EQ(sample_transform(only, 0).kind, TransformKind::FlipH);
  const TransformSampling all{{TransformKind::FlipH, TransformKind::FlipV, TransformKind::Rotation, TransformKind::Scaling}, 77};
  EXPECT_EQ(sample_transform(all, 0), sample_transform(all, 0));
  const TransformSampling sc{{TransformKind::Scaling}, 5};
  double lo = 10, hi = 0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const auto t = sample_transform(sc, i);
    lo = std::min(lo, t.factor);
    hi = std::max(hi, t.factor);
  }
  EXPECT_GE(lo, kMinScale);
  EXPECT_LE(hi, kMaxScale);
  EXPECT_LT(lo, 0.6);
  EXPECT_GT(hi, 2.4);
  const TransformSampling rot{{TransformKind::Rotation}, 5};
  for (std::uint64_t i = 0; i < 200; ++i) {
    const auto a = sample_transform(rot, i).angle_deg;
    EXPECT_GE(a, 0.0);
    EXPECT_LT(a, 360.0);
  }
  try {
    sample_transform(TransformSampling{{}, 0}, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NoKindsEnabled);
  }
}

// ---- marginalization ----------------------------------------------------------

namespace {

struct MargFixture {
  ToySegmenter seg;
  Image x = boxes_image(32, 32, {{6, 6, 15, 15, 208.0f}, {19, 8, 27, 24, 112.0f}});
  Image y = boxes_image(32, 32, {{8, 7, 17, 16, 208.0f}, {20, 10, 28, 26, 112.0f}});
  EncodedPair enc = EncodedPair::encode(x, y, seg);
  PromptSet z = single_positive(make_index({10, 10}), "a");
};

}  // namespace

TEST(Marginalization, ZeroTransformsEqualsPlainSearch) {
  MargFixture f;
  MarginalizationConfig m;
  m.num_transforms = 0;
  const auto r = marginalized_correspondence(f.enc, f.z, f.seg, AuxConfig{}, m);
  const auto s = search_corresponding_prompt(f.x, f.y, f.z, f.seg, AuxConfig{});
  EXPECT_EQ(r.roi_x, s.roi_x);
  EXPECT_EQ(r.roi_y, s.roi_y);
  EXPECT_EQ(r.prompts_y, s.prompts_y);
  EXPECT_EQ(r.branches.size(), 1u);
}

TEST(Marginalization, IdentityCopiesEqualZeroTransforms) {
  MargFixture f;
  const auto base = marginalized_correspondence(f.enc, f.z, f.seg, AuxConfig{}, MarginalizationConfig{});
  const std::vector<SpatialTransform> ids(4, SpatialTransform::identity());
  const auto r = marginalize_over(f.enc, f.z, f.seg, AuxConfig{}, ids);
  EXPECT_EQ(r.roi_x, base.roi_x);
  EXPECT_EQ(r.roi_y, base.roi_y);
  EXPECT_EQ(r.prompts_y, base.prompts_y);
}

TEST(Marginalization, BranchOrderDoesNotMatter) {
  MargFixture f;
  MarginalizationConfig m;
  m.num_transforms = 5;
  m.rng_seed = 99;
  const auto r = marginalized_correspondence(f.enc, f.z, f.seg, AuxConfig{}, m);
  auto shuffled = r.branches;
  std::mt19937_64 rng(1);
  for (int t = 0; t < 5; ++t) {
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto c = combine_branches(shuffled);
    EXPECT_EQ(c.roi_x, r.roi_x);
    EXPECT_EQ(c.roi_y, r.roi_y);
    EXPECT_EQ(c.prompts_y, r.prompts_y);
  }
}

TEST(Marginalization, PropertyRangeJointTransformDeterminism) {
  MargFixture f;
  MarginalizationConfig m;
  m.num_transforms = 6;
  m.rng_seed = 1234;
  const auto r = marginalized_correspondence(f.enc, f.z, f.seg, AuxConfig{}, m);
  for (double v : r.roi_x.values()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  for (double v : r.roi_y.values()) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  EXPECT_EQ(r.branches[0].transform, SpatialTransform::identity());
  for (const auto& b : r.branches) {
    if (b.failure.empty() || b.ok) EXPECT_EQ(b.moving_prompts, apply_to_points(b.transform, f.z, f.x.shape()));
    EXPECT_EQ(b.transform, branch_transform(m, b.index));
  }
  const auto again = marginalized_correspondence(f.enc, f.z, f.seg, AuxConfig{}, m);
  EXPECT_EQ(again.roi_x, r.roi_x);
  EXPECT_EQ(again.roi_y, r.roi_y);
}

TEST(Marginalization, SymmetricBlobUnderFlipsIsUnchanged) {
  const ToySegmenter seg;
  const auto x = boxes_image(16, 16, {{5, 5, 10, 10, 208.0f}});
  const auto enc = EncodedPair::encode(x, x, seg);
  const auto z = single_positive(make_index({7, 7}));
  MarginalizationConfig m;
  m.num_transforms = 4;
  m.kinds = {TransformKind::FlipH, TransformKind::FlipV};
  const auto r = marginalized_correspondence(enc, z, seg, AuxConfig{}, m);
  const auto plain = search_corresponding_prompt(x, x, z, seg, AuxConfig{});
  EXPECT_EQ(r.valid_branches(), 5u);
  EXPECT_EQ(r.roi_x, plain.roi_x);
}

TEST(Marginalization, OutOfGridBranchesAreDropped) {
  const ToySegmenter seg;
  const auto x = boxes_image(20, 20, {{0, 0, 4, 4, 208.0f}});
  const auto enc = EncodedPair::encode(x, x, seg);
  const std::vector<SpatialTransform> ts{SpatialTransform::identity(), SpatialTransform::scaling(2.5),
                                         SpatialTransform::flip_h()};
  const auto r = marginalize_over(enc, single_positive(make_index({0, 0})), seg, AuxConfig{}, ts);
  EXPECT_EQ(r.failed_branches(), 1u);
  EXPECT_FALSE(r.branches[1].ok);
  EXPECT_EQ(r.valid_branches(), 2u);
}

TEST(Marginalization, AllBranchesFailed) {
  struct Nothing final : Segmenter {
    FeatureVolume encode(const Image& img) const override { return ToySegmenter().encode(img); }
    ProbabilityMap segment(const Image& img, const FeatureVolume&, const PromptSet&) const override {
      return ProbabilityMap(img.shape(), 0.0);
    }
  } seg;
  const auto x = disc_image(20, 20, 10, 10, 4);
  MarginalizationConfig m;
  m.num_transforms = 2;
  try {
    marginalized_correspondence(x, x, single_positive(make_index({10, 10})), seg, AuxConfig{}, m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::AllBranchesFailed);
  }
}

TEST(Marginalization, NoKindsEnabled) {
  MargFixture f;
  MarginalizationConfig m;
  m.num_transforms = 2;
  m.kinds.clear();
  try {
    marginalized_correspondence(f.enc, f.z, f.seg, AuxConfig{}, m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NoKindsEnabled);
  }
}
