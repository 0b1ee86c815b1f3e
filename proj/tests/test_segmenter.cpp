#include <gtest/gtest.h>

#include <functional>
#include <random>
#include <thread>

#include "support.hpp"

using namespace promptreg;
using namespace promptreg::testing;
using json = nlohmann::json;

namespace {

PromptPoint pos(std::int64_t x, std::int64_t y) { return {make_index({x, y}), Polarity::Positive}; }
PromptPoint neg(std::int64_t x, std::int64_t y) { return {make_index({x, y}), Polarity::Negative}; }

// Two bright blobs on a dark background.
Image two_blobs() {
  return boxes_image(12, 8, {{1, 1, 3, 3, 200.0f}, {7, 2, 10, 5, 200.0f}}, 10.0f);
}

bool subset(const RoiMask& a, const RoiMask& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] && !b[i]) return false;
  }
  return true;
}

}  // namespace

TEST(ToyEncode, ConstantImageTwoBins) {
  const ToySegmenter seg(ToyConfig{.bins = 2});
  const Image img(GridShape{4, 3}, 0.0f);
  const auto f = seg.encode(img);
  ASSERT_EQ(f.channels(), 2u + 1u + 2u);
  EXPECT_EQ(f.shape(), img.shape());
  std::set<std::pair<double, double>> coords;
  for (std::size_t i = 0; i < f.locations(); ++i) {
    const auto v = f.vector(i);
    EXPECT_EQ(v[0], 1.0);
    EXPECT_EQ(v[1], 0.0);
    EXPECT_EQ(v[2], 0.0);
    coords.insert({v[3], v[4]});
  }
  EXPECT_EQ(coords.size(), 12u);
}

TEST(ToyEncode, TwoIntensitiesPartitionBins) {
  const ToySegmenter seg(ToyConfig{.bins = 2});
  const auto img = boxes_image(6, 6, {{2, 2, 3, 4, 255.0f}}, 0.0f);
  const auto f = seg.encode(img);
  for (std::size_t i = 0; i < f.locations(); ++i) {
    const bool bright = img[i] == 255.0f;
    EXPECT_EQ(f.vector(i)[0], bright ? 0.0 : 1.0);
    EXPECT_EQ(f.vector(i)[1], bright ? 1.0 : 0.0);
  }
}

TEST(ToyEncode, BoxMeanAtCentre) {
  // smooth channel is weighted by 1/255 by default; use weight 1 to read the raw mean
  const ToySegmenter seg(ToyConfig{.bins = 2, .box_radius = 1, .smooth_weight = 1.0});
  auto img = boxes_image(3, 3, {{1, 1, 1, 1, 9.0f}}, 0.0f);
  const auto f = seg.encode(img);
  EXPECT_DOUBLE_EQ(f.vector(img.shape().linear(make_index({1, 1})))[2], 1.0);
  // corner box covers 4 in-grid cells, one of them the 9
  EXPECT_DOUBLE_EQ(f.vector(0)[2], 9.0 / 4.0);
}

TEST(ToyEncode, DownscaleGivesIntegerFeatureGrid) {
  const ToySegmenter seg(ToyConfig{.downscale = 4});
  const auto f = seg.encode(Image(GridShape{16, 8}, 0.0f));
  EXPECT_EQ(f.shape(), (GridShape{4, 2}));
  EXPECT_EQ(feature_downscale(GridShape{16, 8}, f.shape()), 4);
  EXPECT_THROW(seg.encode(Image(GridShape{10, 8}, 0.0f)), Error);
}

TEST(ToySegment, PositiveSelectsItsComponent) {
  const ToySegmenter seg;
  const auto img = two_blobs();
  const auto f = seg.encode(img);
  const auto m = binarize(seg.segment(img, f, PromptSet{{pos(2, 2)}, {}}));
  EXPECT_EQ(m, box_mask(img.shape(), 1, 1, 3, 3));
}

TEST(ToySegment, NegativeInSameBlobEmpties) {
  const ToySegmenter seg;
  const auto img = two_blobs();
  const auto m = seg.segment(img, seg.encode(img), PromptSet{{pos(2, 2), neg(1, 1)}, {}});
  EXPECT_EQ(cardinality(binarize(m)), 0u);
}

TEST(ToySegment, SetAlgebraOverComponents) {
  const ToySegmenter seg;
  const auto img = two_blobs();
  const auto m = binarize(seg.segment(img, seg.encode(img), PromptSet{{pos(2, 2), pos(8, 3), neg(9, 4)}, {}}));
  // oracle: components of the bright partition, keep A drop B
  const auto bright = box_mask(img.shape(), 1, 1, 3, 3);
  EXPECT_EQ(m, bright);
}

TEST(ToySegment, NoPositiveAndOutOfBounds) {
  const ToySegmenter seg;
  const auto img = two_blobs();
  const auto f = seg.encode(img);
  try {
    seg.segment(img, f, PromptSet{{neg(2, 2)}, {}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NoPositivePrompt);
  }
  try {
    seg.segment(img, f, PromptSet{{pos(12, 0)}, {}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::PointOutOfBounds);
  }
}

TEST(ToySegment, PropertyMonotoneAndDeterministic) {
  const ToySegmenter seg;
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> bin(0, 7);
  for (int t = 0; t < 30; ++t) {
    const GridShape s{10, 9};
    std::vector<float> v(s.size());
    for (auto& x : v) x = static_cast<float>(bin(rng) * 32 + 5);
    const Image img(s, v);
    const auto f = seg.encode(img);
    std::uniform_int_distribution<std::int64_t> ux(0, 9), uy(0, 8);
    PromptSet z{{pos(ux(rng), uy(rng))}, {}};
    const auto base = binarize(seg.segment(img, f, z));
    EXPECT_EQ(seg.segment(img, f, z), seg.segment(img, f, z));
    EXPECT_EQ(base.shape(), s);

    PromptSet more = z;
    more.points.push_back(pos(ux(rng), uy(rng)));
    EXPECT_TRUE(subset(base, binarize(seg.segment(img, f, more))));

    PromptSet fewer = z;
    fewer.points.push_back(neg(ux(rng), uy(rng)));
    EXPECT_TRUE(subset(binarize(seg.segment(img, f, fewer)), base));
  }
}

// ---- remote client against an in-process mock ---------------------------------

namespace {

class MockSegmenterServer {
 public:
  using Handler = std::function<json(const json&)>;

  MockSegmenterServer(Handler encode, Handler segment) {
    svr_.Post("/encode", [encode](const httplib::Request& req, httplib::Response& res) {
      res.set_content(encode(json::parse(req.body)).dump(), "application/json");
    });
    svr_.Post("/segment", [segment](const httplib::Request& req, httplib::Response& res) {
      res.set_content(segment(json::parse(req.body)).dump(), "application/json");
    });
    port_ = svr_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
  }
  ~MockSegmenterServer() {
    svr_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

 private:
  httplib::Server svr_;
  std::thread thread_;
  int port_ = 0;
};

json ones_features(const json& req) {
  const auto dims = req["dims"].get<std::vector<std::int64_t>>();
  std::size_t n = 1;
  for (auto d : dims) n *= static_cast<std::size_t>(d);
  const std::vector<float> v(n * 2, 1.0f);
  return {{"dims", dims}, {"channels", 2}, {"vectors", codec::encode_f32_base64(std::span<const float>(v))}};
}

std::vector<float> fixed_probs(std::size_t n) {
  std::vector<float> v(n, 0.0f);
  for (std::size_t i = 0; i < n; i += 3) v[i] = 1.0f;
  v[1] = 0.25f;
  return v;
}

json echo_mask(const json& req) {
  const auto dims = req["dims"].get<std::vector<std::int64_t>>();
  const auto v = fixed_probs(static_cast<std::size_t>(dims[0] * dims[1]));
  return {{"dims", dims}, {"probs", codec::encode_f32_base64(std::span<const float>(v))}};
}

RemoteOptions quick() {
  RemoteOptions o;
  o.timeout = std::chrono::milliseconds(2000);
  return o;
}

}  // namespace

TEST(RemoteSegmenter, ReturnsTheServedMask) {
  std::vector<json> seen;
  std::mutex mu;
  MockSegmenterServer srv(ones_features, [&](const json& r) {
    std::lock_guard lk(mu);
    seen.push_back(r);
    return echo_mask(r);
  });
  const RemoteSegmenter seg(srv.url(), quick());
  const Image img(GridShape{6, 4}, 3.0f);
  const auto f = seg.encode(img);
  EXPECT_EQ(f.channels(), 2u);
  const auto m = seg.segment(img, f, PromptSet{{pos(1, 2), neg(4, 3)}, {}});
  const auto expect = fixed_probs(24);
  for (std::size_t i = 0; i < 24; ++i) EXPECT_EQ(m[i], static_cast<double>(expect[i]));
  // deterministic round trip
  EXPECT_EQ(seg.segment(img, f, PromptSet{{pos(1, 2), neg(4, 3)}, {}}), m);

  ASSERT_FALSE(seen.empty());
  const auto& pts = seen[0]["points"];
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_EQ(pts[0]["coords"], json({1, 2}));
  EXPECT_EQ(pts[0]["polarity"], "positive");
  EXPECT_EQ(pts[1]["polarity"], "negative");
  EXPECT_EQ(codec::decode_f32_base64(seen[0]["image"].get<std::string>()), std::vector<float>(24, 3.0f));
}

TEST(RemoteSegmenter, ProbabilityOutOfRangeIsProtocolError) {
  MockSegmenterServer srv(ones_features, [](const json& r) {
    auto j = echo_mask(r);
    auto v = codec::decode_f32_base64(j["probs"].get<std::string>());
    v[5] = 1.7f;
    j["probs"] = codec::encode_f32_base64(std::span<const float>(v));
    return j;
  });
  const RemoteSegmenter seg(srv.url(), quick());
  const Image img(GridShape{6, 4}, 0.0f);
  try {
    seg.segment(img, seg.encode(img), PromptSet{{pos(0, 0)}, {}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ProtocolError);
  }
}

TEST(RemoteSegmenter, NonDivisorFeatureGridIsProtocolError) {
  MockSegmenterServer srv(
      [](const json&) {
        const std::vector<float> v(4 * 3, 0.5f);
        return json{{"dims", {4, 3}}, {"channels", 1}, {"vectors", codec::encode_f32_base64(std::span<const float>(v))}};
      },
      echo_mask);
  const RemoteSegmenter seg(srv.url(), quick());
  try {
    seg.encode(Image(GridShape{6, 4}, 0.0f));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ProtocolError);
  }
}

TEST(RemoteSegmenter, WrongShapeAndNanAreProtocolErrors) {
  MockSegmenterServer srv(ones_features, [](const json&) {
    const std::vector<float> v(6, std::nanf(""));
    return json{{"dims", {3, 2}}, {"probs", codec::encode_f32_base64(std::span<const float>(v))}};
  });
  const RemoteSegmenter seg(srv.url(), quick());
  const Image img(GridShape{6, 4}, 0.0f);
  try {
    seg.segment(img, seg.encode(img), PromptSet{{pos(0, 0)}, {}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ProtocolError);
  }
}

TEST(RemoteSegmenter, UnreachableIsTransportError) {
  int port;
  {
    httplib::Server s;
    port = s.bind_to_any_port("127.0.0.1");
  }
  RemoteOptions o;
  o.timeout = std::chrono::milliseconds(300);
  const RemoteSegmenter seg("http://127.0.0.1:" + std::to_string(port), o);
  try {
    seg.encode(Image(GridShape{4, 4}, 0.0f));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::TransportError);
  }
}

TEST(RemoteSegmenter, PayloadLimit) {
  RemoteOptions o;
  o.max_payload = 64;
  const RemoteSegmenter seg("http://127.0.0.1:9", o);
  try {
    seg.encode(Image(GridShape{16, 16}, 0.0f));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::PayloadTooLarge);
  }
}
